use super::matrix::SquareMatrix;

/// Lower bound applied to R diagonals before taking logs.
pub const EPS_FLOOR: f64 = 1e-12;

/// Householder QR of a square matrix with `diag(R) >= 0`.
///
/// A column that is already zero below the diagonal gets no reflection.
/// A remaining subcolumn of norm `<= EPS_FLOOR` is treated as exactly zero:
/// its `R_kk` would be floored anyway, and reflecting rounding noise would
/// make the frame of a rank-deficient product arbitrary.
pub fn householder_qr(a: &SquareMatrix) -> (SquareMatrix, SquareMatrix) {
    let n = a.dim();
    let mut r = a.clone();
    let mut q = SquareMatrix::identity(n);
    let mut v = vec![0.0; n];

    for k in 0..n.saturating_sub(1) {
        let alpha = r[(k, k)];
        let tail: f64 = (k + 1..n).map(|i| r[(i, k)] * r[(i, k)]).sum();
        let norm = (alpha * alpha + tail).sqrt();
        if norm <= EPS_FLOOR {
            for i in k..n {
                r[(i, k)] = 0.0;
            }
            continue;
        }
        if tail == 0.0 {
            continue;
        }
        let beta = if alpha >= 0.0 { -norm } else { norm };
        v[k] = alpha - beta;
        for i in k + 1..n {
            v[i] = r[(i, k)];
        }
        let vtv: f64 = (k..n).map(|i| v[i] * v[i]).sum();
        let scale = 2.0 / vtv;
        // R <- H R
        for j in k..n {
            let dot: f64 = (k..n).map(|i| v[i] * r[(i, j)]).sum::<f64>() * scale;
            for i in k..n {
                r[(i, j)] -= dot * v[i];
            }
        }
        for i in k + 1..n {
            r[(i, k)] = 0.0;
        }
        // Q <- Q H
        for i in 0..n {
            let dot: f64 = (k..n).map(|c| q[(i, c)] * v[c]).sum::<f64>() * scale;
            for c in k..n {
                q[(i, c)] -= dot * v[c];
            }
        }
    }

    if n > 0 && r[(n - 1, n - 1)].abs() <= EPS_FLOOR {
        r[(n - 1, n - 1)] = 0.0;
    }
    for k in 0..n {
        if r[(k, k)] < 0.0 {
            for j in 0..n {
                r[(k, j)] = -r[(k, j)];
                q[(j, k)] = -q[(j, k)];
            }
        }
    }
    (q, r)
}

/// Running product `T_K ... T_1` kept in `Q R` form.
#[derive(Debug, Clone)]
pub struct QrAccumulator {
    q: SquareMatrix,
    sums: Vec<f64>,
    steps: usize,
}

impl QrAccumulator {
    pub fn new(d: usize) -> Self {
        QrAccumulator {
            q: SquareMatrix::identity(d),
            sums: vec![0.0; d],
            steps: 0,
        }
    }

    pub fn push(&mut self, map: &SquareMatrix) {
        let (q, r) = householder_qr(&map.matmul(&self.q));
        for (k, s) in self.sums.iter_mut().enumerate() {
            *s += r[(k, k)].max(EPS_FLOOR).ln();
        }
        self.q = q;
        self.steps += 1;
    }

    pub fn log_sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Sum of `ln R_kk` over the QR-accumulated product of `maps`, plus the
/// number of maps.
pub fn qr_accumulate<'a, I>(d: usize, maps: I) -> (Vec<f64>, usize)
where
    I: IntoIterator<Item = &'a SquareMatrix>,
{
    let mut acc = QrAccumulator::new(d);
    for m in maps {
        acc.push(m);
    }
    (acc.sums, acc.steps)
}
