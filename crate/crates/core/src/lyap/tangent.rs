use super::embed::OrbitIndexSet;
use super::matrix::SquareMatrix;
use super::LyapError;

/// A Cholesky pivot at or below this fraction of the largest Gram diagonal
/// counts as singular.
pub const PIVOT_TOL: f64 = 1e-12;
/// Ridge strength relative to `trace(Gram) / d`.
pub const RIDGE_SCALE: f64 = 1e-9;

/// Companion-form local linear map fitted around one reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentMap {
    pub matrix: SquareMatrix,
    /// Last row of `matrix`.
    pub coefficients: Vec<f64>,
    /// Whether the normal equations needed the ridge term.
    pub regularized: bool,
}

impl TangentMap {
    /// Shift rows above a given last row.
    pub fn companion(coefficients: Vec<f64>, regularized: bool) -> Self {
        let d = coefficients.len();
        let mut matrix = SquareMatrix::zeros(d);
        for r in 0..d.saturating_sub(1) {
            matrix[(r, r + 1)] = 1.0;
        }
        for (c, &a) in coefficients.iter().enumerate() {
            matrix[(d - 1, c)] = a;
        }
        TangentMap {
            matrix,
            coefficients,
            regularized,
        }
    }
}

/// Solve `g x = b` by Cholesky. Returns `None` when a pivot is `<= floor`.
fn cholesky_solve(g: &SquareMatrix, b: &[f64], floor: f64) -> Option<Vec<f64>> {
    let d = g.dim();
    let mut l = SquareMatrix::zeros(d);
    for j in 0..d {
        let mut pivot = g[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > floor) {
            return None;
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..d {
            let mut s = g[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Some(x)
}

/// Fit the tangent map at reference index `i`.
///
/// Reduced coordinates are `z_k = (x_k, x_{k+m}, ..., x_{k+(d-1)m})`. The
/// last row `a` solves `a · (z_j - z_i) ≈ x_{j+dm} - x_{i+dm}` over the
/// neighbours in least squares, via the normal equations. A ridge of
/// `RIDGE_SCALE * trace / d` is added only when the plain Cholesky fails.
pub fn fit_tangent_map(
    series: &[f64],
    i: usize,
    neighbors: &OrbitIndexSet,
    d: usize,
    m: usize,
) -> Result<TangentMap, LyapError> {
    let horizon = d * m;
    let last = neighbors.neighbors.iter().copied().chain([i]).max().unwrap_or(i);
    if last + horizon >= series.len() {
        return Err(LyapError::SeriesTooShort {
            len: series.len(),
            needed: last + horizon + 1,
        });
    }

    let mut gram = SquareMatrix::zeros(d);
    let mut rhs = vec![0.0; d];
    let mut displacement = vec![0.0; d];
    let mut any_nonzero = false;
    for &j in &neighbors.neighbors {
        for (c, slot) in displacement.iter_mut().enumerate() {
            *slot = series[j + c * m] - series[i + c * m];
        }
        any_nonzero |= displacement.iter().any(|&v| v != 0.0);
        let target = series[j + horizon] - series[i + horizon];
        for r in 0..d {
            rhs[r] += displacement[r] * target;
            for c in 0..d {
                gram[(r, c)] += displacement[r] * displacement[c];
            }
        }
    }
    if !any_nonzero {
        return Err(LyapError::DegenerateNeighborhood { index: i });
    }

    let max_diag = (0..d).map(|k| gram[(k, k)]).fold(0.0, f64::max);
    if let Some(a) = cholesky_solve(&gram, &rhs, PIVOT_TOL * max_diag) {
        return Ok(TangentMap::companion(a, false));
    }
    let trace: f64 = (0..d).map(|k| gram[(k, k)]).sum();
    let lambda = RIDGE_SCALE * trace / d as f64;
    let mut ridged = gram.clone();
    for k in 0..d {
        ridged[(k, k)] += lambda;
    }
    cholesky_solve(&ridged, &rhs, 0.0)
        .map(|a| TangentMap::companion(a, true))
        .ok_or(LyapError::DegenerateNeighborhood { index: i })
}
