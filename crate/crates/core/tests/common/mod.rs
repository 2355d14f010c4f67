#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;

use lyapdet::ingest::{read_idx_files, Dataset};
use nalgebra::{DMatrix, DVector};

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn mnist_subset() -> Dataset {
    let dir = repo_root().join("data/mnist-1k");
    read_idx_files(
        "mnist",
        &dir.join("images-idx3-ubyte"),
        Some(&dir.join("labels-idx1-ubyte")),
    )
    .expect("bundled MNIST subset")
}

pub fn test_data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// SplitMix64 stream mapped to [0,1) with 53-bit resolution; mirrors
/// `uniform_series` in tools/lyap_reference.py.
pub fn uniform_series(seed: u64, n: usize) -> Vec<f64> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            (z >> 11) as f64 * 2f64.powi(-53)
        })
        .collect()
}

pub fn logistic_orbit(x0: f64, n: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(n);
    x.push(x0);
    for t in 0..n - 1 {
        x.push(4.0 * x[t] * (1.0 - x[t]));
    }
    x
}

/// Straight-line reimplementation of the estimator on nalgebra: SVD least
/// squares, nalgebra QR, explicit neighbour sort. Shares only the decision
/// constants with the library.
pub fn oracle_spectrum(
    x: &[f64],
    emb_dim: usize,
    d: usize,
    min_nb: usize,
    min_tsep: usize,
    tau: f64,
) -> Vec<f64> {
    let n = x.len();
    let m = (emb_dim - 1) / (d - 1);
    let last = n - 1 - d * m;
    let range = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
    let tie = 1e-9 * range;
    let mut q = DMatrix::<f64>::identity(d, d);
    let mut sums = vec![0.0; d];
    let mut steps = 0usize;
    let mut i = 0;
    while i <= last {
        let mut cands: Vec<(f64, usize)> = (0..=last)
            .filter(|&j| j != i && (i as i64 - j as i64).unsigned_abs() as usize > min_tsep)
            .map(|j| {
                let dist = (0..emb_dim)
                    .map(|c| (x[i + c] - x[j + c]).abs())
                    .fold(0.0, f64::max);
                (dist, j)
            })
            .collect();
        cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let r = cands[min_nb - 1].0;
        let nb: Vec<usize> = cands.iter().filter(|c| c.0 <= r + tie).map(|c| c.1).collect();
        let xm = DMatrix::from_fn(nb.len(), d, |row, c| x[nb[row] + c * m] - x[i + c * m]);
        let y = DVector::from_fn(nb.len(), |row, _| x[nb[row] + d * m] - x[i + d * m]);
        let a: DVector<f64> = if xm.iter().all(|&v| v == 0.0) {
            DVector::zeros(d)
        } else {
            let gram = xm.transpose() * &xm;
            let rhs = xm.transpose() * &y;
            let max_diag = (0..d).map(|k| gram[(k, k)]).fold(0.0, f64::max);
            if pivots_ok(&gram, 1e-12 * max_diag) {
                xm.clone().svd(true, true).solve(&y, 0.0).unwrap()
            } else {
                let lam = 1e-9 * gram.trace() / d as f64;
                (gram + DMatrix::identity(d, d) * lam).lu().solve(&rhs).unwrap()
            }
        };
        let mut t = DMatrix::<f64>::zeros(d, d);
        for r in 0..d - 1 {
            t[(r, r + 1)] = 1.0;
        }
        for c in 0..d {
            t[(d - 1, c)] = a[c];
        }
        let qr = (t * &q).qr();
        let (mut qn, mut rn) = (qr.q(), qr.r());
        for k in 0..d {
            if rn[(k, k)] < 0.0 {
                rn.row_mut(k).neg_mut();
                qn.column_mut(k).neg_mut();
            }
        }
        for k in 0..d {
            sums[k] += rn[(k, k)].max(1e-12).ln();
        }
        q = qn;
        steps += 1;
        i += m;
    }
    sums.iter().map(|s| s / (steps as f64 * m as f64 * tau)).collect()
}

/// Unpivoted Cholesky: every pivot strictly above `floor`.
fn pivots_ok(g: &DMatrix<f64>, floor: f64) -> bool {
    let d = g.nrows();
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let p = g[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if !(p > floor) {
            return false;
        }
        l[(j, j)] = p.sqrt();
        for r in j + 1..d {
            l[(r, j)] = (g[(r, j)] - (0..j).map(|k| l[(r, k)] * l[(j, k)]).sum::<f64>()) / l[(j, j)];
        }
    }
    true
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
