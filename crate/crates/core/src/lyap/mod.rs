//! Lyapunov spectrum of a scalar series from local tangent maps.
//!
//! Three stages:
//!
//! 1. delay-embed the series with lag 1 in `emb_dim` dimensions;
//! 2. around every `m`-th orbit point, fit a `matrix_dim × matrix_dim`
//!    companion-form map from the Chebyshev neighbourhood, using the
//!    reduced coordinates `(x_k, x_{k+m}, ..., x_{k+(d-1)m})` with
//!    `m = (emb_dim - 1) / (matrix_dim - 1)`;
//! 3. push the maps through a QR accumulation and average `ln R_kk`.
//!
//! Exponents are in nats per `tau` and keep the accumulation order; they are
//! not sorted.

mod embed;
mod matrix;
mod qr;
mod tangent;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::TimeSeries;

pub use embed::{chebyshev, delay_embed, find_neighbors, OrbitIndexSet};
pub use matrix::SquareMatrix;
pub use qr::{householder_qr, qr_accumulate, QrAccumulator, EPS_FLOOR};
pub use tangent::{fit_tangent_map, TangentMap, PIVOT_TOL, RIDGE_SCALE};

/// Neighbour distances within this fraction of the series range of the
/// radius count as ties.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapError {
    #[error("invalid estimator parameters: {0}")]
    InvalidParams(String),
    #[error("series of length {len} too short, need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("orbit point {index}: {found} neighbour candidates, need {needed}")]
    NotEnoughNeighbors {
        index: usize,
        found: usize,
        needed: usize,
    },
    #[error("orbit point {index}: all neighbour displacements are zero")]
    DegenerateNeighborhood { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovParams {
    pub emb_dim: usize,
    pub matrix_dim: usize,
    pub min_nb: usize,
    pub min_tsep: usize,
    pub tau: f64,
}

impl Default for LyapunovParams {
    /// `emb_dim=10, matrix_dim=4, min_nb=min(2*4, 4+4)=8, min_tsep=0, tau=1`.
    fn default() -> Self {
        let matrix_dim = 4;
        LyapunovParams {
            emb_dim: 10,
            matrix_dim,
            min_nb: (2 * matrix_dim).min(matrix_dim + 4),
            min_tsep: 0,
            tau: 1.0,
        }
    }
}

impl LyapunovParams {
    /// Params with `min_nb` set to `min(2d, d+4)`.
    pub fn new(emb_dim: usize, matrix_dim: usize) -> Result<Self, LyapError> {
        let p = LyapunovParams {
            emb_dim,
            matrix_dim,
            min_nb: (2 * matrix_dim).min(matrix_dim + 4),
            min_tsep: 0,
            tau: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LyapError> {
        let bad = |msg: String| Err(LyapError::InvalidParams(msg));
        if self.matrix_dim < 2 {
            return bad(format!("matrix_dim must be >= 2, got {}", self.matrix_dim));
        }
        if self.emb_dim < self.matrix_dim {
            return bad(format!(
                "emb_dim {} smaller than matrix_dim {}",
                self.emb_dim, self.matrix_dim
            ));
        }
        if !(self.emb_dim - 1).is_multiple_of(self.matrix_dim - 1) {
            return bad(format!(
                "emb_dim - 1 = {} not divisible by matrix_dim - 1 = {}",
                self.emb_dim - 1,
                self.matrix_dim - 1
            ));
        }
        if self.min_nb < self.matrix_dim + 1 {
            return bad(format!(
                "min_nb {} below matrix_dim + 1 = {}",
                self.min_nb,
                self.matrix_dim + 1
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    /// Map-advance interval `m = (emb_dim - 1) / (matrix_dim - 1)`.
    pub fn step(&self) -> usize {
        (self.emb_dim - 1) / (self.matrix_dim - 1)
    }

    /// Shortest series for which every reference point can have `min_nb`
    /// neighbours (ignoring `min_tsep`).
    pub fn min_series_len(&self) -> usize {
        self.matrix_dim * self.step() + self.min_nb + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSpectrum {
    pub exponents: Vec<f64>,
    /// Number of tangent maps accumulated.
    pub n_steps: usize,
    /// Steps whose neighbourhood had only zero displacements.
    #[serde(default)]
    pub degenerate_steps: usize,
    /// Steps that needed the ridge term.
    #[serde(default)]
    pub regularized_steps: usize,
}

impl LyapunovSpectrum {
    pub fn largest(&self) -> f64 {
        self.exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Estimate the Lyapunov spectrum of `series`.
///
/// Reference indices are `0, m, 2m, ...` up to the last index `k` with
/// `k + matrix_dim * m` inside the series. A neighbourhood whose
/// displacements are all zero contributes the zero last row (the
/// minimum-norm least-squares fit); its zero R diagonals are floored at
/// [`EPS_FLOOR`].
pub fn lyap_spectrum(series: &TimeSeries, params: &LyapunovParams) -> Result<LyapunovSpectrum, LyapError> {
    params.validate()?;
    let x = series.values();
    let n = x.len();
    let d = params.matrix_dim;
    let m = params.step();

    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if n >= 1 && lo == hi {
        return Err(LyapError::ZeroVariance);
    }
    if n < params.min_series_len() {
        return Err(LyapError::SeriesTooShort {
            len: n,
            needed: params.min_series_len(),
        });
    }

    let orbit = delay_embed(x, params.emb_dim, 1)?;
    let last_ref = n - 1 - d * m;
    let tie_tol = TIE_TOL * (hi - lo);

    let mut acc = QrAccumulator::new(d);
    let mut degenerate_steps = 0;
    let mut regularized_steps = 0;
    for i in (0..=last_ref).step_by(m) {
        let nb = find_neighbors(&orbit, i, params.min_nb, params.min_tsep, tie_tol, |j| j <= last_ref)?;
        let map = match fit_tangent_map(x, i, &nb, d, m) {
            Ok(map) => map,
            Err(LyapError::DegenerateNeighborhood { .. }) => {
                degenerate_steps += 1;
                TangentMap::companion(vec![0.0; d], false)
            }
            Err(e) => return Err(e),
        };
        regularized_steps += usize::from(map.regularized);
        acc.push(&map.matrix);
    }

    let norm = acc.steps() as f64 * m as f64 * params.tau;
    Ok(LyapunovSpectrum {
        exponents: acc.log_sums().iter().map(|s| s / norm).collect(),
        n_steps: acc.steps(),
        degenerate_steps,
        regularized_steps,
    })
}

/// True iff some exponent is strictly above `tol`.
pub fn has_positive_exponent(spectrum: &LyapunovSpectrum, tol: f64) -> bool {
    spectrum.exponents.iter().any(|&e| e > tol)
}
