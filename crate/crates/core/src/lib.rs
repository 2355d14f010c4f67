//! Lyapunov-spectrum features for pre-filtering adversarial images.
//!
//! An image is flattened row by row into a quasi-time-series, its Lyapunov
//! spectrum is estimated with the embed / tangent-map / QR recipe, and the
//! leading exponents are used as features for a one-class Isolation Forest
//! or a supervised logistic detector.
//!
//! Module map:
//!
//! - [`ingest`]: IDX and per-image CSV parsing, flattening.
//! - [`lyap`]: the Lyapunov spectrum estimator.
//! - [`noise`]: non-adversarial noise models (registry) and magnitude-matched perturbation.
//! - [`features`]: feature matrices, norm distances, PCA scatter data.
//! - [`anomaly`]: Isolation Forest.
//! - [`supervised`]: logistic detector and leave-one-attack-out evaluation.
//! - [`detector`]: the detector trait and its name registry.
//! - [`metrics`]: ROC / AUROC and detection reports.
//! - [`attacksim`]: softmax victim and FGSM.
//! - [`pipeline`]: the commands behind the `lyapdet` binary.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anomaly;
pub mod attacksim;
pub mod detector;
pub mod features;
pub mod ingest;
pub mod lyap;
pub mod metrics;
pub mod noise;
pub mod pipeline;
pub mod rng;
pub mod supervised;

pub use ingest::{Dataset, Image, Provenance, TimeSeries};
pub use lyap::{lyap_spectrum, LyapunovParams, LyapunovSpectrum};
