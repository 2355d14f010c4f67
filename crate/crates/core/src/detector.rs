//! Detectors behind one trait, registered by name.
//!
//! `iforest` is one-class: it trains on the non-adversarial rows only.
//! `logistic` is supervised: adversarial rows are the positive class.
//! Both score so that higher means "more likely adversarial" and reject when
//! the score is strictly above their threshold.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::anomaly::{anomaly_score, decide_score, iforest_train, AnomalyError, IforestParams, IsolationForestModel};
use crate::features::FeatureMatrix;
use crate::metrics::Decision;
use crate::rng::RngSeed;
use crate::supervised::{logistic_fit, logistic_score, LogisticConfig, LogisticModel, SupervisedError};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("unknown detector '{0}'")]
    Unknown(String),
    #[error("bad detector parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
    #[error(transparent)]
    Supervised(#[from] SupervisedError),
    #[error("model document: {0}")]
    Json(#[from] serde_json::Error),
}

pub trait Detector: Send + Sync {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn score(&self, point: &[f64]) -> Result<f64, DetectorError>;
    fn threshold(&self) -> f64;
    fn decide(&self, point: &[f64]) -> Result<Decision, DetectorError> {
        Ok(decide_score(self.score(point)?, self.threshold()))
    }
    /// Model parameters; wrapped with the detector name by [`save_detector`].
    fn to_value(&self) -> Result<Value, DetectorError>;
}

impl Detector for IsolationForestModel {
    fn name(&self) -> &'static str {
        "iforest"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, point: &[f64]) -> Result<f64, DetectorError> {
        Ok(anomaly_score(self, point)?)
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn to_value(&self) -> Result<Value, DetectorError> {
        Ok(serde_json::to_value(self)?)
    }
}

/// Logistic model with a probability cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticDetector {
    pub model: LogisticModel,
    pub threshold: f64,
}

impl Detector for LogisticDetector {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn dim(&self) -> usize {
        self.model.weights.len()
    }

    fn score(&self, point: &[f64]) -> Result<f64, DetectorError> {
        Ok(logistic_score(&self.model, point)?)
    }

    fn threshold(&self) -> f64 {
        self.threshold
    }

    fn to_value(&self) -> Result<Value, DetectorError> {
        Ok(serde_json::to_value(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogisticDetectorParams {
    pub l2_penalty: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub threshold: f64,
}

impl Default for LogisticDetectorParams {
    fn default() -> Self {
        let c = LogisticConfig::default();
        LogisticDetectorParams {
            l2_penalty: c.l2_penalty,
            max_iters: c.max_iters,
            tol: c.tol,
            threshold: 0.5,
        }
    }
}

fn params<T: Default + for<'de> Deserialize<'de>>(v: Value) -> Result<T, DetectorError> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v).map_err(|e| DetectorError::BadParams(e.to_string()))
}

type Trainer = fn(&FeatureMatrix, Value, RngSeed) -> Result<Box<dyn Detector>, DetectorError>;
type Loader = fn(Value) -> Result<Box<dyn Detector>, DetectorError>;

fn train_iforest(fm: &FeatureMatrix, p: Value, seed: RngSeed) -> Result<Box<dyn Detector>, DetectorError> {
    let p: IforestParams = params(p)?;
    let inliers = fm.filter(|m| !m.provenance.is_adversarial());
    Ok(Box::new(iforest_train(&inliers, &p, seed)?))
}

fn load_iforest(v: Value) -> Result<Box<dyn Detector>, DetectorError> {
    Ok(Box::new(IsolationForestModel::from_json(&v.to_string())?))
}

fn train_logistic(fm: &FeatureMatrix, p: Value, seed: RngSeed) -> Result<Box<dyn Detector>, DetectorError> {
    let p: LogisticDetectorParams = params(p)?;
    let cfg = LogisticConfig {
        l2_penalty: p.l2_penalty,
        max_iters: p.max_iters,
        tol: p.tol,
        seed,
    };
    let labels: Vec<bool> = fm.meta().iter().map(|m| m.provenance.is_adversarial()).collect();
    let model = logistic_fit(fm, &labels, &cfg)?;
    Ok(Box::new(LogisticDetector {
        model,
        threshold: p.threshold,
    }))
}

fn load_logistic(v: Value) -> Result<Box<dyn Detector>, DetectorError> {
    let d: LogisticDetector = serde_json::from_value(v)?;
    Ok(Box::new(d))
}

pub struct DetectorRegistry {
    entries: BTreeMap<&'static str, (Trainer, Loader)>,
}

impl Default for DetectorRegistry {
    fn default() -> Self {
        let mut r = DetectorRegistry {
            entries: BTreeMap::new(),
        };
        r.register("iforest", train_iforest, load_iforest);
        r.register("logistic", train_logistic, load_logistic);
        r
    }
}

impl DetectorRegistry {
    pub fn register(&mut self, name: &'static str, trainer: Trainer, loader: Loader) {
        self.entries.insert(name, (trainer, loader));
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    fn entry(&self, name: &str) -> Result<&(Trainer, Loader), DetectorError> {
        self.entries
            .get(name)
            .ok_or_else(|| DetectorError::Unknown(name.to_string()))
    }

    pub fn train(
        &self,
        name: &str,
        features: &FeatureMatrix,
        params: Value,
        seed: RngSeed,
    ) -> Result<Box<dyn Detector>, DetectorError> {
        (self.entry(name)?.0)(features, params, seed)
    }

    /// Inverse of [`save_detector`].
    pub fn load(&self, text: &str) -> Result<Box<dyn Detector>, DetectorError> {
        let doc: SavedDetector = serde_json::from_str(text)?;
        (self.entry(&doc.detector)?.1)(doc.model)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedDetector {
    detector: String,
    model: Value,
}

/// `{"detector": <name>, "model": {...}}`.
pub fn save_detector(d: &dyn Detector) -> Result<String, DetectorError> {
    Ok(serde_json::to_string_pretty(&SavedDetector {
        detector: d.name().to_string(),
        model: d.to_value()?,
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::RowMeta;
    use crate::ingest::Provenance;

    fn mixed() -> FeatureMatrix {
        let mut rows = Vec::new();
        let mut meta = Vec::new();
        for k in 0..40 {
            let adv = k % 2 == 1;
            let t = k as f64 * 0.1;
            rows.push(vec![if adv { 3.0 } else { 0.0 } + t.sin(), t.cos()]);
            meta.push(RowMeta {
                id: format!("r{k}"),
                provenance: if adv {
                    Provenance::Adversarial {
                        attack: "fgsm".into(),
                        targeted: false,
                        target: None,
                    }
                } else {
                    Provenance::Legitimate
                },
                label: None,
            });
        }
        FeatureMatrix::new(2, rows, meta).unwrap()
    }

    #[test]
    fn every_detector_round_trips() {
        let reg = DetectorRegistry::default();
        let fm = mixed();
        for name in reg.names() {
            let d = reg.train(name, &fm, Value::Null, RngSeed(1)).unwrap();
            assert_eq!(d.name(), name);
            let back = reg.load(&save_detector(d.as_ref()).unwrap()).unwrap();
            for r in fm.rows() {
                assert_eq!(d.score(r).unwrap(), back.score(r).unwrap());
                assert_eq!(d.decide(r).unwrap(), back.decide(r).unwrap());
            }
        }
    }

    #[test]
    fn logistic_separates_mixed_rows() {
        let reg = DetectorRegistry::default();
        let fm = mixed();
        let d = reg.train("logistic", &fm, serde_json::json!({"l2_penalty": 1e-3}), RngSeed(0)).unwrap();
        for (r, m) in fm.rows().iter().zip(fm.meta()) {
            let want = if m.provenance.is_adversarial() { Decision::Reject } else { Decision::Accept };
            assert_eq!(d.decide(r).unwrap(), want);
        }
    }

    #[test]
    fn unknown_names() {
        let reg = DetectorRegistry::default();
        assert!(matches!(
            reg.train("svm", &mixed(), Value::Null, RngSeed(0)),
            Err(DetectorError::Unknown(_))
        ));
        assert!(reg.train("iforest", &mixed(), serde_json::json!({"trees": 3}), RngSeed(0)).is_err());
    }
}
