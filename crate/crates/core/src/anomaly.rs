//! Isolation Forest for one-class detection on exponent features.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::metrics::Decision;
use crate::rng::RngSeed;

/// Version tag of the serialized model.
pub const MODEL_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum AnomalyError {
    #[error("need at least 2 training points, got {0}")]
    TooFewPoints(usize),
    #[error("contamination must be in [0, 0.5), got {0}")]
    BadContamination(f64),
    #[error("bad hyperparameter: {0}")]
    BadParam(String),
    #[error("point has dim {found}, model expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("unsupported model format {found}, expected {MODEL_FORMAT}")]
    UnsupportedFormat { found: u32 },
    #[error("model JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Internal {
        feature: usize,
        split: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

/// Binary partition tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    pub nodes: Vec<Node>,
}

impl IsolationTree {
    pub fn height(&self) -> usize {
        fn go(nodes: &[Node], k: usize) -> usize {
            match nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Internal { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

/// Expected unsuccessful-search depth in a binary search tree of `n` points.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let h: f64 = (1..n).map(|i| 1.0 / i as f64).sum();
            2.0 * h - 2.0 * (n - 1) as f64 / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IforestParams {
    pub n_trees: usize,
    /// `None` means `min(256, N)`.
    pub subsample_size: Option<usize>,
    pub contamination: f64,
}

impl Default for IforestParams {
    fn default() -> Self {
        IforestParams {
            n_trees: 100,
            subsample_size: None,
            contamination: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForestModel {
    pub format: u32,
    pub trees: Vec<IsolationTree>,
    /// Points actually drawn per tree, `min(requested, N)`.
    pub subsample_size: usize,
    pub n_trees: usize,
    pub dim: usize,
    pub threshold: f64,
    pub train_seed: RngSeed,
}

struct Builder<'a> {
    rows: &'a [Vec<f64>],
    dim: usize,
    limit: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { size: idx.len() });
        if depth >= self.limit || idx.len() <= 1 {
            return me;
        }
        let ranges: Vec<(usize, f64, f64)> = (0..self.dim)
            .filter_map(|f| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(self.rows[i][f]), hi.max(self.rows[i][f]))
                });
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return me;
        }
        let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
        let split = loop {
            let s = lo + rng.random::<f64>() * (hi - lo);
            if s > lo && s < hi {
                break s;
            }
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.rows[i][feature] < split);
        let left = self.grow(&l, depth + 1, rng);
        let right = self.grow(&r, depth + 1, rng);
        self.nodes[me] = Node::Internal {
            feature,
            split,
            left,
            right,
        };
        me
    }
}

/// Fit `n_trees` trees, each on a without-replacement subsample.
///
/// Tree `t` draws from `seed.derive(t)`, so trees are built in parallel
/// without changing the result. The split feature is drawn among the
/// features with positive range at the node. The threshold starts at 0.5
/// until [`calibrate_threshold`] sets it.
pub fn iforest_fit(
    features: &FeatureMatrix,
    n_trees: usize,
    subsample_size: usize,
    seed: RngSeed,
) -> Result<IsolationForestModel, AnomalyError> {
    let n = features.len();
    if n < 2 {
        return Err(AnomalyError::TooFewPoints(n));
    }
    if n_trees == 0 {
        return Err(AnomalyError::BadParam("n_trees must be >= 1".into()));
    }
    if subsample_size < 2 {
        return Err(AnomalyError::BadParam(format!(
            "subsample_size must be >= 2, got {subsample_size}"
        )));
    }
    let psi = subsample_size.min(n);
    let limit = (psi as f64).log2().ceil() as usize;
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed.derive(t as u64).rng();
            let idx: Vec<usize> = if psi == n {
                (0..n).collect()
            } else {
                sample(&mut rng, n, psi).into_vec()
            };
            let mut b = Builder {
                rows: features.rows(),
                dim: features.dim(),
                limit,
                nodes: Vec::new(),
            };
            b.grow(&idx, 0, &mut rng);
            IsolationTree { nodes: b.nodes }
        })
        .collect();
    Ok(IsolationForestModel {
        format: MODEL_FORMAT,
        trees,
        subsample_size: psi,
        n_trees,
        dim: features.dim(),
        threshold: 0.5,
        train_seed: seed,
    })
}

/// Fit with [`IforestParams`] and calibrate the threshold on the training
/// rows.
pub fn iforest_train(
    features: &FeatureMatrix,
    params: &IforestParams,
    seed: RngSeed,
) -> Result<IsolationForestModel, AnomalyError> {
    let psi = params.subsample_size.unwrap_or(256.min(features.len()));
    let mut model = iforest_fit(features, params.n_trees, psi, seed)?;
    model.threshold = calibrate_threshold(&model, features, params.contamination)?;
    Ok(model)
}

/// Depth of the leaf reached by `point` plus `c(leaf size)`.
pub fn path_length(tree: &IsolationTree, point: &[f64]) -> f64 {
    let mut k = 0;
    let mut depth = 0usize;
    loop {
        match tree.nodes[k] {
            Node::Leaf { size } => return depth as f64 + average_path_length(size),
            Node::Internal {
                feature,
                split,
                left,
                right,
            } => {
                k = if point[feature] < split { left } else { right };
                depth += 1;
            }
        }
    }
}

/// `2^(-E/c(psi))` for a mean path length `E`.
pub fn score_from_mean_path(mean_path: f64, subsample_size: usize) -> f64 {
    let c = average_path_length(subsample_size);
    if c == 0.0 {
        return 0.5;
    }
    (-mean_path / c).exp2()
}

impl IsolationForestModel {
    fn check_dim(&self, point: &[f64]) -> Result<(), AnomalyError> {
        if point.len() != self.dim {
            return Err(AnomalyError::DimMismatch {
                expected: self.dim,
                found: point.len(),
            });
        }
        Ok(())
    }

    pub fn mean_path_length(&self, point: &[f64]) -> Result<f64, AnomalyError> {
        self.check_dim(point)?;
        Ok(self.trees.iter().map(|t| path_length(t, point)).sum::<f64>() / self.trees.len() as f64)
    }

    pub fn to_json(&self) -> Result<String, AnomalyError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, AnomalyError> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("format").and_then(|f| f.as_u64()).unwrap_or(0) as u32;
        if found != MODEL_FORMAT {
            return Err(AnomalyError::UnsupportedFormat { found });
        }
        Ok(serde_json::from_value(v)?)
    }
}

/// Anomaly score in `(0, 1]`.
pub fn anomaly_score(model: &IsolationForestModel, point: &[f64]) -> Result<f64, AnomalyError> {
    Ok(score_from_mean_path(model.mean_path_length(point)?, model.subsample_size))
}

/// Reject iff the score is strictly above the threshold.
pub fn decide(model: &IsolationForestModel, point: &[f64]) -> Result<Decision, AnomalyError> {
    Ok(decide_score(anomaly_score(model, point)?, model.threshold))
}

pub fn decide_score(score: f64, threshold: f64) -> Decision {
    if score > threshold {
        Decision::Reject
    } else {
        Decision::Accept
    }
}

/// `(1 - contamination)` quantile of training scores, midpoint
/// interpolation.
pub fn calibrate_threshold(
    model: &IsolationForestModel,
    features: &FeatureMatrix,
    contamination: f64,
) -> Result<f64, AnomalyError> {
    let scores = features
        .rows()
        .iter()
        .map(|r| anomaly_score(model, r))
        .collect::<Result<Vec<_>, _>>()?;
    threshold_from_scores(&scores, contamination)
}

pub fn threshold_from_scores(scores: &[f64], contamination: f64) -> Result<f64, AnomalyError> {
    if !(0.0..0.5).contains(&contamination) {
        return Err(AnomalyError::BadContamination(contamination));
    }
    if scores.is_empty() {
        return Err(AnomalyError::TooFewPoints(0));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (1.0 - contamination) * (s.len() - 1) as f64;
    Ok((s[h.floor() as usize] + s[h.ceil() as usize]) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_cloud(n: usize, seed: u64) -> FeatureMatrix {
        let mut rng = RngSeed(seed).rng();
        let rows = (0..n)
            .map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        FeatureMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn path_length_constants() {
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
        let h7: f64 = (1..=7).map(|i| 1.0 / i as f64).sum();
        assert!((average_path_length(8) - (2.0 * h7 - 1.75)).abs() < 1e-15);
        assert!((average_path_length(8) - 3.4355).abs() < 1e-3);
        let h255: f64 = (1..=255).map(|i| 1.0 / i as f64).sum();
        assert!((average_path_length(256) - (2.0 * h255 - 2.0 * 255.0 / 256.0)).abs() < 1e-12);
        let leaf8 = IsolationTree {
            nodes: vec![Node::Leaf { size: 8 }],
        };
        assert_eq!(path_length(&leaf8, &[0.0]), average_path_length(8));
        let leaf2 = IsolationTree {
            nodes: vec![Node::Leaf { size: 2 }],
        };
        assert_eq!(path_length(&leaf2, &[0.0]), 1.0);
        // leaf of size 1 at depth 3
        let chain = IsolationTree {
            nodes: vec![
                Node::Internal { feature: 0, split: 1.0, left: 1, right: 6 },
                Node::Internal { feature: 0, split: 0.5, left: 2, right: 5 },
                Node::Internal { feature: 0, split: 0.2, left: 3, right: 4 },
                Node::Leaf { size: 1 },
                Node::Leaf { size: 1 },
                Node::Leaf { size: 1 },
                Node::Leaf { size: 1 },
            ],
        };
        assert_eq!(path_length(&chain, &[0.1]), 3.0);
    }

    #[test]
    fn score_definition() {
        assert_eq!(score_from_mean_path(average_path_length(64), 64), 0.5);
        assert_eq!(score_from_mean_path(0.0, 64), 1.0);
    }

    #[test]
    fn decide_is_strict() {
        assert_eq!(decide_score(0.6, 0.5), Decision::Reject);
        assert_eq!(decide_score(0.5, 0.5), Decision::Accept);
    }

    #[test]
    fn fit_errors_and_identical_points() {
        let one = FeatureMatrix::from_rows(vec![vec![1.0, 2.0]]).unwrap();
        assert!(matches!(iforest_fit(&one, 10, 256, RngSeed(0)), Err(AnomalyError::TooFewPoints(1))));
        let same = FeatureMatrix::from_rows(vec![vec![1.0, 2.0]; 20]).unwrap();
        let m = iforest_fit(&same, 5, 16, RngSeed(0)).unwrap();
        for t in &m.trees {
            assert_eq!(t.nodes, vec![Node::Leaf { size: 16 }]);
        }
    }

    #[test]
    fn tree_structure_invariants() {
        let fm = gaussian_cloud(300, 3);
        let m = iforest_fit(&fm, 20, 128, RngSeed(1)).unwrap();
        for t in &m.trees {
            assert!(t.height() <= 7);
            let leaves: usize = t.nodes.iter().map(|n| if let Node::Leaf { size } = n { *size } else { 0 }).sum();
            assert_eq!(leaves, 128);
        }
    }

    #[test]
    fn reproducible_fit() {
        let fm = gaussian_cloud(256, 9);
        let a = iforest_fit(&fm, 100, 256, RngSeed(42)).unwrap();
        let b = iforest_fit(&fm, 100, 256, RngSeed(42)).unwrap();
        assert_eq!(a, b);
        let c = iforest_fit(&fm, 100, 256, RngSeed(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn calibration_quantiles() {
        assert_eq!(threshold_from_scores(&[0.1, 0.2, 0.3, 0.4], 0.25).unwrap(), 0.35);
        assert_eq!(threshold_from_scores(&[0.3, 0.1, 0.4, 0.2], 0.0).unwrap(), 0.4);
        assert!(matches!(
            threshold_from_scores(&[0.1], 0.6),
            Err(AnomalyError::BadContamination(_))
        ));

        let fm = gaussian_cloud(200, 5);
        let mut m = iforest_fit(&fm, 100, 256, RngSeed(8)).unwrap();
        m.threshold = calibrate_threshold(&m, &fm, 0.1).unwrap();
        let rejected = fm
            .rows()
            .iter()
            .filter(|r| decide(&m, r).unwrap() == Decision::Reject)
            .count();
        assert_eq!(rejected, 20);
        m.threshold = calibrate_threshold(&m, &fm, 0.0).unwrap();
        assert!(fm.rows().iter().all(|r| decide(&m, r).unwrap() == Decision::Accept));
    }

    #[test]
    fn json_round_trip_is_score_identical() {
        let fm = gaussian_cloud(100, 2);
        let m = iforest_train(&fm, &IforestParams::default(), RngSeed(3)).unwrap();
        let back = IsolationForestModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        for r in fm.rows() {
            assert_eq!(anomaly_score(&back, r).unwrap(), anomaly_score(&m, r).unwrap());
        }
        let bumped = m.to_json().unwrap().replacen("\"format\": 1", "\"format\": 9", 1);
        assert!(matches!(
            IsolationForestModel::from_json(&bumped),
            Err(AnomalyError::UnsupportedFormat { found: 9 })
        ));
    }

    #[test]
    fn far_point_outscores_training_cloud() {
        // 10 sigma from the centre along the diagonal. Out of range in one
        // coordinate only, a point follows the extreme training point's
        // branch at every split on that coordinate and can tie it.
        let d = 10.0 / 2f64.sqrt();
        for seed in 0..20 {
            let fm = gaussian_cloud(256, seed);
            let m = iforest_fit(&fm, 100, 256, RngSeed(seed + 100)).unwrap();
            let far = anomaly_score(&m, &[d, d]).unwrap();
            let max_train = fm.rows().iter().map(|r| anomaly_score(&m, r).unwrap()).fold(0.0, f64::max);
            assert!(far > max_train, "seed {seed}: {far} vs {max_train}");
        }
    }
}
