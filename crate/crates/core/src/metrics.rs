//! ROC curves, AUROC and acceptance/rejection rates.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Provenance;
use crate::rng::RngSeed;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("bad ROC CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for MetricsError {
    fn from(e: csv::Error) -> Self {
        MetricsError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

/// ROC points from `(0,0)` to `(1,1)`.
///
/// `thresholds[k]` is the score cutoff of `points[k]` (a row is called
/// positive when its score is `>= threshold`); the first is `+inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
    pub auroc: f64,
}

impl RocCurve {
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    /// CSV `threshold,fpr,tpr`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["threshold", "fpr", "tpr"])?;
        for (t, (f, p)) in self.thresholds.iter().zip(&self.points) {
            wr.write_record([t.to_string(), f.to_string(), p.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Parse a CSV written by [`RocCurve::write_csv`]; AUROC is recomputed
    /// by trapezoid.
    pub fn read_csv<R: Read>(r: R) -> Result<RocCurve, MetricsError> {
        let mut rd = csv::Reader::from_reader(r);
        if rd.headers()?.iter().ne(["threshold", "fpr", "tpr"]) {
            return Err(MetricsError::Csv("expected header threshold,fpr,tpr".into()));
        }
        let mut points = Vec::new();
        let mut thresholds = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let p = |k: usize| {
                rec[k]
                    .parse::<f64>()
                    .map_err(|e| MetricsError::Csv(format!("'{}': {e}", &rec[k])))
            };
            thresholds.push(p(0)?);
            points.push((p(1)?, p(2)?));
        }
        let mut curve = RocCurve {
            points,
            thresholds,
            auroc: 0.0,
        };
        curve.auroc = curve.trapezoid_area();
        Ok(curve)
    }
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite { index });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    Ok((pos, neg))
}

/// ROC of `scores` against `labels` (`true` = positive).
///
/// Thresholds sweep the distinct scores in descending order, one point per
/// group of tied scores. The area is accumulated in integer pair counts, so
/// it equals the Mann-Whitney statistic with ties counted as one half.
pub fn roc(scores: &[f64], labels: &[bool]) -> Result<RocCurve, MetricsError> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the pair-count numerator
    let mut area2 = 0u128;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        let (mut gtp, mut gfp) = (0u64, 0u64);
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                gtp += 1;
            } else {
                gfp += 1;
            }
            k += 1;
        }
        area2 += gfp as u128 * (2 * tp as u128 + gtp as u128);
        tp += gtp;
        fp += gfp;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(s);
    }
    Ok(RocCurve {
        points,
        thresholds,
        auroc: area2 as f64 / (2.0 * pos as f64 * neg as f64),
    })
}

/// Percentile bootstrap interval for the AUROC.
///
/// Positives and negatives are resampled separately, so every resample has
/// both classes.
pub fn bootstrap_auroc_ci(
    scores: &[f64],
    labels: &[bool],
    resamples: usize,
    level: f64,
    seed: RngSeed,
) -> Result<(f64, f64), MetricsError> {
    check(scores, labels)?;
    if resamples == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let mut rng = seed.rng();
    let mut aurocs = Vec::with_capacity(resamples);
    let mut s = Vec::with_capacity(scores.len());
    let mut l = Vec::with_capacity(scores.len());
    for _ in 0..resamples {
        s.clear();
        l.clear();
        for _ in 0..pos.len() {
            s.push(pos[rng.random_range(0..pos.len())]);
            l.push(true);
        }
        for _ in 0..neg.len() {
            s.push(neg[rng.random_range(0..neg.len())]);
            l.push(false);
        }
        aurocs.push(roc(&s, &l)?.auroc);
    }
    aurocs.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((quantile_sorted(&aurocs, alpha), quantile_sorted(&aurocs, 1.0 - alpha)))
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub n_legit: usize,
    pub n_adv: usize,
    pub accepted_legit: usize,
    pub rejected_adv: usize,
}

/// Rates are `None` when their pool is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub true_acceptance_rate: Option<f64>,
    pub false_alarm_rate: Option<f64>,
    pub attacker_rejection_rate: Option<f64>,
    pub counts: DetectionCounts,
}

/// Legitimate and noisy images form the legitimate pool; adversarial images
/// the attacker pool.
pub fn detection_report(decisions: &[Decision], provenance: &[Provenance]) -> Result<DetectionReport, MetricsError> {
    if decisions.len() != provenance.len() {
        return Err(MetricsError::LengthMismatch {
            scores: decisions.len(),
            labels: provenance.len(),
        });
    }
    if decisions.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut c = DetectionCounts {
        n_legit: 0,
        n_adv: 0,
        accepted_legit: 0,
        rejected_adv: 0,
    };
    for (d, p) in decisions.iter().zip(provenance) {
        if p.is_adversarial() {
            c.n_adv += 1;
            c.rejected_adv += usize::from(*d == Decision::Reject);
        } else {
            c.n_legit += 1;
            c.accepted_legit += usize::from(*d == Decision::Accept);
        }
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let tar = rate(c.accepted_legit, c.n_legit);
    Ok(DetectionReport {
        true_acceptance_rate: tar,
        false_alarm_rate: tar.map(|t| 1.0 - t),
        attacker_rejection_rate: rate(c.rejected_adv, c.n_adv),
        counts: c,
    })
}
