//! Softmax-regression victim and the Fast Gradient Sign Method.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Image, IngestError, Provenance};
use crate::rng::RngSeed;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("image '{0}' has no label")]
    MissingLabel(String),
    #[error("image has {found} pixels, model expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("bad attack parameter: {0}")]
    BadParam(String),
    #[error(transparent)]
    Image(#[from] IngestError),
}

/// Linear softmax classifier; `weights` is `C × P`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxModel {
    pub classes: usize,
    pub pixels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SoftmaxModel {
    pub fn zeros(classes: usize, pixels: usize) -> Self {
        SoftmaxModel {
            classes,
            pixels,
            weights: vec![0.0; classes * pixels],
            bias: vec![0.0; classes],
        }
    }

    fn row(&self, c: usize) -> &[f64] {
        &self.weights[c * self.pixels..(c + 1) * self.pixels]
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| self.row(c).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[c])
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - top).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let p = self.logits(x);
        (0..self.classes).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    }

    /// Cross-entropy `-ln p_class(x)`.
    pub fn loss(&self, x: &[f64], class: usize) -> f64 {
        let z = self.logits(x);
        let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + z.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
        lse - z[class]
    }

    /// `∇ₓ` of the cross-entropy: `Wᵀ (p − onehot(class))`.
    pub fn input_gradient(&self, x: &[f64], class: usize) -> Vec<f64> {
        let mut r = self.probabilities(x);
        r[class] -= 1.0;
        let mut g = vec![0.0; self.pixels];
        for (c, rc) in r.iter().enumerate() {
            for (gk, w) in g.iter_mut().zip(self.row(c)) {
                *gk += rc * w;
            }
        }
        g
    }

    pub fn accuracy(&self, images: &[Image]) -> f64 {
        let hits = images
            .iter()
            .filter(|im| im.label().map(usize::from) == Some(self.predict(im.pixels())))
            .count();
        hits as f64 / images.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftmaxTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Standard deviation of the seeded Gaussian weight init; 0 gives zeros.
    pub init_std: f64,
    pub seed: RngSeed,
}

impl Default for SoftmaxTrainConfig {
    fn default() -> Self {
        SoftmaxTrainConfig {
            lr: 0.5,
            epochs: 20,
            batch_size: 32,
            init_std: 0.01,
            seed: RngSeed(0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedSoftmax {
    pub model: SoftmaxModel,
    pub train_accuracy: f64,
}

/// Mini-batch gradient descent on the mean cross-entropy. The class count is
/// `max label + 1`.
pub fn softmax_train(images: &[Image], config: &SoftmaxTrainConfig) -> Result<TrainedSoftmax, AttackError> {
    let labels = images
        .iter()
        .map(|im| im.label().ok_or_else(|| AttackError::MissingLabel(im.id().to_string())))
        .collect::<Result<Vec<u8>, _>>()?;
    let first = labels.first().copied().ok_or(AttackError::SingleClass)?;
    if labels.iter().all(|&l| l == first) {
        return Err(AttackError::SingleClass);
    }
    if config.batch_size == 0 || !(config.lr > 0.0) || !(config.init_std >= 0.0) {
        return Err(AttackError::BadParam(
            "need batch_size >= 1, lr > 0, init_std >= 0".into(),
        ));
    }
    let classes = usize::from(*labels.iter().max().unwrap()) + 1;
    let pixels = images[0].pixels().len();
    if let Some(im) = images.iter().find(|im| im.pixels().len() != pixels) {
        return Err(AttackError::DimMismatch {
            expected: pixels,
            found: im.pixels().len(),
        });
    }

    let mut rng = config.seed.rng();
    let mut model = SoftmaxModel::zeros(classes, pixels);
    if config.init_std > 0.0 {
        let init = Normal::new(0.0, config.init_std).map_err(|e| AttackError::BadParam(e.to_string()))?;
        for w in &mut model.weights {
            *w = init.sample(&mut rng);
        }
    }

    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut gw = vec![0.0; classes * pixels];
    let mut gb = vec![0.0; classes];
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            gw.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            for &k in batch {
                let x = images[k].pixels();
                let mut r = model.probabilities(x);
                r[usize::from(labels[k])] -= 1.0;
                for (c, rc) in r.iter().enumerate() {
                    gb[c] += rc;
                    for (g, v) in gw[c * pixels..(c + 1) * pixels].iter_mut().zip(x) {
                        *g += rc * v;
                    }
                }
            }
            let scale = config.lr / batch.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= scale * g;
            }
            for (b, g) in model.bias.iter_mut().zip(&gb) {
                *b -= scale * g;
            }
        }
    }
    let train_accuracy = model.accuracy(images);
    Ok(TrainedSoftmax { model, train_accuracy })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgsmParams {
    pub epsilon: f64,
    #[serde(default)]
    pub targeted: bool,
    #[serde(default)]
    pub target: Option<u8>,
}

/// One signed-gradient step of size `epsilon`, clipped to `[0,1]`.
///
/// Untargeted steps up the loss of the true label; targeted steps down the
/// loss of `target`. Zero gradient entries leave their pixel unchanged.
pub fn fgsm(model: &SoftmaxModel, image: &Image, params: &FgsmParams) -> Result<Image, AttackError> {
    if !(params.epsilon >= 0.0 && params.epsilon.is_finite()) {
        return Err(AttackError::BadParam(format!("epsilon must be >= 0, got {}", params.epsilon)));
    }
    let x = image.pixels();
    if x.len() != model.pixels {
        return Err(AttackError::DimMismatch {
            expected: model.pixels,
            found: x.len(),
        });
    }
    let (class, direction) = if params.targeted {
        let t = params
            .target
            .ok_or_else(|| AttackError::BadParam("targeted attack without target".into()))?;
        (usize::from(t), -1.0)
    } else {
        let l = image
            .label()
            .ok_or_else(|| AttackError::MissingLabel(image.id().to_string()))?;
        (usize::from(l), 1.0)
    };
    if class >= model.classes {
        return Err(AttackError::BadParam(format!("class {class} outside model's {} classes", model.classes)));
    }
    let g = model.input_gradient(x, class);
    let pixels: Vec<f64> = x
        .iter()
        .zip(&g)
        .map(|(&v, &gk)| {
            let s = if gk > 0.0 {
                1.0
            } else if gk < 0.0 {
                -1.0
            } else {
                0.0
            };
            within(v, (v + direction * params.epsilon * s).clamp(0.0, 1.0), params.epsilon)
        })
        .collect();
    let prov = Provenance::Adversarial {
        attack: "fgsm".into(),
        targeted: params.targeted,
        target: if params.targeted { params.target } else { None },
    };
    Ok(image.derive(image.id(), pixels, prov)?)
}

/// Pull `x` back toward `v` until `|x - v| <= eps` also holds in floating
/// point; `v + eps` can round one ulp past it.
fn within(v: f64, mut x: f64, eps: f64) -> f64 {
    while (x - v).abs() > eps {
        x = if x > v { x.next_down() } else { x.next_up() };
    }
    x
}

/// Largest relative error between the analytic input gradient and central
/// differences with step `h`, relative to `max(|analytic|, |numeric|, 1e-8)`
/// per coordinate.
pub fn gradient_check(model: &SoftmaxModel, x: &[f64], class: usize, h: f64) -> f64 {
    let g = model.input_gradient(x, class);
    let mut xp = x.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        xp[k] = x[k] + h;
        let up = model.loss(&xp, class);
        xp[k] = x[k] - h;
        let down = model.loss(&xp, class);
        xp[k] = x[k];
        let num = (up - down) / (2.0 * h);
        let rel = (g[k] - num).abs() / g[k].abs().max(num.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<Image> {
        // class 0 lights pixels 0..2, class 1 lights pixels 2..4
        (0..20)
            .map(|k| {
                let c = (k % 2) as u8;
                let mut px = vec![0.0; 4];
                let v = 0.5 + 0.02 * k as f64;
                px[2 * usize::from(c)] = v;
                px[2 * usize::from(c) + 1] = v;
                Image::new(format!("t{k}"), px, 2, 2, Some(c), Provenance::Legitimate).unwrap()
            })
            .collect()
    }

    #[test]
    fn separable_toy_is_learned() {
        let t = softmax_train(&toy(), &SoftmaxTrainConfig::default()).unwrap();
        assert_eq!(t.train_accuracy, 1.0);
    }

    #[test]
    fn zero_epochs_zero_init_is_uniform() {
        let cfg = SoftmaxTrainConfig {
            epochs: 0,
            init_std: 0.0,
            ..Default::default()
        };
        let t = softmax_train(&toy(), &cfg).unwrap();
        assert_eq!(t.model.probabilities(toy()[0].pixels()), vec![0.5, 0.5]);
    }

    #[test]
    fn single_class_rejected() {
        let imgs: Vec<Image> = toy().into_iter().filter(|i| i.label() == Some(0)).collect();
        assert!(matches!(
            softmax_train(&imgs, &SoftmaxTrainConfig::default()),
            Err(AttackError::SingleClass)
        ));
    }

    #[test]
    fn fgsm_steps() {
        let model = softmax_train(&toy(), &SoftmaxTrainConfig::default()).unwrap().model;
        let img = Image::new("m", vec![0.3, 0.4, 0.5, 0.6], 2, 2, Some(0), Provenance::Legitimate).unwrap();
        let same = fgsm(&model, &img, &FgsmParams { epsilon: 0.0, targeted: false, target: None }).unwrap();
        assert_eq!(same.pixels(), img.pixels());

        let adv = fgsm(&model, &img, &FgsmParams { epsilon: 0.1, targeted: false, target: None }).unwrap();
        for (a, b) in adv.pixels().iter().zip(img.pixels()) {
            assert!(((a - b).abs() - 0.1).abs() < 1e-12);
        }
        assert!(model.loss(adv.pixels(), 0) > model.loss(img.pixels(), 0));
        assert_eq!(adv.provenance().attack(), Some("fgsm"));

        let tgt = fgsm(&model, &img, &FgsmParams { epsilon: 0.1, targeted: true, target: Some(1) }).unwrap();
        assert!(model.loss(tgt.pixels(), 1) < model.loss(img.pixels(), 1));

        let unlabeled = Image::new("u", vec![0.5; 4], 2, 2, None, Provenance::Legitimate).unwrap();
        assert!(matches!(
            fgsm(&model, &unlabeled, &FgsmParams { epsilon: 0.1, targeted: false, target: None }),
            Err(AttackError::MissingLabel(_))
        ));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = softmax_train(&toy(), &SoftmaxTrainConfig::default()).unwrap().model;
        let p = model.probabilities(&[1.0, 0.0, 0.3, 0.9]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let model = softmax_train(&toy(), &SoftmaxTrainConfig::default()).unwrap().model;
        assert!(gradient_check(&model, &[0.2, 0.7, 0.4, 0.1], 1, 1e-5) < 1e-6);
    }
}
