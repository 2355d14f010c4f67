//! Non-adversarial noise models and magnitude-matched random perturbation.
//!
//! Each model implements [`NoiseModel`] and is registered by name in a
//! [`NoiseRegistry`], so a JSON block `{kind, params, seed}` picks one at
//! runtime. Outputs are clipped to `[0,1]`.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson as PoissonDist, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ingest::{Image, IngestError, Provenance};
use crate::rng::RngSeed;

/// Intensity levels for the Poisson model (byte images).
pub const POISSON_LEVELS: f64 = 255.0;

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("bad noise parameter: {0}")]
    BadParam(String),
    #[error("variance map has {found} entries, image has {expected} pixels")]
    DimMismatch { expected: usize, found: usize },
    #[error("unknown noise model '{0}'")]
    UnknownModel(String),
    #[error("no distances to sample from")]
    EmptyDistances,
    #[error(transparent)]
    Image(#[from] IngestError),
}

/// A pixelwise noise model.
pub trait NoiseModel: fmt::Debug + Send + Sync {
    /// Registry name, also written into the output provenance.
    fn name(&self) -> &'static str;

    /// Noisy pixels before clipping.
    fn perturb(&self, image: &Image, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, NoiseError>;
}

fn check_amount(name: &str, v: f64) -> Result<(), NoiseError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(NoiseError::BadParam(format!("{name} must be in [0,1], got {v}")))
    }
}

fn check_var(name: &str, v: f64) -> Result<(), NoiseError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(NoiseError::BadParam(format!("{name} must be finite and >= 0, got {v}")))
    }
}

fn normal(mean: f64, var: f64) -> Result<Normal<f64>, NoiseError> {
    Normal::new(mean, var.sqrt()).map_err(|e| NoiseError::BadParam(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Default for Gaussian {
    fn default() -> Self {
        Gaussian { mean: 0.0, var: 0.01 }
    }
}

impl NoiseModel for Gaussian {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn perturb(&self, image: &Image, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, NoiseError> {
        check_var("var", self.var)?;
        if !self.mean.is_finite() {
            return Err(NoiseError::BadParam(format!("mean must be finite, got {}", self.mean)));
        }
        let dist = normal(self.mean, self.var)?;
        Ok(image.pixels().iter().map(|&x| x + dist.sample(rng)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Salt {
    pub amount: f64,
}

impl Default for Salt {
    fn default() -> Self {
        Salt { amount: 0.05 }
    }
}

impl NoiseModel for Salt {
    fn name(&self) -> &'static str {
        "salt"
    }

    fn perturb(&self, image: &Image, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, NoiseError> {
        check_amount("amount", self.amount)?;
        Ok(image
            .pixels()
            .iter()
            .map(|&x| if rng.random_bool(self.amount) { 1.0 } else { x })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pepper {
    pub amount: f64,
}

impl Default for Pepper {
    fn default() -> Self {
        Pepper { amount: 0.05 }
    }
}

impl NoiseModel for Pepper {
    fn name(&self) -> &'static str {
        "pepper"
    }

    fn perturb(&self, image: &Image, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, NoiseError> {
        check_amount("amount", self.amount)?;
        Ok(image
            .pixels()
            .iter()
            .map(|&x| if rng.random_bool(self.amount) { 0.0 } else { x })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaltAndPepper {
    pub amount: f64,
    pub salt_fraction: f64,
}

impl Default for SaltAndPepper {
    fn default() -> Self {
        SaltAndPepper {
            amount: 0.05,
            salt_fraction: 0.5,
        }
    }
}

impl NoiseModel for SaltAndPepper {
    fn name(&self) -> &'static str {
        "salt_and_pepper"
    }

    fn perturb(&self, image: &Image, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, NoiseError> {
        check_amount("amount", self.amount)?;
        check_amount("salt_fraction", self.salt_fraction)?;
        Ok(image
            .pixels()
            .iter()
            .map(|&x| {
                if rng.random_bool(self.amount) {
                    if rng.random_bool(self.salt_fraction) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    x
                }
            })
            .collect())
    }
}

/// `Poisson(x·L)/L` with `L` = [`POISSON_LEVELS`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Poisson {}

impl NoiseModel for Poisson {
    fn name(&self) -> &'static str {
        "poisson"
    }

    fn perturb(&self, image: &Image, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, NoiseError> {
        image
            .pixels()
            .iter()
            .map(|&x| {
                let lambda = x * POISSON_LEVELS;
                if lambda <= 0.0 {
                    return Ok(0.0);
                }
                let d = PoissonDist::new(lambda).map_err(|e| NoiseError::BadParam(e.to_string()))?;
                let k: f64 = d.sample(rng);
                Ok(k / POISSON_LEVELS)
            })
            .collect()
    }
}

/// `x + x·N(0, var)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Speckle {
    pub var: f64,
}

impl Default for Speckle {
    fn default() -> Self {
        Speckle { var: 0.01 }
    }
}

impl NoiseModel for Speckle {
    fn name(&self) -> &'static str {
        "speckle"
    }

    fn perturb(&self, image: &Image, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, NoiseError> {
        check_var("var", self.var)?;
        let dist = normal(0.0, self.var)?;
        Ok(image.pixels().iter().map(|&x| x + x * dist.sample(rng)).collect())
    }
}

/// `x + N(0, var_map[p])`.
///
/// Without an explicit `var_map` the variance is proportional to pixel
/// intensity, scaled so the brightest pixel gets `max_var`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalVarGaussian {
    pub var_map: Option<Vec<f64>>,
    pub max_var: f64,
}

impl Default for LocalVarGaussian {
    fn default() -> Self {
        LocalVarGaussian {
            var_map: None,
            max_var: 0.05,
        }
    }
}

impl LocalVarGaussian {
    pub fn variances(&self, image: &Image) -> Result<Vec<f64>, NoiseError> {
        let px = image.pixels();
        match &self.var_map {
            Some(map) => {
                if map.len() != px.len() {
                    return Err(NoiseError::DimMismatch {
                        expected: px.len(),
                        found: map.len(),
                    });
                }
                for &v in map {
                    check_var("var_map entry", v)?;
                }
                Ok(map.clone())
            }
            None => {
                check_var("max_var", self.max_var)?;
                let peak = px.iter().copied().fold(0.0, f64::max);
                if peak == 0.0 {
                    return Ok(vec![0.0; px.len()]);
                }
                Ok(px.iter().map(|&x| self.max_var * x / peak).collect())
            }
        }
    }
}

impl NoiseModel for LocalVarGaussian {
    fn name(&self) -> &'static str {
        "localvar"
    }

    fn perturb(&self, image: &Image, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, NoiseError> {
        let vars = self.variances(image)?;
        Ok(image
            .pixels()
            .iter()
            .zip(&vars)
            .map(|(&x, &v)| {
                let z: f64 = StandardNormal.sample(rng);
                x + v.sqrt() * z
            })
            .collect())
    }
}

type Builder = fn(Value) -> Result<Box<dyn NoiseModel>, NoiseError>;

fn build<M>(params: Value) -> Result<Box<dyn NoiseModel>, NoiseError>
where
    M: NoiseModel + Default + for<'de> Deserialize<'de> + 'static,
{
    let params = if params.is_null() {
        Value::Object(Default::default())
    } else {
        params
    };
    let model: M = serde_json::from_value(params).map_err(|e| NoiseError::BadParam(e.to_string()))?;
    Ok(Box::new(model))
}

/// Noise models by name.
pub struct NoiseRegistry {
    builders: BTreeMap<&'static str, Builder>,
}

impl Default for NoiseRegistry {
    fn default() -> Self {
        let mut r = NoiseRegistry {
            builders: BTreeMap::new(),
        };
        r.register("gaussian", build::<Gaussian>);
        r.register("salt", build::<Salt>);
        r.register("pepper", build::<Pepper>);
        r.register("salt_and_pepper", build::<SaltAndPepper>);
        r.register("poisson", build::<Poisson>);
        r.register("speckle", build::<Speckle>);
        r.register("localvar", build::<LocalVarGaussian>);
        r
    }
}

impl NoiseRegistry {
    pub fn register(&mut self, name: &'static str, builder: Builder) {
        self.builders.insert(name, builder);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.builders.keys().copied()
    }

    /// Build a model from its name and a JSON parameter object (missing
    /// fields take their defaults).
    pub fn build(&self, name: &str, params: Value) -> Result<Box<dyn NoiseModel>, NoiseError> {
        let builder = self
            .builders
            .get(name)
            .ok_or_else(|| NoiseError::UnknownModel(name.to_string()))?;
        builder(params)
    }
}

/// Config block `{kind, params, seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: String,
    #[serde(default)]
    pub params: Value,
    pub seed: RngSeed,
}

impl NoiseConfig {
    pub fn build(&self) -> Result<Box<dyn NoiseModel>, NoiseError> {
        NoiseRegistry::default().build(&self.kind, self.params.clone())
    }
}

fn clip(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Apply `model` to `image` and clip. Provenance becomes `Noisy{model}`.
pub fn apply_noise(image: &Image, model: &dyn NoiseModel, seed: RngSeed) -> Result<Image, NoiseError> {
    let mut rng = seed.rng();
    let pixels: Vec<f64> = model.perturb(image, &mut rng)?.into_iter().map(clip).collect();
    Ok(image.derive(image.id(), pixels, Provenance::noisy(model.name()))?)
}

/// Uniform draw from the empirical distribution of `distances`.
pub fn sample_matched_magnitude(distances: &[f64], seed: RngSeed) -> Result<f64, NoiseError> {
    if distances.is_empty() {
        return Err(NoiseError::EmptyDistances);
    }
    if let Some(&d) = distances.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
        return Err(NoiseError::BadParam(format!("distance must be finite and >= 0, got {d}")));
    }
    let mut rng = seed.rng();
    Ok(distances[rng.random_range(0..distances.len())])
}

/// Add an isotropic Gaussian direction with L2 norm `l2_target`, then clip.
///
/// The post-clip norm is recorded in the provenance.
pub fn perturb_to_magnitude(image: &Image, l2_target: f64, seed: RngSeed) -> Result<Image, NoiseError> {
    if !(l2_target >= 0.0 && l2_target.is_finite()) {
        return Err(NoiseError::BadParam(format!("l2_target must be finite and >= 0, got {l2_target}")));
    }
    let px = image.pixels();
    let mut rng = seed.rng();
    let mut dir: Vec<f64> = (0..px.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = if norm > 0.0 { l2_target / norm } else { 0.0 };
    for v in &mut dir {
        *v *= scale;
    }
    let pixels: Vec<f64> = px.iter().zip(&dir).map(|(&x, &d)| clip(x + d)).collect();
    let post = pixels
        .iter()
        .zip(px)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let prov = Provenance::Noisy {
        model: "matched_l2".into(),
        post_clip_l2: Some(post),
    };
    Ok(image.derive(image.id(), pixels, prov)?)
}
