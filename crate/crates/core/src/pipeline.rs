//! The commands behind the `lyapdet` binary.
//!
//! One JSON config drives every command. Relative paths in it resolve
//! against the config file's directory. Artifacts go under the output
//! directory, and each command writes `manifest-<command>.json` with the
//! config digest, the seeds used and digests of every input and output.
//! Paths in manifests are relative (`$config/...`, `$out/...`), so two runs
//! with the same config produce identical manifests wherever they write.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::anomaly::AnomalyError;
use crate::attacksim::{fgsm, softmax_train, FgsmParams, SoftmaxModel, SoftmaxTrainConfig};
use crate::detector::{save_detector, DetectorError, DetectorRegistry};
use crate::features::{
    build_features, l2_distance, pca_fit, pca_project, silhouette_score, write_scatter_csv, FeatureError,
    FeatureMatrix, PcaModel, RowMeta,
};
use crate::ingest::{flatten, load_image_dir, read_idx_files, Dataset, DirDescriptor, Image, IngestError, Provenance, Scaling};
use crate::lyap::{lyap_spectrum, LyapunovParams};
use crate::metrics::{bootstrap_auroc_ci, detection_report, roc, Decision, DetectionReport, MetricsError};
use crate::noise::{apply_noise, perturb_to_magnitude, sample_matched_magnitude, NoiseConfig, NoiseError};
use crate::rng::RngSeed;
use crate::supervised::{leave_one_attack_out, LoaoConfig, SupervisedError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Exponents,
    Train,
    Score,
    Perturb,
    AttackFgsm,
    EvalLoao,
    Scatter,
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Exponents => "exponents",
            Command::Train => "train",
            Command::Score => "score",
            Command::Perturb => "perturb",
            Command::AttackFgsm => "attack-fgsm",
            Command::EvalLoao => "eval-loao",
            Command::Scatter => "scatter",
            Command::Report => "report",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("I/O: {0}")]
    Io(String),
    #[error("{0}")]
    Failed(String),
}

impl PipelineError {
    /// 1 for configuration and unusable-input errors, 3 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Failed(_) => 1,
            PipelineError::Io(_) => 3,
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}

impl From<IngestError> for PipelineError {
    fn from(e: IngestError) -> Self {
        PipelineError::Io(e.to_string())
    }
}

impl From<FeatureError> for PipelineError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Csv(_) | FeatureError::Io(_) => PipelineError::Io(e.to_string()),
            other => PipelineError::Failed(other.to_string()),
        }
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Csv(_) | MetricsError::Io(_) => PipelineError::Io(e.to_string()),
            other => PipelineError::Failed(other.to_string()),
        }
    }
}

macro_rules! failed_from {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Failed(e.to_string())
            }
        }
    )*};
}
failed_from!(NoiseError, DetectorError, SupervisedError, AnomalyError, crate::attacksim::AttackError);

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; `--seed` overrides it. One of the two is required.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Defaults to `out` next to the config; `--out` overrides it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub lyapunov: LyapunovParams,
    /// Leading exponents used as detector features.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetSpec>,
    #[serde(default)]
    pub exponents: Option<ExponentsSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub score: Option<ScoreSection>,
    #[serde(default)]
    pub perturb: Option<PerturbSection>,
    #[serde(default)]
    pub attack_fgsm: Option<FgsmSection>,
    #[serde(default)]
    pub eval_loao: Option<LoaoSection>,
    #[serde(default)]
    pub scatter: Option<ScatterSection>,
    #[serde(default)]
    pub report: Option<ReportSection>,
}

fn default_feature_dim() -> usize {
    4
}

/// An image set. `output` refers to `<out>/images/<name>` written by an
/// earlier `perturb` or `attack-fgsm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Idx {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        /// Half-open index range `[start, end)`.
        #[serde(default)]
        range: Option<[usize; 2]>,
        #[serde(default)]
        provenance: Option<Provenance>,
    },
    Dir {
        path: PathBuf,
        #[serde(default)]
        scaling: Scaling,
        #[serde(default)]
        provenance: Option<Provenance>,
    },
    Output {
        name: String,
        #[serde(default)]
        range: Option<[usize; 2]>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentsSection {
    /// Dataset names; each gets `<out>/features/<name>.csv`.
    pub datasets: Vec<String>,
}

/// A feature reference is either a dataset name (its `exponents` output)
/// or a CSV path relative to the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_detector")]
    pub detector: String,
    #[serde(default)]
    pub params: Value,
    pub features: Vec<String>,
    /// Extra inlier rows (noisy images) appended before fitting.
    #[serde(default)]
    pub augment: Vec<String>,
    #[serde(default = "default_model")]
    pub output: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_detector() -> String {
    "iforest".into()
}

fn default_model() -> String {
    "model.json".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    /// Relative to the output directory.
    #[serde(default = "default_model")]
    pub model: String,
    pub features: Vec<String>,
    /// Writes `<output>.csv` and `<output>-report.json`.
    #[serde(default = "default_scores")]
    pub output: String,
}

fn default_scores() -> String {
    "scores".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchedL2 {
    /// Clean images and their adversarial counterparts, paired by position.
    pub clean: String,
    pub adversarial: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    pub dataset: String,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub matched_l2: Option<MatchedL2>,
    /// Written to `<out>/images/<output>`.
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_std: f64,
}

impl Default for VictimSection {
    fn default() -> Self {
        let d = SoftmaxTrainConfig::default();
        VictimSection {
            lr: d.lr,
            epochs: d.epochs,
            batch_size: d.batch_size,
            init_std: d.init_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgsmSection {
    /// Victim training images.
    pub train: String,
    /// Images to attack.
    pub targets: String,
    #[serde(default)]
    pub victim: VictimSection,
    pub fgsm: FgsmParams,
    #[serde(default = "default_fgsm_output")]
    pub output: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_fgsm_output() -> String {
    "fgsm".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoaoSection {
    pub natural: String,
    /// Rows are grouped into attacks by provenance.
    pub attacks: Vec<String>,
    #[serde(default)]
    pub loao: LoaoConfig,
    #[serde(default = "default_loao_output")]
    pub output: String,
}

fn default_loao_output() -> String {
    "loao".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatterSection {
    pub features: Vec<String>,
    #[serde(default = "default_scatter_output")]
    pub output: String,
}

fn default_scatter_output() -> String {
    "scatter".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Scores CSV from `score`, relative to the output directory.
    #[serde(default = "default_scores_csv")]
    pub scores: String,
    /// Full-spectrum feature files for the positive-exponent statistic.
    #[serde(default)]
    pub features: Vec<String>,
    #[serde(default = "default_resamples")]
    pub bootstrap: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_summary")]
    pub output: String,
}

fn default_scores_csv() -> String {
    "scores.csv".into()
}

fn default_resamples() -> usize {
    1000
}

fn default_level() -> f64 {
    0.95
}

fn default_summary() -> String {
    "summary.json".into()
}

// --------------------------------------------------------------- running

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub dataset: String,
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub feature_dim: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub ledger_entries: usize,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: Command,
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub ledger: Vec<LedgerEntry>,
}

impl Outcome {
    /// 0, or 2 when the error ledger is nonempty.
    pub fn exit_code(&self) -> i32 {
        if self.ledger.is_empty() {
            0
        } else {
            2
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Run {
    cfg: PipelineConfig,
    base: PathBuf,
    out: PathBuf,
    seed: RngSeed,
    config_sha256: String,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    ledger: Vec<LedgerEntry>,
}

/// Load the config and run `command`.
pub fn run(command: Command, opts: &Options) -> Result<Outcome, PipelineError> {
    let text = fs::read(&opts.config)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", opts.config.display())))?;
    let mut cfg: PipelineConfig = serde_json::from_slice(&text)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", opts.config.display())))?;
    if let Some(d) = opts.feature_dim {
        cfg.feature_dim = d;
    }
    cfg.lyapunov
        .validate()
        .map_err(|e| PipelineError::Config(format!("lyapunov: {e}")))?;
    if cfg.feature_dim == 0 || cfg.feature_dim > cfg.lyapunov.matrix_dim {
        return Err(PipelineError::Config(format!(
            "feature_dim: {} not in 1..={}",
            cfg.feature_dim, cfg.lyapunov.matrix_dim
        )));
    }
    let seed = opts.seed.or(cfg.seed).ok_or_else(|| {
        PipelineError::Config("seed: no seed in config and no --seed given".into())
    })?;
    let base = opts
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let out = match &opts.out {
        Some(o) => o.clone(),
        None => base.join(cfg.output_dir.clone().unwrap_or_else(|| "out".into())),
    };
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;

    let mut run = Run {
        cfg,
        base,
        out,
        seed: RngSeed(seed),
        config_sha256: sha256_hex(&text),
        seeds: BTreeMap::from([("global".to_string(), seed)]),
        inputs: Vec::new(),
        outputs: Vec::new(),
        ledger: Vec::new(),
    };

    let pool = match opts.jobs {
        Some(0) => return Err(PipelineError::Config("--jobs must be >= 1".into())),
        Some(n) => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| PipelineError::Failed(e.to_string()))?,
        ),
        None => None,
    };
    let body = |run: &mut Run| match command {
        Command::Exponents => run.exponents(),
        Command::Train => run.train(),
        Command::Score => run.score(),
        Command::Perturb => run.perturb(),
        Command::AttackFgsm => run.attack_fgsm(),
        Command::EvalLoao => run.eval_loao(),
        Command::Scatter => run.scatter(),
        Command::Report => run.report(),
    };
    match &pool {
        Some(p) => p.install(|| body(&mut run))?,
        None => body(&mut run)?,
    }
    run.finish(command)
}

fn config_label(p: &Path) -> String {
    if p.is_absolute() {
        p.display().to_string()
    } else {
        format!("$config/{}", p.display())
    }
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T, PipelineError> {
    s.as_ref()
        .ok_or_else(|| PipelineError::Config(format!("{name}: section missing")))
}

impl Run {
    fn finish(mut self, command: Command) -> Result<Outcome, PipelineError> {
        if !self.ledger.is_empty() || command == Command::Exponents {
            let text = serde_json::to_string_pretty(&self.ledger).expect("ledger serializes") + "\n";
            self.write(&format!("errors-{}.json", command.name()), text.as_bytes())?;
        }
        let manifest = Manifest {
            command: command.name().into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: self.config_sha256.clone(),
            seeds: self.seeds.clone(),
            feature_dim: self.cfg.feature_dim,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            ledger_entries: self.ledger.len(),
        };
        let path = self.out.join(format!("manifest-{}.json", command.name()));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(Outcome {
            command,
            out_dir: self.out,
            manifest,
            ledger: self.ledger,
        })
    }

    fn sub_seed(&mut self, name: &str, explicit: Option<u64>, stream: u64) -> RngSeed {
        let s = explicit.map(RngSeed).unwrap_or_else(|| self.seed.derive(stream));
        self.seeds.insert(name.to_string(), s.0);
        s
    }

    /// Write `bytes` to `<out>/<rel>` and record its digest.
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.outputs.push(FileDigest {
            path: format!("$out/{rel}"),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn record_input(&mut self, label: String, path: &Path) -> Result<Vec<u8>, PipelineError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        self.inputs.push(FileDigest {
            path: label,
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    fn record_dir(&mut self, label: String, dir: &Path) -> Result<(), PipelineError> {
        let mut names: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        let mut h = Sha256::new();
        for p in names {
            let mut bytes = Vec::new();
            fs::File::open(&p)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| io_err(&p, e))?;
            h.update(p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
            h.update([0]);
            h.update(Sha256::digest(&bytes));
        }
        self.inputs.push(FileDigest {
            path: label,
            sha256: hex::encode(h.finalize()),
        });
        Ok(())
    }

    fn existing(&self, field: String, rel: &Path) -> Result<PathBuf, PipelineError> {
        let p = self.base.join(rel);
        if !p.exists() {
            return Err(PipelineError::Config(format!("{field}: {} does not exist", p.display())));
        }
        Ok(p)
    }

    fn dataset(&mut self, name: &str) -> Result<Dataset, PipelineError> {
        let spec = self
            .cfg
            .datasets
            .get(name)
            .cloned()
            .ok_or_else(|| PipelineError::Config(format!("datasets: no dataset named '{name}'")))?;
        let restrict = |ds: Dataset, range: Option<[usize; 2]>| -> Result<Dataset, PipelineError> {
            match range {
                None => Ok(ds),
                Some([a, b]) if a < b && b <= ds.len() => Ok(ds.slice(a, b)),
                Some([a, b]) => Err(PipelineError::Config(format!(
                    "datasets.{name}.range: [{a}, {b}) not within 0..{}",
                    ds.len()
                ))),
            }
        };
        match spec {
            DatasetSpec::Idx {
                images,
                labels,
                range,
                provenance,
            } => {
                let ip = self.existing(format!("datasets.{name}.images"), &images)?;
                self.record_input(config_label(&images), &ip)?;
                let lp = match &labels {
                    Some(l) => {
                        let lp = self.existing(format!("datasets.{name}.labels"), l)?;
                        self.record_input(config_label(l), &lp)?;
                        Some(lp)
                    }
                    None => None,
                };
                let ds = read_idx_files(name, &ip, lp.as_deref())?;
                let ds = restrict(ds, range)?;
                match provenance {
                    None => Ok(ds),
                    Some(p) => {
                        let imgs = ds
                            .images()
                            .iter()
                            .map(|im| im.derive(im.id(), im.pixels().to_vec(), p.clone()))
                            .collect::<Result<Vec<_>, _>>()?;
                        Ok(Dataset::new(name, imgs)?)
                    }
                }
            }
            DatasetSpec::Dir {
                path,
                scaling,
                provenance,
            } => {
                let dp = self.existing(format!("datasets.{name}.path"), &path)?;
                self.record_dir(config_label(&path), &dp)?;
                Ok(load_image_dir(&dp, &DirDescriptor { scaling, provenance })?)
            }
            DatasetSpec::Output { name: out_name, range } => {
                let dp = self.out.join("images").join(&out_name);
                if !dp.is_dir() {
                    return Err(PipelineError::Config(format!(
                        "datasets.{name}: {} not produced yet",
                        dp.display()
                    )));
                }
                self.record_dir(format!("$out/images/{out_name}"), &dp)?;
                let ds = load_image_dir(&dp, &DirDescriptor::default())?;
                restrict(ds, range)
            }
        }
    }

    fn feature_file(&self, reference: &str) -> (PathBuf, String) {
        if self.cfg.datasets.contains_key(reference) {
            let rel = format!("features/{reference}.csv");
            (self.out.join(&rel), format!("$out/{rel}"))
        } else {
            (self.base.join(reference), format!("$config/{reference}"))
        }
    }

    /// Full-width feature rows of every reference, concatenated.
    fn full_features(&mut self, refs: &[String], field: &str) -> Result<FeatureMatrix, PipelineError> {
        let mut acc: Option<FeatureMatrix> = None;
        for r in refs {
            let (path, label) = self.feature_file(r);
            if !path.exists() {
                return Err(PipelineError::Config(format!(
                    "{field}: {} does not exist (run `exponents` first?)",
                    path.display()
                )));
            }
            let bytes = self.record_input(label, &path)?;
            let fm = FeatureMatrix::read_csv(bytes.as_slice())
                .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
            acc = Some(match acc {
                None => fm,
                Some(a) => a.concat(&fm)?,
            });
        }
        acc.ok_or_else(|| PipelineError::Config(format!("{field}: no feature files listed")))
    }

    fn features(&mut self, refs: &[String], field: &str) -> Result<FeatureMatrix, PipelineError> {
        let dim = self.cfg.feature_dim;
        Ok(self.full_features(refs, field)?.truncate(dim)?)
    }

    fn exponents(&mut self) -> Result<(), PipelineError> {
        let names = section(&self.cfg.exponents, "exponents")?.datasets.clone();
        let params = self.cfg.lyapunov;
        for name in names {
            let ds = self.dataset(&name)?;
            let results: Vec<_> = ds
                .images()
                .par_iter()
                .map(|im| lyap_spectrum(&flatten(im), &params))
                .collect();
            let mut spectra = Vec::new();
            let mut meta = Vec::new();
            for (im, r) in ds.images().iter().zip(results) {
                match r {
                    Ok(s) => {
                        spectra.push(s);
                        meta.push(RowMeta::of(im));
                    }
                    Err(e) => {
                        log::warn!("{name}/{}: {e}", im.id());
                        self.ledger.push(LedgerEntry {
                            dataset: name.clone(),
                            id: im.id().to_string(),
                            error: e.to_string(),
                        });
                    }
                }
            }
            let fm = build_features(&spectra, params.matrix_dim, meta)?;
            let mut buf = Vec::new();
            fm.write_csv(&mut buf)?;
            self.write(&format!("features/{name}.csv"), &buf)?;
            log::info!("{name}: {} spectra", fm.len());
        }
        Ok(())
    }

    fn train(&mut self) -> Result<(), PipelineError> {
        let s = section(&self.cfg.train, "train")?.clone();
        let mut fm = self.features(&s.features, "train.features")?;
        if !s.augment.is_empty() {
            let extra = self.features(&s.augment, "train.augment")?;
            fm = fm.concat(&extra)?;
        }
        let seed = self.sub_seed("train", s.seed, 1);
        let det = DetectorRegistry::default().train(&s.detector, &fm, s.params.clone(), seed)?;
        let text = save_detector(det.as_ref())? + "\n";
        self.write(&s.output, text.as_bytes())
    }

    fn score(&mut self) -> Result<(), PipelineError> {
        let s = section(&self.cfg.score, "score")?.clone();
        let model_path = self.out.join(&s.model);
        if !model_path.exists() {
            return Err(PipelineError::Config(format!(
                "score.model: {} does not exist (run `train` first?)",
                model_path.display()
            )));
        }
        let text = self.record_input(format!("$out/{}", s.model), &model_path)?;
        let det = DetectorRegistry::default().load(&String::from_utf8_lossy(&text))?;
        let fm = self.features(&s.features, "score.features")?;
        let mut rows = Vec::with_capacity(fm.len());
        for (r, m) in fm.rows().iter().zip(fm.meta()) {
            let score = det.score(r)?;
            rows.push(ScoreRow {
                id: m.id.clone(),
                provenance: m.provenance.clone(),
                label: m.label,
                score,
                decision: crate::anomaly::decide_score(score, det.threshold()),
            });
        }
        let mut buf = Vec::new();
        write_scores_csv(&rows, &mut buf)?;
        self.write(&format!("{}.csv", s.output), &buf)?;
        let summary = summarize_scores(&rows, None)?;
        let text = serde_json::to_string_pretty(&summary).expect("report serializes") + "\n";
        self.write(&format!("{}-report.json", s.output), text.as_bytes())
    }

    fn perturb(&mut self) -> Result<(), PipelineError> {
        let s = section(&self.cfg.perturb, "perturb")?.clone();
        let ds = self.dataset(&s.dataset)?;
        let images: Vec<Image> = match (&s.noise, &s.matched_l2) {
            (Some(noise), None) => {
                let model = noise.build()?;
                self.seeds.insert("noise".into(), noise.seed.0);
                let suffix = model.name();
                ds.images()
                    .par_iter()
                    .enumerate()
                    .map(|(k, im)| {
                        Ok(apply_noise(im, model.as_ref(), noise.seed.derive(k as u64))?
                            .with_id(format!("{}-{suffix}", im.id())))
                    })
                    .collect::<Result<_, PipelineError>>()?
            }
            (None, Some(m)) => {
                let clean = self.dataset(&m.clean)?;
                let adv = self.dataset(&m.adversarial)?;
                let distances = clean
                    .images()
                    .iter()
                    .zip(adv.images())
                    .map(|(a, b)| l2_distance(a, b))
                    .collect::<Result<Vec<_>, _>>()?;
                let seed = self.sub_seed("matched_l2", m.seed, 2);
                ds.images()
                    .par_iter()
                    .enumerate()
                    .map(|(k, im)| {
                        let k = k as u64;
                        let target = sample_matched_magnitude(&distances, seed.derive(2 * k))?;
                        Ok(perturb_to_magnitude(im, target, seed.derive(2 * k + 1))?
                            .with_id(format!("{}-matched_l2", im.id())))
                    })
                    .collect::<Result<_, PipelineError>>()?
            }
            _ => {
                return Err(PipelineError::Config(
                    "perturb: give exactly one of `noise` and `matched_l2`".into(),
                ))
            }
        };
        self.write_images(&s.output, images)
    }

    fn write_images(&mut self, output: &str, images: Vec<Image>) -> Result<(), PipelineError> {
        let ds = Dataset::new(output, images)?;
        let dir = self.out.join("images").join(output);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        let written = crate::ingest::write_image_dir(&ds, &dir)?;
        for p in written {
            let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
            let rel = p.strip_prefix(&self.out).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            self.outputs.push(FileDigest {
                path: format!("$out/{rel}"),
                sha256: sha256_hex(&bytes),
            });
        }
        log::info!("wrote {} images to {}", ds.len(), dir.display());
        Ok(())
    }

    fn attack_fgsm(&mut self) -> Result<(), PipelineError> {
        let s = section(&self.cfg.attack_fgsm, "attack_fgsm")?.clone();
        let train = self.dataset(&s.train)?;
        let targets = self.dataset(&s.targets)?;
        let seed = self.sub_seed("victim", s.seed, 3);
        let cfg = SoftmaxTrainConfig {
            lr: s.victim.lr,
            epochs: s.victim.epochs,
            batch_size: s.victim.batch_size,
            init_std: s.victim.init_std,
            seed,
        };
        let trained = softmax_train(train.images(), &cfg)?;
        let model = &trained.model;
        let adv: Vec<Image> = targets
            .images()
            .par_iter()
            .map(|im| Ok(fgsm(model, im, &s.fgsm)?.with_id(format!("{}-fgsm", im.id()))))
            .collect::<Result<_, PipelineError>>()?;
        let report = VictimReport {
            train_accuracy: trained.train_accuracy,
            target_accuracy: model.accuracy(targets.images()),
            adversarial_accuracy: model.accuracy(&adv),
            model: model.clone(),
        };
        let text = serde_json::to_string(&report).expect("victim serializes") + "\n";
        self.write("victim.json", text.as_bytes())?;
        self.write_images(&s.output, adv)
    }

    fn eval_loao(&mut self) -> Result<(), PipelineError> {
        let s = section(&self.cfg.eval_loao, "eval_loao")?.clone();
        let natural = self
            .features(std::slice::from_ref(&s.natural), "eval_loao.natural")?
            .filter(|m| !m.provenance.is_adversarial());
        let all = self.features(&s.attacks, "eval_loao.attacks")?;
        let mut groups: BTreeMap<String, FeatureMatrix> = BTreeMap::new();
        for m in all.meta() {
            if let Some(key) = attack_key(&m.provenance) {
                groups
                    .entry(key)
                    .or_insert_with(|| all.filter(|r| r.provenance == m.provenance));
            }
        }
        let mut cfg = s.loao.clone();
        cfg.logistic.seed = self.sub_seed("loao", None, 4);
        let results = leave_one_attack_out(&natural, &groups, &cfg)?;
        let mut summary = BTreeMap::new();
        for (name, r) in &results {
            let mut buf = Vec::new();
            r.roc.write_csv(&mut buf)?;
            self.write(&format!("{}/{}.csv", s.output, name.replace(':', "_")), &buf)?;
            summary.insert(
                name.clone(),
                LoaoSummary {
                    auroc: r.roc.auroc,
                    n_left_out: groups[name].len(),
                    converged: r.model.converged,
                },
            );
        }
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        self.write(&format!("{}/summary.json", s.output), text.as_bytes())
    }

    fn scatter(&mut self) -> Result<(), PipelineError> {
        let s = section(&self.cfg.scatter, "scatter")?.clone();
        let fm = self.features(&s.features, "scatter.features")?;
        let model = pca_fit(&fm)?;
        let pts = pca_project(&model, &fm)?;
        let mut buf = Vec::new();
        write_scatter_csv(&fm, &pts, &mut buf)?;
        self.write(&format!("{}.csv", s.output), &buf)?;
        let groups: Vec<usize> = fm
            .meta()
            .iter()
            .map(|m| usize::from(m.provenance.is_adversarial()))
            .collect();
        let doc = ScatterSummary {
            pca: model,
            silhouette_legit_vs_adversarial: silhouette_score(&pts, &groups),
        };
        let text = serde_json::to_string_pretty(&doc).expect("pca serializes") + "\n";
        self.write(&format!("{}-pca.json", s.output), text.as_bytes())
    }

    fn report(&mut self) -> Result<(), PipelineError> {
        let s = section(&self.cfg.report, "report")?.clone();
        let path = self.out.join(&s.scores);
        if !path.exists() {
            return Err(PipelineError::Config(format!(
                "report.scores: {} does not exist (run `score` first?)",
                path.display()
            )));
        }
        let bytes = self.record_input(format!("$out/{}", s.scores), &path)?;
        let rows = read_scores_csv(bytes.as_slice())?;
        let seed = self.sub_seed("bootstrap", None, 5);
        let mut summary = summarize_scores(&rows, Some((s.bootstrap, s.level, seed)))?;
        if !s.features.is_empty() {
            let fm = self.full_features(&s.features, "report.features")?;
            summary.positive_exponent_fraction = Some(positive_fractions(&fm));
        }
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        self.write(&s.output, text.as_bytes())
    }
}

/// `adversarial:fgsm:untargeted` → `fgsm:untargeted`.
fn attack_key(p: &Provenance) -> Option<String> {
    p.is_adversarial()
        .then(|| p.to_string().trim_start_matches("adversarial:").to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimReport {
    pub train_accuracy: f64,
    pub target_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub model: SoftmaxModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaoSummary {
    pub auroc: f64,
    pub n_left_out: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSummary {
    pub pca: PcaModel,
    pub silhouette_legit_vs_adversarial: Option<f64>,
}

/// Share of spectra with an exponent strictly above 0, per pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositiveFractions {
    pub legitimate: Option<f64>,
    pub adversarial: Option<f64>,
}

pub fn positive_fractions(fm: &FeatureMatrix) -> PositiveFractions {
    let frac = |adv: bool| {
        let pool: Vec<&Vec<f64>> = fm
            .rows()
            .iter()
            .zip(fm.meta())
            .filter(|(_, m)| m.provenance.is_adversarial() == adv)
            .map(|(r, _)| r)
            .collect();
        (!pool.is_empty()).then(|| {
            pool.iter().filter(|r| r.iter().any(|&e| e > 0.0)).count() as f64 / pool.len() as f64
        })
    };
    PositiveFractions {
        legitimate: frac(false),
        adversarial: frac(true),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub detection: DetectionReport,
    /// Adversarial rows as positives; absent unless both pools are present.
    pub auroc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc_ci: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_exponent_fraction: Option<PositiveFractions>,
}

pub fn summarize_scores(
    rows: &[ScoreRow],
    bootstrap: Option<(usize, f64, RngSeed)>,
) -> Result<ScoreSummary, PipelineError> {
    let decisions: Vec<Decision> = rows.iter().map(|r| r.decision).collect();
    let prov: Vec<Provenance> = rows.iter().map(|r| r.provenance.clone()).collect();
    let detection = detection_report(&decisions, &prov)?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = prov.iter().map(Provenance::is_adversarial).collect();
    let both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
    let auroc = if both { Some(roc(&scores, &labels)?.auroc) } else { None };
    let auroc_ci = match bootstrap {
        Some((n, level, seed)) if both => Some(bootstrap_auroc_ci(&scores, &labels, n, level, seed)?),
        _ => None,
    };
    Ok(ScoreSummary {
        detection,
        auroc,
        auroc_ci,
        positive_exponent_fraction: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub provenance: Provenance,
    pub label: Option<u8>,
    pub score: f64,
    pub decision: Decision,
}

/// CSV `id,provenance,label,score,decision`.
pub fn write_scores_csv<W: std::io::Write>(rows: &[ScoreRow], w: W) -> Result<(), PipelineError> {
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| PipelineError::Io(e.to_string());
    wr.write_record(["id", "provenance", "label", "score", "decision"])
        .map_err(err)?;
    for r in rows {
        let d = match r.decision {
            Decision::Accept => "accept",
            Decision::Reject => "reject",
        };
        wr.write_record([
            r.id.clone(),
            r.provenance.to_string(),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
            r.score.to_string(),
            d.to_string(),
        ])
        .map_err(err)?;
    }
    wr.flush().map_err(|e| PipelineError::Io(e.to_string()))
}

pub fn read_scores_csv<R: Read>(r: R) -> Result<Vec<ScoreRow>, PipelineError> {
    let bad = |msg: String| PipelineError::Io(format!("scores CSV: {msg}"));
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(["id", "provenance", "label", "score", "decision"]) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        rows.push(ScoreRow {
            id: rec[0].to_string(),
            provenance: rec[1].parse().map_err(|e: IngestError| bad(e.to_string()))?,
            label: match &rec[2] {
                "" => None,
                s => Some(s.parse().map_err(|e| bad(format!("label '{s}': {e}")))?),
            },
            score: rec[3].parse().map_err(|e| bad(format!("score '{}': {e}", &rec[3])))?,
            decision: match &rec[4] {
                "accept" => Decision::Accept,
                "reject" => Decision::Reject,
                other => return Err(bad(format!("decision '{other}'"))),
            },
        });
    }
    Ok(rows)
}
