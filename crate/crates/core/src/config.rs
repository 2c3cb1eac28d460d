//! Experiment configuration files (TOML, strict).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{RngStream, Tensor};
use crate::data::{load_flat, load_idx, split, Dataset, SplitSpec, DATA_DIR_ENV};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, LikelihoodKind};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Idx,
    Flat,
}

/// One data source: IDX image/label files or a flat-binary manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

/// Partition of a single source when no separate test source is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    #[serde(default)]
    pub valid: usize,
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub train: SourceConfig,
    #[serde(default)]
    pub test: Option<SourceConfig>,
    #[serde(default)]
    pub split: Option<SplitConfig>,
    /// Keep only the first rows of each part.
    #[serde(default)]
    pub max_train: Option<usize>,
    #[serde(default)]
    pub max_test: Option<usize>,
}

/// Training hyperparameters; the architecture lives in its own block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingBlock {
    #[serde(default = "d_lr")]
    pub base_lr: f64,
    #[serde(default = "d_flat")]
    pub flat_epochs: usize,
    #[serde(default = "d_anneal")]
    pub anneal_epochs: usize,
    #[serde(default = "d_factor")]
    pub anneal_factor: f64,
    #[serde(default = "d_batch")]
    pub minibatch: usize,
    #[serde(default = "d_one")]
    pub k_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_true")]
    pub binarize_inputs: bool,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "d_one")]
    pub valid_k: usize,
}

fn d_lr() -> f64 {
    1e-3
}
fn d_flat() -> usize {
    1000
}
fn d_anneal() -> usize {
    2000
}
fn d_factor() -> f64 {
    0.998
}
fn d_batch() -> usize {
    100
}
fn d_one() -> usize {
    1
}
fn d_true() -> bool {
    true
}
fn d_eval_k() -> usize {
    5000
}
fn d_chunk() -> usize {
    500
}
fn d_steps() -> usize {
    100
}

impl Default for TrainingBlock {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationBlock {
    /// Importance samples for the test log-likelihood.
    #[serde(default = "d_eval_k")]
    pub k: usize,
    #[serde(default = "d_chunk")]
    pub chunk: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_steps")]
    pub impute_steps: usize,
}

impl Default for EvaluationBlock {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    #[serde(default)]
    pub training: TrainingBlock,
    #[serde(default)]
    pub evaluation: EvaluationBlock,
    pub output: OutputBlock,
}

/// A parsed configuration plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub sha256: String,
}

/// The data a command works on.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| text[s].lines().next().unwrap_or("").trim().to_string()).unwrap_or_default();
            Error::config(if field.is_empty() { "<root>".to_string() } else { field }, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            arch: self.arch.clone(),
            base_lr: t.base_lr,
            flat_epochs: t.flat_epochs,
            anneal_epochs: t.anneal_epochs,
            anneal_factor: t.anneal_factor,
            minibatch: t.minibatch,
            k_samples: t.k_samples,
            seed: t.seed,
            binarize_inputs: t.binarize_inputs,
            epochs: t.epochs,
            checkpoint_every: t.checkpoint_every,
            valid_k: t.valid_k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let d = &self.dataset;
        let check_source = |s: &SourceConfig, name: &str| -> Result<()> {
            match d.kind {
                DatasetKind::Idx if s.images.is_none() => Err(Error::config(format!("dataset.{name}.images"), "missing path")),
                DatasetKind::Flat if s.manifest.is_none() => Err(Error::config(format!("dataset.{name}.manifest"), "missing path")),
                _ => Ok(()),
            }
        };
        check_source(&d.train, "train")?;
        if let Some(t) = &d.test {
            check_source(t, "test")?;
        }
        if d.test.is_some() && d.split.as_ref().is_some_and(|s| s.test > 0) {
            return Err(Error::config("dataset.split.test", "must be 0 when a separate test source is given"));
        }
        if self.evaluation.k == 0 || self.evaluation.chunk == 0 {
            return Err(Error::config("evaluation.k", "k and chunk must be positive"));
        }
        Ok(())
    }
}

/// Resolves a relative data path against the data directory variable when
/// set, else against the configuration file's directory.
pub fn resolve_data_path(path: &Path, base_dir: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if !dir.is_empty() => Path::new(&dir).join(path),
        _ => base_dir.join(path),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let config = ExperimentConfig::parse(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base_dir, sha256: sha256_hex(text.as_bytes()) })
    }

    fn load_source(&self, s: &SourceConfig, name: &str) -> Result<Dataset> {
        let resolve = |p: &Path, field: &str| -> Result<PathBuf> {
            let full = resolve_data_path(p, &self.base_dir);
            if !full.exists() {
                return Err(Error::config(format!("dataset.{name}.{field}"), format!("file {} does not exist", full.display())));
            }
            Ok(full)
        };
        let data = match self.config.dataset.kind {
            DatasetKind::Idx => {
                let images = resolve(s.images.as_deref().expect("validated"), "images")?;
                let labels = s.labels.as_deref().map(|l| resolve(l, "labels")).transpose()?;
                load_idx(&images, labels.as_deref())?
            }
            DatasetKind::Flat => load_flat(&resolve(s.manifest.as_deref().expect("validated"), "manifest")?)?,
        };
        if data.input_dim() != self.config.arch.input_dim {
            return Err(Error::config(
                "arch.input_dim",
                format!("is {} but the {name} data has {} pixels", self.config.arch.input_dim, data.input_dim()),
            ));
        }
        Ok(data)
    }

    /// Loads the configured data and applies the split and size limits.
    pub fn load_data(&self) -> Result<Splits> {
        let d = &self.config.dataset;
        let source = self.load_source(&d.train, "train")?;
        let (mut train, valid, mut test) = match &d.split {
            Some(s) => {
                let sizes = [("train", s.train), ("valid", s.valid), ("test", s.test)];
                let wanted: Vec<(&str, usize)> = sizes.into_iter().filter(|p| p.1 > 0).collect();
                let mut parts = split(&source, &SplitSpec::new(&wanted, s.seed))?.into_iter();
                let mut take = |n: usize| if n > 0 { parts.next() } else { None };
                let tr = take(s.train).ok_or_else(|| Error::config("dataset.split.train", "must be positive"))?;
                let va = take(s.valid);
                (tr, va, take(s.test))
            }
            None => (source, None, None),
        };
        if let Some(t) = &d.test {
            test = Some(self.load_source(t, "test")?);
        }
        if let Some(n) = d.max_train {
            train = train.head(n)?;
        }
        if let (Some(n), Some(t)) = (d.max_test, test.as_mut()) {
            *t = t.head(n)?;
        }
        Ok(Splits { train, valid, test })
    }

    /// Test images as the model sees them: binarized once with a fixed
    /// stream for Bernoulli models.
    pub fn test_tensor(&self, test: &Dataset) -> Result<Tensor<f32>> {
        prepare_eval_data(test, &self.config.arch, self.config.evaluation.seed)
    }
}

pub fn prepare_eval_data(data: &Dataset, arch: &ArchConfig, seed: u64) -> Result<Tensor<f32>> {
    match arch.likelihood {
        LikelihoodKind::Bernoulli => RngStream::new(seed, "eval/binarize").bernoulli(&data.images),
        LikelihoodKind::Gaussian => Ok(data.images.clone()),
    }
}

/// Image height and width for known input sizes.
pub fn image_dims(input_dim: usize) -> (usize, usize) {
    match input_dim {
        784 => (28, 28),
        560 => (28, 20),
        128 => (16, 8),
        n => {
            let side = (n as f64).sqrt().round() as usize;
            if side * side == n {
                (side, side)
            } else {
                (1, n)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
[dataset]
kind = "idx"
train = { images = "train-images.gz", labels = "train-labels.gz" }
split = { train = 8, valid = 1, test = 1, seed = 3 }

[arch]
input_dim = 4
widths = [3]
latent_dim = 2
slots = [2]
likelihood = "bernoulli"
lambda = [0.1]

[training]
minibatch = 4
epochs = 2

[output]
dir = "out"
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::parse(GOOD).unwrap();
        assert_eq!(c.training.flat_epochs, 1000);
        assert_eq!(c.evaluation.k, 5000);
        assert!(c.arch.stop_gradient_targets);
        assert_eq!(c.train_config().total_epochs(), 2);
    }

    #[test]
    fn rejects_unknown_and_missing_fields() {
        let typo = GOOD.replace("minibatch = 4", "minibach = 4");
        match ExperimentConfig::parse(&typo) {
            Err(Error::Config { detail, .. }) => assert!(detail.contains("minibach"), "{detail}"),
            other => panic!("{other:?}"),
        }
        let missing = GOOD.replace("train = { images = \"train-images.gz\", labels = \"train-labels.gz\" }", "train = { labels = \"x\" }");
        match ExperimentConfig::parse(&missing) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dataset.train.images"),
            other => panic!("{other:?}"),
        }
        let bad_slots = GOOD.replace("slots = [2]", "slots = [2, 2]");
        assert!(matches!(ExperimentConfig::parse(&bad_slots), Err(Error::Config { .. })));
    }

    #[test]
    fn missing_files_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, GOOD).unwrap();
        let loaded = LoadedConfig::load(&p).unwrap();
        match loaded.load_data() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dataset.train.images"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dims() {
        assert_eq!(image_dims(784), (28, 28));
        assert_eq!(image_dims(560), (28, 20));
        assert_eq!(image_dims(128), (16, 8));
        assert_eq!(image_dims(16), (4, 4));
    }
}
