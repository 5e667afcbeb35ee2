//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::{Algorithm, AlgorithmConfig};
use crate::data::{build_colored, build_rotated, load_idx, synth_glyphs, EnvironmentDataset, LabeledImages};
use crate::error::{Error, Result};
use crate::featurizers::{Family, FeaturizerSpec};
use crate::probing::ProbeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Rotated,
    Colored,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    /// Procedurally rendered digit glyphs.
    Glyphs,
    /// An IDX image/label pair on disk.
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub source: ImageSource,
    pub glyphs_per_class: usize,
    pub glyph_seed: u64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    /// Rotation per environment, in degrees.
    pub angles: Vec<f64>,
    /// Colour/label agreement per environment.
    pub correlations: Vec<f64>,
    pub label_noise: f64,
    pub per_env_n: usize,
    pub split_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Rotated,
            source: ImageSource::Glyphs,
            glyphs_per_class: 300,
            glyph_seed: 0,
            idx_images: None,
            idx_labels: None,
            angles: vec![0.0, 15.0, 30.0, 45.0, 60.0, 75.0],
            correlations: vec![0.9, 0.8, 0.1],
            label_noise: 0.25,
            per_env_n: 1000,
            split_fraction: 0.2,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn num_envs(&self) -> usize {
        match self.kind {
            DatasetKind::Rotated => self.angles.len(),
            DatasetKind::Colored => self.correlations.len(),
        }
    }

    fn base_images(&self, root: &Path) -> Result<LabeledImages> {
        match self.source {
            ImageSource::Glyphs => synth_glyphs(self.glyph_seed, self.glyphs_per_class),
            ImageSource::Idx => {
                let need = |p: &Option<PathBuf>, key: &str| {
                    p.as_ref().map(|p| root.join(p)).ok_or_else(|| Error::Config {
                        key: format!("dataset.{key}"),
                        message: "required when source = \"idx\"".into(),
                    })
                };
                load_idx(need(&self.idx_images, "idx_images")?, need(&self.idx_labels, "idx_labels")?)
            }
        }
    }

    /// Builds the environments; relative IDX paths resolve against `root`.
    pub fn build(&self, root: &Path) -> Result<EnvironmentDataset> {
        let base = self.base_images(root)?;
        let ds = match self.kind {
            DatasetKind::Rotated => build_rotated(&base, &self.angles, self.per_env_n, self.seed)?,
            DatasetKind::Colored => build_colored(&base, &self.correlations, self.label_noise, self.per_env_n, self.seed)?,
        };
        ds.with_split_fraction(self.split_fraction)
    }

    /// Channel count of the built images.
    pub fn input_channels(&self) -> usize {
        match self.kind {
            DatasetKind::Rotated => 1,
            DatasetKind::Colored => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizerConfig {
    pub family: Family,
    /// Empty means the family's canonical widths.
    pub channels: Vec<usize>,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig { family: Family::MiniCnn, channels: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algorithms: Vec<Algorithm>,
    /// Held-out environments; empty means all of them.
    pub test_envs: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// Per environment.
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub anneal_step: usize,
    pub groupdro_eta: f64,
    pub andmask_tau: f64,
    pub mixup_alpha: f64,
    pub mmd_gamma: Option<f64>,
    pub eval_interval: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AlgorithmConfig::default();
        TrainConfig {
            algorithms: vec![Algorithm::Erm],
            test_envs: Vec::new(),
            seeds: vec![0],
            steps: a.steps,
            batch_size: a.batch_size,
            lr: a.lr,
            lambda: a.lambda,
            anneal_step: a.anneal_step,
            groupdro_eta: a.groupdro_eta,
            andmask_tau: a.andmask_tau,
            mixup_alpha: a.mixup_alpha,
            mmd_gamma: a.mmd_gamma,
            eval_interval: a.eval_interval,
            checkpoint_every: a.checkpoint_every,
        }
    }
}

impl TrainConfig {
    pub fn algorithm_config(&self, algorithm: Algorithm) -> AlgorithmConfig {
        AlgorithmConfig {
            algorithm,
            lr: self.lr,
            steps: self.steps,
            batch_size: self.batch_size,
            lambda: self.lambda,
            anneal_step: self.anneal_step,
            groupdro_eta: self.groupdro_eta,
            andmask_tau: self.andmask_tau,
            mixup_alpha: self.mixup_alpha,
            mmd_gamma: self.mmd_gamma,
            eval_interval: self.eval_interval,
            checkpoint_every: self.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeBlock {
    pub lr: f64,
    pub batch_size: usize,
    pub budget: usize,
    pub eval_interval: usize,
    pub patience: usize,
    pub min_delta: f64,
    /// Also train shuffled-label control probes.
    pub control: bool,
    /// Target accuracy uncertainty for the sample-size recommendation.
    pub epsilon: f64,
    pub delta: f64,
}

impl Default for ProbeBlock {
    fn default() -> Self {
        let p = ProbeConfig::default();
        ProbeBlock {
            lr: p.lr,
            batch_size: p.batch_size,
            budget: p.budget,
            eval_interval: p.eval_interval,
            patience: p.patience,
            min_delta: p.min_delta,
            control: false,
            epsilon: 0.02,
            delta: 0.05,
        }
    }
}

impl ProbeBlock {
    pub fn probe_config(&self, control: bool) -> ProbeConfig {
        ProbeConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            budget: self.budget,
            eval_interval: self.eval_interval,
            patience: self.patience,
            min_delta: self.min_delta,
            control,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportBlock {
    /// Optional `algorithm,mean,std` CSV for outlier filtering.
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    /// Concurrent cells; 0 means one per logical core.
    pub workers: usize,
    pub dataset: DatasetConfig,
    pub featurizer: FeaturizerConfig,
    pub train: TrainConfig,
    pub probe: ProbeBlock,
    pub report: ReportBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_dir: PathBuf::from("runs"),
            workers: 0,
            dataset: DatasetConfig::default(),
            featurizer: FeaturizerConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeBlock::default(),
            report: ReportBlock::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let config: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::Config { key, message: e.into_inner().message().trim().to_string() }
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config; relative `out_dir` and `report.reference` resolve
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        if config.out_dir.is_relative() {
            config.out_dir = dir.join(&config.out_dir);
        }
        if let Some(r) = config.report.reference.as_mut().filter(|r| r.is_relative()) {
            *r = dir.join(&*r);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config { key: key.into(), message });
        let envs = self.dataset.num_envs();
        if envs < 2 {
            return bad("dataset", format!("need at least 2 environments, have {envs}"));
        }
        if self.dataset.per_env_n < 2 {
            return bad("dataset.per_env_n", "must be >= 2".into());
        }
        if !(self.dataset.split_fraction > 0.0 && self.dataset.split_fraction < 1.0) {
            return bad("dataset.split_fraction", "must lie in (0, 1)".into());
        }
        if self.train.algorithms.is_empty() {
            return bad("train.algorithms", format!("must name at least one of {}", Algorithm::valid_names()));
        }
        if self.train.seeds.is_empty() {
            return bad("train.seeds", "must not be empty".into());
        }
        if let Some(&e) = self.train.test_envs.iter().find(|&&e| e >= envs) {
            return bad("train.test_envs", format!("environment {e} out of range 0..{envs}"));
        }
        self.train.algorithm_config(Algorithm::Erm).validate().map_err(|e| match e {
            Error::Config { key, message } => Error::Config { key: format!("train.{key}"), message },
            other => other,
        })?;
        self.probe.probe_config(false).validate()?;
        if !(self.probe.epsilon > 0.0 && self.probe.epsilon < 1.0) {
            return bad("probe.epsilon", "must lie in (0, 1)".into());
        }
        if !(self.probe.delta > 0.0 && self.probe.delta < 1.0) {
            return bad("probe.delta", "must lie in (0, 1)".into());
        }
        self.featurizer_spec()?.validate().map_err(|e| Error::Config { key: "featurizer".into(), message: e.to_string() })
    }

    pub fn test_envs(&self) -> Vec<usize> {
        if self.train.test_envs.is_empty() {
            (0..self.dataset.num_envs()).collect()
        } else {
            self.train.test_envs.clone()
        }
    }

    pub fn featurizer_spec(&self) -> Result<FeaturizerSpec> {
        let shape = [self.dataset.input_channels(), 28, 28];
        let ch = &self.featurizer.channels;
        Ok(match self.featurizer.family {
            Family::MiniCnn if ch.is_empty() => FeaturizerSpec::mini_cnn(shape),
            Family::MiniCnn => {
                let arr: [usize; 4] = ch.as_slice().try_into().map_err(|_| Error::Config {
                    key: "featurizer.channels".into(),
                    message: format!("mini_cnn takes 4 widths, got {}", ch.len()),
                })?;
                FeaturizerSpec::mini_cnn_with(shape, arr)
            }
            Family::MiniResnet if ch.is_empty() => FeaturizerSpec::mini_resnet(shape),
            Family::MiniResnet => FeaturizerSpec::mini_resnet_with(shape, ch.clone()),
        })
    }
}
