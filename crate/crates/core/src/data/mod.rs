//! Multi-environment image datasets: IDX ingestion, procedural digit glyphs,
//! and the rotated / colored environment families.

mod envs;
mod glyphs;
mod idx;

pub use envs::{build_colored, build_rotated, rotate_image, split_in_out};
pub use glyphs::{synth_glyphs, GLYPH_CLASSES, GLYPH_SIZE};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{derive_seed, tag};

/// Images in `[0, 1]` (N x C x H x W) with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImages {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4("labeled_images")?;
        if labels.len() != n {
            return Err(Error::dim("labeled_images", "labels", n, labels.len()));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Label {
                index,
                label,
                classes: num_classes,
            });
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        Ok(LabeledImages {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of a single image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(LabeledImages {
            images: self.images.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_shape().iter().product()
    }
}

/// Per-environment descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvParam {
    RotationDegrees(f64),
    ColorCorrelation(f64),
}

/// In/out partition of one environment.
#[derive(Clone, Debug)]
pub struct SplitPair {
    pub in_split: LabeledImages,
    pub out_split: LabeledImages,
    pub in_indices: Vec<usize>,
    pub out_indices: Vec<usize>,
}

/// One labeled image collection per environment.
#[derive(Clone, Debug)]
pub struct EnvironmentDataset {
    pub name: String,
    pub environments: Vec<LabeledImages>,
    pub env_params: Vec<EnvParam>,
    pub split_fraction: f64,
    pub seed: u64,
}

impl EnvironmentDataset {
    pub fn new(
        name: impl Into<String>,
        environments: Vec<LabeledImages>,
        env_params: Vec<EnvParam>,
        split_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let first = environments
            .first()
            .ok_or_else(|| Error::Consistency("dataset has no environments".into()))?;
        if env_params.len() != environments.len() {
            return Err(Error::Consistency(format!(
                "{} environments but {} descriptors",
                environments.len(),
                env_params.len()
            )));
        }
        for (i, e) in environments.iter().enumerate() {
            if e.image_shape() != first.image_shape() || e.num_classes != first.num_classes {
                return Err(Error::Consistency(format!(
                    "environment {i} has shape {:?}/{} classes, expected {:?}/{}",
                    e.image_shape(),
                    e.num_classes,
                    first.image_shape(),
                    first.num_classes
                )));
            }
        }
        if !(split_fraction > 0.0 && split_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("split fraction {split_fraction} not in (0, 1)")));
        }
        Ok(EnvironmentDataset {
            name: name.into(),
            environments,
            env_params,
            split_fraction,
            seed,
        })
    }

    pub fn with_split_fraction(mut self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("split fraction {fraction} not in (0, 1)")));
        }
        self.split_fraction = fraction;
        Ok(self)
    }

    pub fn num_envs(&self) -> usize {
        self.environments.len()
    }

    pub fn num_classes(&self) -> usize {
        self.environments[0].num_classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.environments[0].image_shape()
    }

    /// Split seed for environment `env`; shared by training and probing so
    /// both see the same partitions.
    pub fn split_seed(&self, env: usize) -> u64 {
        derive_seed(self.seed, &[tag("split"), env as u64])
    }

    pub fn split(&self, env: usize) -> Result<SplitPair> {
        let e = self
            .environments
            .get(env)
            .ok_or_else(|| Error::InvalidArgument(format!("environment {env} out of range 0..{}", self.num_envs())))?;
        split_in_out(e, self.split_fraction, self.split_seed(env))
    }

    pub fn splits(&self) -> Result<Vec<SplitPair>> {
        (0..self.num_envs()).map(|e| self.split(e)).collect()
    }

    /// Indices of every environment except `test_env`, in order.
    pub fn training_envs(&self, test_env: usize) -> Result<Vec<usize>> {
        if test_env >= self.num_envs() {
            return Err(Error::InvalidArgument(format!(
                "test environment {test_env} out of range 0..{}",
                self.num_envs()
            )));
        }
        Ok((0..self.num_envs()).filter(|&e| e != test_env).collect())
    }
}
