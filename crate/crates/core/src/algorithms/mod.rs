//! OOD training algorithms as objective/gradient transformations over
//! per-environment minibatches, plus the leave-one-out training loop.

mod penalties;
mod train;

pub use penalties::{
    andmask_aggregate, coral_penalty, erm_loss, groupdro_reweight, irm_penalty, irm_scale_gradient, mixup_minibatches,
    mixup_with, mmd_penalty, per_env_risks, vrex_penalty, MixedBatch,
};
pub use train::{evaluate, train_algorithm, TrainRun};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Algorithm {
    Erm,
    Irm,
    Vrex,
    GroupDro,
    Coral,
    Mmd,
    Mixup,
    AndMask,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::Erm,
        Algorithm::Irm,
        Algorithm::Vrex,
        Algorithm::GroupDro,
        Algorithm::Coral,
        Algorithm::Mmd,
        Algorithm::Mixup,
        Algorithm::AndMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Erm => "ERM",
            Algorithm::Irm => "IRM",
            Algorithm::Vrex => "VREx",
            Algorithm::GroupDro => "GroupDRO",
            Algorithm::Coral => "CORAL",
            Algorithm::Mmd => "MMD",
            Algorithm::Mixup => "Mixup",
            Algorithm::AndMask => "ANDMask",
        }
    }

    /// Algorithms whose objective is ERM plus a weighted penalty term.
    pub fn is_penalized(self) -> bool {
        matches!(self, Algorithm::Irm | Algorithm::Vrex | Algorithm::Coral | Algorithm::Mmd)
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown algorithm `{s}`; valid: {}", Self::valid_names())))
    }
}

impl TryFrom<String> for Algorithm {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Algorithm> for String {
    fn from(a: Algorithm) -> String {
        a.name().to_string()
    }
}

/// Optimizer and penalty settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    pub steps: usize,
    /// Per-environment minibatch size.
    pub batch_size: usize,
    pub lambda: f64,
    /// The penalty weight is 0 before this step and `lambda` from it on.
    pub anneal_step: usize,
    pub groupdro_eta: f64,
    pub andmask_tau: f64,
    pub mixup_alpha: f64,
    /// Defaults to 1 / D when unset.
    pub mmd_gamma: Option<f64>,
    pub eval_interval: usize,
    pub checkpoint_every: usize,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        AlgorithmConfig {
            algorithm: Algorithm::Erm,
            lr: 1e-3,
            steps: 2000,
            batch_size: 64,
            lambda: 1.0,
            anneal_step: 500,
            groupdro_eta: 0.01,
            andmask_tau: 1.0,
            mixup_alpha: 0.2,
            mmd_gamma: None,
            eval_interval: 500,
            checkpoint_every: 500,
        }
    }
}

impl AlgorithmConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        AlgorithmConfig { algorithm, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| Err(Error::Config { key: key.to_string(), message });
        if self.steps == 0 {
            return bad("steps", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} is not a positive finite rate", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", format!("{} must be finite and >= 0", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.andmask_tau) {
            return bad("andmask_tau", format!("{} not in [0, 1]", self.andmask_tau));
        }
        if !(self.mixup_alpha > 0.0) {
            return bad("mixup_alpha", format!("{} must be positive", self.mixup_alpha));
        }
        if !(self.groupdro_eta >= 0.0 && self.groupdro_eta.is_finite()) {
            return bad("groupdro_eta", format!("{} must be finite and >= 0", self.groupdro_eta));
        }
        if let Some(g) = self.mmd_gamma {
            if !(g > 0.0) {
                return bad("mmd_gamma", format!("{g} must be positive"));
            }
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be positive".into());
        }
        Ok(())
    }

    /// Penalty weight in effect at `step` (0-based).
    pub fn penalty_weight(&self, step: usize) -> f64 {
        if step < self.anneal_step {
            0.0
        } else {
            self.lambda
        }
    }
}
