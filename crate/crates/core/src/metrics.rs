//! Records shared by the training and probing JSONL streams.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    In,
    Out,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Acc,
    Loss,
    ProbeAcc,
    ProbeValCurve,
    ProbeControlAcc,
    /// Terminal marker: the cell finished and every record above it is final.
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub algorithm: String,
    pub dataset: String,
    pub test_env: usize,
    pub seed: u64,
    pub step: usize,
    pub split: Split,
    pub metric: Metric,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_index: Option<usize>,
}

/// Identifies one (algorithm, dataset, held-out env, seed) training cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub algorithm: String,
    pub dataset: String,
    pub test_env: usize,
    pub seed: u64,
}

impl CellKey {
    pub fn record(&self, step: usize, split: Split, metric: Metric, value: f64) -> MetricRecord {
        MetricRecord {
            algorithm: self.algorithm.clone(),
            dataset: self.dataset.clone(),
            test_env: self.test_env,
            seed: self.seed,
            step,
            split,
            metric,
            value,
            tap_index: None,
        }
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/env{}/seed{}", self.dataset, self.algorithm, self.test_env, self.seed)
    }
}
