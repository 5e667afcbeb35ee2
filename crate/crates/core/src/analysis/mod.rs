//! Statistics over training and probing results.

mod report;

pub use report::{correlation_csv, grid_csv, grid_svg, loo_csv, read_reference_csv, trend_csv};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::metrics::CellKey;
use crate::probing::ProbeResult;

/// Product-moment correlation with its two-sided p-value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

impl Correlation {
    pub fn stars(&self) -> &'static str {
        significance_stars(self.p)
    }
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Pearson r and the p-value of the t statistic with n - 2 degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::Length(format!("pearson needs equal lengths, got {} and {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Length(format!("pearson needs at least 3 pairs, got {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateStatistics("pearson input is constant".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation { r, p: pearson_p_value(r, n), n })
}

/// Two-sided p for correlation `r` over `n` pairs: I_{df/(df+t^2)}(df/2, 1/2).
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let r2 = r * r;
    if r2 >= 1.0 {
        return 0.0;
    }
    let t2 = r2 * df / (1.0 - r2);
    beta_reg(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0)
}

/// Reference mean and spread for one algorithm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterOutcome {
    pub retained: Vec<String>,
    pub removed: Vec<String>,
}

/// Drops each algorithm whose observed value is at least three reference
/// standard deviations from the reference mean.
pub fn filter_3sigma(observed: &BTreeMap<String, f64>, reference: &BTreeMap<String, Reference>) -> Result<FilterOutcome> {
    let missing: Vec<String> = observed.keys().filter(|k| !reference.contains_key(*k)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing.into_iter().map(|k| format!("reference for {k}")).collect()));
    }
    let mut out = FilterOutcome::default();
    for (name, &value) in observed {
        let r = reference[name];
        let limit = 3.0 * r.std;
        // inclusive boundary, with slack for the decimal round trip
        if (value - r.mean).abs() >= limit - 1e-12 * limit.abs().max(1.0) {
            out.removed.push(name.clone());
        } else {
            out.retained.push(name.clone());
        }
    }
    Ok(out)
}

/// One training cell with its generalization and per-tap probing accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell: CellKey,
    pub gen_acc: f64,
    pub probe_accs: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    rows: BTreeMap<CellKey, ResultRow>,
}

impl ResultsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, row: ResultRow) -> Result<()> {
        if self.rows.contains_key(&row.cell) {
            return Err(Error::Consistency(format!("duplicate result row for {}", row.cell)));
        }
        if let Some(taps) = self.tap_count(&row.cell.dataset) {
            if taps != row.probe_accs.len() {
                return Err(Error::Consistency(format!(
                    "{} has {} taps but {} rows have {taps}",
                    row.cell,
                    row.probe_accs.len(),
                    row.cell.dataset
                )));
            }
        }
        self.rows.insert(row.cell.clone(), row);
        Ok(())
    }

    /// Joins Perf(f_g) per cell with the (non-control) probe results.
    pub fn from_results(gen: &[(CellKey, f64)], probes: &[ProbeResult]) -> Result<Self> {
        let mut table = Self::new();
        for (cell, acc) in gen {
            let mut taps: Vec<&ProbeResult> = probes.iter().filter(|p| !p.control && p.cell() == *cell).collect();
            taps.sort_by_key(|p| p.tap_index);
            if taps.iter().enumerate().any(|(i, p)| p.tap_index != i) {
                return Err(Error::Consistency(format!("probe taps for {cell} are not contiguous")));
            }
            if taps.is_empty() {
                return Err(Error::Coverage(vec![format!("probe results for {cell}")]));
            }
            table.insert(ResultRow { cell: cell.clone(), gen_acc: *acc, probe_accs: taps.iter().map(|p| p.accuracy).collect() })?;
        }
        Ok(table)
    }

    pub fn rows(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.values()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn tap_count(&self, dataset: &str) -> Option<usize> {
        self.rows().find(|r| r.cell.dataset == dataset).map(|r| r.probe_accs.len())
    }

    pub fn datasets(&self) -> Vec<String> {
        self.rows().map(|r| r.cell.dataset.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn algorithms(&self, dataset: &str) -> Vec<String> {
        self.rows()
            .filter(|r| r.cell.dataset == dataset)
            .map(|r| r.cell.algorithm.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Seed-averaged (gen, per-tap probe) values per held-out env.
    fn per_env(&self, dataset: &str, algorithm: &str) -> BTreeMap<usize, (f64, Vec<f64>)> {
        let mut sums: BTreeMap<usize, (f64, Vec<f64>, usize)> = BTreeMap::new();
        for r in self.rows().filter(|r| r.cell.dataset == dataset && r.cell.algorithm == algorithm) {
            let e = sums.entry(r.cell.test_env).or_insert_with(|| (0.0, vec![0.0; r.probe_accs.len()], 0));
            e.0 += r.gen_acc;
            e.1.iter_mut().zip(&r.probe_accs).for_each(|(s, v)| *s += v);
            e.2 += 1;
        }
        sums.into_iter()
            .map(|(env, (g, p, c))| (env, (g / c as f64, p.into_iter().map(|v| v / c as f64).collect())))
            .collect()
    }

    /// Mean Perf(f_g) per algorithm, averaging seeds within env first.
    pub fn gen_means(&self, dataset: &str) -> BTreeMap<String, f64> {
        self.algorithms(dataset)
            .into_iter()
            .map(|a| {
                let envs = self.per_env(dataset, &a);
                let mean = envs.values().map(|v| v.0).sum::<f64>() / envs.len() as f64;
                (a, mean)
            })
            .collect()
    }

    /// Mean Perf(f_p) per tap for one algorithm.
    pub fn probe_means(&self, dataset: &str, algorithm: &str) -> Vec<f64> {
        let envs = self.per_env(dataset, algorithm);
        let taps = envs.values().next().map_or(0, |v| v.1.len());
        (0..taps).map(|t| envs.values().map(|v| v.1[t]).sum::<f64>() / envs.len() as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// One r per tap, across algorithms.
    Layerwise,
    /// One r per (algorithm, tap), across held-out envs.
    PerAlgorithm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    /// Algorithm name on the per-algorithm axis, "all" on the layerwise axis.
    pub key: String,
    pub tap: usize,
    /// `None` when the statistic is unavailable for this entry.
    pub value: Option<Correlation>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub axis: Axis,
    pub dataset: String,
    pub taps: usize,
    pub entries: Vec<CorrelationEntry>,
}

impl CorrelationReport {
    pub fn get(&self, key: &str, tap: usize) -> Option<&CorrelationEntry> {
        self.entries.iter().find(|e| e.key == key && e.tap == tap)
    }
}

fn entry(key: &str, tap: usize, x: &[f64], y: &[f64]) -> CorrelationEntry {
    match pearson(x, y) {
        Ok(c) => CorrelationEntry { key: key.into(), tap, value: Some(c), note: None },
        Err(e) => CorrelationEntry { key: key.into(), tap, value: None, note: Some(e.to_string()) },
    }
}

fn retained_algorithms(table: &ResultsTable, dataset: &str, keep: Option<&[String]>) -> Vec<String> {
    table.algorithms(dataset).into_iter().filter(|a| keep.is_none_or(|k| k.contains(a))).collect()
}

/// Per tap, Pearson over algorithm-level (mean Perf(f_p), mean Perf(f_g)) pairs.
/// `keep` restricts the algorithms, e.g. to those surviving `filter_3sigma`.
pub fn layerwise_correlation(table: &ResultsTable, dataset: &str, keep: Option<&[String]>) -> Result<CorrelationReport> {
    let taps = table.tap_count(dataset).ok_or_else(|| Error::Coverage(vec![format!("results for {dataset}")]))?;
    let algorithms = retained_algorithms(table, dataset, keep);
    let gen = table.gen_means(dataset);
    let y: Vec<f64> = algorithms.iter().map(|a| gen[a]).collect();
    let probes: Vec<Vec<f64>> = algorithms.iter().map(|a| table.probe_means(dataset, a)).collect();
    let entries = (0..taps)
        .map(|t| entry("all", t, &probes.iter().map(|p| p[t]).collect::<Vec<_>>(), &y))
        .collect();
    Ok(CorrelationReport { axis: Axis::Layerwise, dataset: dataset.into(), taps, entries })
}

/// Per algorithm and tap, Pearson across held-out envs of (Perf(f_p), Perf(f_g)).
pub fn per_algorithm_correlation(table: &ResultsTable, dataset: &str, keep: Option<&[String]>) -> Result<CorrelationReport> {
    let taps = table.tap_count(dataset).ok_or_else(|| Error::Coverage(vec![format!("results for {dataset}")]))?;
    let mut entries = Vec::new();
    for a in retained_algorithms(table, dataset, keep) {
        let envs = table.per_env(dataset, &a);
        let y: Vec<f64> = envs.values().map(|v| v.0).collect();
        for t in 0..taps {
            entries.push(entry(&a, t, &envs.values().map(|v| v.1[t]).collect::<Vec<_>>(), &y));
        }
    }
    Ok(CorrelationReport { axis: Axis::PerAlgorithm, dataset: dataset.into(), taps, entries })
}

/// Mean and population std of Perf(f_g) over held-out envs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooSummary {
    pub algorithm: String,
    pub dataset: String,
    pub mean: f64,
    pub std: f64,
    pub envs: usize,
}

impl fmt::Display for LooSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Coverage(vec!["values for mean and std".into()]));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// One summary per (dataset, algorithm); seeds are averaged within env first.
pub fn aggregate_loo(table: &ResultsTable) -> Result<Vec<LooSummary>> {
    if table.is_empty() {
        return Err(Error::Coverage(vec!["results table is empty".into()]));
    }
    let mut out = Vec::new();
    for dataset in table.datasets() {
        for algorithm in table.algorithms(&dataset) {
            let per_env: Vec<f64> = table.per_env(&dataset, &algorithm).values().map(|v| v.0).collect();
            let (mean, std) = mean_std(&per_env)?;
            out.push(LooSummary { algorithm, dataset: dataset.clone(), mean, std, envs: per_env.len() });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Decreasing,
    MiddlePeak,
    Other,
}

impl fmt::Display for Trend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trend::Decreasing => "decreasing",
            Trend::MiddlePeak => "middle_peak",
            Trend::Other => "other",
        })
    }
}

/// Shape of a per-tap accuracy profile. Fewer than 3 taps is always `Other`.
pub fn trend_classify(values: &[f64]) -> Trend {
    if values.len() < 3 {
        return Trend::Other;
    }
    let (first, last) = (values[0], values[values.len() - 1]);
    if values.windows(2).all(|w| w[1] <= w[0] + 0.01) && last <= first - 0.05 {
        return Trend::Decreasing;
    }
    let peak = (0..values.len()).fold(0, |best, i| if values[i] > values[best] { i } else { best });
    if peak > 0 && peak < values.len() - 1 && values[peak] >= first + 0.05 && values[peak] >= last + 0.05 {
        return Trend::MiddlePeak;
    }
    Trend::Other
}

/// Least-squares slope of the values against their tap index.
pub fn trend_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = values.iter().sum::<f64>() / n;
    let (num, den) = values.iter().enumerate().fold((0.0, 0.0), |(a, b), (i, v)| {
        let dx = i as f64 - mx;
        (a + dx * (v - my), b + dx * dx)
    });
    num / den
}
