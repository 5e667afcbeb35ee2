//! Experiment orchestration: train, probe, report, dump and gradcheck.

mod config;
mod dump;
mod jsonl;
mod pool;

pub use config::{
    DatasetConfig, DatasetKind, ExperimentConfig, FeaturizerConfig, ImageSource, ProbeBlock, ReportBlock, TrainConfig,
};
pub use dump::{dump_representations, write_pgm};
pub use jsonl::{append_jsonl, read_jsonl};
pub use pool::{default_workers, run_pool};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::algorithms::{train_algorithm, Algorithm};
use crate::analysis::{
    aggregate_loo, correlation_csv, filter_3sigma, grid_csv, grid_svg, layerwise_correlation, loo_csv,
    per_algorithm_correlation, read_reference_csv, trend_classify, trend_csv, trend_slope, ResultRow, ResultsTable,
};
use crate::data::EnvironmentDataset;
use crate::error::{Error, Result};
use crate::featurizers::Checkpoint;
use crate::metrics::{CellKey, Metric, MetricRecord, Split};
use crate::nn::grad_check_suite;
use crate::probing::{attach_probes, dummy_accuracy, log_class_size, recommend_probe_samples, train_probe, GridCell, ProbeResult};

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub algorithm: Option<String>,
    pub test_env: Option<usize>,
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.train.seeds = vec![s];
        }
        if let Some(a) = &o.algorithm {
            let a: Algorithm = a.parse().map_err(|e: Error| Error::Config { key: "train.algorithms".into(), message: e.to_string() })?;
            self.train.algorithms = vec![a];
        }
        if let Some(e) = o.test_env {
            self.train.test_envs = vec![e];
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        self.validate()
    }

    fn worker_count(&self) -> usize {
        if self.workers == 0 {
            default_workers()
        } else {
            self.workers
        }
    }
}

/// On-disk locations, a pure function of the cell and step.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn cell_dir(&self, cell: &CellKey) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(&cell.dataset)
            .join(&cell.algorithm)
            .join(format!("env{}", cell.test_env))
            .join(format!("seed{}", cell.seed))
    }

    pub fn checkpoint(&self, cell: &CellKey, step: usize) -> PathBuf {
        self.cell_dir(cell).join(format!("step{step:07}.ckpt"))
    }

    /// Featurizer checksum recorded when the checkpoint was written.
    pub fn checksum(&self, cell: &CellKey, step: usize) -> PathBuf {
        self.cell_dir(cell).join(format!("step{step:07}.sha256"))
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("metrics").join("train.jsonl")
    }

    pub fn probe_log(&self) -> PathBuf {
        self.root.join("metrics").join("probe.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn dumps(&self, cell: &CellKey) -> PathBuf {
        self.root
            .join("dumps")
            .join(&cell.dataset)
            .join(&cell.algorithm)
            .join(format!("env{}", cell.test_env))
            .join(format!("seed{}", cell.seed))
    }
}

/// The loaded experiment: config, built dataset and output layout.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dataset: EnvironmentDataset,
    pub layout: Layout,
}

impl Experiment {
    /// `root` resolves relative IDX paths.
    pub fn new(config: ExperimentConfig, root: &Path) -> Result<Self> {
        config.validate()?;
        let dataset = config.dataset.build(root)?;
        let layout = Layout::new(&config.out_dir);
        Ok(Experiment { config, dataset, layout })
    }

    /// Loads a config file and applies the overrides.
    pub fn load(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Self> {
        let path = path.as_ref();
        let mut config = ExperimentConfig::load(path)?;
        config.apply(overrides)?;
        Self::new(config, path.parent().unwrap_or(Path::new(".")))
    }

    /// Algorithms x held-out envs x seeds, in that nesting order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for a in &self.config.train.algorithms {
            for &e in &self.config.test_envs() {
                for &s in &self.config.train.seeds {
                    out.push(CellKey { algorithm: a.name().into(), dataset: self.dataset.name.clone(), test_env: e, seed: s });
                }
            }
        }
        out
    }

    pub fn final_checkpoint(&self, cell: &CellKey) -> PathBuf {
        self.layout.checkpoint(cell, self.config.train.steps)
    }

    fn completed_training(&self) -> Result<BTreeMap<CellKey, f64>> {
        Ok(read_jsonl(&self.layout.train_log())?
            .into_iter()
            .filter(|r| r.metric == Metric::Complete)
            .map(|r| (record_cell(&r), r.value))
            .collect())
    }
}

fn record_cell(r: &MetricRecord) -> CellKey {
    CellKey { algorithm: r.algorithm.clone(), dataset: r.dataset.clone(), test_env: r.test_env, seed: r.seed }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub trained: Vec<CellKey>,
    pub skipped: Vec<CellKey>,
    pub failed: Vec<(CellKey, String)>,
}

/// Trains every configured cell that has not completed yet.
pub fn cmd_train(exp: &Experiment) -> Result<TrainSummary> {
    let spec = exp.config.featurizer_spec()?;
    let done = exp.completed_training()?;
    let mut summary = TrainSummary::default();
    let mut todo = Vec::new();
    for cell in exp.cells() {
        if done.contains_key(&cell) && exp.final_checkpoint(&cell).exists() {
            summary.skipped.push(cell);
        } else {
            todo.push(cell);
        }
    }
    let work = |cell: CellKey| -> (CellKey, Result<Vec<MetricRecord>>) {
        let run = || -> Result<Vec<MetricRecord>> {
            let algorithm: Algorithm = cell.algorithm.parse()?;
            let config = exp.config.train.algorithm_config(algorithm);
            let run = train_algorithm(&config, &spec, &exp.dataset, cell.test_env, cell.seed)?;
            for ckpt in &run.checkpoints {
                let step = ckpt.meta.step;
                ckpt.save(exp.layout.checkpoint(&cell, step))?;
                write_atomic(&exp.layout.checksum(&cell, step), ckpt.featurizer_checksum().as_bytes())?;
            }
            let mut records = run.metrics;
            records.push(cell.record(config.steps, Split::Test, Metric::Complete, run.test_accuracy));
            Ok(records)
        };
        let out = run();
        (cell, out)
    };
    let log = exp.layout.train_log();
    let mut sink_error = None;
    run_pool(todo, exp.config.worker_count(), work, |(cell, result)| match result {
        Ok(records) => match append_jsonl(&log, &records) {
            Ok(()) => summary.trained.push(cell),
            Err(e) => sink_error = Some(e),
        },
        Err(e) => summary.failed.push((cell, e.to_string())),
    });
    if let Some(e) = sink_error {
        return Err(e);
    }
    summary.trained.sort();
    summary.failed.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(summary)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeSummary {
    pub probed: Vec<(CellKey, usize)>,
    pub skipped: Vec<(CellKey, usize)>,
}

fn verify_checksum(exp: &Experiment, cell: &CellKey, ckpt: &Checkpoint, when: &str) -> Result<()> {
    let path = exp.layout.checksum(cell, exp.config.train.steps);
    let expected = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let actual = ckpt.featurizer_checksum();
    if expected.trim() != actual {
        return Err(Error::Integrity(format!("featurizer checksum of {cell} changed {when} probing")));
    }
    Ok(())
}

/// Probes every tap of every configured cell's final checkpoint.
pub fn cmd_probe(exp: &Experiment) -> Result<ProbeSummary> {
    let cells = exp.cells();
    let missing: Vec<String> = cells.iter().filter(|c| !exp.final_checkpoint(c).exists()).map(|c| c.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    let control = exp.config.probe.control;
    let mut done: BTreeSet<(CellKey, usize, bool)> = BTreeSet::new();
    for r in read_jsonl(&exp.layout.probe_log())? {
        if let (Some(t), Metric::ProbeAcc | Metric::ProbeControlAcc) = (r.tap_index, r.metric) {
            done.insert((record_cell(&r), t, r.metric == Metric::ProbeControlAcc));
        }
    }
    let mut summary = ProbeSummary::default();
    let mut todo = Vec::new();
    for cell in cells {
        let ckpt = Checkpoint::load(exp.final_checkpoint(&cell))?;
        let taps = ckpt.network.taps().len();
        let mut jobs = Vec::new();
        for tap in 0..taps {
            for ctl in [false, true].into_iter().filter(|&c| !c || control) {
                if done.contains(&(cell.clone(), tap, ctl)) {
                    if !ctl {
                        summary.skipped.push((cell.clone(), tap));
                    }
                } else {
                    jobs.push((tap, ctl));
                }
            }
        }
        if !jobs.is_empty() {
            todo.push((cell, jobs));
        }
    }
    let m = exp.dataset.num_envs() - 1;
    let work = |(cell, jobs): (CellKey, Vec<(usize, bool)>)| -> (CellKey, Result<Vec<ProbeResult>>) {
        let run = || -> Result<Vec<ProbeResult>> {
            let path = exp.final_checkpoint(&cell);
            let ckpt = Checkpoint::load(&path)?;
            verify_checksum(exp, &cell, &ckpt, "before")?;
            let probes = attach_probes(&ckpt, m)?;
            let mut out = Vec::new();
            for (tap, ctl) in jobs {
                let mut probe = probes[tap].clone();
                let cfg = exp.config.probe.probe_config(ctl);
                out.push(train_probe(&mut probe, &ckpt, &exp.dataset, cell.test_env, &cfg, cell.seed)?);
            }
            verify_checksum(exp, &cell, &ckpt, "during")?;
            verify_checksum(exp, &cell, &Checkpoint::load(&path)?, "on disk during")?;
            Ok(out)
        };
        let out = run();
        (cell, out)
    };
    let log = exp.layout.probe_log();
    let mut first_error = None;
    run_pool(todo, exp.config.worker_count(), work, |(cell, result)| match result {
        Ok(results) => {
            let records: Vec<MetricRecord> = results.iter().flat_map(|r| r.records()).collect();
            match append_jsonl(&log, &records) {
                Ok(()) => summary.probed.extend(results.iter().filter(|r| !r.control).map(|r| (cell.clone(), r.tap_index))),
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        Err(e) => {
            first_error.get_or_insert(e);
        }
    });
    if let Some(e) = first_error {
        return Err(e);
    }
    summary.probed.sort();
    Ok(summary)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub table: ResultsTable,
    pub grid: Vec<GridCell>,
}

/// Last-written probe accuracy per (cell, tap).
fn probe_accuracies(records: &[MetricRecord], metric: Metric) -> BTreeMap<(CellKey, usize), f64> {
    records
        .iter()
        .filter(|r| r.metric == metric)
        .filter_map(|r| r.tap_index.map(|t| ((record_cell(r), t), r.value)))
        .collect()
}

fn grid_from(table: &ResultsTable, dataset: &str, values: impl Fn(&str) -> Vec<f64>) -> Vec<GridCell> {
    let mut grid = Vec::new();
    for a in table.algorithms(dataset) {
        let count = table.rows().filter(|r| r.cell.dataset == dataset && r.cell.algorithm == a).count();
        for (t, v) in values(&a).into_iter().enumerate() {
            grid.push(GridCell { algorithm: a.clone(), tap_index: t, accuracy: v, count });
        }
    }
    grid
}

/// Writes every report for the configured cells.
pub fn cmd_report(exp: &Experiment) -> Result<ReportSummary> {
    let cells = exp.cells();
    let gen = exp.completed_training()?;
    let probe_records = read_jsonl(&exp.layout.probe_log())?;
    let probe = probe_accuracies(&probe_records, Metric::ProbeAcc);
    let control = probe_accuracies(&probe_records, Metric::ProbeControlAcc);

    let mut missing = Vec::new();
    let mut table = ResultsTable::new();
    for cell in &cells {
        let Some(&g) = gen.get(cell) else {
            missing.push(format!("training results for {cell}"));
            continue;
        };
        let accs: Vec<f64> = (0..).map_while(|t| probe.get(&(cell.clone(), t)).copied()).collect();
        if accs.is_empty() {
            missing.push(format!("probe results for {cell}"));
            continue;
        }
        table.insert(ResultRow { cell: cell.clone(), gen_acc: g, probe_accs: accs })?;
    }
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }

    let dir = exp.layout.reports();
    let mut files = Vec::new();
    let mut emit = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        files.push(path);
        Ok(())
    };
    emit("loo.csv".into(), loo_csv(&aggregate_loo(&table)?)?)?;

    let ds = exp.dataset.name.clone();
    let m = exp.dataset.num_envs() - 1;
    let dummy = dummy_accuracy(m)?;
    let grid = grid_from(&table, &ds, |a| table.probe_means(&ds, a));
    emit(format!("{ds}_grid.csv"), grid_csv(&grid)?)?;
    emit(format!("{ds}_grid.svg"), grid_svg(&grid, dummy))?;

    if !control.is_empty() {
        let mut ctl_grid = Vec::new();
        for a in table.algorithms(&ds) {
            let rows: Vec<&CellKey> = cells.iter().filter(|c| c.algorithm == a).collect();
            let taps = table.tap_count(&ds).unwrap_or(0);
            for t in 0..taps {
                let vals: Vec<f64> = rows.iter().filter_map(|c| control.get(&((*c).clone(), t)).copied()).collect();
                if !vals.is_empty() {
                    ctl_grid.push(GridCell {
                        algorithm: a.clone(),
                        tap_index: t,
                        accuracy: vals.iter().sum::<f64>() / vals.len() as f64,
                        count: vals.len(),
                    });
                }
            }
        }
        emit(format!("{ds}_control_grid.csv"), grid_csv(&ctl_grid)?)?;
    }

    let keep = match &exp.config.report.reference {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let reference = read_reference_csv(&text)?;
            let observed = table.gen_means(&ds);
            let outcome = filter_3sigma(&observed, &reference)?;
            let mut body = String::from("algorithm,observed,reference_mean,reference_std,decision\n");
            for (a, v) in &observed {
                let r = reference[a];
                let decision = if outcome.removed.contains(a) { "removed" } else { "retained" };
                body.push_str(&format!("{a},{v:.4},{:.4},{:.4},{decision}\n", r.mean, r.std));
            }
            emit(format!("{ds}_filter.csv"), body)?;
            Some(outcome.retained)
        }
        None => None,
    };
    let columns = table.tap_count(&ds).unwrap_or(0).max(6);
    emit(format!("{ds}_layerwise.csv"), correlation_csv(&layerwise_correlation(&table, &ds, keep.as_deref())?, columns)?)?;
    emit(
        format!("{ds}_per_algorithm.csv"),
        correlation_csv(&per_algorithm_correlation(&table, &ds, keep.as_deref())?, columns)?,
    )?;
    let trends: Vec<(String, _, f64)> = table
        .algorithms(&ds)
        .into_iter()
        .map(|a| {
            let v = table.probe_means(&ds, &a);
            (a, trend_classify(&v), trend_slope(&v))
        })
        .collect();
    emit(format!("{ds}_trends.csv"), trend_csv(&trends)?)?;

    // sample-size recommendation per tap, next to what each probe actually saw
    let mut body = String::from("tap,parameters,log_class_size,recommended_samples,mean_samples_used\n");
    for tap in exp.config.featurizer_spec()?.tap_points()? {
        let params = tap.width() * m + m;
        let lcs = log_class_size(params);
        let n = recommend_probe_samples(exp.config.probe.epsilon, exp.config.probe.delta, lcs)?;
        let used: Vec<f64> = probe_records
            .iter()
            .filter(|r| r.metric == Metric::ProbeValCurve && r.tap_index == Some(tap.index))
            .fold(BTreeMap::<CellKey, usize>::new(), |mut acc, r| {
                let e = acc.entry(record_cell(r)).or_default();
                *e = (*e).max(r.step);
                acc
            })
            .values()
            .map(|&s| (s * exp.config.probe.batch_size) as f64)
            .collect();
        let mean_used = if used.is_empty() { 0.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
        body.push_str(&format!("{},{params},{lcs:.4},{n},{mean_used:.1}\n", tap.index));
    }
    emit(format!("{ds}_sample_bounds.csv"), body)?;

    let mut curves = String::from("algorithm,test_env,seed,tap,step,val_acc\n");
    let mut rows: Vec<&MetricRecord> = probe_records
        .iter()
        .filter(|r| r.metric == Metric::ProbeValCurve && cells.contains(&record_cell(r)))
        .collect();
    rows.sort_by_key(|a| (record_cell(a), a.tap_index, a.step));
    rows.dedup_by(|a, b| record_cell(a) == record_cell(b) && a.tap_index == b.tap_index && a.step == b.step);
    for r in rows {
        curves.push_str(&format!(
            "{},{},{},{},{},{:.4}\n",
            r.algorithm,
            r.test_env,
            r.seed,
            r.tap_index.unwrap_or(0),
            r.step,
            r.value
        ));
    }
    emit(format!("{ds}_probe_curves.csv"), curves)?;
    Ok(ReportSummary { files, table, grid })
}

/// Writes channel-sampled tap images for the first `count` held-out images
/// of the first configured cell.
pub fn cmd_dump(exp: &Experiment, count: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let cell = exp.cells().into_iter().next().ok_or_else(|| Error::Coverage(vec!["a configured cell".into()]))?;
    let path = exp.final_checkpoint(&cell);
    if !path.exists() {
        return Err(Error::Coverage(vec![cell.to_string()]));
    }
    let ckpt = Checkpoint::load(&path)?;
    let held_out = exp.dataset.split(cell.test_env)?.out_split;
    let n = count.min(held_out.len());
    dump_representations(&ckpt, &held_out.images.slice_rows(0, n)?, &exp.layout.dumps(&cell), seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSummary {
    pub cases: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

/// Finite-difference check of `count` random small networks at 64-bit.
pub fn cmd_gradcheck(count: usize, seed: u64) -> Result<GradCheckSummary> {
    let results = grad_check_suite(count, seed)?;
    let (max_rel_error, worst_seed) = results
        .iter()
        .map(|(c, r)| (r.max_rel_error, c.seed))
        .fold((0.0, seed), |best, x| if x.0 > best.0 { x } else { best });
    Ok(GradCheckSummary { cases: results.len(), max_rel_error, worst_seed })
}
