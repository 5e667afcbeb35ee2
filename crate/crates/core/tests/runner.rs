use std::path::{Path, PathBuf};
use std::process::Command;

use oodprobe::featurizers::Checkpoint;
use oodprobe::metrics::{CellKey, Metric, Split};
use oodprobe::nn::Tensor;
use oodprobe::runner::*;
use oodprobe::Error;
use tempfile::TempDir;

const TINY: &str = r#"
out_dir = "runs"
workers = 2

[dataset]
glyphs_per_class = 20
per_env_n = 120

[featurizer]
channels = [2, 4, 4, 4]

[train]
algorithms = ["ERM", "VREx"]
test_envs = [0, 1, 2]
seeds = [0]
steps = 20
batch_size = 4
anneal_step = 5
eval_interval = 10
checkpoint_every = 10

[probe]
budget = 100
eval_interval = 50
"#;

fn setup(toml: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, toml).unwrap();
    (dir, path)
}

fn experiment(path: &Path) -> Experiment {
    Experiment::load(path, &Overrides::default()).unwrap()
}

fn config_key(err: Error) -> (String, String) {
    match err {
        Error::Config { key, message } => (key, message),
        other => panic!("expected a config error, got {other:?}"),
    }
}

fn count(records: &[oodprobe::metrics::MetricRecord], metric: Metric) -> usize {
    records.iter().filter(|r| r.metric == metric).count()
}

#[test]
fn config_errors_name_the_key() {
    let (key, _) = config_key(ExperimentConfig::from_toml("[train]\nsteps = \"many\"\n").unwrap_err());
    assert_eq!(key, "train.steps");
    let (key, _) = config_key(ExperimentConfig::from_toml("[probe]\nbudgt = 5\n").unwrap_err());
    assert!(key.starts_with("probe"), "{key}");
    let (key, _) = config_key(ExperimentConfig::from_toml("[dataset]\nsplit_fraction = 1.5\n").unwrap_err());
    assert_eq!(key, "dataset.split_fraction");
    let (key, _) = config_key(ExperimentConfig::from_toml("[train]\ntest_envs = [9]\n").unwrap_err());
    assert_eq!(key, "train.test_envs");
    assert_eq!(Error::Config { key, message: String::new() }.exit_code(), 2);
}

#[test]
fn unknown_algorithm_lists_the_valid_set() {
    let (key, message) = config_key(ExperimentConfig::from_toml("[train]\nalgorithms = [\"ERM\", \"Fishr\"]\n").unwrap_err());
    assert_eq!(key, "train.algorithms[1]");
    for name in ["ERM", "IRM", "VREx", "GroupDRO", "CORAL", "MMD", "Mixup", "ANDMask"] {
        assert!(message.contains(name), "{message}");
    }
    let mut config = ExperimentConfig::default();
    let o = Overrides { algorithm: Some("nope".into()), ..Default::default() };
    let (key, message) = config_key(config.apply(&o).unwrap_err());
    assert_eq!(key, "train.algorithms");
    assert!(message.contains("GroupDRO"));
}

#[test]
fn layout_is_a_pure_function_of_the_cell() {
    let layout = Layout::new("/r");
    let cell = CellKey { algorithm: "IRM".into(), dataset: "rotated_digits".into(), test_env: 3, seed: 7 };
    assert_eq!(
        layout.checkpoint(&cell, 2000),
        PathBuf::from("/r/checkpoints/rotated_digits/IRM/env3/seed7/step0002000.ckpt")
    );
    assert_eq!(layout.train_log(), PathBuf::from("/r/metrics/train.jsonl"));
}

#[test]
fn jsonl_drops_only_a_torn_tail() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.jsonl");
    let cell = CellKey { algorithm: "ERM".into(), dataset: "d".into(), test_env: 0, seed: 0 };
    append_jsonl(&path, &[cell.record(1, Split::In, Metric::Acc, 0.5), cell.record(2, Split::In, Metric::Acc, 0.6)]).unwrap();
    assert_eq!(read_jsonl(&path).unwrap().len(), 2);
    std::fs::write(&path, std::fs::read_to_string(&path).unwrap() + "{\"algori").unwrap();
    assert_eq!(read_jsonl(&path).unwrap().len(), 2);
    std::fs::write(&path, "garbage\n{}\n").unwrap();
    assert!(matches!(read_jsonl(&path), Err(Error::Format(_))));
    assert!(read_jsonl(&dir.path().join("absent.jsonl")).unwrap().is_empty());
}

#[test]
fn pool_visits_every_item_once() {
    let mut seen = Vec::new();
    run_pool((0..50).collect(), 4, |i: u32| i * 2, |r| seen.push(r));
    seen.sort();
    assert_eq!(seen, (0..50).map(|i| i * 2).collect::<Vec<_>>());
}

#[test]
fn train_probe_report_cycle_is_resumable() {
    let (_dir, path) = setup(TINY);
    let exp = experiment(&path);
    assert_eq!(exp.cells().len(), 6);

    let first = cmd_train(&exp).unwrap();
    assert_eq!((first.trained.len(), first.skipped.len()), (6, 0));
    assert!(first.failed.is_empty());
    for cell in exp.cells() {
        assert!(exp.final_checkpoint(&cell).exists());
    }
    let log = read_jsonl(&exp.layout.train_log()).unwrap();
    assert_eq!(count(&log, Metric::Complete), 6);

    let again = cmd_train(&exp).unwrap();
    assert_eq!((again.trained.len(), again.skipped.len()), (0, 6));
    assert_eq!(read_jsonl(&exp.layout.train_log()).unwrap().len(), log.len());

    // a lost checkpoint is retrained, nothing else
    let lost = exp.cells()[4].clone();
    std::fs::remove_file(exp.final_checkpoint(&lost)).unwrap();
    let third = cmd_train(&exp).unwrap();
    assert_eq!(third.trained, vec![lost]);

    let probed = cmd_probe(&exp).unwrap();
    assert_eq!(probed.probed.len(), 30);
    let records = read_jsonl(&exp.layout.probe_log()).unwrap();
    for cell in exp.cells() {
        let taps: Vec<usize> = records
            .iter()
            .filter(|r| r.metric == Metric::ProbeAcc && r.algorithm == cell.algorithm && r.test_env == cell.test_env)
            .map(|r| r.tap_index.unwrap())
            .collect();
        assert_eq!(taps.len(), 5, "{cell}");
    }
    let rerun = cmd_probe(&exp).unwrap();
    assert!(rerun.probed.is_empty());
    assert_eq!(rerun.skipped.len(), 30);
    assert_eq!(read_jsonl(&exp.layout.probe_log()).unwrap().len(), records.len());

    let report = cmd_report(&exp).unwrap();
    let snapshot: Vec<(PathBuf, Vec<u8>)> = report.files.iter().map(|f| (f.clone(), std::fs::read(f).unwrap())).collect();
    assert!(snapshot.iter().any(|(f, _)| f.ends_with("rotated_digits_layerwise.csv")));
    assert!(snapshot.iter().any(|(f, _)| f.ends_with("rotated_digits_grid.svg")));
    let again = cmd_report(&exp).unwrap();
    assert_eq!(again.files, report.files);
    for (f, bytes) in &snapshot {
        assert_eq!(&std::fs::read(f).unwrap(), bytes, "{}", f.display());
    }
    assert_eq!(report.grid.len(), 10);
}

#[test]
fn probe_requires_every_checkpoint() {
    let (_dir, path) = setup(TINY);
    let mut config = ExperimentConfig::load(&path).unwrap();
    config.train.algorithms.truncate(1);
    config.train.test_envs = vec![0];
    let exp = Experiment::new(config, path.parent().unwrap()).unwrap();
    let err = cmd_probe(&exp).unwrap_err();
    assert!(matches!(&err, Error::Coverage(m) if m.len() == 1 && m[0].contains("ERM/env0")));
    assert_eq!(err.exit_code(), 3);
    assert!(matches!(cmd_report(&exp), Err(Error::Coverage(_))));
}

#[test]
fn tampered_checkpoint_is_an_integrity_error() {
    let (_dir, path) = setup(TINY);
    let mut config = ExperimentConfig::load(&path).unwrap();
    config.train.algorithms.truncate(1);
    config.train.test_envs = vec![0, 1];
    config.workers = 1;
    let exp = Experiment::new(config, path.parent().unwrap()).unwrap();
    cmd_train(&exp).unwrap();
    let cells = exp.cells();
    // swap in a different, perfectly valid featurizer
    std::fs::copy(exp.final_checkpoint(&cells[0]), exp.final_checkpoint(&cells[1])).unwrap();
    let err = cmd_probe(&exp).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err:?}");
    assert_eq!(err.exit_code(), 3);
    let records = read_jsonl(&exp.layout.probe_log()).unwrap();
    assert!(records.iter().all(|r| r.test_env != cells[1].test_env));
}

#[test]
fn report_recovers_a_planted_linear_relation() {
    let (_dir, path) = setup(TINY);
    let mut config = ExperimentConfig::load(&path).unwrap();
    config.train.algorithms.truncate(1);
    config.train.test_envs.clear();
    config.train.seeds = vec![0, 1];
    let exp = Experiment::new(config, path.parent().unwrap()).unwrap();
    let cells = exp.cells();
    assert_eq!(cells.len(), 12);
    let mut train = Vec::new();
    let mut probe = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let x = 0.3 + 0.05 * (i / 2) as f64;
        train.push(cell.record(20, Split::Test, Metric::Complete, 0.2 + 2.0 * x));
        for tap in 0..5 {
            let mut r = cell.record(20, Split::Out, Metric::ProbeAcc, if tap == 0 { x } else { 0.5 + 0.01 * ((i * 7 + tap) % 5) as f64 });
            r.tap_index = Some(tap);
            probe.push(r);
        }
    }
    append_jsonl(&exp.layout.train_log(), &train).unwrap();
    append_jsonl(&exp.layout.probe_log(), &probe).unwrap();
    cmd_report(&exp).unwrap();
    let csv = std::fs::read_to_string(exp.layout.reports().join("rotated_digits_per_algorithm.csv")).unwrap();
    let tap0 = csv.lines().find(|l| l.starts_with("rotated_digits,ERM,0,")).unwrap();
    assert!(tap0.starts_with("rotated_digits,ERM,0,1.0000,0.0000,6,***"), "{tap0}");
    let tap5 = csv.lines().find(|l| l.starts_with("rotated_digits,ERM,5,")).unwrap();
    assert_eq!(tap5, "rotated_digits,ERM,5,N/A,N/A,N/A,");
    // one algorithm is a single point across algorithms
    let layer = std::fs::read_to_string(exp.layout.reports().join("rotated_digits_layerwise.csv")).unwrap();
    assert!(layer.lines().skip(1).all(|l| l.ends_with("N/A,N/A,N/A,")), "{layer}");
    let loo = std::fs::read_to_string(exp.layout.reports().join("loo.csv")).unwrap();
    assert!(loo.contains("rotated_digits,ERM,"));
}

#[test]
fn report_filters_against_a_reference() {
    let (_dir, path) = setup(&format!("{TINY}\n[report]\nreference = \"ref.csv\"\n"));
    std::fs::write(path.parent().unwrap().join("ref.csv"), "algorithm,mean,std\nERM,0.5,0.01\nVREx,0.9,0.01\n").unwrap();
    let exp = experiment(&path);
    let mut train = Vec::new();
    let mut probe = Vec::new();
    for cell in exp.cells() {
        train.push(cell.record(20, Split::Test, Metric::Complete, 0.5));
        for tap in 0..5 {
            let mut r = cell.record(20, Split::Out, Metric::ProbeAcc, 0.4);
            r.tap_index = Some(tap);
            probe.push(r);
        }
    }
    append_jsonl(&exp.layout.train_log(), &train).unwrap();
    append_jsonl(&exp.layout.probe_log(), &probe).unwrap();
    cmd_report(&exp).unwrap();
    let filter = std::fs::read_to_string(exp.layout.reports().join("rotated_digits_filter.csv")).unwrap();
    assert!(filter.contains("ERM,0.5000,0.5000,0.0100,retained"), "{filter}");
    assert!(filter.contains("VREx,0.5000,0.9000,0.0100,removed"), "{filter}");
}

fn pgm_pixels(path: &Path) -> Vec<u8> {
    let bytes = std::fs::read(path).unwrap();
    let header = b"P5\n";
    assert!(bytes.starts_with(header));
    let mut newlines = 0;
    let start = bytes.iter().position(|&b| {
        newlines += (b == b'\n') as usize;
        newlines == 3
    });
    bytes[start.unwrap() + 1..].to_vec()
}

#[test]
fn dumps_one_image_per_spatial_tap_and_input() {
    let (_dir, path) = setup(TINY);
    let mut config = ExperimentConfig::load(&path).unwrap();
    config.train.algorithms.truncate(1);
    config.train.test_envs = vec![2];
    let exp = Experiment::new(config, path.parent().unwrap()).unwrap();
    cmd_train(&exp).unwrap();
    let files = cmd_dump(&exp, 3, 11).unwrap();
    assert_eq!(files.len(), 12);
    for f in &files {
        assert_eq!(pgm_pixels(f).len(), pixels_for(f));
    }
    let bytes: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    let again = cmd_dump(&exp, 3, 11).unwrap();
    assert_eq!(again, files);
    assert_eq!(again.iter().map(|f| std::fs::read(f).unwrap()).collect::<Vec<_>>(), bytes);

    let ckpt = Checkpoint::load(exp.final_checkpoint(&exp.cells()[0])).unwrap();
    let out = TempDir::new().unwrap();
    let blank = Tensor::<f32>::zeros([2, 1, 28, 28]);
    let files = dump_representations(&ckpt, &blank, out.path(), 0).unwrap();
    assert_eq!(files.len(), 8);
    // tap 0 is a convolution of a constant image with padding, so check the
    // strictly constant case through the writer directly
    let flat = out.path().join("flat.pgm");
    write_pgm(&flat, &[0.25; 12], 3, 4).unwrap();
    assert_eq!(std::fs::read(&flat).unwrap(), [b"P5\n4 3\n255\n".as_slice(), &[128u8; 12]].concat());
}

fn pixels_for(path: &Path) -> usize {
    let text = std::fs::read(path).unwrap();
    let header = String::from_utf8_lossy(&text[..16.min(text.len())]).to_string();
    let dims: Vec<usize> = header.lines().nth(1).unwrap().split(' ').map(|v| v.parse().unwrap()).collect();
    dims[0] * dims[1]
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_oodprobe");
    let (dir, path) = setup("[train]\nsteps = -3\n");
    let status = Command::new(bin).args(["train", "--config"]).arg(&path).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let (_d2, path) = setup(TINY);
    let status = Command::new(bin).args(["probe", "--config"]).arg(&path).args(["--test-env", "0"]).status().unwrap();
    assert_eq!(status.code(), Some(3));

    let diverging = TINY.replace("steps = 20", "steps = 20\nlr = 1e12");
    let (_d3, path) = setup(&diverging);
    let status = Command::new(bin)
        .args(["train", "--config"])
        .arg(&path)
        .args(["--algorithm", "ERM", "--test-env", "0", "--seed", "3"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(4));

    let out = Command::new(bin).args(["gradcheck", "--cases", "3"]).output().unwrap();
    assert!(out.status.success());
    drop(dir);
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, envs, channels) in [("desk_rotated.toml", 6, 1), ("desk_colored.toml", 3, 2)] {
        let config = ExperimentConfig::load(dir.join(name)).unwrap();
        assert_eq!(config.dataset.num_envs(), envs);
        assert_eq!(config.dataset.input_channels(), channels);
        assert_eq!(config.train.algorithms.len(), 8);
        assert_eq!(config.featurizer_spec().unwrap().tap_points().unwrap().len(), 5);
    }
}
