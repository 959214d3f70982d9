use minn::harness::{
    apply_point, blob_hash, evaluate_checkpoint, grid_points, run_experiment, sweep, DatasetSource, ExperimentConfig, ExperimentKind,
    Row, MANIFEST_FILE,
};
use minn::minn::{EncoderConfig, Link, PowerMode};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn mnist_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist5k"))
}

fn tiny(kind: ExperimentKind, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig { kind, seed: 3, output: out.to_path_buf(), ..ExperimentConfig::default() };
    c.dataset.path = Some(mnist_dir());
    c.dataset.train_samples = Some(300);
    c.dataset.test_samples = Some(100);
    c.model.encoder = EncoderConfig { conv_channels: vec![], hidden: vec![32], ..EncoderConfig::default() };
    c.model.decoder_hidden = vec![32];
    c.sim.rows = 4;
    c.sim.cols = 4;
    c.sim.layers = 2;
    c.train.epochs = 2;
    c
}

#[test]
fn config_round_trips_through_toml() {
    let c = tiny(ExperimentKind::PowerControl, Path::new("out"));
    let text = c.to_toml().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
    let parsed = ExperimentConfig::from_toml_str("kind = \"elm_benchmark\"\n[elm]\nn_hidden = 12\n").unwrap();
    assert_eq!((parsed.kind, parsed.elm.n_hidden), (ExperimentKind::ElmBenchmark, 12));
    assert!(matches!(ExperimentConfig::from_toml_str("[train]\nepoch = 3\n"), Err(minn::Error::Config(_))));
    assert!(matches!(ExperimentConfig::from_toml_str("kind = \"bogus\"\n"), Err(minn::Error::Config(_))));
}

#[test]
fn resolution_follows_the_kind() {
    let c = ExperimentConfig { seed: 9, ..ExperimentConfig::default() };
    let r = ExperimentConfig { kind: ExperimentKind::NoSimBaseline, ..c.clone() }.resolved();
    assert_eq!((r.model.link, r.train.seed, r.channel.seed), (Link::Direct, 9, 9));
    let mut p = ExperimentConfig { kind: ExperimentKind::PowerControl, ..c };
    p.train.gamma = 1e-2;
    assert_eq!(p.resolved().model.power, PowerMode::SoftPenalty);
    p.train.gamma = 0.0;
    assert_eq!(p.resolved().model.power, PowerMode::HardNorm);
}

#[test]
fn blob_hash_matches_git() {
    assert_eq!(blob_hash(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
}

#[test]
fn digital_baseline_run_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ExperimentKind::DigitalDnnBaseline, &dir.path().join("a"));
    let run = run_experiment(&cfg).unwrap();
    assert_eq!(run.rows.len(), 2);
    assert!(run.rows.iter().all(|r| r.variant == "digital" && r.accuracy.is_some()));
    let csv = std::fs::read(&run.metrics_path).unwrap();
    let header = String::from_utf8(csv.clone()).unwrap();
    assert_eq!(header.lines().next().unwrap(), Row::HEADER.join(","));

    let text = std::fs::read_to_string(&run.manifest_path).unwrap();
    let manifest: minn::harness::Manifest = toml::from_str(&text).unwrap();
    assert_eq!(manifest.metrics_hash, blob_hash(&csv));
    assert_eq!(manifest.config.model.link, Link::Bypass);

    // The manifest alone reproduces the run.
    let mut again = ExperimentConfig::from_manifest(&run.manifest_path).unwrap();
    again.output = dir.path().join("b");
    let rerun = run_experiment(&again).unwrap();
    assert_eq!(std::fs::read(rerun.metrics_path).unwrap(), csv);
}

#[test]
fn sim_run_checkpoint_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ExperimentKind::MinnClassify, dir.path());
    cfg.train.static_fading = true;
    cfg.train.batch_size = 16;
    cfg.train.epochs = 4;
    let run = run_experiment(&cfg).unwrap();
    assert_eq!(run.rows[0].variant, "sim_2x4x4");
    let ev = evaluate_checkpoint(&cfg, run.checkpoint_path.as_ref().unwrap(), None).unwrap();
    assert!((0.0..=1.0).contains(&ev.accuracy));
    assert!((ev.tx_power - 1.0).abs() < 1e-9);
    let clean = evaluate_checkpoint(&cfg, run.checkpoint_path.as_ref().unwrap(), Some(f64::INFINITY)).unwrap();
    assert!(clean.accuracy > 0.3, "{}", clean.accuracy);
}

#[test]
fn errors_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ExperimentKind::MinnClassify, dir.path());
    cfg.dataset.path = Some(dir.path().join("nowhere"));
    let e = run_experiment(&cfg).unwrap_err();
    assert!(e.to_string().starts_with("stage `config`"), "{e}");
    let mut cfg = tiny(ExperimentKind::MinnClassify, dir.path());
    cfg.model.encoder.conv_channels = vec![4];
    cfg.dataset.subsample = Some(60);
    let e = run_experiment(&cfg).unwrap_err();
    assert!(e.to_string().starts_with("stage `model`"), "{e}");
}

#[test]
fn elm_benchmark_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig { kind: ExperimentKind::ElmBenchmark, output: dir.path().to_path_buf(), ..ExperimentConfig::default() };
    cfg.dataset.source = DatasetSource::Wbcd;
    cfg.elm_benchmark.widths = vec![16, 64];
    cfg.elm_benchmark.trials = 4;
    cfg.elm.snr_db = 25.0;
    let run = run_experiment(&cfg).unwrap();
    let variants: Vec<(&str, Option<usize>)> = run.rows.iter().map(|r| (r.variant.as_str(), r.n_hidden)).collect();
    assert_eq!(variants, vec![("minn_elm", Some(16)), ("digital_elm", Some(16)), ("minn_elm", Some(64)), ("digital_elm", Some(64))]);
    assert!(run.rows.iter().all(|r| r.accuracy.unwrap() > 0.5));
    let elm = minn::checkpoint::Checkpoint::load(run.checkpoint_path.unwrap()).unwrap().to_elm().unwrap();
    assert!(elm.w.is_some() && elm.noise_sigma2 > 0.0);

    cfg.dataset.source = DatasetSource::Csv;
    cfg.dataset.path = Some(mnist_dir().join("../wbcd.csv"));
    cfg.dataset.label_column = "diagnosis".into();
    cfg.elm_benchmark.widths = vec![32];
    cfg.output = dir.path().join("csv");
    let run = run_experiment(&cfg).unwrap();
    assert!(run.rows.iter().all(|r| r.accuracy.unwrap() > 0.85), "{:?}", run.rows);
}

#[test]
fn alignment_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ExperimentKind::Alignment, dir.path());
    cfg.alignment.encoding_dim = 8;
    cfg.alignment.pair_epochs = 2;
    cfg.alignment.iters = 30;
    cfg.sim.rows = 5;
    cfg.sim.cols = 5;
    let run = run_experiment(&cfg).unwrap();
    let names: Vec<&str> = run.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, vec!["native_a", "native_b", "unaligned", "digital_map", "sim_map"]);
    let sim = &run.rows[4];
    assert!(sim.error.unwrap() < 1.0 && sim.gain.unwrap() > 0.0);
    let (m, _) = minn::checkpoint::Checkpoint::load(run.checkpoint_path.unwrap()).unwrap().to_alignment().unwrap();
    assert_eq!(m.shape(), &[4, 4]);
}

fn grid(entries: &[(&str, Vec<toml::Value>)]) -> BTreeMap<String, Vec<toml::Value>> {
    entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[test]
fn grid_expansion_and_key_checks() {
    let cfg = ExperimentConfig::default();
    assert_eq!(grid_points(&BTreeMap::new()).unwrap().len(), 1);
    let size = |n: i64| {
        let mut t = toml::Table::new();
        t.insert("rows".into(), n.into());
        t.insert("cols".into(), n.into());
        toml::Value::Table(t)
    };
    let g = grid(&[("sim", vec![size(8), size(12)]), ("channel.snr_db", vec![5.0.into(), 10.0.into()])]);
    let points = grid_points(&g).unwrap();
    assert_eq!(points.len(), 4);
    let configs: Vec<ExperimentConfig> = points.iter().map(|p| apply_point(&cfg, p).unwrap()).collect();
    let seen: Vec<(usize, usize, f64)> = configs.iter().map(|c| (c.sim.rows, c.sim.cols, c.channel.snr_db)).collect();
    assert_eq!(seen, vec![(8, 8, 5.0), (12, 12, 5.0), (8, 8, 10.0), (12, 12, 10.0)]);
    assert_eq!(configs[0].sim.layers, cfg.sim.layers);

    for bad in ["train.gama", "nope.x", "train.epochs.x", ""] {
        let g = grid(&[(bad, vec![1.into()])]);
        let p = grid_points(&g).unwrap();
        assert!(matches!(apply_point(&cfg, &p[0]), Err(minn::Error::Config(_))), "{bad}");
    }
    assert!(grid_points(&grid(&[("seed", vec![])])).is_err());
}

#[test]
fn sweeps_write_one_long_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ExperimentKind::PowerControl, dir.path());
    cfg.train.epochs = 1;
    let single = sweep(&cfg, &BTreeMap::new()).unwrap();
    assert_eq!(single.runs, 1);

    let g = grid(&[("train.gamma", vec![0.0.into(), 1e-3.into(), 1e-2.into()])]);
    cfg.output = dir.path().join("gamma");
    let out = sweep(&cfg, &g).unwrap();
    assert_eq!(out.runs, 3);
    let text = std::fs::read_to_string(&out.csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), format!("run,train.gamma,{}", Row::HEADER.join(",")));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[2].starts_with("2,0.01,power_control,sim_2x4x4,1,"));
    assert!(cfg.output.join("run_001").join(MANIFEST_FILE).exists());
    let e = sweep(&cfg, &grid(&[("train.gama", vec![0.0.into()])])).unwrap_err();
    assert!(e.to_string().starts_with("stage `config`"), "{e}");
}
