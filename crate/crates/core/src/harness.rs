//! Experiment configuration, dataset ingestion and the runners behind the
//! command-line tool.
//!
//! A run writes `metrics.csv`, `manifest.toml` (the fully resolved config plus
//! a content hash of the metrics) and a checkpoint into its output directory.
//! The manifest alone is enough to repeat the run.

use crate::align::{aligned_accuracy, encodings, fit_linear_map, randomize_phases, sim_approximate, AlignMap};
use crate::channel::ChannelConfig;
use crate::checkpoint::Checkpoint;
use crate::data::{load_csv_dataset, load_mnist_dir, Dataset, Standardizer, SyntheticSpec};
use crate::elm::{mean_accuracy, ElmConfig, ElmModel, HiddenLayer};
use crate::error::{Error, Result, StageExt};
use crate::minn::{Link, MinnConfig, MinnModel, PowerMode};
use crate::par::Execution;
use crate::train::{evaluate, fit, stream, ChannelContext, Evaluation, TrainConfig};
use crate::wave::{SimSpec, SimStack};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const SWEEP_FILE: &str = "sweep.csv";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Encoder, SIM link and decoder trained end to end.
    #[default]
    MinnClassify,
    /// Same pipeline over the bare fading channel.
    NoSimBaseline,
    /// Encoder wired straight to the decoder.
    DigitalDnnBaseline,
    /// SIM link trained with the transmit-power penalty.
    PowerControl,
    /// Fading-channel ELM against its digital counterpart.
    ElmBenchmark,
    /// Two independently trained links joined by a fitted SIM.
    Alignment,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::MinnClassify => "minn_classify",
            ExperimentKind::NoSimBaseline => "no_sim_baseline",
            ExperimentKind::DigitalDnnBaseline => "digital_dnn_baseline",
            ExperimentKind::PowerControl => "power_control",
            ExperimentKind::ElmBenchmark => "elm_benchmark",
            ExperimentKind::Alignment => "alignment",
        }
    }

    pub fn trains_link(self) -> bool {
        matches!(
            self,
            ExperimentKind::MinnClassify | ExperimentKind::NoSimBaseline | ExperimentKind::DigitalDnnBaseline | ExperimentKind::PowerControl
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// IDX files in `path` (`train-*`, `t10k-*`, optionally gzipped).
    #[default]
    Mnist,
    /// Headed numeric CSV at `path`.
    Csv,
    /// Synthetic stand-ins with the dimensions of public tabular sets.
    Wbcd,
    Parkinsons,
    HighDimensional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub path: Option<PathBuf>,
    pub label_column: String,
    pub train_samples: Option<usize>,
    pub test_samples: Option<usize>,
    /// Keep only these classes, relabelled in order.
    pub classes: Option<Vec<usize>>,
    /// Keep this many features by uniform stride (flattens images).
    pub subsample: Option<usize>,
    /// Held-out share for sources without a predefined split.
    pub test_fraction: f64,
    /// Row count of a synthetic source.
    pub samples: Option<usize>,
    /// Seed for synthetic draws and random splits; the master seed if unset.
    pub data_seed: Option<u64>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DatasetSource::Mnist,
            path: Some(PathBuf::from("data/mnist5k")),
            label_column: "label".into(),
            train_samples: None,
            test_samples: None,
            classes: None,
            subsample: None,
            test_fraction: 0.3,
            samples: None,
            data_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElmBenchmark {
    /// Hidden widths to compare; empty means `elm.n_hidden` only.
    pub widths: Vec<usize>,
    pub trials: usize,
    /// Also run a noise-free ELM with real Gaussian hidden weights.
    pub digital_baseline: bool,
}

impl Default for ElmBenchmark {
    fn default() -> Self {
        ElmBenchmark { widths: vec![], trials: 200, digital_baseline: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentSetup {
    /// Real dimension of each link's encoding (two per TX antenna).
    pub encoding_dim: usize,
    /// Training epochs of each independent link.
    pub pair_epochs: usize,
    pub iters: usize,
    pub lr: f64,
    /// Ridge weight for the linear map; plain least squares if unset.
    pub ridge: Option<f64>,
    /// Receiver SNR of the aligned link; noiseless if unset.
    pub snr_db: Option<f64>,
}

impl Default for AlignmentSetup {
    fn default() -> Self {
        AlignmentSetup { encoding_dim: 32, pair_epochs: 5, iters: 1000, lr: 0.1, ridge: None, snr_db: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Master seed; copied into the channel and training seeds on resolve.
    pub seed: u64,
    pub output: PathBuf,
    pub dataset: DatasetSpec,
    pub channel: ChannelConfig,
    pub sim: SimSpec,
    pub model: MinnConfig,
    pub train: TrainConfig,
    pub elm: ElmConfig,
    pub elm_benchmark: ElmBenchmark,
    pub alignment: AlignmentSetup,
    /// Parameter grid for `sweep`: config path → values.
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::MinnClassify,
            seed: 0,
            output: PathBuf::from("runs/default"),
            dataset: DatasetSpec::default(),
            channel: ChannelConfig::default(),
            sim: SimSpec::default(),
            model: MinnConfig::default(),
            train: TrainConfig::default(),
            elm: ElmConfig::default(),
            elm_benchmark: ElmBenchmark::default(),
            alignment: AlignmentSetup::default(),
            sweep: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; a relative dataset path is taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.dataset.path, path.parent()) {
            if p.is_relative() && !p.exists() {
                cfg.dataset.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    /// The config stored in a run manifest.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(m.config)
    }

    /// Fills in everything the kind implies: seeds, link and power mode.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.channel.seed = c.seed;
        c.train.seed = c.seed;
        c.dataset.data_seed = Some(c.dataset.data_seed.unwrap_or(c.seed));
        match c.kind {
            ExperimentKind::MinnClassify => c.model.link = Link::Sim,
            ExperimentKind::NoSimBaseline => c.model.link = Link::Direct,
            ExperimentKind::DigitalDnnBaseline | ExperimentKind::Alignment => c.model.link = Link::Bypass,
            ExperimentKind::PowerControl => {
                c.model.link = Link::Sim;
                c.model.power = if c.train.gamma > 0.0 { PowerMode::SoftPenalty } else { PowerMode::HardNorm };
            }
            ExperimentKind::ElmBenchmark => {}
        }
        c
    }

    /// Checks that referenced files exist and kind-specific fields make sense.
    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.train.validate()?;
        match self.dataset.source {
            DatasetSource::Mnist | DatasetSource::Csv => {
                let p = self.dataset.path.as_ref().ok_or_else(|| Error::Config("dataset.path is required".into()))?;
                if !p.exists() {
                    return Err(Error::Config(format!("dataset path {} does not exist", p.display())));
                }
            }
            _ => {}
        }
        if !(self.dataset.test_fraction > 0.0 && self.dataset.test_fraction < 1.0) {
            return Err(Error::Config(format!("dataset.test_fraction {} outside (0, 1)", self.dataset.test_fraction)));
        }
        match self.kind {
            ExperimentKind::ElmBenchmark => {
                if self.elm_benchmark.trials == 0 || self.elm_benchmark.widths.contains(&0) {
                    return Err(Error::Config("elm_benchmark needs trials ≥ 1 and positive widths".into()));
                }
            }
            ExperimentKind::Alignment => {
                let a = &self.alignment;
                if a.encoding_dim == 0 || a.encoding_dim % 2 != 0 || a.pair_epochs == 0 {
                    return Err(Error::Config("alignment needs an even encoding_dim and pair_epochs ≥ 1".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// One line of the metrics CSV. Columns that do not apply to a kind are
/// left empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub kind: ExperimentKind,
    pub variant: String,
    pub epoch: Option<usize>,
    pub n_hidden: Option<usize>,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub tx_power: Option<f64>,
    pub snr_db: Option<f64>,
    pub error: Option<f64>,
    pub gain: Option<f64>,
    pub seed: u64,
}

impl Row {
    pub const HEADER: [&'static str; 11] =
        ["kind", "variant", "epoch", "n_hidden", "loss", "accuracy", "tx_power", "snr_db", "error", "gain", "seed"];

    fn new(kind: ExperimentKind, variant: impl Into<String>, seed: u64) -> Self {
        Row {
            kind,
            variant: variant.into(),
            epoch: None,
            n_hidden: None,
            loss: None,
            accuracy: None,
            tx_power: None,
            snr_db: None,
            error: None,
            gain: None,
            seed,
        }
    }

    pub fn fields(&self) -> Vec<String> {
        let f = |x: Option<f64>| x.filter(|v| !v.is_nan()).map_or(String::new(), |v| v.to_string());
        let u = |x: Option<usize>| x.map_or(String::new(), |v| v.to_string());
        vec![
            self.kind.name().to_string(),
            self.variant.clone(),
            u(self.epoch),
            u(self.n_hidden),
            f(self.loss),
            f(self.accuracy),
            f(self.tx_power),
            f(self.snr_db),
            f(self.error),
            f(self.gain),
            self.seed.to_string(),
        ]
    }
}

pub fn rows_to_csv(rows: &[Row]) -> Result<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(Row::HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    let buf = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
}

/// Git-style object id: SHA-256 over `"blob <len>\0"` followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub metrics_file: String,
    pub metrics_hash: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<Row>,
    pub metrics_path: PathBuf,
    pub manifest_path: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
}

/// Train/test splits for a dataset spec.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let data_seed = spec.data_seed.unwrap_or(seed);
    let path = || spec.path.clone().ok_or_else(|| Error::Config("dataset.path is required".into()));
    let (mut train, mut test, standardize) = match spec.source {
        DatasetSource::Mnist => {
            let (a, b) = load_mnist_dir(path()?)?;
            (a, b, false)
        }
        DatasetSource::Csv => {
            let c = load_csv_dataset(path()?, &spec.label_column)?;
            let (a, b) = c.dataset.split(spec.test_fraction, &mut stream(data_seed, 7));
            (a, b, true)
        }
        src => {
            let mut s = match src {
                DatasetSource::Wbcd => SyntheticSpec::wbcd(),
                DatasetSource::Parkinsons => SyntheticSpec::parkinsons(),
                _ => SyntheticSpec::high_dimensional(),
            };
            if let Some(n) = spec.samples {
                s.samples = n;
            }
            let all = s.generate(&mut stream(data_seed, 6))?;
            let (a, b) = all.split(spec.test_fraction, &mut stream(data_seed, 7));
            (a, b, true)
        }
    };
    if let Some(c) = &spec.classes {
        if c.iter().any(|&k| k >= train.classes) || c.len() < 2 {
            return Err(Error::Config(format!("classes {c:?} invalid for {} classes", train.classes)));
        }
        train = train.select_classes(c);
        test = test.select_classes(c);
    }
    if let Some(n) = spec.train_samples {
        train = train.take(n);
    }
    if let Some(n) = spec.test_samples {
        test = test.take(n);
    }
    if let Some(k) = spec.subsample {
        train = train.subsample_features(k)?;
        test = test.subsample_features(k)?;
    }
    if standardize {
        let s = Standardizer::fit(&train);
        s.apply(&mut train);
        s.apply(&mut test);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!("empty split: {} train, {} test rows", train.len(), test.len())));
    }
    Ok((train, test))
}

fn build_stack(spec: &SimSpec) -> Result<SimStack> {
    spec.build([0.0; 3], [0.0, 0.0, 1.0])
}

/// Fresh model for a resolved training config.
pub fn build_model(cfg: &ExperimentConfig, train: &Dataset) -> Result<MinnModel> {
    let stack = match cfg.model.link {
        Link::Sim => Some(build_stack(&cfg.sim)?),
        _ => None,
    };
    MinnModel::new(cfg.model.clone(), cfg.channel.clone(), stack, &train.sample_shape, train.classes, &mut stream(cfg.seed, 0))
}

fn variant(cfg: &ExperimentConfig) -> String {
    match cfg.model.link {
        Link::Sim => format!("sim_{}x{}x{}", cfg.sim.layers, cfg.sim.rows, cfg.sim.cols),
        Link::Direct => "no_sim".into(),
        Link::Bypass => "digital".into(),
    }
}

fn run_training(cfg: &ExperimentConfig, out: &Path, meta: &str) -> Result<(Vec<Row>, PathBuf)> {
    let (train, test) = load_dataset(&cfg.dataset, cfg.seed).stage("dataset")?;
    let mut model = build_model(cfg, &train).stage("model")?;
    let (metrics, _) = fit(&mut model, &train, &test, &cfg.train).stage("train")?;
    let v = variant(cfg);
    let rows = metrics
        .rows
        .iter()
        .map(|m| Row {
            epoch: Some(m.epoch),
            loss: Some(m.loss),
            accuracy: Some(m.accuracy),
            tx_power: Some(m.tx_power),
            snr_db: Some(m.snr_db),
            ..Row::new(cfg.kind, v.clone(), m.seed)
        })
        .collect();
    model.sync_stack().stage("checkpoint")?;
    let path = out.join("model.ckpt");
    Checkpoint::from_params(&model.params, meta).save(&path).stage("checkpoint")?;
    Ok((rows, path))
}

fn run_elm(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<Row>, PathBuf)> {
    let (mut train, mut test) = load_dataset(&cfg.dataset, cfg.seed).stage("dataset")?;
    train = train.flattened();
    test = test.flattened();
    let s = Standardizer::fit(&train);
    s.apply(&mut train);
    s.apply(&mut test);
    let b = &cfg.elm_benchmark;
    let widths = if b.widths.is_empty() { vec![cfg.elm.n_hidden] } else { b.widths.clone() };
    let exec = Execution::available();
    let mut rows = Vec::new();
    for &w in &widths {
        let minn = ElmConfig { n_hidden: w, ..cfg.elm.clone() };
        let acc = mean_accuracy(&minn, &train, &test, b.trials, cfg.seed, exec).stage("elm")?;
        rows.push(Row { n_hidden: Some(w), accuracy: Some(acc), snr_db: Some(minn.snr_db), ..Row::new(cfg.kind, "minn_elm", cfg.seed) });
        if b.digital_baseline {
            let digital = ElmConfig { hidden_layer: HiddenLayer::Gaussian, snr_db: f64::INFINITY, ..minn };
            let acc = mean_accuracy(&digital, &train, &test, b.trials, cfg.seed, exec).stage("elm")?;
            rows.push(Row { n_hidden: Some(w), accuracy: Some(acc), ..Row::new(cfg.kind, "digital_elm", cfg.seed) });
        }
    }
    let mut model = ElmModel::new(&cfg.elm, train.dim(), train.classes, &mut stream(cfg.seed, 0)).stage("elm")?;
    model.calibrate_noise(&train).stage("elm")?;
    model.fit(&train, cfg.seed, exec).stage("elm")?;
    let path = out.join("elm.ckpt");
    Checkpoint::from_elm(&model).and_then(|c| c.save(&path)).stage("checkpoint")?;
    Ok((rows, path))
}

/// Trains one bypass link with `encoding_dim / 2` TX antennas.
pub fn train_link(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, seed: u64) -> Result<(MinnModel, f64)> {
    let ch = ChannelConfig { n_tx: cfg.alignment.encoding_dim / 2, n_rx: cfg.alignment.encoding_dim / 2, seed, ..cfg.channel.clone() };
    let mc = MinnConfig { link: Link::Bypass, slots: 1, power: PowerMode::HardNorm, controller: None, ..cfg.model.clone() };
    let mut m = MinnModel::new(mc, ch, None, &train.sample_shape, train.classes, &mut stream(seed, 0))?;
    let tc = TrainConfig { epochs: cfg.alignment.pair_epochs, snr_schedule: vec![], seed, ..cfg.train.clone() };
    let (metrics, _) = fit(&mut m, train, test, &tc)?;
    let acc = metrics.last().map_or(0.0, |r| r.accuracy);
    Ok((m, acc))
}

fn run_alignment(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<Row>, PathBuf)> {
    let (train, test) = load_dataset(&cfg.dataset, cfg.seed).stage("dataset")?;
    let (a, acc_a) = train_link(cfg, &train, &test, 2 * cfg.seed + 1).stage("train_pair_a")?;
    let (b, acc_b) = train_link(cfg, &train, &test, 2 * cfg.seed + 2).stage("train_pair_b")?;
    let exec = Execution::available();
    let al = &cfg.alignment;
    let m = encodings(&a, &train, exec)
        .and_then(|za| encodings(&b, &train, exec).and_then(|zb| fit_linear_map(&za, &zb, al.ridge)))
        .stage("fit_map")?;
    let mut stack = build_stack(&cfg.sim).stage("approximate")?;
    randomize_phases(&mut stack, &mut stream(cfg.seed, 5));
    let fitted = sim_approximate(&m, &stack, al.iters, al.lr).stage("approximate")?;
    let sim = AlignMap::Sim { stack: fitted.apply_to(&stack)?, beta: fitted.beta };

    let mut rows = vec![
        Row { accuracy: Some(acc_a), ..Row::new(cfg.kind, "native_a", cfg.seed) },
        Row { accuracy: Some(acc_b), ..Row::new(cfg.kind, "native_b", cfg.seed) },
    ];
    for (name, map) in [("unaligned", AlignMap::Identity), ("digital_map", AlignMap::Digital(m.clone())), ("sim_map", sim)] {
        let acc = aligned_accuracy(&a, &map, &b, &test, al.snr_db, cfg.seed, exec).stage("evaluate")?;
        let mut r = Row { accuracy: Some(acc), snr_db: al.snr_db, ..Row::new(cfg.kind, name, cfg.seed) };
        if name == "sim_map" {
            r.error = Some(fitted.error);
            r.gain = Some(fitted.beta.norm());
        }
        rows.push(r);
    }
    let path = out.join("align.ckpt");
    Checkpoint::from_alignment(&m, &fitted).and_then(|c| c.save(&path)).stage("checkpoint")?;
    Ok((rows, path))
}

/// Runs one experiment end to end from the master seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let cfg = ExperimentConfig { sweep: BTreeMap::new(), ..cfg.resolved() };
    cfg.validate().stage("config")?;
    let out = cfg.output.clone();
    std::fs::create_dir_all(&out).map_err(Error::from).stage("output")?;
    let meta = cfg.to_toml().stage("config")?;
    let (rows, ckpt) = match cfg.kind {
        k if k.trains_link() => run_training(&cfg, &out, &meta)?,
        ExperimentKind::ElmBenchmark => run_elm(&cfg, &out)?,
        _ => run_alignment(&cfg, &out)?,
    };
    let csv = rows_to_csv(&rows).stage("output")?;
    let metrics_path = out.join(METRICS_FILE);
    std::fs::write(&metrics_path, &csv).map_err(Error::from).stage("output")?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        metrics_file: METRICS_FILE.into(),
        metrics_hash: blob_hash(csv.as_bytes()),
        config: cfg,
    };
    let manifest_path = out.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string())).stage("output")?;
    std::fs::write(&manifest_path, text).map_err(Error::from).stage("output")?;
    Ok(RunOutput { rows, metrics_path, manifest_path, checkpoint_path: Some(ckpt) })
}

/// Evaluates a trained-link checkpoint on the test split, rebuilding the
/// training-time channel context from the config's seed.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, snr_db: Option<f64>) -> Result<Evaluation> {
    let cfg = cfg.resolved();
    if !cfg.kind.trains_link() {
        return Err(Error::Config(format!("{} runs have no link to evaluate", cfg.kind.name())).in_stage("config"));
    }
    cfg.validate().stage("config")?;
    let (train, test) = load_dataset(&cfg.dataset, cfg.seed).stage("dataset")?;
    let mut model = build_model(&cfg, &train).stage("model")?;
    Checkpoint::load(checkpoint).and_then(|c| c.restore_params(&mut model.params)).stage("checkpoint")?;
    let mut ctx = ChannelContext::new(&model, cfg.train.static_fading, &mut stream(cfg.seed, 1)).stage("evaluate")?;
    let snr = snr_db.unwrap_or(cfg.channel.snr_db);
    evaluate(&model, &test, &mut ctx, snr, cfg.train.eval_realizations, cfg.seed, Execution::available()).stage("evaluate")
}

fn set_path(root: &mut toml::Value, key: &str, value: &toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed grid key `{key}`")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        node = node
            .get_mut(*p)
            .filter(|v| v.is_table())
            .ok_or_else(|| Error::Config(format!("unknown grid key `{key}`")))?;
    }
    let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("unknown grid key `{key}`")))?;
    let leaf = parts[parts.len() - 1];
    match (table.get_mut(leaf), value) {
        (Some(toml::Value::Table(t)), toml::Value::Table(patch)) => {
            for (k, v) in patch {
                t.insert(k.clone(), v.clone());
            }
        }
        _ => {
            table.insert(leaf.to_string(), value.clone());
        }
    }
    Ok(())
}

/// `cfg` with one grid point applied. Table values are merged into the
/// table at their key.
pub fn apply_point(cfg: &ExperimentConfig, point: &[(String, toml::Value)]) -> Result<ExperimentConfig> {
    let mut v = toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    for (k, x) in point {
        set_path(&mut v, k, x)?;
    }
    v.try_into().map_err(|e: toml::de::Error| {
        let keys: Vec<&str> = point.iter().map(|(k, _)| k.as_str()).collect();
        Error::Config(format!("grid {keys:?}: {}", e.message()))
    })
}

/// Every combination of the grid's values, keys in sorted order.
pub fn grid_points(grid: &BTreeMap<String, Vec<toml::Value>>) -> Result<Vec<Vec<(String, toml::Value)>>> {
    let mut points = vec![vec![]];
    for (k, values) in grid {
        if values.is_empty() {
            return Err(Error::Config(format!("grid key `{k}` has no values")));
        }
        points = points
            .into_iter()
            .flat_map(|p: Vec<(String, toml::Value)>| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((k.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

fn cell(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Table(t) => {
            let parts: Vec<String> = t.iter().map(|(k, v)| format!("{k}={}", cell(v))).collect();
            parts.join(";")
        }
        other => other.to_string(),
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutput {
    pub runs: usize,
    pub csv_path: PathBuf,
}

/// Runs every grid point into `output/run_NNN/` and writes the combined
/// long-format table to `output/sweep.csv`: a run index, one column per
/// grid key, then the metrics columns.
pub fn sweep(cfg: &ExperimentConfig, grid: &BTreeMap<String, Vec<toml::Value>>) -> Result<SweepOutput> {
    let points = grid_points(grid).stage("config")?;
    let configs = points
        .iter()
        .map(|p| apply_point(cfg, p))
        .collect::<Result<Vec<_>>>()
        .stage("config")?;
    let mut w = csv::Writer::from_writer(vec![]);
    let csv_err = |e: csv::Error| Error::Data(e.to_string()).in_stage("output");
    let mut header = vec!["run".to_string()];
    header.extend(grid.keys().cloned());
    header.extend(Row::HEADER.iter().map(|s| s.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for (i, (c, p)) in configs.into_iter().zip(&points).enumerate() {
        let c = ExperimentConfig { output: cfg.output.join(format!("run_{i:03}")), ..c };
        let run = run_experiment(&c).map_err(|e| e.in_stage(format!("sweep run {i}")))?;
        for r in &run.rows {
            let mut rec = vec![i.to_string()];
            rec.extend(p.iter().map(|(_, v)| cell(v)));
            rec.extend(r.fields());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    let buf = w.into_inner().map_err(|e| Error::Data(e.to_string()).in_stage("output"))?;
    let csv_path = cfg.output.join(SWEEP_FILE);
    std::fs::create_dir_all(&cfg.output).map_err(Error::from).stage("output")?;
    std::fs::write(&csv_path, buf).map_err(Error::from).stage("output")?;
    Ok(SweepOutput { runs: points.len(), csv_path })
}
