//! Experiment configuration, run directories, grids and aggregation.
//!
//! Configuration is `key=value` text, one entry per line; `#` starts a
//! comment. Later sources override earlier ones: built-in defaults, a config
//! file, `L2R_<KEY>` environment variables, then command-line overrides.
//!
//! Each run lives in `<out>/runs/<hash>-seed<seed>/` where `hash` covers the
//! whole configuration except the seed. A run directory holds `config.txt`,
//! `metrics.csv`, `checkpoint.bin` and `status` (`complete` or
//! `failed: <reason>`). Completed runs are skipped unless forced.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::baseline::{BaselineConfig, LstmBaseline};
use crate::corpus::{fallback_corpus, load_corpus_file, CorpusError, SymbolStream};
use crate::kernels::OpKind;
use crate::network::{NetworkConfig, PlasticNetwork};
use crate::optimizer::AdamConfig;
use crate::trainer::{LrSchedule, MetricsWriter, SegmentModel, TrainConfig, TrainError, Trainer};

pub const ENV_PREFIX: &str = "L2R_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("reading {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {reason}")]
    Metrics { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelKind {
    Plastic,
    Lstm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Plastic => "plastic",
            ModelKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plastic" => Ok(ModelKind::Plastic),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(format!("unknown model `{other}` (expected plastic or lstm)")),
        }
    }
}

/// Everything that defines one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    /// Empty selects the bundled fallback text.
    pub corpus_path: String,
    pub hidden_layers: Vec<usize>,
    /// `d_h = d_w`.
    pub state_size: usize,
    pub embed_dim: usize,
    pub kernel_hidden: usize,
    pub h_op: OpKind,
    pub w_op: OpKind,
    pub units: usize,
    pub segment_len: usize,
    pub delay: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub online_loss: bool,
    pub wall_clock: bool,
    pub check_every: usize,
    /// `K`: the early metric averages rows with `step <= K`.
    pub early_window: usize,
    /// The final metric averages rows in the last this many steps.
    pub final_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        let train = TrainConfig::default();
        Self {
            model: ModelKind::Plastic,
            corpus_path: String::new(),
            hidden_layers: net.hidden_layers,
            state_size: net.neuron_dim,
            embed_dim: net.embed_dim,
            kernel_hidden: net.kernel_hidden,
            h_op: net.h_op,
            w_op: net.w_op,
            units: BaselineConfig::default().units,
            segment_len: train.segment_len,
            delay: train.delay,
            steps: train.steps,
            lr: train.lr,
            lr_schedule: train.lr_schedule,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            eps: train.adam.eps,
            seed: train.seed,
            log_every: train.log_every,
            checkpoint_every: train.checkpoint_every,
            online_loss: train.online_loss,
            wall_clock: train.wall_clock,
            check_every: train.check_every,
            early_window: 30_000,
            final_window: 10_000,
        }
    }
}

/// Keys in canonical order.
pub const CONFIG_KEYS: &[&str] = &[
    "model",
    "corpus_path",
    "hidden_layers",
    "state_size",
    "embed_dim",
    "kernel_hidden",
    "h_op",
    "w_op",
    "units",
    "segment_len",
    "delay",
    "steps",
    "lr",
    "lr_schedule",
    "beta1",
    "beta2",
    "eps",
    "seed",
    "log_every",
    "checkpoint_every",
    "online_loss",
    "wall_clock",
    "check_every",
    "early_window",
    "final_window",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        reason: format!("`{value}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "model" => self.model = parse_value(key, value)?,
            "corpus_path" => self.corpus_path = value.to_string(),
            "hidden_layers" => self.hidden_layers = parse_list(key, value)?,
            "state_size" => self.state_size = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "kernel_hidden" => self.kernel_hidden = parse_value(key, value)?,
            "h_op" => self.h_op = parse_value(key, value)?,
            "w_op" => self.w_op = parse_value(key, value)?,
            "units" => self.units = parse_value(key, value)?,
            "segment_len" => self.segment_len = parse_value(key, value)?,
            "delay" => self.delay = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "lr_schedule" => self.lr_schedule = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "eps" => self.eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "log_every" => self.log_every = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            "online_loss" => self.online_loss = parse_value(key, value)?,
            "wall_clock" => self.wall_clock = parse_value(key, value)?,
            "check_every" => self.check_every = parse_value(key, value)?,
            "early_window" => self.early_window = parse_value(key, value)?,
            "final_window" => self.final_window = parse_value(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "model" => self.model.to_string(),
            "corpus_path" => self.corpus_path.clone(),
            "hidden_layers" => join(&self.hidden_layers),
            "state_size" => self.state_size.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "kernel_hidden" => self.kernel_hidden.to_string(),
            "h_op" => self.h_op.to_string(),
            "w_op" => self.w_op.to_string(),
            "units" => self.units.to_string(),
            "segment_len" => self.segment_len.to_string(),
            "delay" => self.delay.to_string(),
            "steps" => self.steps.to_string(),
            "lr" => self.lr.to_string(),
            "lr_schedule" => self.lr_schedule.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "seed" => self.seed.to_string(),
            "log_every" => self.log_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "online_loss" => self.online_loss.to_string(),
            "wall_clock" => self.wall_clock.to_string(),
            "check_every" => self.check_every.to_string(),
            "early_window" => self.early_window.to_string(),
            "final_window" => self.final_window.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (key, value) in parse_pairs(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Applies `L2R_<KEY>` variables; any other `L2R_` variable is an error.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<(), ConfigError> {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        found.sort();
        for (key, value) in found {
            self.set(&key, &value).map_err(|e| match e {
                ConfigError::UnknownKey(k) => {
                    ConfigError::UnknownKey(format!("{ENV_PREFIX}{}", k.to_ascii_uppercase()))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    /// Canonical `key=value` text; parsing it back gives an equal config.
    pub fn render(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("canonical key")))
            .collect()
    }

    /// `P = T + D`.
    pub fn horizon(&self) -> usize {
        self.segment_len + self.delay
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            hidden_layers: self.hidden_layers.clone(),
            neuron_dim: self.state_size,
            synapse_dim: self.state_size,
            embed_dim: self.embed_dim,
            kernel_hidden: self.kernel_hidden,
            h_op: self.h_op,
            w_op: self.w_op,
            ..NetworkConfig::default()
        }
    }

    pub fn baseline(&self) -> BaselineConfig {
        BaselineConfig { units: self.units }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            segment_len: self.segment_len,
            delay: self.delay,
            steps: self.steps,
            lr: self.lr,
            lr_schedule: self.lr_schedule,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            seed: self.seed,
            log_every: self.log_every,
            checkpoint_every: self.checkpoint_every,
            online_loss: self.online_loss,
            wall_clock: self.wall_clock,
            check_every: self.check_every,
        }
    }

    /// Checks every invariant, naming the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.segment_len == 0 {
            return bad("segment_len", "must be at least 1");
        }
        if self.steps < self.segment_len {
            return bad("steps", "must cover at least one segment");
        }
        if self.log_every == 0 {
            return bad("log_every", "must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must be in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps", "must be positive");
        }
        if self.final_window == 0 {
            return bad("final_window", "must be at least 1");
        }
        match self.model {
            ModelKind::Lstm => {
                if self.units == 0 {
                    return bad("units", "must be at least 1");
                }
            }
            ModelKind::Plastic => {
                if self.hidden_layers.contains(&0) {
                    return bad("hidden_layers", "layer sizes must be positive");
                }
                if self.state_size < 2 {
                    return bad("state_size", "must be at least 2");
                }
                if (self.h_op.is_lstm() || self.w_op.is_lstm()) && !self.state_size.is_multiple_of(2) {
                    return bad("state_size", "LSTM operators need an even state size");
                }
                if self.embed_dim == 0 {
                    return bad("embed_dim", "must be at least 1");
                }
                if self.kernel_hidden == 0 {
                    return bad("kernel_hidden", "must be at least 1");
                }
            }
        }
        Ok(())
    }

    /// Hash of everything except the seed, tied to the crate version.
    pub fn cell_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!("l2r {}\n", env!("CARGO_PKG_VERSION")));
        for line in self.render().lines().filter(|l| !l.starts_with("seed=")) {
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(&hasher.finalize()[..8])
    }

    pub fn run_id(&self) -> String {
        format!("{}-seed{}", self.cell_hash(), self.seed)
    }

    pub fn load_corpus(&self) -> Result<SymbolStream, CorpusError> {
        if self.corpus_path.is_empty() {
            Ok(fallback_corpus())
        } else {
            load_corpus_file(Path::new(&self.corpus_path))
        }
    }
}

/// `key=value` pairs in order; blank lines and `#` comments skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Defaults overlaid with `text`, validated.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    cfg.apply_text(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config_file(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Cartesian product of plastic-network settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub base: RunConfig,
    pub h_ops: Vec<OpKind>,
    pub w_ops: Vec<OpKind>,
    pub delays: Vec<usize>,
    pub state_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            base: RunConfig::default(),
            h_ops: OpKind::ALL.to_vec(),
            w_ops: OpKind::ALL.to_vec(),
            delays: vec![10, 40],
            state_sizes: vec![6, 14],
            seeds: vec![1, 2, 3],
        }
    }
}

impl Grid {
    /// Grid text: `h_ops`, `w_ops`, `delays`, `state_sizes` and `seeds` take
    /// comma lists; every other key sets the base run configuration.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut grid = Grid::default();
        for (key, value) in parse_pairs(text)? {
            grid.set(&key, &value)?;
        }
        grid.validate()?;
        Ok(grid)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "h_ops" => self.h_ops = parse_list(key, value)?,
            "w_ops" => self.w_ops = parse_list(key, value)?,
            "delays" => self.delays = parse_list(key, value)?,
            "state_sizes" => self.state_sizes = parse_list(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            other => self.base.set(other, value)?,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (key, empty) in [
            ("h_ops", self.h_ops.is_empty()),
            ("w_ops", self.w_ops.is_empty()),
            ("delays", self.delays.is_empty()),
            ("state_sizes", self.state_sizes.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(ConfigError::Value {
                    key: key.into(),
                    reason: "list is empty".into(),
                });
            }
        }
        self.runs().iter().try_for_each(RunConfig::validate)
    }

    /// Runs in a fixed order: h-op, w-op, delay, state size, seed.
    pub fn runs(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for &h_op in &self.h_ops {
            for &w_op in &self.w_ops {
                for &delay in &self.delays {
                    for &state_size in &self.state_sizes {
                        for &seed in &self.seeds {
                            out.push(RunConfig {
                                model: ModelKind::Plastic,
                                h_op,
                                w_op,
                                delay,
                                state_size,
                                seed,
                                ..self.base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Complete,
    Failed(String),
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunStatus::Complete => f.write_str("complete"),
            RunStatus::Failed(reason) => write!(f, "failed: {reason}"),
        }
    }
}

/// Summary metrics of one run's `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunMetrics {
    /// Mean replay loss over rows with `step <= early_window`.
    pub early: f64,
    /// Mean replay loss over rows in the last `final_window` steps.
    pub final_loss: f64,
    pub last_step: usize,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub status: RunStatus,
    pub metrics: Option<RunMetrics>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.txt";
pub const STATUS_FILE: &str = "status";

pub fn run_dir(out_dir: &Path, cfg: &RunConfig) -> PathBuf {
    out_dir.join("runs").join(cfg.run_id())
}

/// `(step, loss_past)` rows of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<(usize, f64)>, HarnessError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Metrics {
                path: path.display().to_string(),
                reason: format!("missing column `{name}`"),
            })
    };
    let (step_col, loss_col) = (col("step")?, col("loss_past")?);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse_err = |what: &str| HarnessError::Metrics {
            path: path.display().to_string(),
            reason: format!("bad {what} in row {}", rows.len() + 1),
        };
        let step = record[step_col].parse().map_err(|_| parse_err("step"))?;
        let loss = record[loss_col].parse().map_err(|_| parse_err("loss_past"))?;
        rows.push((step, loss));
    }
    Ok(rows)
}

pub fn summarize(rows: &[(usize, f64)], early_window: usize, final_window: usize) -> Option<RunMetrics> {
    let &(last_step, _) = rows.last()?;
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let (sum, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        (n > 0).then(|| sum / n as f64)
    };
    let early = mean(&mut rows.iter().filter(|r| r.0 <= early_window).map(|r| r.1))?;
    let cutoff = last_step.saturating_sub(final_window);
    let final_loss = mean(&mut rows.iter().filter(|r| r.0 > cutoff).map(|r| r.1))?;
    Some(RunMetrics {
        early,
        final_loss,
        last_step,
        rows: rows.len(),
    })
}

fn train_model<M: SegmentModel>(
    model: M,
    meta: crate::autodiff::ParamStore,
    state: M::State,
    cfg: &RunConfig,
    stream: &SymbolStream,
    dir: &Path,
    metrics_model: Option<&'static str>,
) -> Result<(), HarnessError> {
    let text = cfg.render();
    let file = BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?);
    let mut writer = MetricsWriter::new(file, cfg.delay, cfg.seed, metrics_model)?;
    let mut trainer = Trainer::new(model, meta, state, cfg.train())?;
    trainer.run(stream, &mut writer, Some(&dir.join(CHECKPOINT_FILE)), &text)?;
    Ok(())
}

/// Trains one run into `dir`, which is created if needed.
pub fn execute_run(cfg: &RunConfig, stream: &SymbolStream, dir: &Path) -> Result<(), HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.render())?;
    match cfg.model {
        ModelKind::Plastic => {
            let net = PlasticNetwork::new(cfg.network()).map_err(TrainError::from)?;
            let meta = net.init_meta(cfg.seed);
            let state = net.init_state(cfg.seed);
            train_model(net, meta, state, cfg, stream, dir, None)
        }
        ModelKind::Lstm => {
            let net = LstmBaseline::new(cfg.baseline())?;
            let params = net.init_params(cfg.seed);
            let state = net.zero_state();
            train_model(net, params, state, cfg, stream, dir, Some("lstm"))
        }
    }
}

/// Runs (or skips, when already complete) one configuration under
/// `out_dir`, recording its status instead of failing.
pub fn run_or_skip(cfg: &RunConfig, stream: &SymbolStream, out_dir: &Path, force: bool) -> RunRecord {
    let dir = run_dir(out_dir, cfg);
    let done = fs::read_to_string(dir.join(STATUS_FILE))
        .map(|s| s.trim() == "complete")
        .unwrap_or(false);
    let status = if done && !force {
        RunStatus::Complete
    } else {
        let _ = fs::remove_file(dir.join(STATUS_FILE));
        let status = match execute_run(cfg, stream, &dir) {
            Ok(()) => RunStatus::Complete,
            Err(e) => RunStatus::Failed(e.to_string().replace('\n', " ")),
        };
        if let Err(e) = fs::create_dir_all(&dir).and_then(|_| fs::write(dir.join(STATUS_FILE), format!("{status}\n"))) {
            return RunRecord {
                config: cfg.clone(),
                dir,
                status: RunStatus::Failed(format!("writing status: {e}")),
                metrics: None,
            };
        }
        status
    };
    let metrics = read_metrics(&dir.join(METRICS_FILE))
        .ok()
        .and_then(|rows| summarize(&rows, cfg.early_window, cfg.final_window));
    RunRecord {
        config: cfg.clone(),
        dir,
        status,
        metrics,
    }
}

/// Runs every configuration with up to `workers` threads. Records come back
/// in input order. Corpora are loaded once per distinct path.
pub fn run_all(
    configs: &[RunConfig],
    out_dir: &Path,
    workers: usize,
    force: bool,
) -> Result<Vec<RunRecord>, HarnessError> {
    let mut corpora: BTreeMap<String, SymbolStream> = BTreeMap::new();
    for cfg in configs {
        if !corpora.contains_key(&cfg.corpus_path) {
            corpora.insert(cfg.corpus_path.clone(), cfg.load_corpus()?);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| io::Error::other(e.to_string()))?;
    let records = pool.install(|| {
        configs
            .par_iter()
            .map(|cfg| run_or_skip(cfg, &corpora[&cfg.corpus_path], out_dir, force))
            .collect()
    });
    Ok(records)
}

pub const RUNS_HEADER: &[&str] = &[
    "run_id",
    "model",
    "h_op",
    "w_op",
    "delay",
    "state_size",
    "units",
    "seed",
    "steps",
    "status",
    "early",
    "final",
];

pub const AGGREGATE_HEADER: &[&str] = &[
    "model",
    "h_op",
    "w_op",
    "delay",
    "state_size",
    "units",
    "steps",
    "seeds",
    "early_mean",
    "early_best",
    "final_mean",
    "final_best",
];

/// Cell identity columns; plastic-only fields are `-` for the baseline and
/// vice versa.
fn cell_columns(cfg: &RunConfig) -> Vec<String> {
    let plastic = cfg.model == ModelKind::Plastic;
    let either = |yes: bool, v: String| if yes { v } else { "-".to_string() };
    vec![
        cfg.model.to_string(),
        either(plastic, cfg.h_op.to_string()),
        either(plastic, cfg.w_op.to_string()),
        cfg.delay.to_string(),
        either(plastic, cfg.state_size.to_string()),
        either(!plastic, cfg.units.to_string()),
        cfg.steps.to_string(),
    ]
}

pub fn write_runs_csv(records: &[RunRecord], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RUNS_HEADER)?;
    for r in records {
        let cell = cell_columns(&r.config);
        let (early, fin) = match &r.metrics {
            Some(m) => (m.early.to_string(), m.final_loss.to_string()),
            None => (String::new(), String::new()),
        };
        let mut row = vec![r.config.run_id()];
        row.extend(cell[..6].iter().cloned());
        row.push(r.config.seed.to_string());
        row.push(cell[6].clone());
        row.push(r.status.to_string());
        row.push(early);
        row.push(fin);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub cell: Vec<String>,
    pub seeds: usize,
    pub early_mean: f64,
    pub early_best: f64,
    pub final_mean: f64,
    pub final_best: f64,
}

/// One row per cell (all settings but the seed) in first-seen order, over
/// completed runs with metrics.
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut cells: Vec<(Vec<String>, Vec<RunMetrics>)> = Vec::new();
    for r in records {
        let key = cell_columns(&r.config);
        let metrics = match (&r.status, &r.metrics) {
            (RunStatus::Complete, Some(m)) => Some(*m),
            _ => None,
        };
        let slot = match cells.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                cells.push((key, Vec::new()));
                cells.len() - 1
            }
        };
        cells[slot].1.extend(metrics);
    }
    cells
        .into_iter()
        .filter(|(_, ms)| !ms.is_empty())
        .map(|(cell, ms)| {
            let n = ms.len() as f64;
            let early: Vec<f64> = ms.iter().map(|m| m.early).collect();
            let fin: Vec<f64> = ms.iter().map(|m| m.final_loss).collect();
            AggregateRow {
                cell,
                seeds: ms.len(),
                early_mean: early.iter().sum::<f64>() / n,
                early_best: early.iter().copied().fold(f64::INFINITY, f64::min),
                final_mean: fin.iter().sum::<f64>() / n,
                final_best: fin.iter().copied().fold(f64::INFINITY, f64::min),
            }
        })
        .collect()
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(AGGREGATE_HEADER)?;
    for r in rows {
        let mut row = r.cell.clone();
        row.extend([
            r.seeds.to_string(),
            r.early_mean.to_string(),
            r.early_best.to_string(),
            r.final_mean.to_string(),
            r.final_best.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs a set of configurations and writes `runs.csv` and `aggregate.csv`
/// under `out_dir`.
pub fn run_and_aggregate(
    configs: &[RunConfig],
    out_dir: &Path,
    workers: usize,
    force: bool,
) -> Result<(Vec<RunRecord>, Vec<AggregateRow>), HarnessError> {
    fs::create_dir_all(out_dir)?;
    let records = run_all(configs, out_dir, workers, force)?;
    write_runs_csv(&records, &out_dir.join("runs.csv"))?;
    let rows = aggregate(&records);
    write_aggregate_csv(&rows, &out_dir.join("aggregate.csv"))?;
    Ok((records, rows))
}

/// Rebuilds records from existing run directories under `out_dir`.
pub fn collect_runs(out_dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut dirs: Vec<PathBuf> = match fs::read_dir(out_dir.join("runs")) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect(),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    dirs.sort();
    let mut records = Vec::new();
    for dir in dirs {
        let Ok(text) = fs::read_to_string(dir.join(CONFIG_FILE)) else {
            continue;
        };
        let config = parse_config(&text)?;
        let status = match fs::read_to_string(dir.join(STATUS_FILE)) {
            Ok(s) if s.trim() == "complete" => RunStatus::Complete,
            Ok(s) => RunStatus::Failed(s.trim().trim_start_matches("failed: ").to_string()),
            Err(_) => RunStatus::Failed("incomplete".into()),
        };
        let metrics = read_metrics(&dir.join(METRICS_FILE))
            .ok()
            .and_then(|rows| summarize(&rows, config.early_window, config.final_window));
        records.push(RunRecord {
            config,
            dir,
            status,
            metrics,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        let d = RunConfig::default();
        assert_eq!(d.segment_len, 10);
        assert_eq!(d.state_size, 6);
    }

    #[test]
    fn delay_override_sets_horizon() {
        let cfg = parse_config("delay=80\n").unwrap();
        assert_eq!(cfg.horizon(), 90);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config("dealy=80").unwrap_err();
        assert!(err.to_string().contains("dealy"), "{err}");
    }

    #[test]
    fn bad_value_is_named() {
        let err = parse_config("steps=many").unwrap_err();
        assert!(
            matches!(&err, ConfigError::Value { key, .. } if key == "steps"),
            "{err}"
        );
        let err = parse_config("h_op=lstm\nstate_size=7").unwrap_err();
        assert!(
            matches!(&err, ConfigError::Value { key, .. } if key == "state_size"),
            "{err}"
        );
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("h_op=lstm-id\nw_op=mlp-tanh\nhidden_layers=3,5\nlr=0.00025\nwall_clock=false")
            .unwrap();
        assert_eq!(parse_config(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn env_overrides_file() {
        let mut cfg = parse_config("delay=20").unwrap();
        cfg.apply_env([("L2R_DELAY".to_string(), "40".to_string()), ("HOME".into(), "/".into())])
            .unwrap();
        assert_eq!(cfg.delay, 40);
        let err = cfg.apply_env([("L2R_DEALY".to_string(), "1".to_string())]).unwrap_err();
        assert!(err.to_string().contains("L2R_DEALY"));
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 9, ..a.clone() };
        let c = RunConfig { delay: 11, ..a.clone() };
        assert_eq!(a.cell_hash(), b.cell_hash());
        assert_ne!(a.cell_hash(), c.cell_hash());
        assert_ne!(a.run_id(), b.run_id());
    }

    #[test]
    fn summary_windows() {
        let rows: Vec<(usize, f64)> = (1..=10).map(|k| (k * 10, k as f64)).collect();
        let m = summarize(&rows, 30, 20).unwrap();
        assert_eq!(m.early, 2.0);
        assert_eq!(m.final_loss, 9.5);
        assert_eq!(m.last_step, 100);
        assert!(summarize(&[], 10, 10).is_none());
    }
}
