use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use l2r::autodiff::grad_check_with_floor;
use l2r::baseline::{baseline_param_count, BaselineConfig, LstmBaseline};
use l2r::corpus::char_of;
use l2r::harness::{
    aggregate, collect_runs, read_config_file, run_and_aggregate, run_dir, run_or_skip, write_aggregate_csv,
    write_runs_csv, Grid, ModelKind, RunConfig, RunStatus,
};
use l2r::kernels::OpKind;
use l2r::network::{meta_param_count, NetworkConfig, PlasticNetwork, ALPHABET};
use l2r::trainer::{SegmentModel, TrainConfig};

#[derive(Parser)]
#[command(name = "l2r", version, about = "Train plastic networks to remember past text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one plastic network.
    Train(RunArgs),
    /// Train the LSTM baseline on the same objective.
    Baseline(RunArgs),
    /// Run a grid of configurations and aggregate the results.
    Grid(GridArgs),
    /// Check segment gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Rebuild runs.csv and aggregate.csv from existing run directories.
    Aggregate {
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Print symbol statistics of a corpus.
    CorpusStats {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Overrides {
    /// Config file of key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    h_op: Option<OpKind>,
    #[arg(long)]
    w_op: Option<OpKind>,
    #[arg(long)]
    delay: Option<usize>,
    /// d_h = d_w for the plastic network.
    #[arg(long)]
    state_size: Option<usize>,
    /// LSTM baseline hidden units.
    #[arg(long)]
    units: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Extra key=value settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Retrain even if a completed run exists.
    #[arg(long)]
    force: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct GridArgs {
    /// Grid file: list keys (h_ops, w_ops, delays, state_sizes, seeds) plus
    /// base settings.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Also train LSTM baselines with these unit counts at every delay.
    #[arg(long, value_delimiter = ',')]
    lstm_units: Vec<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    force: bool,
    /// List the runs without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    state_size: usize,
    #[arg(long, default_value_t = 4)]
    segment_len: usize,
    #[arg(long, default_value_t = 4)]
    delay: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Denominator floor for relative errors.
    #[arg(long, default_value_t = 1e-6)]
    floor: f64,
    /// Check the LSTM baseline with this many units instead.
    #[arg(long)]
    lstm_units: Option<usize>,
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

impl Overrides {
    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            cfg.apply_text(&read_config_file(path)?)?;
        }
        cfg.apply_env(std::env::vars())?;
        self.apply_flags(&mut cfg)?;
        Ok(cfg)
    }

    fn apply_flags(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(p) = &self.corpus {
            cfg.corpus_path = p.display().to_string();
        }
        if let Some(v) = self.h_op {
            cfg.h_op = v;
        }
        if let Some(v) = self.w_op {
            cfg.w_op = v;
        }
        if let Some(v) = self.delay {
            cfg.delay = v;
        }
        if let Some(v) = self.state_size {
            cfg.state_size = v;
        }
        if let Some(v) = self.units {
            cfg.units = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| format!("--set expects KEY=VALUE, got `{pair}`"))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(())
    }
}

fn train(args: RunArgs, model: ModelKind) -> Result<()> {
    let base = RunConfig {
        model,
        ..RunConfig::default()
    };
    let mut cfg = args.overrides.resolve(base)?;
    cfg.model = model;
    cfg.validate()?;
    if args.dry_run {
        print!("{}", cfg.render());
        return Ok(());
    }
    let stream = cfg.load_corpus()?;
    match model {
        ModelKind::Plastic => eprintln!("meta-parameters: {}", meta_param_count(&cfg.network())),
        ModelKind::Lstm => eprintln!("parameters: {}", baseline_param_count(cfg.units)),
    }
    eprintln!("run directory: {}", run_dir(&args.out_dir, &cfg).display());
    let record = run_or_skip(&cfg, &stream, &args.out_dir, args.force);
    if let Some(m) = record.metrics {
        println!(
            "{} steps: early {:.4} final {:.4} nats",
            m.last_step, m.early, m.final_loss
        );
    }
    match record.status {
        RunStatus::Complete => Ok(()),
        RunStatus::Failed(reason) => Err(reason.into()),
    }
}

fn grid(args: GridArgs) -> Result<()> {
    let mut grid = match &args.grid {
        Some(path) => Grid::parse(&read_config_file(path)?)?,
        None => Grid::default(),
    };
    grid.base = args.overrides.resolve(grid.base)?;
    grid.validate()?;
    let mut runs = grid.runs();
    for &units in &args.lstm_units {
        for &delay in &grid.delays {
            for &seed in &grid.seeds {
                runs.push(RunConfig {
                    model: ModelKind::Lstm,
                    units,
                    delay,
                    seed,
                    ..grid.base.clone()
                });
            }
        }
    }
    if args.dry_run {
        for cfg in &runs {
            println!("{}", run_dir(&args.out_dir, cfg).display());
        }
        return Ok(());
    }
    let (records, rows) = run_and_aggregate(&runs, &args.out_dir, args.workers, args.force)?;
    let failed = records.iter().filter(|r| r.status != RunStatus::Complete).count();
    println!(
        "{} runs ({} failed), {} cells; results in {}",
        records.len(),
        failed,
        rows.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let stream = l2r::corpus::fallback_corpus();
    let train = TrainConfig {
        segment_len: args.segment_len,
        delay: args.delay,
        seed: args.seed,
        ..TrainConfig::default()
    };
    if let Some(units) = args.lstm_units {
        let model = LstmBaseline::new(BaselineConfig { units })?;
        let params = model.init_params(args.seed);
        let state = model.zero_state();
        let report = check_model(&model, &params, &state, &stream, &train, args.eps, args.floor)?;
        println!("lstm-{units}: max relative error {:.3e}", report);
        return Ok(());
    }
    let mut worst: f64 = 0.0;
    for h_op in OpKind::ALL {
        for w_op in OpKind::ALL {
            let mut d = args.state_size;
            if (h_op.is_lstm() || w_op.is_lstm()) && d % 2 == 1 {
                d += 1;
            }
            let cfg = NetworkConfig {
                hidden_layers: vec![4],
                neuron_dim: d,
                synapse_dim: d,
                embed_dim: 2,
                kernel_hidden: 4,
                h_op,
                w_op,
                ..NetworkConfig::default()
            };
            let net = PlasticNetwork::new(cfg)?;
            let meta = net.init_meta(args.seed);
            let state = net.init_state(args.seed);
            let err = check_model(&net, &meta, &state, &stream, &train, args.eps, args.floor)?;
            worst = worst.max(err);
            println!("{h_op:>12} x {w_op:<12} d={d}: max relative error {err:.3e}");
        }
    }
    println!("worst: {worst:.3e}");
    Ok(())
}

/// Gradient of one segment's replay loss against central differences.
fn check_model<M: SegmentModel>(
    model: &M,
    params: &l2r::autodiff::ParamStore,
    state: &M::State,
    stream: &l2r::corpus::SymbolStream,
    train: &TrainConfig,
    eps: f64,
    floor: f64,
) -> Result<f64> {
    let t = train.segment_len;
    // online segment late enough that the whole past window exists
    let online_start = train.horizon();
    let mut rng = l2r::trainer::snippet_rng(train.seed);
    let start = l2r::trainer::sample_past(online_start + t, t, train.horizon(), &mut rng);
    let report = grad_check_with_floor(params, eps, floor, |tape| {
        l2r::trainer::segment_loss(model, tape, state, stream, online_start, start, t, train.online_loss)
    })?;
    Ok(report.max_rel_error)
}

fn corpus_stats(path: Option<&Path>) -> Result<()> {
    let stream = match path {
        Some(p) => l2r::corpus::load_corpus_file(p)?,
        None => l2r::corpus::fallback_corpus(),
    };
    println!("length {}", stream.len());
    let hist = stream.histogram();
    for (sym, count) in hist.iter().enumerate().take(ALPHABET) {
        let label = if sym == 26 {
            "_".to_string()
        } else {
            char_of(sym as u8).to_string()
        };
        println!("{label} {count}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => train(args, ModelKind::Plastic),
        Command::Baseline(args) => train(args, ModelKind::Lstm),
        Command::Grid(args) => grid(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Aggregate { out_dir } => collect_runs(&out_dir).map_err(Into::into).and_then(|records| {
            write_runs_csv(&records, &out_dir.join("runs.csv"))?;
            let rows = aggregate(&records);
            write_aggregate_csv(&rows, &out_dir.join("aggregate.csv"))?;
            println!("{} runs, {} cells", records.len(), rows.len());
            Ok(())
        }),
        Command::CorpusStats { corpus } => corpus_stats(corpus.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
