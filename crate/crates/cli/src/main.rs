mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prmnav_core::engine::StrategyKind;
use prmnav_core::reward::TrainConfig;
use prmnav_core::run::EvalMode;
use prmnav_core::MatchConfig;

use commands::{AnnotateSource, Failure};
use config::{Overrides, RunConfig};

/// Reward-guided GUI navigation over scripted simulators.
#[derive(Parser)]
#[command(name = "prmnav", version)]
struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    workspace: PathBuf,
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a strategy over a task suite and write a run directory.
    Run(RunArgs),
    /// Label trajectories into reward training samples.
    Annotate(AnnotateArgs),
    /// Fit the surrogate reward model to labeled samples.
    TrainReward(TrainArgs),
    /// Compare run directories over the same suite.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Run directory name; defaults to the strategy label.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_parser = parse_kind)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    pass_n: Option<usize>,
    #[arg(long)]
    max_rounds: Option<u32>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<EvalMode>,
    /// Comma-separated episode seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated task ids.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    /// Worker threads.
    #[arg(long)]
    parallel: Option<usize>,
}

fn parse_kind(s: &str) -> Result<StrategyKind, String> {
    s.parse::<StrategyKind>().map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    match s {
        "dynamic" => Ok(EvalMode::Dynamic),
        "static" => Ok(EvalMode::Static),
        _ => Err(format!("unknown mode {s:?} (dynamic | static)")),
    }
}

#[derive(Args)]
struct MatchArgs {
    /// Normalized distance threshold for click matching.
    #[arg(long)]
    distance_threshold: Option<f64>,
    /// Box expansion factor for click matching.
    #[arg(long)]
    box_scale: Option<f64>,
}

impl MatchArgs {
    fn config(&self) -> MatchConfig {
        let mut c = MatchConfig::default();
        if let Some(d) = self.distance_threshold {
            c.click_distance_fraction = d;
        }
        if let Some(s) = self.box_scale {
            c.box_expand_factor = s;
        }
        c
    }
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    fixture: PathBuf,
    /// Run directory whose trajectories are labeled.
    #[arg(long, conflicts_with = "human_demo", required_unless_present = "human_demo")]
    run: Option<PathBuf>,
    /// Label the fixture's demonstrations instead (all positive).
    #[arg(long)]
    human_demo: bool,
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    matching: MatchArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// JSONL samples from `annotate`.
    #[arg(long)]
    samples: PathBuf,
    /// Output parameter file.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch loss curve.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Also write the comparison as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn dispatch(cli: Cli) -> commands::CmdResult {
    let root = cli.workspace;
    match cli.command {
        Command::Run(a) => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(&config::resolve_path(&root, p)).map_err(Failure::Input)?,
                None => RunConfig::default(),
            };
            cfg.apply(Overrides {
                fixture: a.fixture,
                out_dir: a.out_dir,
                name: a.name,
                strategy: a.strategy,
                k: a.k,
                pass_n: a.pass_n,
                max_rounds: a.max_rounds,
                mode: a.mode,
                seeds: a.seeds,
                tasks: a.tasks,
                parallel: a.parallel,
            });
            commands::run(cfg, &root)
        }
        Command::Annotate(a) => {
            let source = match a.run {
                Some(d) => AnnotateSource::Run(d),
                None => AnnotateSource::HumanDemo,
            };
            commands::annotate(&root, &a.fixture, source, &a.out, &a.matching.config())
        }
        Command::TrainReward(a) => {
            let d = TrainConfig::default();
            let cfg = TrainConfig {
                lr: a.lr.unwrap_or(d.lr),
                epochs: a.epochs.unwrap_or(d.epochs),
                seed: a.seed.unwrap_or(d.seed),
                ..d
            };
            commands::train_reward(&root, &a.samples, &a.out, a.loss_csv.as_deref(), &cfg)
        }
        Command::Report(a) => commands::report(&root, &a.dirs, a.csv.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.exit_code())
        }
    }
}
