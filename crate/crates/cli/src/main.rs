use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use searchforge_core::config::{ConfigError, PipelineConfig};
use searchforge_core::eval::MetricSet;
use searchforge_core::pipeline::{
    run_command, BackendMode, BackendSpec, Backends, Command, PipelineError, RunOptions, StageStatus,
};

#[derive(Debug, Parser)]
#[command(name = "searchforge", version, about = "Build search-agent training data from QA corpora")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true, env = "SEARCHFORGE_CONFIG")]
    config: Option<PathBuf>,
    /// Use the built-in simulated models and search fixture (default).
    #[arg(long, global = true, conflicts_with_all = ["replay", "live"])]
    mock: bool,
    /// Serve all model and search calls from a recorded archive.
    #[arg(long, global = true, value_name = "DIR", conflicts_with = "live")]
    replay: Option<PathBuf>,
    /// Call the configured HTTP endpoints.
    #[arg(long, global = true)]
    live: bool,
    /// Archive every model and search call under DIR for later replay.
    #[arg(long, global = true, value_name = "DIR", conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Rerun even when the manifest says outputs are current.
    #[arg(long, global = true)]
    force: bool,
    /// Output directory for artifacts and manifests.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for annotation and synthesis.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// Print the merged config as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Log verbosity; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    F1,
    Judge,
    Stages,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Label corpus questions with a domain and keywords.
    Annotate {
        /// QA corpus file; the bundled demo corpus is used when unset.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Pick a domain-balanced, keyword-diverse subset.
    Sample {
        /// Number of queries to select.
        #[arg(short = 'n', long)]
        target: Option<usize>,
    },
    /// Run the reason-search-summarize loop for every selected query.
    Synthesize {
        /// Candidate trajectories per query.
        #[arg(long)]
        candidates: Option<usize>,
    },
    /// Filter candidates and keep one trajectory per question.
    Curate {
        /// Fall back to the judge model when F1 says incorrect.
        #[arg(long)]
        judge: bool,
    },
    /// Write loss-masked SFT examples from curated trajectories.
    ExportSft,
    /// Pair strong trajectories with weak-model failures.
    ExportDpo {
        /// Trajectories produced by the weaker model.
        #[arg(long)]
        weak: Option<PathBuf>,
    },
    /// Score trajectories with the RL reward.
    Reward,
    /// Report answer quality and behaviour statistics.
    Eval {
        #[arg(long, value_delimiter = ',', default_values = ["f1", "stages"])]
        metrics: Vec<Metric>,
    },
    /// Summarize trajectories.
    Stats,
}

impl Cmd {
    fn command(&self) -> Command {
        match self {
            Self::Annotate { .. } => Command::Annotate,
            Self::Sample { .. } => Command::Sample,
            Self::Synthesize { .. } => Command::Synthesize,
            Self::Curate { .. } => Command::Curate,
            Self::ExportSft => Command::ExportSft,
            Self::ExportDpo { .. } => Command::ExportDpo,
            Self::Reward => Command::Reward,
            Self::Eval { .. } => Command::Eval,
            Self::Stats => Command::Stats,
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, ConfigError> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(out) = &g.out {
        cfg.paths.output_dir = out.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(c) = g.concurrency {
        cfg.concurrency = c;
    }
    match &cli.command {
        Cmd::Annotate { corpus: Some(p) } => cfg.paths.corpus = Some(p.clone()),
        Cmd::Sample { target: Some(n) } => cfg.sampling.target = *n,
        Cmd::Synthesize { candidates: Some(n) } => cfg.synthesis.candidates_per_query = *n,
        Cmd::Curate { judge: true } => cfg.curation.use_judge = true,
        _ => {}
    }
    Ok(cfg)
}

fn backend_spec(g: &GlobalArgs) -> BackendSpec {
    let mode = match (&g.replay, g.live) {
        (Some(dir), _) => BackendMode::Replay(dir.clone()),
        (None, true) => BackendMode::Live,
        (None, false) => BackendMode::Mock,
    };
    BackendSpec { mode, record: g.record.clone() }
}

fn run_options(cli: &Cli) -> RunOptions {
    let mut opts = RunOptions { force: cli.global.force, ..RunOptions::default() };
    match &cli.command {
        Cmd::ExportDpo { weak } => opts.weak = weak.clone(),
        Cmd::Eval { metrics } => {
            opts.metrics = MetricSet {
                f1: metrics.contains(&Metric::F1),
                judge: metrics.contains(&Metric::Judge),
                stages: metrics.contains(&Metric::Stages),
            }
        }
        _ => {}
    }
    opts
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_env("SEARCHFORGE_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    if cli.global.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let spec = backend_spec(&cli.global);
    let opts = run_options(cli);
    let cmd = cli.command.command();
    let report = run_command(cmd, &cfg, &spec, &opts, &|| Backends::build(&cfg, &spec))?;
    match report.status {
        StageStatus::Skipped => println!("{cmd}: up to date (use --force to rerun)"),
        StageStatus::Completed => println!("{cmd}: {}", report.summary.trim_end()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let err = anyhow::Error::new(e);
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
