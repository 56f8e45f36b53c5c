use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use srelasso::DebiasMethod;

mod commands;
mod config;
mod failure;

use config::{Command, Overrides, PenaltyChoice, RunConfig, ScenarioKind};
use failure::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "srelasso", version, about = "LASSO for systems of regression equations")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Choose the penalty level and loadings, write plan.json.
    Tune(Common),
    /// Fit every equation with the tuned penalty.
    Estimate(Common),
    /// De-biased estimates, bootstrap confidence intervals and step-down tests.
    Infer(Common),
    /// Monte-Carlo experiment.
    Simulate(SimulateArgs),
    /// Hold-out scan over candidate block sizes.
    ScanBlockSize(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long = "b-n")]
    b_n: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    penalty: Option<PenaltyArg>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long = "block-grid", value_delimiter = ',')]
    block_grid: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    LsIv,
    LadIv,
    DoubleLs,
    DoubleLad,
}

#[derive(Clone, Copy, ValueEnum)]
enum PenaltyArg {
    Joint,
    PerEquation,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Iid,
    Dep,
    Infer,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            threads: self.threads,
            out: self.out.clone(),
            alpha: self.alpha,
            c: self.c,
            b_n: self.b_n,
            draws: self.draws,
            method: self.method.map(|m| match m {
                MethodArg::LsIv => DebiasMethod::LsIv,
                MethodArg::LadIv => DebiasMethod::LadIv,
                MethodArg::DoubleLs => DebiasMethod::DoubleLs,
                MethodArg::DoubleLad => DebiasMethod::DoubleLad,
            }),
            penalty: self.penalty.map(|p| match p {
                PenaltyArg::Joint => PenaltyChoice::Joint,
                PenaltyArg::PerEquation => PenaltyChoice::PerEquation,
                PenaltyArg::Gaussian => PenaltyChoice::Gaussian,
            }),
            ..Overrides::default()
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let (cmd, common, overrides) = match &cli.command {
        Cmd::Tune(c) => (Command::Tune, c, c.overrides()),
        Cmd::Estimate(c) => (Command::Estimate, c, c.overrides()),
        Cmd::Infer(c) => (Command::Infer, c, c.overrides()),
        Cmd::ScanBlockSize(c) => (Command::ScanBlockSize, c, c.overrides()),
        Cmd::Simulate(s) => {
            let mut o = s.common.overrides();
            o.scenario = s.scenario.map(|k| match k {
                ScenarioArg::Iid => ScenarioKind::Iid,
                ScenarioArg::Dep => ScenarioKind::Dep,
                ScenarioArg::Infer => ScenarioKind::Infer,
            });
            o.rho = s.rho;
            o.reps = s.reps;
            o.block_grid = s.block_grid.clone();
            (Command::Simulate, &s.common, o)
        }
    };
    let mut cfg = RunConfig::load(&common.config)?;
    cfg.apply(&overrides, cmd)?;
    if let Some(t) = cfg.threads {
        if t == 0 {
            return Err(CliError::config("threads: must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::config(format!("threads: {e}")))?;
    }
    match cmd {
        Command::Tune => commands::tune(&cfg),
        Command::Estimate => commands::estimate(&cfg),
        Command::Infer => commands::infer(&cfg),
        Command::Simulate => commands::simulate(&cfg),
        Command::ScanBlockSize => commands::scan(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
