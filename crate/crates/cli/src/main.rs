use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfacs_core::config::ExperimentConfig;
use dfacs_core::parallel::Execution;
use dfacs_core::pipeline;
use dfacs_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dfacs", version, about = "Data-driven drag-free satellite identification and control")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Shrink trajectory count and durations by this factor (0, 1].
    #[arg(long, global = true)]
    scale: Option<f64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Number of trajectories override.
    #[arg(long, global = true)]
    n_traj: Option<usize>,

    /// Trajectory duration override, s.
    #[arg(long, global = true)]
    duration: Option<f64>,

    /// Run data generation and regression on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Simulate the excitation dataset.
    Generate,
    /// Identify lifted linear models from the training split.
    Fit,
    /// Score multi-step prediction on the validation split.
    Validate,
    /// Run the closed-loop capture simulation.
    Control,
    /// Summarise all artifacts.
    Report,
    /// Every stage in order.
    All,
    /// Print the resolved configuration as TOML.
    Config,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(n) = cli.n_traj {
        cfg.dataset.n_traj = n;
    }
    if let Some(d) = cli.duration {
        cfg.dataset.duration = d;
    }
    if let Some(f) = cli.scale {
        cfg = cfg.scaled(f)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = resolve(cli)?;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Generate => {
            let ds = pipeline::cmd_generate(&cfg, exec)?;
            println!(
                "generated {} trajectories in {}",
                ds.trajectories.len(),
                pipeline::Paths::new(&cfg.output_dir).dataset().display()
            );
        }
        Command::Fit => {
            for (sub, model) in pipeline::cmd_fit(&cfg, exec)? {
                let nonzero = model.xi.iter().filter(|v| **v != 0.0).count();
                println!("{}: {nonzero}/{} nonzero coefficients", sub.name(), model.xi.len());
            }
        }
        Command::Validate => {
            print!("{}", pipeline::cmd_validate(&cfg)?.to_csv());
        }
        Command::Control => {
            let run = pipeline::cmd_control(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&run.summary).expect("summary serializes"));
        }
        Command::Report => print!("{}", pipeline::cmd_report(&cfg)?),
        Command::All => print!("{}", pipeline::run_all(&cfg, exec)?),
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
