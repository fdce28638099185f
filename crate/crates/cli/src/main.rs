use std::process::ExitCode;

use ari_core::runner::{self, AblationAxis, ExperimentConfig};
use ari_core::Error;
use clap::{Parser, Subcommand};

/// Lifelong learning experiments with background-attacked training and
/// distance-weighted model fusion.
#[derive(Parser)]
#[command(name = "ari", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file or a built-in recipe name.
    Run {
        config: String,
        /// Override a key, e.g. `--set engine.gamma=0.2`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Train task-specific models serially.
        #[arg(long)]
        deterministic: bool,
    },
    /// Run one experiment per value of an ablation axis.
    Ablate {
        config: String,
        /// mask_form, fusion or background_mode.
        #[arg(long)]
        axis: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run the axis values concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

fn configure(source: &str, overrides: &[String]) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(source)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            overrides,
            deterministic,
        } => {
            let mut cfg = configure(&config, &overrides)?;
            if deterministic {
                cfg.engine.parallel = false;
            }
            let report = runner::run(&cfg)?;
            println!(
                "final average accuracy {:.4}; results in {}",
                report.final_average_accuracy()?,
                report.output_dir.display()
            );
        }
        Command::Ablate {
            config,
            axis,
            overrides,
            parallel,
        } => {
            let cfg = configure(&config, &overrides)?;
            let axis: AblationAxis = axis.parse()?;
            for row in runner::ablate(&cfg, axis, parallel)? {
                println!(
                    "{}={}: final average accuracy {:.4}",
                    axis.as_str(),
                    row.value,
                    row.report.final_average_accuracy()?
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
