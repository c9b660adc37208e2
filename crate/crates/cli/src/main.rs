use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use kkl_cli::{commands, exit_code, Overrides, RunConfig};
use kkl_core::observer::Variant;

/// Train, benchmark and certify KKL observers.
#[derive(Parser)]
#[command(name = "kkl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a config key by dotted path, e.g. `train.epochs=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the autonomous and forced training datasets.
    GenData,
    /// Train the autonomous encoder and decoder.
    TrainPhase1,
    /// Train the input-injection network on the frozen base.
    TrainObs,
    /// Train the hypernetwork on the frozen base.
    TrainDyn,
    /// Fine-tune the base maps over the input curriculum.
    TrainCurriculum,
    /// Run the SMAPE benchmark on the configured variants.
    Evaluate,
    /// Estimate error-certificate constants and check them on test runs.
    Bound,
    /// Merge SMAPE reports of one or more run directories into one table.
    Report {
        /// Run directories or `smape.json` files; defaults to `--out`.
        inputs: Vec<PathBuf>,
    },
    /// Print the effective configuration.
    Config,
}

fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        set: cli.set,
        out: cli.out,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let train = |v: Variant| -> Result<()> {
        let summary = commands::train(&cfg, v)?;
        for s in &summary.stages {
            println!(
                "{:<28} epochs {:>4}  loss {:.4e} -> {:.4e}",
                s.stage, s.epochs, s.initial_loss, s.final_loss
            );
        }
        Ok(())
    };
    match cli.command {
        Command::GenData => {
            let m = commands::gen_data(&cfg)?;
            println!(
                "autonomous samples {}  forced samples {}",
                m.autonomous.samples, m.forced.samples
            );
        }
        Command::TrainPhase1 => train(Variant::Autonomous)?,
        Command::TrainObs => train(Variant::Obs)?,
        Command::TrainDyn => train(Variant::Dyn)?,
        Command::TrainCurriculum => train(Variant::Curriculum)?,
        Command::Evaluate => {
            let r = commands::evaluate(&cfg)?;
            print!("{}", kkl_core::analysis::table_csv(&[r]));
        }
        Command::Bound => {
            for r in commands::bound(&cfg)? {
                println!(
                    "{:<11} eps_pde {:.3e}  eps_rt {:.3e}  ell_dec {:.3}  asymptotic {:.3e}  holds {}/{}",
                    r.variant.as_str(),
                    r.constants.eps_pde,
                    r.constants.eps_rt,
                    r.constants.ell_dec,
                    r.asymptotic_bound,
                    r.holding,
                    r.trajectories
                );
            }
        }
        Command::Report { inputs } => print!("{}", commands::report(&cfg, &inputs)?),
        Command::Config => println!("{}", serde_json::to_string_pretty(&cfg.to_value())?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
