use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use elm_mpc::commands::{self, Overrides};
use elm_mpc::config::RunConfig;
use elm_mpc::Result;

/// Identify a plant with an extreme learning machine and control it with
/// linearized MPC.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error,
/// 4 numerical failure, 5 I/O error.
#[derive(Parser)]
#[command(name = "elm-mpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Excite the plant with A-PRBS and write train/test/msap CSVs.
    GenData(Common),
    /// Select hyperparameters and fit the model.
    Train(Common),
    /// One-step and multi-step prediction error of a trained model.
    Eval(Common),
    /// Closed-loop tracking scenario.
    Simulate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        Overrides {
            seed: self.seed,
            out_dir: self.out_dir.clone(),
        }
        .apply(&mut cfg);
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            for p in commands::cmd_gen_data(&c.load()?)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train(c) => {
            for p in commands::cmd_train(&c.load()?)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Eval(c) => {
            let (m, files) = commands::cmd_eval(&c.load()?)?;
            println!("osap_rmse = {:.6}", m.osap_rmse);
            println!("msap_rmse = {:.6} (horizon {})", m.msap_rmse, m.horizon);
            for p in files {
                println!("wrote {}", p.display());
            }
        }
        Command::Simulate(c) => {
            let out = commands::cmd_simulate(&c.load()?)?;
            for p in out.files {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
