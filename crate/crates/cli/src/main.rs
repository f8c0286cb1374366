use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lse_cli::commands::{self, CliError, CliResult, Common};
use lse_cli::service::{self, ServeConfig};

#[derive(Debug, Parser)]
#[command(name = "lse", version, about = "Linear semantic extraction experiments")]
struct Cli {
    /// Generator config (TOML). Defaults to the built-in config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a probe on generated samples.
    TrainProbe {
        /// lse, nse-1 or nse-2.
        #[arg(long, default_value = "lse")]
        kind: String,
        /// desk, paper, or a multiple of the desk schedule.
        #[arg(long, default_value = "desk")]
        scale: String,
    },
    /// Score a probe archive (or `zero`) against the analytic segmenter.
    EvalProbe {
        #[arg(long)]
        probe: String,
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    /// Train an LSE from 1, 4, 8 or 16 annotated samples.
    FewShot {
        #[arg(long)]
        shots: usize,
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    /// Class centers and the cosine confusion matrix.
    Geometry {
        #[arg(long, default_value = "desk")]
        scale: String,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Semantic image editing trials.
    Sie {
        #[arg(long)]
        probe: PathBuf,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        /// JSON array of {"seed", "target"?, "settings"?} rows.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Semantic-conditional sampling.
    Scs {
        #[arg(long)]
        probe: PathBuf,
        #[arg(long, default_value_t = 10)]
        samples: usize,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        workers: usize,
    },
}

fn print(value: &impl serde::Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let common = Common {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::TrainProbe { kind, scale } => print(&commands::train_probe(&common, &kind, &scale)?),
        Command::EvalProbe { probe, samples } => {
            let report = commands::eval_probe(&common, &probe, samples)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::FewShot { shots, samples } => print(&commands::few_shot(&common, shots, samples)?),
        Command::Geometry { scale, samples } => print(&commands::geometry(&common, &scale, samples)?),
        Command::Sie { probe, samples, manifest } => {
            print(&commands::sie(&common, &probe, samples, manifest.as_deref())?)
        }
        Command::Scs { probe, samples } => print(&commands::scs(&common, &probe, samples)?),
        Command::Serve { addr, probe, workers } => {
            let cfg = ServeConfig {
                generator: common.generator_config()?,
                probe,
                seed: common.seed,
                workers,
            };
            let runtime = tokio::runtime::Runtime::new().map_err(|source| CliError::Io {
                path: PathBuf::from("<runtime>"),
                source,
            })?;
            runtime.block_on(service::serve(cfg, &addr)).map_err(|source| CliError::Io {
                path: PathBuf::from(addr),
                source,
            })
        }
    }
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
