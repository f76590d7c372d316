use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unmix_cli::commands::{cmd_evaluate, cmd_separate, cmd_simulate};
use unmix_cli::config::PipelineConfig;
use unmix_cli::CliResult;

/// Log verbosity, in `env_logger` filter syntax.
const LOG_ENV: &str = "UNMIX_LOG";

#[derive(Parser)]
#[command(name = "unmix", version, about = "Multichannel continuous speech separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set mode=beamforming`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<PipelineConfig> {
        PipelineConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene spec into a mixture, source images and truth metadata.
    Simulate {
        scene: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Separate a multichannel WAV into two output streams.
    Separate {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Directory holding truth.json for the oracle mask provider.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score separated streams against simulated ground truth.
    Evaluate {
        estimates: PathBuf,
        truth: PathBuf,
        /// Report path; defaults to report.json in the estimates directory.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    PrintConfig {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate { scene, out } => {
            for path in cmd_simulate(&scene, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Separate { input, out, truth, config } => {
            let manifest = cmd_separate(&config.load()?, &input, &out, truth.as_deref())?;
            for o in &manifest.outputs {
                println!("{}", out.join(&o.file).display());
            }
        }
        Command::Evaluate { estimates, truth, out } => {
            let report = cmd_evaluate(&estimates, &truth, out.as_deref())?;
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.2} dB"));
            for s in &report.scenes {
                println!("{}\tSI-SDR {}\timprovement {}", s.scene, show(s.report.mean_si_sdr()), show(s.report.mean_improvement()));
            }
            println!(
                "aggregate over {} scene(s): SI-SDR {}, improvement {}",
                report.aggregate.scenes,
                show(report.aggregate.mean_si_sdr),
                show(report.aggregate.mean_si_sdr_improvement)
            );
        }
        Command::PrintConfig { config } => print!("{}", config.load()?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
