use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qornn::fxp::OverflowPolicy;
use qornn_cli::analyze::{cmd_analyze_ortho, AnalyzeArgs};
use qornn_cli::calibrate::{cmd_calibrate_fxp, CalibrateArgs};
use qornn_cli::error::{CliError, CliResult, EXIT_OK};
use qornn_cli::report::cmd_report;
use qornn_cli::run::{cmd_eval, cmd_train};
use qornn_cli::sweep::{cmd_sweep, SweepArgs};
use qornn_cli::ExperimentConfig;

#[derive(Parser)]
#[command(name = "qornn", version, about = "Quantized orthogonal recurrent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        outdir: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Evaluate a run directory on its test set.
    Eval {
        run: PathBuf,
        /// Quantize the deployed weights to this many bits first.
        #[arg(long)]
        ptq_bits: Option<u32>,
    },
    /// Quantize random orthogonal matrices and measure how orthogonal they stay.
    AnalyzeOrtho {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6,7,8")]
        bits: Vec<u32>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,10,50,100,200")]
        powers: Vec<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/ortho")]
        outdir: PathBuf,
    },
    /// Calibrate activations of a ReLU run and export the integer model.
    CalibrateFxp {
        run: PathBuf,
        #[arg(long)]
        k_a: u32,
        #[arg(long)]
        k_i: Option<u32>,
        /// Clamp hidden codes instead of failing when α_h is exceeded.
        #[arg(long)]
        saturate: bool,
        #[arg(long)]
        calibration_samples: Option<usize>,
    },
    /// Merge run reports into one table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a grid of strategies, bitwidths and seeds.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        bits: Vec<u32>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "runs")]
        outdir: PathBuf,
    },
}

fn print_json<T: serde::Serialize>(v: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, outdir, run_id } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = cmd_train(&cfg, &outdir, run_id.as_deref())?;
            for m in &out.history {
                eprintln!("epoch {:>3}  train {:.6e}  eval {:.6e}  metric {:.6}", m.epoch, m.train_loss, m.eval_loss, m.eval_metric);
            }
            eprintln!("run directory: {}", out.dir.display());
            print_json(&out.report)
        }
        Command::Eval { run, ptq_bits } => print_json(&cmd_eval(&run, ptq_bits)?),
        Command::AnalyzeOrtho { n, bits, samples, powers, seed, outdir } => {
            let summary = cmd_analyze_ortho(&AnalyzeArgs { n, bits, samples, powers, seed }, &outdir)?;
            print_json(&summary)
        }
        Command::CalibrateFxp { run, k_a, k_i, saturate, calibration_samples } => {
            let args = CalibrateArgs {
                k_a,
                k_i,
                overflow: if saturate { OverflowPolicy::Saturate } else { OverflowPolicy::Error },
                calibration_samples,
            };
            let out = cmd_calibrate_fxp(&run, &args)?;
            eprintln!("exported to {}", out.dir.display());
            print_json(&out.report)
        }
        Command::Report { runs, out } => {
            let table = cmd_report(&runs)?;
            if let Some(path) = out {
                table.write_csv(&path)?;
            }
            print!("{}", table.markdown());
            Ok(())
        }
        Command::Sweep { config, strategies, bits, seeds, jobs, outdir } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", config.display())))?;
            let dirs = cmd_sweep(&text, &SweepArgs { strategies, bits, seeds, jobs }, &outdir)?;
            for d in dirs {
                println!("{}", d.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
