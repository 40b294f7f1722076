use std::path::PathBuf;
use std::process::ExitCode;

use cdecay::model::ParamId;
use cdecay::quant::Calibration;
use cdecay_cli::diagnose::cmd_diagnose;
use cdecay_cli::run::{apply_overrides, cmd_eval, cmd_gradcheck, cmd_quantize, cmd_train, open_run, Overrides, SCHEMES};
use cdecay_cli::sweep::{cmd_sweep, load_sweep};
use cdecay_cli::{load_config, CliError, CliResult};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cdecay", version, about = "Colinearity decay experiments on a desk-scale ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment or sweep config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed.
    Train(Common),
    /// FP accuracy, activation maxima and pair energy of a trained run.
    Eval(Common),
    /// W4A4 fake quantization of a trained run.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: Option<Calibration>,
    },
    /// Alignment, surrogate and direction-zeroing reports.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        zero_top_k: Option<usize>,
        #[arg(long, default_value = "percentile")]
        scheme: Calibration,
    },
    /// Finite-difference checks on a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Add 1e-2 to one analytic gradient (fault injection).
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
    /// Run a grid of configs and aggregate summaries into one CSV.
    Sweep(Common),
}

fn require_config(c: &Common) -> CliResult<PathBuf> {
    c.config
        .clone()
        .ok_or_else(|| CliError::Config("--config is required".into()))
}

fn open(c: &Common) -> CliResult<cdecay_cli::run::OpenRun> {
    let dir = match (&c.run_dir, &c.config) {
        (Some(d), _) => d.clone(),
        (None, Some(p)) => load_config(p)?.run_dir,
        (None, None) => return Err(CliError::Config("--run-dir or --config is required".into())),
    };
    open_run(&dir, c.config.as_deref(), c.seed)
}

fn print<T: serde::Serialize>(v: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => {
            let mut cfg = load_config(&require_config(&c)?)?;
            apply_overrides(&mut cfg, &Overrides { run_dir: c.run_dir.clone(), seed: c.seed });
            print(&cmd_train(&cfg)?)
        }
        Command::Eval(c) => print(&cmd_eval(&open(&c)?)?),
        Command::Quantize { common, scheme } => {
            let schemes: Vec<Calibration> = scheme.map(|s| vec![s]).unwrap_or_else(|| SCHEMES.to_vec());
            print(&cmd_quantize(&open(&common)?, &schemes)?)
        }
        Command::Diagnose { common, zero_top_k, scheme } => {
            let r = cmd_diagnose(&open(&common)?, zero_top_k, scheme)?;
            print(&r.intervention)?;
            print(&r.max_act)
        }
        Command::Gradcheck { common, perturb } => {
            let mut cfg = load_config(&require_config(&common)?)?;
            apply_overrides(&mut cfg, &Overrides { run_dir: common.run_dir.clone(), seed: common.seed });
            let perturb = perturb
                .map(|p| p.parse::<ParamId>().map(|id| (id, 1e-2)))
                .transpose()
                .map_err(|e| CliError::Config(format!("--perturb: {e}")))?;
            let r = cmd_gradcheck(&cfg, perturb)?;
            for c in &r.model {
                println!("{:<28} rel {:.3e} {}", c.name, c.rel_error, if c.passed { "ok" } else { "FAIL" });
            }
            if r.passed {
                Ok(())
            } else {
                let failed: Vec<String> = r.model.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
                Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Sweep(c) => {
            let mut sweep = load_sweep(&require_config(&c)?)?;
            if let Some(d) = c.run_dir {
                sweep.run_dir = d;
            }
            if let Some(s) = c.seed {
                sweep.seeds = vec![s];
            }
            let out = cmd_sweep(&sweep)?;
            eprintln!("{} rows, {} failures", out.rows.len(), out.failures.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
