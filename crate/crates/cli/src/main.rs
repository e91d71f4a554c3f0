use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mapformer_core::interaction::ModeChoice;
use mapformer_core::metrics::write_reports;
use mapformer_core::pipeline::{self, RunConfig, DEFAULT_STRIDE};
use mapformer_core::selfcheck::{run_gradcheck, GradcheckOptions};
use mapformer_core::Error;

#[derive(Parser)]
#[command(
    name = "mapformer",
    version,
    about = "Multi-agent motion prediction with pairwise covariances"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Mode closest to ground truth at the final step.
    Best,
    /// Probability-weighted over modes.
    Weighted,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a synthetic dataset.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, log and summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report minSADE, minSFDE and SMR for the model and the constant-velocity baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["3", "5"])]
        horizon: String,
        #[arg(long, default_value_t = DEFAULT_STRIDE)]
        stride: usize,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export dependency scores and scene plots.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_STRIDE)]
        stride: usize,
        #[arg(long, value_enum, default_value_t = Mode::Best)]
        mode: Mode,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Inject a wrong softplus backward to exercise the failure path.
        #[arg(long)]
        corrupt_softplus: bool,
    },
}

fn run(cmd: Cmd) -> Result<bool, Error> {
    match cmd {
        Cmd::Generate { config, out } => {
            pipeline::generate(&RunConfig::load(&config)?, &out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Train { config, out } => {
            let res = pipeline::train(&RunConfig::load(&config)?, &out)?;
            let s = &res.summary;
            println!("epochs {}  train scenes {}", res.log.len(), s.n_train_scenes);
            println!("mean MGNLL {:.4} -> {:.4}", s.first_mgnll, s.final_mgnll);
            if let Some(v) = s.val_mgnll {
                println!("validation MGNLL {v:.4}");
            }
        }
        Cmd::Eval {
            checkpoint,
            data,
            horizon,
            stride,
            out,
        } => {
            let h: f64 = horizon.parse().expect("validated by clap");
            let ev = pipeline::evaluate(&checkpoint, &data, h, stride)?;
            println!(
                "{:<10} {:>8} {:>8} {:>8} {:>8}",
                "model", "horizon", "minSADE", "minSFDE", "SMR"
            );
            for (label, r) in [("mapformer", &ev.model), ("cv", &ev.baseline)] {
                println!(
                    "{label:<10} {:>7}s {:>8.3} {:>8.3} {:>8.3}",
                    r.horizon_s, r.min_sade, r.min_sfde, r.smr
                );
            }
            println!("scenes {}", ev.model.n_scenes);
            if let Some(p) = out {
                write_reports(&p, &[("mapformer", &ev.model), ("cv", &ev.baseline)])?;
            }
        }
        Cmd::Analyze {
            checkpoint,
            data,
            out,
            stride,
            mode,
        } => {
            let choice = match mode {
                Mode::Best => ModeChoice::BestSfde,
                Mode::Weighted => ModeChoice::ProbabilityWeighted,
            };
            let s = pipeline::analyze(&checkpoint, &data, &out, stride, choice)?;
            println!("scenes {}  records {}", s.n_scenes, s.n_records);
            if let Some(a) = s.auc {
                println!("interaction AUC {a:.4}");
            }
        }
        Cmd::Gradcheck { corrupt_softplus } => {
            let report = run_gradcheck(&GradcheckOptions { corrupt_softplus })?;
            print!("{}", report.to_text());
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
