use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vmi_core::cli::{attack_stage, evaluate_stage, pretrain_stage, run_experiment, sweep_gamma, ExperimentConfig};

#[derive(Parser)]
#[command(name = "vmi", version, about = "Variational model inversion on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build data, train the target and evaluation classifiers and the generator.
    Pretrain(Common),
    /// Run VMI and the baselines against artifacts from `pretrain`.
    Attack(Common),
    /// Score the samples written by `attack`.
    Evaluate(Common),
    /// pretrain + attack + evaluate.
    Run(Common),
    /// One attack and evaluation per γ, written to sweep.csv.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated γ values; overrides `gammas` in the config.
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> vmi_core::Result<()> {
    let (common, stage) = match command {
        Command::Pretrain(c) => (c, "pretrain"),
        Command::Attack(c) => (c, "attack"),
        Command::Evaluate(c) => (c, "evaluate"),
        Command::Run(c) => (c, "run"),
        Command::Sweep(c) => (c, "sweep"),
    };
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(g) = common.gammas {
        cfg.gammas = g;
    }
    cfg.validate()?;
    let out = cfg.output_dir(common.out.as_deref())?;
    match stage {
        "pretrain" => pretrain_stage(&cfg, &out).map(|_| ()),
        "attack" => attack_stage(&cfg, &out),
        "evaluate" => {
            for r in evaluate_stage(&cfg, &out)? {
                let m = &r.report.mean;
                let gamma = r.gamma.map(|g| format!(" gamma={g}")).unwrap_or_default();
                println!(
                    "{}{gamma}: accuracy {:.3} precision {:.3} recall {:.3} density {:.3} coverage {:.3} diversity {:.3} fid {:.4}",
                    r.method, m.accuracy, m.precision, m.recall, m.density, m.coverage, m.diversity, r.report.fid
                );
            }
            Ok(())
        }
        "run" => {
            for r in run_experiment(&cfg, &out)? {
                let m = &r.report.mean;
                let gamma = r.gamma.map(|g| format!(" gamma={g}")).unwrap_or_default();
                println!(
                    "{}{gamma}: accuracy {:.3} precision {:.3} recall {:.3} density {:.3} coverage {:.3} diversity {:.3} fid {:.4}",
                    r.method, m.accuracy, m.precision, m.recall, m.density, m.coverage, m.diversity, r.report.fid
                );
            }
            Ok(())
        }
        _ => {
            let gammas = cfg.gammas.clone();
            for r in sweep_gamma(&cfg, &gammas, &out)? {
                println!(
                    "gamma={}: accuracy {:.3} diversity {:.3} fid {:.4} kl {:.4} entropy {:.4}",
                    r.gamma, r.accuracy, r.diversity, r.fid, r.kl_final, r.entropy_final
                );
            }
            Ok(())
        }
    }
}
