use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latent_flow::config::ExperimentConfig;
use latent_flow::pipeline::{Pipeline, Summary};
use latent_flow::Error;

/// Latent flow matching experiments: train, invert, probe, transfer, isolate.
#[derive(Parser, Debug)]
#[command(name = "latent-flow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: the config's `out_dir`, else `runs/<experiment>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Tiny budgets that exercise every stage in seconds.
    #[arg(long, global = true)]
    smoke: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Full pipeline: train both models, run every analysis, write summary.json.
    Run,
    /// Train the VAE and save its checkpoint.
    TrainVae,
    /// Train the flow on VAE latents (or raw data) and save its checkpoint.
    TrainFlow,
    /// Invert held-out samples with and without conditioning.
    Invert,
    /// Linear probes and class-structure scores along the inversions.
    Probe,
    /// Class-changing style transfer.
    Transfer,
    /// Feature-isolation residuals.
    Isolate,
    /// Every analysis from saved checkpoints, written to summary.json.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        e if e.is_numeric() => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config {
        field: "--config".into(),
        message: "a config file is required".into(),
    })?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.smoke {
        config = config.smoke();
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(config.experiment.as_str()));
    let pipeline = Pipeline::new(config, &out)?;

    match cli.command {
        Command::Run => print_summary(&pipeline.run()?, &out),
        Command::Report => print_summary(&pipeline.report()?, &out),
        Command::TrainVae => match pipeline.train_vae()? {
            Some(_) => println!("saved {}", out.join("checkpoints/vae.ckpt").display()),
            None => println!("{} has no VAE stage", pipeline.config().experiment.as_str()),
        },
        Command::TrainFlow => {
            let flow = pipeline.train_flow()?;
            println!(
                "saved {} ({} parameters)",
                out.join("checkpoints/flow.ckpt").display(),
                flow.param_count()
            );
        }
        Command::Invert => {
            let inv = pipeline.invert()?;
            println!("inverted {} samples into {}", inv.z1.rows(), out.join("trajectories").display());
        }
        Command::Probe => {
            let (probes, structure) = pipeline.probe()?;
            for report in [&probes.conditional, &probes.unconditional] {
                for curve in &report.curves {
                    println!(
                        "{:<13} {:<2} R2 t=0 {:.3}  t=1 {:.3}",
                        report.flow_kind.as_str(),
                        curve.target,
                        curve.r2_mean[0],
                        curve.r2_mean[curve.r2_mean.len() - 1]
                    );
                }
            }
            println!(
                "class accuracy: data {:.3}, unconditional t=0 {:.3}, conditional t=0 {:.3}",
                structure.data, structure.unconditional_t0, structure.conditional_t0
            );
        }
        Command::Transfer => {
            let t = pipeline.transfer()?;
            println!("{} transfers, target-class accuracy {:.3}", t.n, t.class_accuracy);
            if let Some(mae) = t.b_mae {
                println!("b mean absolute error {mae:.4}");
            }
        }
        Command::Isolate => {
            let s = pipeline.isolate()?;
            println!(
                "{} residuals ({} -> {}), median cosine {:.4}",
                s.n, s.source_class, s.reference_class, s.median_cosine
            );
        }
    }
    Ok(())
}

fn print_summary(summary: &Summary, out: &std::path::Path) {
    let s = &summary.structure;
    println!(
        "class accuracy: data {:.3}, unconditional t=0 {:.3}, conditional t=0 {:.3}",
        s.data, s.unconditional_t0, s.conditional_t0
    );
    let rt = &summary.roundtrip;
    for (n, e) in rt.steps.iter().zip(&rt.median_relative_error) {
        println!("round trip n_steps={n}: median relative error {e:.3e}");
    }
    println!(
        "transfer accuracy {:.3}, isolation median cosine {:.4}",
        summary.transfer.class_accuracy, summary.isolation.median_cosine
    );
    println!("wrote {}", out.join("summary.json").display());
}
