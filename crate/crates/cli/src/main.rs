use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use skelevision_cli::{cmd_attack, cmd_eval, cmd_report, cmd_sweep, cmd_synth, cmd_train, Context};
use skelevision_core::config::ExperimentConfig;
use skelevision_core::Error;

/// Person tracking with a keypoint auxiliary task, and patch attacks on it.
///
/// Settings come from the built-in defaults, then --config, then the
/// SKELEVISION_DATA environment variable (data root), then flags.
#[derive(Parser, Debug)]
#[command(name = "skelevision", version)]
struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps and attack cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory for runs, attacks and reports.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset to the data root.
    Synth,
    /// Train the configured model.
    Train,
    /// Train one model per sweep.lambdas value.
    Sweep,
    /// Track the test sequences with every sweep model.
    Eval,
    /// Attack every sweep model on the test sequences.
    Attack,
    /// Tables and charts from stored attack results.
    Report,
}

fn resolve(cli: &Cli) -> Result<Context, Error> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(root) = std::env::var_os("SKELEVISION_DATA") {
        config = config.with_data_root(root.into());
    }
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    config.validate()?;
    Ok(Context {
        config,
        out: cli.out.clone(),
        jobs: cli.jobs.max(1),
    })
}

fn run(cli: &Cli) -> Result<(), Error> {
    let ctx = resolve(cli)?;
    match cli.command {
        Command::Synth => cmd_synth(&ctx)?,
        Command::Train => {
            let r = cmd_train(&ctx)?;
            let e = &r.epochs[r.selected_epoch];
            println!(
                "run {}: selected epoch {} (val mIoU {}), checkpoint {}",
                &r.digest[..16],
                e.epoch,
                e.val_miou.map_or("-".into(), |v| format!("{v:.4}")),
                r.checkpoint
                    .as_ref()
                    .map_or("-".into(), |p| p.display().to_string())
            );
        }
        Command::Sweep => {
            for r in cmd_sweep(&ctx)? {
                let e = &r.epochs[r.selected_epoch];
                println!(
                    "lambda_k {}: run {} val mIoU {}",
                    r.config.loss.lambda_k,
                    &r.digest[..16],
                    e.val_miou.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
        }
        Command::Eval => {
            for m in cmd_eval(&ctx)?.models {
                println!("{:<10} mean mIoU {:.4}", m.model, m.mean_miou);
                for s in &m.sequences {
                    println!("  {:<12} {:.4}", s.sequence, s.miou);
                }
            }
        }
        Command::Attack => {
            let (table, _) = cmd_attack(&ctx)?;
            print!("{}", table.to_text());
        }
        Command::Report => {
            let files = cmd_report(&ctx)?;
            for p in files.tables.iter().chain(&files.steps_charts) {
                println!("{}", p.display());
            }
            println!("{} per-frame IoU charts", files.iou_charts.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
