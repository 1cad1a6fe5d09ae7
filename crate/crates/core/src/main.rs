use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use calprio::expcli::{cmd_pretrain_target, cmd_report, cmd_sweep, cmd_train, parse_config, parse_grid, run_dir};

#[derive(Parser)]
#[command(name = "calprio", version, about = "Calibration-aware sample prioritization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: config `output_dir`, else runs/<run id>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every point of a hyperparameter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// Sweep directory (default: config `output_dir`, else runs/sweep).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit plot-ready CSVs for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Train a target model on the full pool for guided selection.
    PretrainTarget {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> calprio::Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let c = parse_config(&config)?;
            let dir = run_dir(&c, out.as_deref())?;
            let o = cmd_train(&c, &dir)?;
            println!(
                "{}: test accuracy {:.4}, test ECE {:.4} -> {}",
                o.manifest.run_id,
                o.report.test_accuracy,
                o.report.test_ece,
                dir.display()
            );
        }
        Command::Sweep { config, grid, out } => {
            let c = parse_config(&config)?;
            let g = parse_grid(&grid)?;
            let root = out.or_else(|| c.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs/sweep"));
            let cells = cmd_sweep(&c, &g, &root)?;
            let failed = cells.iter().filter(|c| c.error.is_some()).count();
            println!("{} cells, {failed} failed -> {}", cells.len(), root.display());
        }
        Command::Report { run } => {
            let b = cmd_report(&run)?;
            for f in &b.files {
                println!("{}", f.display());
            }
            for w in &b.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::PretrainTarget { config, out } => {
            let c = parse_config(&config)?;
            let dir = match (out, &c.output_dir) {
                (Some(p), _) => p,
                (None, Some(p)) => p.clone(),
                (None, None) => PathBuf::from("runs/target"),
            };
            let o = cmd_pretrain_target(&c, &dir)?;
            println!(
                "target checkpoint {} ({} parameters)",
                dir.join(calprio::expcli::manifest::CHECKPOINT_FILE).display(),
                o.artifacts.model.param_count()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
