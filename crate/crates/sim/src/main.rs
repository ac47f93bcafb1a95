use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use isac_core::callflow::TaskOutcome;
use isac_sim::demo::default_store_path;
use isac_sim::{demo_callflow, parse_config, run_sweep, trace, write_csv};

#[derive(Parser)]
#[command(name = "isac-sim", about = "Map-aware ISAC fusion simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo sweep over mask margins and validation gates.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `scenario.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Runs the sensing call flow once and writes its message trace.
    Demo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// SDSF log; defaults to `demo.store`, then `sdsf.log` beside the trace.
        #[arg(long)]
        store: Option<PathBuf>,
    },
    Version,
}

/// Creates the directory an output file will be written into.
fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Sweep {
            config,
            out,
            seed,
            parallel,
        } => {
            let mut cfg = parse_config(&config)?;
            if let Some(seed) = seed {
                cfg.sweep.scenario.seed = seed;
            }
            ensure_parent(&out)?;
            let rows = run_sweep(&cfg.sweep, parallel)?;
            write_csv(&rows, &out)?;
            log::info!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Demo {
            config,
            trace: trace_path,
            store,
        } => {
            let cfg = parse_config(&config)?;
            let store = store
                .or_else(|| cfg.demo.store.clone())
                .unwrap_or_else(|| default_store_path(&trace_path));
            ensure_parent(&trace_path)?;
            ensure_parent(&store)?;
            let report = demo_callflow(&cfg, &store)?;
            trace::write_trace_file(&report.trace, &trace_path)?;
            match report.outcome {
                TaskOutcome::Completed {
                    stid,
                    result,
                    availability,
                } => {
                    let pd = result
                        .metrics
                        .pd_avg
                        .map(|p| format!("{p:.4}"))
                        .unwrap_or_else(|| "n/a".into());
                    println!(
                        "{stid}: availability {}, pd_avg {pd}, fa_avg {:.4}, KPI {}",
                        availability.map(|a| format!("{a:?}").to_lowercase()).unwrap_or_else(|| "not queried".into()),
                        result.metrics.fa_avg,
                        if result.kpi_met { "satisfied" } else { "not satisfied" }
                    );
                }
                TaskOutcome::Aborted { stid, step, reason } => {
                    let stid = stid.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
                    println!("{stid}: aborted at step {step}: {reason}");
                }
            }
        }
        Command::Version => println!("isac-sim {}", env!("CARGO_PKG_VERSION")),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Most errors already quote their source; print each cause once.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
