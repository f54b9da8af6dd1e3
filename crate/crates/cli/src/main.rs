use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aviary_core::config::{load_config, AppConfig, ConfigError};
use aviary_core::daemon::{run_daemon, run_once};
use aviary_core::eval::{evaluate, parse_manifest, render_report, write_outputs};
use aviary_core::store::Store;
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Feeder-camera clip processing server.
#[derive(Debug, Parser)]
#[command(name = "aviary", version)]
struct Cli {
    /// Config file; falls back to $AVIARY_CONFIG, then built-in defaults.
    #[arg(long, global = true, env = "AVIARY_CONFIG")]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set sample_rate_hz=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run ingest, pipeline and HTTP API until interrupted.
    Serve,
    /// Process a single clip and print its result as JSON.
    Process {
        clip: PathBuf,
        /// Persist the job and its results to the store.
        #[arg(long)]
        commit: bool,
    },
    /// Compute metrics for a labeled prediction manifest.
    Eval {
        manifest: PathBuf,
        /// Directory for metrics.json and confusion.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write labeled review crops and a manifest for retraining.
    ExportReviews { dir: PathBuf },
}

fn config(cli: &Cli) -> Result<AppConfig, ConfigError> {
    match &cli.config {
        Some(p) => load_config(p, &cli.overrides),
        None => AppConfig::parse_with_overrides("", &cli.overrides),
    }
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("aviary: {msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("AVIARY_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cfg = match config(&cli) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    match cli.command {
        Command::Serve => serve(cfg),
        Command::Process { clip, commit } => process(&cfg, &clip, commit),
        Command::Eval { manifest, out } => eval(&cfg, &manifest, &out),
        Command::ExportReviews { dir } => export(&cfg, &dir),
    }
}

fn serve(cfg: AppConfig) -> ExitCode {
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => return fail(EXIT_RUNTIME, e),
    };
    match rt.block_on(run_daemon(cfg, shutdown_signal())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(EXIT_RUNTIME, e),
    }
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn process(cfg: &AppConfig, clip: &Path, commit: bool) -> ExitCode {
    match run_once(cfg, clip, commit) {
        Ok(p) => {
            println!("{}", serde_json::to_string_pretty(&p.result).expect("result serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_RUNTIME, e),
    }
}

fn eval(cfg: &AppConfig, manifest: &Path, out: &Path) -> ExitCode {
    let text = match std::fs::read_to_string(manifest) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_RUNTIME, format!("{}: {e}", manifest.display())),
    };
    let result = parse_manifest(&text)
        .and_then(|m| evaluate(&m, &cfg.species_labels, cfg.iou_threshold))
        .and_then(|(report, matrix)| {
            write_outputs(out, &report, &matrix, &cfg.species_labels)?;
            Ok(report)
        });
    match result {
        Ok(report) => {
            print!("{}", render_report(&report));
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_RUNTIME, e),
    }
}

fn export(cfg: &AppConfig, dir: &Path) -> ExitCode {
    let result = Store::open(&cfg.store_dir, cfg.into()).and_then(|s| s.export_reviews(dir));
    match result {
        Ok(entries) => {
            println!("exported {} labeled crops to {}", entries.len(), dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_RUNTIME, e),
    }
}
