use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mrsim_control_api::{serve, spawn_engine, ApiConfig};
use mrsim_core::harness::{run_with_seed, write_outputs, OutputFormat};
use mrsim_core::{bundled, load_scenario, Scenario, Session};

#[derive(Debug, Parser)]
#[command(name = "mrsim", version, about = "Discrete-event multi-robot system simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a scenario headless and write metrics files.
    Run {
        /// Scenario file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Also write the event trace and the record stream as JSON lines.
        #[arg(long)]
        trace: bool,
    },
    /// Check a scenario and report every problem found.
    Validate {
        #[arg(long)]
        scenario: String,
    },
    /// Start a paused interactive session behind the HTTP control API.
    Serve {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Simulation units per wall-clock second while the clock runs.
        #[arg(long, default_value_t = 2.0)]
        pace: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

fn read_document(source: &str) -> Result<String> {
    if let Some(doc) = bundled(source) {
        return Ok(doc.to_owned());
    }
    std::fs::read_to_string(source).with_context(|| format!("cannot read scenario {source}"))
}

fn load(source: &str) -> Result<Scenario> {
    let doc = read_document(source)?;
    match load_scenario(&doc) {
        Ok(sc) => Ok(sc),
        Err(errors) => {
            for e in &errors {
                eprintln!("{source}: {e}");
            }
            bail!("{source}: {} problem(s) found", errors.len())
        }
    }
}

fn run(source: &str, out: &Path, seed: Option<u64>, format: Format, trace: bool) -> Result<()> {
    let sc = load(source)?;
    let seed = seed.unwrap_or(sc.master_seed);
    let output = run_with_seed(&sc, seed);
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let files = write_outputs(&output, out, format.into(), trace)
        .with_context(|| format!("cannot write outputs to {}", out.display()))?;
    let s = &output.report.summary;
    println!(
        "{} seed={} duration={}: arrived={} succeeded={} failed={} unfinished={}",
        sc.name, seed, sc.duration, s.arrived, s.succeeded, s.failed, s.unfinished
    );
    for (reason, n) in &s.failure_reasons {
        println!("  {reason}: {n}");
    }
    for f in files {
        println!("wrote {}", out.join(f).display());
    }
    Ok(())
}

fn validate(source: &str) -> Result<()> {
    let sc = load(source)?;
    println!(
        "{source}: ok ({} robots, {} blueprints, duration {})",
        sc.robots.len(),
        sc.blueprints.len(),
        sc.duration
    );
    Ok(())
}

async fn serve_session(source: &str, host: &str, port: u16, pace: f64) -> Result<()> {
    if !(pace > 0.0 && pace.is_finite()) {
        bail!("--pace must be a positive number");
    }
    let sc = load(source)?;
    let addr: SocketAddr = format!("{host}:{port}").parse().with_context(|| format!("bad address {host}:{port}"))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("cannot bind {addr}"))?;
    let handle = spawn_engine(
        Session::new(&sc),
        ApiConfig {
            units_per_second: pace,
            ..ApiConfig::default()
        },
    );
    println!("serving {} on http://{}", sc.name, listener.local_addr()?);
    serve(listener, handle).await?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run {
            scenario,
            out,
            seed,
            format,
            trace,
        } => run(&scenario, &out, seed, format, trace),
        Cmd::Validate { scenario } => validate(&scenario),
        Cmd::Serve {
            scenario,
            host,
            port,
            pace,
        } => tokio::runtime::Runtime::new()
            .context("cannot start runtime")
            .and_then(|rt| rt.block_on(serve_session(&scenario, &host, port, pace))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
