use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use appendchain::crypto::DirectCheck;
use appendchain::journal::{self, JournalWriter};
use appendchain::net::Mode;
use appendchain::report::{to_csv, Comparison, Report};
use appendchain::scenario::{self, Deployment, ScenarioConfig, ScenarioError};
use appendchain::Algorithm;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

#[derive(Parser)]
#[command(name = "appendchain", version, about = "Appendable-block blockchain scenarios for gateway-based IoT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and report its latency medians.
    Run(RunArgs),
    /// Run the same workload under Witness and PBFT and compare.
    Compare(RunArgs),
    /// Re-validate a journal file offline with fresh signature checks.
    Verify {
        #[arg(long)]
        journal: PathBuf,
    },
    /// Print the resolved scenario configuration as JSON.
    Config(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Table,
}

#[derive(Clone, Copy, ValueEnum)]
enum Net {
    Inmem,
    Socket,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Preset A..I, or `custom` for the defaults.
    #[arg(long, default_value = "custom")]
    scenario: String,
    /// Scenario configuration file (JSON); flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    consensus: Option<Algorithm>,
    #[arg(long)]
    gateways: Option<usize>,
    #[arg(long = "devices-per-gw")]
    devices_per_gw: Option<usize>,
    #[arg(long = "tx-per-device")]
    tx_per_device: Option<u64>,
    #[arg(long = "witness-min")]
    witness_min: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Time over which each device spreads its readings.
    #[arg(long = "duration-ms")]
    duration_ms: Option<u64>,
    /// Window over which devices connect.
    #[arg(long = "onboarding-ms")]
    onboarding_ms: Option<u64>,
    #[arg(long, value_enum)]
    net: Option<Net>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Write one journal per gateway into this directory (in-memory mode).
    #[arg(long = "journal-dir")]
    journal_dir: Option<PathBuf>,
    /// Write the delivery trace to this file (in-memory mode).
    #[arg(long)]
    trace: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None if self.scenario.eq_ignore_ascii_case("custom") => ScenarioConfig::default(),
            None => scenario::preset(&self.scenario)
                .with_context(|| format!("unknown scenario `{}` (expected A..I or custom)", self.scenario))?,
        };
        if let Some(v) = self.consensus {
            cfg.consensus = v;
        }
        if let Some(v) = self.gateways {
            cfg.gateways = v;
        }
        if let Some(v) = self.devices_per_gw {
            cfg.devices_per_gateway = v;
        }
        if let Some(v) = self.tx_per_device {
            cfg.tx_per_device = v;
        }
        if let Some(v) = self.witness_min {
            cfg.witness_minimum = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.duration_ms {
            cfg.duration_ms = v;
        }
        if let Some(v) = self.onboarding_ms {
            cfg.onboarding_ms = v;
        }
        match self.net {
            Some(Net::Inmem) => cfg.net.mode = Mode::InMemory,
            Some(Net::Socket) => cfg.net.mode = Mode::Socket,
            None => {}
        }
        if self.trace.is_some() {
            cfg.net.trace = true;
        }
        if cfg.net.mode == Mode::Socket && (self.journal_dir.is_some() || self.trace.is_some()) {
            bail!("--journal-dir and --trace need --net inmem");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }
}

/// A finished run, possibly with failed integrity checks.
struct Outcome {
    report: Report,
    failure: Option<String>,
}

fn run_one(args: &RunArgs, cfg: &ScenarioConfig, suffix: &str) -> Result<Outcome> {
    info!("running {} ({}, seed {})", cfg.label, cfg.consensus, cfg.seed);
    if cfg.net.mode == Mode::Socket {
        return settle(scenario::run_scenario(cfg));
    }
    let mut d = Deployment::new(cfg.clone())?;
    let mut journals = Vec::new();
    if let Some(dir) = &args.journal_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for i in 0..d.gateway_count() {
            let path = dir.join(format!("gateway-{i}{suffix}.journal"));
            let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            d.attach_journal(i, JournalWriter::new(Box::new(BufWriter::new(file)), &d.consensus)?);
            journals.push(path);
        }
    }
    let result = d.execute();
    d.flush_journals();
    if let Some(path) = &args.trace {
        let path = with_suffix(path, suffix);
        let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        for e in d.sim.trace() {
            writeln!(out, "{e}")?;
        }
        out.flush()?;
    }
    result?;
    for path in &journals {
        info!("journal written to {}", path.display());
    }
    settle(d.conclude())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    if suffix.is_empty() {
        return path.to_path_buf();
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}{suffix}.{ext}"),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

/// Keep the report of a run whose only problem is integrity.
fn settle(result: Result<Report, ScenarioError>) -> Result<Outcome> {
    match result {
        Ok(report) => Ok(Outcome { report, failure: None }),
        Err(ScenarioError::Failed { label, reason, dump, report }) => Ok(Outcome {
            report: *report,
            failure: Some(format!("scenario {label} FAILED: {reason}\n{dump}")),
        }),
        Err(e) => Err(e.into()),
    }
}

fn report_failure(outcomes: &[&Outcome]) -> ExitCode {
    let mut code = ExitCode::SUCCESS;
    for o in outcomes {
        if let Some(f) = &o.failure {
            eprintln!("{f}");
            code = ExitCode::FAILURE;
        }
    }
    code
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let cfg = args.resolve()?;
    let outcome = run_one(&args, &cfg, "")?;
    let r = &outcome.report;
    args.emit(&match args.format {
        Format::Csv => to_csv(std::slice::from_ref(r)),
        Format::Json => r.to_json() + "\n",
        Format::Table => r.to_table(),
    })?;
    Ok(report_failure(&[&outcome]))
}

fn compare(args: RunArgs) -> Result<ExitCode> {
    let base = args.resolve()?;
    let w = run_one(&args, &ScenarioConfig { consensus: Algorithm::Witness, ..base.clone() }, "-witness")?;
    let p = run_one(&args, &ScenarioConfig { consensus: Algorithm::Pbft, ..base }, "-pbft")?;
    let c = Comparison {
        witness: w.report.clone(),
        pbft: p.report.clone(),
    };
    args.emit(&match args.format {
        Format::Csv => to_csv(&[c.witness.clone(), c.pbft.clone()]),
        Format::Json => c.to_json() + "\n",
        Format::Table => c.to_table(),
    })?;
    if c.witness.total_tx != c.pbft.total_tx {
        warn!(
            "transaction totals differ: witness {}, pbft {}",
            c.witness.total_tx, c.pbft.total_tx
        );
    }
    Ok(report_failure(&[&w, &p]))
}

fn verify(path: &Path) -> Result<ExitCode> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    match journal::replay(&bytes, &DirectCheck) {
        Ok(r) => {
            if r.truncated_tail {
                warn!("ignored a truncated final record");
            }
            println!(
                "{}: ok, {} blocks, {} transactions, {} consensus over {} gateways, fingerprint {}",
                path.display(),
                r.chain.len(),
                r.chain.transaction_count(),
                r.config.algorithm,
                r.config.n(),
                r.chain.fingerprint().to_hex()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("{}: INVALID: {e}", path.display());
            Ok(ExitCode::FAILURE)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
        Command::Verify { journal } => verify(&journal),
        Command::Config(args) => args.resolve().and_then(|cfg| {
            args.emit(&(serde_json::to_string_pretty(&cfg)? + "\n"))?;
            Ok(ExitCode::SUCCESS)
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
