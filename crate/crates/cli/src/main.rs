//! `meterhub`: run the ingest service, analyses, simulations and exports.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

mod analyze;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand, ValueEnum};

use meterhub::codecs::DecodeOptions;
use meterhub::config::Config;
use meterhub::model::RssiCampaign;
use meterhub::sim::{run_pipeline, SimScenario};
use meterhub::store::{self, Query, Store, StoreError};

const BROKER_ENV: &str = "METERHUB_BROKER";
const DEFAULT_STORE: &str = "meterhub-data";

#[derive(Debug, Parser)]
#[command(name = "meterhub", version, about = "Smart-meter telemetry ingest, analysis and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run connectors, bus, store and HTTP endpoints until interrupted.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Reject SML files whose CRC does not match.
        #[arg(long)]
        strict_crc: bool,
        /// External MQTT broker to mirror `meterhub/#` with. METERHUB_BROKER takes precedence.
        #[arg(long)]
        broker: Option<String>,
    },
    /// Print radio and regulatory tables.
    Analyze {
        #[arg(value_enum)]
        kind: AnalyzeKind,
        /// RSSI campaign file for `bpl` (default: the bundled campus campaign).
        #[arg(long)]
        campaign: Option<PathBuf>,
        /// Fleet for `cost`, e.g. `lorawan=10,sigfox=5`.
        #[arg(long, default_value = "")]
        fleet: String,
        #[arg(long, default_value_t = 10)]
        years: u32,
        #[arg(long, value_enum, default_value_t = TableFormat::Csv)]
        format: TableFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a fleet scenario through the in-process pipeline.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Service config; supplies the store location and CRC mode.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replaces the scenario's campaign.
        #[arg(long)]
        campaign: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Report file (default: standard output).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strict_crc: bool,
    },
    /// Write stored readings as CSV or NDJSON.
    Export {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Only this device (default: all devices).
        #[arg(long)]
        device: Option<String>,
        /// Inclusive start, RFC 3339.
        #[arg(long)]
        from: Option<String>,
        /// Exclusive end, RFC 3339.
        #[arg(long)]
        to: Option<String>,
        /// Keep the last reading per bucket of this many seconds.
        #[arg(long)]
        bucket: Option<i64>,
        #[arg(long, value_enum, default_value_t = ExportFormat::Csv)]
        format: ExportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AnalyzeKind {
    Linkbudget,
    Bpl,
    Budgets,
    Cost,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TableFormat {
    Csv,
    Text,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExportFormat {
    Csv,
    Ndjson,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve {
            config,
            strict_crc,
            broker,
        } => serve(&config, strict_crc, broker),
        Command::Analyze {
            kind,
            campaign,
            fleet,
            years,
            format,
            out,
        } => cmd_analyze(kind, campaign.as_deref(), &fleet, years, format, out.as_deref()),
        Command::Simulate {
            scenario,
            config,
            campaign,
            store,
            out,
            strict_crc,
        } => simulate(&scenario, config.as_deref(), campaign.as_deref(), store, out.as_deref(), strict_crc),
        Command::Export {
            config,
            store,
            device,
            from,
            to,
            bucket,
            format,
            out,
        } => export(
            config.as_deref(),
            store,
            device.as_deref(),
            (from.as_deref(), to.as_deref()),
            bucket,
            format,
            out.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(path) => fs::write(path, text)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(runtime),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .context("cannot write to standard output")
                .map_err(runtime)
        }
    }
}

fn load_config(path: &Path) -> Result<Config, Failure> {
    Config::load(path).map_err(usage)
}

fn serve(config_path: &Path, strict_crc: bool, broker: Option<String>) -> Outcome {
    let mut config = load_config(config_path)?;
    config.strict_crc |= strict_crc;
    let broker = std::env::var(BROKER_ENV)
        .ok()
        .filter(|b| !b.is_empty())
        .or(broker);
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(async {
        let service = meterhub_service::start(&config, broker.as_deref())
            .await
            .map_err(|e| if e.is_config() { usage(e) } else { runtime(e) })?;
        eprintln!("meterhub ready");
        log::info!("http on {}, store at {}", service.addr, config.store.display());
        shutdown_signal().await;
        log::info!("shutting down");
        service.shutdown().await.map_err(runtime)
    })
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

fn load_campaign(path: &Path) -> Result<RssiCampaign, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read campaign {}", path.display()))
        .map_err(usage)?;
    RssiCampaign::from_json(&text)
        .with_context(|| path.display().to_string())
        .map_err(usage)
}

fn cmd_analyze(
    kind: AnalyzeKind,
    campaign: Option<&Path>,
    fleet: &str,
    years: u32,
    format: TableFormat,
    out: Option<&Path>,
) -> Outcome {
    let table = match kind {
        AnalyzeKind::Linkbudget => analyze::linkbudget().map_err(runtime)?,
        AnalyzeKind::Bpl => {
            let campaign = match campaign {
                Some(p) => load_campaign(p)?,
                None => RssiCampaign::campus_efs(),
            };
            analyze::bpl(&campaign).map_err(usage)?
        }
        AnalyzeKind::Budgets => analyze::budgets().map_err(runtime)?,
        AnalyzeKind::Cost => {
            let fleet = analyze::parse_fleet(fleet).map_err(|e| usage(anyhow!(e)))?;
            analyze::cost(&fleet, years).map_err(usage)?
        }
    };
    let text = match format {
        TableFormat::Csv => table.to_csv(),
        TableFormat::Text => table.to_text(),
    };
    write_output(out, &text)
}

fn store_path(explicit: Option<PathBuf>, config: Option<&Config>) -> PathBuf {
    explicit
        .or_else(|| config.map(|c| c.store.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))
}

fn store_failure(e: StoreError) -> Failure {
    match e {
        StoreError::InvalidQuery(_) => usage(e),
        other => runtime(other),
    }
}

fn simulate(
    scenario_path: &Path,
    config: Option<&Path>,
    campaign: Option<&Path>,
    store: Option<PathBuf>,
    out: Option<&Path>,
    strict_crc: bool,
) -> Outcome {
    let config = config.map(load_config).transpose()?;
    let (scenario, default_campaign) = SimScenario::load(scenario_path).map_err(usage)?;
    let campaign = match campaign {
        Some(p) => load_campaign(p)?,
        None => default_campaign,
    };
    scenario.validate(&campaign).map_err(usage)?;
    let root = store_path(store, config.as_ref());
    let store = Arc::new(Store::open(&root).map_err(runtime)?);
    let options = DecodeOptions {
        strict_crc: strict_crc || config.as_ref().is_some_and(|c| c.strict_crc),
    };
    let (report, stats) = run_pipeline(&scenario, &campaign, Some(store.clone()), options).map_err(runtime)?;
    store.flush().map_err(runtime)?;
    log::info!(
        "{} readings stored, {} dead letters, store at {}",
        stats.readings,
        stats.dead_letters,
        root.display()
    );
    let mut text = report.to_json();
    text.push('\n');
    write_output(out, &text)
}

fn parse_bound(text: Option<&str>, default: DateTime<Utc>, name: &str) -> Result<DateTime<Utc>, Failure> {
    match text {
        None => Ok(default),
        Some(t) => DateTime::parse_from_rfc3339(t)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| usage(anyhow!("bad --{name} {t:?}: {e}"))),
    }
}

fn export(
    config: Option<&Path>,
    store: Option<PathBuf>,
    device: Option<&str>,
    (from, to): (Option<&str>, Option<&str>),
    bucket: Option<i64>,
    format: ExportFormat,
    out: Option<&Path>,
) -> Outcome {
    let from = parse_bound(from, DateTime::<Utc>::MIN_UTC, "from")?;
    let to = parse_bound(to, DateTime::<Utc>::MAX_UTC, "to")?;
    let config = config.map(load_config).transpose()?;
    let root = store_path(store, config.as_ref());
    if !root.is_dir() {
        return Err(usage(anyhow!("store {} does not exist", root.display())));
    }
    let store = Store::open(&root).map_err(runtime)?;
    let template = Query {
        bucket_s: bucket,
        ..Query::new(device.unwrap_or_default(), from, to)
    };
    // checked up front so an empty store still rejects bad bounds
    template.validate().map_err(store_failure)?;
    let devices = match device {
        Some(d) => vec![d.to_string()],
        None => store.devices(),
    };
    let mut rows = Vec::new();
    for d in devices {
        let q = Query {
            device_id: d,
            ..template.clone()
        };
        rows.extend(store.query(&q).map_err(store_failure)?);
    }
    let text = match format {
        ExportFormat::Csv => store::to_csv(&rows),
        ExportFormat::Ndjson => rows
            .iter()
            .map(|r| serde_json::to_string(r).map(|line| line + "\n"))
            .collect::<Result<String, _>>()
            .map_err(runtime)?,
    };
    write_output(out, &text)
}
