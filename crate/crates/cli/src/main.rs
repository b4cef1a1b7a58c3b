use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use edgegate_core::domain::Timestamp;
use edgegate_core::metrics::{compute_metrics, render_report, ReportFormat};
use edgegate_core::sim::{self, replay, EventTrace, GroundTruth, Scenario};
use edgegate_core::sink::{export_csv, token_from_env, wire, CloudSink, SheetTable};

#[derive(Parser)]
#[command(name = "edgegate", version, about = "Run and measure simulated edge access and safety devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its trace, ground truth and report.
    Run {
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: current directory).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Recompute metrics from a trace.
    Replay {
        trace: PathBuf,
        /// Ground truth (default: truth.json next to the trace).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Also re-execute decisions and detections against this scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
    /// Serve the mock sink over TCP until killed.
    ServeSink {
        #[arg(long, default_value_t = 7878)]
        port: u16,
        /// Bearer token (default: $EDGEGATE_SINK_TOKEN, else the built-in token).
        #[arg(long)]
        token: Option<String>,
        /// Seed the authorization table from this scenario's cards.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Load rows from, and append new rows to, this state file.
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Export a saved sink state.
    Export {
        state: PathBuf,
        #[arg(long, required = true)]
        csv: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
            Format::Text => ReportFormat::Text,
        }
    }
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn io(path: &Path, e: io::Error) -> Self {
        Failure::Runtime(format!("{}: {e}", path.display()))
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run { scenario, seed, out } => run(&scenario, seed, &out),
        Command::Replay {
            trace,
            truth,
            scenario,
            format,
        } => replay_cmd(&trace, truth.as_deref(), scenario.as_deref(), format),
        Command::Validate { scenario } => load_scenario(&scenario).map(|s| {
            println!(
                "{}: ok ({} access, {} safety devices)",
                scenario.display(),
                s.access_devices.len(),
                s.safety_devices.len()
            );
        }),
        Command::ServeSink {
            port,
            token,
            scenario,
            state,
        } => serve_sink(port, token, scenario.as_deref(), state.as_deref()),
        Command::Export { state, .. } => export(&state),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, Failure> {
    let src = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Scenario::from_toml_str(&src).map_err(|e| Failure::Config(format!("{}:\n{e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

fn run(path: &Path, seed: Option<u64>, out: &Path) -> CmdResult {
    let mut scenario = load_scenario(path)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let output = sim::run(&scenario).map_err(|e| match e {
        sim::SimError::Config(c) => Failure::Config(c.to_string()),
        other => Failure::Runtime(other.to_string()),
    })?;
    fs::create_dir_all(out).map_err(|e| Failure::io(out, e))?;
    write_file(&out.join("trace.jsonl"), &output.trace.to_jsonl())?;
    write_file(&out.join("truth.json"), &output.truth.to_json())?;
    for (name, format) in [
        ("report.json", ReportFormat::Json),
        ("report.csv", ReportFormat::Csv),
        ("report.txt", ReportFormat::Text),
    ] {
        write_file(&out.join(name), &render_report(&output.report, format))?;
    }
    let mut state = Vec::new();
    output
        .sink
        .sheet()
        .save(&mut state)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    write_file(&out.join("sink.jsonl"), &state)?;
    write_file(&out.join("sink.csv"), &output.sink.export_csv())?;
    io::stdout()
        .write_all(&render_report(&output.report, ReportFormat::Text))
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn replay_cmd(trace_path: &Path, truth: Option<&Path>, scenario: Option<&Path>, format: Format) -> CmdResult {
    let file = File::open(trace_path).map_err(|e| Failure::io(trace_path, e))?;
    let trace = EventTrace::read_jsonl(BufReader::new(file))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", trace_path.display())))?;
    let truth_path = truth.map(Path::to_path_buf).unwrap_or_else(|| {
        trace_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("truth.json")
    });
    let truth_bytes = fs::read(&truth_path).map_err(|e| Failure::io(&truth_path, e))?;
    let truth: GroundTruth = serde_json::from_slice(&truth_bytes)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", truth_path.display())))?;
    if let Some(path) = scenario {
        let scenario = load_scenario(path)?;
        let summary = replay::verify(&scenario, &trace).map_err(|e| Failure::Runtime(e.to_string()))?;
        eprintln!(
            "replay ok: {} decisions, {} detections reproduced",
            summary.decisions, summary.detections
        );
    }
    let report = compute_metrics(&trace, &truth).map_err(|e| Failure::Runtime(e.to_string()))?;
    io::stdout()
        .write_all(&render_report(&report, format.into()))
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn wall_clock() -> Timestamp {
    let ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0);
    Timestamp::from_millis(ms)
}

fn serve_sink(port: u16, token: Option<String>, scenario: Option<&Path>, state: Option<&Path>) -> CmdResult {
    let token = token.unwrap_or_else(token_from_env);
    let authz = match scenario {
        Some(p) => sim::provision(&load_scenario(p)?),
        None => Default::default(),
    };
    let mut sink = CloudSink::new(token, authz);
    let mut journal: Option<wire::Journal> = None;
    if let Some(path) = state {
        if path.exists() {
            let file = File::open(path).map_err(|e| Failure::io(path, e))?;
            let sheet = SheetTable::load(BufReader::new(file))
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            sink = sink.with_sheet(sheet);
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Failure::io(path, e))?;
        journal = Some(Box::new(file));
    }
    let server = wire::SinkServer::bind_with_journal(("127.0.0.1", port), sink, Arc::new(wall_clock), journal)
        .map_err(|e| Failure::Runtime(format!("bind 127.0.0.1:{port}: {e}")))?;
    println!("listening on {}", server.local_addr());
    io::stdout().flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    server.join();
    Ok(())
}

fn export(path: &Path) -> CmdResult {
    let file = File::open(path).map_err(|e| Failure::io(path, e))?;
    let sheet = SheetTable::load(BufReader::new(file))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    io::stdout()
        .write_all(&export_csv(&sheet))
        .map_err(|e| Failure::Runtime(e.to_string()))
}
