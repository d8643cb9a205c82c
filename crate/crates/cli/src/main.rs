use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use qkdpass_core::bits::BitString;
use qkdpass_core::config::{validate_block_size, ConfigError, RunConfig};
use qkdpass_core::exec::Execution;
use qkdpass_core::finite_key::{analyze_block, BoundMode, DecoyTally, FiniteKeyError, KeyRateResult, DEFAULT_FAILURE_PROB};
use qkdpass_core::keystore::{KeyFile, KeyFileError};
use qkdpass_core::pipeline::{run_pass, write_outputs, PipelineError, RunSummary};
use qkdpass_core::relay::{run_relay, OrbitInfo, RelayError};
use qkdpass_core::source::SourceParams;

/// Exit status when a run completes but the session aborted or a relay was refused.
const EXIT_REJECTED: u8 = 3;

#[derive(Parser)]
#[command(name = "qkdpass", version, about = "Satellite decoy-BB84 pass simulation and key distillation")]
struct Cli {
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a pass, run the distillation session and write reports.
    RunPass {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// PA block size in bits: 100000, 200000, ..., 900000.
        #[arg(long, value_parser = parse_block_size)]
        block_size: Option<usize>,
        /// Per-frame loss probability of the classical channel.
        #[arg(long)]
        loss_prob: Option<f64>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Finite-key analysis of one block tally (JSON).
    Analyze {
        tally: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Relay key A to the holder of key B and send a one-time-pad message.
    Relay {
        key_a: PathBuf,
        key_b: PathBuf,
        message: PathBuf,
        /// End of the first pass, seconds.
        #[arg(long, default_value_t = 0.0)]
        pass_end_a: f64,
        /// End of the second pass, seconds.
        #[arg(long, default_value_t = 0.0)]
        pass_end_b: f64,
        /// Write the transcript here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the message as decrypted by station B.
        #[arg(long)]
        decrypted: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    KeyFile(#[from] KeyFileError),
    #[error("relay refused: {0}")]
    Relay(#[from] RelayError),
    #[error("finite-key analysis: {0}")]
    FiniteKey(#[from] FiniteKeyError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{0}")]
    Rejected(String),
}

fn parse_block_size(s: &str) -> Result<usize, String> {
    let bits: usize = s.parse().map_err(|e| format!("{e}"))?;
    validate_block_size(bits).map_err(|e| e.to_string())?;
    Ok(bits)
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

#[allow(clippy::too_many_arguments)]
fn cmd_run_pass(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    block_size: Option<usize>,
    loss_prob: Option<f64>,
    format: Format,
    exec: Execution,
) -> Result<bool, CliError> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(b) = block_size {
        cfg.protocol.block_bits = b;
    }
    if let Some(p) = loss_prob {
        cfg.channel.frame_loss_prob = p;
    }
    cfg.validate()?;
    let run = run_pass(&cfg, exec)?;
    write_outputs(&run, out)?;
    write(&out.join("config.toml"), run.config.to_toml().as_bytes())?;
    log::info!("outputs written to {}", out.display());
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&run.summary).expect("summary serializes")),
        Format::Csv => println!("{}\n{}", RunSummary::csv_header(), run.summary.csv_row()),
    }
    Ok(run.succeeded())
}

/// Input of `analyze`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TallyInput {
    #[serde(default)]
    block_id: u64,
    tally: DecoyTally,
    key_bits: u64,
    lec: f64,
    #[serde(default)]
    source: SourceParams,
    #[serde(default = "default_bound")]
    bound: BoundMode,
}

fn default_bound() -> BoundMode {
    BoundMode::Chernoff { xi: DEFAULT_FAILURE_PROB }
}

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    r: u64,
    /// Why no bound chain ran (empty tally).
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    analysis: Option<KeyRateResult>,
}

fn cmd_analyze(path: &Path, format: Format) -> Result<(), CliError> {
    let input: TallyInput = serde_json::from_slice(&read(path)?)
        .map_err(|source| CliError::Json { path: path.display().to_string(), source })?;
    let report = if input.tally == DecoyTally::default() {
        AnalyzeReport { r: 0, note: Some("empty tally".into()), analysis: None }
    } else {
        let a = analyze_block(input.block_id, &input.tally, &input.source, input.bound, input.key_bits, input.lec)?;
        AnalyzeReport { r: a.r, note: None, analysis: Some(a) }
    };
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report).expect("report serializes")),
        Format::Csv => {
            println!("block_id,key_bits,lec,s1_lower,e1_upper,r");
            let (s1, e1) = report.analysis.as_ref().map_or((0.0, 0.5), |a| (a.s1_lower, a.e1_upper));
            println!("{},{},{},{:.3},{:.6},{}", input.block_id, input.key_bits, input.lec, s1, e1, report.r);
        }
    }
    Ok(())
}

fn cmd_relay(
    key_a: &Path,
    key_b: &Path,
    message: &Path,
    ends: (f64, f64),
    out: Option<&Path>,
    decrypted: Option<&Path>,
) -> Result<bool, CliError> {
    let a = KeyFile::load(key_a)?;
    let b = KeyFile::load(key_b)?;
    let msg_bytes = read(message)?;
    let msg = BitString::from_bytes(&msg_bytes, msg_bytes.len() * 8).expect("length matches");
    let orbit = |file: &KeyFile, station: &str, end| OrbitInfo {
        station_id: station.into(),
        pass_id: file.session_id.to_string(),
        final_bits: file.total_bits() as usize,
        pass_end_s: end,
    };
    let (transcript, plain) = run_relay(orbit(&a, "A", ends.0), orbit(&b, "B", ends.1), &a.concatenated(), &b.concatenated(), &msg)?;
    match out {
        Some(p) => write(p, transcript.to_json().as_bytes())?,
        None => println!("{}", transcript.to_json()),
    }
    if let Some(p) = decrypted {
        write(p, &plain.to_bytes())?;
    }
    if !(transcript.recovered_matches && transcript.message_matches) {
        return Err(CliError::Rejected("relayed key or message did not round-trip".into()));
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QKDPASS_LOG", "warn")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let result = match &cli.command {
        Command::RunPass { config, seed, out, block_size, loss_prob, format } => {
            cmd_run_pass(config.as_deref(), *seed, out, *block_size, *loss_prob, *format, exec)
        }
        Command::Analyze { tally, format } => cmd_analyze(tally, *format).map(|_| true),
        Command::Relay { key_a, key_b, message, pass_end_a, pass_end_b, out, decrypted } => {
            cmd_relay(key_a, key_b, message, (*pass_end_a, *pass_end_b), out.as_deref(), decrypted.as_deref())
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("session aborted");
            ExitCode::from(EXIT_REJECTED)
        }
        Err(e @ (CliError::Relay(_) | CliError::Rejected(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_REJECTED)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
