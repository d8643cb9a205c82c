//! One pass end to end: geometry and link budget, sparse detection sampling,
//! the distillation session, and the report files.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::distill::ground::{BlockRecord, PacketRecord, PacketStatus};
use crate::distill::ldpc::CodeBook;
use crate::distill::session::{run_session, SessionError, SessionOutcome, SessionReport, SessionSetup};
use crate::exec::Execution;
use crate::keystore::KeyFile;
use crate::link::{simulate_pass, write_link_csv, Downlink, LinkError, LinkSample};
use crate::rng::{derive_seed, domain};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("report failed validation: {0}")]
    Report(String),
    #[error("writing {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub session_id: u64,
    pub outcome: SessionOutcome,
    pub total_pulses: u64,
    pub detections: u64,
    pub sifted_packets: usize,
    /// Mean sampled QBER over sifted packets.
    pub avg_qber: f64,
    pub min_qber: f64,
    pub max_qber: f64,
    pub blocks: usize,
    /// Sifted bits that entered settled PA blocks.
    pub sifted_bits: u64,
    pub final_bits: u64,
    pub final_ratio: f64,
    pub consistent: bool,
}

impl RunSummary {
    fn from_report(cfg: &RunConfig, total_pulses: u64, detections: u64, report: &SessionReport) -> Self {
        let q: Vec<f64> = report.packets.iter().map(|p| p.sampled_qber).collect();
        let avg_qber = if q.is_empty() { 0.0 } else { q.iter().sum::<f64>() / q.len() as f64 };
        let sifted_bits = report.sifted_bits_in_blocks();
        let final_bits = report.final_bits();
        Self {
            seed: cfg.seed,
            session_id: cfg.session_id,
            outcome: report.outcome.clone(),
            total_pulses,
            detections,
            sifted_packets: report.sifted_packets,
            avg_qber,
            min_qber: q.iter().cloned().fold(f64::INFINITY, f64::min).min(avg_qber),
            max_qber: q.iter().cloned().fold(0.0, f64::max),
            blocks: report.ground_keys.len(),
            sifted_bits,
            final_bits,
            final_ratio: if sifted_bits == 0 { 0.0 } else { final_bits as f64 / sifted_bits as f64 },
            consistent: report.consistent,
        }
    }

    /// Structural checks run before anything is written.
    pub fn validate(&self) -> Result<(), String> {
        let probs = [("avg_qber", self.avg_qber), ("min_qber", self.min_qber), ("max_qber", self.max_qber)];
        if let Some((name, v)) = probs.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(format!("{name} = {v} outside [0, 1]"));
        }
        if self.final_bits > self.sifted_bits {
            return Err(format!("final bits {} exceed sifted bits {}", self.final_bits, self.sifted_bits));
        }
        if !(0.0..=1.0).contains(&self.final_ratio) {
            return Err(format!("final ratio {} outside [0, 1]", self.final_ratio));
        }
        if !self.consistent {
            return Err("final keys differ between satellite and ground".into());
        }
        if let SessionOutcome::Abort { .. } = self.outcome {
            if self.final_bits != 0 {
                return Err("aborted session reports final bits".into());
            }
        }
        Ok(())
    }

    pub fn csv_header() -> &'static str {
        "seed,session_id,outcome,total_pulses,detections,sifted_packets,avg_qber,blocks,sifted_bits,final_bits,final_ratio"
    }

    pub fn csv_row(&self) -> String {
        let outcome = match &self.outcome {
            SessionOutcome::MatchedKeys { .. } => "matched_keys".to_string(),
            SessionOutcome::Abort { reason } => format!("abort:{reason}"),
        };
        format!(
            "{},{},{},{},{},{},{:.6},{},{},{},{:.6}",
            self.seed,
            self.session_id,
            outcome,
            self.total_pulses,
            self.detections,
            self.sifted_packets,
            self.avg_qber,
            self.blocks,
            self.sifted_bits,
            self.final_bits,
            self.final_ratio
        )
    }
}

pub struct PassRun {
    pub config: RunConfig,
    pub samples: Vec<LinkSample>,
    pub report: SessionReport,
    pub summary: RunSummary,
}

impl PassRun {
    pub fn succeeded(&self) -> bool {
        matches!(self.summary.outcome, SessionOutcome::MatchedKeys { .. })
    }

    pub fn ground_keys(&self) -> KeyFile {
        KeyFile::from_finals(self.config.session_id, &self.report.ground_keys, self.config.protocol.block_bits as u32)
    }

    pub fn satellite_keys(&self) -> KeyFile {
        KeyFile::from_finals(self.config.session_id, &self.report.satellite_keys, self.config.protocol.block_bits as u32)
    }
}

/// Simulates the pass and runs the session.
pub fn run_pass(config: &RunConfig, exec: Execution) -> Result<PassRun, PipelineError> {
    let mut cfg = config.clone();
    cfg.protocol.source = cfg.source;
    cfg.protocol.sift.sample_seed = derive_seed(cfg.seed, domain::SAMPLING);
    let downlink = Downlink::from_profile(&cfg.pass, &cfg.link, &cfg.source)?;
    let pass = simulate_pass(&downlink, cfg.seed, exec)?;
    log::info!(
        "pass: {} pulses, {} detections over {} samples",
        downlink.total_pulses(),
        pass.events.len(),
        downlink.samples.len()
    );
    let setup = SessionSetup {
        session_id: cfg.session_id,
        seed: cfg.seed,
        protocol: cfg.protocol.clone(),
        channel: cfg.channel.clone(),
        exec,
    };
    let report = run_session(&setup, &pass.events, &pass.cache, &CodeBook::new())?;
    let summary = RunSummary::from_report(&cfg, downlink.total_pulses(), pass.events.len() as u64, &report);
    summary.validate().map_err(PipelineError::Report)?;
    log::info!(
        "session: {} packets, {} blocks, {} final bits ({:?})",
        summary.sifted_packets,
        summary.blocks,
        summary.final_bits,
        summary.outcome
    );
    Ok(PassRun { config: cfg, samples: downlink.samples, report, summary })
}

pub fn write_packet_csv<W: Write>(packets: &[PacketRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "packet_id,start_pulse,end_pulse,sampled_qber,rung,syndrome_bits,corrected_errors,status,block_id")?;
    for p in packets {
        let (status, block) = match p.status {
            PacketStatus::Consumed { block_id } => ("consumed", block_id.to_string()),
            PacketStatus::NoCode => ("no_code", String::new()),
            PacketStatus::DecodeFailed => ("decode_failed", String::new()),
            PacketStatus::Leftover => ("leftover", String::new()),
        };
        writeln!(
            out,
            "{},{},{},{:.6},{},{},{},{},{}",
            p.packet_id,
            p.start,
            p.end,
            p.sampled_qber,
            p.rung.map(|r| r.to_string()).unwrap_or_default(),
            p.syndrome_bits,
            p.corrected_errors.map(|c| c.to_string()).unwrap_or_default(),
            status,
            block
        )?;
    }
    Ok(())
}

pub fn blocks_json(blocks: &[BlockRecord]) -> String {
    serde_json::to_string_pretty(blocks).expect("block records serialize")
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<(), PipelineError> {
    let err = |source| PipelineError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(fs::File::create(path).map_err(err)?);
    f(&mut w).and_then(|_| w.flush()).map_err(err)
}

/// Writes `link.csv`, `packets.csv`, `blocks.json`, `session.json`,
/// `summary.json` and the two key files into `dir`.
pub fn write_outputs(run: &PassRun, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Io { path: dir.display().to_string(), source })?;
    write_file(&dir.join("link.csv"), |w| write_link_csv(&run.samples, w))?;
    write_file(&dir.join("packets.csv"), |w| write_packet_csv(&run.report.packets, w))?;
    write_file(&dir.join("blocks.json"), |w| writeln!(w, "{}", blocks_json(&run.report.blocks)))?;
    write_file(&dir.join("session.json"), |w| writeln!(w, "{}", run.report.to_json()))?;
    let summary = serde_json::to_string_pretty(&run.summary).expect("summary serializes");
    write_file(&dir.join("summary.json"), |w| writeln!(w, "{summary}"))?;
    write_file(&dir.join("keys_ground.bin"), |w| run.ground_keys().write_to(w))?;
    write_file(&dir.join("keys_satellite.bin"), |w| run.satellite_keys().write_to(w))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::sifting::SiftParams;
    use crate::finite_key::BoundMode;
    use crate::link::PassProfile;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 5;
        cfg.pass = PassProfile { duration: 20.0, max_elevation: 60.0, ..Default::default() };
        cfg.link.atmospheric_zenith_loss_db = 0.0;
        cfg.protocol.sift = SiftParams { packet_bits: 10_000, ..Default::default() };
        cfg.protocol.block_bits = 20_000;
        cfg.protocol.bound = BoundMode::Asymptotic;
        cfg
    }

    #[test]
    fn short_pass_produces_keys_and_files() {
        let run = run_pass(&small(), Execution::default()).unwrap();
        assert!(run.succeeded());
        assert!(run.summary.sifted_packets > 0, "{:?}", run.summary);
        assert!(run.summary.final_bits > 0);
        assert_eq!(run.ground_keys(), run.satellite_keys());
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&run, dir.path()).unwrap();
        let packets = fs::read_to_string(dir.path().join("packets.csv")).unwrap();
        assert_eq!(packets.lines().count(), run.summary.sifted_packets + 1);
        let keys = KeyFile::load(&dir.path().join("keys_ground.bin")).unwrap();
        assert_eq!(keys.total_bits(), run.summary.final_bits);
        let link = fs::read_to_string(dir.path().join("link.csv")).unwrap();
        assert_eq!(link.lines().count(), 21);
    }

    #[test]
    fn dark_link_is_a_clean_empty_run() {
        let mut cfg = small();
        cfg.link.atmospheric_zenith_loss_db = 400.0;
        cfg.link.dark_count_rate = 0.0;
        cfg.link.background_rate = 0.0;
        let run = run_pass(&cfg, Execution::default()).unwrap();
        assert_eq!(run.summary.detections, 0);
        assert_eq!(run.summary.sifted_packets, 0);
        assert_eq!(run.summary.final_bits, 0);
        assert_eq!(run.summary.outcome, SessionOutcome::MatchedKeys { blocks: 0, final_bits: 0 });
    }

    #[test]
    fn outputs_are_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_outputs(&run_pass(&small(), Execution::Parallel).unwrap(), a.path()).unwrap();
        write_outputs(&run_pass(&small(), Execution::Sequential).unwrap(), b.path()).unwrap();
        for name in ["link.csv", "packets.csv", "blocks.json", "session.json", "summary.json", "keys_ground.bin"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
        }
    }
}
