//! Ground-station role.
//!
//! The ground station drives the session. It streams its detection records
//! chunk by chunk (stop-and-wait, retransmitted every tick), decodes the
//! satellite's syndromes, runs the finite-key analysis once a PA block worth
//! of packets has been corrected, and issues a signed PA instruction per
//! block. When every block is resolved it sends a signed commit listing the
//! blocks whose CRCs matched and finalizes on the signed acknowledgement.

use std::collections::{BTreeMap, VecDeque};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::bits::BitString;
use crate::exec::Execution;
use crate::finite_key::{analyze_block, model_leakage, DecoyTally, KeyRateResult};
use crate::link::DetectionEvent;
use crate::rng::{domain, stream};
use crate::source::{ClassCounts, IntensityGroup, SourceClass};

use super::auth::{KeySlot, Signer, SLOT_BITS};
use super::frame::{Frame, FrameType};
use super::ldpc::{CodeBook, CodeDescriptor};
use super::messages::{
    self, key_crc, unpack, BasisComparison, BlockDigest, BlockOutcome, Feedback, Instruction,
    OriginalKeyInfo, PacketAnnouncement, RejectReason,
};
use super::privacy::privacy_amplify;
use super::satellite::class_from_wire;
use super::session::{
    block_sequence, AbortReason, FinalKey, ProtocolConfig, RoleStats, COMMIT_SEQUENCE,
};
use super::sifting::{is_decoy, is_sampled, is_signal, WindowStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum PacketStatus {
    Consumed { block_id: u64 },
    /// Sampled QBER above every ladder rung.
    NoCode,
    DecodeFailed,
    /// Corrected but never gathered into a complete block.
    Leftover,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PacketRecord {
    pub packet_id: u64,
    pub start: u64,
    pub end: u64,
    pub sampled_qber: f64,
    pub rung: Option<u8>,
    pub syndrome_bits: u64,
    /// Bits flipped by the decoder.
    pub corrected_errors: Option<u64>,
    pub status: PacketStatus,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Leakage {
    pub syndrome_bits: u64,
    pub auth_bits: u64,
    /// Sampled signal bits disclosed from this block's windows.
    pub sample_bits_attributed: u64,
    /// Part of the above charged to `lec` (zero unless configured).
    pub sample_bits_charged: u64,
}

impl Leakage {
    pub fn total(&self) -> u64 {
        self.syndrome_bits + self.auth_bits + self.sample_bits_charged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum BlockStatus {
    AwaitingFeedback,
    Verified,
    Finalized,
    CrcMismatch,
    Rejected(String),
    AuthenticationFailed,
    /// Verified but not settled before the session ended.
    Unsettled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block_id: u64,
    pub packet_ids: Vec<u64>,
    pub sifted_bits: u64,
    pub final_length: u64,
    pub leakage: Leakage,
    pub analysis: Option<KeyRateResult>,
    pub analysis_error: Option<String>,
    pub status: BlockStatus,
}

struct ReadyPacket {
    id: u64,
    bits: BitString,
    window: WindowStats,
    syndrome_bits: u64,
}

struct GroundBlock {
    key: BitString,
    crc: u32,
    frame: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroundState {
    Running,
    Settling,
    Done,
    Aborted(AbortReason),
}

pub struct GroundRole<'a> {
    session_id: u64,
    events: &'a [DetectionEvent],
    config: ProtocolConfig,
    signer: Signer,
    codes: CodeBook,
    exec: Execution,
    seed: u64,

    chunks: u32,
    next_chunk: u32,
    chunk_frame: Option<Vec<u8>>,
    key_info_done: bool,

    key: BitString,
    key_is_z: BitString,
    window: WindowStats,
    next_packet: u64,
    ready: VecDeque<ReadyPacket>,
    pub packets: Vec<PacketRecord>,

    blocks: BTreeMap<u64, GroundBlock>,
    pub block_records: Vec<BlockRecord>,
    next_block: u64,

    commit: Option<(Vec<BlockDigest>, Vec<u8>)>,
    state: GroundState,
    last_progress: f64,
    finals: Vec<FinalKey>,
    pub stats: RoleStats,
}

impl<'a> GroundRole<'a> {
    pub fn new(
        session_id: u64,
        events: &'a [DetectionEvent],
        config: ProtocolConfig,
        signer: Signer,
        codes: CodeBook,
        exec: Execution,
        seed: u64,
    ) -> Self {
        let chunks = events.len().div_ceil(config.chunk_events).max(1) as u32;
        Self {
            session_id,
            events,
            config,
            signer,
            codes,
            exec,
            seed,
            chunks,
            next_chunk: 0,
            chunk_frame: None,
            key_info_done: false,
            key: BitString::new(),
            key_is_z: BitString::new(),
            window: WindowStats::default(),
            next_packet: 0,
            ready: VecDeque::new(),
            packets: Vec::new(),
            blocks: BTreeMap::new(),
            block_records: Vec::new(),
            next_block: 0,
            commit: None,
            state: GroundState::Running,
            last_progress: 0.0,
            finals: Vec::new(),
            stats: RoleStats::default(),
        }
    }

    pub fn state(&self) -> &GroundState {
        &self.state
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, GroundState::Done | GroundState::Aborted(_))
    }

    pub fn start(&mut self, now: f64) -> Vec<Vec<u8>> {
        self.last_progress = now;
        let frame = self.key_info_frame(0);
        self.chunk_frame = Some(frame.clone());
        vec![frame]
    }

    fn chunk_events(&self, chunk: u32) -> &'a [DetectionEvent] {
        let size = self.config.chunk_events;
        let start = (chunk as usize * size).min(self.events.len());
        let end = (start + size).min(self.events.len());
        &self.events[start..end]
    }

    fn key_info_frame(&self, chunk: u32) -> Vec<u8> {
        let events = self.chunk_events(chunk);
        let sift = &self.config.sift;
        let mut prev = 0u64;
        let mut deltas = Vec::with_capacity(events.len());
        let mut bases = BitString::with_capacity(events.len());
        let mut sampled = BitString::with_capacity(events.len());
        let mut sample_bits = BitString::new();
        for ev in events {
            deltas.push(ev.sequence.wrapping_sub(prev));
            prev = ev.sequence;
            bases.push(ev.measured_basis.as_bit());
            let flag = is_sampled(sift.sample_seed, ev.sequence, sift.sample_fraction);
            sampled.push(flag);
            if flag {
                sample_bits.push(ev.measured_bit);
            }
        }
        let info = OriginalKeyInfo {
            chunk,
            last: chunk + 1 == self.chunks,
            seq_deltas: deltas,
            bases: bases.to_bytes(),
            sampled: sampled.to_bytes(),
            sample_bits: sample_bits.to_bytes(),
        };
        let payload = messages::encode(&info).expect("encodable");
        Frame::new(FrameType::OriginalKeyInfo, self.session_id, chunk, payload).encode()
    }

    pub fn on_datagram(&mut self, bytes: &[u8], now: f64) -> Vec<Vec<u8>> {
        if self.is_terminal() {
            return Vec::new();
        }
        let frame = match Frame::decode(bytes) {
            Ok(f) => f,
            Err(e) => {
                log::trace!("ground drops frame: {e}");
                self.stats.rejected_frames += 1;
                return Vec::new();
            }
        };
        if frame.session_id != self.session_id {
            self.stats.rejected_frames += 1;
            return Vec::new();
        }
        self.stats.accepted_frames += 1;
        let out = match frame.frame_type {
            FrameType::BasisComparisonAndSyndrome => self.on_comparison(&frame, now),
            FrameType::PaFeedback => self.on_feedback(&frame, now),
            _ => {
                self.stats.rejected_frames += 1;
                Vec::new()
            }
        };
        let mut out = out;
        out.extend(self.maybe_commit(now));
        out
    }

    /// Periodic retransmission and timeout supervision.
    pub fn on_tick(&mut self, now: f64) -> Vec<Vec<u8>> {
        let limit = match self.state {
            GroundState::Running => self.config.timeout,
            GroundState::Settling => self.config.settle_timeout,
            _ => return Vec::new(),
        };
        if now - self.last_progress > limit {
            log::debug!("ground: no progress for {limit} s, aborting");
            self.abort(AbortReason::Timeout);
            return Vec::new();
        }
        let mut out = Vec::new();
        if let Some(f) = &self.chunk_frame {
            out.push(f.clone());
        }
        for b in self.block_records.iter().filter(|b| b.status == BlockStatus::AwaitingFeedback) {
            out.push(self.blocks[&b.block_id].frame.clone());
        }
        if let (GroundState::Settling, Some((_, f))) = (&self.state, &self.commit) {
            out.push(f.clone());
        }
        self.stats.retransmissions += out.len() as u64;
        out
    }

    pub fn abort(&mut self, reason: AbortReason) {
        if self.is_terminal() {
            return;
        }
        for rec in &mut self.block_records {
            if matches!(rec.status, BlockStatus::AwaitingFeedback | BlockStatus::Verified) {
                rec.status = BlockStatus::Unsettled;
            }
        }
        self.finals.clear();
        self.state = GroundState::Aborted(reason);
    }

    fn on_comparison(&mut self, frame: &Frame, now: f64) -> Vec<Vec<u8>> {
        if self.key_info_done || frame.sequence != self.next_chunk {
            self.stats.duplicates += 1;
            return Vec::new();
        }
        let bc: BasisComparison = match messages::decode(&frame.payload) {
            Ok(m) => m,
            Err(_) => {
                self.stats.malformed += 1;
                return Vec::new();
            }
        };
        let new_packets = match self.absorb_chunk(&bc) {
            Ok(p) => p,
            Err(why) => {
                log::warn!("ground: inconsistent basis comparison for chunk {}: {why}", bc.chunk);
                self.abort(AbortReason::ProtocolViolation(why));
                return Vec::new();
            }
        };
        self.last_progress = now;
        self.decode_packets(new_packets);
        let mut out = self.form_blocks();
        self.next_chunk += 1;
        if self.next_chunk == self.chunks {
            self.key_info_done = true;
            self.chunk_frame = None;
            self.finish_packets();
        } else {
            let f = self.key_info_frame(self.next_chunk);
            self.chunk_frame = Some(f.clone());
            out.push(f);
        }
        out
    }

    /// Replays the chunk with the satellite's disclosures, closing packet
    /// windows exactly where the satellite did.
    fn absorb_chunk(
        &mut self,
        bc: &BasisComparison,
    ) -> Result<Vec<(PacketAnnouncement, BitString, BitString, WindowStats)>, String> {
        let events = self.chunk_events(self.next_chunk);
        let matched = unpack("matched", &bc.matched, events.len()).map_err(|e| e.to_string())?;
        if bc.classes.len() != matched.count_ones() {
            return Err("class list does not match the matched bitmap".into());
        }
        let classes: Vec<SourceClass> = bc
            .classes
            .iter()
            .map(|&c| class_from_wire(c).ok_or(format!("bad class {c}")))
            .collect::<Result<_, _>>()?;
        let decoys = classes.iter().filter(|c| is_decoy(**c)).count();
        let decoy_bits = unpack("decoy_bits", &bc.decoy_bits, decoys).map_err(|e| e.to_string())?;
        let sift = self.config.sift;
        let mut announcements = bc.packets.iter();
        let mut completed = Vec::new();
        let (mut k, mut d) = (0, 0);
        for (i, ev) in events.iter().enumerate() {
            if !matched.get(i) {
                continue;
            }
            let class = classes[k];
            k += 1;
            let c = class.index();
            self.window.tally.detected[c] += 1;
            if is_decoy(class) {
                self.window.tally.errors[c] += (decoy_bits.get(d) != ev.measured_bit) as u64;
                d += 1;
            }
            if !is_signal(class) {
                continue;
            }
            if is_sampled(sift.sample_seed, ev.sequence, sift.sample_fraction) {
                self.window.sample_size[c] += 1;
                continue;
            }
            self.key.push(ev.measured_bit);
            self.key_is_z.push(class == SourceClass::SignalZ);
            if self.key.len() == sift.packet_bits {
                let ann = announcements.next().ok_or("packet completed without announcement")?;
                let end = ev.sequence + 1;
                if ann.packet_id != self.next_packet || ann.start != self.window.start || ann.end != end {
                    return Err(format!(
                        "packet {} window [{}, {}) disagrees with local [{}, {end})",
                        ann.packet_id, ann.start, ann.end, self.window.start
                    ));
                }
                self.next_packet += 1;
                let mut window = std::mem::replace(
                    &mut self.window,
                    WindowStats {
                        start: end,
                        ..Default::default()
                    },
                );
                window.end = end;
                window.tally.sent = ann.sent;
                window.sample_errors = ann.sample_errors;
                completed.push((
                    ann.clone(),
                    std::mem::take(&mut self.key),
                    std::mem::take(&mut self.key_is_z),
                    window,
                ));
            }
        }
        if announcements.next().is_some() {
            return Err("announcement for a packet not completed locally".into());
        }
        Ok(completed)
    }

    fn decode_packets(&mut self, items: Vec<(PacketAnnouncement, BitString, BitString, WindowStats)>) {
        let codes = &self.codes;
        let results = self.exec.map_slice(&items, |(ann, raw, _, _)| {
            let rung = ann.rung?;
            if rung as usize >= super::ldpc::DESIGN_QBERS.len() {
                return Some(Err(0));
            }
            let desc = CodeDescriptor {
                rung,
                block_len: raw.len() as u32,
            };
            let code = codes.get(desc);
            let m = code.syndrome_len();
            let Ok(syndrome) = unpack("syndrome", &ann.syndrome, m) else {
                return Some(Err(m as u64));
            };
            Some(
                code.decode(raw, &syndrome, desc.design_qber())
                    .map(|c| (c, m as u64))
                    .map_err(|_| m as u64),
            )
        });
        for ((ann, raw, is_z, mut window), result) in items.into_iter().zip(results) {
            let mut record = PacketRecord {
                packet_id: ann.packet_id,
                start: ann.start,
                end: ann.end,
                sampled_qber: ann.sampled_qber,
                rung: ann.rung,
                syndrome_bits: 0,
                corrected_errors: None,
                status: PacketStatus::NoCode,
            };
            match result {
                None => {}
                Some(Err(m)) => {
                    record.syndrome_bits = m;
                    record.status = PacketStatus::DecodeFailed;
                }
                Some(Ok((corrected, m))) => {
                    record.syndrome_bits = m;
                    let flips = raw.xor(&corrected);
                    let z_flips = flips.iter().zip(is_z.iter()).filter(|(f, z)| *f && *z).count() as u64;
                    let total = flips.count_ones() as u64;
                    for (class, n) in [(SourceClass::SignalZ, z_flips), (SourceClass::SignalX, total - z_flips)] {
                        window.tally.errors[class.index()] += window.sample_errors[class.index()] + n;
                    }
                    record.corrected_errors = Some(total);
                    record.status = PacketStatus::Leftover;
                    self.ready.push_back(ReadyPacket {
                        id: ann.packet_id,
                        bits: corrected,
                        window,
                        syndrome_bits: m,
                    });
                }
            }
            self.packets.push(record);
        }
    }

    fn packets_per_block(&self) -> usize {
        self.config.block_bits / self.config.sift.packet_bits
    }

    fn form_blocks(&mut self) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        while self.ready.len() >= self.packets_per_block() {
            let members: Vec<ReadyPacket> = self.ready.drain(..self.packets_per_block()).collect();
            match self.open_block(members) {
                Ok(frame) => out.push(frame),
                Err(reason) => {
                    self.abort(reason);
                    break;
                }
            }
        }
        out
    }

    fn open_block(&mut self, members: Vec<ReadyPacket>) -> Result<Vec<u8>, AbortReason> {
        let block_id = self.next_block;
        self.next_block += 1;
        let mut tally = DecoyTally::default();
        let mut input = BitString::with_capacity(self.config.block_bits);
        let mut leakage = Leakage {
            auth_bits: 2 * SLOT_BITS,
            ..Default::default()
        };
        for p in &members {
            tally.add(&p.window.tally);
            input.extend_from(&p.bits);
            leakage.syndrome_bits += p.syndrome_bits;
            leakage.sample_bits_attributed += p.window.sampled_signal();
        }
        if self.config.charge_sample_disclosure {
            leakage.sample_bits_charged = leakage.sample_bits_attributed;
        }
        let key_bits = input.len() as u64;
        let lec = leakage.total() as f64;
        let (analysis, analysis_error) =
            match analyze_block(block_id, &tally, &self.config.source, self.config.bound, key_bits, lec) {
                Ok(mut r) => {
                    let detected = tally.group_detected(IntensityGroup::Signal).max(1);
                    let q = tally.group_errors(IntensityGroup::Signal) as f64 / detected as f64;
                    r.lec_model = model_leakage(super::ldpc::RECONCILIATION_EFFICIENCY, q, key_bits).ok();
                    (Some(r), None)
                }
                Err(e) => (None, Some(e.to_string())),
            };
        let final_length = analysis.as_ref().map_or(0, |r| r.r.min(key_bits));
        let mut hash_seed = [0u8; 32];
        stream(self.seed, domain::PA_SEED, block_id).fill_bytes(&mut hash_seed);
        let key = privacy_amplify(&input, final_length as usize, &hash_seed).expect("length capped at input");
        let crc = key_crc(&key);
        let packet_ids: Vec<u64> = members.iter().map(|p| p.id).collect();
        let ins = Instruction::Block {
            block_id,
            packet_ids: packet_ids.clone(),
            final_length,
            hash_seed,
        };
        let payload = messages::encode(&ins).expect("encodable");
        let mut frame = Frame::new(FrameType::PaInstruction, self.session_id, block_sequence(block_id), payload);
        let tag = self
            .signer
            .sign(&frame.signed_bytes(), KeySlot::Instruction { block: block_id })
            .map_err(|e| AbortReason::Authentication(e.to_string()))?;
        frame.tag = Some(tag);
        let bytes = frame.encode();
        for rec in self.packets.iter_mut().filter(|r| packet_ids.contains(&r.packet_id)) {
            rec.status = PacketStatus::Consumed { block_id };
        }
        self.block_records.push(BlockRecord {
            block_id,
            packet_ids,
            sifted_bits: key_bits,
            final_length,
            leakage,
            analysis,
            analysis_error,
            status: BlockStatus::AwaitingFeedback,
        });
        self.blocks.insert(block_id, GroundBlock { key, crc, frame: bytes.clone() });
        Ok(bytes)
    }

    /// After the last chunk: corrected packets short of a full block are dropped.
    fn finish_packets(&mut self) {
        self.ready.clear();
    }

    fn record_mut(&mut self, block_id: u64) -> Option<&mut BlockRecord> {
        self.block_records.iter_mut().find(|r| r.block_id == block_id)
    }

    fn on_feedback(&mut self, frame: &Frame, now: f64) -> Vec<Vec<u8>> {
        let fb: Feedback = match messages::decode(&frame.payload) {
            Ok(m) => m,
            Err(_) => {
                self.stats.malformed += 1;
                return Vec::new();
            }
        };
        let Some(tag) = frame.tag else {
            return Vec::new();
        };
        let signed = frame.signed_bytes();
        match fb {
            Feedback::Block { block_id, outcome } => {
                let awaiting = self
                    .block_records
                    .iter()
                    .any(|r| r.block_id == block_id && r.status == BlockStatus::AwaitingFeedback);
                if !awaiting || frame.sequence != block_sequence(block_id) {
                    self.stats.duplicates += 1;
                    return Vec::new();
                }
                let status = if !self.signer.verify(&signed, &tag, KeySlot::Feedback { block: block_id }) {
                    self.stats.auth_failures += 1;
                    BlockStatus::AuthenticationFailed
                } else {
                    match outcome {
                        BlockOutcome::Accepted { crc } if crc == self.blocks[&block_id].crc => BlockStatus::Verified,
                        BlockOutcome::Accepted { .. } => BlockStatus::CrcMismatch,
                        BlockOutcome::Rejected(RejectReason::AuthenticationFailed) => BlockStatus::AuthenticationFailed,
                        BlockOutcome::Rejected(r) => BlockStatus::Rejected(r.to_string()),
                    }
                };
                if status != BlockStatus::Verified {
                    log::info!("ground: block {block_id} discarded ({status:?})");
                }
                self.record_mut(block_id).expect("awaiting block has a record").status = status;
                self.last_progress = now;
                Vec::new()
            }
            Feedback::Ack { blocks } => {
                if self.state != GroundState::Settling || frame.sequence != COMMIT_SEQUENCE {
                    self.stats.duplicates += 1;
                    return Vec::new();
                }
                if !self.signer.verify(&signed, &tag, KeySlot::Ack) {
                    self.stats.auth_failures += 1;
                    return Vec::new();
                }
                let committed = self.commit.as_ref().map(|c| c.0.clone()).unwrap_or_default();
                if blocks != committed {
                    log::warn!("ground: acknowledgement lists {} of {} committed blocks", blocks.len(), committed.len());
                }
                for d in &blocks {
                    let Some(b) = self.blocks.get(&d.block_id) else { continue };
                    if b.crc != d.crc || !committed.contains(d) {
                        continue;
                    }
                    self.finals.push(FinalKey {
                        block_id: d.block_id,
                        key: b.key.clone(),
                    });
                    self.record_mut(d.block_id).expect("committed block has a record").status = BlockStatus::Finalized;
                }
                for rec in &mut self.block_records {
                    if rec.status == BlockStatus::Verified {
                        rec.status = BlockStatus::Unsettled;
                    }
                }
                self.state = GroundState::Done;
                self.last_progress = now;
                Vec::new()
            }
        }
    }

    fn maybe_commit(&mut self, now: f64) -> Option<Vec<u8>> {
        if self.state != GroundState::Running || !self.key_info_done {
            return None;
        }
        if self.block_records.iter().any(|r| r.status == BlockStatus::AwaitingFeedback) {
            return None;
        }
        let digests: Vec<BlockDigest> = self
            .block_records
            .iter()
            .filter(|r| r.status == BlockStatus::Verified)
            .map(|r| BlockDigest {
                block_id: r.block_id,
                crc: self.blocks[&r.block_id].crc,
            })
            .collect();
        let payload = messages::encode(&Instruction::Commit { blocks: digests.clone() }).expect("encodable");
        let mut frame = Frame::new(FrameType::PaInstruction, self.session_id, COMMIT_SEQUENCE, payload);
        match self.signer.sign(&frame.signed_bytes(), KeySlot::Commit) {
            Ok(tag) => frame.tag = Some(tag),
            Err(e) => {
                self.abort(AbortReason::Authentication(e.to_string()));
                return None;
            }
        }
        let bytes = frame.encode();
        self.commit = Some((digests, bytes.clone()));
        self.state = GroundState::Settling;
        self.last_progress = now;
        Some(bytes)
    }

    pub fn close(self) -> GroundOutcome {
        GroundOutcome {
            state: self.state,
            finals: self.finals,
            packets: self.packets,
            blocks: self.block_records,
            stats: self.stats,
        }
    }
}

pub struct GroundOutcome {
    pub state: GroundState,
    pub finals: Vec<FinalKey>,
    pub packets: Vec<PacketRecord>,
    pub blocks: Vec<BlockRecord>,
    pub stats: RoleStats,
}

/// Per-class counts as a short label map for logs and reports.
pub fn class_map(counts: &ClassCounts) -> BTreeMap<&'static str, u64> {
    SourceClass::ALL.iter().map(|c| (c.label(), counts[c.index()])).collect()
}
