//! Satellite role.
//!
//! Purely reactive: every reply is a function of the frame that triggered it,
//! and replies are cached so that a retransmitted request gets the identical
//! bytes back. Privacy-amplified keys stay pending until the signed commit
//! names them; anything uncommitted when the session closes is discarded.

use std::collections::{BTreeMap, HashMap};

use crate::bits::BitString;
use crate::exec::Execution;
use crate::source::{PulseCache, SourceClass};

use super::auth::{KeySlot, Signer};
use super::frame::{Frame, FrameType};
use super::ldpc::{select_ldpc_code, CodeBook};
use super::messages::{
    self, key_crc, unpack, BasisComparison, BlockDigest, BlockOutcome, Feedback, Instruction,
    OriginalKeyInfo, PacketAnnouncement, RejectReason,
};
use super::privacy::privacy_amplify;
use super::sifting::{is_decoy, is_signal, sample_qber, SiftParams};
use super::session::{block_sequence, FinalKey, ProtocolConfig, RoleStats, COMMIT_SEQUENCE};

struct SatPacket {
    bits: BitString,
    consumed_by: Option<u64>,
}

pub struct SatelliteRole<'a> {
    session_id: u64,
    cache: &'a dyn PulseCache,
    config: ProtocolConfig,
    signer: Signer,
    codes: CodeBook,
    exec: Execution,

    expected_chunk: u32,
    last_reply: Option<(u32, Vec<u8>)>,
    key: BitString,
    window_start: u64,
    sample_size: [u64; 5],
    sample_errors: [u64; 5],
    packets: BTreeMap<u64, SatPacket>,
    next_packet: u64,

    feedback: HashMap<u64, Vec<u8>>,
    pending: BTreeMap<u64, BitString>,
    ack: Option<Vec<u8>>,
    finals: Vec<FinalKey>,
    pub stats: RoleStats,
}

impl<'a> SatelliteRole<'a> {
    pub fn new(
        session_id: u64,
        cache: &'a dyn PulseCache,
        config: ProtocolConfig,
        signer: Signer,
        codes: CodeBook,
        exec: Execution,
    ) -> Self {
        Self {
            session_id,
            cache,
            config,
            signer,
            codes,
            exec,
            expected_chunk: 0,
            last_reply: None,
            key: BitString::new(),
            window_start: 0,
            sample_size: [0; 5],
            sample_errors: [0; 5],
            packets: BTreeMap::new(),
            next_packet: 0,
            feedback: HashMap::new(),
            pending: BTreeMap::new(),
            ack: None,
            finals: Vec::new(),
            stats: RoleStats::default(),
        }
    }

    fn sift(&self) -> SiftParams {
        self.config.sift
    }

    /// Handles one received datagram, returning encoded reply frames.
    pub fn on_datagram(&mut self, bytes: &[u8]) -> Vec<Vec<u8>> {
        let frame = match Frame::decode(bytes) {
            Ok(f) => f,
            Err(e) => {
                log::trace!("satellite drops frame: {e}");
                self.stats.rejected_frames += 1;
                return Vec::new();
            }
        };
        if frame.session_id != self.session_id {
            self.stats.rejected_frames += 1;
            return Vec::new();
        }
        self.stats.accepted_frames += 1;
        let reply = match frame.frame_type {
            FrameType::OriginalKeyInfo => self.on_key_info(&frame),
            FrameType::PaInstruction => self.on_instruction(&frame),
            _ => {
                self.stats.rejected_frames += 1;
                None
            }
        };
        reply.into_iter().collect()
    }

    fn on_key_info(&mut self, frame: &Frame) -> Option<Vec<u8>> {
        let chunk = frame.sequence;
        if let Some((c, reply)) = &self.last_reply {
            if *c == chunk {
                self.stats.duplicates += 1;
                return Some(reply.clone());
            }
        }
        if chunk != self.expected_chunk {
            self.stats.duplicates += 1;
            return None;
        }
        let info: OriginalKeyInfo = match messages::decode(&frame.payload) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("satellite: malformed key info: {e}");
                self.stats.malformed += 1;
                return None;
            }
        };
        if info.chunk != chunk {
            self.stats.malformed += 1;
            return None;
        }
        let reply = match self.sift_chunk(&info) {
            Ok(bc) => bc,
            Err(e) => {
                log::debug!("satellite: {e}");
                self.stats.malformed += 1;
                return None;
            }
        };
        let payload = messages::encode(&reply).expect("encodable");
        let bytes = Frame::new(FrameType::BasisComparisonAndSyndrome, self.session_id, chunk, payload).encode();
        self.expected_chunk += 1;
        self.last_reply = Some((chunk, bytes.clone()));
        Some(bytes)
    }

    fn sift_chunk(&mut self, info: &OriginalKeyInfo) -> Result<BasisComparison, messages::MessageError> {
        let seqs = info.sequences();
        let n = seqs.len();
        let bases = unpack("bases", &info.bases, n)?;
        let sampled = unpack("sampled", &info.sampled, n)?;
        let sample_bits = unpack("sample_bits", &info.sample_bits, sampled.count_ones())?;
        let packet_bits = self.sift().packet_bits;

        let mut matched = BitString::zeros(n);
        let mut classes = Vec::new();
        let mut decoy_bits = BitString::new();
        let mut dropped = 0u32;
        let mut completed: Vec<(u64, u64, u64, BitString, [u64; 5], f64)> = Vec::new();
        let mut sample_idx = 0;
        for (i, &seq) in seqs.iter().enumerate() {
            let flagged = sampled.get(i);
            let ground_bit = if flagged {
                sample_idx += 1;
                Some(sample_bits.get(sample_idx - 1))
            } else {
                None
            };
            let Some(rec) = self.cache.lookup(seq) else {
                dropped += 1;
                continue;
            };
            if rec.basis.as_bit() != bases.get(i) {
                continue;
            }
            matched.set(i, true);
            classes.push(rec.class.index() as u8);
            if is_decoy(rec.class) {
                decoy_bits.push(rec.bit.expect("decoy pulses carry a bit"));
            }
            if !is_signal(rec.class) {
                continue;
            }
            let bit = rec.bit.expect("signal pulses carry a bit");
            if let Some(g) = ground_bit {
                let c = rec.class.index();
                self.sample_size[c] += 1;
                self.sample_errors[c] += (g != bit) as u64;
                continue;
            }
            self.key.push(bit);
            if self.key.len() == packet_bits {
                let end = seq + 1;
                let qber = sample_qber(&self.sample_size, &self.sample_errors);
                let bits = std::mem::replace(&mut self.key, BitString::with_capacity(packet_bits));
                completed.push((self.next_packet, self.window_start, end, bits, self.sample_errors, qber));
                self.next_packet += 1;
                self.window_start = end;
                self.sample_size = [0; 5];
                self.sample_errors = [0; 5];
            }
        }

        let margin = self.config.selection_margin;
        let codes = &self.codes;
        let syndromes = self.exec.map_slice(&completed, |(_, _, _, bits, _, qber)| {
            select_ldpc_code(*qber, margin, bits.len()).ok().map(|d| {
                let code = codes.get(d);
                (d.rung, code.syndrome(bits).expect("packet length matches code"))
            })
        });
        let mut packets = Vec::with_capacity(completed.len());
        for ((id, start, end, bits, sample_errors, qber), syn) in completed.into_iter().zip(syndromes) {
            let (rung, syndrome) = match syn {
                Some((r, s)) => (Some(r), s.to_bytes()),
                None => (None, Vec::new()),
            };
            packets.push(PacketAnnouncement {
                packet_id: id,
                start,
                end,
                sent: self.cache.class_counts(start, end),
                sample_errors,
                sampled_qber: qber,
                rung,
                syndrome,
            });
            // A packet without a usable code can never be named in a block.
            if rung.is_some() {
                self.packets.insert(id, SatPacket { bits, consumed_by: None });
            }
        }
        self.stats.dropped_events += dropped as u64;
        Ok(BasisComparison {
            chunk: info.chunk,
            last: info.last,
            matched: matched.to_bytes(),
            classes,
            decoy_bits: decoy_bits.to_bytes(),
            dropped,
            packets,
        })
    }

    fn on_instruction(&mut self, frame: &Frame) -> Option<Vec<u8>> {
        let ins: Instruction = match messages::decode(&frame.payload) {
            Ok(m) => m,
            Err(_) => {
                self.stats.malformed += 1;
                return None;
            }
        };
        let tag = frame.tag.as_ref()?;
        let signed = frame.signed_bytes();
        match ins {
            Instruction::Block {
                block_id,
                packet_ids,
                final_length,
                hash_seed,
            } => {
                if frame.sequence != block_sequence(block_id) {
                    self.stats.malformed += 1;
                    return None;
                }
                if let Some(reply) = self.feedback.get(&block_id) {
                    self.stats.duplicates += 1;
                    return Some(reply.clone());
                }
                if self.ack.is_some() {
                    return None;
                }
                let outcome = if !self.signer.verify(&signed, tag, KeySlot::Instruction { block: block_id }) {
                    self.stats.auth_failures += 1;
                    BlockOutcome::Rejected(RejectReason::AuthenticationFailed)
                } else {
                    match self.build_block(block_id, &packet_ids, final_length, &hash_seed) {
                        Ok(crc) => BlockOutcome::Accepted { crc },
                        Err(r) => BlockOutcome::Rejected(r),
                    }
                };
                let reply = self.sign_feedback(
                    &Feedback::Block { block_id, outcome },
                    block_sequence(block_id),
                    KeySlot::Feedback { block: block_id },
                )?;
                self.feedback.insert(block_id, reply.clone());
                Some(reply)
            }
            Instruction::Commit { blocks } => {
                if let Some(reply) = &self.ack {
                    self.stats.duplicates += 1;
                    return Some(reply.clone());
                }
                if !self.signer.verify(&signed, tag, KeySlot::Commit) {
                    // Forged commits are ignored; the genuine one is retransmitted.
                    self.stats.auth_failures += 1;
                    return None;
                }
                let finalized: Vec<BlockDigest> = blocks
                    .iter()
                    .filter(|d| self.pending.get(&d.block_id).is_some_and(|k| key_crc(k) == d.crc))
                    .copied()
                    .collect();
                let reply = self.sign_feedback(&Feedback::Ack { blocks: finalized.clone() }, COMMIT_SEQUENCE, KeySlot::Ack)?;
                for d in &finalized {
                    let key = self.pending.remove(&d.block_id).expect("filtered above");
                    self.finals.push(FinalKey { block_id: d.block_id, key });
                }
                self.pending.clear();
                self.ack = Some(reply.clone());
                Some(reply)
            }
        }
    }

    fn build_block(
        &mut self,
        block_id: u64,
        packet_ids: &[u64],
        final_length: u64,
        hash_seed: &[u8; 32],
    ) -> Result<u32, RejectReason> {
        let mut input = BitString::new();
        let mut seen = std::collections::HashSet::new();
        for id in packet_ids {
            let p = self.packets.get(id).ok_or(RejectReason::UnknownPacket)?;
            if p.consumed_by.is_some() || !seen.insert(*id) {
                return Err(RejectReason::PacketReused);
            }
            input.extend_from(&p.bits);
        }
        if final_length > input.len() as u64 {
            return Err(RejectReason::LengthExceedsInput);
        }
        let key = privacy_amplify(&input, final_length as usize, hash_seed)
            .map_err(|_| RejectReason::LengthExceedsInput)?;
        for id in packet_ids {
            self.packets.get_mut(id).expect("checked").consumed_by = Some(block_id);
        }
        let crc = key_crc(&key);
        self.pending.insert(block_id, key);
        Ok(crc)
    }

    fn sign_feedback(&mut self, fb: &Feedback, sequence: u32, slot: KeySlot) -> Option<Vec<u8>> {
        let payload = messages::encode(fb).expect("encodable");
        let mut frame = Frame::new(FrameType::PaFeedback, self.session_id, sequence, payload);
        match self.signer.sign(&frame.signed_bytes(), slot) {
            Ok(tag) => {
                frame.tag = Some(tag);
                Some(frame.encode())
            }
            Err(e) => {
                log::warn!("satellite cannot sign feedback: {e}");
                self.stats.auth_failures += 1;
                None
            }
        }
    }

    /// Ends the session: uncommitted keys are discarded.
    pub fn close(mut self) -> SatelliteOutcome {
        let discarded = self.pending.len();
        self.pending.clear();
        let unused_packets = self.packets.values().filter(|p| p.consumed_by.is_none()).count();
        SatelliteOutcome {
            finals: self.finals,
            settled: self.ack.is_some(),
            discarded_blocks: discarded,
            unused_packets,
            stats: self.stats,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SatelliteOutcome {
    pub finals: Vec<FinalKey>,
    pub settled: bool,
    pub discarded_blocks: usize,
    pub unused_packets: usize,
    pub stats: RoleStats,
}

/// Source class of a matched event as carried in [`BasisComparison::classes`].
pub fn class_from_wire(c: u8) -> Option<SourceClass> {
    SourceClass::from_index(c as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::auth::KeyPool;
    use crate::source::ExplicitPulses;

    fn instruction(ins: &Instruction, sequence: u32, signer: Option<&mut Signer>, slot: KeySlot) -> Vec<u8> {
        let mut frame = Frame::new(FrameType::PaInstruction, 5, sequence, messages::encode(ins).unwrap());
        frame.tag = Some(match signer {
            Some(s) => s.sign(&frame.signed_bytes(), slot).unwrap(),
            None => [7; 16],
        });
        frame.encode()
    }

    fn feedback(bytes: &[u8], ground: &Signer, slot: KeySlot) -> Feedback {
        let frame = Frame::decode(bytes).unwrap();
        assert!(ground.verify(&frame.signed_bytes(), frame.tag.as_ref().unwrap(), slot));
        messages::decode(&frame.payload).unwrap()
    }

    #[test]
    fn instructions_are_authenticated_and_checked() {
        let cache = ExplicitPulses::new(Vec::new());
        let pool = KeyPool::bootstrap(1, 64);
        let mut ground = Signer::new(pool.clone());
        let mut sat = SatelliteRole::new(5, &cache, ProtocolConfig::default(), Signer::new(pool), CodeBook::new(), Execution::Sequential);
        let block = |id| Instruction::Block { block_id: id, packet_ids: vec![0], final_length: 10, hash_seed: [0; 32] };

        let forged = instruction(&block(0), 0, None, KeySlot::Instruction { block: 0 });
        let reply = sat.on_datagram(&forged);
        assert_eq!(
            feedback(&reply[0], &ground, KeySlot::Feedback { block: 0 }),
            Feedback::Block { block_id: 0, outcome: BlockOutcome::Rejected(RejectReason::AuthenticationFailed) }
        );
        // Retransmits get the cached answer.
        assert_eq!(sat.on_datagram(&forged), reply);

        let genuine = instruction(&block(1), 1, Some(&mut ground), KeySlot::Instruction { block: 1 });
        let reply = sat.on_datagram(&genuine);
        assert_eq!(
            feedback(&reply[0], &ground, KeySlot::Feedback { block: 1 }),
            Feedback::Block { block_id: 1, outcome: BlockOutcome::Rejected(RejectReason::UnknownPacket) }
        );

        // Wrong frame sequence for the block id.
        let misnumbered = instruction(&block(2), 9, Some(&mut ground), KeySlot::Instruction { block: 2 });
        assert!(sat.on_datagram(&misnumbered).is_empty());
        assert_eq!(sat.stats.malformed, 1);

        let forged_commit = instruction(&Instruction::Commit { blocks: vec![] }, COMMIT_SEQUENCE, None, KeySlot::Commit);
        assert!(sat.on_datagram(&forged_commit).is_empty());
        let commit = instruction(&Instruction::Commit { blocks: vec![] }, COMMIT_SEQUENCE, Some(&mut ground), KeySlot::Commit);
        let ack = sat.on_datagram(&commit);
        assert_eq!(feedback(&ack[0], &ground, KeySlot::Ack), Feedback::Ack { blocks: vec![] });
        assert_eq!(sat.stats.auth_failures, 2);

        let foreign = Frame::new(FrameType::OriginalKeyInfo, 6, 0, vec![]).encode();
        assert!(sat.on_datagram(&foreign).is_empty());
        assert!(sat.close().settled);
    }
}
