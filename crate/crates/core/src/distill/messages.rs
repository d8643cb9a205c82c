//! Frame payloads.
//!
//! Payloads are postcard-encoded (varint integers), so sequence numbers are
//! sent as deltas and per-event flags as packed bitmaps in [`BitString`]
//! byte order.

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::bits::BitString;
use crate::source::ClassCounts;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MessageError {
    #[error("payload encoding failed: {0}")]
    Encode(String),
    #[error("payload decoding failed: {0}")]
    Decode(String),
    #[error("bitmap `{field}` holds {got} bytes, {expected_bits} bits expected")]
    Bitmap {
        field: &'static str,
        expected_bits: usize,
        got: usize,
    },
}

pub fn encode<T: Serialize>(msg: &T) -> Result<Vec<u8>, MessageError> {
    postcard::to_stdvec(msg).map_err(|e| MessageError::Encode(e.to_string()))
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, MessageError> {
    postcard::from_bytes(bytes).map_err(|e| MessageError::Decode(e.to_string()))
}

pub fn unpack(field: &'static str, bytes: &[u8], bits: usize) -> Result<BitString, MessageError> {
    if bytes.len() != bits.div_ceil(8) {
        return Err(MessageError::Bitmap {
            field,
            expected_bits: bits,
            got: bytes.len(),
        });
    }
    BitString::from_bytes(bytes, bits).ok_or(MessageError::Bitmap {
        field,
        expected_bits: bits,
        got: bytes.len(),
    })
}

/// Ground to satellite: one chunk of detection records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginalKeyInfo {
    pub chunk: u32,
    pub last: bool,
    /// Sequence numbers, each relative to the previous one (the first to 0).
    pub seq_deltas: Vec<u64>,
    /// Measured basis per event, set for X.
    pub bases: Vec<u8>,
    /// QBER-sample flag per event.
    pub sampled: Vec<u8>,
    /// Measured bits of the flagged events, in order.
    pub sample_bits: Vec<u8>,
}

impl OriginalKeyInfo {
    pub fn sequences(&self) -> Vec<u64> {
        let mut seq = 0u64;
        self.seq_deltas
            .iter()
            .map(|d| {
                seq = seq.wrapping_add(*d);
                seq
            })
            .collect()
    }
}

/// Satellite's description of one completed sifted packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketAnnouncement {
    pub packet_id: u64,
    /// Pulse window `[start, end)` the packet's statistics cover.
    pub start: u64,
    pub end: u64,
    pub sent: ClassCounts,
    /// Bit errors among sampled signal events, per class.
    pub sample_errors: ClassCounts,
    pub sampled_qber: f64,
    /// Ladder rung, `None` when the QBER rules the packet out.
    pub rung: Option<u8>,
    pub syndrome: Vec<u8>,
}

/// Satellite to ground: sifting result for one OriginalKeyInfo chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisComparison {
    pub chunk: u32,
    pub last: bool,
    /// Matched-basis flag per event of the chunk.
    pub matched: Vec<u8>,
    /// Source class index of each matched event.
    pub classes: Vec<u8>,
    /// Prepared bits of matched decoy events, in order.
    pub decoy_bits: Vec<u8>,
    /// Events whose sequence number was not in the pulse cache.
    pub dropped: u32,
    pub packets: Vec<PacketAnnouncement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockDigest {
    pub block_id: u64,
    pub crc: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instruction {
    Block {
        block_id: u64,
        packet_ids: Vec<u64>,
        final_length: u64,
        hash_seed: [u8; 32],
    },
    /// Blocks whose feedback CRC matched; everything else is dropped.
    Commit { blocks: Vec<BlockDigest> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    UnknownPacket,
    PacketReused,
    LengthExceedsInput,
    AuthenticationFailed,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RejectReason::UnknownPacket => "unknown packet",
            RejectReason::PacketReused => "packet already consumed",
            RejectReason::LengthExceedsInput => "final length exceeds block",
            RejectReason::AuthenticationFailed => "authentication failed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feedback {
    Block { block_id: u64, outcome: BlockOutcome },
    /// Blocks the satellite finalized on receiving the commit.
    Ack { blocks: Vec<BlockDigest> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockOutcome {
    Accepted { crc: u32 },
    Rejected(RejectReason),
}

/// CRC that both sides compare after privacy amplification.
pub fn key_crc(key: &BitString) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&(key.len() as u64).to_le_bytes());
    h.update(&key.to_bytes());
    h.finalize()
}
