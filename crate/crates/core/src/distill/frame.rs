//! Wire format of classical frames.
//!
//! ```text
//! type(1) | session_id(8) | sequence(4) | payload_len(4) | payload | crc32(4) | tag(16)?
//! ```
//!
//! Integers are big-endian. The high bit of the type byte flags a trailing
//! authentication tag. The CRC (CRC-32/ISO-HDLC) covers every byte before it.

use serde::{Deserialize, Serialize};

pub const HEADER_LEN: usize = 17;
pub const CRC_LEN: usize = 4;
pub const TAG_LEN: usize = 16;
const TAG_FLAG: u8 = 0x80;
/// Upper bound on accepted payloads.
pub const MAX_PAYLOAD: usize = 1 << 28;

pub type Tag = [u8; TAG_LEN];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameType {
    OriginalKeyInfo,
    BasisComparisonAndSyndrome,
    PaInstruction,
    PaFeedback,
}

impl FrameType {
    pub fn code(self) -> u8 {
        match self {
            FrameType::OriginalKeyInfo => 1,
            FrameType::BasisComparisonAndSyndrome => 2,
            FrameType::PaInstruction => 3,
            FrameType::PaFeedback => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(FrameType::OriginalKeyInfo),
            2 => Some(FrameType::BasisComparisonAndSyndrome),
            3 => Some(FrameType::PaInstruction),
            4 => Some(FrameType::PaFeedback),
            _ => None,
        }
    }

    /// Frame types that must carry a tag.
    pub fn is_signed(self) -> bool {
        matches!(self, FrameType::PaInstruction | FrameType::PaFeedback)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("frame truncated: {0} bytes")]
    Truncated(usize),
    #[error("unknown frame type {0:#04x}")]
    UnknownType(u8),
    #[error("payload length {declared} does not match frame size")]
    Length { declared: usize },
    #[error("payload too large: {0} bytes")]
    TooLarge(usize),
    #[error("CRC mismatch: computed {computed:#010x}, frame carries {carried:#010x}")]
    Crc { computed: u32, carried: u32 },
    #[error("{0:?} frames must be signed")]
    MissingTag(FrameType),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub session_id: u64,
    pub sequence: u32,
    pub payload: Vec<u8>,
    pub tag: Option<Tag>,
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

impl Frame {
    pub fn new(frame_type: FrameType, session_id: u64, sequence: u32, payload: Vec<u8>) -> Self {
        Self { frame_type, session_id, sequence, payload, tag: None }
    }

    /// Bytes covered by the authentication tag: everything except CRC and tag.
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        self.write_header(&mut out, true);
        out.extend_from_slice(&self.payload);
        out
    }

    fn write_header(&self, out: &mut Vec<u8>, tagged: bool) {
        let flag = if tagged { TAG_FLAG } else { 0 };
        out.push(self.frame_type.code() | flag);
        out.extend_from_slice(&self.session_id.to_be_bytes());
        out.extend_from_slice(&self.sequence.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + CRC_LEN + TAG_LEN);
        self.write_header(&mut out, self.tag.is_some());
        out.extend_from_slice(&self.payload);
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        if let Some(tag) = &self.tag {
            out.extend_from_slice(tag);
        }
        out
    }

    /// Parses and CRC-checks a frame. Tag validity is checked by the receiver.
    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(FrameError::Truncated(bytes.len()));
        }
        let type_byte = bytes[0];
        let frame_type = FrameType::from_code(type_byte & !TAG_FLAG).ok_or(FrameError::UnknownType(type_byte))?;
        let tagged = type_byte & TAG_FLAG != 0;
        let session_id = u64::from_be_bytes(bytes[1..9].try_into().expect("8 bytes"));
        let sequence = u32::from_be_bytes(bytes[9..13].try_into().expect("4 bytes"));
        let len = u32::from_be_bytes(bytes[13..17].try_into().expect("4 bytes")) as usize;
        if len > MAX_PAYLOAD {
            return Err(FrameError::TooLarge(len));
        }
        let expected = HEADER_LEN + len + CRC_LEN + if tagged { TAG_LEN } else { 0 };
        if bytes.len() != expected {
            return Err(FrameError::Length { declared: len });
        }
        let body_end = HEADER_LEN + len;
        let carried = u32::from_be_bytes(bytes[body_end..body_end + CRC_LEN].try_into().expect("4 bytes"));
        let computed = crc32(&bytes[..body_end]);
        if computed != carried {
            return Err(FrameError::Crc { computed, carried });
        }
        let tag = tagged.then(|| {
            let mut t = [0u8; TAG_LEN];
            t.copy_from_slice(&bytes[body_end + CRC_LEN..]);
            t
        });
        if frame_type.is_signed() && tag.is_none() {
            return Err(FrameError::MissingTag(frame_type));
        }
        Ok(Self {
            frame_type,
            session_id,
            sequence,
            payload: bytes[HEADER_LEN..body_end].to_vec(),
            tag,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Bitwise reflected CRC-32, polynomial 0x04C11DB7 (reversed 0xEDB88320).
    fn crc_oracle(bytes: &[u8]) -> u32 {
        let mut crc = 0xFFFF_FFFFu32;
        for &b in bytes {
            crc ^= b as u32;
            for _ in 0..8 {
                crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
            }
        }
        !crc
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc_oracle(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn layout_is_bit_exact() {
        let f = Frame::new(FrameType::BasisComparisonAndSyndrome, 0x0102_0304_0506_0708, 9, vec![0xAA, 0xBB]);
        let b = f.encode();
        assert_eq!(
            &b[..HEADER_LEN],
            &[2, 1, 2, 3, 4, 5, 6, 7, 8, 0, 0, 0, 9, 0, 0, 0, 2]
        );
        assert_eq!(&b[17..19], &[0xAA, 0xBB]);
        assert_eq!(u32::from_be_bytes(b[19..23].try_into().unwrap()), crc_oracle(&b[..19]));
        assert_eq!(b.len(), 23);
        let mut signed = Frame::new(FrameType::PaInstruction, 1, 2, vec![]);
        signed.tag = Some([7; 16]);
        let sb = signed.encode();
        assert_eq!(sb[0], 0x83);
        assert_eq!(sb.len(), HEADER_LEN + CRC_LEN + TAG_LEN);
        assert_eq!(Frame::decode(&sb).unwrap(), signed);
    }

    #[test]
    fn rejects_damage() {
        let f = Frame::new(FrameType::OriginalKeyInfo, 5, 1, b"payload".to_vec());
        let mut b = f.encode();
        b[HEADER_LEN + 2] ^= 0x10;
        assert!(matches!(Frame::decode(&b), Err(FrameError::Crc { .. })));
        assert!(matches!(Frame::decode(&b[..10]), Err(FrameError::Truncated(_))));
        let mut b = f.encode();
        b.push(0);
        assert!(matches!(Frame::decode(&b), Err(FrameError::Length { .. })));
        let mut b = f.encode();
        b[0] = 9;
        assert!(matches!(Frame::decode(&b), Err(FrameError::UnknownType(9))));
        let unsigned = Frame::new(FrameType::PaFeedback, 5, 1, vec![1]).encode();
        assert!(matches!(Frame::decode(&unsigned), Err(FrameError::MissingTag(_))));
    }

    proptest! {
        #[test]
        fn crc_matches_oracle(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            prop_assert_eq!(crc32(&bytes), crc_oracle(&bytes));
        }

        #[test]
        fn round_trip(
            kind in 1u8..=4,
            session in any::<u64>(),
            seq in any::<u32>(),
            payload in proptest::collection::vec(any::<u8>(), 0..300),
            tag in proptest::option::of(any::<[u8; 16]>()),
        ) {
            let frame_type = FrameType::from_code(kind).unwrap();
            let tag = if frame_type.is_signed() { Some(tag.unwrap_or([1; 16])) } else { tag };
            let f = Frame { frame_type, session_id: session, sequence: seq, payload, tag };
            prop_assert_eq!(Frame::decode(&f.encode()).unwrap(), f);
        }

        #[test]
        fn single_bit_flips_detected(
            payload in proptest::collection::vec(any::<u8>(), 1..200),
            pos in any::<usize>(),
            bit in 0u8..8,
        ) {
            let f = Frame::new(FrameType::OriginalKeyInfo, 3, 4, payload);
            let mut b = f.encode();
            let i = pos % (b.len());
            b[i] ^= 1 << bit;
            prop_assert!(Frame::decode(&b).map(|g| g != f).unwrap_or(true));
            prop_assert!(Frame::decode(&b).is_err());
        }
    }
}
