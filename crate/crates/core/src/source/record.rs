//! Compact binary persistence of pulse streams.
//!
//! Layout: 16-byte header (`b"QPLS"`, `u32` version, `u64` record count, all
//! little-endian) followed by fixed 9-byte records: the `u64` sequence number
//! and one packed byte (bits 0-2 class index, bit 3 basis X, bit 4 has-bit,
//! bit 5 bit value).

use std::io::{self, Read, Write};

use super::{Basis, PulseRecord, SourceClass};

const MAGIC: &[u8; 4] = b"QPLS";
const VERSION: u32 = 1;
pub const RECORD_LEN: usize = 9;

#[derive(Debug, thiserror::Error)]
pub enum RecordFormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a pulse record stream (bad magic)")]
    BadMagic,
    #[error("unsupported record format version {0}")]
    Version(u32),
    #[error("record {index}: invalid packed byte {byte:#04x}")]
    BadRecord { index: u64, byte: u8 },
}

fn pack(r: &PulseRecord) -> u8 {
    let mut b = r.class.index() as u8;
    if r.basis.as_bit() {
        b |= 1 << 3;
    }
    if let Some(v) = r.bit {
        b |= 1 << 4;
        if v {
            b |= 1 << 5;
        }
    }
    b
}

fn unpack(sequence: u64, b: u8, index: u64) -> Result<PulseRecord, RecordFormatError> {
    let bad = RecordFormatError::BadRecord { index, byte: b };
    if b >> 6 != 0 {
        return Err(bad);
    }
    let class = SourceClass::from_index((b & 0b111) as usize).ok_or(bad)?;
    let basis = Basis::from_bit(b & (1 << 3) != 0);
    let has_bit = b & (1 << 4) != 0;
    let bit = has_bit.then_some(b & (1 << 5) != 0);
    let consistent = match class.basis() {
        Some(cb) => cb == basis && has_bit,
        None => !has_bit,
    };
    if !consistent {
        return Err(RecordFormatError::BadRecord { index, byte: b });
    }
    Ok(PulseRecord {
        sequence,
        class,
        basis,
        bit,
    })
}

pub fn write_pulse_records<W: Write>(mut w: W, records: &[PulseRecord]) -> Result<(), RecordFormatError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(records.len().min(1 << 16) * RECORD_LEN);
    for chunk in records.chunks(1 << 16) {
        buf.clear();
        for r in chunk {
            buf.extend_from_slice(&r.sequence.to_le_bytes());
            buf.push(pack(r));
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_pulse_records<R: Read>(mut r: R) -> Result<Vec<PulseRecord>, RecordFormatError> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(RecordFormatError::BadMagic);
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(RecordFormatError::Version(version));
    }
    let count = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let mut out = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut rec = [0u8; RECORD_LEN];
    for index in 0..count {
        r.read_exact(&mut rec)?;
        let seq = u64::from_le_bytes(rec[..8].try_into().expect("8 bytes"));
        out.push(unpack(seq, rec[8], index)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Execution;
    use crate::source::{prepare_pulses, SourceParams};
    use proptest::prelude::*;

    #[test]
    fn layout_is_fixed_width() {
        let pulses = prepare_pulses(10, &SourceParams::default(), 3, Execution::Sequential).unwrap();
        let mut buf = Vec::new();
        write_pulse_records(&mut buf, &pulses).unwrap();
        assert_eq!(buf.len(), 16 + 10 * RECORD_LEN);
        assert_eq!(&buf[..4], b"QPLS");
        assert_eq!(&buf[16..24], &0u64.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let pulses = prepare_pulses(4, &SourceParams::default(), 3, Execution::Sequential).unwrap();
        let mut buf = Vec::new();
        write_pulse_records(&mut buf, &pulses).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_pulse_records(&bad[..]), Err(RecordFormatError::BadMagic)));
        let mut bad = buf.clone();
        bad[16 + 8] = 0xFF;
        assert!(matches!(
            read_pulse_records(&bad[..]),
            Err(RecordFormatError::BadRecord { index: 0, .. })
        ));
        assert!(read_pulse_records(&buf[..buf.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(seed in any::<u64>(), n in 1usize..300) {
            let pulses = prepare_pulses(n, &SourceParams::default(), seed, Execution::Sequential).unwrap();
            let mut buf = Vec::new();
            write_pulse_records(&mut buf, &pulses).unwrap();
            prop_assert_eq!(read_pulse_records(&buf[..]).unwrap(), pulses);
        }
    }
}
