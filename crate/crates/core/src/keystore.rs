//! Binary key files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header (32 bytes): magic "QKDPKEY1" | session_id u64 | block count u64 | total bits u64
//! per block:         block_id u64 | block_size u32 | auth u8 | key bits u64 | key bytes
//! ```
//!
//! `block_size` is the PA input size in sifted bits and `auth` is 1 when the
//! block was settled through the authenticated commit.

use std::io::{self, Read, Write};
use std::path::Path;

use crate::bits::BitString;
use crate::distill::session::FinalKey;

pub const MAGIC: [u8; 8] = *b"QKDPKEY1";
pub const HEADER_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum KeyFileError {
    #[error("not a key file (bad magic)")]
    Magic,
    #[error("key file truncated")]
    Truncated,
    #[error("header says {header} total bits, blocks sum to {blocks}")]
    TotalMismatch { header: u64, blocks: u64 },
    #[error("block {0}: invalid authentication flag")]
    AuthFlag(u64),
    #[error("block {block_id}: key of {bits} bits does not fit in {block_size}-bit block")]
    Oversized { block_id: u64, bits: u64, block_size: u32 },
    #[error("trailing bytes after the last block")]
    Trailing,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyBlock {
    pub block_id: u64,
    pub block_size: u32,
    pub authenticated: bool,
    pub key: BitString,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyFile {
    pub session_id: u64,
    pub blocks: Vec<KeyBlock>,
}

impl KeyFile {
    /// Settled final keys of a session, all with the same PA block size.
    pub fn from_finals(session_id: u64, finals: &[FinalKey], block_size: u32) -> Self {
        Self {
            session_id,
            blocks: finals
                .iter()
                .map(|f| KeyBlock {
                    block_id: f.block_id,
                    block_size,
                    authenticated: true,
                    key: f.key.clone(),
                })
                .collect(),
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.blocks.iter().map(|b| b.key.len() as u64).sum()
    }

    /// All key bits in block order.
    pub fn concatenated(&self) -> BitString {
        let mut out = BitString::with_capacity(self.total_bits() as usize);
        for b in &self.blocks {
            out.extend_from(&b.key);
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&self.session_id.to_le_bytes())?;
        w.write_all(&(self.blocks.len() as u64).to_le_bytes())?;
        w.write_all(&self.total_bits().to_le_bytes())?;
        for b in &self.blocks {
            w.write_all(&b.block_id.to_le_bytes())?;
            w.write_all(&b.block_size.to_le_bytes())?;
            w.write_all(&[b.authenticated as u8])?;
            w.write_all(&(b.key.len() as u64).to_le_bytes())?;
            w.write_all(&b.key.to_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.total_bits() as usize / 8 + 21 * self.blocks.len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, KeyFileError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KeyFileError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(KeyFileError::Magic);
        }
        let session_id = cur.u64()?;
        let count = cur.u64()?;
        let total = cur.u64()?;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let block_id = cur.u64()?;
            let block_size = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
            let authenticated = match cur.take(1)?[0] {
                0 => false,
                1 => true,
                _ => return Err(KeyFileError::AuthFlag(block_id)),
            };
            let bits = cur.u64()?;
            if bits > u64::from(block_size) {
                return Err(KeyFileError::Oversized { block_id, bits, block_size });
            }
            let data = cur.take((bits as usize).div_ceil(8))?;
            let key = BitString::from_bytes(data, bits as usize).ok_or(KeyFileError::Truncated)?;
            blocks.push(KeyBlock { block_id, block_size, authenticated, key });
        }
        if cur.pos != bytes.len() {
            return Err(KeyFileError::Trailing);
        }
        let file = Self { session_id, blocks };
        if file.total_bits() != total {
            return Err(KeyFileError::TotalMismatch { header: total, blocks: file.total_bits() });
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, KeyFileError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], KeyFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(KeyFileError::Truncated)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, KeyFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
