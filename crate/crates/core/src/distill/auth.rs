//! One-time authentication of signed frames.
//!
//! Every signed message draws a fresh 256-bit one-time key from a pool both
//! parties pre-share: 128 bits key the polynomial-evaluation universal hash
//! over GF(2^130 - 5), the other 128 bits pad the hash value. A key slot is
//! derived from the message's role in the protocol, and a usage ledger refuses
//! to sign a second, different message with the same slot.

use std::collections::HashMap;

use poly1305::universal_hash::KeyInit;
use poly1305::Poly1305;
use rand::RngCore;
use subtle::ConstantTimeEq;

use crate::rng::{domain, stream};

pub use super::frame::{Tag, TAG_LEN};

/// Pool bytes consumed per signed message.
pub const SLOT_BYTES: usize = 32;
/// Pool bits charged to leakage per signed message.
pub const SLOT_BITS: u64 = (SLOT_BYTES * 8) as u64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    #[error("authentication pool exhausted: slot {slot} needs bytes up to {needed}, pool holds {available}")]
    PoolExhausted {
        slot: u64,
        needed: usize,
        available: usize,
    },
    #[error("key slot {0} already signed a different message")]
    SlotReused(u64),
}

/// Protocol role of a signed message; fixes which pool slot keys it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeySlot {
    Commit,
    Ack,
    Instruction { block: u64 },
    Feedback { block: u64 },
}

impl KeySlot {
    pub fn index(self) -> u64 {
        match self {
            KeySlot::Commit => 0,
            KeySlot::Ack => 1,
            KeySlot::Instruction { block } => 2 + 2 * block,
            KeySlot::Feedback { block } => 3 + 2 * block,
        }
    }
}

/// Pre-shared authentication key material.
#[derive(Clone)]
pub struct KeyPool {
    bytes: Vec<u8>,
}

impl std::fmt::Debug for KeyPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeyPool({} bytes)", self.bytes.len())
    }
}

impl KeyPool {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    /// Simulated out-of-band bootstrap: both parties call this with the same seed.
    pub fn bootstrap(seed: u64, slots: usize) -> Self {
        let mut bytes = vec![0u8; slots * SLOT_BYTES];
        stream(seed, domain::AUTH_POOL, 0).fill_bytes(&mut bytes);
        Self { bytes }
    }

    /// Appends fresh key material, e.g. taken from produced final key.
    pub fn replenish(&mut self, bytes: &[u8]) {
        self.bytes.extend_from_slice(bytes);
    }

    pub fn len_bytes(&self) -> usize {
        self.bytes.len()
    }

    pub fn slots(&self) -> usize {
        self.bytes.len() / SLOT_BYTES
    }

    fn slot_key(&self, slot: KeySlot) -> Result<&[u8], AuthError> {
        let start = usize::try_from(slot.index())
            .ok()
            .and_then(|i| i.checked_mul(SLOT_BYTES))
            .unwrap_or(usize::MAX - SLOT_BYTES);
        let end = start + SLOT_BYTES;
        self.bytes.get(start..end).ok_or(AuthError::PoolExhausted {
            slot: slot.index(),
            needed: end,
            available: self.bytes.len(),
        })
    }
}

/// Tag of `message` under the one-time key `key` (32 bytes: hash key, pad).
pub fn one_time_tag(message: &[u8], key: &[u8]) -> Tag {
    let mac = Poly1305::new_from_slice(key).expect("poly1305 key is 32 bytes");
    let tag = mac.compute_unpadded(message);
    let mut out = [0u8; TAG_LEN];
    out.copy_from_slice(&tag);
    out
}

pub fn authenticate(message: &[u8], pool: &KeyPool, slot: KeySlot) -> Result<Tag, AuthError> {
    Ok(one_time_tag(message, pool.slot_key(slot)?))
}

/// Constant-time tag check. A missing slot verifies false.
pub fn verify(message: &[u8], tag: &Tag, pool: &KeyPool, slot: KeySlot) -> bool {
    match pool.slot_key(slot) {
        Ok(key) => one_time_tag(message, key).ct_eq(tag).into(),
        Err(_) => false,
    }
}

/// Signing side of the pool, which remembers what each slot has signed.
/// Re-signing the identical message (a retransmission) returns the same tag.
#[derive(Debug, Clone)]
pub struct Signer {
    pool: KeyPool,
    used: HashMap<u64, Vec<u8>>,
}

impl Signer {
    pub fn new(pool: KeyPool) -> Self {
        Self {
            pool,
            used: HashMap::new(),
        }
    }

    pub fn pool(&self) -> &KeyPool {
        &self.pool
    }

    pub fn sign(&mut self, message: &[u8], slot: KeySlot) -> Result<Tag, AuthError> {
        match self.used.get(&slot.index()) {
            Some(prev) if prev.as_slice() != message => {
                return Err(AuthError::SlotReused(slot.index()))
            }
            _ => {}
        }
        let tag = authenticate(message, &self.pool, slot)?;
        self.used.insert(slot.index(), message.to_vec());
        Ok(tag)
    }

    pub fn verify(&self, message: &[u8], tag: &Tag, slot: KeySlot) -> bool {
        verify(message, tag, &self.pool, slot)
    }

    /// Distinct slots consumed so far.
    pub fn slots_used(&self) -> usize {
        self.used.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rfc8439_vector() {
        let key: [u8; 32] = [
            0x85, 0xd6, 0xbe, 0x78, 0x57, 0x55, 0x6d, 0x33, 0x7f, 0x44, 0x52, 0xfe, 0x42, 0xd5,
            0x06, 0xa8, 0x01, 0x03, 0x80, 0x8a, 0xfb, 0x0d, 0xb2, 0xfd, 0x4a, 0xbf, 0xf6, 0xaf,
            0x41, 0x49, 0xf5, 0x1b,
        ];
        let tag = one_time_tag(b"Cryptographic Forum Research Group", &key);
        assert_eq!(
            tag,
            [
                0xa8, 0x06, 0x1d, 0xc1, 0x30, 0x51, 0x36, 0xc6, 0xc2, 0x2b, 0x8b, 0xaf, 0x0c, 0x01,
                0x27, 0xa9
            ]
        );
    }

    #[test]
    fn round_trip_verifies() {
        let pool = KeyPool::bootstrap(1, 16);
        let mut signer = Signer::new(pool.clone());
        for block in 0..5 {
            let msg = format!("instruction {block}");
            let slot = KeySlot::Instruction { block };
            let tag = signer.sign(msg.as_bytes(), slot).unwrap();
            assert!(verify(msg.as_bytes(), &tag, &pool, slot));
            assert!(!verify(msg.as_bytes(), &tag, &pool, KeySlot::Feedback { block }));
        }
    }

    #[test]
    fn slot_reuse_rejected() {
        let mut signer = Signer::new(KeyPool::bootstrap(2, 8));
        let slot = KeySlot::Instruction { block: 1 };
        let t1 = signer.sign(b"first", slot).unwrap();
        assert_eq!(signer.sign(b"first", slot).unwrap(), t1);
        assert_eq!(signer.sign(b"second", slot), Err(AuthError::SlotReused(slot.index())));
        assert_eq!(signer.slots_used(), 1);
    }

    #[test]
    fn exhausted_pool() {
        let mut signer = Signer::new(KeyPool::bootstrap(3, 4));
        assert!(signer.sign(b"ok", KeySlot::Feedback { block: 0 }).is_ok());
        assert!(matches!(
            signer.sign(b"x", KeySlot::Instruction { block: 1 }),
            Err(AuthError::PoolExhausted { .. })
        ));
        let mut pool = KeyPool::bootstrap(3, 4);
        pool.replenish(&[7u8; 64]);
        assert_eq!(pool.slots(), 6);
        assert!(authenticate(b"x", &pool, KeySlot::Instruction { block: 1 }).is_ok());
        assert!(!verify(b"x", &[0; 16], &KeyPool::bootstrap(3, 1), KeySlot::Instruction { block: 9 }));
    }

    #[test]
    fn tampering_never_forges() {
        // Forgery probability per attempt is below 8 * ceil(len/16) / 2^106.
        let pool = KeyPool::bootstrap(4, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut accepted = 0u32;
        let mut msg = vec![0u8; 48];
        for trial in 0..1_000_000u64 {
            let slot = KeySlot::Instruction { block: trial % 30 };
            rng.fill_bytes(&mut msg);
            let tag = authenticate(&msg, &pool, slot).unwrap();
            let i = rng.random_range(0..msg.len());
            msg[i] ^= rng.random_range(1..=255u8);
            if verify(&msg, &tag, &pool, slot) {
                accepted += 1;
            }
        }
        assert_eq!(accepted, 0);
    }
}
