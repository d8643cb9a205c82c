//! Trusted-relay key exchange between two ground stations.
//!
//! The satellite shares key `MJ` with station J on one orbit and `MN` with
//! station N on a later one. It publishes `MN ^ MJ`; station N strips its
//! own key off and is left holding `MJ`. Every holder of key material keeps
//! it in a [`StationKey`], a one-time ledger that serves each bit at most
//! once.

use serde::{Deserialize, Serialize};

use crate::bits::BitString;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RelayError {
    #[error("key `{0}` has no unused bits")]
    EmptyKey(String),
    #[error("key `{key}` has {available} unused bits, {needed} needed")]
    InsufficientKey { key: String, needed: usize, available: usize },
    #[error("relayed key is {relayed} bits, combined string is {combined}")]
    LengthMismatch { relayed: usize, combined: usize },
}

/// Key material held by one party, consumed strictly front to back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationKey {
    pub station_id: String,
    pub pass_id: String,
    bits: BitString,
    consumed: usize,
}

impl StationKey {
    pub fn new(station_id: impl Into<String>, pass_id: impl Into<String>, bits: BitString) -> Self {
        Self { station_id: station_id.into(), pass_id: pass_id.into(), bits, consumed: 0 }
    }

    fn label(&self) -> String {
        format!("{}/{}", self.station_id, self.pass_id)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn consumed_offset(&self) -> usize {
        self.consumed
    }

    pub fn remaining(&self) -> usize {
        self.bits.len() - self.consumed
    }

    /// Serves the next `n` unused bits and marks them consumed. Returns the
    /// offset they started at along with the bits.
    pub fn take(&mut self, n: usize) -> Result<(usize, BitString), RelayError> {
        if n > self.remaining() {
            return Err(RelayError::InsufficientKey { key: self.label(), needed: n, available: self.remaining() });
        }
        let start = self.consumed;
        self.consumed += n;
        Ok((start, self.bits.slice(start, n)))
    }
}

/// `MN ^ MJ` as published by the satellite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelayedKey {
    pub bits: BitString,
    /// Unused bits of each input when the combine happened.
    pub mj_available: usize,
    pub mn_available: usize,
}

impl RelayedKey {
    /// Bits of the longer input that were left out of the combination.
    pub fn truncated_bits(&self) -> usize {
        self.mj_available.abs_diff(self.mn_available)
    }
}

/// Satellite side: XORs the unused parts of both keys, truncated to the
/// shorter one, and consumes the bits used.
pub fn relay_combine(mj: &mut StationKey, mn: &mut StationKey) -> Result<RelayedKey, RelayError> {
    for k in [&*mj, &*mn] {
        if k.remaining() == 0 {
            return Err(RelayError::EmptyKey(k.label()));
        }
    }
    let (mj_available, mn_available) = (mj.remaining(), mn.remaining());
    let n = mj_available.min(mn_available);
    if mj_available != mn_available {
        log::info!("relay: truncating to {n} bits ({mj_available} vs {mn_available} available)");
    }
    let (_, a) = mj.take(n)?;
    let (_, b) = mn.take(n)?;
    Ok(RelayedKey { bits: b.xor(&a), mj_available, mn_available })
}

/// Station N side: removes its own key from the relayed string.
pub fn recover_key(combined: &RelayedKey, mn: &mut StationKey) -> Result<BitString, RelayError> {
    let n = combined.bits.len();
    if n == 0 {
        return Err(RelayError::EmptyKey("relayed".into()));
    }
    let (_, own) = mn.take(n)?;
    Ok(combined.bits.xor(&own))
}

/// One-time-pad encryption. Refuses, without consuming anything, when the
/// key cannot cover the message.
pub fn otp_encrypt(message: &BitString, key: &mut StationKey) -> Result<BitString, RelayError> {
    if message.is_empty() {
        return Ok(BitString::new());
    }
    let (_, pad) = key.take(message.len())?;
    Ok(message.xor(&pad))
}

pub fn otp_decrypt(ciphertext: &BitString, key: &mut StationKey) -> Result<BitString, RelayError> {
    otp_encrypt(ciphertext, key)
}

/// Hands out 128-bit seed keys for an external AES-128 consumer.
pub fn export_aes128_keys(key: &mut StationKey, count: usize) -> Result<Vec<[u8; 16]>, RelayError> {
    let (_, bits) = key.take(count * 128)?;
    let bytes = bits.to_bytes();
    Ok(bytes.chunks_exact(16).map(|c| c.try_into().expect("16 bytes")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitInfo {
    pub station_id: String,
    pub pass_id: String,
    pub final_bits: usize,
    /// End of the pass, seconds on a common clock.
    pub pass_end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayTranscript {
    pub orbit_a: OrbitInfo,
    pub orbit_b: OrbitInfo,
    pub bits_relayed: usize,
    pub truncated_bits: usize,
    pub message_bits: usize,
    /// Time from the end of the first pass until station B holds the key.
    pub latency_s: f64,
    pub recovered_matches: bool,
    pub message_matches: bool,
}

impl RelayTranscript {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }
}

/// Full two-orbit exchange: station J encrypts `message` with `MJ`, the
/// satellite relays `MJ` to station N, which recovers it and decrypts.
///
/// Each party works on its own copies: the satellite holds both keys, J holds
/// `MJ`, N holds `MN`.
pub fn run_relay(
    orbit_a: OrbitInfo,
    orbit_b: OrbitInfo,
    mj: &BitString,
    mn: &BitString,
    message: &BitString,
) -> Result<(RelayTranscript, BitString), RelayError> {
    let mut station_j = StationKey::new(&orbit_a.station_id, &orbit_a.pass_id, mj.clone());
    let mut sat_mj = station_j.clone();
    let mut sat_mn = StationKey::new(&orbit_b.station_id, &orbit_b.pass_id, mn.clone());
    let mut station_n = sat_mn.clone();

    let relayed = relay_combine(&mut sat_mj, &mut sat_mn)?;
    if message.len() > relayed.bits.len() {
        return Err(RelayError::InsufficientKey {
            key: "relayed".into(),
            needed: message.len(),
            available: relayed.bits.len(),
        });
    }
    let ciphertext = otp_encrypt(message, &mut station_j)?;
    let recovered = recover_key(&relayed, &mut station_n)?;
    let mut n_copy = StationKey::new(&orbit_b.station_id, &orbit_a.pass_id, recovered.clone());
    let decrypted = otp_decrypt(&ciphertext, &mut n_copy)?;

    let transcript = RelayTranscript {
        bits_relayed: relayed.bits.len(),
        truncated_bits: relayed.truncated_bits(),
        message_bits: message.len(),
        latency_s: orbit_b.pass_end_s - orbit_a.pass_end_s,
        recovered_matches: recovered == mj.slice(0, recovered.len()),
        message_matches: &decrypted == message,
        orbit_a,
        orbit_b,
    };
    Ok((transcript, decrypted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> BitString {
        BitString::random(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn key(bits: BitString) -> StationKey {
        StationKey::new("s", "p", bits)
    }

    #[test]
    fn combine_identities() {
        let m = random(8000, 1);
        let r = relay_combine(&mut key(m.clone()), &mut key(m.clone())).unwrap();
        assert_eq!(r.bits.count_ones(), 0);
        let r = relay_combine(&mut key(BitString::zeros(8000)), &mut key(m.clone())).unwrap();
        assert_eq!(r.bits, m);
    }

    #[test]
    fn recover_round_trip_and_consumption() {
        let mj = random(8000, 2);
        let mn = random(8000, 3);
        let mut sat_mn = key(mn.clone());
        let mut sat_mj = key(mj.clone());
        let r = relay_combine(&mut sat_mj, &mut sat_mn).unwrap();
        assert_eq!((sat_mj.remaining(), sat_mn.remaining()), (0, 0));
        let mut station = key(mn);
        assert_eq!(recover_key(&r, &mut station).unwrap(), mj);
        assert_eq!(station.consumed_offset(), 8000);
        // MN is spent, a second recovery must refuse.
        assert!(matches!(recover_key(&r, &mut station), Err(RelayError::InsufficientKey { .. })));
    }

    #[test]
    fn unequal_lengths_truncate() {
        let r = relay_combine(&mut key(random(100, 4)), &mut key(random(250, 5))).unwrap();
        assert_eq!(r.bits.len(), 100);
        assert_eq!(r.truncated_bits(), 150);
        let err = relay_combine(&mut key(BitString::new()), &mut key(random(5, 6))).unwrap_err();
        assert!(matches!(err, RelayError::EmptyKey(_)));
    }

    #[test]
    fn otp_sizes_of_a_two_pass_relay() {
        let mut k = key(random(96_896, 7));
        assert!(otp_encrypt(&random(1_000_000, 8), &mut k).is_err());
        assert_eq!(k.consumed_offset(), 0);
        let msg = random(80_640, 9);
        let ct = otp_encrypt(&msg, &mut k).unwrap();
        assert_eq!(k.remaining(), 96_896 - 80_640);
        let mut k2 = key(k.bits.clone());
        assert_eq!(otp_decrypt(&ct, &mut k2).unwrap(), msg);
        assert_eq!(otp_encrypt(&BitString::new(), &mut k).unwrap(), BitString::new());
        assert_eq!(k.remaining(), 96_896 - 80_640);
    }

    #[test]
    fn aes_export_consumes_128_bits_each() {
        let bits = random(1000, 10);
        let mut k = key(bits.clone());
        let keys = export_aes128_keys(&mut k, 7).unwrap();
        assert_eq!(keys.len(), 7);
        assert_eq!(keys[0].to_vec(), bits.slice(0, 128).to_bytes());
        assert_eq!(keys[6].to_vec(), bits.slice(768, 128).to_bytes());
        assert!(export_aes128_keys(&mut k, 1).is_err());
        assert_eq!(k.remaining(), 104);
    }

    #[test]
    fn two_orbit_relay() {
        let a = OrbitInfo { station_id: "J".into(), pass_id: "a".into(), final_bits: 96_896, pass_end_s: 300.0 };
        let b = OrbitInfo { station_id: "N".into(), pass_id: "b".into(), final_bits: 382_720, pass_end_s: 300.0 + 5400.0 };
        let msg = random(80_640, 13);
        let (t, out) = run_relay(a, b, &random(96_896, 11), &random(382_720, 12), &msg).unwrap();
        assert_eq!(out, msg);
        assert!(t.recovered_matches && t.message_matches);
        assert_eq!(t.bits_relayed, 96_896);
        assert_eq!(t.truncated_bits, 382_720 - 96_896);
        assert_eq!(t.latency_s, 5400.0);
        assert!(t.to_json().contains("\"latency_s\""));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Take(usize),
        Encrypt(usize),
        Export(usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0usize..300).prop_map(Op::Take),
            (0usize..300).prop_map(Op::Encrypt),
            (0usize..3).prop_map(Op::Export),
        ]
    }

    proptest! {
        #[test]
        fn no_bit_is_served_twice(len in 0usize..2000, ops in proptest::collection::vec(op(), 0..40)) {
            let mut k = key(BitString::zeros(len));
            let mut served = vec![false; len];
            for op in ops {
                let before = k.consumed_offset();
                let n = match op {
                    Op::Take(n) => k.take(n).map(|_| n),
                    Op::Encrypt(n) => otp_encrypt(&BitString::zeros(n), &mut k).map(|_| n),
                    Op::Export(c) => export_aes128_keys(&mut k, c).map(|_| c * 128),
                };
                match n {
                    Ok(n) => {
                        prop_assert_eq!(k.consumed_offset(), before + n);
                        for s in &mut served[before..before + n] {
                            prop_assert!(!*s);
                            *s = true;
                        }
                    }
                    Err(_) => prop_assert_eq!(k.consumed_offset(), before),
                }
                prop_assert!(k.consumed_offset() <= k.len());
            }
        }
    }
}
