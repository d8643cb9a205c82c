//! Basis sifting, QBER sampling and per-packet decoy tallies.
//!
//! [`sift_and_sample`] computes in one pass, with both parties' data in hand,
//! what the satellite and ground roles establish jointly over the classical
//! channel. Matched-basis events are split by a per-sequence sampling flag:
//! sampled events disclose their bits for QBER estimation, unsampled
//! signal-class events become key bits, cut into fixed-size packets. Each
//! packet covers the pulse window `[start, end)` ending just after its last
//! key event, and its decoy tally counts every pulse in that window.

use serde::{Deserialize, Serialize};

use crate::bits::BitString;
use crate::finite_key::DecoyTally;
use crate::link::DetectionEvent;
use crate::rng::{derive_seed, domain, mix64};
use crate::source::{ClassCounts, IntensityGroup, PulseCache, SourceClass};

/// Sifted bits per packet.
pub const PACKET_BITS: usize = 100_000;
/// Share of matched events disclosed for QBER estimation.
pub const SAMPLE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SiftParams {
    pub packet_bits: usize,
    pub sample_fraction: f64,
    /// Set from the run seed, not from configuration.
    #[serde(skip)]
    pub sample_seed: u64,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            packet_bits: PACKET_BITS,
            sample_fraction: SAMPLE_FRACTION,
            sample_seed: 0,
        }
    }
}

/// Ground-side sampling decision for detection `sequence`, independent of how
/// the events are chunked.
pub fn is_sampled(sample_seed: u64, sequence: u64, fraction: f64) -> bool {
    let key = derive_seed(sample_seed, domain::SAMPLING);
    let u = mix64(key ^ sequence.wrapping_mul(0xD6E8_FEB8_6659_FD93)) >> 11;
    (u as f64) * (1.0 / (1u64 << 53) as f64) < fraction
}

pub fn is_signal(class: SourceClass) -> bool {
    class.group() == IntensityGroup::Signal
}

pub fn is_decoy(class: SourceClass) -> bool {
    class.group() == IntensityGroup::Decoy
}

/// Statistics of one packet window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub start: u64,
    pub end: u64,
    pub tally: DecoyTally,
    /// Sampled matched signal events, per class.
    pub sample_size: ClassCounts,
    pub sample_errors: ClassCounts,
}

impl WindowStats {
    pub fn sampled_signal(&self) -> u64 {
        self.sample_size.iter().sum()
    }

    pub fn sampled_qber(&self) -> f64 {
        sample_qber(&self.sample_size, &self.sample_errors)
    }
}

pub fn sample_qber(size: &ClassCounts, errors: &ClassCounts) -> f64 {
    let n: u64 = size.iter().sum();
    if n == 0 {
        0.0
    } else {
        errors.iter().sum::<u64>() as f64 / n as f64
    }
}

/// One packet with both parties' copies.
#[derive(Debug, Clone, PartialEq)]
pub struct SiftedPair {
    pub packet_id: u64,
    pub sender: BitString,
    pub receiver: BitString,
    pub window: WindowStats,
}

impl SiftedPair {
    pub fn sampled_qber(&self) -> f64 {
        self.window.sampled_qber()
    }

    pub fn true_qber(&self) -> f64 {
        self.sender.hamming_distance(&self.receiver) as f64 / self.sender.len().max(1) as f64
    }
}

/// What the QBER sample disclosed, over the whole stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDisclosure {
    /// Ground bits sent in the clear (flagged events, matched or not).
    pub disclosed_bits: u64,
    pub matched: u64,
    pub signal: u64,
    pub signal_errors: u64,
}

#[derive(Debug, Clone, Default)]
pub struct SiftOutcome {
    pub packets: Vec<SiftedPair>,
    pub sample: SampleDisclosure,
    /// Sum of the packet windows.
    pub tally: DecoyTally,
    /// Events whose sequence number is not in the cache.
    pub dropped: u64,
    /// Key bits after the last complete packet, discarded.
    pub leftover_bits: usize,
}

/// Sifts `events` (in increasing sequence order) against the sender cache.
pub fn sift_and_sample(
    events: &[DetectionEvent],
    cache: &dyn PulseCache,
    params: &SiftParams,
) -> SiftOutcome {
    let mut out = SiftOutcome::default();
    let mut window = WindowStats::default();
    let mut sender = BitString::with_capacity(params.packet_bits);
    let mut receiver = BitString::with_capacity(params.packet_bits);
    for ev in events {
        let sampled = is_sampled(params.sample_seed, ev.sequence, params.sample_fraction);
        if sampled {
            out.sample.disclosed_bits += 1;
        }
        let Some(rec) = cache.lookup(ev.sequence) else {
            out.dropped += 1;
            continue;
        };
        if rec.basis != ev.measured_basis {
            continue;
        }
        let c = rec.class.index();
        window.tally.detected[c] += 1;
        let error = rec.bit.is_some_and(|b| b != ev.measured_bit);
        window.tally.errors[c] += error as u64;
        if sampled {
            out.sample.matched += 1;
        }
        if !is_signal(rec.class) {
            continue;
        }
        if sampled {
            window.sample_size[c] += 1;
            window.sample_errors[c] += error as u64;
            out.sample.signal += 1;
            out.sample.signal_errors += error as u64;
            continue;
        }
        sender.push(rec.bit.expect("signal pulses carry a bit"));
        receiver.push(ev.measured_bit);
        if sender.len() == params.packet_bits {
            window.end = ev.sequence + 1;
            window.tally.sent = cache.class_counts(window.start, window.end);
            out.tally.add(&window.tally);
            let next = WindowStats {
                start: window.end,
                ..Default::default()
            };
            out.packets.push(SiftedPair {
                packet_id: out.packets.len() as u64,
                sender: std::mem::replace(&mut sender, BitString::with_capacity(params.packet_bits)),
                receiver: std::mem::replace(&mut receiver, BitString::with_capacity(params.packet_bits)),
                window: std::mem::replace(&mut window, next),
            });
        }
    }
    out.leftover_bits = sender.len();
    out
}
