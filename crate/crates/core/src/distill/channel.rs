//! Simulated duplex classical channel: loss, bit corruption, payload
//! tampering with a recomputed CRC, latency jitter (hence reordering) and
//! scheduled outages.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{domain, stream};

use super::frame::{crc32, CRC_LEN, HEADER_LEN};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChannelError {
    #[error("frame loss probability {0} outside [0, 1)")]
    Loss(f64),
    #[error("`{name}` must be a finite non-negative number, got {value}")]
    Param { name: &'static str, value: f64 },
    #[error("repeat interval must be positive, got {0}")]
    RepeatInterval(f64),
    #[error("outage [{0}, {1}] is not an interval")]
    Outage(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    /// Independent per-frame loss in each direction.
    pub frame_loss_prob: f64,
    /// One-way latency in seconds.
    pub latency: f64,
    /// Extra uniform delay in `[0, jitter)`; frames can overtake each other.
    pub jitter: f64,
    pub repeat_interval: f64,
    /// Probability that a delivered frame has one random bit flipped.
    pub corruption_prob: f64,
    /// Probability that a delivered frame has a payload byte changed and its
    /// CRC recomputed, so only authentication can catch it.
    pub tamper_prob: f64,
    /// Windows during which every frame is lost.
    pub outages: Vec<Outage>,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            frame_loss_prob: 0.0,
            latency: 0.005,
            jitter: 0.0,
            repeat_interval: 0.1,
            corruption_prob: 0.0,
            tamper_prob: 0.0,
            outages: Vec::new(),
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(0.0..1.0).contains(&self.frame_loss_prob) {
            return Err(ChannelError::Loss(self.frame_loss_prob));
        }
        for (name, value) in [
            ("latency", self.latency),
            ("jitter", self.jitter),
            ("corruption_prob", self.corruption_prob),
            ("tamper_prob", self.tamper_prob),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(ChannelError::Param { name, value });
            }
        }
        for (name, value) in [("corruption_prob", self.corruption_prob), ("tamper_prob", self.tamper_prob)] {
            if value > 1.0 {
                return Err(ChannelError::Param { name, value });
            }
        }
        if !(self.repeat_interval.is_finite() && self.repeat_interval > 0.0) {
            return Err(ChannelError::RepeatInterval(self.repeat_interval));
        }
        for o in &self.outages {
            if !(o.start.is_finite() && o.end.is_finite() && o.start <= o.end) {
                return Err(ChannelError::Outage(o.start, o.end));
            }
        }
        Ok(())
    }

    fn in_outage(&self, t: f64) -> bool {
        self.outages.iter().any(|o| o.start <= t && t < o.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Ground to satellite.
    Uplink,
    /// Satellite to ground.
    Downlink,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStats {
    pub sent: u64,
    pub lost: u64,
    pub corrupted: u64,
    pub tampered: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub uplink: LinkStats,
    pub downlink: LinkStats,
}

pub struct SimChannel {
    params: ChannelParams,
    rng: ChaCha8Rng,
    pub stats: ChannelStats,
}

impl SimChannel {
    pub fn new(params: ChannelParams, seed: u64) -> Result<Self, ChannelError> {
        params.validate()?;
        Ok(Self {
            params,
            rng: stream(seed, domain::FRAME_CHANNEL, 0),
            stats: ChannelStats::default(),
        })
    }

    pub fn params(&self) -> &ChannelParams {
        &self.params
    }

    /// Sends `bytes` at time `now`; returns the arrival time and the bytes
    /// as delivered, or `None` when the frame is lost.
    pub fn transmit(&mut self, now: f64, dir: Direction, mut bytes: Vec<u8>) -> Option<(f64, Vec<u8>)> {
        let stats = match dir {
            Direction::Uplink => &mut self.stats.uplink,
            Direction::Downlink => &mut self.stats.downlink,
        };
        stats.sent += 1;
        stats.bytes += bytes.len() as u64;
        let lost = self.rng.random_bool(self.params.frame_loss_prob);
        if lost || self.params.in_outage(now) {
            stats.lost += 1;
            return None;
        }
        if !bytes.is_empty() && self.rng.random_bool(self.params.corruption_prob) {
            let bit = self.rng.random_range(0..bytes.len() * 8);
            bytes[bit / 8] ^= 1 << (bit % 8);
            stats.corrupted += 1;
        } else if self.rng.random_bool(self.params.tamper_prob) && tamper(&mut bytes, &mut self.rng) {
            stats.tampered += 1;
        }
        let delay = self.params.latency + self.params.jitter * self.rng.random::<f64>();
        Some((now + delay, bytes))
    }
}

/// Alters one payload byte and rewrites the CRC. Returns false when the
/// frame has no payload to alter.
fn tamper(bytes: &mut [u8], rng: &mut ChaCha8Rng) -> bool {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return false;
    }
    let len = u32::from_be_bytes(bytes[13..17].try_into().expect("4 bytes")) as usize;
    let body_end = HEADER_LEN + len;
    if len == 0 || bytes.len() < body_end + CRC_LEN {
        return false;
    }
    let i = HEADER_LEN + rng.random_range(0..len);
    bytes[i] ^= rng.random_range(1..=255u8);
    let crc = crc32(&bytes[..body_end]);
    bytes[body_end..body_end + CRC_LEN].copy_from_slice(&crc.to_be_bytes());
    true
}
