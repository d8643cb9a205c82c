//! End-to-end distillation session: both roles on one discrete-event
//! scheduler, exchanging frames only through the simulated channel.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::bits::BitString;
use crate::exec::Execution;
use crate::finite_key::{BoundMode, DEFAULT_FAILURE_PROB};
use crate::link::DetectionEvent;
use crate::source::{PulseCache, SourceError, SourceParams};

use super::auth::{KeyPool, Signer};
use super::channel::{ChannelError, ChannelParams, ChannelStats, Direction, SimChannel};
use super::ground::{BlockRecord, BlockStatus, GroundRole, GroundState, PacketRecord};
use super::ldpc::CodeBook;
use super::satellite::SatelliteRole;
use super::sifting::SiftParams;

/// Frame sequence number reserved for the commit and its acknowledgement.
pub const COMMIT_SEQUENCE: u32 = u32::MAX;
/// Default PA block size in sifted bits.
pub const BLOCK_BITS: usize = 500_000;

pub fn block_sequence(block_id: u64) -> u32 {
    (block_id % u64::from(COMMIT_SEQUENCE)) as u32
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error("block size {block} is not a positive multiple of the packet size {packet}")]
    BlockSize { block: usize, packet: usize },
    #[error("`{name}` out of range: {value}")]
    Param { name: &'static str, value: f64 },
    #[error("detection events are not in strictly increasing sequence order at index {0}")]
    Unsorted(usize),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Source(#[from] SourceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub sift: SiftParams,
    pub block_bits: usize,
    /// Detection records per OriginalKeyInfo frame.
    pub chunk_events: usize,
    /// Extra factor on the sampled QBER when picking a ladder rung.
    pub selection_margin: f64,
    /// Taken from the run's source table.
    #[serde(skip)]
    pub source: SourceParams,
    pub bound: BoundMode,
    /// Charge the disclosed QBER-sample bits to `lec` as well.
    pub charge_sample_disclosure: bool,
    /// Ground gives up after this long without progress (seconds).
    pub timeout: f64,
    /// Same, while waiting for the acknowledgement of the commit.
    pub settle_timeout: f64,
    /// Pre-shared authentication pool size, in signed messages.
    pub auth_slots: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            sift: SiftParams::default(),
            block_bits: BLOCK_BITS,
            chunk_events: 1 << 16,
            selection_margin: 1.0,
            source: SourceParams::default(),
            bound: BoundMode::Chernoff {
                xi: DEFAULT_FAILURE_PROB,
            },
            charge_sample_disclosure: false,
            timeout: 30.0,
            settle_timeout: 3600.0,
            auth_slots: 1 << 12,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        let packet = self.sift.packet_bits;
        if packet == 0 || self.block_bits == 0 || self.block_bits % packet != 0 {
            return Err(SessionError::BlockSize {
                block: self.block_bits,
                packet,
            });
        }
        let f = self.sift.sample_fraction;
        if !(0.0..1.0).contains(&f) {
            return Err(SessionError::Param {
                name: "sample_fraction",
                value: f,
            });
        }
        for (name, value) in [
            ("selection_margin", self.selection_margin),
            ("timeout", self.timeout),
            ("settle_timeout", self.settle_timeout),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(SessionError::Param { name, value });
            }
        }
        if self.chunk_events == 0 {
            return Err(SessionError::Param {
                name: "chunk_events",
                value: 0.0,
            });
        }
        self.source.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalKey {
    pub block_id: u64,
    pub key: BitString,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleStats {
    pub accepted_frames: u64,
    /// Failed CRC, wrong session or unexpected type.
    pub rejected_frames: u64,
    pub malformed: u64,
    pub duplicates: u64,
    pub auth_failures: u64,
    pub retransmissions: u64,
    pub dropped_events: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum AbortReason {
    Timeout,
    ProtocolViolation(String),
    Authentication(String),
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AbortReason::Timeout => f.write_str("timeout"),
            AbortReason::ProtocolViolation(s) => write!(f, "protocol violation: {s}"),
            AbortReason::Authentication(s) => write!(f, "authentication: {s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum SessionOutcome {
    MatchedKeys { blocks: usize, final_bits: u64 },
    Abort { reason: AbortReason },
}

/// Everything a session needs besides the two parties' quantum data.
#[derive(Debug, Clone)]
pub struct SessionSetup {
    pub session_id: u64,
    /// Seeds the channel, PA hash seeds and the auth pool bootstrap.
    pub seed: u64,
    pub protocol: ProtocolConfig,
    pub channel: ChannelParams,
    pub exec: Execution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: u64,
    pub outcome: SessionOutcome,
    /// Both sides hold exactly the same set of final keys.
    pub consistent: bool,
    pub sifted_packets: usize,
    pub packets: Vec<PacketRecord>,
    pub blocks: Vec<BlockRecord>,
    pub channel: ChannelStats,
    pub ground: RoleStats,
    pub satellite: RoleStats,
    pub satellite_unused_packets: usize,
    pub satellite_discarded_blocks: usize,
    pub sim_time: f64,
    #[serde(skip)]
    pub ground_keys: Vec<FinalKey>,
    #[serde(skip)]
    pub satellite_keys: Vec<FinalKey>,
}

impl SessionReport {
    pub fn final_bits(&self) -> u64 {
        self.ground_keys.iter().map(|k| k.key.len() as u64).sum()
    }

    pub fn sifted_bits_in_blocks(&self) -> u64 {
        self.blocks
            .iter()
            .filter(|b| b.status == BlockStatus::Finalized)
            .map(|b| b.sifted_bits)
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("session report serializes")
    }
}

#[derive(PartialEq, Eq, PartialOrd, Ord)]
struct Arrival {
    time_ns: u64,
    order: u64,
    to_satellite: bool,
    bytes: Vec<u8>,
}

fn to_ns(t: f64) -> u64 {
    (t * 1e9).round() as u64
}

/// Runs one session to a terminal state.
pub fn run_session(
    setup: &SessionSetup,
    events: &[DetectionEvent],
    cache: &dyn PulseCache,
    codes: &CodeBook,
) -> Result<SessionReport, SessionError> {
    setup.protocol.validate()?;
    if let Some(i) = events.windows(2).position(|w| w[1].sequence <= w[0].sequence) {
        return Err(SessionError::Unsorted(i + 1));
    }
    let mut channel = SimChannel::new(setup.channel.clone(), setup.seed)?;
    let pool = KeyPool::bootstrap(setup.seed, setup.protocol.auth_slots);
    let mut ground = GroundRole::new(
        setup.session_id,
        events,
        setup.protocol.clone(),
        Signer::new(pool.clone()),
        codes.clone(),
        setup.exec,
        setup.seed,
    );
    let mut satellite = SatelliteRole::new(
        setup.session_id,
        cache,
        setup.protocol.clone(),
        Signer::new(pool),
        codes.clone(),
        setup.exec,
    );

    let repeat = setup.channel.repeat_interval;
    let mut queue: BinaryHeap<Reverse<Arrival>> = BinaryHeap::new();
    let mut order = 0u64;
    let mut send = |queue: &mut BinaryHeap<Reverse<Arrival>>, now: f64, up: bool, frames: Vec<Vec<u8>>| {
        let dir = if up { Direction::Uplink } else { Direction::Downlink };
        for f in frames {
            if let Some((t, bytes)) = channel.transmit(now, dir, f) {
                order += 1;
                queue.push(Reverse(Arrival {
                    time_ns: to_ns(t),
                    order,
                    to_satellite: up,
                    bytes,
                }));
            }
        }
    };

    let mut now = 0.0;
    let mut ticks = 1u64;
    let first = ground.start(now);
    send(&mut queue, now, true, first);
    while !ground.is_terminal() {
        let next_tick = ticks as f64 * repeat;
        let due = queue.peek().is_some_and(|Reverse(a)| a.time_ns <= to_ns(next_tick));
        if due {
            let Reverse(a) = queue.pop().expect("peeked");
            now = a.time_ns as f64 * 1e-9;
            if a.to_satellite {
                let replies = satellite.on_datagram(&a.bytes);
                send(&mut queue, now, false, replies);
            } else {
                let replies = ground.on_datagram(&a.bytes, now);
                send(&mut queue, now, true, replies);
            }
        } else {
            now = next_tick;
            ticks += 1;
            let frames = ground.on_tick(now);
            send(&mut queue, now, true, frames);
        }
    }

    let g = ground.close();
    let s = satellite.close();
    let consistent = g.finals == s.finals;
    let outcome = match &g.state {
        GroundState::Done => SessionOutcome::MatchedKeys {
            blocks: g.finals.len(),
            final_bits: g.finals.iter().map(|k| k.key.len() as u64).sum(),
        },
        GroundState::Aborted(reason) => SessionOutcome::Abort { reason: reason.clone() },
        other => unreachable!("loop exits only in a terminal state, got {other:?}"),
    };
    if !consistent {
        log::error!("session {}: final key sets differ between the roles", setup.session_id);
    }
    Ok(SessionReport {
        session_id: setup.session_id,
        outcome,
        consistent,
        sifted_packets: g.packets.len(),
        packets: g.packets,
        blocks: g.blocks,
        channel: channel.stats,
        ground: g.stats,
        satellite: s.stats,
        satellite_unused_packets: s.unused_packets,
        satellite_discarded_blocks: s.discarded_blocks,
        sim_time: now,
        ground_keys: g.finals,
        satellite_keys: s.finals,
    })
}
