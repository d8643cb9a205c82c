//! Pass-scale detection sampling without materializing every pulse.
//!
//! Within one link sample all pulses share a transmittance, so clicks are
//! drawn by skipping ahead geometrically at the largest per-class click
//! probability and thinning each candidate to its class. Pulses that never
//! click are kept only as per-class counts; counts for part of a sample are
//! resolved by a deterministic dyadic hypergeometric bridge over the
//! undetected pulses, so overlapping queries always agree.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Geometric, Hypergeometric};

use super::{outcome, DetectionEvent, Downlink, LinkError};
use crate::exec::Execution;
use crate::rng::{domain, mix64, stream};
use crate::source::{ClassCounts, PulseCache, PulseRecord, SourceClass};

#[derive(Debug, Clone)]
struct Segment {
    start: u64,
    end: u64,
    /// Sender records of the pulses that clicked, by sequence.
    detected: Vec<PulseRecord>,
    undetected: ClassCounts,
    totals: ClassCounts,
}

/// Sender-side view of a sparsely simulated pass.
///
/// [`PulseCache::lookup`] answers only for pulses that produced a detection;
/// class counts cover every emitted pulse.
#[derive(Debug, Clone)]
pub struct SparsePulseCache {
    segments: Vec<Segment>,
    seed: u64,
    total: u64,
}

#[derive(Debug, Clone)]
pub struct SparsePass {
    /// Ground-side events in sequence order.
    pub events: Vec<DetectionEvent>,
    pub cache: SparsePulseCache,
}

fn sample_segment(downlink: &Downlink, index: usize, seed: u64) -> (Segment, Vec<DetectionEvent>) {
    let (start, end) = downlink.pulse_range(index);
    let n = end - start;
    let source = &downlink.source;
    let mut rng = stream(seed, domain::CHANNEL, index as u64);
    let click: Vec<f64> = SourceClass::ALL
        .iter()
        .map(|&c| downlink.click_probability(index, source.class_intensity(c)))
        .collect();
    let p_max = click.iter().cloned().fold(0.0, f64::max);
    let eta = downlink.samples[index].transmittance;

    let mut detected = Vec::new();
    let mut events = Vec::new();
    let mut det_counts = [0u64; 5];
    if p_max > 0.0 && n > 0 {
        let skip = Geometric::new(p_max.min(1.0)).expect("valid click probability");
        let mut pos = start;
        loop {
            let gap = skip.sample(&mut rng);
            pos = match pos.checked_add(gap) {
                Some(p) if p < end => p,
                _ => break,
            };
            let class = source.class_from_uniform(rng.random());
            let ci = class.index();
            if rng.random::<f64>() * p_max < click[ci] {
                let record = PulseRecord::draw_with_class(pos, class, &mut rng);
                // given a click, the pulse's photon was detected with this probability
                let p_signal = -(-source.class_intensity(class) * eta).exp_m1() / click[ci];
                let signal = rng.random::<f64>() < p_signal;
                events.push(outcome(downlink, &record, signal, &mut rng));
                detected.push(record);
                det_counts[ci] += 1;
            }
            pos += 1;
        }
    }

    // Given the clicks, the rest of the segment is multinomial over classes
    // weighted by the probability of not clicking.
    let weights: Vec<f64> = SourceClass::ALL
        .iter()
        .map(|&c| source.class_probability(c) * (1.0 - click[c.index()]))
        .collect();
    let mut remaining = n - detected.len() as u64;
    let mut mass: f64 = weights.iter().sum();
    let mut undetected = [0u64; 5];
    for i in 0..5 {
        if remaining == 0 || mass <= 0.0 {
            break;
        }
        let p = (weights[i] / mass).clamp(0.0, 1.0);
        let k = if i == 4 || p >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, p).expect("valid binomial").sample(&mut rng)
        };
        undetected[i] = k;
        remaining -= k;
        mass -= weights[i];
    }
    let mut totals = undetected;
    for i in 0..5 {
        totals[i] += det_counts[i];
    }
    (Segment { start, end, detected, undetected, totals }, events)
}

/// Samples every detection of a pass.
pub fn simulate_pass(downlink: &Downlink, seed: u64, exec: Execution) -> Result<SparsePass, LinkError> {
    let parts = exec.map_indexed(downlink.samples.len(), |i| sample_segment(downlink, i, seed));
    let mut segments = Vec::with_capacity(parts.len());
    let mut events = Vec::new();
    for (segment, ev) in parts {
        segments.push(segment);
        events.extend(ev);
    }
    Ok(SparsePass {
        events,
        cache: SparsePulseCache {
            segments,
            seed,
            total: downlink.total_pulses(),
        },
    })
}

/// Splits `counts` (summing to `size`) into a uniformly random subset of
/// `left` items and its complement.
fn split<R: Rng>(counts: &ClassCounts, size: u64, left: u64, rng: &mut R) -> ClassCounts {
    let mut out = [0u64; 5];
    let mut population = size;
    let mut draws = left;
    for i in 0..5 {
        if draws == 0 {
            break;
        }
        let k = if counts[i] == 0 {
            0
        } else if counts[i] == population {
            draws
        } else {
            Hypergeometric::new(population, counts[i], draws)
                .expect("valid hypergeometric")
                .sample(rng)
        };
        out[i] = k;
        population -= counts[i];
        draws -= k;
    }
    out
}

impl SparsePulseCache {
    fn segment_of(&self, sequence: u64) -> Option<usize> {
        if sequence >= self.total {
            return None;
        }
        let i = self.segments.partition_point(|s| s.start <= sequence);
        (i > 0).then(|| i - 1)
    }

    /// Class counts among the first `rank` undetected pulses of a segment.
    fn undetected_prefix(&self, index: usize, rank: u64) -> ClassCounts {
        let seg = &self.segments[index];
        let size: u64 = seg.undetected.iter().sum();
        let (mut lo, mut hi) = (0u64, size);
        let mut counts = seg.undetected;
        let mut acc = [0u64; 5];
        loop {
            if rank <= lo {
                return acc;
            }
            if rank >= hi {
                for i in 0..5 {
                    acc[i] += counts[i];
                }
                return acc;
            }
            let mid = lo + (hi - lo) / 2;
            let node = mix64(mix64(index as u64 ^ mix64(lo)) ^ hi);
            let mut rng = stream(self.seed, domain::BRIDGE, node);
            let left = split(&counts, hi - lo, mid - lo, &mut rng);
            if rank <= mid {
                counts = left;
                hi = mid;
            } else {
                for i in 0..5 {
                    acc[i] += left[i];
                    counts[i] -= left[i];
                }
                lo = mid;
            }
        }
    }

    /// Per-class counts of pulses in `[seg.start, position)`.
    fn prefix_in_segment(&self, index: usize, position: u64) -> ClassCounts {
        let seg = &self.segments[index];
        let position = position.clamp(seg.start, seg.end);
        if position == seg.end {
            return seg.totals;
        }
        let before = seg.detected.partition_point(|r| r.sequence < position);
        let mut out = self.undetected_prefix(index, position - seg.start - before as u64);
        for r in &seg.detected[..before] {
            out[r.class.index()] += 1;
        }
        out
    }

    pub fn detected_pulses(&self) -> usize {
        self.segments.iter().map(|s| s.detected.len()).sum()
    }
}

impl PulseCache for SparsePulseCache {
    fn total_pulses(&self) -> u64 {
        self.total
    }

    fn lookup(&self, sequence: u64) -> Option<PulseRecord> {
        let seg = &self.segments[self.segment_of(sequence)?];
        seg.detected
            .binary_search_by_key(&sequence, |r| r.sequence)
            .ok()
            .map(|i| seg.detected[i])
    }

    fn class_counts(&self, start: u64, end: u64) -> ClassCounts {
        let end = end.min(self.total);
        let mut out = [0u64; 5];
        if start >= end {
            return out;
        }
        let first = self.segment_of(start).expect("start is in range");
        let last = self.segment_of(end - 1).expect("end is in range");
        for i in first..=last {
            let seg = &self.segments[i];
            let hi = if end >= seg.end { seg.totals } else { self.prefix_in_segment(i, end) };
            let lo = if start <= seg.start { [0; 5] } else { self.prefix_in_segment(i, start) };
            for k in 0..5 {
                out[k] += hi[k] - lo[k];
            }
        }
        out
    }
}
