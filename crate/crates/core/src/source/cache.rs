//! Sender-side pulse cache: what the satellite remembers about every pulse it
//! emitted, queried during sifting and tallying.

use std::collections::HashMap;

use super::PulseRecord;

/// Per-class pulse counts indexed by [`SourceClass::index`](super::SourceClass::index).
pub type ClassCounts = [u64; 5];

pub trait PulseCache: Sync {
    /// Number of pulses emitted; valid sequence numbers are `0..total_pulses()`.
    fn total_pulses(&self) -> u64;

    /// The record for `sequence`, or `None` when it was never cached.
    fn lookup(&self, sequence: u64) -> Option<PulseRecord>;

    /// Emitted pulses per class with sequence numbers in `[start, end)`.
    fn class_counts(&self, start: u64, end: u64) -> ClassCounts;
}

const PREFIX_STRIDE: usize = 4096;

/// A fully materialized pulse stream, as produced by
/// [`prepare_pulses`](super::prepare_pulses) or read back from disk.
#[derive(Debug, Clone)]
pub struct ExplicitPulses {
    records: Vec<PulseRecord>,
    index: Option<HashMap<u64, usize>>,
    prefix: Vec<ClassCounts>,
    total: u64,
}

impl ExplicitPulses {
    pub fn new(records: Vec<PulseRecord>) -> Self {
        let contiguous = records
            .iter()
            .enumerate()
            .all(|(i, r)| r.sequence == i as u64);
        let index = (!contiguous).then(|| {
            records
                .iter()
                .enumerate()
                .map(|(i, r)| (r.sequence, i))
                .collect()
        });
        let total = records.iter().map(|r| r.sequence + 1).max().unwrap_or(0);
        let mut prefix = Vec::with_capacity(records.len() / PREFIX_STRIDE + 2);
        let mut acc = [0u64; 5];
        prefix.push(acc);
        if contiguous {
            for chunk in records.chunks(PREFIX_STRIDE) {
                for r in chunk {
                    acc[r.class.index()] += 1;
                }
                prefix.push(acc);
            }
        }
        Self {
            records,
            index,
            prefix,
            total,
        }
    }

    pub fn records(&self) -> &[PulseRecord] {
        &self.records
    }
}

impl PulseCache for ExplicitPulses {
    fn total_pulses(&self) -> u64 {
        self.total
    }

    fn lookup(&self, sequence: u64) -> Option<PulseRecord> {
        match &self.index {
            None => self.records.get(sequence as usize).copied(),
            Some(ix) => ix.get(&sequence).map(|&i| self.records[i]),
        }
    }

    fn class_counts(&self, start: u64, end: u64) -> ClassCounts {
        let mut out = [0u64; 5];
        if self.index.is_some() {
            for r in &self.records {
                if (start..end).contains(&r.sequence) {
                    out[r.class.index()] += 1;
                }
            }
            return out;
        }
        let end = end.min(self.records.len() as u64) as usize;
        let start = (start as usize).min(end);
        let prefix_at = |pos: usize| -> ClassCounts {
            let block = pos / PREFIX_STRIDE;
            let mut c = self.prefix[block];
            for r in &self.records[block * PREFIX_STRIDE..pos] {
                c[r.class.index()] += 1;
            }
            c
        };
        let hi = prefix_at(end);
        let lo = prefix_at(start);
        for i in 0..5 {
            out[i] = hi[i] - lo[i];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Execution;
    use crate::source::{prepare_pulses, SourceParams};

    #[test]
    fn counts_match_scan() {
        let pulses = prepare_pulses(20_000, &SourceParams::default(), 5, Execution::Sequential).unwrap();
        let cache = ExplicitPulses::new(pulses.clone());
        for &(a, b) in &[(0u64, 20_000u64), (17, 4097), (4096, 8192), (5000, 5001), (9, 9), (19_000, 30_000)] {
            let mut expect = [0u64; 5];
            for p in &pulses {
                if p.sequence >= a && p.sequence < b {
                    expect[p.class.index()] += 1;
                }
            }
            assert_eq!(cache.class_counts(a, b), expect, "[{a},{b})");
        }
        assert_eq!(cache.lookup(123), Some(pulses[123]));
        assert_eq!(cache.lookup(20_000), None);
        assert_eq!(cache.total_pulses(), 20_000);
    }

    #[test]
    fn sparse_sequences_use_index() {
        let mut pulses = prepare_pulses(10, &SourceParams::default(), 5, Execution::Sequential).unwrap();
        for (i, p) in pulses.iter_mut().enumerate() {
            p.sequence = 100 + 3 * i as u64;
        }
        let cache = ExplicitPulses::new(pulses.clone());
        assert_eq!(cache.lookup(103), Some(pulses[1]));
        assert_eq!(cache.lookup(101), None);
        assert_eq!(cache.class_counts(0, 106).iter().sum::<u64>(), 2);
    }
}
