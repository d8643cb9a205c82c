//! Syndrome-based LDPC reconciliation.
//!
//! The satellite discloses `H·x` for each sifted packet `x`; the ground
//! station runs belief propagation on its noisy copy `y` to find the unique
//! low-weight correction satisfying the syndrome. Codes come from a fixed
//! ladder of design QBERs; each rung is a quasi-cyclic parity-check matrix
//! expanded deterministically from a seeded base graph, so both parties build
//! bit-identical matrices from the rung descriptor alone.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bits::BitString;
use crate::finite_key::binary_entropy;
use crate::rng::{domain, stream};

/// Design QBERs of the code ladder, lowest overhead first.
pub const DESIGN_QBERS: [f64; 6] = [0.005, 0.01, 0.02, 0.03, 0.05, 0.08];
/// Syndrome length relative to the Shannon limit `n·H(q)`.
pub const RECONCILIATION_EFFICIENCY: f64 = 1.15;
/// Each rung is sized for `design_qber * CODE_MARGINS[rung]` so that a packet
/// at the design QBER still decodes at finite length. The lowest rung sits
/// furthest from the rate the degree distribution was tuned for.
pub const CODE_MARGINS: [f64; 6] = [1.5, 1.25, 1.25, 1.25, 1.25, 1.25];
/// Blocks at or above this QBER cannot yield BB84 key and are rejected.
pub const QBER_ABORT_THRESHOLD: f64 = 0.11;
/// Belief-propagation iteration cap.
pub const MAX_ITERATIONS: usize = 100;
/// Edge-perspective variable degree distribution `(degree, lambda_d)`,
/// optimised by density evolution for high-rate syndrome coding.
const VARIABLE_DEGREES: [(usize, f64); 8] = [
    (2, 0.0142),
    (3, 0.4575),
    (4, 0.0386),
    (5, 0.0387),
    (6, 0.1232),
    (8, 0.1758),
    (12, 0.0468),
    (20, 0.1051),
];
/// Target number of base-graph columns before lifting.
const BASE_COLUMNS: usize = 1000;
/// Fixed construction seed shared by both parties.
const CONSTRUCTION_SEED: u64 = 0x4C44_5043_4C41_4444;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LdpcError {
    #[error("sampled QBER {0:.4} is at or above the {QBER_ABORT_THRESHOLD} abort threshold")]
    QberTooHigh(f64),
    #[error("sampled QBER {0} is not a probability")]
    InvalidQber(f64),
    #[error("no ladder rung covers QBER {0:.4} with the configured margin")]
    NoRung(f64),
    #[error("input has {got} bits, code expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("belief propagation did not satisfy the syndrome within {0} iterations")]
    DecodeFailure(usize),
}

/// Identifies one rung of the ladder at one block length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeDescriptor {
    pub rung: u8,
    pub block_len: u32,
}

impl CodeDescriptor {
    pub fn design_qber(&self) -> f64 {
        DESIGN_QBERS[self.rung as usize]
    }

    /// Syndrome length before rounding up to a whole number of circulants.
    pub fn target_syndrome_len(&self) -> usize {
        let n = self.block_len as usize;
        let q = self.design_qber() * CODE_MARGINS[self.rung as usize];
        (RECONCILIATION_EFFICIENCY * binary_entropy(q) * n as f64).ceil() as usize
    }
}

/// Picks the cheapest rung whose design QBER covers `sampled_qber * margin`.
/// `margin` is an extra selection margin on top of [`CODE_MARGINS`].
pub fn select_ldpc_code(
    sampled_qber: f64,
    margin: f64,
    block_len: usize,
) -> Result<CodeDescriptor, LdpcError> {
    if !(0.0..=1.0).contains(&sampled_qber) || sampled_qber.is_nan() {
        return Err(LdpcError::InvalidQber(sampled_qber));
    }
    if sampled_qber >= QBER_ABORT_THRESHOLD {
        return Err(LdpcError::QberTooHigh(sampled_qber));
    }
    let needed = sampled_qber * margin;
    DESIGN_QBERS
        .iter()
        .position(|&q| q >= needed)
        .map(|rung| CodeDescriptor {
            rung: rung as u8,
            block_len: block_len as u32,
        })
        .ok_or(LdpcError::NoRung(sampled_qber))
}

/// Sparse parity-check matrix stored by rows.
#[derive(Debug, Clone)]
pub struct ParityCheckMatrix {
    n: usize,
    row_ptr: Vec<u32>,
    cols: Vec<u32>,
}

impl ParityCheckMatrix {
    pub fn from_rows(n: usize, rows: &[Vec<u32>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for r in rows {
            cols.extend_from_slice(r);
            row_ptr.push(cols.len() as u32);
        }
        Self { n, row_ptr, cols }
    }

    pub fn num_cols(&self) -> usize {
        self.n
    }

    pub fn num_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.cols.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u32] {
        &self.cols[self.row_ptr[r] as usize..self.row_ptr[r + 1] as usize]
    }

    pub fn syndrome(&self, bits: &BitString) -> BitString {
        assert_eq!(bits.len(), self.n);
        let words = bits.words();
        let mut out = BitString::zeros(self.num_rows());
        for r in 0..self.num_rows() {
            let parity = self
                .row(r)
                .iter()
                .fold(0u64, |acc, &c| acc ^ (words[c as usize / 64] >> (c % 64)));
            if parity & 1 == 1 {
                out.set(r, true);
            }
        }
        out
    }

    /// Whether `bits` satisfies `syndrome` exactly.
    pub fn satisfies(&self, bits: &BitString, syndrome: &BitString) -> bool {
        syndrome.len() == self.num_rows() && self.syndrome(bits) == *syndrome
    }
}

/// A built code: descriptor plus its parity-check matrix.
#[derive(Debug, Clone)]
pub struct LdpcCode {
    pub descriptor: CodeDescriptor,
    pub h: ParityCheckMatrix,
}

impl LdpcCode {
    pub fn build(descriptor: CodeDescriptor) -> Self {
        let n = descriptor.block_len as usize;
        let lift = lifting_size(n);
        let base_cols = n / lift;
        let base_rows = descriptor
            .target_syndrome_len()
            .div_ceil(lift)
            .clamp(max_degree(), base_cols.saturating_sub(1).max(max_degree()));
        let seed = CONSTRUCTION_SEED ^ ((descriptor.rung as u64) << 32) ^ n as u64;
        let base = BaseGraph::construct(base_rows, base_cols, lift, seed);
        let h = base.expand(lift);
        Self { descriptor, h }
    }

    pub fn block_len(&self) -> usize {
        self.h.num_cols()
    }

    /// Number of bits disclosed by one syndrome.
    pub fn syndrome_len(&self) -> usize {
        self.h.num_rows()
    }

    pub fn syndrome(&self, bits: &BitString) -> Result<BitString, LdpcError> {
        self.check_len(bits)?;
        Ok(self.h.syndrome(bits))
    }

    fn check_len(&self, bits: &BitString) -> Result<(), LdpcError> {
        if bits.len() != self.block_len() {
            return Err(LdpcError::LengthMismatch {
                expected: self.block_len(),
                got: bits.len(),
            });
        }
        Ok(())
    }

    /// Layered sum-product decoding of `noisy` towards `syndrome`.
    ///
    /// `crossover` is the assumed BSC flip probability for the prior LLRs.
    /// Returns the corrected string, which satisfies the syndrome exactly.
    pub fn decode(
        &self,
        noisy: &BitString,
        syndrome: &BitString,
        crossover: f64,
    ) -> Result<BitString, LdpcError> {
        self.check_len(noisy)?;
        if syndrome.len() != self.syndrome_len() {
            return Err(LdpcError::LengthMismatch {
                expected: self.syndrome_len(),
                got: syndrome.len(),
            });
        }
        let p = crossover.clamp(1e-6, 0.49);
        let prior = ((1.0 - p) / p).ln();
        let mut llr: Vec<f64> = noisy.iter().map(|b| if b { -prior } else { prior }).collect();
        let hard_from = |llr: &[f64]| BitString::from_bools(llr.iter().map(|&l| l < 0.0));

        if self.h.satisfies(noisy, syndrome) {
            return Ok(noisy.clone());
        }

        let h = &self.h;
        let mut check_msgs = vec![0.0f64; h.num_edges()];
        // (variable-to-check message, its phi) per edge of the current row
        let mut scratch: Vec<(f64, f64)> = Vec::new();
        for _ in 0..MAX_ITERATIONS {
            for r in 0..h.num_rows() {
                let start = h.row_ptr[r] as usize;
                let row = h.row(r);
                scratch.clear();
                let mut sign_neg = syndrome.get(r);
                let mut phi_sum = 0.0;
                for (k, &c) in row.iter().enumerate() {
                    let q = llr[c as usize] - check_msgs[start + k];
                    let f = phi(q.abs());
                    scratch.push((q, f));
                    if q < 0.0 {
                        sign_neg = !sign_neg;
                    }
                    phi_sum += f;
                }
                for (k, &c) in row.iter().enumerate() {
                    let (q, f) = scratch[k];
                    let magnitude = phi((phi_sum - f).max(1e-300));
                    let neg = sign_neg ^ (q < 0.0);
                    let msg = if neg { -magnitude } else { magnitude };
                    check_msgs[start + k] = msg;
                    llr[c as usize] = q + msg;
                }
            }
            let hard = hard_from(&llr);
            if h.satisfies(&hard, syndrome) {
                return Ok(hard);
            }
        }
        Err(LdpcError::DecodeFailure(MAX_ITERATIONS))
    }
}

/// `phi(x) = -ln(tanh(x/2))`, its own inverse on `(0, inf)`.
#[inline]
fn phi(x: f64) -> f64 {
    let x = x.clamp(1e-12, 60.0);
    let e = (-x).exp();
    ((1.0 + e) / (1.0 - e)).ln()
}

fn max_degree() -> usize {
    VARIABLE_DEGREES.iter().map(|d| d.0).max().unwrap_or(3)
}

/// Node-perspective column degrees for `cols` columns, largest-remainder rounded.
fn column_degrees(cols: usize) -> Vec<usize> {
    let node: Vec<f64> = VARIABLE_DEGREES.iter().map(|&(d, l)| l / d as f64).collect();
    let total: f64 = node.iter().sum();
    let exact: Vec<f64> = node.iter().map(|w| w / total * cols as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..exact.len()).collect();
    by_remainder.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let short = cols - counts.iter().sum::<usize>();
    for &i in by_remainder.iter().take(short) {
        counts[i] += 1;
    }
    VARIABLE_DEGREES
        .iter()
        .zip(counts)
        .flat_map(|(&(d, _), c)| std::iter::repeat_n(d, c))
        .collect()
}

/// Circulant size: `n / base_cols` for the smallest divisor `base_cols >= min(n, BASE_COLUMNS)`.
fn lifting_size(n: usize) -> usize {
    let target = BASE_COLUMNS.min(n).max(1);
    (target..=n).find(|d| n % d == 0).map(|d| n / d).unwrap_or(1)
}

struct BaseGraph {
    rows: usize,
    cols: usize,
    /// (row, shift) entries per base column.
    entries: Vec<Vec<(usize, usize)>>,
}

impl BaseGraph {
    /// Irregular base graph with balanced row degrees and circulant shifts
    /// chosen to avoid length-4 cycles whenever the lift permits.
    fn construct(rows: usize, cols: usize, lift: usize, seed: u64) -> Self {
        let mut rng = stream(seed, domain::LDPC_CODE, 0);
        let mut degrees = column_degrees(cols);
        degrees.shuffle(&mut rng);
        let mut row_degree = vec![0usize; rows];
        let mut row_entries: Vec<Vec<(usize, usize)>> = vec![Vec::new(); rows];
        let mut entries = Vec::with_capacity(cols);
        let mut order: Vec<usize> = (0..rows).collect();
        for (col, &degree) in degrees.iter().enumerate() {
            let weight = degree.min(rows);
            order.shuffle(&mut rng);
            order.sort_by_key(|&r| row_degree[r]);
            let mut col_entries: Vec<(usize, usize)> = Vec::with_capacity(weight);
            for &r in &order[..weight] {
                let mut shift = rng.random_range(0..lift);
                for _ in 0..64 {
                    if !creates_four_cycle(&row_entries, &col_entries, r, shift, lift) {
                        break;
                    }
                    shift = rng.random_range(0..lift);
                }
                col_entries.push((r, shift));
            }
            for &(r, s) in &col_entries {
                row_degree[r] += 1;
                row_entries[r].push((col, s));
            }
            entries.push(col_entries);
        }
        Self {
            rows,
            cols,
            entries,
        }
    }

    fn expand(&self, lift: usize) -> ParityCheckMatrix {
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); self.rows * lift];
        for col in 0..self.cols {
            for &(r, shift) in &self.entries[col] {
                for i in 0..lift {
                    let check = r * lift + i;
                    let var = col * lift + (i + shift) % lift;
                    rows[check].push(var as u32);
                }
            }
        }
        for r in &mut rows {
            r.sort_unstable();
        }
        ParityCheckMatrix::from_rows(self.cols * lift, &rows)
    }
}

/// A 4-cycle through base rows `r`, `r2` and columns `c`, `c2` exists in the
/// lifted graph iff `s(r,c) - s(r,c2) + s(r2,c2) - s(r2,c) = 0 mod lift`.
fn creates_four_cycle(
    row_entries: &[Vec<(usize, usize)>],
    col_entries: &[(usize, usize)],
    r: usize,
    shift: usize,
    lift: usize,
) -> bool {
    for &(r2, shift2) in col_entries {
        for &(c_other, s_r) in &row_entries[r] {
            if let Some(&(_, s_r2)) = row_entries[r2].iter().find(|(c, _)| *c == c_other) {
                let lhs = (shift + s_r2 + 2 * lift - s_r - shift2) % lift;
                if lhs == 0 {
                    return true;
                }
            }
        }
    }
    false
}

/// Thread-safe cache of built codes keyed by descriptor.
#[derive(Debug, Default, Clone)]
pub struct CodeBook {
    codes: Arc<Mutex<HashMap<CodeDescriptor, Arc<LdpcCode>>>>,
}

impl CodeBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, descriptor: CodeDescriptor) -> Arc<LdpcCode> {
        if let Some(code) = self.codes.lock().expect("codebook lock").get(&descriptor) {
            return Arc::clone(code);
        }
        let code = Arc::new(LdpcCode::build(descriptor));
        self.codes
            .lock()
            .expect("codebook lock")
            .entry(descriptor)
            .or_insert(code)
            .clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flip_bsc(bits: &BitString, p: f64, rng: &mut ChaCha8Rng) -> BitString {
        let mut out = bits.clone();
        for i in 0..bits.len() {
            if rng.random_bool(p) {
                out.flip(i);
            }
        }
        out
    }

    #[test]
    fn ladder_selection() {
        let one = select_ldpc_code(0.01, 1.0, 100_000).unwrap();
        assert_eq!(one.rung, 1);
        assert_eq!(select_ldpc_code(0.0, 1.0, 100_000).unwrap().rung, 0);
        assert_eq!(select_ldpc_code(0.0101, 1.0, 100_000).unwrap().rung, 2);
        assert!(matches!(
            select_ldpc_code(0.12, 1.0, 100_000),
            Err(LdpcError::QberTooHigh(_))
        ));
        assert!(matches!(
            select_ldpc_code(0.09, 1.0, 100_000),
            Err(LdpcError::NoRung(_))
        ));
    }

    #[test]
    fn one_percent_rung_syndrome_fraction() {
        // 1.15 * H(0.0125) = 0.111486..., rounded up to whole circulants of 100.
        let q = 0.01 * 1.25f64;
        let h = -q * q.log2() - (1.0 - q) * (1.0 - q).log2();
        let code = LdpcCode::build(CodeDescriptor {
            rung: 1,
            block_len: 100_000,
        });
        assert_eq!(code.descriptor.target_syndrome_len(), (1.15 * h * 1e5).ceil() as usize);
        assert_eq!(code.descriptor.target_syndrome_len(), 11_149);
        assert_eq!(code.syndrome_len(), 11_200);
    }

    #[test]
    fn degree_profile_matches_distribution() {
        let degrees = column_degrees(1000);
        assert_eq!(degrees.len(), 1000);
        let edges: usize = degrees.iter().sum();
        for &(d, lambda) in &VARIABLE_DEGREES {
            let share = degrees.iter().filter(|&&x| x == d).count() as f64 * d as f64 / edges as f64;
            assert!((share - lambda).abs() < 0.01, "degree {d}: {share} vs {lambda}");
        }
        let code = LdpcCode::build(CodeDescriptor {
            rung: 1,
            block_len: 100_000,
        });
        assert_eq!(code.h.num_edges(), edges * 100);
    }

    #[test]
    fn construction_is_deterministic() {
        let d = CodeDescriptor {
            rung: 3,
            block_len: 4000,
        };
        let a = LdpcCode::build(d);
        let b = LdpcCode::build(d);
        assert_eq!(a.h.cols, b.h.cols);
        assert_eq!(a.h.row_ptr, b.h.row_ptr);
    }

    #[test]
    fn clean_channel_returns_input() {
        let code = LdpcCode::build(CodeDescriptor {
            rung: 1,
            block_len: 10_000,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = BitString::random(10_000, &mut rng);
        let s = code.syndrome(&x).unwrap();
        assert_eq!(code.decode(&x, &s, 0.01).unwrap(), x);
    }

    #[test]
    fn corrects_moderate_noise() {
        let code = LdpcCode::build(CodeDescriptor {
            rung: 4,
            block_len: 20_000,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = BitString::random(20_000, &mut rng);
        let s = code.syndrome(&x).unwrap();
        let y = flip_bsc(&x, 0.03, &mut rng);
        assert_eq!(code.decode(&y, &s, 0.05).unwrap(), x);
    }

    #[test]
    fn mismatched_syndrome_fails() {
        let code = LdpcCode::build(CodeDescriptor {
            rung: 1,
            block_len: 10_000,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = BitString::random(10_000, &mut rng);
        let other = BitString::random(10_000, &mut rng);
        let wrong = code.syndrome(&other).unwrap();
        assert!(matches!(
            code.decode(&x, &wrong, 0.01),
            Err(LdpcError::DecodeFailure(_))
        ));
    }

    #[test]
    fn length_checks() {
        let code = LdpcCode::build(CodeDescriptor {
            rung: 0,
            block_len: 2000,
        });
        assert!(matches!(
            code.syndrome(&BitString::zeros(10)),
            Err(LdpcError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn lifting_sizes() {
        assert_eq!(lifting_size(100_000), 100);
        assert_eq!(lifting_size(10_000), 10);
        assert_eq!(lifting_size(500), 1);
        assert_eq!(lifting_size(8192), 8);
    }
}
