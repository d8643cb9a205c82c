//! Toeplitz-hash privacy amplification.
//!
//! The `m x n` Toeplitz matrix `T[i][j] = t[i - j + n - 1]` is defined by
//! `m + n - 1` bits `t`, drawn from the ChaCha20 keystream of the shared
//! 32-byte seed (bit `k` is bit `k % 8` of keystream byte `k / 8`). Output bit
//! `i` is `sum_j T[i][j] x[j] mod 2`, computed as one real convolution by FFT.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::bits::BitString;

pub type HashSeed = [u8; 32];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PrivacyError {
    #[error("final length {final_len} exceeds input length {input_len}")]
    TooLong { final_len: usize, input_len: usize },
}

/// The `m + n - 1` defining bits of the Toeplitz matrix for `seed`.
pub fn toeplitz_diagonals(seed: &HashSeed, rows: usize, cols: usize) -> BitString {
    let len = (rows + cols).saturating_sub(1);
    let mut bytes = vec![0u8; len.div_ceil(8)];
    ChaCha20Rng::from_seed(*seed).fill_bytes(&mut bytes);
    BitString::from_bytes(&bytes, len).expect("buffer sized for len")
}

/// Compresses `input` to `final_len` bits. `final_len == 0` yields an empty key.
pub fn privacy_amplify(
    input: &BitString,
    final_len: usize,
    seed: &HashSeed,
) -> Result<BitString, PrivacyError> {
    let n = input.len();
    if final_len > n {
        return Err(PrivacyError::TooLong {
            final_len,
            input_len: n,
        });
    }
    if final_len == 0 {
        return Ok(BitString::new());
    }
    let t = toeplitz_diagonals(seed, final_len, n);
    let conv = convolve_parity(&t, input);
    // Output row i sits at convolution index i + n - 1.
    Ok(BitString::from_bools(conv[n - 1..n - 1 + final_len].iter().copied()))
}

/// Parity of the linear convolution `a * b`, valid for indices below `a.len()`
/// when `b.len() <= a.len()`; circular wrap-around only touches higher indices.
fn convolve_parity(a: &BitString, b: &BitString) -> Vec<bool> {
    let size = a.len().next_power_of_two().max(2);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let load = |bits: &BitString| {
        let mut buf = vec![Complex::new(0.0, 0.0); size];
        for (i, bit) in bits.iter().enumerate() {
            if bit {
                buf[i].re = 1.0;
            }
        }
        buf
    };
    let mut fa = load(a);
    let mut fb = load(b);
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= *y;
    }
    inv.process(&mut fa);
    let scale = size as f64;
    fa.iter()
        .take(a.len())
        .map(|c| ((c.re / scale).round() as i64) & 1 == 1)
        .collect()
}
