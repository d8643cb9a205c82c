//! Three-intensity decoy-state finite-key analysis.
//!
//! Observed detection and error counts are turned into one-sided Chernoff
//! bounds on their expectations, combined into a lower bound on single-photon
//! detections and an upper bound on their bit-flip error rate, and finally
//! into the secure key length `R = s1 (1 - H(e1)) - Lec`.

mod chernoff;
mod decoy;

pub use chernoff::{chernoff_bounds, ChernoffError, ChernoffInterval, DEFAULT_FAILURE_PROB};
pub use decoy::{
    analyze_block, e1_upper, poisson_coeffs, s1_lower, BoundMode, DecoyBounds, DecoyTally,
    model_leakage, FiniteKeyError, KeyRateResult, PoissonCoefficients, CHERNOFF_INVOCATIONS,
};

/// Binary Shannon entropy in bits, with `H(0) = H(1) = 0`.
///
/// Panics outside `[0, 1]`; use [`try_binary_entropy`] for untrusted input.
pub fn binary_entropy(x: f64) -> f64 {
    try_binary_entropy(x).expect("binary entropy argument outside [0, 1]")
}

pub fn try_binary_entropy(x: f64) -> Result<f64, FiniteKeyError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(FiniteKeyError::EntropyDomain(x));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(0.0);
    }
    Ok(-x * x.log2() - (1.0 - x) * (1.0 - x).log2())
}

/// `R = s1 (1 - H(e1)) - Lec`, clamped at zero and floored to whole bits.
pub fn secure_key_length(s1: f64, e1: f64, leaked_bits: f64) -> u64 {
    let e1 = e1.clamp(0.0, 0.5);
    let r = s1.max(0.0) * (1.0 - binary_entropy(e1)) - leaked_bits;
    if r.is_finite() && r > 0.0 {
        r.floor() as u64
    } else {
        0
    }
}
