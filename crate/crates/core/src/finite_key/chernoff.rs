//! Chernoff confidence bounds on the expectation of a sum of Bernoulli trials.
//!
//! For an observed count `X` and failure probability `xi`, the slacks solve
//!
//! ```text
//! (e^d1 / (1+d1)^(1+d1))^(X/(1+d1)) = xi      lower = X / (1 + d1)
//! (e^-d2 / (1-d2)^(1-d2))^(X/(1-d2)) = xi     upper = X / (1 - d2)
//! ```
//!
//! Both left-hand sides are strictly decreasing in the slack, so each root is
//! found by bisection on `ln d1` and `ln(1 - d2)` respectively.

use serde::{Deserialize, Serialize};

/// Default per-invocation failure probability.
pub const DEFAULT_FAILURE_PROB: f64 = 1e-10;
const REL_TOL: f64 = 1e-12;
const MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChernoffError {
    #[error("failure probability {0} must lie in (0, 1)")]
    InvalidFailureProb(f64),
    #[error("observed count {0} must be finite and non-negative")]
    InvalidCount(f64),
    #[error("root finding for {which} did not converge within {MAX_ITER} iterations")]
    NoConvergence { which: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChernoffInterval {
    pub observed: f64,
    pub failure_prob: f64,
    pub lower: f64,
    pub upper: f64,
    pub delta1: f64,
    pub delta2: f64,
}

impl ChernoffInterval {
    /// Interval with zero slack, used for the infinite-statistics limit.
    pub fn exact(observed: f64) -> Self {
        Self {
            observed,
            failure_prob: 1.0,
            lower: observed,
            upper: observed,
            delta1: 0.0,
            delta2: 0.0,
        }
    }

    pub fn relative_width(&self) -> f64 {
        if self.observed == 0.0 {
            f64::INFINITY
        } else {
            (self.upper - self.lower) / self.observed
        }
    }
}

/// `d/(1+d) - ln(1+d)`, accurate for small `d`.
fn lower_tail_exponent(d: f64) -> f64 {
    if d < 1e-2 {
        // sum_{k>=2} (-1)^(k+1) (k-1)/k d^k
        let mut term = d * d;
        let mut sum = 0.0;
        for k in 2..40 {
            let kf = k as f64;
            let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
            sum += sign * (kf - 1.0) / kf * term;
            term *= d;
        }
        sum
    } else {
        d / (1.0 + d) - d.ln_1p()
    }
}

/// `-d/(1-d) - ln(1-d)`, accurate for small `d`; expressed via `u = 1 - d`.
fn upper_tail_exponent(u: f64) -> f64 {
    let d = 1.0 - u;
    if d < 1e-2 {
        // -sum_{k>=2} (k-1)/k d^k
        let mut term = d * d;
        let mut sum = 0.0;
        for k in 2..40 {
            let kf = k as f64;
            sum -= (kf - 1.0) / kf * term;
            term *= d;
        }
        sum
    } else {
        -d / u - u.ln()
    }
}

/// Bisection on a decreasing function of `t` over `[lo, hi]` for `f(t) = target`.
fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, target: f64, which: &'static str) -> Result<f64, ChernoffError> {
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if f(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo).abs() <= REL_TOL * 0.5 {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(ChernoffError::NoConvergence { which })
}

/// Solves for `d1` (returned as `ln d1`).
fn solve_delta1(x: f64, ln_xi: f64) -> Result<f64, ChernoffError> {
    let g = |ln_d: f64| x * lower_tail_exponent(ln_d.exp());
    // bracket: g decreases from 0 (d -> 0) to -inf (d -> inf)
    let mut lo = -60.0f64;
    while g(lo) <= ln_xi {
        lo -= 60.0;
        if lo < -700.0 {
            return Err(ChernoffError::NoConvergence { which: "delta1" });
        }
    }
    let mut hi = 0.0f64;
    while g(hi) > ln_xi {
        hi += 2.0;
        if hi > 700.0 {
            return Err(ChernoffError::NoConvergence { which: "delta1" });
        }
    }
    bisect(g, lo, hi, ln_xi, "delta1")
}

/// Solves for `1 - d2` (returned as `ln(1 - d2)`).
fn solve_delta2(x: f64, ln_xi: f64) -> Result<f64, ChernoffError> {
    // As u = 1 - d2 decreases from 1 to 0 the exponent falls from 0 to -inf,
    // so h(s) with s = -ln u is decreasing.
    let h = |s: f64| x * upper_tail_exponent((-s).exp());
    let lo = 0.0f64;
    let mut hi = 1.0f64;
    while h(hi) > ln_xi {
        hi *= 2.0;
        if hi > 1400.0 {
            return Err(ChernoffError::NoConvergence { which: "delta2" });
        }
    }
    let s = bisect(h, lo, hi, ln_xi, "delta2")?;
    Ok(-s)
}

/// Chernoff interval for an observed count.
///
/// `X = 0` yields `lower = 0` and `upper = ln(1/xi)`, the limit of the
/// upper-tail solution as the count vanishes.
pub fn chernoff_bounds(observed: f64, failure_prob: f64) -> Result<ChernoffInterval, ChernoffError> {
    if !(failure_prob > 0.0 && failure_prob < 1.0) {
        return Err(ChernoffError::InvalidFailureProb(failure_prob));
    }
    if !observed.is_finite() || observed < 0.0 {
        return Err(ChernoffError::InvalidCount(observed));
    }
    let ln_xi = failure_prob.ln();
    if observed == 0.0 {
        return Ok(ChernoffInterval {
            observed,
            failure_prob,
            lower: 0.0,
            upper: -ln_xi,
            delta1: f64::INFINITY,
            delta2: 1.0,
        });
    }
    let ln_d1 = solve_delta1(observed, ln_xi)?;
    let ln_u = solve_delta2(observed, ln_xi)?;
    let delta1 = ln_d1.exp();
    let u = ln_u.exp();
    Ok(ChernoffInterval {
        observed,
        failure_prob,
        lower: observed / (1.0 + delta1),
        upper: observed / u,
        delta1,
        delta2: 1.0 - u,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    // Reference values from 50-digit bisection.
    const REFERENCE: [(f64, f64, f64, f64); 5] = [
        (1e6, 1e-10, 993_229.201_454_088_09, 1_006_801.499_664_775_8),
        (100.0, 1e-10, 46.539_958_110_077_808, 184.005_274_778_249_61),
        (1e4, 1e-10, 9_336.648_926_852_096_8, 10_694.050_636_903_259),
        (1.0, 1e-10, 3.678_794_411_849_758_6e-11, 27.333_981_605_530_870),
        (37.0, 1e-3, 18.741_824_145_185_955, 64.430_537_769_534_043),
    ];

    #[test]
    fn matches_high_precision_reference() {
        for &(x, xi, lo, hi) in &REFERENCE {
            let iv = chernoff_bounds(x, xi).unwrap();
            assert!(rel(iv.lower, lo) < 1e-10, "lower X={x}: {} vs {lo}", iv.lower);
            assert!(rel(iv.upper, hi) < 1e-10, "upper X={x}: {} vs {hi}", iv.upper);
        }
    }

    #[test]
    fn large_count_concentrates() {
        let iv = chernoff_bounds(1e6, 1e-10).unwrap();
        assert!(iv.lower < 1e6 && 1e6 < iv.upper);
        assert!(iv.relative_width() < 0.02);
    }

    #[test]
    fn failure_prob_near_one_has_no_slack() {
        let iv = chernoff_bounds(500.0, 1.0 - 1e-15).unwrap();
        assert!(iv.delta1 < 1e-5 && iv.delta2 < 1e-5);
        assert!(rel(iv.lower, 500.0) < 1e-5 && rel(iv.upper, 500.0) < 1e-5);
    }

    #[test]
    fn width_orderings() {
        let small = chernoff_bounds(100.0, 1e-10).unwrap();
        let big = chernoff_bounds(1e4, 1e-10).unwrap();
        assert!(big.relative_width() < small.relative_width());
        let loose = chernoff_bounds(1e4, 1e-3).unwrap();
        assert!(loose.relative_width() < big.relative_width());
    }

    #[test]
    fn zero_observations() {
        let iv = chernoff_bounds(0.0, 1e-10).unwrap();
        assert_eq!(iv.lower, 0.0);
        assert!(rel(iv.upper, (1e10f64).ln()) < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(chernoff_bounds(10.0, 0.0).is_err());
        assert!(chernoff_bounds(10.0, 1.0).is_err());
        assert!(chernoff_bounds(-1.0, 0.1).is_err());
        assert!(chernoff_bounds(f64::NAN, 0.1).is_err());
    }

    #[test]
    fn series_and_closed_forms_agree_at_switchover() {
        let d = 1e-2f64;
        let closed = d / (1.0 + d) - d.ln_1p();
        assert!(rel(lower_tail_exponent(d * (1.0 - 1e-12)), closed) < 1e-9);
        let u = 1.0 - d;
        let closed2 = -d / u - u.ln();
        assert!(rel(upper_tail_exponent(1.0 - d * (1.0 - 1e-12)), closed2) < 1e-9);
    }
}
