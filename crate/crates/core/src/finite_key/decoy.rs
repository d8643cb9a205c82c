//! Decoy-state bounds on the single-photon yield and error rate.
//!
//! Counting rates are normalized by the total number of pulses in the block,
//! so `<S_l> = p_l * sum_k coeff_k * Y_k` with `Y_k` the matched-basis yield of
//! `k`-photon pulses. The decoy group `nu` pools sources `x1, x2` and the
//! signal group `mu` pools `y1, y2`.

use serde::{Deserialize, Serialize};

use super::chernoff::{chernoff_bounds, ChernoffError, ChernoffInterval};
use super::{secure_key_length, try_binary_entropy};
use crate::source::{ClassCounts, IntensityGroup, SourceClass, SourceError, SourceParams};

/// Number of one-sided Chernoff bounds taken per block.
pub const CHERNOFF_INVOCATIONS: u32 = 6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FiniteKeyError {
    #[error("binary entropy argument {0} outside [0, 1]")]
    EntropyDomain(f64),
    #[error(transparent)]
    Chernoff(#[from] ChernoffError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("tally for source {class}: {reason}")]
    Tally { class: &'static str, reason: &'static str },
    #[error("coefficient determinant {0} is not positive")]
    Determinant(f64),
    #[error("single-photon bound is zero; block yields no key")]
    EmptyBlock,
}

/// Per-class pulse, detection and error counts for one block.
///
/// Detections and errors only count events whose measurement basis matched
/// the basis label of the pulse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoyTally {
    pub sent: ClassCounts,
    pub detected: ClassCounts,
    pub errors: ClassCounts,
}

impl DecoyTally {
    pub fn total_sent(&self) -> u64 {
        self.sent.iter().sum()
    }

    pub fn add(&mut self, other: &DecoyTally) {
        for i in 0..5 {
            self.sent[i] += other.sent[i];
            self.detected[i] += other.detected[i];
            self.errors[i] += other.errors[i];
        }
    }

    fn group_sum(counts: &ClassCounts, group: IntensityGroup) -> u64 {
        SourceClass::ALL
            .iter()
            .filter(|c| c.group() == group)
            .map(|c| counts[c.index()])
            .sum()
    }

    pub fn group_detected(&self, group: IntensityGroup) -> u64 {
        Self::group_sum(&self.detected, group)
    }

    pub fn group_errors(&self, group: IntensityGroup) -> u64 {
        Self::group_sum(&self.errors, group)
    }

    /// Counting rate `S` of one source: detections per pulse sent from it.
    pub fn counting_rate(&self, class: SourceClass) -> f64 {
        ratio(self.detected[class.index()], self.sent[class.index()])
    }

    /// Error counting rate `T` of one source.
    pub fn error_rate(&self, class: SourceClass) -> f64 {
        ratio(self.errors[class.index()], self.sent[class.index()])
    }

    /// `E = T / S`.
    pub fn qber(&self, class: SourceClass) -> f64 {
        ratio(self.errors[class.index()], self.detected[class.index()])
    }

    pub fn validate(&self) -> Result<(), FiniteKeyError> {
        for class in SourceClass::ALL {
            let i = class.index();
            let tally_err = |reason| FiniteKeyError::Tally { class: class.label(), reason };
            if self.sent[i] == 0 {
                return Err(tally_err("no pulses sent"));
            }
            if self.detected[i] > self.sent[i] {
                return Err(tally_err("more detections than pulses"));
            }
            if self.errors[i] > self.detected[i] {
                return Err(tally_err("more errors than detections"));
            }
        }
        Ok(())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Poisson photon-number distribution truncated at `k_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonCoefficients {
    pub intensity: f64,
    /// `coeffs[k] = intensity^k e^-intensity / k!` for `k = 0..=k_max`.
    pub coeffs: Vec<f64>,
    /// Probability mass above `k_max`.
    pub tail: f64,
}

impl PoissonCoefficients {
    pub fn get(&self, k: usize) -> f64 {
        self.coeffs.get(k).copied().unwrap_or(0.0)
    }
}

pub fn poisson_coeffs(intensity: f64, k_max: usize) -> PoissonCoefficients {
    assert!(intensity >= 0.0 && intensity.is_finite(), "intensity must be non-negative");
    let mut coeffs = Vec::with_capacity(k_max + 1);
    let mut term = (-intensity).exp();
    for k in 0..=k_max {
        coeffs.push(term);
        term *= intensity / (k + 1) as f64;
    }
    let head: f64 = coeffs.iter().sum();
    PoissonCoefficients { intensity, coeffs, tail: (1.0 - head).max(0.0) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundMode {
    /// One-sided Chernoff bounds with failure probability `xi` per invocation.
    Chernoff { xi: f64 },
    /// Observed counts taken as expectations.
    Asymptotic,
}

impl BoundMode {
    fn interval(self, count: u64) -> Result<ChernoffInterval, ChernoffError> {
        match self {
            BoundMode::Chernoff { xi } => chernoff_bounds(count as f64, xi),
            BoundMode::Asymptotic => Ok(ChernoffInterval::exact(count as f64)),
        }
    }

    pub fn xi(self) -> Option<f64> {
        match self {
            BoundMode::Chernoff { xi } => Some(xi),
            BoundMode::Asymptotic => None,
        }
    }
}

/// Bounded expected counting rates, normalized per pulse of the block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyBounds {
    pub total_pulses: f64,
    pub s_vacuum_lower: f64,
    pub s_vacuum_upper: f64,
    pub s_decoy_lower: f64,
    pub s_decoy_upper: f64,
    pub s_signal_upper: f64,
    pub t_decoy_upper: f64,
}

impl DecoyBounds {
    pub fn from_tally(tally: &DecoyTally, mode: BoundMode) -> Result<Self, FiniteKeyError> {
        tally.validate()?;
        let n = tally.total_sent() as f64;
        let vac = mode.interval(tally.group_detected(IntensityGroup::Vacuum))?;
        let dec = mode.interval(tally.group_detected(IntensityGroup::Decoy))?;
        let sig = mode.interval(tally.group_detected(IntensityGroup::Signal))?;
        let err = mode.interval(tally.group_errors(IntensityGroup::Decoy))?;
        Ok(Self {
            total_pulses: n,
            s_vacuum_lower: vac.lower / n,
            s_vacuum_upper: vac.upper / n,
            s_decoy_lower: dec.lower / n,
            s_decoy_upper: dec.upper / n,
            s_signal_upper: sig.upper / n,
            t_decoy_upper: err.upper / n,
        })
    }
}

struct Coeffs {
    a: [f64; 3],
    b: [f64; 3],
    c: [f64; 3],
    p_o: f64,
    p_nu: f64,
    p_mu: f64,
}

impl Coeffs {
    fn new(params: &SourceParams) -> Result<Self, FiniteKeyError> {
        params.validate()?;
        let take = |m: f64| {
            let p = poisson_coeffs(m, 2);
            [p.coeffs[0], p.coeffs[1], p.coeffs[2]]
        };
        Ok(Self {
            a: take(params.w),
            b: take(params.nu),
            c: take(params.mu),
            p_o: params.p_vacuum,
            p_nu: params.p_decoy,
            p_mu: params.p_signal,
        })
    }
}

fn s1_from_bounds(k: &Coeffs, bounds: &DecoyBounds) -> Result<f64, FiniteKeyError> {
    let (a, b, c) = (k.a, k.b, k.c);
    let (p_o, p_nu, p_mu) = (k.p_o, k.p_nu, k.p_mu);
    let big_a = a[0] * c[2] - c[0] * a[2];
    let big_b = a[0] * b[2] - b[0] * a[2];
    let big_c = c[2] * b[0] - b[2] * c[0];
    let det = big_a * (a[0] * b[1] - b[0] * a[1]) - big_b * (a[0] * c[1] - c[0] * a[1]);
    if det.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(FiniteKeyError::Determinant(det));
    }
    let num = p_o * p_o * p_mu * big_a * a[0] * bounds.s_decoy_lower
        - p_o * p_o * p_nu * big_b * a[0] * bounds.s_signal_upper
        - p_o * p_nu * p_mu * a[0] * big_c * bounds.s_vacuum_upper;
    let s1 = p_mu * c[1] * num / (p_o * p_o * p_nu * p_mu * det);
    Ok(s1.max(0.0))
}

fn e1_from_bounds(k: &Coeffs, bounds: &DecoyBounds, s1: f64) -> Result<f64, FiniteKeyError> {
    if s1 <= 0.0 || !s1.is_finite() {
        return Err(FiniteKeyError::EmptyBlock);
    }
    let (a, b, c) = (k.a, k.b, k.c);
    let (p_o, p_nu, p_mu) = (k.p_o, k.p_nu, k.p_mu);
    let vacuum_part = p_nu * b[0] * (p_nu * b[1] * bounds.s_vacuum_lower - p_o * a[1] * bounds.s_decoy_upper)
        / (2.0 * p_o * p_nu * (a[0] * b[1] - a[1] * b[0]));
    let e1 = (bounds.t_decoy_upper - vacuum_part) * p_mu * c[1] / (p_nu * b[1] * s1);
    Ok(if e1.is_nan() { 0.5 } else { e1.clamp(0.0, 0.5) })
}

/// Lower bound on the per-pulse rate of matched single-photon detections from
/// the signal sources, clamped at zero.
pub fn s1_lower(tally: &DecoyTally, params: &SourceParams, mode: BoundMode) -> Result<f64, FiniteKeyError> {
    let k = Coeffs::new(params)?;
    s1_from_bounds(&k, &DecoyBounds::from_tally(tally, mode)?)
}

/// Upper bound on the single-photon bit-flip error rate, clamped into `[0, 0.5]`.
pub fn e1_upper(tally: &DecoyTally, params: &SourceParams, s1: f64, mode: BoundMode) -> Result<f64, FiniteKeyError> {
    let k = Coeffs::new(params)?;
    e1_from_bounds(&k, &DecoyBounds::from_tally(tally, mode)?, s1)
}

/// Per-block analysis record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRateResult {
    pub block_id: u64,
    pub sent: ClassCounts,
    pub detected: ClassCounts,
    pub errors: ClassCounts,
    /// `S` per class, in source order `o, x1, y1, x2, y2`.
    pub s: [f64; 5],
    /// `T` per class.
    pub t: [f64; 5],
    /// Lower-bounded single-photon bits within the block's key material.
    pub s1_lower: f64,
    pub e1_upper: f64,
    pub key_bits: u64,
    pub lec: f64,
    /// Leakage an `f * H(E)` reconciliation model would predict.
    pub lec_model: Option<f64>,
    pub r: u64,
    pub xi: Option<f64>,
    /// Union bound over all Chernoff invocations of the block.
    pub xi_total: Option<f64>,
}

impl KeyRateResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("key rate result serializes")
    }
}

/// Runs the full bound chain for one privacy-amplification block.
///
/// `key_bits` is the number of reconciled bits drawn from matched signal
/// detections; the single-photon bound is scaled by their share of all
/// matched signal detections in the tally.
pub fn analyze_block(
    block_id: u64,
    tally: &DecoyTally,
    params: &SourceParams,
    mode: BoundMode,
    key_bits: u64,
    lec: f64,
) -> Result<KeyRateResult, FiniteKeyError> {
    let k = Coeffs::new(params)?;
    let bounds = DecoyBounds::from_tally(tally, mode)?;
    let s1_rate = s1_from_bounds(&k, &bounds)?;
    let signal = tally.group_detected(IntensityGroup::Signal);
    let share = if signal == 0 { 0.0 } else { key_bits as f64 / signal as f64 };
    let s1_bits = (s1_rate * bounds.total_pulses * share).min(key_bits as f64);
    let (e1, r) = if s1_bits > 0.0 {
        let e1 = e1_from_bounds(&k, &bounds, s1_rate)?;
        (e1, secure_key_length(s1_bits, e1, lec))
    } else {
        (0.5, 0)
    };
    let mut s = [0.0; 5];
    let mut t = [0.0; 5];
    for class in SourceClass::ALL {
        s[class.index()] = tally.counting_rate(class);
        t[class.index()] = tally.error_rate(class);
    }
    let xi = mode.xi();
    Ok(KeyRateResult {
        block_id,
        sent: tally.sent,
        detected: tally.detected,
        errors: tally.errors,
        s,
        t,
        s1_lower: s1_bits,
        e1_upper: e1,
        key_bits,
        lec,
        lec_model: None,
        r,
        xi,
        xi_total: xi.map(|x| x * CHERNOFF_INVOCATIONS as f64),
    })
}

/// Leakage predicted by a reconciliation efficiency model, `f * H(E) * n`.
pub fn model_leakage(efficiency: f64, qber: f64, key_bits: u64) -> Result<f64, FiniteKeyError> {
    Ok(efficiency * try_binary_entropy(qber)? * key_bits as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    /// Expected tally of an error-free-plus-background channel, matched basis.
    fn ideal_tally(eta: f64, y0: f64, e_int: f64, n: f64, params: &SourceParams) -> DecoyTally {
        let mut t = DecoyTally::default();
        for class in SourceClass::ALL {
            let m = params.class_intensity(class);
            let sent = n * params.class_probability(class);
            let sig = 1.0 - (-m * eta).exp();
            let click = 1.0 - (1.0 - y0) * (-m * eta).exp();
            t.sent[class.index()] = sent.round() as u64;
            t.detected[class.index()] = (0.5 * sent * click).round() as u64;
            t.errors[class.index()] = (0.5 * sent * (e_int * sig + 0.5 * (click - sig))).round() as u64;
        }
        t
    }

    #[test]
    fn poisson_values() {
        let p = poisson_coeffs(0.0, 5);
        assert_eq!(p.coeffs[0], 1.0);
        assert!(p.coeffs[1..].iter().all(|&x| x == 0.0));
        let p = poisson_coeffs(0.8, 3);
        assert!((p.coeffs[0] - 0.449_328_964_117_221_6).abs() < 1e-15);
        assert!((p.coeffs[1] - 0.359_463_171_293_777_3).abs() < 1e-15);
        // series oracle: head + tail = 1 and tail shrinks with k_max
        let mut last = 1.0;
        for k in 0..20 {
            let q = poisson_coeffs(0.8, k);
            assert!(q.tail <= last);
            assert!((q.coeffs.iter().sum::<f64>() + q.tail - 1.0).abs() < 1e-15);
            last = q.tail;
        }
    }

    #[test]
    fn flat_channel_stays_positive() {
        // every photon number detected with the same yield: the bound is
        // loose but positive
        let params = SourceParams::default();
        let mut t = DecoyTally::default();
        for class in SourceClass::ALL {
            let sent = (4e8 * params.class_probability(class)) as u64;
            t.sent[class.index()] = sent;
            t.detected[class.index()] = sent / 1000;
        }
        let s1 = s1_lower(&t, &params, BoundMode::Asymptotic).unwrap();
        let truth = params.p_signal * params.mu * (-params.mu).exp() * 1e-3;
        assert!(s1 > 0.0 && s1 <= truth);
    }

    #[test]
    fn silent_decoys_clamp_to_zero() {
        let params = SourceParams::default();
        let mut t = ideal_tally(1e-3, 1e-6, 0.0, 1e9, &params);
        t.detected[SourceClass::DecoyX.index()] = 0;
        t.detected[SourceClass::DecoyZ.index()] = 0;
        t.errors = [0; 5];
        let s1 = s1_lower(&t, &params, BoundMode::Asymptotic).unwrap();
        assert_eq!(s1, 0.0);
        assert!(matches!(
            e1_upper(&t, &params, s1, BoundMode::Asymptotic),
            Err(FiniteKeyError::EmptyBlock)
        ));
    }

    #[test]
    fn asymptotic_close_to_truth() {
        let params = SourceParams::default();
        let eta = 1e-3;
        let n = 1e12;
        let t = ideal_tally(eta, 0.0, 0.0, n, &params);
        let s1 = s1_lower(&t, &params, BoundMode::Asymptotic).unwrap() * n;
        // matched single-photon detections from signal pulses
        let truth = 0.5 * n * params.p_signal * params.mu * (-params.mu).exp() * eta;
        assert!(s1 <= truth * (1.0 + 1e-6), "{s1} vs {truth}");
        // linear yields: the bound attains mu/(mu-nu) (e^nu - nu/mu e^mu) = 0.94512 of truth
        assert!(rel(s1 / truth, 0.945_118_059_444_673) < 1e-3, "{s1} vs {truth}");
    }

    #[test]
    fn e1_tracks_channel_error() {
        let params = SourceParams::default();
        let n = 1e14;
        let t = ideal_tally(1e-3, 0.0, 0.02, n, &params);
        let s1 = s1_lower(&t, &params, BoundMode::Asymptotic).unwrap();
        let e1 = e1_upper(&t, &params, s1, BoundMode::Asymptotic).unwrap();
        // the multi-photon share of decoy errors is charged to single photons:
        // e1 = e * e^nu / 0.94512 in the small-eta limit
        let expected = 0.02 * params.nu.exp() / 0.945_118_059_444_673;
        assert!(e1 >= 0.02 && (e1 - expected).abs() < 1e-3, "{e1} vs {expected}");
    }

    #[test]
    fn zero_errors_still_penalized() {
        let params = SourceParams::default();
        let t = ideal_tally(1e-3, 1e-7, 0.0, 1e10, &params);
        let mut t0 = t;
        t0.errors = [0; 5];
        let mode = BoundMode::Chernoff { xi: 1e-10 };
        let s1 = s1_lower(&t0, &params, mode).unwrap();
        assert!(e1_upper(&t0, &params, s1, mode).unwrap() > 0.0);
    }

    #[test]
    fn garbage_channel_clamped() {
        let params = SourceParams::default();
        let mut t = ideal_tally(1e-3, 0.0, 0.0, 1e10, &params);
        for class in SourceClass::ALL {
            t.errors[class.index()] = t.detected[class.index()];
        }
        let s1 = s1_lower(&t, &params, BoundMode::Asymptotic).unwrap();
        assert_eq!(e1_upper(&t, &params, s1, BoundMode::Asymptotic).unwrap(), 0.5);
    }

    #[test]
    fn chernoff_is_more_pessimistic() {
        let params = SourceParams::default();
        let t = ideal_tally(6e-5, 6e-7, 0.003, 4.6e10, &params);
        let a = s1_lower(&t, &params, BoundMode::Asymptotic).unwrap();
        let c = s1_lower(&t, &params, BoundMode::Chernoff { xi: 1e-10 }).unwrap();
        assert!(c < a && c > 0.5 * a);
    }

    #[test]
    fn block_report() {
        let params = SourceParams::default();
        let t = ideal_tally(6e-5, 6e-7, 0.003, 4.6e10, &params);
        let key_bits = 500_000;
        let res = analyze_block(7, &t, &params, BoundMode::Chernoff { xi: 1e-10 }, key_bits, 47_012.0).unwrap();
        assert!(res.r > 0 && res.r < key_bits);
        assert!(res.s1_lower < key_bits as f64);
        assert!(rel(res.xi_total.unwrap(), 6e-10) < 1e-12);
        let v: serde_json::Value = serde_json::from_str(&res.to_json()).unwrap();
        for key in ["block_id", "sent", "s", "t", "s1_lower", "e1_upper", "lec", "r", "xi"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn rejects_bad_tally() {
        let params = SourceParams::default();
        let mut t = ideal_tally(1e-3, 0.0, 0.0, 1e8, &params);
        t.sent[0] = 0;
        assert!(matches!(s1_lower(&t, &params, BoundMode::Asymptotic), Err(FiniteKeyError::Tally { .. })));
    }
}
