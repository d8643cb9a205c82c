//! Satellite pass geometry, downlink budget, gating and detection simulation.

mod sparse;

pub use sparse::{simulate_pass, SparsePass, SparsePulseCache};

use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::rng::{domain, stream};
use crate::source::{Basis, PulseRecord, SourceError, SourceParams, PULSE_CHUNK};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Elevation at which the link is established and lost.
pub const LINK_THRESHOLD_DEG: f64 = 10.0;
/// 625 MHz repetition rate.
pub const DEFAULT_PULSE_PERIOD: f64 = 1.6e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinkError {
    #[error("max elevation {0} deg must lie in [10, 90]")]
    MaxElevation(f64),
    #[error("pass duration and timestep must be positive (duration {duration}, timestep {timestep})")]
    Timing { duration: f64, timestep: f64 },
    #[error("orbit altitude must be positive (got {0})")]
    Altitude(f64),
    #[error("link parameter {name} = {value} is out of range")]
    Param { name: &'static str, value: f64 },
    #[error("gate width {gate_width} exceeds pulse period {pulse_period}")]
    GateWiderThanPeriod { gate_width: f64, pulse_period: f64 },
    #[error("pulse {sequence} falls outside the {samples}-sample link")]
    PulseOutsideLink { sequence: u64, samples: usize },
    #[error(transparent)]
    Source(#[from] SourceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PassProfile {
    pub start_epoch: f64,
    pub duration: f64,
    pub orbit_altitude: f64,
    pub max_elevation: f64,
    pub timestep: f64,
}

impl Default for PassProfile {
    fn default() -> Self {
        Self {
            start_epoch: 0.0,
            duration: 300.0,
            orbit_altitude: 500e3,
            max_elevation: 40.0,
            timestep: 1.0,
        }
    }
}

impl PassProfile {
    pub fn validate(&self) -> Result<(), LinkError> {
        if !(LINK_THRESHOLD_DEG..=90.0).contains(&self.max_elevation) {
            return Err(LinkError::MaxElevation(self.max_elevation));
        }
        if !(self.duration > 0.0 && self.timestep > 0.0) || !self.duration.is_finite() {
            return Err(LinkError::Timing { duration: self.duration, timestep: self.timestep });
        }
        if !(self.orbit_altitude > 0.0) {
            return Err(LinkError::Altitude(self.orbit_altitude));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration / self.timestep).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSample {
    /// Midpoint of the interval the sample represents.
    pub time: f64,
    pub elevation: f64,
    pub distance: f64,
    pub transmittance: f64,
    /// Total noise click rate over all detectors, before gating.
    pub background_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkBudgetParams {
    pub divergence_full_angle: f64,
    pub receiver_aperture: f64,
    pub ogs_efficiency: f64,
    pub detector_efficiency: f64,
    pub pointing_jitter_rms: f64,
    pub atmospheric_zenith_loss_db: f64,
    /// Per detector.
    pub dark_count_rate: f64,
    /// Stray light per detector; one scalar per pass.
    pub background_rate: f64,
    pub detectors: u32,
    pub gate_width: f64,
    pub gate_signal_efficiency: f64,
    pub pulse_period: f64,
}

impl Default for LinkBudgetParams {
    fn default() -> Self {
        Self {
            divergence_full_angle: 10e-6,
            receiver_aperture: 0.28,
            ogs_efficiency: 0.49,
            detector_efficiency: 0.60,
            pointing_jitter_rms: 1.5e-6,
            atmospheric_zenith_loss_db: 3.0,
            dark_count_rate: 25.0,
            background_rate: 150.0,
            detectors: 4,
            gate_width: 800e-12,
            gate_signal_efficiency: 0.80,
            pulse_period: DEFAULT_PULSE_PERIOD,
        }
    }
}

impl LinkBudgetParams {
    pub fn validate(&self) -> Result<(), LinkError> {
        let unit = [
            ("ogs_efficiency", self.ogs_efficiency),
            ("detector_efficiency", self.detector_efficiency),
            ("gate_signal_efficiency", self.gate_signal_efficiency),
        ];
        for (name, value) in unit {
            if !(value > 0.0 && value <= 1.0) {
                return Err(LinkError::Param { name, value });
            }
        }
        let positive = [
            ("divergence_full_angle", self.divergence_full_angle),
            ("receiver_aperture", self.receiver_aperture),
            ("gate_width", self.gate_width),
            ("pulse_period", self.pulse_period),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(LinkError::Param { name, value });
            }
        }
        let non_negative = [
            ("pointing_jitter_rms", self.pointing_jitter_rms),
            ("atmospheric_zenith_loss_db", self.atmospheric_zenith_loss_db),
            ("dark_count_rate", self.dark_count_rate),
            ("background_rate", self.background_rate),
        ];
        for (name, value) in non_negative {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(LinkError::Param { name, value });
            }
        }
        if self.detectors == 0 {
            return Err(LinkError::Param { name: "detectors", value: 0.0 });
        }
        if self.gate_width > self.pulse_period {
            return Err(LinkError::GateWiderThanPeriod {
                gate_width: self.gate_width,
                pulse_period: self.pulse_period,
            });
        }
        Ok(())
    }

    /// Noise clicks per second summed over detectors.
    pub fn noise_rate(&self) -> f64 {
        self.detectors as f64 * (self.dark_count_rate + self.background_rate)
    }
}

/// Earth-central angle between station and sub-satellite point at elevation `el`.
fn central_angle(elevation: f64, orbit_radius: f64) -> f64 {
    (EARTH_RADIUS_M * elevation.cos() / orbit_radius).acos() - elevation
}

/// Slant range to a satellite at `altitude` seen at `elevation` (radians).
pub fn slant_range(elevation: f64, altitude: f64) -> f64 {
    let r = EARTH_RADIUS_M + altitude;
    let gamma = central_angle(elevation, r);
    (EARTH_RADIUS_M * EARTH_RADIUS_M + r * r - 2.0 * EARTH_RADIUS_M * r * gamma.cos()).sqrt()
}

/// Geometry of a symmetric circular-orbit pass.
///
/// The angular rate is chosen so the satellite crosses the link threshold at
/// both ends of the profile's duration. Samples sit at interval midpoints;
/// transmittance is left at 1 and background at 0 until
/// [`channel_transmittance`] is applied.
pub fn generate_pass(profile: &PassProfile) -> Result<Vec<LinkSample>, LinkError> {
    profile.validate()?;
    let r = EARTH_RADIUS_M + profile.orbit_altitude;
    let gamma_min = central_angle(profile.max_elevation.to_radians(), r);
    let gamma_end = central_angle(LINK_THRESHOLD_DEG.to_radians(), r);
    let half = 0.5 * profile.duration;
    let rate = ((gamma_end.cos() / gamma_min.cos()).clamp(-1.0, 1.0)).acos() / half;
    let n = profile.num_samples();
    let samples = (0..n)
        .map(|i| {
            let t0 = i as f64 * profile.timestep;
            let t1 = ((i + 1) as f64 * profile.timestep).min(profile.duration);
            let t = 0.5 * (t0 + t1);
            let cos_gamma = gamma_min.cos() * (rate * (t - half)).cos();
            let sin_gamma = (1.0 - cos_gamma * cos_gamma).max(0.0).sqrt();
            let elevation = (cos_gamma - EARTH_RADIUS_M / r).atan2(sin_gamma).to_degrees();
            let distance = (EARTH_RADIUS_M * EARTH_RADIUS_M + r * r - 2.0 * EARTH_RADIUS_M * r * cos_gamma).sqrt();
            LinkSample {
                time: profile.start_epoch + t,
                elevation,
                distance,
                transmittance: 1.0,
                background_rate: 0.0,
            }
        })
        .collect();
    Ok(samples)
}

pub fn geometric_capture(distance: f64, params: &LinkBudgetParams) -> f64 {
    let ratio = params.receiver_aperture / (params.divergence_full_angle * distance);
    (ratio * ratio).min(1.0)
}

/// Atmospheric transmission with zenith loss scaled by sec(zenith), capped at
/// the link threshold elevation.
pub fn atmospheric_transmission(elevation_deg: f64, zenith_loss_db: f64) -> f64 {
    let el = elevation_deg.clamp(LINK_THRESHOLD_DEG, 90.0).to_radians();
    10f64.powf(-zenith_loss_db / el.sin() / 10.0)
}

pub fn jitter_penalty(params: &LinkBudgetParams) -> f64 {
    let x = params.pointing_jitter_rms / params.divergence_full_angle;
    (-4.0 * x * x).exp()
}

/// End-to-end single-photon transmittance of the gated downlink.
pub fn channel_transmittance(elevation_deg: f64, distance: f64, params: &LinkBudgetParams) -> f64 {
    geometric_capture(distance, params)
        * atmospheric_transmission(elevation_deg, params.atmospheric_zenith_loss_db)
        * params.ogs_efficiency
        * params.detector_efficiency
        * params.gate_signal_efficiency
        * jitter_penalty(params)
}

/// Fills in transmittance and background for geometry samples.
pub fn apply_link_budget(samples: &mut [LinkSample], params: &LinkBudgetParams) {
    let noise = params.noise_rate();
    for s in samples {
        s.transmittance = channel_transmittance(s.elevation, s.distance, params);
        s.background_rate = noise;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub sequence: u64,
    pub measured_basis: Basis,
    pub measured_bit: bool,
    /// Seconds since the start of the pass, in picoseconds to keep the type `Eq`.
    pub timestamp_ps: u64,
    /// Simulator truth: the click came from noise, not the pulse.
    pub is_background: bool,
}

impl DetectionEvent {
    pub fn timestamp(&self) -> f64 {
        self.timestamp_ps as f64 * 1e-12
    }
}

/// Temporal gating of a raw (ungated) event stream.
///
/// Signal clicks survive with the gate's signal efficiency and noise clicks
/// with `gate_width / pulse_period`.
pub fn apply_gating(
    events: &[DetectionEvent],
    pulse_period: f64,
    params: &LinkBudgetParams,
    seed: u64,
) -> Result<Vec<DetectionEvent>, LinkError> {
    if !(pulse_period > 0.0) || params.gate_width > pulse_period {
        return Err(LinkError::GateWiderThanPeriod { gate_width: params.gate_width, pulse_period });
    }
    let keep_noise = params.gate_width / pulse_period;
    let keep_signal = params.gate_signal_efficiency;
    let mut rng = stream(seed, domain::GATING, 0);
    Ok(events
        .iter()
        .filter(|e| {
            let p = if e.is_background { keep_noise } else { keep_signal };
            p >= 1.0 || rng.random::<f64>() < p
        })
        .copied()
        .collect())
}

/// A pass ready for pulse-level simulation: link samples on a fixed grid and
/// the pulse index range each sample covers.
#[derive(Debug, Clone)]
pub struct Downlink {
    pub samples: Vec<LinkSample>,
    pub source: SourceParams,
    pub pulse_period: f64,
    pub gate_width: f64,
    starts: Vec<u64>,
    total: u64,
}

impl Downlink {
    pub fn new(
        profile: &PassProfile,
        samples: Vec<LinkSample>,
        budget: &LinkBudgetParams,
        source: &SourceParams,
    ) -> Result<Self, LinkError> {
        profile.validate()?;
        budget.validate()?;
        source.validate()?;
        let total = (profile.duration / budget.pulse_period).round() as u64;
        let starts = (0..samples.len())
            .map(|i| ((i as f64 * profile.timestep / budget.pulse_period).round() as u64).min(total))
            .collect();
        Ok(Self {
            samples,
            source: *source,
            pulse_period: budget.pulse_period,
            gate_width: budget.gate_width,
            starts,
            total,
        })
    }

    /// Geometry plus link budget for a profile.
    pub fn from_profile(profile: &PassProfile, budget: &LinkBudgetParams, source: &SourceParams) -> Result<Self, LinkError> {
        let mut samples = generate_pass(profile)?;
        apply_link_budget(&mut samples, budget);
        Self::new(profile, samples, budget, source)
    }

    pub fn total_pulses(&self) -> u64 {
        self.total
    }

    /// Pulse indices `[start, end)` covered by sample `i`.
    pub fn pulse_range(&self, i: usize) -> (u64, u64) {
        let end = self.starts.get(i + 1).copied().unwrap_or(self.total);
        (self.starts[i], end)
    }

    pub fn sample_of(&self, sequence: u64) -> Option<usize> {
        if sequence >= self.total {
            return None;
        }
        Some(self.starts.partition_point(|&s| s <= sequence) - 1)
    }

    /// Probability that a gate contains at least one noise click.
    pub fn noise_probability(&self, sample: usize) -> f64 {
        -(-self.samples[sample].background_rate * self.gate_width).exp_m1()
    }

    /// `1 - (1 - p_noise) e^(-m eta)` for intensity `m`.
    pub fn click_probability(&self, sample: usize, intensity: f64) -> f64 {
        let eta = self.samples[sample].transmittance;
        1.0 - (1.0 - self.noise_probability(sample)) * (-intensity * eta).exp()
    }

    fn timestamp_ps(&self, sequence: u64) -> u64 {
        (sequence as f64 * self.pulse_period * 1e12).round() as u64
    }
}

/// Outcome of one gate given the pulse, drawing the click decision.
pub(crate) fn detect<R: Rng + ?Sized>(
    downlink: &Downlink,
    sample: usize,
    pulse: &PulseRecord,
    rng: &mut R,
) -> Option<DetectionEvent> {
    let eta = downlink.samples[sample].transmittance;
    let m = downlink.source.class_intensity(pulse.class);
    let signal = rng.random::<f64>() < -(-m * eta).exp_m1();
    let noise = rng.random::<f64>() < downlink.noise_probability(sample);
    if !(signal || noise) {
        return None;
    }
    Some(outcome(downlink, pulse, signal, rng))
}

/// Measurement result for a gate known to have clicked.
pub(crate) fn outcome<R: Rng + ?Sized>(
    downlink: &Downlink,
    pulse: &PulseRecord,
    signal: bool,
    rng: &mut R,
) -> DetectionEvent {
    let measured_basis = Basis::from_bit(rng.random());
    let random_bit: bool = rng.random();
    let measured_bit = match (signal, pulse.bit) {
        (true, Some(bit)) if measured_basis == pulse.basis => {
            bit ^ (rng.random::<f64>() < downlink.source.intrinsic_error())
        }
        _ => random_bit,
    };
    DetectionEvent {
        sequence: pulse.sequence,
        measured_basis,
        measured_bit,
        timestamp_ps: downlink.timestamp_ps(pulse.sequence),
        is_background: !signal,
    }
}

/// Pulse-by-pulse Monte Carlo of the gated downlink.
///
/// When a signal photon and a noise click share a gate the event is kept as
/// signal, so the click probability is exactly `1 - (1 - p_noise) e^(-m eta)`.
pub fn simulate_detections(
    pulses: &[PulseRecord],
    downlink: &Downlink,
    seed: u64,
    exec: Execution,
) -> Result<Vec<DetectionEvent>, LinkError> {
    if let Some(p) = pulses.iter().find(|p| p.sequence >= downlink.total_pulses()) {
        return Err(LinkError::PulseOutsideLink { sequence: p.sequence, samples: downlink.samples.len() });
    }
    let chunks = pulses.len().div_ceil(PULSE_CHUNK);
    let parts = exec.map_indexed(chunks, |c| {
        let mut rng = stream(seed, domain::CHANNEL, c as u64);
        let lo = c * PULSE_CHUNK;
        let hi = (lo + PULSE_CHUNK).min(pulses.len());
        let mut out = Vec::new();
        for p in &pulses[lo..hi] {
            let sample = downlink.sample_of(p.sequence).expect("checked above");
            if let Some(e) = detect(downlink, sample, p, &mut rng) {
                out.push(e);
            }
        }
        out
    });
    Ok(parts.into_iter().flatten().collect())
}

/// CSV with columns `time_s, elevation_deg, distance_m, transmittance, background_cps`.
pub fn write_link_csv<W: Write>(samples: &[LinkSample], mut out: W) -> io::Result<()> {
    writeln!(out, "time_s,elevation_deg,distance_m,transmittance,background_cps")?;
    for s in samples {
        writeln!(
            out,
            "{},{},{},{:e},{}",
            s.time, s.elevation, s.distance, s.transmittance, s.background_rate
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::{prepare_pulses, SourceClass};

    fn unit_budget() -> LinkBudgetParams {
        LinkBudgetParams {
            ogs_efficiency: 1.0,
            detector_efficiency: 1.0,
            gate_signal_efficiency: 1.0,
            pointing_jitter_rms: 0.0,
            atmospheric_zenith_loss_db: 0.0,
            ..Default::default()
        }
    }

    /// Independent slant-range oracle from the law of cosines in the
    /// station-centred triangle.
    fn slant_oracle(el_deg: f64, h: f64) -> f64 {
        let r = EARTH_RADIUS_M;
        let s = el_deg.to_radians().sin();
        -r * s + (r * r * s * s + h * h + 2.0 * r * h).sqrt()
    }

    #[test]
    fn zenith_pass_minimum_is_altitude() {
        let profile = PassProfile { max_elevation: 90.0, duration: 300.0, timestep: 2.0, ..Default::default() };
        let s = generate_pass(&profile).unwrap();
        let min = s.iter().map(|x| x.distance).fold(f64::INFINITY, f64::min);
        let dmin = slant_oracle(90.0, 500e3);
        assert!((dmin - 500e3).abs() < 1e-6);
        // 150 samples; the midpoint sample sits one second off zenith
        assert!(min >= 500e3 - 1e-6 && min < 500e3 + 200.0, "{min}");
    }

    #[test]
    fn slant_range_matches_oracle() {
        for el in [10.0, 20.0, 34.1, 60.0, 90.0] {
            let a = slant_range(f64::to_radians(el), 500e3);
            assert!((a - slant_oracle(el, 500e3)).abs() < 1e-6, "el {el}");
        }
    }

    #[test]
    fn pass_reaches_max_elevation_and_threshold() {
        let profile = PassProfile { max_elevation: 34.1, timestep: 0.5, ..Default::default() };
        let s = generate_pass(&profile).unwrap();
        let max_el = s.iter().map(|x| x.elevation).fold(0.0, f64::max);
        assert!((max_el - 34.1).abs() < 0.01, "{max_el}");
        assert!((s[0].elevation - 10.0).abs() < 0.1, "{}", s[0].elevation);
        let min = s.iter().map(|x| x.distance).fold(f64::INFINITY, f64::min);
        assert!((min - slant_oracle(34.1, 500e3)).abs() < 200.0);
    }

    #[test]
    fn pass_is_symmetric() {
        let profile = PassProfile { max_elevation: 55.0, ..Default::default() };
        let s = generate_pass(&profile).unwrap();
        let n = s.len();
        for i in 0..n {
            assert!((s[i].distance - s[n - 1 - i].distance).abs() < 1e-6 * s[i].distance);
        }
    }

    #[test]
    fn rejects_low_pass() {
        let profile = PassProfile { max_elevation: 9.0, ..Default::default() };
        assert!(matches!(generate_pass(&profile), Err(LinkError::MaxElevation(_))));
    }

    #[test]
    fn geometric_capture_values() {
        let p = unit_budget();
        assert!((geometric_capture(500e3, &p) - 3.136e-3).abs() < 1e-15);
        assert!((geometric_capture(1000e3, &p) - 3.136e-3 / 4.0).abs() < 1e-15);
        assert_eq!(channel_transmittance(90.0, 1.0, &p), 1.0);
        assert!((channel_transmittance(90.0, 500e3, &p) - 3.136e-3).abs() < 1e-15);
    }

    #[test]
    fn transmittance_monotone() {
        let p = LinkBudgetParams::default();
        let mut last = f64::INFINITY;
        for d in (500..2000).step_by(50) {
            let t = channel_transmittance(40.0, d as f64 * 1e3, &p);
            assert!(t <= last);
            last = t;
        }
        let mut last = 0.0;
        for el in 0..=90 {
            let t = channel_transmittance(el as f64, 800e3, &p);
            assert!(t >= last);
            last = t;
        }
    }

    fn background_events(n: usize) -> Vec<DetectionEvent> {
        (0..n as u64)
            .map(|i| DetectionEvent {
                sequence: i,
                measured_basis: Basis::Z,
                measured_bit: false,
                timestamp_ps: i * 1600,
                is_background: true,
            })
            .collect()
    }

    #[test]
    fn gating_halves_background() {
        let p = LinkBudgetParams::default();
        let n = 1_000_000;
        let kept = apply_gating(&background_events(n), 1.6e-9, &p, 3).unwrap().len() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((kept - 5e5).abs() < 3.0 * sigma, "{kept}");
        let full = LinkBudgetParams { gate_width: 1.6e-9, gate_signal_efficiency: 1.0, ..p };
        let mut ev = background_events(1000);
        ev[3].is_background = false;
        assert_eq!(apply_gating(&ev, 1.6e-9, &full, 3).unwrap().len(), 1000);
        let wide = LinkBudgetParams { gate_width: 2e-9, ..p };
        assert!(apply_gating(&ev, 1.6e-9, &wide, 3).is_err());
    }

    fn flat_downlink(eta: f64, noise: f64, source: SourceParams, duration: f64) -> Downlink {
        let budget = LinkBudgetParams::default();
        let profile = PassProfile { duration, timestep: duration, ..Default::default() };
        let sample = LinkSample { time: 0.0, elevation: 45.0, distance: 1e6, transmittance: eta, background_rate: noise };
        Downlink::new(&profile, vec![sample], &budget, &source).unwrap()
    }

    #[test]
    fn click_rate_matches_poisson() {
        let source = SourceParams { p_signal: 1.0, p_decoy: 0.0, p_vacuum: 0.0, ..Default::default() };
        let n = 10_000_000usize;
        let dl = flat_downlink(3.2e-3, 0.0, source, n as f64 * 1.6e-9);
        let pulses = prepare_pulses(n, &source, 5, Execution::Parallel).unwrap();
        let ev = simulate_detections(&pulses, &dl, 9, Execution::Parallel).unwrap();
        let p = 1.0 - (-0.8f64 * 3.2e-3).exp();
        let mean = n as f64 * p;
        let sigma = (mean * (1.0 - p)).sqrt();
        assert!((ev.len() as f64 - mean).abs() < 3.0 * sigma, "{} vs {mean}", ev.len());
        assert!(ev.iter().all(|e| !e.is_background));
    }

    #[test]
    fn vacuum_into_quiet_detector_is_silent() {
        let source = SourceParams { w: 0.0, p_signal: 0.0, p_decoy: 0.0, p_vacuum: 1.0, ..Default::default() };
        let dl = flat_downlink(0.5, 0.0, source, 1e-3);
        let pulses = prepare_pulses(100_000, &source, 1, Execution::Sequential).unwrap();
        assert!(simulate_detections(&pulses, &dl, 2, Execution::Sequential).unwrap().is_empty());
    }

    #[test]
    fn noiseless_matched_bits_agree() {
        let source = SourceParams { intrinsic_contrast_db: f64::INFINITY, ..Default::default() };
        let dl = flat_downlink(0.3, 0.0, source, 1e-3);
        let pulses = prepare_pulses(200_000, &source, 3, Execution::Parallel).unwrap();
        let ev = simulate_detections(&pulses, &dl, 4, Execution::Parallel).unwrap();
        let mut matched = 0;
        for e in &ev {
            let p = pulses[e.sequence as usize];
            if p.class != SourceClass::Vacuum && p.basis == e.measured_basis {
                assert_eq!(Some(e.measured_bit), p.bit);
                matched += 1;
            }
        }
        assert!(matched > 10_000);
    }

    #[test]
    fn deterministic_and_execution_independent() {
        let source = SourceParams::default();
        let dl = flat_downlink(0.01, 1e5, source, 1e-3);
        let pulses = prepare_pulses(300_000, &source, 3, Execution::Parallel).unwrap();
        let a = simulate_detections(&pulses, &dl, 4, Execution::Parallel).unwrap();
        let b = simulate_detections(&pulses, &dl, 4, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().any(|e| e.is_background));
    }

    #[test]
    fn pulses_outside_link_rejected() {
        let source = SourceParams::default();
        let dl = flat_downlink(0.01, 0.0, source, 1e-6);
        let pulses = prepare_pulses(1000, &source, 3, Execution::Sequential).unwrap();
        assert!(matches!(
            simulate_detections(&pulses, &dl, 1, Execution::Sequential),
            Err(LinkError::PulseOutsideLink { .. })
        ));
    }

    #[test]
    fn csv_export() {
        let mut samples = generate_pass(&PassProfile { timestep: 100.0, ..Default::default() }).unwrap();
        apply_link_budget(&mut samples, &LinkBudgetParams::default());
        let mut buf = Vec::new();
        write_link_csv(&samples, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "time_s,elevation_deg,distance_m,transmittance,background_cps");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1].split(',').count(), 5);
    }
}
