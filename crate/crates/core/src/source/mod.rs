//! Decoy-state BB84 source: five-source pulse preparation.
//!
//! Each pulse is drawn from one of the sources `o, x1, y1, x2, y2`
//! (vacuum, decoy-X, signal-X, decoy-Z, signal-Z) with probabilities
//! `(p_o, p_nu/2, p_mu/2, p_nu/2, p_mu/2)`. Vacuum pulses still carry a
//! randomly chosen basis label so that "matched basis" is defined for every
//! detection, but they carry no bit.

mod cache;
mod record;

pub use cache::{ClassCounts, ExplicitPulses, PulseCache};
pub use record::{read_pulse_records, write_pulse_records, RecordFormatError};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::rng::{domain, stream};

/// Pulses generated per independent RNG stream.
pub const PULSE_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub fn from_bit(x: bool) -> Self {
        if x {
            Basis::X
        } else {
            Basis::Z
        }
    }

    pub fn as_bit(self) -> bool {
        matches!(self, Basis::X)
    }
}

/// One of the five decoy-state sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceClass {
    /// `o`
    Vacuum,
    /// `x1`
    DecoyX,
    /// `y1`
    SignalX,
    /// `x2`
    DecoyZ,
    /// `y2`
    SignalZ,
}

/// Intensity level shared by sources: `w`, `nu` or `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntensityGroup {
    Vacuum,
    Decoy,
    Signal,
}

impl SourceClass {
    pub const ALL: [SourceClass; 5] = [
        SourceClass::Vacuum,
        SourceClass::DecoyX,
        SourceClass::SignalX,
        SourceClass::DecoyZ,
        SourceClass::SignalZ,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Basis fixed by the source, `None` for vacuum.
    pub fn basis(self) -> Option<Basis> {
        match self {
            SourceClass::Vacuum => None,
            SourceClass::DecoyX | SourceClass::SignalX => Some(Basis::X),
            SourceClass::DecoyZ | SourceClass::SignalZ => Some(Basis::Z),
        }
    }

    pub fn group(self) -> IntensityGroup {
        match self {
            SourceClass::Vacuum => IntensityGroup::Vacuum,
            SourceClass::DecoyX | SourceClass::DecoyZ => IntensityGroup::Decoy,
            SourceClass::SignalX | SourceClass::SignalZ => IntensityGroup::Signal,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SourceClass::Vacuum => "o",
            SourceClass::DecoyX => "x1",
            SourceClass::SignalX => "y1",
            SourceClass::DecoyZ => "x2",
            SourceClass::SignalZ => "y2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SourceError {
    #[error("source probabilities must be non-negative and sum to 1 (got {0})")]
    Probabilities(f64),
    #[error("intensities must satisfy 0 <= w < nu < mu (got w={w}, nu={nu}, mu={mu})")]
    IntensityOrder { w: f64, nu: f64, mu: f64 },
    #[error("polarization contrast must be positive (got {0} dB)")]
    Contrast(f64),
    #[error("pulse count must be positive")]
    EmptyStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceParams {
    /// Signal mean photon number.
    pub mu: f64,
    /// Decoy mean photon number.
    pub nu: f64,
    /// Vacuum-source mean photon number.
    pub w: f64,
    pub p_signal: f64,
    pub p_decoy: f64,
    pub p_vacuum: f64,
    pub intrinsic_contrast_db: f64,
}

impl Default for SourceParams {
    fn default() -> Self {
        Self {
            mu: 0.8,
            nu: 0.1,
            w: 0.001,
            p_signal: 0.5,
            p_decoy: 0.25,
            p_vacuum: 0.25,
            intrinsic_contrast_db: 25.0,
        }
    }
}

impl SourceParams {
    pub fn validate(&self) -> Result<(), SourceError> {
        let sum = self.p_signal + self.p_decoy + self.p_vacuum;
        let probs_ok = [self.p_signal, self.p_decoy, self.p_vacuum]
            .iter()
            .all(|p| (0.0..=1.0).contains(p));
        if !probs_ok || (sum - 1.0).abs() > 1e-9 {
            return Err(SourceError::Probabilities(sum));
        }
        if !(0.0 <= self.w && self.w < self.nu && self.nu < self.mu) {
            return Err(SourceError::IntensityOrder {
                w: self.w,
                nu: self.nu,
                mu: self.mu,
            });
        }
        if !(self.intrinsic_contrast_db > 0.0) {
            return Err(SourceError::Contrast(self.intrinsic_contrast_db));
        }
        Ok(())
    }

    pub fn class_probability(&self, class: SourceClass) -> f64 {
        match class.group() {
            IntensityGroup::Vacuum => self.p_vacuum,
            IntensityGroup::Decoy => self.p_decoy / 2.0,
            IntensityGroup::Signal => self.p_signal / 2.0,
        }
    }

    pub fn group_probability(&self, group: IntensityGroup) -> f64 {
        match group {
            IntensityGroup::Vacuum => self.p_vacuum,
            IntensityGroup::Decoy => self.p_decoy,
            IntensityGroup::Signal => self.p_signal,
        }
    }

    pub fn intensity(&self, group: IntensityGroup) -> f64 {
        match group {
            IntensityGroup::Vacuum => self.w,
            IntensityGroup::Decoy => self.nu,
            IntensityGroup::Signal => self.mu,
        }
    }

    pub fn class_intensity(&self, class: SourceClass) -> f64 {
        self.intensity(class.group())
    }

    /// Expected mean photon number per emitted pulse.
    pub fn mean_photon_number(&self) -> f64 {
        self.p_vacuum * self.w + self.p_decoy * self.nu + self.p_signal * self.mu
    }

    pub fn intrinsic_error(&self) -> f64 {
        intrinsic_error_prob(self.intrinsic_contrast_db)
    }

    /// Draws one source class from a uniform variate in `[0, 1)`.
    pub fn class_from_uniform(&self, u: f64) -> SourceClass {
        let mut acc = 0.0;
        for class in SourceClass::ALL {
            acc += self.class_probability(class);
            if u < acc {
                return class;
            }
        }
        // only reachable through rounding when the probabilities sum to 1
        *SourceClass::ALL
            .iter()
            .rev()
            .find(|c| self.class_probability(**c) > 0.0)
            .unwrap_or(&SourceClass::SignalZ)
    }
}

/// Probability that a prepared polarization state is detected in the
/// orthogonal state, from the extinction ratio in dB.
pub fn intrinsic_error_prob(contrast_db: f64) -> f64 {
    if contrast_db.is_infinite() && contrast_db > 0.0 {
        return 0.0;
    }
    1.0 / (1.0 + 10f64.powf(contrast_db / 10.0))
}

/// One prepared pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PulseRecord {
    pub sequence: u64,
    pub class: SourceClass,
    pub basis: Basis,
    /// `None` for vacuum pulses.
    pub bit: Option<bool>,
}

impl PulseRecord {
    /// Draws the record for pulse `sequence` from `rng`.
    pub fn draw<R: Rng + ?Sized>(sequence: u64, params: &SourceParams, rng: &mut R) -> Self {
        let class = params.class_from_uniform(rng.random());
        Self::draw_with_class(sequence, class, rng)
    }

    /// Completes a record whose class is already fixed.
    pub fn draw_with_class<R: Rng + ?Sized>(sequence: u64, class: SourceClass, rng: &mut R) -> Self {
        let basis_bit: bool = rng.random();
        let value: bool = rng.random();
        let basis = class.basis().unwrap_or(Basis::from_bit(basis_bit));
        let bit = class.basis().map(|_| value);
        Self {
            sequence,
            class,
            basis,
            bit,
        }
    }
}

/// Prepares `n` pulses starting at sequence number 0.
pub fn prepare_pulses(
    n: usize,
    params: &SourceParams,
    seed: u64,
    exec: Execution,
) -> Result<Vec<PulseRecord>, SourceError> {
    if n == 0 {
        return Err(SourceError::EmptyStream);
    }
    params.validate()?;
    let chunks = n.div_ceil(PULSE_CHUNK);
    let parts = exec.map_indexed(chunks, |c| {
        let mut rng = stream(seed, domain::PULSES, c as u64);
        let start = c * PULSE_CHUNK;
        let end = (start + PULSE_CHUNK).min(n);
        (start..end)
            .map(|s| PulseRecord::draw(s as u64, params, &mut rng))
            .collect::<Vec<_>>()
    });
    Ok(parts.into_iter().flatten().collect())
}
