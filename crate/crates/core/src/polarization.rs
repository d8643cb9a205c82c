//! Polarization compensation on the Poincaré sphere.
//!
//! Wave plates act on Stokes vectors as right-handed rotations about the
//! equatorial axis at twice the fast-axis angle: a quarter-wave plate turns by
//! 90 degrees and a half-wave plate by 180 degrees.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

/// Tolerance on the input triad before it is re-orthonormalized.
pub const TRIAD_TOLERANCE: f64 = 1e-6;

pub type Rotation = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolarizationError {
    #[error("input Stokes vectors are not a right-handed orthonormal triad (deviation {0:.3e})")]
    NotATriad(f64),
    #[error("non-finite Stokes component")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StokesVector {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

impl StokesVector {
    pub const H: Self = Self::new(1.0, 0.0, 0.0);
    pub const D: Self = Self::new(0.0, 1.0, 0.0);
    pub const R: Self = Self::new(0.0, 0.0, 1.0);

    pub const fn new(s1: f64, s2: f64, s3: f64) -> Self {
        Self { s1, s2, s3 }
    }

    fn arr(self) -> [f64; 3] {
        [self.s1, self.s2, self.s3]
    }

    fn from_arr(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn dot(self, o: Self) -> f64 {
        self.s1 * o.s1 + self.s2 * o.s2 + self.s3 * o.s3
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.s2 * o.s3 - self.s3 * o.s2,
            self.s3 * o.s1 - self.s1 * o.s3,
            self.s1 * o.s2 - self.s2 * o.s1,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, k: f64) -> Self {
        Self::new(self.s1 * k, self.s2 * k, self.s3 * k)
    }

    pub fn sub(self, o: Self) -> Self {
        Self::new(self.s1 - o.s1, self.s2 - o.s2, self.s3 - o.s3)
    }

    pub fn normalized(self) -> Self {
        self.scale(1.0 / self.norm())
    }

    pub fn distance(self, o: Self) -> f64 {
        self.sub(o).norm()
    }

    /// Linear polarization at real-space angle `psi`.
    pub fn linear(psi: f64) -> Self {
        Self::new((2.0 * psi).cos(), (2.0 * psi).sin(), 0.0)
    }

    pub fn rotate(self, m: &Rotation) -> Self {
        Self::from_arr(apply(m, self.arr()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlateKind {
    Qwp,
    Hwp,
}

impl PlateKind {
    pub fn retardance(self) -> f64 {
        match self {
            PlateKind::Qwp => FRAC_PI_2,
            PlateKind::Hwp => PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WavePlateSetting {
    pub kind: PlateKind,
    /// Fast-axis angle in `[0, pi)`.
    pub fast_axis_angle: f64,
}

impl WavePlateSetting {
    pub fn new(kind: PlateKind, angle: f64) -> Self {
        Self { kind, fast_axis_angle: normalize_angle(angle, PI) }
    }
}

fn normalize_angle(a: f64, period: f64) -> f64 {
    let r = a.rem_euclid(period);
    if r >= period { 0.0 } else { r }
}

fn apply(m: &Rotation, v: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
    }
    out
}

/// `a * b`: apply `b` first.
pub fn compose(a: &Rotation, b: &Rotation) -> Rotation {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Rotation) -> Rotation {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn determinant(m: &Rotation) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Largest entry of `m^T m - I`.
pub fn orthogonality_error(m: &Rotation) -> f64 {
    let p = compose(&transpose(m), m);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((p[i][j] - id).abs());
        }
    }
    worst
}

/// Rodrigues rotation by `angle` about unit `axis`.
pub fn axis_rotation(axis: [f64; 3], angle: f64) -> Rotation {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

pub fn waveplate_rotation(setting: WavePlateSetting) -> Rotation {
    let a = 2.0 * setting.fast_axis_angle;
    axis_rotation([a.cos(), a.sin(), 0.0], setting.kind.retardance())
}

/// Plate settings found by [`solve_compensation`], applied in order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compensation {
    pub qwp1: WavePlateSetting,
    pub qwp2: WavePlateSetting,
    pub hwp: WavePlateSetting,
}

impl Compensation {
    /// `HWP * QWP2 * QWP1`.
    pub fn rotation(&self) -> Rotation {
        let q1 = waveplate_rotation(self.qwp1);
        let q2 = waveplate_rotation(self.qwp2);
        let h = waveplate_rotation(self.hwp);
        compose(&h, &compose(&q2, &q1))
    }
}

/// Checks the triad and returns an exactly orthonormal right-handed version.
fn orthonormalize(r: StokesVector, h: StokesVector, d: StokesVector) -> Result<[StokesVector; 3], PolarizationError> {
    if [r, h, d].iter().flat_map(|v| v.arr()).any(|x| !x.is_finite()) {
        return Err(PolarizationError::NonFinite);
    }
    let dev = [
        (r.norm() - 1.0).abs(),
        (h.norm() - 1.0).abs(),
        (d.norm() - 1.0).abs(),
        r.dot(h).abs(),
        r.dot(d).abs(),
        h.dot(d).abs(),
        h.cross(d).distance(r),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    if dev > TRIAD_TOLERANCE {
        return Err(PolarizationError::NotATriad(dev));
    }
    let h = h.normalized();
    let d = d.sub(h.scale(d.dot(h))).normalized();
    let r = h.cross(d);
    Ok([r, h, d])
}

/// QWP/QWP/HWP settings that undo the rotation carrying the reference states
/// R, H, D to the given images.
///
/// QWP1 brings R' onto the equator, QWP2 carries it to the south pole (which
/// leaves H' on the equator), and the HWP flips the poles while reflecting H'
/// back onto H. When R' is already polar the first plate's axis is 0.
pub fn solve_compensation(
    r_img: StokesVector,
    h_img: StokesVector,
    d_img: StokesVector,
) -> Result<Compensation, PolarizationError> {
    let [r, h, _] = orthonormalize(r_img, h_img, d_img)?;

    let polar = r.s1.hypot(r.s2) < 1e-15;
    let theta1 = if polar { 0.0 } else { 0.5 * r.s2.atan2(r.s1) };
    let qwp1 = WavePlateSetting::new(PlateKind::Qwp, theta1);
    let m1 = waveplate_rotation(qwp1);
    let r1 = r.rotate(&m1);

    let qwp2 = WavePlateSetting::new(PlateKind::Qwp, 0.5 * axis_from(r1));
    let m2 = waveplate_rotation(qwp2);
    let h2 = h.rotate(&m1).rotate(&m2);

    let hwp = WavePlateSetting::new(PlateKind::Hwp, 0.25 * h2.s2.atan2(h2.s1));
    Ok(Compensation { qwp1, qwp2, hwp })
}

/// Azimuth of the equatorial axis `k = (-v2, v1, 0)` for equatorial `v`;
/// a quarter turn about `k` sends `v` to the south pole.
fn axis_from(v: StokesVector) -> f64 {
    v.s1.atan2(-v.s2)
}

/// Half-wave plate undoing a relative frame rotation `theta`.
///
/// A single HWP is a reflection of the linear states, so it restores every
/// linear state when the received frame is the sent frame rotated by `theta`
/// and mirrored once, i.e. a state at angle `psi` arrives at `theta - psi`.
/// The angle is reduced modulo the plate's physical period of `pi / 2`.
pub fn basis_rotation_hwp(theta: f64) -> WavePlateSetting {
    WavePlateSetting {
        kind: PlateKind::Hwp,
        fast_axis_angle: normalize_angle(0.5 * theta, FRAC_PI_2),
    }
}

/// CSV with columns `time_s, qwp1_rad, qwp2_rad, hwp_rad`.
pub fn write_compensation_csv<W: Write>(rows: &[(f64, Compensation)], mut out: W) -> io::Result<()> {
    writeln!(out, "time_s,qwp1_rad,qwp2_rad,hwp_rad")?;
    for (t, c) in rows {
        writeln!(
            out,
            "{},{},{},{}",
            t, c.qwp1.fast_axis_angle, c.qwp2.fast_axis_angle, c.hwp.fast_axis_angle
        )?;
    }
    Ok(())
}
