//! Shoebox rooms, microphone geometry and image-method impulse responses.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

pub type Vec3 = [f64; 3];

/// Distance between the two microphones, metres.
pub const MIC_SPACING: f64 = 0.10;
pub const SOUND_SPEED: f64 = 343.0;
/// Taps of the windowed-sinc fractional delay.
pub const SINC_TAPS: usize = 81;
const HALF_TAPS: usize = SINC_TAPS / 2;
/// Default image order per dimension.
pub const DEFAULT_MAX_ORDER: usize = 20;

/// A shoebox room with a two-microphone array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims: Vec3,
    /// Reverberation time in seconds; zero means anechoic.
    pub rt60: f64,
    pub mic_positions: [Vec3; 2],
    pub sound_speed: f64,
    pub sample_rate: u32,
}

impl RoomSpec {
    /// Room with the microphone pair centred in the room, spaced along x.
    /// Microphone 1 sits at the smaller x coordinate.
    pub fn centered(dims: Vec3, rt60: f64, sample_rate: u32) -> Result<Self> {
        let c = [dims[0] / 2.0, dims[1] / 2.0, dims[2] / 2.0];
        let h = MIC_SPACING / 2.0;
        let room = Self {
            dims,
            rt60,
            mic_positions: [[c[0] - h, c[1], c[2]], [c[0] + h, c[1], c[2]]],
            sound_speed: SOUND_SPEED,
            sample_rate,
        };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| !(*d > 0.0)) {
            return Err(domain!("room dimensions must be positive: {:?}", self.dims));
        }
        for m in &self.mic_positions {
            if !self.contains(m) {
                return Err(domain!("microphone {m:?} outside the room"));
            }
        }
        let spacing = dist(&self.mic_positions[0], &self.mic_positions[1]);
        if (spacing - MIC_SPACING).abs() > 1e-9 {
            return Err(domain!("microphone spacing {spacing} m, expected {MIC_SPACING} m"));
        }
        if !(self.rt60 == 0.0 || (0.04..=0.2).contains(&self.rt60)) {
            return Err(domain!("rt60 {} s outside {{0}} or [0.04, 0.2]", self.rt60));
        }
        if !(self.sound_speed > 0.0) || self.sample_rate == 0 {
            return Err(domain!("sound speed and sample rate must be positive"));
        }
        Ok(())
    }

    /// Strictly inside the room.
    pub fn contains(&self, p: &Vec3) -> bool {
        p.iter().zip(&self.dims).all(|(x, d)| *x > 0.0 && *x < *d)
    }

    pub fn mic_center(&self) -> Vec3 {
        let [a, b] = &self.mic_positions;
        [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0]
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    /// Uniform wall reflection coefficient from Eyring's reverberation formula,
    /// `T60 = 24 ln(10) V / (-c S ln(1 - α))` with `β = sqrt(1 - α)`.
    pub fn reflection_coefficient(&self) -> f64 {
        if self.rt60 == 0.0 {
            return 0.0;
        }
        let k = 24.0 * core::f64::consts::LN_10 / self.sound_speed;
        libm::exp(-k * self.volume() / (2.0 * self.surface() * self.rt60))
    }
}

pub fn dist(a: &Vec3, b: &Vec3) -> f64 {
    libm::sqrt((0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum())
}

/// Hann-windowed sinc sample at offset `x` from the fractional delay.
fn windowed_sinc(x: f64) -> f64 {
    if x.abs() > SINC_TAPS as f64 / 2.0 {
        return 0.0;
    }
    let window = 0.5 * (1.0 + libm::cos(2.0 * PI * x / SINC_TAPS as f64));
    let sinc = if x == 0.0 { 1.0 } else { libm::sin(PI * x) / (PI * x) };
    window * sinc
}

/// Adds an impulse of amplitude `amp` at fractional sample `delay`.
fn add_fractional_impulse(h: &mut [f64], delay: f64, amp: f64) {
    let centre = libm::round(delay) as i64;
    for n in centre - HALF_TAPS as i64..=centre + HALF_TAPS as i64 {
        if n < 0 || n as usize >= h.len() {
            continue;
        }
        h[n as usize] += amp * windowed_sinc(n as f64 - delay);
    }
}

/// Room impulse response from `source` to `mic` by the image method.
///
/// Images of order up to `max_order` per dimension contribute
/// `β^reflections / (4π d)` at delay `d / c`. The response is long enough to
/// hold the direct path plus `rt60` seconds; later images are dropped. An
/// anechoic room yields the direct path only.
pub fn generate_rir(room: &RoomSpec, source: &Vec3, mic: &Vec3, max_order: usize) -> Result<Vec<f64>> {
    if !room.contains(source) {
        return Err(domain!("source {source:?} outside the room"));
    }
    if !room.contains(mic) {
        return Err(domain!("microphone {mic:?} outside the room"));
    }
    if !(room.rt60 >= 0.0) {
        return Err(domain!("rt60 must be non-negative"));
    }
    let direct = dist(source, mic);
    if direct == 0.0 {
        return Err(domain!("source coincides with the microphone"));
    }
    let fs = room.sample_rate as f64;
    let c = room.sound_speed;
    let direct_delay = direct * fs / c;
    let tail = libm::ceil(room.rt60 * fs) as usize;
    let len = tail + libm::ceil(direct_delay) as usize + HALF_TAPS + 1;
    let mut h = vec![0.0; len];

    if room.rt60 == 0.0 {
        add_fractional_impulse(&mut h, direct_delay, 1.0 / (4.0 * PI * direct));
        return Ok(h);
    }

    let beta = room.reflection_coefficient();
    let max_delay = (len - HALF_TAPS - 1) as f64;
    let max_path = max_delay * c / fs;
    let orders: Vec<i64> = room
        .dims
        .iter()
        .map(|d| (max_order as i64).min(libm::ceil(max_path / (2.0 * d)) as i64 + 1))
        .collect();

    for mx in -orders[0]..=orders[0] {
        for qx in 0..2i64 {
            let dx = (1 - 2 * qx) as f64 * source[0] - mic[0] + 2.0 * mx as f64 * room.dims[0];
            let rx = (mx - qx).abs() + mx.abs();
            for my in -orders[1]..=orders[1] {
                for qy in 0..2i64 {
                    let dy = (1 - 2 * qy) as f64 * source[1] - mic[1] + 2.0 * my as f64 * room.dims[1];
                    let ry = (my - qy).abs() + my.abs();
                    let dxy2 = dx * dx + dy * dy;
                    if dxy2 > max_path * max_path {
                        continue;
                    }
                    for mz in -orders[2]..=orders[2] {
                        for qz in 0..2i64 {
                            let dz = (1 - 2 * qz) as f64 * source[2] - mic[2] + 2.0 * mz as f64 * room.dims[2];
                            let d = libm::sqrt(dxy2 + dz * dz);
                            let delay = d * fs / c;
                            if delay > max_delay {
                                continue;
                            }
                            let rz = (mz - qz).abs() + mz.abs();
                            let reflections = (rx + ry + rz) as i32;
                            let amp = libm::pow(beta, reflections as f64) / (4.0 * PI * d);
                            add_fractional_impulse(&mut h, delay, amp);
                        }
                    }
                }
            }
        }
    }
    Ok(h)
}

/// Direction of arrival in degrees, measured from the microphone axis
/// (unit vector from microphone 2 towards microphone 1 is 0°).
pub fn compute_azimuth(source: &Vec3, room: &RoomSpec) -> Result<f64> {
    let centre = room.mic_center();
    let v = [source[0] - centre[0], source[1] - centre[1], source[2] - centre[2]];
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
    if !(norm > 0.0) {
        return Err(domain!("source lies at the array centre"));
    }
    let [m1, m2] = &room.mic_positions;
    let axis = [m1[0] - m2[0], m1[1] - m2[1], m1[2] - m2[2]];
    let axis_norm = libm::sqrt(axis.iter().map(|x| x * x).sum());
    let cos = (0..3).map(|i| v[i] * axis[i]).sum::<f64>() / (norm * axis_norm);
    Ok(libm::acos(cos.clamp(-1.0, 1.0)).to_degrees())
}

/// Number of direction classes (0°..180° in 5° steps).
pub const N_DIRECTIONS: usize = 37;

/// Nearest class on the 5° grid.
pub fn azimuth_to_class(azimuth_deg: f64) -> Result<usize> {
    if !(0.0..=180.0).contains(&azimuth_deg) {
        return Err(domain!("azimuth {azimuth_deg}° outside [0, 180]"));
    }
    Ok(libm::round(azimuth_deg / 5.0) as usize)
}
