//! Synthetic "speakers": harmonic sources with a speaker-specific pitch and
//! formant, gated by a random syllable-like envelope.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{peak, Waveform};
use crate::error::{domain, Result};
use crate::seed;

/// Peak level every synthetic utterance is normalised to.
pub const PEAK_LEVEL: f64 = 0.9;
/// Noise floor relative to the signal RMS.
const NOISE_FLOOR_DB: f64 = -30.0;
/// Amplitude of the fundamental; larger than any formant-shaped harmonic so
/// the fundamental stays the dominant spectral line.
const FUNDAMENTAL_AMP: f64 = 1.2;
const FORMANT_BANDWIDTH_HZ: f64 = 200.0;
/// Settling time of the resonator, generated and discarded.
const PRIME_S: f64 = 0.05;

/// Generator of synthetic speaker signals for a closed set of speakers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeakerSynth {
    pub n_speakers: usize,
    pub sample_rate: u32,
}

impl SpeakerSynth {
    pub fn new(n_speakers: usize, sample_rate: u32) -> Self {
        Self { n_speakers, sample_rate }
    }

    /// Fundamental frequency of a speaker in Hz.
    pub fn fundamental_hz(speaker_id: usize) -> f64 {
        90.0 + 3.0 * speaker_id as f64
    }

    /// Formant centre frequency of a speaker in Hz. Twelve consecutive ids
    /// always get distinct formants.
    pub fn formant_hz(speaker_id: usize) -> f64 {
        500.0 + ((speaker_id * 5) % 12) as f64 * 250.0
    }

    pub fn signal(&self, speaker_id: usize, duration_s: f64, seed: u64) -> Result<Waveform> {
        if speaker_id >= self.n_speakers {
            return Err(domain!("speaker id {speaker_id} outside [0, {})", self.n_speakers));
        }
        if !(duration_s > 0.0) {
            return Err(domain!("duration must be positive, got {duration_s}"));
        }
        let fs = self.sample_rate as f64;
        let len = libm::round(duration_s * fs) as usize;
        let prime = libm::round(PRIME_S * fs) as usize;
        let mut rng = seed::rng(seed, 0x5EED_0000 + speaker_id as u64);

        let f0 = Self::fundamental_hz(speaker_id);
        let n_harm = ((0.475 * fs) / f0) as usize;
        let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen::<f64>() * 2.0 * PI).collect();

        // Harmonics 2.. pass through the formant resonator; the fundamental
        // bypasses it.
        let comb: Vec<f64> = (0..prime + len)
            .map(|n| {
                let t = (n as f64 - prime as f64) / fs;
                (2..=n_harm).map(|k| libm::sin(2.0 * PI * k as f64 * f0 * t + phases[k - 1])).sum()
            })
            .collect();
        let shaped = resonate(&comb, Self::formant_hz(speaker_id), FORMANT_BANDWIDTH_HZ, fs);

        let envelope = syllable_envelope(&mut rng, len, fs);
        let mut out: Vec<f64> = (0..len)
            .map(|n| {
                let t = n as f64 / fs;
                let voiced = FUNDAMENTAL_AMP * libm::sin(2.0 * PI * f0 * t + phases[0]) + shaped[prime + n];
                envelope[n] * voiced
            })
            .collect();

        let rms = libm::sqrt(out.iter().map(|v| v * v).sum::<f64>() / len as f64);
        let noise_std = rms * libm::pow(10.0, NOISE_FLOOR_DB / 20.0);
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += noise_std * z;
        }
        let pk = peak(&out);
        if pk > 0.0 {
            let g = PEAK_LEVEL / pk;
            out.iter_mut().for_each(|v| *v *= g);
        }
        Ok(Waveform::mono(self.sample_rate, out))
    }
}

/// Two-pole resonator normalised to unit gain at its centre frequency.
fn resonate(x: &[f64], centre_hz: f64, bandwidth_hz: f64, fs: f64) -> Vec<f64> {
    let r = libm::exp(-PI * bandwidth_hz / fs);
    let theta = 2.0 * PI * centre_hz / fs;
    let (a1, a2) = (2.0 * r * libm::cos(theta), -r * r);
    // |1 - a1 e^{-jθ} - a2 e^{-2jθ}| at the centre frequency.
    let re = 1.0 - a1 * libm::cos(theta) - a2 * libm::cos(2.0 * theta);
    let im = a1 * libm::sin(theta) + a2 * libm::sin(2.0 * theta);
    let gain = libm::sqrt(re * re + im * im);
    let mut y = vec![0.0; x.len()];
    for n in 0..x.len() {
        let y1 = if n >= 1 { y[n - 1] } else { 0.0 };
        let y2 = if n >= 2 { y[n - 2] } else { 0.0 };
        y[n] = gain * x[n] + a1 * y1 + a2 * y2;
    }
    y
}

/// Sum of Hann-shaped "syllables" at roughly 4 Hz with random widths and
/// levels, leaving gaps of near-silence between them.
fn syllable_envelope(rng: &mut impl Rng, len: usize, fs: f64) -> Vec<f64> {
    let mut env = vec![0.0; len];
    let duration = len as f64 / fs;
    let mut t = rng.gen::<f64>() * 0.15 - 0.1;
    while t < duration {
        let width = 0.08 + rng.gen::<f64>() * 0.14;
        let level = 0.35 + rng.gen::<f64>() * 0.65;
        let start = libm::floor(t * fs).max(0.0) as usize;
        let stop = (libm::ceil((t + width) * fs) as usize).min(len);
        for (n, e) in env.iter_mut().enumerate().take(stop).skip(start) {
            let x = (n as f64 / fs - t) / width;
            if (0.0..=1.0).contains(&x) {
                *e += level * 0.5 * (1.0 - libm::cos(2.0 * PI * x));
            }
        }
        t += width + rng.gen::<f64>() * 0.12;
    }
    env
}
