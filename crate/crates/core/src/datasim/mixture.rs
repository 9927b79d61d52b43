//! Stereo mixtures of synthetic speakers placed in a simulated room.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::room::{azimuth_to_class, compute_azimuth, dist, generate_rir, RoomSpec, Vec3};
use super::speaker::SpeakerSynth;
use crate::audio::{energy, peak, Waveform};
use crate::error::{domain, Result};
use crate::seed;

/// Largest level drop of a non-first source relative to the first, in dB.
pub const MAX_LEVEL_DROP_DB: f64 = 5.0;

/// Knobs for mixture simulation that are not part of the room itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub duration_s: f64,
    pub n_speakers: usize,
    pub max_order: usize,
    /// Minimum distance of a source from any wall, metres.
    pub wall_margin: f64,
    /// Minimum distance of a source from the array centre, metres.
    pub min_source_distance: f64,
    /// Minimum angular separation between sources, degrees.
    pub min_separation_deg: f64,
    /// Peak level of the mixture after scaling.
    pub mixture_peak: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            duration_s: 4.0,
            n_speakers: 24,
            max_order: super::room::DEFAULT_MAX_ORDER,
            wall_margin: 0.5,
            min_source_distance: 0.75,
            min_separation_deg: 10.0,
            mixture_peak: 0.9,
        }
    }
}

/// Where one source was placed and what it is labelled as.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePlacement {
    pub position: Vec3,
    pub speaker_id: usize,
    pub azimuth_deg: f64,
    pub azimuth_class: usize,
}

/// A simulated stereo mixture with energy-sorted references.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    /// Two-channel mixture; channel 0 is the reference microphone.
    pub mixture: Waveform,
    /// Per-source images at the reference microphone, by non-increasing energy.
    pub targets: Vec<Waveform>,
    pub speaker_labels: Vec<usize>,
    pub direction_labels: Vec<usize>,
    /// Placements in the same order as the targets.
    pub sources: Vec<SourcePlacement>,
    pub room: RoomSpec,
    pub seed: u64,
}

impl MixtureExample {
    pub fn num_sources(&self) -> usize {
        self.targets.len()
    }
}

fn place_sources(
    room: &RoomSpec,
    speakers: &[usize],
    cfg: &MixtureConfig,
    rng: &mut impl Rng,
) -> Result<Vec<SourcePlacement>> {
    let centre = room.mic_center();
    let lo: Vec<f64> = room.dims.iter().map(|_| cfg.wall_margin).collect();
    let hi: Vec<f64> = room.dims.iter().map(|d| d - cfg.wall_margin).collect();
    if lo.iter().zip(&hi).any(|(l, h)| l >= h) {
        return Err(domain!("room {:?} too small for wall margin {}", room.dims, cfg.wall_margin));
    }
    let mut placed: Vec<SourcePlacement> = Vec::with_capacity(speakers.len());
    let mut attempts = 0;
    while placed.len() < speakers.len() {
        attempts += 1;
        if attempts > 10_000 {
            return Err(domain!("could not place {} separated sources", speakers.len()));
        }
        let pos: Vec3 = [
            lo[0] + rng.gen::<f64>() * (hi[0] - lo[0]),
            lo[1] + rng.gen::<f64>() * (hi[1] - lo[1]),
            lo[2] + rng.gen::<f64>() * (hi[2] - lo[2]),
        ];
        if dist(&pos, &centre) < cfg.min_source_distance {
            continue;
        }
        let az = compute_azimuth(&pos, room)?;
        if placed.iter().any(|p| (p.azimuth_deg - az).abs() < cfg.min_separation_deg) {
            continue;
        }
        let class = azimuth_to_class(az)?;
        if placed.iter().any(|p| p.azimuth_class == class) {
            continue;
        }
        placed.push(SourcePlacement {
            position: pos,
            speaker_id: speakers[placed.len()],
            azimuth_deg: az,
            azimuth_class: class,
        });
    }
    Ok(placed)
}

/// Direct linear convolution truncated to the length of `x`.
pub fn convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (k, &hk) in h.iter().enumerate() {
        if hk == 0.0 || k >= x.len() {
            continue;
        }
        for (yn, xn) in y[k..].iter_mut().zip(x) {
            *yn += hk * xn;
        }
    }
    y
}

/// Simulates one mixture of 2 or 3 distinct speakers.
///
/// Dry utterances are normalised to unit RMS; every source after the first is
/// attenuated by a level drawn uniformly from `[0, 5]` dB. Each source is
/// convolved with its two microphone responses and the images are summed.
/// Targets are the reference-channel images, and targets, labels and
/// placements are reordered together by descending target energy.
pub fn simulate_mixture(speakers: &[usize], room: &RoomSpec, cfg: &MixtureConfig, seed: u64) -> Result<MixtureExample> {
    if !(2..=3).contains(&speakers.len()) {
        return Err(domain!("mixtures hold 2 or 3 sources, got {}", speakers.len()));
    }
    for (i, s) in speakers.iter().enumerate() {
        if speakers[..i].contains(s) {
            return Err(domain!("duplicate speaker {s} in mixture"));
        }
    }
    room.validate()?;
    let mut rng = seed::rng(seed, 0x0000_4D49_5854);
    let placements = place_sources(room, speakers, cfg, &mut rng)?;
    let synth = SpeakerSynth::new(cfg.n_speakers, room.sample_rate);

    let mut images: Vec<[Vec<f64>; 2]> = Vec::with_capacity(speakers.len());
    for (i, p) in placements.iter().enumerate() {
        let utter_seed = seed::derive(seed, 0x5000 + i as u64);
        let dry = synth.signal(p.speaker_id, cfg.duration_s, utter_seed)?.into_channels().remove(0);
        let rms = libm::sqrt(energy(&dry) / dry.len() as f64);
        let drop_db = if i == 0 { 0.0 } else { rng.gen::<f64>() * MAX_LEVEL_DROP_DB };
        let gain = libm::pow(10.0, -drop_db / 20.0) / rms.max(1e-12);
        let dry: Vec<f64> = dry.iter().map(|v| v * gain).collect();
        let mut pair = [Vec::new(), Vec::new()];
        for (m, mic) in room.mic_positions.iter().enumerate() {
            let rir = generate_rir(room, &p.position, mic, cfg.max_order)?;
            pair[m] = convolve_truncated(&dry, &rir);
        }
        images.push(pair);
    }

    let len = images[0][0].len();
    let mut mix = [vec![0.0; len], vec![0.0; len]];
    for img in &images {
        for m in 0..2 {
            for (a, b) in mix[m].iter_mut().zip(&img[m]) {
                *a += b;
            }
        }
    }
    let pk = peak(&mix[0]).max(peak(&mix[1]));
    let scale = if pk > 0.0 { cfg.mixture_peak / pk } else { 1.0 };
    for ch in mix.iter_mut() {
        ch.iter_mut().for_each(|v| *v *= scale);
    }

    let mut order: Vec<usize> = (0..images.len()).collect();
    let energies: Vec<f64> = images.iter().map(|img| energy(&img[0])).collect();
    order.sort_by(|&a, &b| energies[b].total_cmp(&energies[a]));

    let targets = order
        .iter()
        .map(|&i| Waveform::mono(room.sample_rate, images[i][0].iter().map(|v| v * scale).collect()))
        .collect();
    let sources: Vec<SourcePlacement> = order.iter().map(|&i| placements[i].clone()).collect();
    let [left, right] = mix;
    Ok(MixtureExample {
        mixture: Waveform::stereo(room.sample_rate, left, right)?,
        targets,
        speaker_labels: sources.iter().map(|s| s.speaker_id).collect(),
        direction_labels: sources.iter().map(|s| s.azimuth_class).collect(),
        sources,
        room: room.clone(),
        seed,
    })
}
