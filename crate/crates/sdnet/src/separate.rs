//! Separating a recorded stereo mixture into per-source WAV files.

use std::path::{Path, PathBuf};

use anyhow::Context;
use sdnet_core::audio::Waveform;
use sdnet_core::{Model, SeparationMode};
use serde::{Deserialize, Serialize};

use crate::{wav, UsageError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub file: PathBuf,
    pub speaker_token: usize,
    pub direction_token: usize,
    /// Centre of the direction class, degrees from the microphone axis.
    pub azimuth_deg: f64,
}

/// Contents of the JSON sidecar written next to the separated sources.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub input: PathBuf,
    pub beam_width: usize,
    pub beam_score: f64,
    pub truncated: bool,
    pub sources: Vec<SourceInfo>,
}

pub const SIDECAR_FILE: &str = "sources.json";

pub fn separate_file(model: &Model, params: &[f64], input: &Path, out_dir: &Path, beam_width: usize) -> anyhow::Result<Sidecar> {
    let mix = wav::read(input)?;
    if mix.num_channels() != 2 {
        return Err(UsageError::Invalid(format!(
            "{} has {} channel(s); separation needs a stereo recording from the two-microphone array",
            input.display(),
            mix.num_channels()
        ))
        .into());
    }
    let sep = model.separate(params, [mix.channel(0), mix.channel(1)], SeparationMode::Beam(beam_width))?;
    if sep.is_empty() {
        log::warn!("no sources inferred for {}", input.display());
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut sources = Vec::new();
    for (k, s) in sep.sources.iter().enumerate() {
        let file = PathBuf::from(format!("source_{k}.wav"));
        wav::write(&out_dir.join(&file), &Waveform::mono(mix.sample_rate, s.waveform.clone()))?;
        sources.push(SourceInfo {
            file,
            speaker_token: s.speaker_token,
            direction_token: s.direction_token,
            azimuth_deg: 5.0 * s.direction_token as f64,
        });
    }
    let sidecar = Sidecar {
        input: input.to_path_buf(),
        beam_width,
        beam_score: sep.inference.log_score,
        truncated: sep.inference.truncated,
        sources,
    };
    let path = out_dir.join(SIDECAR_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(sidecar)
}
