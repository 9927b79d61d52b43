//! 16-bit PCM WAV IO at the model sample rate.

use std::path::Path;

use anyhow::{bail, Context};
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use sdnet_core::audio::{Waveform, SAMPLE_RATE};

const SCALE: f64 = 32768.0;

pub fn read(path: &Path) -> anyhow::Result<Waveform> {
    let mut reader = WavReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        bail!("{}: expected 16-bit PCM, found {} bits {:?}", path.display(), spec.bits_per_sample, spec.sample_format);
    }
    if spec.sample_rate != SAMPLE_RATE {
        bail!("{}: expected {} Hz, found {} Hz", path.display(), SAMPLE_RATE, spec.sample_rate);
    }
    let n = spec.channels as usize;
    let mut channels = vec![Vec::with_capacity(reader.len() as usize / n.max(1)); n];
    for (i, s) in reader.samples::<i16>().enumerate() {
        let s = s.with_context(|| format!("reading {}", path.display()))?;
        channels[i % n].push(s as f64 / SCALE);
    }
    Ok(Waveform::from_channels(spec.sample_rate, channels)?)
}

pub fn write(path: &Path, wave: &Waveform) -> anyhow::Result<()> {
    let spec = WavSpec {
        channels: wave.num_channels() as u16,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).with_context(|| format!("creating {}", path.display()))?;
    for i in 0..wave.len() {
        for ch in wave.channels() {
            w.write_sample(quantize(ch[i]))?;
        }
    }
    w.finalize().with_context(|| format!("finalising {}", path.display()))?;
    Ok(())
}

fn quantize(x: f64) -> i16 {
    (x * SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}
