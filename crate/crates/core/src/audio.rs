use alloc::vec::Vec;

use crate::error::{domain, Result};

/// Sample rate used throughout the system.
pub const SAMPLE_RATE: u32 = 8000;

/// Fixed-rate sampled audio with one or more channels of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    channels: Vec<Vec<f64>>,
}

impl Waveform {
    pub fn mono(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self { sample_rate, channels: alloc::vec![samples] }
    }

    pub fn stereo(sample_rate: u32, left: Vec<f64>, right: Vec<f64>) -> Result<Self> {
        Self::from_channels(sample_rate, alloc::vec![left, right])
    }

    pub fn from_channels(sample_rate: u32, channels: Vec<Vec<f64>>) -> Result<Self> {
        if channels.is_empty() {
            return Err(domain!("waveform needs at least one channel"));
        }
        if channels.iter().any(|c| c.len() != channels[0].len()) {
            return Err(domain!("channels have different lengths"));
        }
        Ok(Self { sample_rate, channels })
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.channels[i]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }
}

/// Sum of squares.
pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| f64::max(m, v.abs()))
}
