//! Reproducible desk-scale stereo data: synthetic speakers, image-method room
//! responses and labelled mixtures.
//!
//! Every function here is a pure function of its arguments and seed.

mod mixture;
mod room;
mod speaker;

pub use mixture::{convolve_truncated, simulate_mixture, MixtureConfig, MixtureExample, SourcePlacement, MAX_LEVEL_DROP_DB};
pub use room::{
    azimuth_to_class, compute_azimuth, dist, generate_rir, RoomSpec, Vec3, DEFAULT_MAX_ORDER, MIC_SPACING,
    N_DIRECTIONS, SINC_TAPS, SOUND_SPEED,
};
pub use speaker::{SpeakerSynth, PEAK_LEVEL};
