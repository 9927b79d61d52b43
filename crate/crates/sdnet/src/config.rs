//! Run configuration loaded from TOML.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use sdnet_core::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable that overrides `data.data_dir`.
pub const DATA_DIR_ENV: &str = "SDNET_DATA_DIR";

/// Source counts present in a simulated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    Two,
    Three,
    TwoAndThree,
}

impl MixKind {
    /// Source count of the `index`-th example.
    pub fn sources_for(self, index: usize) -> usize {
        match self {
            Self::Two => 2,
            Self::Three => 3,
            Self::TwoAndThree => 2 + index % 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub data_dir: PathBuf,
    /// Synthetic speaker ids used for training and dev mixtures.
    pub train_speakers: Vec<usize>,
    /// Held-out speaker ids used only in the test split.
    pub test_speakers: Vec<usize>,
    pub mix: MixKind,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub duration_s: f64,
    pub reverberant: bool,
    pub rt60_range: [f64; 2],
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub max_order: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            train_speakers: (0..24).collect(),
            test_speakers: (24..30).collect(),
            mix: MixKind::Two,
            n_train: 20000,
            n_dev: 5000,
            n_test: 3000,
            duration_s: 4.0,
            reverberant: false,
            rt60_range: [0.04, 0.2],
            room_min: [4.0, 4.0, 2.5],
            room_max: [7.0, 6.0, 3.5],
            max_order: sdnet_core::datasim::DEFAULT_MAX_ORDER,
        }
    }
}

impl DataConfig {
    /// Number of distinct synthetic voices the generator must support.
    pub fn speaker_universe(&self) -> usize {
        self.train_speakers.iter().chain(&self.test_speakers).max().map_or(0, |m| m + 1)
    }

    /// Dataset root after applying the environment override.
    pub fn resolved_dir(&self) -> PathBuf {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.data_dir.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub run_dir: PathBuf,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub checkpoint_every: u64,
    /// Dev evaluation interval in steps; 0 disables it.
    pub eval_every: u64,
    /// Dev examples scored per evaluation (0 means all).
    pub eval_examples: usize,
    /// Evaluations without dev improvement before the learning rate halves.
    pub patience: u32,
    /// Halvings after which training stops early; 0 never stops.
    pub max_halvings: u32,
    /// Stop once a dev evaluation reaches both targets.
    pub target_sisnri: Option<f64>,
    pub target_count_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            steps: 200_000,
            batch_size: 4,
            lr: 1e-3,
            clip_norm: sdnet_core::optim::DEFAULT_CLIP_NORM,
            checkpoint_every: 1000,
            eval_every: 2000,
            eval_examples: 200,
            patience: 3,
            max_halvings: 3,
            target_sisnri: None,
            target_count_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub sdr_filter_len: usize,
    /// Also score masks built from ground-truth tokens.
    pub oracle: bool,
    pub out_dir: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_width: 3,
            sdr_filter_len: sdnet_core::objectives::SDR_FILTER_LEN,
            oracle: true,
            out_dir: PathBuf::from("runs/default/eval"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reduced sizes that train on one CPU core in minutes.
    pub fn desk() -> Self {
        let w = 32;
        Self {
            seed: 0,
            model: ModelConfig {
                encoder_channels: w,
                context_hidden: w,
                context_layers: 1,
                decoder_hidden: w,
                decoder_layers: 1,
                attention_dim: w,
                embedding_dim: w,
                n_speakers: 8,
                tcn_hidden: 2 * w,
                tcn_blocks: 2,
                tcn_layers_per_block: 4,
                ..ModelConfig::default()
            },
            data: DataConfig {
                train_speakers: (0..8).collect(),
                test_speakers: (8..10).collect(),
                n_train: 50,
                n_dev: 50,
                n_test: 50,
                duration_s: 0.5,
                ..DataConfig::default()
            },
            train: TrainConfig {
                steps: 10_000,
                lr: 2e-3,
                checkpoint_every: 500,
                eval_every: 500,
                eval_examples: 0,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml_str(s: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        let d = &self.data;
        let train: BTreeSet<_> = d.train_speakers.iter().collect();
        let test: BTreeSet<_> = d.test_speakers.iter().collect();
        if train.len() != d.train_speakers.len() || test.len() != d.test_speakers.len() {
            bail!("speaker lists contain duplicates");
        }
        if let Some(s) = train.intersection(&test).next() {
            bail!("speaker {s} appears in both the training and the test split");
        }
        let needed = match d.mix {
            MixKind::Two => 2,
            _ => 3,
        };
        if d.train_speakers.len() < needed || (d.n_test > 0 && d.test_speakers.len() < needed) {
            bail!("each split needs at least {needed} speakers");
        }
        if let Some(s) = d.train_speakers.iter().find(|s| **s >= self.model.n_speakers) {
            bail!("training speaker {s} is outside the model's {}-speaker vocabulary", self.model.n_speakers);
        }
        if !(d.duration_s > 0.0) {
            bail!("duration_s must be positive");
        }
        let [lo, hi] = d.rt60_range;
        if d.reverberant && !(0.0 < lo && lo <= hi) {
            bail!("rt60_range must satisfy 0 < min <= max");
        }
        if d.room_min.iter().zip(&d.room_max).any(|(a, b)| !(*a > 0.0 && a <= b)) {
            bail!("room_min must be positive and not exceed room_max");
        }
        if self.model.max_steps < 4 && d.mix != MixKind::Two {
            bail!("max_steps must exceed the largest source count");
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.lr > 0.0) {
            bail!("batch_size and lr must be positive");
        }
        if self.eval.beam_width == 0 {
            bail!("beam_width must be at least 1");
        }
        Ok(())
    }
}

/// SHA-256 over the canonical JSON of the architecture; guards checkpoints
/// against being loaded into a different network.
pub fn model_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serialises");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
