//! Binary training checkpoints.

use std::path::Path;

use anyhow::{bail, Context};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use sdnet_core::optim::Adam;
use sdnet_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::config::model_hash;

const FORMAT: u32 = 1;

/// Epoch-style batch sampler: a shuffled pass over the training set, redrawn
/// whenever it runs out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng, order: Vec::new(), cursor: 0 }
    }

    /// Indices of the next batch over a set of `n` examples.
    pub fn next_batch(&mut self, n: usize, batch: usize) -> Vec<usize> {
        assert!(n > 0, "sampling from an empty set");
        (0..batch)
            .map(|_| {
                if self.cursor >= self.order.len() || self.order.len() != n {
                    self.order = (0..n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Learning-rate plateau tracking on the dev metric.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub best_dev: Option<f64>,
    pub bad_evals: u32,
    pub halvings: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config_hash: String,
    pub model: ModelConfig,
    pub step: u64,
    pub params: Vec<f64>,
    pub optimizer: Adam,
    pub sampler: Sampler,
    pub schedule: Schedule,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, step: u64, params: Vec<f64>, optimizer: Adam, sampler: Sampler, schedule: Schedule) -> Self {
        Self { format: FORMAT, config_hash: model_hash(&model), model, step, params, optimizer, sampler, schedule }
    }

    /// Writes to a temporary sibling first so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let tmp = path.with_extension("tmp");
        let bytes = bincode::serialize(self)?;
        std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        let ck: Self = bincode::deserialize(&bytes).with_context(|| format!("decoding checkpoint {}", path.display()))?;
        if ck.format != FORMAT {
            bail!("{}: unsupported checkpoint format {}", path.display(), ck.format);
        }
        if ck.config_hash != model_hash(&ck.model) {
            bail!("{}: stored hash does not match the stored model config", path.display());
        }
        Ok(ck)
    }

    /// Fails unless the checkpoint was produced for `expected`.
    pub fn ensure_model(&self, expected: &ModelConfig) -> anyhow::Result<()> {
        let want = model_hash(expected);
        if self.config_hash != want {
            bail!("checkpoint is for model {} but the config describes {want}", self.config_hash);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sampler_covers_every_example_per_pass() {
        let mut s = Sampler::new(ChaCha8Rng::seed_from_u64(1));
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(10, 2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn save_load_round_trip_and_hash_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut sampler = Sampler::new(ChaCha8Rng::seed_from_u64(2));
        sampler.next_batch(7, 3);
        let ck = Checkpoint::new(ModelConfig::default(), 12, vec![0.5, -1.0], Adam::new(2, 1e-3), sampler, Schedule::default());
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut other = ModelConfig::default();
        other.lambda = 0.0;
        assert!(back.ensure_model(&other).is_err());
        assert!(back.ensure_model(&ModelConfig::default()).is_ok());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = Checkpoint::load(Path::new("/nonexistent/c.bin")).unwrap_err();
        assert!(format!("{err:#}").contains("/nonexistent/c.bin"));
    }
}
