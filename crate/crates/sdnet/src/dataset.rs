//! Simulated train/dev/test splits on disk.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::seq::SliceRandom;
use rand::Rng;
use sdnet_core::audio::SAMPLE_RATE;
use sdnet_core::datasim::{simulate_mixture, MixtureConfig, MixtureExample, RoomSpec};
use sdnet_core::{seed, TrainExample};

use crate::config::{DataConfig, RunConfig};
use crate::manifest::{self, ManifestEntry};
use crate::wav;

/// Placement attempts per example before giving up.
const MAX_ATTEMPTS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7452,
            Split::Dev => 0x4465,
            Split::Test => 0x5465,
        }
    }

    pub fn size(self, d: &DataConfig) -> usize {
        match self {
            Split::Train => d.n_train,
            Split::Dev => d.n_dev,
            Split::Test => d.n_test,
        }
    }

    /// Dev mixtures reuse the training voices; test voices are held out.
    pub fn speakers(self, d: &DataConfig) -> &[usize] {
        match self {
            Split::Train | Split::Dev => &d.train_speakers,
            Split::Test => &d.test_speakers,
        }
    }
}

pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.jsonl", split.name()))
}

/// Draws the `index`-th mixture of `split`. Deterministic in the run seed.
pub fn simulate_example(cfg: &RunConfig, split: Split, index: usize) -> anyhow::Result<MixtureExample> {
    let d = &cfg.data;
    let n_src = d.mix.sources_for(index);
    if split.speakers(d).len() < n_src {
        bail!("{} split has {} speakers, a {n_src}-source mixture needs more", split.name(), split.speakers(d).len());
    }
    let mut rng = seed::rng(seed::derive(cfg.seed, split.tag()), index as u64);
    let mcfg = MixtureConfig {
        duration_s: d.duration_s,
        n_speakers: d.speaker_universe(),
        max_order: d.max_order,
        ..MixtureConfig::default()
    };
    let mut last_err = None;
    for _ in 0..MAX_ATTEMPTS {
        let speakers: Vec<usize> = split.speakers(d).choose_multiple(&mut rng, n_src).copied().collect();
        let dims = [0, 1, 2].map(|k| uniform(&mut rng, d.room_min[k], d.room_max[k]));
        let rt60 = if d.reverberant { uniform(&mut rng, d.rt60_range[0], d.rt60_range[1]) } else { 0.0 };
        let room = RoomSpec::centered(dims, rt60, SAMPLE_RATE)?;
        match simulate_mixture(&speakers, &room, &mcfg, rng.gen()) {
            Ok(ex) => return Ok(ex),
            Err(e) => last_err = Some(e),
        }
    }
    bail!("{} example {index}: no valid placement after {MAX_ATTEMPTS} attempts ({:?})", split.name(), last_err)
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Writes WAVs and a manifest for every split; returns the manifest paths.
pub fn simulate(cfg: &RunConfig, root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut written = Vec::new();
    for split in Split::ALL {
        let n = split.size(&cfg.data);
        let dir = root.join(split.name());
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let ex = simulate_example(cfg, split, i)?;
            let id = format!("{}-{i:05}", split.name());
            let rel = |name: String| PathBuf::from(split.name()).join(name);
            let mixture_path = rel(format!("{id}_mix.wav"));
            wav::write(&root.join(&mixture_path), &ex.mixture)?;
            let mut target_paths = Vec::new();
            for (k, t) in ex.targets.iter().enumerate() {
                let p = rel(format!("{id}_s{k}.wav"));
                wav::write(&root.join(&p), t)?;
                target_paths.push(p);
            }
            entries.push(ManifestEntry {
                id,
                mixture_path,
                target_paths,
                speaker_labels: ex.speaker_labels.clone(),
                direction_labels: ex.direction_labels.clone(),
                azimuths_deg: ex.sources.iter().map(|s| s.azimuth_deg).collect(),
                seed: ex.seed,
                rt60: ex.room.rt60,
                room_dims: ex.room.dims,
                positions: ex.sources.iter().map(|s| s.position).collect(),
            });
        }
        let path = manifest_path(root, split);
        manifest::write(&path, &entries)?;
        log::info!("{}: {n} mixtures -> {}", split.name(), path.display());
        written.push(path);
    }
    Ok(written)
}

/// A manifest entry with its audio loaded.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub entry: ManifestEntry,
    pub example: TrainExample,
}

pub fn load_entry(root: &Path, entry: &ManifestEntry) -> anyhow::Result<TrainExample> {
    let mix = wav::read(&root.join(&entry.mixture_path))?;
    if mix.num_channels() != 2 {
        bail!("{}: mixture must be stereo", entry.mixture_path.display());
    }
    let targets = entry
        .target_paths
        .iter()
        .map(|p| Ok(wav::read(&root.join(p))?.into_channels().remove(0)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let [l, r]: [Vec<f64>; 2] = mix.into_channels().try_into().expect("two channels");
    Ok(TrainExample {
        mixture: [l, r],
        targets,
        speakers: entry.speaker_labels.clone(),
        directions: entry.direction_labels.clone(),
    })
}

pub fn load_split(root: &Path, split: Split) -> anyhow::Result<Vec<Loaded>> {
    let entries = manifest::read(&manifest_path(root, split))?;
    entries
        .into_iter()
        .map(|entry| Ok(Loaded { example: load_entry(root, &entry)?, entry }))
        .collect()
}
