//! JSON-lines manifests describing simulated mixtures.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

/// One mixture on disk. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub mixture_path: PathBuf,
    /// Reverberant images at the reference microphone, loudest first.
    pub target_paths: Vec<PathBuf>,
    pub speaker_labels: Vec<usize>,
    pub direction_labels: Vec<usize>,
    pub azimuths_deg: Vec<f64>,
    pub seed: u64,
    pub rt60: f64,
    pub room_dims: [f64; 3],
    pub positions: Vec<[f64; 3]>,
}

impl ManifestEntry {
    pub fn num_sources(&self) -> usize {
        self.target_paths.len()
    }
}

pub fn write(path: &Path, entries: &[ManifestEntry]) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads every entry; blank lines are skipped and parse errors name the
/// offending line.
pub fn read(path: &Path) -> anyhow::Result<Vec<ManifestEntry>> {
    let file = File::open(path).with_context(|| format!("opening manifest {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            mixture_path: "a/mix.wav".into(),
            target_paths: vec!["a/s0.wav".into(), "a/s1.wav".into()],
            speaker_labels: vec![3, 1],
            direction_labels: vec![10, 30],
            azimuths_deg: vec![50.0, 150.0],
            seed: 9,
            rt60: 0.0,
            room_dims: [5.0, 4.5, 3.0],
            positions: vec![[1.0, 2.0, 1.5], [3.0, 2.0, 1.5]],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let entries = vec![entry("a"), entry("b")];
        write(&path, &entries).unwrap();
        assert_eq!(read(&path).unwrap(), entries);
    }

    #[test]
    fn empty_file_gives_no_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read(&path).unwrap().is_empty());
    }

    #[test]
    fn missing_field_reports_line_and_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut v = serde_json::to_value(entry("a")).unwrap();
        v.as_object_mut().unwrap().remove("seed");
        std::fs::write(&path, format!("{}\n\n{}\n", serde_json::to_string(&entry("b")).unwrap(), v)).unwrap();
        let msg = format!("{:#}", read(&path).unwrap_err());
        assert!(msg.contains(":3") && msg.contains("seed"), "{msg}");
    }
}
