use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdnet::config::MixKind;
use sdnet::dataset::{self, Split};
use sdnet::eval::ExampleRecord;
use sdnet::manifest;
use sdnet::separate::Sidecar;
use sdnet::train::{StepRecord, STEP_LOG};
use sdnet::RunConfig;

/// A network small enough to train for a few hundred steps in seconds.
fn tiny(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::desk();
    let m = &mut cfg.model;
    m.encoder_channels = 8;
    m.context_hidden = 8;
    m.decoder_hidden = 8;
    m.attention_dim = 8;
    m.embedding_dim = 8;
    m.tcn_hidden = 16;
    m.tcn_blocks = 1;
    m.tcn_layers_per_block = 3;
    cfg.data.data_dir = dir.join("data");
    cfg.data.test_speakers = vec![8, 9, 10];
    cfg.data.n_train = 4;
    cfg.data.n_dev = 2;
    cfg.data.n_test = 3;
    cfg.data.duration_s = 0.25;
    cfg.data.max_order = 2;
    cfg.train.run_dir = dir.join("run");
    cfg.train.steps = 6;
    cfg.train.checkpoint_every = 3;
    cfg.train.eval_every = 0;
    cfg.eval.out_dir = dir.join("eval");
    cfg.eval.sdr_filter_len = 64;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn sdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdnet")).args(args).env("RUST_LOG", "warn").env_remove("SDNET_DATA_DIR").output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic_and_keeps_test_speakers_apart() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.data.mix = MixKind::TwoAndThree;
    cfg.data.n_test = 4;
    let config = write_config(dir.path(), "c.toml", &cfg);
    ok(sdnet(&["simulate", "--config", p(&config)]));
    let first: Vec<String> = Split::ALL.iter().map(|s| std::fs::read_to_string(dataset::manifest_path(&cfg.data.data_dir, *s)).unwrap()).collect();

    // A second run into a different root through the environment override.
    let other = dir.path().join("again");
    ok(Command::new(env!("CARGO_BIN_EXE_sdnet"))
        .args(["simulate", "--config", p(&config)])
        .env("SDNET_DATA_DIR", &other)
        .output()
        .unwrap());
    for (s, text) in Split::ALL.iter().zip(&first) {
        assert_eq!(&std::fs::read_to_string(dataset::manifest_path(&other, *s)).unwrap(), text);
    }
    let mix = "train/train-00001_mix.wav";
    assert_eq!(std::fs::read(cfg.data.data_dir.join(mix)).unwrap(), std::fs::read(other.join(mix)).unwrap());

    let read = |s| manifest::read(&dataset::manifest_path(&cfg.data.data_dir, s)).unwrap();
    let train: BTreeSet<usize> = read(Split::Train).iter().flat_map(|e| e.speaker_labels.clone()).collect();
    let test = read(Split::Test);
    let test_speakers: BTreeSet<usize> = test.iter().flat_map(|e| e.speaker_labels.clone()).collect();
    assert!(train.is_disjoint(&test_speakers));
    let counts: BTreeSet<usize> = test.iter().map(|e| e.num_sources()).collect();
    assert_eq!(counts, BTreeSet::from([2, 3]));

    // A different seed gives different mixtures.
    ok(sdnet(&["simulate", "--config", p(&config), "--seed", "5"]));
    assert_ne!(std::fs::read_to_string(dataset::manifest_path(&cfg.data.data_dir, Split::Train)).unwrap(), first[0]);
}

#[test]
fn overlapping_speakers_fail_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.data.test_speakers = vec![7, 8, 9];
    let config = dir.path().join("c.toml");
    std::fs::write(&config, cfg.to_toml()).unwrap();
    let out = sdnet(&["simulate", "--config", p(&config)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("speaker 7"));
    assert!(!cfg.data.data_dir.exists());
}

fn steps(run_dir: &Path) -> Vec<StepRecord> {
    std::fs::read_to_string(run_dir.join(STEP_LOG)).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn train_is_reproducible_and_resume_matches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let config = write_config(dir.path(), "c.toml", &cfg);
    ok(sdnet(&["simulate", "--config", p(&config)]));
    ok(sdnet(&["train", "--config", p(&config)]));
    let full = std::fs::read(cfg.train.run_dir.join(STEP_LOG)).unwrap();
    let full_ck = std::fs::read(cfg.train.run_dir.join("checkpoint.bin")).unwrap();
    assert_eq!(steps(&cfg.train.run_dir).len(), 6);
    assert!(cfg.train.run_dir.join("loss.svg").exists());

    // Same seed, fresh run directory: identical bytes.
    let mut again = cfg.clone();
    again.train.run_dir = dir.path().join("run2");
    let config2 = write_config(dir.path(), "c2.toml", &again);
    ok(sdnet(&["train", "--config", p(&config2)]));
    assert_eq!(std::fs::read(again.train.run_dir.join(STEP_LOG)).unwrap(), full);

    // Stop at step 3, then resume to 6 from the saved checkpoint.
    let mut half = cfg.clone();
    half.train.run_dir = dir.path().join("run3");
    half.train.steps = 3;
    let config3 = write_config(dir.path(), "c3.toml", &half);
    ok(sdnet(&["train", "--config", p(&config3)]));
    half.train.steps = 6;
    let config3 = write_config(dir.path(), "c3.toml", &half);
    let ck = half.train.run_dir.join("checkpoint.bin");
    ok(sdnet(&["train", "--config", p(&config3), "--checkpoint", p(&ck)]));
    assert_eq!(std::fs::read(half.train.run_dir.join(STEP_LOG)).unwrap(), full);
    assert_eq!(std::fs::read(&ck).unwrap(), full_ck);
}

#[test]
fn checkpoint_for_another_architecture_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let config = write_config(dir.path(), "c.toml", &cfg);
    ok(sdnet(&["simulate", "--config", p(&config)]));
    ok(sdnet(&["train", "--config", p(&config)]));
    let mut other = cfg.clone();
    other.model.tcn_hidden = 12;
    let config2 = write_config(dir.path(), "c2.toml", &other);
    let ck = cfg.train.run_dir.join("checkpoint.bin");
    let out = sdnet(&["eval", "--config", p(&config2), "--checkpoint", p(&ck)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint is for model"));
}

#[test]
fn eval_writes_one_record_per_test_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let config = write_config(dir.path(), "c.toml", &cfg);
    ok(sdnet(&["simulate", "--config", p(&config)]));
    ok(sdnet(&["train", "--config", p(&config)]));
    let out = ok(sdnet(&["eval", "--config", p(&config), "--beam", "2"]));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = summary["count_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let text = std::fs::read_to_string(cfg.eval.out_dir.join("metrics.jsonl")).unwrap();
    let records: Vec<ExampleRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let entries = manifest::read(&dataset::manifest_path(&cfg.data.data_dir, Split::Test)).unwrap();
    assert_eq!(records.len(), entries.len());
    for (r, e) in records.iter().zip(&entries) {
        assert_eq!(r.example_id, e.id);
        assert_eq!(r.n_true, e.num_sources());
        assert!(r.direction_tokens.iter().all(|d| *d <= 36));
        // Held-out voices have no token, so there is no oracle mask.
        assert!(r.oracle_sisnri.is_none());
    }
    let csv = std::fs::read_to_string(cfg.eval.out_dir.join("summary.csv")).unwrap();
    assert!(csv.starts_with("subset,n_examples,count_accuracy,sisnri,sdri"));
    assert!(csv.lines().nth(1).unwrap().starts_with("all,3,"));
    for f in ["sisnri.svg", "counts.svg"] {
        assert!(cfg.eval.out_dir.join(f).exists());
    }
}

#[test]
fn missing_inputs_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let config = write_config(dir.path(), "c.toml", &cfg);
    let out = sdnet(&["train", "--config", p(&config)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.jsonl"));
    let ck = dir.path().join("nope.bin");
    let out = sdnet(&["eval", "--config", p(&config), "--checkpoint", p(&ck)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.bin"));
    let out = sdnet(&["simulate", "--config", p(&dir.path().join("absent.toml"))]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn separate_writes_sources_and_rejects_mono() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let config = write_config(dir.path(), "c.toml", &cfg);
    ok(sdnet(&["simulate", "--config", p(&config)]));
    ok(sdnet(&["train", "--config", p(&config)]));
    let input = cfg.data.data_dir.join("test/test-00000_mix.wav");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(sdnet(&["separate", "--config", p(&config), "--input", p(&input), "--out", p(&a)]));
    ok(sdnet(&["separate", "--config", p(&config), "--input", p(&input), "--out", p(&b)]));
    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(a.join("sources.json")).unwrap()).unwrap();
    assert!(sidecar.beam_score.is_finite() && sidecar.beam_score <= 0.0);
    for s in &sidecar.sources {
        assert!(s.direction_token <= 36);
        assert_eq!(std::fs::read(a.join(&s.file)).unwrap(), std::fs::read(b.join(&s.file)).unwrap());
        let w = sdnet::wav::read(&a.join(&s.file)).unwrap();
        assert_eq!(w.num_channels(), 1);
    }

    let mono = dir.path().join("mono.wav");
    let target = cfg.data.data_dir.join("test/test-00000_s0.wav");
    std::fs::copy(target, &mono).unwrap();
    let out = sdnet(&["separate", "--config", p(&config), "--input", p(&mono), "--out", p(&a)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stereo"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(&path).unwrap();
            n += 1;
        }
    }
    assert!(n >= 3);
    let default = RunConfig::load(&root.join("default.toml")).unwrap();
    assert_eq!(default.model, sdnet_core::ModelConfig::default());
    let desk = RunConfig::load(&root.join("desk.toml")).unwrap();
    assert_eq!(desk.model, RunConfig::desk().model);
}
