//! Separation quality and source-count evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use sdnet_core::objectives::{improvement, Metric, EVAL_CLAMP_DB};
use sdnet_core::{Model, SeparationMode, TrainExample};
use serde::{Deserialize, Serialize};

use crate::plot;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub beam_width: usize,
    /// `None` skips SDR, which is the slow part.
    pub sdr_filter_len: Option<usize>,
    pub oracle: bool,
}

/// Metrics of one mixture. Improvements average over the positions present
/// in both the estimate and the reference lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub example_id: String,
    pub sisnri: Option<f64>,
    pub sdri: Option<f64>,
    pub n_true: usize,
    pub n_pred: usize,
    pub speaker_tokens: Vec<usize>,
    pub direction_tokens: Vec<usize>,
    pub log_score: f64,
    /// Same metrics with masks built from the true tokens.
    pub oracle_sisnri: Option<f64>,
    pub oracle_sdri: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_examples: usize,
    pub count_accuracy: f64,
    pub sisnri: Option<f64>,
    pub sdri: Option<f64>,
    pub oracle_sisnri: Option<f64>,
    pub oracle_sdri: Option<f64>,
}

struct Scores {
    sisnri: Option<f64>,
    sdri: Option<f64>,
}

fn score(waves: &[&[f64]], ex: &TrainExample, sdr_filter_len: Option<usize>) -> anyhow::Result<Scores> {
    let mut si = Vec::new();
    let mut sd = Vec::new();
    for (est, target) in waves.iter().zip(&ex.targets) {
        let n = est.len().min(target.len());
        let (est, target, mix) = (&est[..n], &target[..n], &ex.mixture[0][..n]);
        si.push(improvement(Metric::SiSnr { limit: EVAL_CLAMP_DB }, est, target, mix)?);
        if let Some(filter_len) = sdr_filter_len {
            if n > filter_len {
                sd.push(improvement(Metric::Sdr { filter_len }, est, target, mix)?);
            }
        }
    }
    Ok(Scores { sisnri: mean(&si), sdri: mean(&sd) })
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn labels_in_vocab(model: &Model, ex: &TrainExample) -> bool {
    let c = model.config();
    ex.speakers.iter().all(|s| *s < c.n_speakers) && ex.directions.iter().all(|d| *d < c.n_directions)
}

pub fn evaluate_example(
    model: &Model,
    params: &[f64],
    id: &str,
    ex: &TrainExample,
    opts: &EvalOptions,
) -> anyhow::Result<ExampleRecord> {
    let mix = [ex.mixture[0].as_slice(), ex.mixture[1].as_slice()];
    let sep = model.separate(params, mix, SeparationMode::Beam(opts.beam_width))?;
    let waves: Vec<&[f64]> = sep.sources.iter().map(|s| s.waveform.as_slice()).collect();
    let learned = score(&waves, ex, opts.sdr_filter_len)?;
    let mut oracle = Scores { sisnri: None, sdri: None };
    // Test speakers lie outside the trained vocabulary; no oracle mask exists for them.
    if opts.oracle && labels_in_vocab(model, ex) {
        let o = model.separate(params, mix, SeparationMode::Oracle { speakers: &ex.speakers, directions: &ex.directions })?;
        let waves: Vec<&[f64]> = o.sources.iter().map(|s| s.waveform.as_slice()).collect();
        oracle = score(&waves, ex, opts.sdr_filter_len)?;
    }
    Ok(ExampleRecord {
        example_id: id.to_string(),
        sisnri: learned.sisnri,
        sdri: learned.sdri,
        n_true: ex.targets.len(),
        n_pred: sep.sources.len(),
        speaker_tokens: sep.sources.iter().map(|s| s.speaker_token).collect(),
        direction_tokens: sep.sources.iter().map(|s| s.direction_token).collect(),
        log_score: sep.inference.log_score,
        oracle_sisnri: oracle.sisnri,
        oracle_sdri: oracle.sdri,
    })
}

pub fn evaluate<'a>(
    model: &Model,
    params: &[f64],
    items: impl IntoIterator<Item = (&'a str, &'a TrainExample)>,
    opts: &EvalOptions,
) -> anyhow::Result<Vec<ExampleRecord>> {
    items.into_iter().map(|(id, ex)| evaluate_example(model, params, id, ex, opts)).collect()
}

pub fn summarize(records: &[ExampleRecord]) -> Summary {
    let pick = |f: fn(&ExampleRecord) -> Option<f64>| mean(&records.iter().filter_map(f).collect::<Vec<_>>());
    let correct = records.iter().filter(|r| r.n_pred == r.n_true).count();
    Summary {
        n_examples: records.len(),
        count_accuracy: if records.is_empty() { 0.0 } else { correct as f64 / records.len() as f64 },
        sisnri: pick(|r| r.sisnri),
        sdri: pick(|r| r.sdri),
        oracle_sisnri: pick(|r| r.oracle_sisnri),
        oracle_sdri: pick(|r| r.oracle_sdri),
    }
}

fn csv_value(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Writes `metrics.jsonl`, `summary.csv` and SVG plots into `out_dir`.
pub fn write_report(out_dir: &Path, records: &[ExampleRecord]) -> anyhow::Result<Summary> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let path = out_dir.join("metrics.jsonl");
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let mut groups: Vec<(String, Vec<ExampleRecord>)> = vec![("all".into(), records.to_vec())];
    let mut counts: Vec<usize> = records.iter().map(|r| r.n_true).collect();
    counts.sort_unstable();
    counts.dedup();
    for n in counts {
        groups.push((format!("{n}src"), records.iter().filter(|r| r.n_true == n).cloned().collect()));
    }
    let mut csv = String::from("subset,n_examples,count_accuracy,sisnri,sdri,oracle_sisnri,oracle_sdri\n");
    for (name, rs) in &groups {
        let s = summarize(rs);
        csv.push_str(&format!(
            "{name},{},{:.4},{},{},{},{}\n",
            s.n_examples,
            s.count_accuracy,
            csv_value(s.sisnri),
            csv_value(s.sdri),
            csv_value(s.oracle_sisnri),
            csv_value(s.oracle_sdri)
        ));
    }
    let path = out_dir.join("summary.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;

    let sorted = |f: fn(&ExampleRecord) -> Option<f64>| {
        let mut v: Vec<f64> = records.iter().filter_map(f).collect();
        v.sort_by(f64::total_cmp);
        v.into_iter().enumerate().map(|(i, y)| (i as f64, y)).collect::<Vec<_>>()
    };
    plot::lines(
        &out_dir.join("sisnri.svg"),
        "SI-SNR improvement per mixture (sorted)",
        "mixture rank",
        "dB",
        &[("beam", sorted(|r| r.sisnri)), ("oracle tokens", sorted(|r| r.oracle_sisnri))],
    )?;
    let max_n = records.iter().map(|r| r.n_true.max(r.n_pred)).max().unwrap_or(0);
    let hist = |f: fn(&ExampleRecord) -> usize| {
        (0..=max_n).map(|k| (k as f64, records.iter().filter(|r| f(r) == k).count() as f64)).collect::<Vec<_>>()
    };
    plot::lines(
        &out_dir.join("counts.svg"),
        "Source counts",
        "sources",
        "mixtures",
        &[("true", hist(|r| r.n_true)), ("inferred", hist(|r| r.n_pred))],
    )?;
    Ok(summarize(records))
}
