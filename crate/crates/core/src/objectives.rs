//! Training loss and evaluation metrics.
//!
//! SI-SNR is clamped to `±TRAIN_CLAMP_DB` inside the loss and to
//! `±EVAL_CLAMP_DB` when reporting. SDR here is the projection variant: the
//! estimate is projected onto the span of the reference delayed by
//! `0..filter_len` samples (truncated to the signal length).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{domain, Result};
use crate::linalg::{cholesky, cholesky_solve};

pub const TRAIN_CLAMP_DB: f64 = 30.0;
pub const EVAL_CLAMP_DB: f64 = 60.0;
pub const SDR_FILTER_LEN: usize = 512;
pub const DEFAULT_LAMBDA: f64 = 5.0;

const DB: f64 = 10.0 / core::f64::consts::LN_10;

fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn db_ratio(num: f64, den: f64, limit: f64) -> f64 {
    if den <= 0.0 {
        return limit;
    }
    if num <= 0.0 {
        return -limit;
    }
    (10.0 * libm::log10(num / den)).clamp(-limit, limit)
}

fn check_pair(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(domain!("estimate has {} samples, reference {}", est.len(), reference.len()));
    }
    if est.is_empty() {
        return Err(domain!("empty signals"));
    }
    Ok(())
}

/// Scale-invariant SNR in dB, clamped to `±limit`.
pub fn si_snr_clamped(est: &[f64], reference: &[f64], limit: f64) -> Result<f64> {
    Ok(si_snr_parts(est, reference)?.db(limit))
}

/// Scale-invariant SNR with the training clamp.
pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    si_snr_clamped(est, reference, TRAIN_CLAMP_DB)
}

struct SiSnrParts {
    target: Vec<f64>,
    noise: Vec<f64>,
    target_energy: f64,
    noise_energy: f64,
}

impl SiSnrParts {
    fn db(&self, limit: f64) -> f64 {
        db_ratio(self.target_energy, self.noise_energy, limit)
    }
}

fn si_snr_parts(est: &[f64], reference: &[f64]) -> Result<SiSnrParts> {
    check_pair(est, reference)?;
    let e = centered(est);
    let s = centered(reference);
    let ss = dot(&s, &s);
    if ss <= 0.0 {
        return Err(domain!("reference is zero after mean removal"));
    }
    let alpha = dot(&e, &s) / ss;
    let target: Vec<f64> = s.iter().map(|v| alpha * v).collect();
    let noise: Vec<f64> = e.iter().zip(&target).map(|(a, b)| a - b).collect();
    let target_energy = dot(&target, &target);
    let noise_energy = dot(&noise, &noise);
    Ok(SiSnrParts { target, noise, target_energy, noise_energy })
}

/// Clamped SI-SNR and its gradient with respect to `est`. The gradient is
/// zero wherever the clamp is active.
pub fn si_snr_with_grad(est: &[f64], reference: &[f64], limit: f64) -> Result<(f64, Vec<f64>)> {
    let parts = si_snr_parts(est, reference)?;
    let value = parts.db(limit);
    let active = parts.noise_energy > 0.0 && parts.target_energy > 0.0 && value > -limit && value < limit;
    if !active {
        return Ok((value, vec![0.0; est.len()]));
    }
    // d/de 10·log10(|t|²/|n|²) = (10/ln 10)·(2t/|t|² − 2n/|n|²); both terms
    // are already zero-mean, so mean removal leaves them unchanged.
    let (a, b) = (2.0 * DB / parts.target_energy, 2.0 * DB / parts.noise_energy);
    let grad = parts.target.iter().zip(&parts.noise).map(|(t, n)| a * t - b * n).collect();
    Ok((value, grad))
}

/// Projection SDR in dB with the evaluation clamp.
pub fn sdr(est: &[f64], reference: &[f64], filter_len: usize) -> Result<f64> {
    check_pair(est, reference)?;
    let len = est.len();
    if filter_len == 0 || len <= filter_len {
        return Err(domain!("signal of {len} samples must exceed the {filter_len}-tap filter"));
    }
    let f = filter_len;
    let r0 = dot(reference, reference);
    if r0 <= 0.0 {
        return Err(domain!("reference is identically zero"));
    }
    // Gram matrix of truncated delays: the first row is the autocorrelation
    // and each diagonal step drops one tail product.
    let mut gram = vec![0.0; f * f];
    for j in 0..f {
        gram[j] = dot(&reference[..len - j], &reference[j..]);
    }
    for i in 1..f {
        gram[i * f] = gram[i];
    }
    for i in 0..f - 1 {
        for j in 0..f - 1 {
            gram[(i + 1) * f + j + 1] = gram[i * f + j] - reference[len - 1 - i] * reference[len - 1 - j];
        }
    }
    let rhs: Vec<f64> = (0..f).map(|d| dot(&est[d..], &reference[..len - d])).collect();
    let coef = match cholesky(&gram, f) {
        Some(l) => cholesky_solve(&l, f, &rhs),
        None => {
            let trace: f64 = (0..f).map(|i| gram[i * f + i]).sum();
            log::warn!("SDR normal equations are singular; adding ridge {:e}", 1e-8 * trace);
            let mut ridged = gram.clone();
            for i in 0..f {
                ridged[i * f + i] += 1e-8 * trace;
            }
            let l = cholesky(&ridged, f).ok_or_else(|| domain!("SDR normal equations are not positive definite"))?;
            cholesky_solve(&l, f, &rhs)
        }
    };
    let mut proj = vec![0.0; len];
    for (d, c) in coef.iter().enumerate() {
        if *c != 0.0 {
            for (p, r) in proj[d..].iter_mut().zip(reference) {
                *p += c * r;
            }
        }
    }
    let err: f64 = est.iter().zip(&proj).map(|(e, p)| (e - p) * (e - p)).sum();
    Ok(db_ratio(dot(&proj, &proj), err, EVAL_CLAMP_DB))
}

/// Metric used by [`improvement`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    SiSnr { limit: f64 },
    Sdr { filter_len: usize },
}

impl Metric {
    pub fn eval(&self, est: &[f64], reference: &[f64]) -> Result<f64> {
        match *self {
            Self::SiSnr { limit } => si_snr_clamped(est, reference, limit),
            Self::Sdr { filter_len } => sdr(est, reference, filter_len),
        }
    }
}

/// `metric(est, ref) − metric(mixture, ref)`.
pub fn improvement(metric: Metric, est: &[f64], reference: &[f64], mixture: &[f64]) -> Result<f64> {
    Ok(metric.eval(est, reference)? - metric.eval(mixture, reference)?)
}

/// Mean over steps of `−ln p(label_t)`.
pub fn sequence_ce(dists: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if dists.len() != labels.len() || dists.is_empty() {
        return Err(domain!("{} distributions for {} labels", dists.len(), labels.len()));
    }
    let mut total = 0.0;
    for (y, &l) in dists.iter().zip(labels) {
        let p = *y.get(l).ok_or_else(|| domain!("label {l} outside a {}-token distribution", y.len()))?;
        total -= libm::log(p);
    }
    Ok(total / labels.len() as f64)
}

/// Terms of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub sisnr_ss: f64,
    pub ce_spk: f64,
    pub ce_dir: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(sisnr_ss: f64, ce_spk: f64, ce_dir: f64, lambda: f64) -> Self {
        Self { sisnr_ss, ce_spk, ce_dir, total: -sisnr_ss + lambda * (ce_spk + ce_dir), lambda }
    }

    /// Average of several breakdowns (e.g. over a batch).
    pub fn mean(items: &[LossBreakdown]) -> Option<Self> {
        let n = items.len() as f64;
        let first = items.first()?;
        let s = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Self::new(s(|b| b.sisnr_ss), s(|b| b.ce_spk), s(|b| b.ce_dir), first.lambda))
    }

    pub fn is_finite(&self) -> bool {
        self.sisnr_ss.is_finite() && self.ce_spk.is_finite() && self.ce_dir.is_finite() && self.total.is_finite()
    }
}

/// Training objective for one example with positional pairing of outputs and
/// energy-sorted targets. Label slices include the trailing EOS.
pub fn total_loss(
    separated: &[Vec<f64>],
    targets: &[Vec<f64>],
    spk_dists: &[Vec<f64>],
    dir_dists: &[Vec<f64>],
    spk_labels: &[usize],
    dir_labels: &[usize],
    lambda: f64,
) -> Result<LossBreakdown> {
    Ok(total_loss_with_grad(separated, targets, spk_dists, dir_dists, spk_labels, dir_labels, lambda)?.0)
}

/// [`total_loss`] plus the gradient of `total` with respect to each separated
/// waveform.
pub fn total_loss_with_grad(
    separated: &[Vec<f64>],
    targets: &[Vec<f64>],
    spk_dists: &[Vec<f64>],
    dir_dists: &[Vec<f64>],
    spk_labels: &[usize],
    dir_labels: &[usize],
    lambda: f64,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    if separated.len() != targets.len() || separated.is_empty() {
        return Err(domain!("{} separated sources for {} targets", separated.len(), targets.len()));
    }
    let n = separated.len() as f64;
    let mut sisnr = 0.0;
    let mut grads = Vec::with_capacity(separated.len());
    for (est, tgt) in separated.iter().zip(targets) {
        let (v, mut g) = si_snr_with_grad(est, tgt, TRAIN_CLAMP_DB)?;
        sisnr += v / n;
        g.iter_mut().for_each(|x| *x *= -1.0 / n);
        grads.push(g);
    }
    let breakdown =
        LossBreakdown::new(sisnr, sequence_ce(spk_dists, spk_labels)?, sequence_ce(dir_dists, dir_labels)?, lambda);
    Ok((breakdown, grads))
}

/// Fraction of examples whose predicted source count is correct.
pub fn count_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(domain!("{} predictions for {} examples", predicted.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(domain!("no examples"));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}
