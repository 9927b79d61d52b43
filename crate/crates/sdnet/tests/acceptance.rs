//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdnet::checkpoint::Checkpoint;
use sdnet::config::MixKind;
use sdnet::dataset::{simulate_example, Split};
use sdnet::eval::{self, EvalOptions, Summary};
use sdnet::train::Session;
use sdnet::RunConfig;
use sdnet_core::audio::SAMPLE_RATE;
use sdnet_core::datasim::{
    azimuth_to_class, compute_azimuth, generate_rir, simulate_mixture, MixtureConfig, RoomSpec, SpeakerSynth,
};
use sdnet_core::frontend::{frame_count, Frontend, FrontendOptions};
use sdnet_core::inference::{
    beam_search, DecodeMode, DecoderState, InferenceModule, InferenceOptions, OutputActivation, PreparedContext,
};
use sdnet_core::linalg::{dot, softmax, Mat};
use sdnet_core::nn::Layout;
use sdnet_core::objectives::{
    count_accuracy, improvement, sdr, sequence_ce, si_snr, total_loss, LossBreakdown, Metric, EVAL_CLAMP_DB,
    TRAIN_CLAMP_DB,
};
use sdnet_core::{Model, ModelConfig, TrainExample};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    check((a - b).abs() <= tol, format!("{what}: got {a}, expected {b} ± {tol}"))
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut q = x.to_vec();
    (0..x.len())
        .map(|i| {
            q[i] = x[i] + h;
            let up = f(&q);
            q[i] = x[i] - h;
            let down = f(&q);
            q[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (diff / dot(a, a).max(dot(b, b)).max(1e-300)).sqrt()
}

// ---------------------------------------------------------------- 1

fn unit_equations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut n = 0;
    let mut ok = |r: Result<(), String>| -> Result<(), String> {
        n += 1;
        r
    };

    for _ in 0..100 {
        let len = rng.gen_range(1..40);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let y = softmax(&x);
        ok(close(y.iter().sum(), 1.0, 1e-12, "softmax sum"))?;
    }

    // SI-SNR: target energy 2, orthogonal zero-mean residual energy 0.02.
    let s = [0.0, 1.0, 0.0, -1.0];
    let e = [0.1, 1.0, -0.1, -1.0];
    ok(close(si_snr(&e, &s).unwrap(), 20.0, 1e-6, "SI-SNR hand case"))?;
    ok(close(si_snr(&s, &s).unwrap(), TRAIN_CLAMP_DB, 0.0, "SI-SNR clamp"))?;

    ok(check(frame_count(8000, 40, 20).unwrap() == 399, "frame count of 1 s"))?;
    ok(check(frame_count(400, 40, 20).unwrap() == 19, "frame count of 400 samples"))?;
    let full = Model::new(ModelConfig::default()).unwrap();
    ok(check(full.output_len(8000).unwrap() == 8000, "decoder output length"))?;
    ok(check(full.separator.tcn.receptive_field() == 4 * (255 * 2) / 2, "TCN receptive field"))?;

    // Direct path 1.715 m lands on sample 40 with 1/(4πd) amplitude.
    let room = RoomSpec::centered([5.0, 4.0, 3.0], 0.0, SAMPLE_RATE).unwrap();
    let mic = [1.0, 2.0, 1.5];
    let h = generate_rir(&room, &[2.715, 2.0, 1.5], &mic, 20).unwrap();
    let k = (0..h.len()).max_by(|&a, &b| h[a].abs().total_cmp(&h[b].abs())).unwrap();
    ok(check(k.abs_diff(40) <= 1, format!("direct-path index {k}")))?;
    ok(close(h[k], 1.0 / (4.0 * std::f64::consts::PI * 1.715), 1e-12, "direct-path amplitude"))?;
    let h2 = generate_rir(&room, &[4.43, 2.0, 1.5], &mic, 20).unwrap();
    let p2 = h2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ok(close(p2 / h[k], 0.5, 1e-9, "inverse-distance law"))?;
    for _ in 0..200 {
        let src = [rng.gen_range(0.1..4.9), rng.gen_range(0.1..3.9), rng.gen_range(0.1..2.9)];
        let m = [rng.gen_range(0.1..4.9), rng.gen_range(0.1..3.9), rng.gen_range(0.1..2.9)];
        let d = sdnet_core::datasim::dist(&src, &m);
        if d < 0.05 {
            continue;
        }
        let h = generate_rir(&room, &src, &m, 0).unwrap();
        let k = (0..h.len()).max_by(|&a, &b| h[a].abs().total_cmp(&h[b].abs())).unwrap() as f64;
        ok(check((k - (d * 8000.0 / 343.0).round()).abs() <= 1.0, "direct-path index property"))?;
    }

    let c = room.mic_center();
    ok(close(compute_azimuth(&[c[0] - 1.0, c[1], c[2]], &room).unwrap(), 0.0, 1e-9, "endfire azimuth"))?;
    ok(close(compute_azimuth(&[c[0], c[1] + 1.0, c[2]], &room).unwrap(), 90.0, 1e-9, "broadside azimuth"))?;
    for (deg, class) in [(0.0, 0), (180.0, 36), (90.0, 18), (47.4, 9)] {
        ok(check(azimuth_to_class(deg).unwrap() == class, format!("class of {deg}°")))?;
    }

    // Speaker pitch: the largest DFT line between 60 and 130 Hz.
    let synth = SpeakerSynth::new(8, SAMPLE_RATE);
    for (id, f0) in [(0usize, 90.0), (1, 93.0)] {
        let x = synth.signal(id, 1.0, 7).unwrap().into_channels().remove(0);
        ok(check(x.len() == 8000, "utterance length"))?;
        ok(close(x.iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.9, 1e-12, "utterance peak"))?;
        let mag = |f: f64| {
            let w = 2.0 * std::f64::consts::PI * f / 8000.0;
            let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, v)| (re + v * (w * n as f64).cos(), im - v * (w * n as f64).sin()));
            re * re + im * im
        };
        let peak = (60..130).max_by(|&a, &b| mag(a as f64).total_cmp(&mag(b as f64))).unwrap() as f64;
        ok(close(peak, f0, 1.0, "speaker pitch"))?;
    }

    let mcfg = MixtureConfig { duration_s: 0.25, n_speakers: 8, ..MixtureConfig::default() };
    let ex = simulate_mixture(&[1, 4], &room, &mcfg, 5).unwrap();
    let additive = (0..ex.mixture.len()).all(|i| (ex.mixture.channel(0)[i] - ex.targets.iter().map(|t| t.channel(0)[i]).sum::<f64>()).abs() <= 1e-6);
    ok(check(additive, "anechoic reference channel equals the sum of targets"))?;
    let en: Vec<f64> = ex.targets.iter().map(|t| dot(t.channel(0), t.channel(0))).collect();
    ok(check(en.windows(2).all(|w| w[0] >= w[1]), "targets sorted by energy"))?;

    ok(close(sequence_ce(&[vec![0.5, 0.5], vec![0.25, 0.75]], &[0, 0]).unwrap(), 1.0397, 1e-4, "sequence CE"))?;
    let uniform = vec![vec![0.2; 5]; 3];
    ok(close(sequence_ce(&uniform, &[0, 1, 2]).unwrap(), 5f64.ln(), 1e-12, "uniform CE"))?;
    ok(close(LossBreakdown::new(10.0, 0.2, 0.3, 5.0).total, -7.5, 1e-12, "total loss arithmetic"))?;
    let perfect = total_loss(&[s.to_vec()], &[s.to_vec()], &[vec![1.0, 0.0, 0.0]], &[vec![1.0, 0.0, 0.0]], &[0], &[0], 5.0);
    ok(check(perfect.map(|l| l.total) == Ok(-TRAIN_CLAMP_DB), "loss floor"))?;
    ok(close(count_accuracy(&[2, 3, 2, 2], &[2, 2, 2, 3]).unwrap(), 0.5, 0.0, "count accuracy"))?;

    let (r, noise) = orthogonal_pair(&mut rng, 600, 16, 32, 0.1);
    let est: Vec<f64> = r.iter().zip(&noise).map(|(a, b)| a + b).collect();
    ok(close(sdr(&est, &r, 16).unwrap(), 10.0, 0.5, "SDR with orthogonal noise at -10 dB"))?;
    let mut delayed = vec![0.0; r.len()];
    delayed[5..].copy_from_slice(&r[..r.len() - 5]);
    ok(check(sdr(&delayed, &r, 6).unwrap() >= EVAL_CLAMP_DB, "SDR of a delayed reference"))?;
    let mix: Vec<f64> = r.iter().zip(&noise).map(|(a, b)| a + 10.0 * b).collect();
    let m = Metric::SiSnr { limit: EVAL_CLAMP_DB };
    ok(close(improvement(m, &mix, &r, &mix).unwrap(), 0.0, 1e-12, "zero improvement"))?;
    Ok(format!("{n} checks"))
}

/// Zero-padded random reference and noise orthogonal to every reference
/// shift in `-(f-1)..=(f-1)`, scaled to `ratio` of the reference energy.
fn orthogonal_pair(rng: &mut ChaCha8Rng, len: usize, f: usize, pad: usize, ratio: f64) -> (Vec<f64>, Vec<f64>) {
    let mut r = uniform_vec(rng, len);
    zero_pads(&mut r, pad);
    let shift = |x: &[f64], k: isize| -> Vec<f64> {
        (0..x.len() as isize).map(|i| if (0..x.len() as isize).contains(&(i - k)) { x[(i - k) as usize] } else { 0.0 }).collect()
    };
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for k in -(f as isize - 1)..f as isize {
        let mut v = shift(&r, k);
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-9 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut w = uniform_vec(rng, len);
    zero_pads(&mut w, pad);
    for _ in 0..2 {
        for b in &basis {
            let c = dot(&w, b);
            w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
    }
    let scale = (ratio * dot(&r, &r) / dot(&w, &w)).sqrt();
    w.iter_mut().for_each(|x| *x *= scale);
    (r, w)
}

fn zero_pads(x: &mut [f64], pad: usize) {
    let n = x.len();
    x[..pad].fill(0.0);
    x[n - pad..].fill(0.0);
}

// ---------------------------------------------------------------- 2

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Vec<String> = Vec::new();

    // (a) frontend with the correlation feature, against a random linear
    // read-out of both feature matrices.
    for scaled in [false, true] {
        let mut layout = Layout::new();
        let fe = Frontend::new(&mut layout, FrontendOptions { channels: 4, kernel: 8, stride: 4, relu: false, iac: true, iac_scaled: scaled });
        let p = layout.initialize(3);
        let x = [uniform_vec(&mut rng, 40), uniform_vec(&mut rng, 40)];
        let (out, cache) = fe.forward(&p, [&x[0], &x[1]]).unwrap();
        let w1 = uniform_vec(&mut rng, out.features.as_slice().len());
        let w2 = uniform_vec(&mut rng, out.inference_features.as_slice().len());
        let f = |q: &[f64]| {
            let (o, _) = fe.forward(q, [&x[0], &x[1]]).unwrap();
            dot(o.features.as_slice(), &w1) + dot(o.inference_features.as_slice(), &w2)
        };
        let mut g = vec![0.0; p.len()];
        let d1 = Mat::from_vec(out.features.rows(), out.features.cols(), w1.clone()).unwrap();
        let d2 = Mat::from_vec(out.inference_features.rows(), out.inference_features.cols(), w2.clone()).unwrap();
        fe.backward(&mut g, &cache, &d1, &d2);
        let err = relative_error(&numeric_gradient(f, &p, 1e-5), &g);
        check(err < 1e-4, format!("frontend (scaled={scaled}) relative error {err:.2e}"))?;
        worst.push(format!("frontend {err:.1e}"));
    }

    // (b) inference: attention, global embedding, decoders and CE, plus a
    // linear read-out of the source masks.
    let opts = InferenceOptions {
        input: 6,
        context_hidden: 4,
        context_layers: 1,
        decoder_hidden: 5,
        decoder_layers: 1,
        attention_dim: 5,
        embedding_dim: 4,
        speakers: 3,
        directions: 3,
        max_steps: 5,
        activation: OutputActivation::Tanh,
    };
    let mut layout = Layout::new();
    let m = InferenceModule::new(&mut layout, opts);
    let p = layout.initialize(11);
    let fo = Mat::from_vec(6, 6, uniform_vec(&mut rng, 36)).unwrap();
    let (spk, dir) = ([2usize, 0], [1usize, 2]);
    let w = vec![uniform_vec(&mut rng, 4), uniform_vec(&mut rng, 4)];
    let objective = |q: &[f64], fo: &Mat| {
        let trace = m.forward_train(q, fo, &spk, &dir).unwrap();
        let st = m.speaker.vocab.with_eos(&spk);
        let dt = m.direction.vocab.with_eos(&dir);
        let mut loss = 0.0;
        for (t, y) in trace.speaker.probs().iter().enumerate() {
            loss -= y[st[t]].ln();
        }
        for (t, y) in trace.direction.probs().iter().enumerate() {
            loss -= y[dt[t]].ln();
        }
        loss + w.iter().enumerate().map(|(i, wi)| dot(&trace.mask(i), wi)).sum::<f64>()
    };
    let trace = m.forward_train(&p, &fo, &spk, &dir).unwrap();
    let mut g = vec![0.0; p.len()];
    let dfo = m.backward(&p, &mut g, &trace, &spk, &dir, &w, 1.0);
    let err = relative_error(&numeric_gradient(|q| objective(q, &fo), &p, 1e-5), &g);
    check(err < 1e-4, format!("inference parameter relative error {err:.2e}"))?;
    let err_in = relative_error(
        &numeric_gradient(|x| objective(&p, &Mat::from_vec(6, 6, x.to_vec()).unwrap()), fo.as_slice(), 1e-5),
        dfo.as_slice(),
    );
    check(err_in < 1e-4, format!("inference input relative error {err_in:.2e}"))?;
    worst.push(format!("inference {:.1e}", err.max(err_in)));

    // (c) the whole micro network under the joint loss.
    let cfg = ModelConfig {
        encoder_channels: 8,
        encoder_kernel: 8,
        encoder_stride: 4,
        context_hidden: 4,
        context_layers: 1,
        decoder_hidden: 6,
        decoder_layers: 1,
        attention_dim: 5,
        embedding_dim: 4,
        n_speakers: 3,
        n_directions: 4,
        tcn_hidden: 6,
        tcn_blocks: 1,
        tcn_layers_per_block: 2,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg).unwrap();
    let mut p = model.init_params(1);
    p.iter_mut().for_each(|v| *v += 0.05 * rng.gen_range(-1.0..1.0));
    let s1 = uniform_vec(&mut rng, 40);
    let s2 = uniform_vec(&mut rng, 40);
    let ex = TrainExample {
        mixture: [
            s1.iter().zip(&s2).map(|(a, b)| a + b).collect(),
            s1.iter().zip(&s2).map(|(a, b)| 0.8 * a + 1.1 * b).collect(),
        ],
        targets: vec![s1, s2],
        speakers: vec![2, 0],
        directions: vec![1, 3],
    };
    let mut g = vec![0.0; p.len()];
    let loss = model.loss_and_grad(&p, &mut g, &ex).unwrap();
    check(loss.sisnr_ss.abs() < TRAIN_CLAMP_DB, "clamp active in micro model")?;
    let err = relative_error(&numeric_gradient(|q| model.loss(q, &ex).unwrap().total, &p, 1e-6), &g);
    check(err < 1e-4, format!("micro model relative error {err:.2e}"))?;
    worst.push(format!("micro model {err:.1e} over {} params", p.len()));
    Ok(worst.join(", "))
}

// ---------------------------------------------------------------- 5

fn exhaustive(m: &InferenceModule, p: &[f64], ctx: &PreparedContext) -> (f64, Vec<(usize, usize)>) {
    #[allow(clippy::too_many_arguments)]
    fn go(
        m: &InferenceModule,
        p: &[f64],
        ctx: &PreparedContext,
        s: &DecoderState,
        d: &DecoderState,
        s_in: &[f64],
        d_in: &[f64],
        t: usize,
        score: f64,
        path: &mut Vec<(usize, usize)>,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        let h = &ctx.states.h;
        let so = m.speaker.step(p, &ctx.speaker_keys, h, s, s_in);
        let dout = m.direction.step(p, &ctx.direction_keys, h, d, d_in);
        for a in m.speaker.vocab.emittable() {
            for b in m.direction.vocab.emittable() {
                let sc = score + so.probs[a].ln() + dout.probs[b].ln();
                path.push((a, b));
                if a == m.speaker.vocab.eos() || b == m.direction.vocab.eos() || t + 1 == m.max_steps() {
                    if sc > best.0 {
                        *best = (sc, path.clone());
                    }
                } else {
                    let si = m.speaker.embed(p, &so.probs, a);
                    let di = m.direction.embed(p, &dout.probs, b);
                    go(m, p, ctx, &so.state, &dout.state, &si, &di, t + 1, sc, path, best);
                }
                path.pop();
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let s_in = m.speaker.initial_input(p).0;
    let d_in = m.direction.initial_input(p).0;
    go(m, p, ctx, &m.speaker.initial_state(), &m.direction.initial_state(), &s_in, &d_in, 0, 0.0, &mut Vec::new(), &mut best);
    best
}

fn beam_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..100u64 {
        // Speaker vocabulary of 5 tokens, direction vocabulary of 4; two steps.
        let opts = InferenceOptions {
            input: 6,
            context_hidden: 4,
            context_layers: 1,
            decoder_hidden: 5,
            decoder_layers: 1,
            attention_dim: 5,
            embedding_dim: 4,
            speakers: 3,
            directions: 2,
            max_steps: 2,
            activation: OutputActivation::Tanh,
        };
        let mut layout = Layout::new();
        let m = InferenceModule::new(&mut layout, opts);
        let p = layout.initialize(seed);
        let fo = Mat::from_vec(4, 6, uniform_vec(&mut rng, 24)).unwrap();
        let ctx = m.prepare(&p, &fo).unwrap();
        let greedy = m.infer_prepared(&p, &ctx, DecodeMode::Greedy).unwrap();
        check(beam_search(&m, &p, &ctx, 1).unwrap() == greedy, format!("seed {seed}: width 1 differs from greedy"))?;
        let wide = beam_search(&m, &p, &ctx, 25).unwrap();
        let (score, path) = exhaustive(&m, &p, &ctx);
        let got: Vec<_> = wide.steps.iter().map(|s| (s.speaker_token, s.direction_token)).collect();
        check(got == path, format!("seed {seed}: width 25 path {got:?} vs exhaustive {path:?}"))?;
        check((wide.log_score - score).abs() < 1e-12, format!("seed {seed}: score {} vs {score}", wide.log_score))?;
        check(wide.log_score >= greedy.log_score, format!("seed {seed}: beam scored below greedy"))?;
    }
    Ok("100 model seeds, vocabularies 5 and 4, 2 steps".into())
}

// ---------------------------------------------------------------- 6

fn metric_invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_si = 0.0f64;
    let mut worst_sdr = 0.0f64;
    for _ in 0..1000 {
        let len = rng.gen_range(50..500);
        let r = uniform_vec(&mut rng, len);
        let level = rng.gen_range(0.05..2.0);
        let e: Vec<f64> = r.iter().map(|v| v + level * rng.gen_range(-1.0..1.0)).collect();
        let alpha = 10f64.powf(rng.gen_range(-3.0..3.0));
        let offset = rng.gen_range(-5.0..5.0);
        let base = si_snr(&e, &r).map_err(|x| x.to_string())?;
        let scaled: Vec<f64> = e.iter().map(|v| alpha * v + offset).collect();
        let shifted: Vec<f64> = r.iter().map(|v| v - offset).collect();
        worst_si = worst_si.max((si_snr(&scaled, &r).unwrap() - base).abs());
        worst_si = worst_si.max((si_snr(&e, &shifted).unwrap() - base).abs());
    }
    check(worst_si <= 1e-6, format!("SI-SNR invariance off by {worst_si:.2e} dB"))?;

    for _ in 0..1000 {
        // Estimate = short FIR of the reference + noise orthogonal to every
        // reference delay, so any delay that keeps the filter inside the
        // projection span leaves the score unchanged.
        let f = rng.gen_range(4..12);
        let ratio = 10f64.powf(rng.gen_range(-3.0..0.5));
        let (r, noise) = orthogonal_pair(&mut rng, 240, f, 2 * f, ratio);
        let taps = rng.gen_range(1..=f / 2);
        let fir = uniform_vec(&mut rng, taps);
        let mut est = noise.clone();
        for (k, c) in fir.iter().enumerate() {
            for i in k..est.len() {
                est[i] += c * r[i - k];
            }
        }
        let base = sdr(&est, &r, f).unwrap();
        let d = rng.gen_range(1..=f - taps);
        let mut delayed = vec![0.0; est.len()];
        delayed[d..].copy_from_slice(&est[..est.len() - d]);
        worst_sdr = worst_sdr.max((sdr(&delayed, &r, f).unwrap() - base).abs());
    }
    check(worst_sdr <= 1e-6, format!("SDR delay invariance off by {worst_sdr:.2e} dB"))?;
    Ok(format!("max deviation SI-SNR {worst_si:.1e} dB, SDR {worst_sdr:.1e} dB"))
}

// ---------------------------------------------------------------- 3, 4, 7

fn load(cfg: &RunConfig, split: Split, n: usize) -> Vec<(String, TrainExample)> {
    load_range(cfg, split, 0..n)
}

fn load_range(cfg: &RunConfig, split: Split, range: std::ops::Range<usize>) -> Vec<(String, TrainExample)> {
    range
        .map(|i| {
            let ex = simulate_example(cfg, split, i).unwrap();
            let example = TrainExample {
                mixture: [ex.mixture.channel(0).to_vec(), ex.mixture.channel(1).to_vec()],
                targets: ex.targets.iter().map(|t| t.channel(0).to_vec()).collect(),
                speakers: ex.speaker_labels,
                directions: ex.direction_labels,
            };
            (format!("{}-{i}", split.name()), example)
        })
        .collect()
}

fn score(s: &Session, data: &[(String, TrainExample)], beam: usize) -> Summary {
    let opts = EvalOptions { beam_width: beam, sdr_filter_len: None, oracle: false };
    let records = eval::evaluate(&s.model, &s.params, data.iter().map(|(id, ex)| (id.as_str(), ex)), &opts).unwrap();
    eval::summarize(&records)
}

struct Run {
    session: Session,
    steps: u64,
    last: Summary,
    elapsed: Duration,
}

/// Trains on `data`, scoring the training set every `every` steps, until the
/// overfit thresholds hold or `max_steps` is reached. With `fixed` set, runs
/// exactly that many steps instead.
fn overfit(cfg: &RunConfig, data: &[(String, TrainExample)], max_steps: u64, fixed: Option<u64>, label: &str) -> Run {
    let t0 = Instant::now();
    let examples: Vec<TrainExample> = data.iter().map(|(_, e)| e.clone()).collect();
    let mut s = Session::new(cfg).unwrap();
    let every = cfg.train.eval_every.max(1);
    let limit = fixed.unwrap_or(max_steps);
    let mut last = Summary::default();
    while s.step < limit {
        s.step(&examples).unwrap();
        if s.step % every == 0 || s.step == limit {
            last = score(&s, data, cfg.eval.beam_width);
            eprintln!(
                "  [{label}] step {} sisnri {:.2} dB count {:.3} ({:.0} s)",
                s.step,
                last.sisnri.unwrap_or(f64::NAN),
                last.count_accuracy,
                t0.elapsed().as_secs_f64()
            );
            if fixed.is_none() && met(&last) {
                break;
            }
        }
    }
    Run { steps: s.step, session: s, last, elapsed: t0.elapsed() }
}

fn met(s: &Summary) -> bool {
    s.sisnri.is_some_and(|v| v >= 10.0) && s.count_accuracy >= 0.95
}

fn overfit_config() -> RunConfig {
    // 8 synthetic speakers, anechoic two-source mixtures.
    let cfg = RunConfig::desk();
    assert_eq!(cfg.data.train_speakers.len(), 8);
    assert!(!cfg.data.reverberant && cfg.data.mix == MixKind::Two);
    cfg
}

const MAX_STEPS: u64 = 10_000;

fn criterion_3(run: &Run) -> Outcome {
    let s = &run.last;
    let msg = format!(
        "train SISNRi {:.2} dB, count accuracy {:.3} after {} steps ({:.0} s)",
        s.sisnri.unwrap_or(f64::NAN),
        s.count_accuracy,
        run.steps,
        run.elapsed.as_secs_f64()
    );
    if met(s) && run.elapsed <= Duration::from_secs(7200) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_7(cfg: &RunConfig, data: &[(String, TrainExample)], with_iac: &Run) -> Outcome {
    let mut ablated = cfg.clone();
    ablated.model.iac = false;
    let off = overfit(&ablated, data, MAX_STEPS, Some(with_iac.steps), "no IAC");
    let (on_acc, off_acc) = (with_iac.last.count_accuracy, off.last.count_accuracy);
    let msg = format!(
        "count accuracy with IAC {on_acc:.3} vs zeroed {off_acc:.3} at {} steps (SISNRi {:.2} vs {:.2} dB)",
        with_iac.steps,
        with_iac.last.sisnri.unwrap_or(f64::NAN),
        off.last.sisnri.unwrap_or(f64::NAN)
    );
    if on_acc >= off_acc {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Held-out count accuracy on 2&3-source mixtures. The training regime is
/// the overfit one (same network, step budget and stop thresholds) on a
/// larger set, with the usual plateau halving driven by a validation split
/// of unseen training-split mixtures. Dev mixtures are only scored at the end.
fn criterion_4() -> Outcome {
    const N_TRAIN: usize = 2000;
    let t0 = Instant::now();
    let mut cfg = RunConfig::desk();
    cfg.data.mix = MixKind::TwoAndThree;
    cfg.data.test_speakers = vec![8, 9, 10];
    cfg.validate().map_err(|e| e.to_string())?;
    let train = load_range(&cfg, Split::Train, 0..N_TRAIN);
    let valid = load_range(&cfg, Split::Train, N_TRAIN..N_TRAIN + 100);
    let dev = load_range(&cfg, Split::Dev, 0..200);
    let examples: Vec<TrainExample> = train.iter().map(|(_, e)| e.clone()).collect();
    let beam = cfg.eval.beam_width;

    let mut s = Session::new(&cfg).unwrap();
    let mut best = s.params.clone();
    let mut fit = Summary::default();
    while s.step < MAX_STEPS {
        s.step(&examples).unwrap();
        if s.step % cfg.train.eval_every != 0 {
            continue;
        }
        fit = score(&s, &train[..200], beam);
        let v = score(&s, &valid, beam);
        if s.observe_dev(v.sisnri.unwrap_or(f64::NEG_INFINITY), cfg.train.patience) {
            best = s.params.clone();
        }
        eprintln!(
            "  [2&3-mix] step {} train sisnri {:.2} dB count {:.3}, validation sisnri {:.2} dB count {:.3}, lr {:e} ({:.0} s)",
            s.step,
            fit.sisnri.unwrap_or(f64::NAN),
            fit.count_accuracy,
            v.sisnri.unwrap_or(f64::NAN),
            v.count_accuracy,
            s.optimizer.lr,
            t0.elapsed().as_secs_f64()
        );
        if met(&fit) || s.schedule.halvings >= cfg.train.max_halvings {
            break;
        }
    }
    s.params = best;
    let d = score(&s, &dev, beam);
    let by_count = |n: usize| {
        let recs: Vec<_> = dev.iter().filter(|(_, e)| e.targets.len() == n).cloned().collect();
        score(&s, &recs, beam).count_accuracy
    };
    let msg = format!(
        "dev count accuracy {:.3} on {} held-out mixtures (2-src {:.3}, 3-src {:.3}); trained {} steps on {N_TRAIN}, last train SISNRi {:.2} dB, count {:.3} ({:.0} s)",
        d.count_accuracy,
        dev.len(),
        by_count(2),
        by_count(3),
        s.step,
        fit.sisnri.unwrap_or(f64::NAN),
        fit.count_accuracy,
        t0.elapsed().as_secs_f64()
    );
    if d.count_accuracy >= 0.8 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- 8

fn determinism_and_resume() -> Outcome {
    let mut cfg = RunConfig::desk();
    cfg.data.duration_s = 0.25;
    let data: Vec<TrainExample> = load(&cfg, Split::Train, 8).into_iter().map(|(_, e)| e).collect();
    let curve = |s: &mut Session, n: usize| -> Vec<u64> { (0..n).map(|_| s.step(&data).unwrap().loss.total.to_bits()).collect() };

    let mut a = Session::new(&cfg).unwrap();
    let mut b = Session::new(&cfg).unwrap();
    let ca = curve(&mut a, 30);
    check(ca == curve(&mut b, 30), "two fixed-seed runs diverged")?;
    check(a.params == b.params, "parameters differ between identical runs")?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ck.bin");
    let mut c = Session::new(&cfg).unwrap();
    let first = curve(&mut c, 15);
    c.checkpoint().save(&path).map_err(|e| e.to_string())?;
    let mut resumed = Session::from_checkpoint(&cfg, Checkpoint::load(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let rest = curve(&mut resumed, 15);
    check(first[..] == ca[..15] && rest[..] == ca[15..], "resumed loss curve differs from the uninterrupted run")?;
    check(resumed.params == a.params, "resumed parameters differ")?;
    Ok("30-step curves bit-identical; resume at step 15 matches".into())
}

fn main() {
    // `cargo test --test acceptance -- 1 5` runs only the listed criteria;
    // other arguments passed by cargo are ignored.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| only.is_empty() || only.contains(&n);
    let t0 = Instant::now();
    let mut failed = 0;
    let mut report = |n: u32, name: &str, budget: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let mut out = f();
        let took = start.elapsed();
        if let (Ok(msg), Some(b)) = (&out, budget) {
            if took > b {
                out = Err(format!("{msg}; took {:.0} s, budget {:.0} s", took.as_secs_f64(), b.as_secs_f64()));
            }
        }
        match out {
            Ok(msg) => println!("[PASS] criterion {n}: {name}: {msg} [{:.1} s]", took.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] criterion {n}: {name}: {msg} [{:.1} s]", took.as_secs_f64())
            }
        }
    };

    report(1, "unit-equation suite", Some(Duration::from_secs(120)), &mut unit_equations);
    report(2, "gradient checks", Some(Duration::from_secs(300)), &mut gradient_checks);
    report(5, "beam search oracle", None, &mut beam_oracle);
    report(6, "metric invariances", None, &mut metric_invariances);
    report(8, "determinism and resume", None, &mut determinism_and_resume);

    if wanted(3) || wanted(7) {
        let cfg = overfit_config();
        let data = load(&cfg, Split::Train, 50);
        let with_iac = overfit(&cfg, &data, MAX_STEPS, None, "IAC");
        report(3, "overfit (anechoic, 50 mixtures, 8 speakers, within 2 h)", None, &mut || criterion_3(&with_iac));
        let opts = EvalOptions { beam_width: cfg.eval.beam_width, sdr_filter_len: None, oracle: true };
        let records = eval::evaluate(&with_iac.session.model, &with_iac.session.params, data.iter().map(|(id, ex)| (id.as_str(), ex)), &opts).unwrap();
        let s = eval::summarize(&records);
        println!(
            "[INFO] overfit set: learned SISNRi {:.2} dB, with oracle token inputs {:.2} dB",
            s.sisnri.unwrap_or(f64::NAN),
            s.oracle_sisnri.unwrap_or(f64::NAN)
        );
        report(7, "IAC ablation trend", None, &mut || criterion_7(&cfg, &data, &with_iac));
    }
    report(4, "variable source count", None, &mut criterion_4);

    println!("acceptance: {} failed, {:.0} s total", failed, t0.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
