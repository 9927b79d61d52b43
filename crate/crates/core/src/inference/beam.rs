//! Joint beam search over synchronized (speaker, direction) token pairs.

use alloc::vec::Vec;
use core::cmp::Ordering;

use super::{DecodeMode, DecoderState, InferenceModule, InferenceResult, InferenceStep, PreparedContext, SourceMask};
use crate::error::{domain, Result};

struct Hypothesis {
    speaker: DecoderState,
    direction: DecoderState,
    speaker_input: Vec<f64>,
    direction_input: Vec<f64>,
    steps: Vec<InferenceStep>,
    score: f64,
}

struct Candidate {
    score: f64,
    hyp: usize,
    speaker: usize,
    direction: usize,
}

/// Highest-scoring finished hypothesis of a beam of `width`.
///
/// Every step the `width` best (hypothesis, pair) extensions survive; an
/// extension containing EOS in either stream finishes. Hypotheses still alive
/// at the step cap finish as truncated. The greedy decode is always part of the
/// finished pool, so the result never scores below it.
pub fn beam_search(module: &InferenceModule, p: &[f64], ctx: &PreparedContext, width: usize) -> Result<InferenceResult> {
    if width == 0 {
        return Err(domain!("beam width must be at least 1"));
    }
    let (spk, dir) = (&module.speaker, &module.direction);
    let h = &ctx.states.h;
    let mut finished = alloc::vec![module.infer_prepared(p, ctx, DecodeMode::Greedy)?];
    let mut alive = alloc::vec![Hypothesis {
        speaker: spk.initial_state(),
        direction: dir.initial_state(),
        speaker_input: spk.initial_input(p).0,
        direction_input: dir.initial_input(p).0,
        steps: Vec::new(),
        score: 0.0,
    }];
    let max_steps = module.max_steps();
    for t in 0..max_steps {
        let outs: Vec<_> = alive
            .iter()
            .map(|hy| {
                (
                    spk.step(p, &ctx.speaker_keys, h, &hy.speaker, &hy.speaker_input),
                    dir.step(p, &ctx.direction_keys, h, &hy.direction, &hy.direction_input),
                )
            })
            .collect();
        let mut cands = Vec::new();
        for (i, (so, dout)) in outs.iter().enumerate() {
            for a in spk.vocab.emittable() {
                let la = libm::log(so.probs[a]);
                for b in dir.vocab.emittable() {
                    let lb = libm::log(dout.probs[b]);
                    cands.push(Candidate { score: alive[i].score + (la + lb), hyp: i, speaker: a, direction: b });
                }
            }
        }
        // Stable sort keeps (hypothesis, speaker, direction) order among ties.
        cands.sort_by(|x, y| y.score.partial_cmp(&x.score).unwrap_or(Ordering::Equal));
        cands.truncate(width);
        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let (so, dout) = &outs[c.hyp];
            let parent = &alive[c.hyp];
            let mut steps = parent.steps.clone();
            let ends = c.speaker == spk.vocab.eos() || c.direction == dir.vocab.eos();
            let mut step = InferenceStep {
                speaker_probs: so.probs.clone(),
                direction_probs: dout.probs.clone(),
                speaker_token: c.speaker,
                direction_token: c.direction,
                mask: None,
            };
            if ends {
                steps.push(step);
                finished.push(InferenceResult { steps, log_score: c.score, truncated: false });
                continue;
            }
            let s_in = spk.embed(p, &so.probs, c.speaker);
            let d_in = dir.embed(p, &dout.probs, c.direction);
            let values = s_in.iter().zip(&d_in).map(|(a, b)| a + b).collect();
            step.mask = Some(SourceMask { values, speaker_token: c.speaker, direction_token: c.direction });
            steps.push(step);
            if t + 1 == max_steps {
                finished.push(InferenceResult { steps, log_score: c.score, truncated: true });
            } else {
                next.push(Hypothesis {
                    speaker: so.state.clone(),
                    direction: dout.state.clone(),
                    speaker_input: s_in,
                    direction_input: d_in,
                    steps,
                    score: c.score,
                });
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    let mut best = 0;
    for (i, r) in finished.iter().enumerate() {
        if r.log_score > finished[best].log_score {
            best = i;
        }
    }
    Ok(finished.swap_remove(best))
}
