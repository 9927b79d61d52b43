//! Set inference: a bidirectional context encoder followed by two attentive
//! token decoders (speakers and directions) that run in lockstep. Each
//! non-final step yields one source mask, the sum of the two decoders' global
//! embeddings of that step's prediction.
//!
//! The embedding fed into step `t + 1` is computed from the distribution of
//! step `t`; that same vector is the mask of the `t`-th source. The step whose
//! prediction is end-of-sequence therefore emits no mask.

mod beam;
pub mod layers;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub use beam::beam_search;
pub use layers::{AdditiveAttention, GlobalEmbedding, OutputActivation, OutputLayer};

use layers::{AttentionCache, EmbeddingCache, OutputCache};

use crate::error::{domain, Result};
use crate::linalg::{softmax_backward, Mat};
use crate::nn::lstm::{Blstm, BlstmCache, LstmStack, LstmState, StepCache};
use crate::nn::Layout;

/// Token set of one decoder: `regular` label tokens followed by BOS and EOS.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    regular: usize,
}

impl Vocabulary {
    pub fn new(regular: usize) -> Self {
        Self { regular }
    }

    pub fn regular(&self) -> usize {
        self.regular
    }

    pub fn size(&self) -> usize {
        self.regular + 2
    }

    pub fn bos(&self) -> usize {
        self.regular
    }

    pub fn eos(&self) -> usize {
        self.regular + 1
    }

    pub fn is_label(&self, token: usize) -> bool {
        token < self.regular
    }

    /// Tokens a decoder may emit (everything but BOS).
    pub fn emittable(&self) -> impl Iterator<Item = usize> {
        let bos = self.bos();
        (0..self.size()).filter(move |t| *t != bos)
    }

    pub fn one_hot(&self, token: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.size()];
        v[token] = 1.0;
        v
    }

    pub fn with_eos(&self, labels: &[usize]) -> Vec<usize> {
        let mut v = labels.to_vec();
        v.push(self.eos());
        v
    }

    /// Most probable emittable token; ties go to the lower index.
    pub fn best(&self, y: &[f64]) -> usize {
        let mut best = if self.bos() == 0 { 1 } else { 0 };
        for t in self.emittable() {
            if y[t] > y[best] {
                best = t;
            }
        }
        best
    }
}

/// Recurrent state of a decoder stack.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<LstmState>,
}

impl DecoderState {
    pub fn top(&self) -> &[f64] {
        &self.layers.last().expect("at least one layer").h
    }
}

/// Frame-level context shared by both decoders.
#[derive(Clone, Debug)]
pub struct ContextStates {
    pub h: Mat,
}

/// Context plus each decoder's projected attention keys.
#[derive(Clone, Debug)]
pub struct PreparedContext {
    pub states: ContextStates,
    pub speaker_keys: Mat,
    pub direction_keys: Mat,
}

/// Shapes of the inference module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOptions {
    pub input: usize,
    pub context_hidden: usize,
    pub context_layers: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub attention_dim: usize,
    pub embedding_dim: usize,
    pub speakers: usize,
    pub directions: usize,
    pub max_steps: usize,
    pub activation: OutputActivation,
}

/// One attentive decoder with its own embeddings and recurrent stack.
#[derive(Clone, Debug)]
pub struct TokenDecoder {
    pub vocab: Vocabulary,
    pub attention: AdditiveAttention,
    pub embedding: GlobalEmbedding,
    pub lstm: LstmStack,
    pub output: OutputLayer,
}

#[derive(Clone, Debug)]
pub struct StepTrace {
    attn: AttentionCache,
    lstm: Vec<StepCache>,
    out: OutputCache,
}

/// Output of one decoder step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    pub alpha: Vec<f64>,
    pub context: Vec<f64>,
    pub probs: Vec<f64>,
}

impl TokenDecoder {
    fn new(layout: &mut Layout, name: &str, vocab: Vocabulary, o: &InferenceOptions) -> Self {
        let ctx = 2 * o.context_hidden;
        Self {
            vocab,
            attention: AdditiveAttention::new(layout, &format!("{name}.attention"), o.decoder_hidden, ctx, o.attention_dim),
            embedding: GlobalEmbedding::new(layout, &format!("{name}.embedding"), vocab.size(), o.embedding_dim),
            lstm: LstmStack::new(layout, &format!("{name}.lstm"), o.embedding_dim + ctx, o.decoder_hidden, o.decoder_layers),
            output: OutputLayer::new(layout, &format!("{name}.output"), o.decoder_hidden, ctx, o.decoder_hidden, vocab.size(), o.activation),
        }
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState { layers: self.lstm.zero_state() }
    }

    /// Embedding fed to the first step (the global embedding of BOS).
    pub fn initial_input(&self, p: &[f64]) -> (Vec<f64>, EmbeddingCache) {
        let bos = self.vocab.bos();
        self.embedding.forward(p, &self.vocab.one_hot(bos), bos)
    }

    /// Attention of the previous state's top layer over the context.
    pub fn attention_step(&self, p: &[f64], keys: &Mat, ctx: &ContextStates, prev: &DecoderState) -> (Vec<f64>, Vec<f64>) {
        let (alpha, c, _) = self.attention.step(p, keys, &ctx.h, prev.top());
        (alpha, c)
    }

    /// Global embedding of a probability vector, choosing its argmax token.
    pub fn global_embedding(&self, p: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.vocab.size() {
            return Err(domain!("distribution has {} entries, vocabulary {}", y.len(), self.vocab.size()));
        }
        let sum: f64 = y.iter().sum();
        if y.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(domain!("not a probability vector (sum {sum})"));
        }
        Ok(self.embedding.embed(p, y))
    }

    /// Global embedding of `y` with the given chosen token.
    pub fn embed(&self, p: &[f64], y: &[f64], chosen: usize) -> Vec<f64> {
        self.embedding.forward(p, y, chosen).0
    }

    /// Recurrent update from `[e; c]` and the output distribution.
    pub fn decoder_step(&self, p: &[f64], prev: &DecoderState, e: &[f64], c: &[f64]) -> (DecoderState, Vec<f64>) {
        let x = [e, c].concat();
        let (layers, _) = self.lstm.step(p, &x, &prev.layers);
        let state = DecoderState { layers };
        let (y, _) = self.output.forward(p, state.top(), c);
        (state, y)
    }

    /// Attention, recurrence and output for one step, with caches.
    fn step_traced(&self, p: &[f64], keys: &Mat, h: &Mat, prev: &DecoderState, e: &[f64]) -> (StepOutput, StepTrace) {
        let (alpha, c, attn) = self.attention.step(p, keys, h, prev.top());
        let x = [e, &c[..]].concat();
        let (layers, lstm) = self.lstm.step(p, &x, &prev.layers);
        let state = DecoderState { layers };
        let (probs, out) = self.output.forward(p, state.top(), &c);
        (StepOutput { state, alpha, context: c, probs }, StepTrace { attn, lstm, out })
    }

    /// One full step without caches.
    pub fn step(&self, p: &[f64], keys: &Mat, h: &Mat, prev: &DecoderState, e: &[f64]) -> StepOutput {
        self.step_traced(p, keys, h, prev, e).0
    }
}

/// A source mask together with the tokens it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceMask {
    pub values: Vec<f64>,
    pub speaker_token: usize,
    pub direction_token: usize,
}

/// One decoding step of both decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceStep {
    pub speaker_probs: Vec<f64>,
    pub direction_probs: Vec<f64>,
    pub speaker_token: usize,
    pub direction_token: usize,
    /// `None` on the terminating step.
    pub mask: Option<SourceMask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult {
    pub steps: Vec<InferenceStep>,
    /// Sum of both decoders' log-probabilities of the emitted tokens.
    pub log_score: f64,
    /// Decoding hit the step cap without an end-of-sequence token.
    pub truncated: bool,
}

impl InferenceResult {
    pub fn masks(&self) -> impl Iterator<Item = &SourceMask> {
        self.steps.iter().filter_map(|s| s.mask.as_ref())
    }

    pub fn num_sources(&self) -> usize {
        self.masks().count()
    }

    pub fn speaker_tokens(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.speaker_token).collect()
    }

    pub fn direction_tokens(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.direction_token).collect()
    }
}

/// How the decoders choose what to feed back.
#[derive(Clone, Copy, Debug)]
pub enum DecodeMode<'a> {
    /// Stop when either decoder's most probable token is EOS.
    Greedy,
    /// Run for the label count plus an EOS step; feed back the model's own
    /// distributions (as in training).
    TeacherForced { speakers: &'a [usize], directions: &'a [usize] },
    /// Feed the ground-truth tokens as one-hot distributions.
    Oracle { speakers: &'a [usize], directions: &'a [usize] },
}

/// Teacher-forced activations of one decoder.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    keys: Mat,
    /// Input embedding of every step (index 0 is BOS) with its cache.
    inputs: Vec<(Vec<f64>, EmbeddingCache)>,
    steps: Vec<StepTrace>,
    probs: Vec<Vec<f64>>,
}

impl DecoderTrace {
    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    /// Embedding computed from step `i`'s prediction (the `i`-th mask half).
    pub fn mask_half(&self, i: usize) -> &[f64] {
        &self.inputs[i + 1].0
    }

    pub fn chosen(&self, i: usize) -> usize {
        self.inputs[i + 1].1.chosen()
    }
}

/// Teacher-forced activations of the whole module.
#[derive(Clone, Debug)]
pub struct InferenceTrace {
    context: BlstmCache,
    h: Mat,
    pub speaker: DecoderTrace,
    pub direction: DecoderTrace,
    n_sources: usize,
}

impl InferenceTrace {
    pub fn num_sources(&self) -> usize {
        self.n_sources
    }

    /// Mask of source `i`.
    pub fn mask(&self, i: usize) -> Vec<f64> {
        self.speaker.mask_half(i).iter().zip(self.direction.mask_half(i)).map(|(a, b)| a + b).collect()
    }
}

/// The complete inference module.
#[derive(Clone, Debug)]
pub struct InferenceModule {
    pub context: Blstm,
    pub speaker: TokenDecoder,
    pub direction: TokenDecoder,
    opts: InferenceOptions,
}

impl InferenceModule {
    pub fn new(layout: &mut Layout, opts: InferenceOptions) -> Self {
        Self {
            context: Blstm::new(layout, "inference.context", opts.input, opts.context_hidden, opts.context_layers),
            speaker: TokenDecoder::new(layout, "inference.speaker", Vocabulary::new(opts.speakers), &opts),
            direction: TokenDecoder::new(layout, "inference.direction", Vocabulary::new(opts.directions), &opts),
            opts,
        }
    }

    pub fn options(&self) -> &InferenceOptions {
        &self.opts
    }

    pub fn max_steps(&self) -> usize {
        self.opts.max_steps
    }

    /// Bidirectional context of `F_o` (`T×2H`).
    pub fn encode_context(&self, p: &[f64], fo: &Mat) -> Result<ContextStates> {
        Ok(ContextStates { h: self.encode_context_traced(p, fo)?.0 })
    }

    fn encode_context_traced(&self, p: &[f64], fo: &Mat) -> Result<(Mat, BlstmCache)> {
        if fo.rows() == 0 {
            return Err(domain!("empty feature sequence"));
        }
        if fo.cols() != self.opts.input {
            return Err(domain!("feature width {} but module expects {}", fo.cols(), self.opts.input));
        }
        Ok(self.context.forward(p, fo))
    }

    pub fn prepare(&self, p: &[f64], fo: &Mat) -> Result<PreparedContext> {
        let states = self.encode_context(p, fo)?;
        Ok(self.prepare_states(p, states))
    }

    pub fn prepare_states(&self, p: &[f64], states: ContextStates) -> PreparedContext {
        let speaker_keys = self.speaker.attention.keys(p, &states.h);
        let direction_keys = self.direction.attention.keys(p, &states.h);
        PreparedContext { states, speaker_keys, direction_keys }
    }

    fn check_labels(&self, speakers: &[usize], directions: &[usize]) -> Result<()> {
        if speakers.len() != directions.len() {
            return Err(domain!("{} speaker labels but {} direction labels", speakers.len(), directions.len()));
        }
        if speakers.len() + 1 > self.opts.max_steps {
            return Err(domain!("{} labels exceed the {}-step cap", speakers.len(), self.opts.max_steps));
        }
        if let Some(s) = speakers.iter().find(|s| !self.speaker.vocab.is_label(**s)) {
            return Err(domain!("speaker label {s} outside the vocabulary"));
        }
        if let Some(d) = directions.iter().find(|d| !self.direction.vocab.is_label(**d)) {
            return Err(domain!("direction label {d} outside the vocabulary"));
        }
        Ok(())
    }

    /// Decodes the sources of one feature sequence.
    pub fn infer(&self, p: &[f64], fo: &Mat, mode: DecodeMode<'_>) -> Result<InferenceResult> {
        let ctx = self.prepare(p, fo)?;
        self.infer_prepared(p, &ctx, mode)
    }

    pub fn infer_prepared(&self, p: &[f64], ctx: &PreparedContext, mode: DecodeMode<'_>) -> Result<InferenceResult> {
        let forced = match mode {
            DecodeMode::Greedy => None,
            DecodeMode::TeacherForced { speakers, directions } | DecodeMode::Oracle { speakers, directions } => {
                self.check_labels(speakers, directions)?;
                Some((speakers, directions))
            }
        };
        let oracle = matches!(mode, DecodeMode::Oracle { .. });
        let (spk, dir) = (&self.speaker, &self.direction);
        let h = &ctx.states.h;
        let mut s_state = spk.initial_state();
        let mut d_state = dir.initial_state();
        let mut s_in = spk.initial_input(p).0;
        let mut d_in = dir.initial_input(p).0;
        let mut steps = Vec::new();
        let mut log_score = 0.0;
        let mut truncated = false;
        for t in 0..self.opts.max_steps {
            let so = spk.step(p, &ctx.speaker_keys, h, &s_state, &s_in);
            let dout = dir.step(p, &ctx.direction_keys, h, &d_state, &d_in);
            let (s_tok, d_tok, last) = match forced {
                None => {
                    let (a, b) = (spk.vocab.best(&so.probs), dir.vocab.best(&dout.probs));
                    (a, b, a == spk.vocab.eos() || b == dir.vocab.eos())
                }
                Some((ls, ld)) if t < ls.len() => {
                    if oracle {
                        (ls[t], ld[t], false)
                    } else {
                        (spk.vocab.best(&so.probs), dir.vocab.best(&dout.probs), false)
                    }
                }
                Some(_) => (spk.vocab.eos(), dir.vocab.eos(), true),
            };
            let (score_s, score_d) = match forced {
                Some((ls, ld)) if t < ls.len() => (ls[t], ld[t]),
                _ => (s_tok, d_tok),
            };
            log_score += libm::log(so.probs[score_s]) + libm::log(dout.probs[score_d]);
            let mask = if last {
                None
            } else {
                let (ys, yd) = if oracle {
                    (spk.vocab.one_hot(s_tok), dir.vocab.one_hot(d_tok))
                } else {
                    (so.probs.clone(), dout.probs.clone())
                };
                s_in = spk.embed(p, &ys, s_tok);
                d_in = dir.embed(p, &yd, d_tok);
                let values = s_in.iter().zip(&d_in).map(|(a, b)| a + b).collect();
                Some(SourceMask { values, speaker_token: s_tok, direction_token: d_tok })
            };
            steps.push(InferenceStep {
                speaker_probs: so.probs,
                direction_probs: dout.probs,
                speaker_token: s_tok,
                direction_token: d_tok,
                mask,
            });
            s_state = so.state;
            d_state = dout.state;
            if last {
                break;
            }
            if t + 1 == self.opts.max_steps {
                truncated = true;
            }
        }
        Ok(InferenceResult { steps, log_score, truncated })
    }

    /// Joint beam search; see [`beam_search`].
    pub fn beam_search(&self, p: &[f64], fo: &Mat, width: usize) -> Result<InferenceResult> {
        let ctx = self.prepare(p, fo)?;
        beam_search(self, p, &ctx, width)
    }

    /// Teacher-forced forward pass that keeps every activation for
    /// [`InferenceModule::backward`].
    pub fn forward_train(&self, p: &[f64], fo: &Mat, speakers: &[usize], directions: &[usize]) -> Result<InferenceTrace> {
        self.check_labels(speakers, directions)?;
        let (h, context) = self.encode_context_traced(p, fo)?;
        let n = speakers.len();
        let speaker = self.decoder_forward_train(p, &self.speaker, &h, n);
        let direction = self.decoder_forward_train(p, &self.direction, &h, n);
        Ok(InferenceTrace { context, h, speaker, direction, n_sources: n })
    }

    fn decoder_forward_train(&self, p: &[f64], dec: &TokenDecoder, h: &Mat, n: usize) -> DecoderTrace {
        let keys = dec.attention.keys(p, h);
        let mut inputs = vec![dec.initial_input(p)];
        let mut steps = Vec::with_capacity(n + 1);
        let mut probs = Vec::with_capacity(n + 1);
        let mut state = dec.initial_state();
        for t in 0..=n {
            let (out, trace) = dec.step_traced(p, &keys, h, &state, &inputs[t].0);
            if t < n {
                let chosen = dec.vocab.best(&out.probs);
                inputs.push(dec.embedding.forward(p, &out.probs, chosen));
            }
            state = out.state;
            probs.push(out.probs);
            steps.push(trace);
        }
        DecoderTrace { keys, inputs, steps, probs }
    }

    /// Backpropagates mask gradients and cross-entropy through both decoders
    /// and the context encoder. `ce_scale` multiplies `(y − onehot)` at every
    /// step. Returns the gradient with respect to `F_o`.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        trace: &InferenceTrace,
        speakers: &[usize],
        directions: &[usize],
        dmasks: &[Vec<f64>],
        ce_scale: f64,
    ) -> Mat {
        let mut dh = Mat::zeros(trace.h.rows(), trace.h.cols());
        let spk_targets = self.speaker.vocab.with_eos(speakers);
        let dir_targets = self.direction.vocab.with_eos(directions);
        self.decoder_backward(p, g, &self.speaker, &trace.h, &trace.speaker, &spk_targets, dmasks, ce_scale, &mut dh);
        self.decoder_backward(p, g, &self.direction, &trace.h, &trace.direction, &dir_targets, dmasks, ce_scale, &mut dh);
        self.context.backward(p, g, &trace.context, &dh)
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        dec: &TokenDecoder,
        h: &Mat,
        trace: &DecoderTrace,
        targets: &[usize],
        dmasks: &[Vec<f64>],
        ce_scale: f64,
        dh: &mut Mat,
    ) {
        let n = targets.len() - 1;
        let dim = dec.embedding.dim();
        let mut dkeys = Mat::zeros(trace.keys.rows(), trace.keys.cols());
        let mut dstate: Vec<(Vec<f64>, Vec<f64>)> =
            dec.lstm.zero_state().into_iter().map(|s| (s.h, s.c)).collect();
        let mut de_next = vec![0.0; dim];
        for t in (0..=n).rev() {
            let y = &trace.probs[t];
            let mut dlogits = if t < n {
                let mut de = de_next.clone();
                if let Some(dm) = dmasks.get(t) {
                    for (a, b) in de.iter_mut().zip(dm) {
                        *a += b;
                    }
                }
                let dy = dec.embedding.backward(p, g, &trace.inputs[t + 1].1, &de);
                softmax_backward(y, &dy)
            } else {
                vec![0.0; y.len()]
            };
            for (k, (d, yk)) in dlogits.iter_mut().zip(y).enumerate() {
                let target = if k == targets[t] { 1.0 } else { 0.0 };
                *d += ce_scale * (yk - target);
            }
            let step = &trace.steps[t];
            let (ds_top, mut dc) = dec.output.backward(p, g, &step.out, &dlogits);
            let top = dstate.len() - 1;
            for (a, b) in dstate[top].0.iter_mut().zip(&ds_top) {
                *a += b;
            }
            let (dx, mut dprev) = dec.lstm.step_backward(p, g, &step.lstm, &dstate);
            for (a, b) in dc.iter_mut().zip(&dx[dim..]) {
                *a += b;
            }
            let dquery = dec.attention.step_backward(p, g, h, &step.attn, &dc, &mut dkeys, dh);
            for (a, b) in dprev[top].0.iter_mut().zip(&dquery) {
                *a += b;
            }
            dstate = dprev;
            de_next = dx[..dim].to_vec();
        }
        dec.embedding.backward(p, g, &trace.inputs[0].1, &de_next);
        let dh_keys = dec.attention.keys_backward(p, g, h, &dkeys);
        dh.add_assign(&dh_keys);
    }
}
