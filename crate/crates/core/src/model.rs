//! The full network: frontend, set inference and mask-driven separation,
//! with a joint loss/gradient for one training example.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datasim::N_DIRECTIONS;
use crate::error::{domain, Result};
use crate::frontend::{Frontend, FrontendOptions};
use crate::inference::{
    beam_search, DecodeMode, InferenceModule, InferenceOptions, InferenceResult, OutputActivation,
};
use crate::linalg::Mat;
use crate::nn::Layout;
use crate::objectives::{total_loss_with_grad, LossBreakdown, DEFAULT_LAMBDA};
use crate::separation::{Separator, SeparatorOptions};

/// Every architectural hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_channels: usize,
    pub encoder_kernel: usize,
    pub encoder_stride: usize,
    pub encoder_relu: bool,
    pub iac: bool,
    pub iac_scaled: bool,
    pub context_hidden: usize,
    pub context_layers: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub attention_dim: usize,
    /// Width of token embeddings, source masks and the separator bottleneck.
    pub embedding_dim: usize,
    pub output_activation: OutputActivation,
    pub n_speakers: usize,
    pub n_directions: usize,
    pub max_steps: usize,
    pub tcn_hidden: usize,
    pub tcn_blocks: usize,
    pub tcn_layers_per_block: usize,
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: 256,
            encoder_kernel: 40,
            encoder_stride: 20,
            encoder_relu: false,
            iac: true,
            iac_scaled: false,
            context_hidden: 256,
            context_layers: 3,
            decoder_hidden: 512,
            decoder_layers: 3,
            attention_dim: 512,
            embedding_dim: 256,
            output_activation: OutputActivation::Tanh,
            n_speakers: 24,
            n_directions: N_DIRECTIONS,
            max_steps: 5,
            tcn_hidden: 512,
            tcn_blocks: 4,
            tcn_layers_per_block: 8,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder_channels", self.encoder_channels),
            ("encoder_kernel", self.encoder_kernel),
            ("encoder_stride", self.encoder_stride),
            ("context_hidden", self.context_hidden),
            ("context_layers", self.context_layers),
            ("decoder_hidden", self.decoder_hidden),
            ("decoder_layers", self.decoder_layers),
            ("attention_dim", self.attention_dim),
            ("embedding_dim", self.embedding_dim),
            ("n_speakers", self.n_speakers),
            ("n_directions", self.n_directions),
            ("tcn_hidden", self.tcn_hidden),
            ("tcn_blocks", self.tcn_blocks),
            ("tcn_layers_per_block", self.tcn_layers_per_block),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(domain!("{name} must be positive"));
        }
        if self.max_steps < 2 {
            return Err(domain!("max_steps must allow at least one source and EOS"));
        }
        if !(self.lambda >= 0.0) {
            return Err(domain!("lambda must be non-negative"));
        }
        Ok(())
    }

    fn frontend(&self) -> FrontendOptions {
        FrontendOptions {
            channels: self.encoder_channels,
            kernel: self.encoder_kernel,
            stride: self.encoder_stride,
            relu: self.encoder_relu,
            iac: self.iac,
            iac_scaled: self.iac_scaled,
        }
    }

    fn inference(&self) -> InferenceOptions {
        InferenceOptions {
            input: 3 * self.encoder_channels,
            context_hidden: self.context_hidden,
            context_layers: self.context_layers,
            decoder_hidden: self.decoder_hidden,
            decoder_layers: self.decoder_layers,
            attention_dim: self.attention_dim,
            embedding_dim: self.embedding_dim,
            speakers: self.n_speakers,
            directions: self.n_directions,
            max_steps: self.max_steps,
            activation: self.output_activation,
        }
    }

    fn separator(&self) -> SeparatorOptions {
        SeparatorOptions {
            input: 2 * self.encoder_channels,
            channels: self.embedding_dim,
            hidden: self.tcn_hidden,
            blocks: self.tcn_blocks,
            layers_per_block: self.tcn_layers_per_block,
            kernel: self.encoder_kernel,
            stride: self.encoder_stride,
        }
    }
}

/// One labelled training example. Labels are in target order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub mixture: [Vec<f64>; 2],
    pub targets: Vec<Vec<f64>>,
    pub speakers: Vec<usize>,
    pub directions: Vec<usize>,
}

/// How sources are decoded at test time.
#[derive(Clone, Copy, Debug)]
pub enum SeparationMode<'a> {
    Beam(usize),
    /// Ground-truth tokens as one-hot inputs (the mask upper bound).
    Oracle { speakers: &'a [usize], directions: &'a [usize] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparatedSource {
    pub waveform: Vec<f64>,
    pub speaker_token: usize,
    pub direction_token: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Separation {
    pub sources: Vec<SeparatedSource>,
    pub inference: InferenceResult,
}

impl Separation {
    /// True when inference produced no mask at all.
    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    layout: Layout,
    pub frontend: Frontend,
    pub inference: InferenceModule,
    pub separator: Separator,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = Layout::new();
        let frontend = Frontend::new(&mut layout, cfg.frontend());
        let inference = InferenceModule::new(&mut layout, cfg.inference());
        let separator = Separator::new(&mut layout, cfg.separator());
        Ok(Self { cfg, layout, frontend, inference, separator })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        self.layout.initialize(seed)
    }

    /// Samples produced for an input of `len` samples (the frame grid).
    pub fn output_len(&self, len: usize) -> Result<usize> {
        Ok(self.separator.decoder.output_len(self.frontend.frames(len)?))
    }

    fn check_params(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.layout.len() {
            return Err(domain!("{} parameters given, model has {}", p.len(), self.layout.len()));
        }
        Ok(())
    }

    /// Loss of one example; parameter gradients are added to `g`.
    pub fn loss_and_grad(&self, p: &[f64], g: &mut [f64], ex: &TrainExample) -> Result<LossBreakdown> {
        self.check_params(p)?;
        let n = ex.targets.len();
        if n == 0 || ex.speakers.len() != n || ex.directions.len() != n {
            return Err(domain!("{n} targets with {} speaker and {} direction labels", ex.speakers.len(), ex.directions.len()));
        }
        let (front, fcache) = self.frontend.forward(p, [&ex.mixture[0], &ex.mixture[1]])?;
        let trace = self.inference.forward_train(p, &front.inference_features, &ex.speakers, &ex.directions)?;
        let masks: Vec<Vec<f64>> = (0..n).map(|i| trace.mask(i)).collect();
        let (shared, scache) = self.separator.shared(p, &front.features)?;
        let waves = masks.iter().map(|m| self.separator.decode(p, &shared, m)).collect::<Result<Vec<_>>>()?;
        let out_len = waves[0].len();
        let targets = ex
            .targets
            .iter()
            .map(|t| {
                t.get(..out_len).map(<[f64]>::to_vec).ok_or_else(|| domain!("target shorter than the mixture"))
            })
            .collect::<Result<Vec<_>>>()?;
        let spk = self.inference.speaker.vocab.with_eos(&ex.speakers);
        let dir = self.inference.direction.vocab.with_eos(&ex.directions);
        let (loss, dwaves) = total_loss_with_grad(
            &waves,
            &targets,
            trace.speaker.probs(),
            trace.direction.probs(),
            &spk,
            &dir,
            self.cfg.lambda,
        )?;
        let (dfeat, dmasks) = self.separator.backward(p, g, &shared, &scache, &masks, &dwaves);
        let ce_scale = self.cfg.lambda / (n + 1) as f64;
        let dinf = self.inference.backward(p, g, &trace, &ex.speakers, &ex.directions, &dmasks, ce_scale);
        self.frontend.backward(g, &fcache, &dfeat, &dinf);
        Ok(loss)
    }

    /// Loss of one example without gradients.
    pub fn loss(&self, p: &[f64], ex: &TrainExample) -> Result<LossBreakdown> {
        let mut g = alloc::vec![0.0; p.len()];
        self.loss_and_grad(p, &mut g, ex)
    }

    /// Frontend features of a stereo input (`F`, `F_o`).
    pub fn features(&self, p: &[f64], mixture: [&[f64]; 2]) -> Result<(Mat, Mat)> {
        let (out, _) = self.frontend.forward(p, mixture)?;
        Ok((out.features, out.inference_features))
    }

    /// Separates a stereo mixture into as many sources as inference finds.
    pub fn separate(&self, p: &[f64], mixture: [&[f64]; 2], mode: SeparationMode<'_>) -> Result<Separation> {
        self.check_params(p)?;
        let (f, fo) = self.features(p, mixture)?;
        let ctx = self.inference.prepare(p, &fo)?;
        let inference = match mode {
            SeparationMode::Beam(width) => beam_search(&self.inference, p, &ctx, width)?,
            SeparationMode::Oracle { speakers, directions } => {
                self.inference.infer_prepared(p, &ctx, DecodeMode::Oracle { speakers, directions })?
            }
        };
        let masks: Vec<_> = inference.masks().cloned().collect();
        if masks.is_empty() {
            log::warn!("inference produced no source masks");
            return Ok(Separation { sources: Vec::new(), inference });
        }
        let (shared, _) = self.separator.shared(p, &f)?;
        let sources = masks
            .into_iter()
            .map(|m| {
                Ok(SeparatedSource {
                    waveform: self.separator.decode(p, &shared, &m.values)?,
                    speaker_token: m.speaker_token,
                    direction_token: m.direction_token,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Separation { sources, inference })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{noise, numeric_gradient, relative_error};
    use alloc::vec;

    fn micro() -> ModelConfig {
        ModelConfig {
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
        }
    }

    fn example(len: usize, seed: u64) -> TrainExample {
        let s1 = noise(len, seed);
        let s2 = noise(len, seed + 1);
        let m1: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + b).collect();
        let m2: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| 0.8 * a + 1.1 * b).collect();
        TrainExample { mixture: [m1, m2], targets: vec![s1, s2], speakers: vec![2, 0], directions: vec![1, 3] }
    }

    #[test]
    fn default_config_matches_published_sizes() {
        let c = ModelConfig::default();
        assert_eq!((c.encoder_channels, c.encoder_kernel, c.encoder_stride), (256, 40, 20));
        assert_eq!((c.context_hidden, c.context_layers, c.decoder_hidden, c.decoder_layers), (256, 3, 512, 3));
        assert_eq!((c.embedding_dim, c.tcn_blocks, c.tcn_layers_per_block, c.lambda), (256, 4, 8, 5.0));
        let m = Model::new(c).unwrap();
        assert_eq!(m.output_len(8000).unwrap(), 8000);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let model = Model::new(micro()).unwrap();
        let mut p = model.init_params(1);
        let jitter = noise(p.len(), 2);
        p.iter_mut().zip(jitter).for_each(|(v, n)| *v += 0.05 * n);
        let ex = example(40, 3);
        let mut g = vec![0.0; p.len()];
        let loss = model.loss_and_grad(&p, &mut g, &ex).unwrap();
        assert!(loss.is_finite());
        assert!(loss.sisnr_ss.abs() < 30.0, "clamp must be inactive for the check");
        let num = numeric_gradient(|q| model.loss(q, &ex).unwrap().total, &p, 1e-6);
        let err = relative_error(&num, &g);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn separation_count_and_length_contracts() {
        let model = Model::new(micro()).unwrap();
        let p = model.init_params(4);
        let ex = example(41, 5);
        let out_len = model.output_len(41).unwrap();
        assert_eq!(out_len, 40);
        let sep = model.separate(&p, [&ex.mixture[0], &ex.mixture[1]], SeparationMode::Beam(3)).unwrap();
        assert_eq!(sep.sources.len(), sep.inference.num_sources());
        assert!(sep.sources.iter().all(|s| s.waveform.len() == out_len));
        let oracle = model
            .separate(&p, [&ex.mixture[0], &ex.mixture[1]], SeparationMode::Oracle { speakers: &[2, 0], directions: &[1, 3] })
            .unwrap();
        assert_eq!(oracle.sources.len(), 2);
        assert_eq!((oracle.sources[0].speaker_token, oracle.sources[1].direction_token), (2, 3));
        let short = [0.0; 7];
        assert!(model.separate(&p, [&short, &short], SeparationMode::Beam(1)).is_err());
    }

    #[test]
    fn swapping_masks_permutes_outputs() {
        let model = Model::new(micro()).unwrap();
        let p = model.init_params(6);
        let ex = example(48, 7);
        let (f, _) = model.features(&p, [&ex.mixture[0], &ex.mixture[1]]).unwrap();
        let (shared, _) = model.separator.shared(&p, &f).unwrap();
        let (a, b) = (noise(4, 8), noise(4, 9));
        let wa = model.separator.decode(&p, &shared, &a).unwrap();
        let wb = model.separator.decode(&p, &shared, &b).unwrap();
        let again_b = model.separator.decode(&p, &shared, &b).unwrap();
        let again_a = model.separator.decode(&p, &shared, &a).unwrap();
        assert_eq!((wa, wb), (again_a, again_b));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Model::new(ModelConfig { max_steps: 1, ..micro() }).is_err());
        assert!(Model::new(ModelConfig { tcn_blocks: 0, ..micro() }).is_err());
        let model = Model::new(micro()).unwrap();
        let p = model.init_params(1);
        let mut ex = example(40, 1);
        ex.directions.pop();
        assert!(model.loss(&p, &ex).is_err());
        assert!(model.loss(&p[1..], &example(40, 1)).is_err());
    }
}
