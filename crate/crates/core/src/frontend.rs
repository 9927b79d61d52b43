//! Learned per-channel encoders and the inter-channel attention correlation.
//!
//! Each microphone channel is framed by its own strided 1-D convolution. The
//! correlation feature attends from every reference-channel frame over all
//! frames of the second channel and returns the attention-weighted second
//! channel features, aligned to reference frames.

use alloc::format;

use crate::error::{domain, shape, Result};
use crate::linalg::{gemm, matmul, matmul_nt, matmul_tn, softmax_in_place, Mat};
use crate::nn::{fan_in_bound, Init, Layout, Param};

/// Number of frames a strided convolution produces for `len` samples.
pub fn frame_count(len: usize, kernel: usize, stride: usize) -> Result<usize> {
    if len < kernel {
        return Err(domain!("input of {len} samples is shorter than one {kernel}-sample frame"));
    }
    Ok((len - kernel) / stride + 1)
}

/// Strided 1-D convolution from one waveform channel to `channels` features.
#[derive(Clone, Debug)]
pub struct ChannelEncoder {
    weight: Param,
    bias: Param,
    kernel: usize,
    stride: usize,
    relu: bool,
}

#[derive(Clone, Debug)]
pub struct EncoderCache {
    patches: Mat,
    out: Mat,
}

impl ChannelEncoder {
    pub fn new(layout: &mut Layout, name: &str, channels: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        Self {
            weight: layout.add(format!("{name}.weight"), channels, kernel, Init::Uniform(fan_in_bound(kernel))),
            bias: layout.add(format!("{name}.bias"), 1, channels, Init::Zeros),
            kernel,
            stride,
            relu,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.rows()
    }

    fn patches(&self, x: &[f64]) -> Result<Mat> {
        let t_len = frame_count(x.len(), self.kernel, self.stride)?;
        let mut p = Mat::zeros(t_len, self.kernel);
        for t in 0..t_len {
            p.row_mut(t).copy_from_slice(&x[t * self.stride..t * self.stride + self.kernel]);
        }
        Ok(p)
    }

    /// `T×channels` features of one waveform channel.
    pub fn forward(&self, p: &[f64], x: &[f64]) -> Result<(Mat, EncoderCache)> {
        let patches = self.patches(x)?;
        let (t_len, n) = (patches.rows(), self.channels());
        let mut out = Mat::zeros(t_len, n);
        for t in 0..t_len {
            out.row_mut(t).copy_from_slice(self.bias.of(p));
        }
        gemm(t_len, self.kernel, n, patches.as_slice(), false, self.weight.of(p), true, 1.0, out.as_mut_slice());
        if self.relu {
            out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok((out.clone(), EncoderCache { patches, out }))
    }

    pub fn backward(&self, g: &mut [f64], cache: &EncoderCache, dout: &Mat) {
        let mut d = dout.clone();
        if self.relu {
            for (dv, o) in d.as_mut_slice().iter_mut().zip(cache.out.as_slice()) {
                if *o <= 0.0 {
                    *dv = 0.0;
                }
            }
        }
        let (t_len, n) = (d.rows(), d.cols());
        gemm(n, t_len, self.kernel, d.as_slice(), true, cache.patches.as_slice(), false, 1.0, self.weight.of_mut(g));
        let gb = self.bias.of_mut(g);
        for t in 0..t_len {
            for (b, v) in gb.iter_mut().zip(d.row(t)) {
                *b += v;
            }
        }
    }
}

/// Result of the inter-channel attention: the `T×T` row-stochastic attention
/// and the `T×C` feature `A·E2`.
#[derive(Clone, Debug)]
pub struct InterChannelAttention {
    pub attention: Mat,
    pub feature: Mat,
}

/// `A = softmax_rows(E1·E2ᵀ · scale)`, feature `= A·E2`. With `scaled` the
/// logits are divided by `sqrt(C)`.
pub fn inter_channel_attention(e1: &Mat, e2: &Mat, scaled: bool) -> Result<InterChannelAttention> {
    if e1.rows() != e2.rows() || e1.cols() != e2.cols() {
        return Err(shape!("encoder outputs {}x{} and {}x{} differ", e1.rows(), e1.cols(), e2.rows(), e2.cols()));
    }
    let mut attention = matmul_nt(e1, e2);
    let scale = iac_scale(e1.cols(), scaled);
    for r in 0..attention.rows() {
        let row = attention.row_mut(r);
        if scale != 1.0 {
            row.iter_mut().for_each(|v| *v *= scale);
        }
        softmax_in_place(row);
    }
    let feature = matmul(&attention, e2);
    Ok(InterChannelAttention { attention, feature })
}

fn iac_scale(channels: usize, scaled: bool) -> f64 {
    if scaled {
        1.0 / libm::sqrt(channels as f64)
    } else {
        1.0
    }
}

/// Backward of [`inter_channel_attention`]; returns `(dE1, dE2)`.
pub fn inter_channel_attention_backward(e1: &Mat, e2: &Mat, iac: &InterChannelAttention, dfeat: &Mat, scaled: bool) -> (Mat, Mat) {
    let a = &iac.attention;
    // dA = dF·E2ᵀ; dE2 = Aᵀ·dF
    let da = matmul_nt(dfeat, e2);
    let mut de2 = matmul_tn(a, dfeat);
    let scale = iac_scale(e1.cols(), scaled);
    let mut ds = Mat::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let (ar, dar) = (a.row(r), da.row(r));
        let s: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
        for (o, (x, y)) in ds.row_mut(r).iter_mut().zip(ar.iter().zip(dar)) {
            *o = x * (y - s) * scale;
        }
    }
    let de1 = matmul(&ds, e2);
    de2.add_assign(&matmul_tn(&ds, e1));
    (de1, de2)
}

/// `F = [E1, E2]` and `F_o = [IAC, E1, E2]` along the feature axis.
pub fn assemble_features(e1: &Mat, e2: &Mat, iac: &Mat) -> Result<(Mat, Mat)> {
    if e1.rows() != e2.rows() || e1.rows() != iac.rows() {
        return Err(shape!("frame counts {}, {}, {} differ", e1.rows(), e2.rows(), iac.rows()));
    }
    Ok((Mat::hcat(&[e1, e2])?, Mat::hcat(&[iac, e1, e2])?))
}

/// Configuration switches of the frontend.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrontendOptions {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
    /// When false the correlation feature is replaced by zeros.
    pub iac: bool,
    pub iac_scaled: bool,
}

/// Both channel encoders plus the correlation feature.
#[derive(Clone, Debug)]
pub struct Frontend {
    pub encoders: [ChannelEncoder; 2],
    opts: FrontendOptions,
}

#[derive(Clone, Debug)]
pub struct FrontendOutput {
    /// `T×2C`, fed to separation.
    pub features: Mat,
    /// `T×3C`, fed to inference.
    pub inference_features: Mat,
}

#[derive(Clone, Debug)]
pub struct FrontendCache {
    enc: [EncoderCache; 2],
    e: [Mat; 2],
    iac: Option<InterChannelAttention>,
}

impl Frontend {
    pub fn new(layout: &mut Layout, opts: FrontendOptions) -> Self {
        let enc = |layout: &mut Layout, i: usize| {
            ChannelEncoder::new(layout, &format!("frontend.encoder{i}"), opts.channels, opts.kernel, opts.stride, opts.relu)
        };
        let e1 = enc(layout, 1);
        let e2 = enc(layout, 2);
        Self { encoders: [e1, e2], opts }
    }

    pub fn options(&self) -> &FrontendOptions {
        &self.opts
    }

    pub fn forward(&self, p: &[f64], channels: [&[f64]; 2]) -> Result<(FrontendOutput, FrontendCache)> {
        if channels[0].len() != channels[1].len() {
            return Err(shape!("channel lengths {} and {} differ", channels[0].len(), channels[1].len()));
        }
        let (e1, c1) = self.encoders[0].forward(p, channels[0])?;
        let (e2, c2) = self.encoders[1].forward(p, channels[1])?;
        let iac = if self.opts.iac { Some(inter_channel_attention(&e1, &e2, self.opts.iac_scaled)?) } else { None };
        let zeros;
        let iac_feat = match &iac {
            Some(i) => &i.feature,
            None => {
                zeros = Mat::zeros(e1.rows(), e1.cols());
                &zeros
            }
        };
        let (features, inference_features) = assemble_features(&e1, &e2, iac_feat)?;
        Ok((FrontendOutput { features, inference_features }, FrontendCache { enc: [c1, c2], e: [e1, e2], iac }))
    }

    /// Accumulates parameter gradients given gradients of `F` and `F_o`.
    pub fn backward(&self, g: &mut [f64], cache: &FrontendCache, dfeat: &Mat, dinf: &Mat) {
        let c = self.opts.channels;
        let mut de1 = dfeat.columns(0, c);
        let mut de2 = dfeat.columns(c, c);
        de1.add_assign(&dinf.columns(c, c));
        de2.add_assign(&dinf.columns(2 * c, c));
        if let Some(iac) = &cache.iac {
            let (a, b) = inter_channel_attention_backward(&cache.e[0], &cache.e[1], iac, &dinf.columns(0, c), self.opts.iac_scaled);
            de1.add_assign(&a);
            de2.add_assign(&b);
        }
        self.encoders[0].backward(g, &cache.enc[0], &de1);
        self.encoders[1].backward(g, &cache.enc[1], &de2);
    }

    /// Frame count for an input of `len` samples.
    pub fn frames(&self, len: usize) -> Result<usize> {
        frame_count(len, self.opts.kernel, self.opts.stride)
    }

    pub fn encoder_outputs(cache: &FrontendCache) -> (&Mat, &Mat) {
        (&cache.e[0], &cache.e[1])
    }
}

/// Column slice helper used by tests and callers that split `F_o`.
pub fn split_inference_features(fo: &Mat, channels: usize) -> [Mat; 3] {
    [fo.columns(0, channels), fo.columns(channels, channels), fo.columns(2 * channels, channels)]
}
