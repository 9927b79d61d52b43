//! Mask-driven separation: a bottleneck, a temporal convolutional network that
//! gates the features, per-source masking and a transposed-convolution decoder.
//!
//! The bottleneck output `F̃` and the gate `TCN_o` are computed once per
//! mixture; each source then costs only an element-wise product and one decode.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape, Result};
use crate::linalg::{gemm, sigmoid, Mat};
use crate::nn::{fan_in_bound, Init, Layout, Param};

const NORM_EPS: f64 = 1e-8;

/// Pointwise (1×1) convolution over frames, `T×in → T×out`.
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    weight: Param,
    bias: Param,
}

impl Conv1x1 {
    pub fn new(layout: &mut Layout, name: &str, input: usize, output: usize) -> Self {
        Self {
            weight: layout.add(format!("{name}.weight"), output, input, Init::Uniform(fan_in_bound(input))),
            bias: layout.add(format!("{name}.bias"), 1, output, Init::Zeros),
        }
    }

    pub fn input_size(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn bias(&self) -> Param {
        self.bias
    }

    pub fn forward(&self, p: &[f64], x: &Mat) -> Mat {
        let (t, o) = (x.rows(), self.output_size());
        let mut y = Mat::zeros(t, o);
        for r in 0..t {
            y.row_mut(r).copy_from_slice(self.bias.of(p));
        }
        gemm(t, x.cols(), o, x.as_slice(), false, self.weight.of(p), true, 1.0, y.as_mut_slice());
        y
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &Mat, dy: &Mat) -> Mat {
        let (t, o, i) = (x.rows(), self.output_size(), self.input_size());
        gemm(o, t, i, dy.as_slice(), true, x.as_slice(), false, 1.0, self.weight.of_mut(g));
        let gb = self.bias.of_mut(g);
        for r in 0..t {
            for (b, d) in gb.iter_mut().zip(dy.row(r)) {
                *b += d;
            }
        }
        let mut dx = Mat::zeros(t, i);
        gemm(t, o, i, dy.as_slice(), false, self.weight.of(p), false, 0.0, dx.as_mut_slice());
        dx
    }
}

/// Parametric ReLU with one shared slope.
#[derive(Clone, Debug)]
pub struct Prelu {
    slope: Param,
}

impl Prelu {
    pub fn new(layout: &mut Layout, name: &str) -> Self {
        Self { slope: layout.add(format!("{name}.slope"), 1, 1, Init::Const(0.25)) }
    }

    pub fn forward(&self, p: &[f64], x: &Mat) -> Mat {
        let a = self.slope.of(p)[0];
        let mut y = x.clone();
        y.as_mut_slice().iter_mut().for_each(|v| {
            if *v <= 0.0 {
                *v *= a;
            }
        });
        y
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &Mat, dy: &Mat) -> Mat {
        let a = self.slope.of(p)[0];
        let mut da = 0.0;
        let mut dx = dy.clone();
        for (d, v) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
            if *v <= 0.0 {
                da += *d * v;
                *d *= a;
            }
        }
        self.slope.of_mut(g)[0] += da;
        dx
    }
}

/// Per-frame normalisation over channels with per-channel gain and bias.
/// Keeping statistics frame-local keeps the network's receptive field finite.
#[derive(Clone, Debug)]
pub struct FrameNorm {
    gain: Param,
    bias: Param,
}

#[derive(Clone, Debug)]
pub struct NormCache {
    normalized: Mat,
    inv_std: Vec<f64>,
}

impl FrameNorm {
    pub fn new(layout: &mut Layout, name: &str, channels: usize) -> Self {
        Self {
            gain: layout.add(format!("{name}.gain"), 1, channels, Init::Const(1.0)),
            bias: layout.add(format!("{name}.bias"), 1, channels, Init::Zeros),
        }
    }

    pub fn forward(&self, p: &[f64], x: &Mat) -> (Mat, NormCache) {
        let n = x.cols() as f64;
        let (gain, bias) = (self.gain.of(p), self.bias.of(p));
        let mut normalized = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = normalized.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / libm::sqrt(var + NORM_EPS);
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            for (((o, h), ga), b) in y.row_mut(r).iter_mut().zip(normalized.row(r)).zip(gain).zip(bias) {
                *o = h * ga + b;
            }
            inv_std.push(is);
        }
        (y, NormCache { normalized, inv_std })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &NormCache, dy: &Mat) -> Mat {
        let gain = self.gain.of(p);
        let n = dy.cols() as f64;
        let mut dgain = vec![0.0; gain.len()];
        let mut dbias = vec![0.0; gain.len()];
        let mut dx = dy.clone();
        for r in 0..dy.rows() {
            let xh = cache.normalized.row(r);
            let row = dx.row_mut(r);
            for (c, d) in row.iter_mut().enumerate() {
                dgain[c] += *d * xh[c];
                dbias[c] += *d;
                *d *= gain[c];
            }
            let m1 = row.iter().sum::<f64>() / n;
            let m2 = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
            for (d, h) in row.iter_mut().zip(xh) {
                *d = cache.inv_std[r] * (*d - m1 - h * m2);
            }
        }
        for (a, b) in self.gain.of_mut(g).iter_mut().zip(&dgain) {
            *a += b;
        }
        for (a, b) in self.bias.of_mut(g).iter_mut().zip(&dbias) {
            *a += b;
        }
        dx
    }
}

/// Depth-wise convolution of width 3 with zero padding that preserves `T`.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    weight: Param,
    bias: Param,
    dilation: usize,
}

impl DepthwiseConv {
    pub const WIDTH: usize = 3;

    pub fn new(layout: &mut Layout, name: &str, channels: usize, dilation: usize) -> Self {
        Self {
            weight: layout.add(format!("{name}.weight"), channels, Self::WIDTH, Init::Uniform(fan_in_bound(Self::WIDTH))),
            bias: layout.add(format!("{name}.bias"), 1, channels, Init::Zeros),
            dilation,
        }
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Source frame of tap `k` for output frame `t`, if inside the input.
    fn tap(&self, t: usize, k: usize, len: usize) -> Option<usize> {
        let s = t as isize + (k as isize - 1) * self.dilation as isize;
        (s >= 0 && (s as usize) < len).then_some(s as usize)
    }

    pub fn forward(&self, p: &[f64], x: &Mat) -> Mat {
        let (t_len, ch) = (x.rows(), x.cols());
        let w = self.weight.of(p);
        let mut y = Mat::zeros(t_len, ch);
        for t in 0..t_len {
            y.row_mut(t).copy_from_slice(self.bias.of(p));
            for k in 0..Self::WIDTH {
                if let Some(s) = self.tap(t, k, t_len) {
                    let (src, dst) = (x.row(s), y.row_mut(t));
                    for c in 0..ch {
                        dst[c] += w[c * Self::WIDTH + k] * src[c];
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &Mat, dy: &Mat) -> Mat {
        let (t_len, ch) = (x.rows(), x.cols());
        let w = self.weight.of(p);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; ch];
        let mut dx = Mat::zeros(t_len, ch);
        for t in 0..t_len {
            let d = dy.row(t);
            for c in 0..ch {
                db[c] += d[c];
            }
            for k in 0..Self::WIDTH {
                if let Some(s) = self.tap(t, k, t_len) {
                    let src = x.row(s);
                    let dst = dx.row_mut(s);
                    for c in 0..ch {
                        dw[c * Self::WIDTH + k] += d[c] * src[c];
                        dst[c] += d[c] * w[c * Self::WIDTH + k];
                    }
                }
            }
        }
        for (a, b) in self.weight.of_mut(g).iter_mut().zip(&dw) {
            *a += b;
        }
        for (a, b) in self.bias.of_mut(g).iter_mut().zip(&db) {
            *a += b;
        }
        dx
    }
}

/// One residual layer: expand, PReLU, norm, dilated depth-wise conv, PReLU,
/// norm, project, plus the input.
#[derive(Clone, Debug)]
pub struct TcnLayer {
    expand: Conv1x1,
    act1: Prelu,
    norm1: FrameNorm,
    conv: DepthwiseConv,
    act2: Prelu,
    norm2: FrameNorm,
    project: Conv1x1,
}

#[derive(Clone, Debug)]
pub struct TcnLayerCache {
    x: Mat,
    a1: Mat,
    n1: NormCache,
    h1: Mat,
    a2: Mat,
    n2: NormCache,
    h2: Mat,
}

impl TcnLayer {
    pub fn new(layout: &mut Layout, name: &str, channels: usize, hidden: usize, dilation: usize) -> Self {
        Self {
            expand: Conv1x1::new(layout, &format!("{name}.expand"), channels, hidden),
            act1: Prelu::new(layout, &format!("{name}.act1")),
            norm1: FrameNorm::new(layout, &format!("{name}.norm1"), hidden),
            conv: DepthwiseConv::new(layout, &format!("{name}.conv"), hidden, dilation),
            act2: Prelu::new(layout, &format!("{name}.act2")),
            norm2: FrameNorm::new(layout, &format!("{name}.norm2"), hidden),
            project: Conv1x1::new(layout, &format!("{name}.project"), hidden, channels),
        }
    }

    pub fn dilation(&self) -> usize {
        self.conv.dilation()
    }

    pub fn forward(&self, p: &[f64], x: &Mat) -> (Mat, TcnLayerCache) {
        let a1 = self.expand.forward(p, x);
        let (h1, n1) = self.norm1.forward(p, &self.act1.forward(p, &a1));
        let a2 = self.conv.forward(p, &h1);
        let (h2, n2) = self.norm2.forward(p, &self.act2.forward(p, &a2));
        let mut y = self.project.forward(p, &h2);
        y.add_assign(x);
        (y, TcnLayerCache { x: x.clone(), a1, n1, h1, a2, n2, h2 })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], c: &TcnLayerCache, dy: &Mat) -> Mat {
        let dh2 = self.project.backward(p, g, &c.h2, dy);
        let d = self.norm2.backward(p, g, &c.n2, &dh2);
        let da2 = self.act2.backward(p, g, &c.a2, &d);
        let dh1 = self.conv.backward(p, g, &c.h1, &da2);
        let d = self.norm1.backward(p, g, &c.n1, &dh1);
        let da1 = self.act1.backward(p, g, &c.a1, &d);
        let mut dx = self.expand.backward(p, g, &c.x, &da1);
        dx.add_assign(dy);
        dx
    }
}

/// Stack of residual layers followed by a 1×1 conv and a sigmoid.
#[derive(Clone, Debug)]
pub struct Tcn {
    layers: Vec<TcnLayer>,
    out: Conv1x1,
}

#[derive(Clone, Debug)]
pub struct TcnCache {
    layers: Vec<TcnLayerCache>,
    last: Mat,
    gate: Mat,
}

impl Tcn {
    pub fn new(layout: &mut Layout, name: &str, channels: usize, hidden: usize, blocks: usize, per_block: usize) -> Self {
        let mut layers = Vec::with_capacity(blocks * per_block);
        for b in 0..blocks {
            for r in 0..per_block {
                layers.push(TcnLayer::new(layout, &format!("{name}.b{b}.r{r}"), channels, hidden, 1 << r));
            }
        }
        Self { layers, out: Conv1x1::new(layout, &format!("{name}.out"), channels, channels) }
    }

    pub fn layers(&self) -> &[TcnLayer] {
        &self.layers
    }

    /// Frames on each side that can influence an output frame.
    pub fn receptive_field(&self) -> usize {
        self.layers.iter().map(|l| l.dilation() * (DepthwiseConv::WIDTH - 1) / 2).sum()
    }

    pub fn forward(&self, p: &[f64], x: &Mat) -> (Mat, TcnCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for l in &self.layers {
            let (y, c) = l.forward(p, &cur);
            caches.push(c);
            cur = y;
        }
        let mut gate = self.out.forward(p, &cur);
        gate.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
        (gate.clone(), TcnCache { layers: caches, last: cur, gate })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &TcnCache, dgate: &Mat) -> Mat {
        let mut d = dgate.clone();
        for (v, s) in d.as_mut_slice().iter_mut().zip(cache.gate.as_slice()) {
            *v *= s * (1.0 - s);
        }
        let mut d = self.out.backward(p, g, &cache.last, &d);
        for (l, c) in self.layers.iter().zip(&cache.layers).rev() {
            d = l.backward(p, g, c, &d);
        }
        d
    }
}

/// Transposed 1-D convolution from `channels` features to one waveform.
#[derive(Clone, Debug)]
pub struct WaveDecoder {
    weight: Param,
    bias: Param,
    stride: usize,
}

impl WaveDecoder {
    pub fn new(layout: &mut Layout, name: &str, channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: layout.add(format!("{name}.weight"), channels, kernel, Init::Uniform(fan_in_bound(channels))),
            bias: layout.add(format!("{name}.bias"), 1, 1, Init::Zeros),
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.cols()
    }

    pub fn bias(&self) -> Param {
        self.bias
    }

    /// `(T − 1)·stride + kernel` samples.
    pub fn output_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.stride + self.kernel()
        }
    }

    pub fn forward(&self, p: &[f64], z: &Mat) -> Result<Vec<f64>> {
        if z.cols() != self.weight.rows() {
            return Err(shape!("decoder expects {} channels, got {}", self.weight.rows(), z.cols()));
        }
        let (t_len, k) = (z.rows(), self.kernel());
        let mut frames = Mat::zeros(t_len, k);
        gemm(t_len, z.cols(), k, z.as_slice(), false, self.weight.of(p), false, 0.0, frames.as_mut_slice());
        let mut out = vec![self.bias.of(p)[0]; self.output_len(t_len)];
        for t in 0..t_len {
            for (o, v) in out[t * self.stride..t * self.stride + k].iter_mut().zip(frames.row(t)) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Returns `dZ`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], z: &Mat, dout: &[f64]) -> Mat {
        let (t_len, k, ch) = (z.rows(), self.kernel(), z.cols());
        let mut dframes = Mat::zeros(t_len, k);
        for t in 0..t_len {
            dframes.row_mut(t).copy_from_slice(&dout[t * self.stride..t * self.stride + k]);
        }
        self.bias.of_mut(g)[0] += dout.iter().sum::<f64>();
        gemm(ch, t_len, k, z.as_slice(), true, dframes.as_slice(), false, 1.0, self.weight.of_mut(g));
        let mut dz = Mat::zeros(t_len, ch);
        gemm(t_len, k, ch, dframes.as_slice(), false, self.weight.of(p), true, 0.0, dz.as_mut_slice());
        dz
    }
}

/// `Z = F̃ ⊙ TCN_o ⊙ mask`, the mask broadcast over frames.
pub fn apply_mask(features: &Mat, gate: &Mat, mask: &[f64]) -> Result<Mat> {
    if features.rows() != gate.rows() || features.cols() != gate.cols() || features.cols() != mask.len() {
        return Err(shape!(
            "features {}x{}, gate {}x{}, mask {} disagree",
            features.rows(),
            features.cols(),
            gate.rows(),
            gate.cols(),
            mask.len()
        ));
    }
    Ok(Mat::from_fn(features.rows(), features.cols(), |r, c| features.get(r, c) * gate.get(r, c) * mask[c]))
}

/// Shapes of the separator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeparatorOptions {
    pub input: usize,
    pub channels: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Separator {
    pub bottleneck: Conv1x1,
    pub tcn: Tcn,
    pub decoder: WaveDecoder,
}

/// Mixture-level activations shared by every source.
#[derive(Clone, Debug)]
pub struct SharedFeatures {
    pub features: Mat,
    pub gate: Mat,
}

#[derive(Clone, Debug)]
pub struct SeparatorCache {
    input: Mat,
    tcn: TcnCache,
}

impl Separator {
    pub fn new(layout: &mut Layout, o: SeparatorOptions) -> Self {
        Self {
            bottleneck: Conv1x1::new(layout, "separation.bottleneck", o.input, o.channels),
            tcn: Tcn::new(layout, "separation.tcn", o.channels, o.hidden, o.blocks, o.layers_per_block),
            decoder: WaveDecoder::new(layout, "separation.decoder", o.channels, o.kernel, o.stride),
        }
    }

    pub fn bottleneck(&self, p: &[f64], f: &Mat) -> Result<Mat> {
        if f.cols() != self.bottleneck.input_size() {
            return Err(shape!("bottleneck expects {} channels, got {}", self.bottleneck.input_size(), f.cols()));
        }
        Ok(self.bottleneck.forward(p, f))
    }

    pub fn tcn_forward(&self, p: &[f64], ft: &Mat) -> Mat {
        self.tcn.forward(p, ft).0
    }

    /// `F̃` and `TCN_o` for a mixture feature map.
    pub fn shared(&self, p: &[f64], f: &Mat) -> Result<(SharedFeatures, SeparatorCache)> {
        let features = self.bottleneck(p, f)?;
        let (gate, tcn) = self.tcn.forward(p, &features);
        Ok((SharedFeatures { features, gate }, SeparatorCache { input: f.clone(), tcn }))
    }

    /// Waveform of one source.
    pub fn decode(&self, p: &[f64], shared: &SharedFeatures, mask: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(p, &apply_mask(&shared.features, &shared.gate, mask)?)
    }

    /// Backward for all sources at once. Returns `(dF, dmasks)`.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        shared: &SharedFeatures,
        cache: &SeparatorCache,
        masks: &[Vec<f64>],
        dwaves: &[Vec<f64>],
    ) -> (Mat, Vec<Vec<f64>>) {
        let (t_len, ch) = (shared.features.rows(), shared.features.cols());
        let mut dfeat = Mat::zeros(t_len, ch);
        let mut dgate = Mat::zeros(t_len, ch);
        let mut dmasks = Vec::with_capacity(masks.len());
        for (mask, dw) in masks.iter().zip(dwaves) {
            let z = apply_mask(&shared.features, &shared.gate, mask).expect("shapes checked in forward");
            let dz = self.decoder.backward(p, g, &z, dw);
            let mut dm = vec![0.0; ch];
            for t in 0..t_len {
                let (f, s, d) = (shared.features.row(t), shared.gate.row(t), dz.row(t));
                let (df, dg) = (dfeat.row_mut(t), dgate.row_mut(t));
                for c in 0..ch {
                    df[c] += d[c] * s[c] * mask[c];
                    dg[c] += d[c] * f[c] * mask[c];
                    dm[c] += d[c] * f[c] * s[c];
                }
            }
            dmasks.push(dm);
        }
        dfeat.add_assign(&self.tcn.backward(p, g, &cache.tcn, &dgate));
        let din = self.bottleneck.backward(p, g, &cache.input, &dfeat);
        (din, dmasks)
    }
}
