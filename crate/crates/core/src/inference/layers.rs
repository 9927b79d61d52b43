//! Building blocks of a token decoder: additive attention, the global
//! embedding gate and the output projection.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{argmax, gemm, matvec_acc, matvec_t_acc, outer_acc, sigmoid, softmax_in_place, tanh, Mat};
use crate::nn::{fan_in_bound, Init, Layout, Param};

/// Additive attention `score_i = vᵀ tanh(W·q + U·h_i)`.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    w_query: Param,
    w_key: Param,
    v: Param,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    query: Vec<f64>,
    act: Mat,
    alpha: Vec<f64>,
}

impl AdditiveAttention {
    pub fn new(layout: &mut Layout, name: &str, query: usize, key: usize, dim: usize) -> Self {
        Self {
            w_query: layout.add(format!("{name}.w_query"), dim, query, Init::Uniform(fan_in_bound(query))),
            w_key: layout.add(format!("{name}.w_key"), dim, key, Init::Uniform(fan_in_bound(key))),
            v: layout.add(format!("{name}.v"), 1, dim, Init::Uniform(fan_in_bound(dim))),
        }
    }

    pub fn dim(&self) -> usize {
        self.v.cols()
    }

    /// Projected keys `U·h_i` for every frame (`T×dim`).
    pub fn keys(&self, p: &[f64], h: &Mat) -> Mat {
        let mut k = Mat::zeros(h.rows(), self.dim());
        gemm(h.rows(), h.cols(), self.dim(), h.as_slice(), false, self.w_key.of(p), true, 0.0, k.as_mut_slice());
        k
    }

    /// Accumulates `dU` and returns the contribution to `dh`.
    pub fn keys_backward(&self, p: &[f64], g: &mut [f64], h: &Mat, dkeys: &Mat) -> Mat {
        gemm(self.dim(), h.rows(), h.cols(), dkeys.as_slice(), true, h.as_slice(), false, 1.0, self.w_key.of_mut(g));
        let mut dh = Mat::zeros(h.rows(), h.cols());
        gemm(h.rows(), self.dim(), h.cols(), dkeys.as_slice(), false, self.w_key.of(p), false, 0.0, dh.as_mut_slice());
        dh
    }

    /// Attention weights over frames and the context vector.
    pub fn step(&self, p: &[f64], keys: &Mat, h: &Mat, query: &[f64]) -> (Vec<f64>, Vec<f64>, AttentionCache) {
        let dim = self.dim();
        let mut q = vec![0.0; dim];
        matvec_acc(self.w_query.of(p), query, &mut q);
        let v = self.v.of(p);
        let mut act = Mat::zeros(keys.rows(), dim);
        let mut alpha = vec![0.0; keys.rows()];
        for i in 0..keys.rows() {
            let row = act.row_mut(i);
            let mut s = 0.0;
            for j in 0..dim {
                let a = tanh(q[j] + keys.get(i, j));
                row[j] = a;
                s += v[j] * a;
            }
            alpha[i] = s;
        }
        softmax_in_place(&mut alpha);
        let mut c = vec![0.0; h.cols()];
        for (i, a) in alpha.iter().enumerate() {
            for (cj, hj) in c.iter_mut().zip(h.row(i)) {
                *cj += a * hj;
            }
        }
        (alpha.clone(), c, AttentionCache { query: query.to_vec(), act, alpha })
    }

    /// Backward of [`AdditiveAttention::step`]. Adds into `dkeys` and `dh`,
    /// returns the gradient of the query.
    pub fn step_backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        h: &Mat,
        cache: &AttentionCache,
        dc: &[f64],
        dkeys: &mut Mat,
        dh: &mut Mat,
    ) -> Vec<f64> {
        let dim = self.dim();
        let t_len = h.rows();
        let alpha = &cache.alpha;
        let dalpha: Vec<f64> = (0..t_len).map(|i| crate::linalg::dot(h.row(i), dc)).collect();
        for i in 0..t_len {
            for (d, c) in dh.row_mut(i).iter_mut().zip(dc) {
                *d += alpha[i] * c;
            }
        }
        let s: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        let v = self.v.of(p).to_vec();
        let mut dq = vec![0.0; dim];
        let mut dv = vec![0.0; dim];
        for i in 0..t_len {
            let dscore = alpha[i] * (dalpha[i] - s);
            if dscore == 0.0 {
                continue;
            }
            let act = cache.act.row(i);
            let dk = dkeys.row_mut(i);
            for j in 0..dim {
                dv[j] += dscore * act[j];
                let dpre = dscore * v[j] * (1.0 - act[j] * act[j]);
                dq[j] += dpre;
                dk[j] += dpre;
            }
        }
        for (a, b) in self.v.of_mut(g).iter_mut().zip(&dv) {
            *a += b;
        }
        outer_acc(self.w_query.of_mut(g), &dq, &cache.query);
        let mut dquery = vec![0.0; cache.query.len()];
        matvec_t_acc(self.w_query.of(p), &dq, &mut dquery);
        dquery
    }
}

/// Gated blend of the chosen token's embedding and the probability-weighted
/// average embedding.
#[derive(Clone, Debug)]
pub struct GlobalEmbedding {
    table: Param,
    w_token: Param,
    w_avg: Param,
}

#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    y: Vec<f64>,
    chosen: usize,
    e_token: Vec<f64>,
    e_avg: Vec<f64>,
    gate: Vec<f64>,
}

impl EmbeddingCache {
    pub fn gate(&self) -> &[f64] {
        &self.gate
    }

    pub fn chosen(&self) -> usize {
        self.chosen
    }
}

impl GlobalEmbedding {
    pub fn new(layout: &mut Layout, name: &str, vocab: usize, dim: usize) -> Self {
        Self {
            table: layout.add(format!("{name}.table"), vocab, dim, Init::Normal(1.0)),
            w_token: layout.add(format!("{name}.w_token"), dim, dim, Init::Uniform(fan_in_bound(dim))),
            w_avg: layout.add(format!("{name}.w_avg"), dim, dim, Init::Uniform(fan_in_bound(dim))),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab(&self) -> usize {
        self.table.rows()
    }

    pub fn row<'a>(&self, p: &'a [f64], token: usize) -> &'a [f64] {
        self.table.row(p, token)
    }

    /// `g ⊙ e_chosen + (1 − g) ⊙ Σ_j y_j e_j` with
    /// `g = σ(W·e_chosen + U·e_avg)`.
    pub fn forward(&self, p: &[f64], y: &[f64], chosen: usize) -> (Vec<f64>, EmbeddingCache) {
        let dim = self.dim();
        let e_token = self.table.row(p, chosen).to_vec();
        let mut e_avg = vec![0.0; dim];
        for (j, &yj) in y.iter().enumerate() {
            if yj != 0.0 {
                crate::linalg::axpy(yj, self.table.row(p, j), &mut e_avg);
            }
        }
        let mut pre = vec![0.0; dim];
        matvec_acc(self.w_token.of(p), &e_token, &mut pre);
        matvec_acc(self.w_avg.of(p), &e_avg, &mut pre);
        let gate: Vec<f64> = pre.iter().map(|v| sigmoid(*v)).collect();
        let out = (0..dim).map(|k| gate[k] * e_token[k] + (1.0 - gate[k]) * e_avg[k]).collect();
        (out, EmbeddingCache { y: y.to_vec(), chosen, e_token, e_avg, gate })
    }

    /// Returns the gradient with respect to the input distribution.
    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &EmbeddingCache, dout: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        let gate = &cache.gate;
        let dpre: Vec<f64> = (0..dim)
            .map(|k| dout[k] * (cache.e_token[k] - cache.e_avg[k]) * gate[k] * (1.0 - gate[k]))
            .collect();
        let mut de_token: Vec<f64> = (0..dim).map(|k| dout[k] * gate[k]).collect();
        let mut de_avg: Vec<f64> = (0..dim).map(|k| dout[k] * (1.0 - gate[k])).collect();
        matvec_t_acc(self.w_token.of(p), &dpre, &mut de_token);
        matvec_t_acc(self.w_avg.of(p), &dpre, &mut de_avg);
        outer_acc(self.w_token.of_mut(g), &dpre, &cache.e_token);
        outer_acc(self.w_avg.of_mut(g), &dpre, &cache.e_avg);
        crate::linalg::axpy(1.0, &de_token, self.table.row_mut(g, cache.chosen));
        let mut dy = vec![0.0; cache.y.len()];
        for (j, &yj) in cache.y.iter().enumerate() {
            dy[j] = crate::linalg::dot(self.table.row(p, j), &de_avg);
            if yj != 0.0 {
                crate::linalg::axpy(yj, &de_avg, self.table.row_mut(g, j));
            }
        }
        dy
    }

    /// Embedding of a distribution using its argmax as the chosen token.
    pub fn embed(&self, p: &[f64], y: &[f64]) -> Vec<f64> {
        self.forward(p, y, argmax(y)).0
    }
}

/// Nonlinearity between the hidden projection and the vocabulary logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Tanh,
    Relu,
}

impl OutputActivation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => tanh(x),
            Self::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - y * y,
            Self::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `y = softmax(W_out · f(W_s·s + W_c·c))`.
#[derive(Clone, Debug)]
pub struct OutputLayer {
    w_state: Param,
    w_ctx: Param,
    w_out: Param,
    act: OutputActivation,
}

#[derive(Clone, Debug)]
pub struct OutputCache {
    state: Vec<f64>,
    ctx: Vec<f64>,
    hidden: Vec<f64>,
}

impl OutputLayer {
    pub fn new(layout: &mut Layout, name: &str, state: usize, ctx: usize, hidden: usize, vocab: usize, act: OutputActivation) -> Self {
        Self {
            w_state: layout.add(format!("{name}.w_state"), hidden, state, Init::Uniform(fan_in_bound(state))),
            w_ctx: layout.add(format!("{name}.w_ctx"), hidden, ctx, Init::Uniform(fan_in_bound(ctx))),
            w_out: layout.add(format!("{name}.w_out"), vocab, hidden, Init::Uniform(fan_in_bound(hidden))),
            act,
        }
    }

    pub fn out_param(&self) -> Param {
        self.w_out
    }

    pub fn forward(&self, p: &[f64], state: &[f64], ctx: &[f64]) -> (Vec<f64>, OutputCache) {
        let mut pre = vec![0.0; self.w_state.rows()];
        matvec_acc(self.w_state.of(p), state, &mut pre);
        matvec_acc(self.w_ctx.of(p), ctx, &mut pre);
        let hidden: Vec<f64> = pre.iter().map(|v| self.act.apply(*v)).collect();
        let mut y = vec![0.0; self.w_out.rows()];
        matvec_acc(self.w_out.of(p), &hidden, &mut y);
        softmax_in_place(&mut y);
        (y, OutputCache { state: state.to_vec(), ctx: ctx.to_vec(), hidden })
    }

    /// Given the gradient of the logits, returns `(d_state, d_ctx)`.
    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &OutputCache, dlogits: &[f64]) -> (Vec<f64>, Vec<f64>) {
        outer_acc(self.w_out.of_mut(g), dlogits, &cache.hidden);
        let mut dh = vec![0.0; cache.hidden.len()];
        matvec_t_acc(self.w_out.of(p), dlogits, &mut dh);
        for (d, h) in dh.iter_mut().zip(&cache.hidden) {
            *d *= self.act.grad_from_output(*h);
        }
        outer_acc(self.w_state.of_mut(g), &dh, &cache.state);
        outer_acc(self.w_ctx.of_mut(g), &dh, &cache.ctx);
        let mut ds = vec![0.0; cache.state.len()];
        matvec_t_acc(self.w_state.of(p), &dh, &mut ds);
        let mut dc = vec![0.0; cache.ctx.len()];
        matvec_t_acc(self.w_ctx.of(p), &dh, &mut dc);
        (ds, dc)
    }
}
