//! Long short-term memory layers with hand-written backward passes.
//!
//! Gate order inside the `4H` pre-activation is input, forget, cell, output.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{fan_in_bound, Init, Layout, Param};
use crate::linalg::{gemm, matvec_acc, matvec_t_acc, outer_acc, sigmoid, tanh, Mat};

/// One unidirectional LSTM layer.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    input: usize,
    hidden: usize,
    w_ih: Param,
    w_hh: Param,
    bias: Param,
}

/// Hidden and cell state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self { h: vec![0.0; hidden], c: vec![0.0; hidden] }
    }
}

/// Activations of a single step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    x: Vec<f64>,
    prev: LstmState,
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Activations of a whole sequence.
#[derive(Clone, Debug)]
pub struct SeqCache {
    reverse: bool,
    gates: Mat,
    c: Mat,
    h: Mat,
    tanh_c: Mat,
}

impl LstmLayer {
    pub fn new(layout: &mut Layout, name: &str, input: usize, hidden: usize) -> Self {
        let bound = fan_in_bound(hidden);
        Self {
            input,
            hidden,
            w_ih: layout.add(format!("{name}.w_ih"), 4 * hidden, input, Init::Uniform(bound)),
            w_hh: layout.add(format!("{name}.w_hh"), 4 * hidden, hidden, Init::Uniform(bound)),
            bias: layout.add(format!("{name}.bias"), 1, 4 * hidden, Init::Uniform(bound)),
        }
    }

    pub fn input_size(&self) -> usize {
        self.input
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// Applies gate nonlinearities to `pre` in place and returns the new state.
    fn cell(&self, pre: &mut [f64], prev: &LstmState) -> (LstmState, Vec<f64>) {
        let hd = self.hidden;
        let mut state = LstmState::zeros(hd);
        let mut tanh_c = vec![0.0; hd];
        for j in 0..hd {
            let i = sigmoid(pre[j]);
            let f = sigmoid(pre[hd + j]);
            let g = tanh(pre[2 * hd + j]);
            let o = sigmoid(pre[3 * hd + j]);
            pre[j] = i;
            pre[hd + j] = f;
            pre[2 * hd + j] = g;
            pre[3 * hd + j] = o;
            let c = f * prev.c[j] + i * g;
            let tc = tanh(c);
            state.c[j] = c;
            state.h[j] = o * tc;
            tanh_c[j] = tc;
        }
        (state, tanh_c)
    }

    /// Gradient of the gate pre-activations for one step. Returns
    /// `(dpre, dc_prev)`.
    fn cell_backward(
        &self,
        gates: &[f64],
        tanh_c: &[f64],
        c_prev: &[f64],
        dh: &[f64],
        dc_in: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hd = self.hidden;
        let mut dpre = vec![0.0; 4 * hd];
        let mut dc_prev = vec![0.0; hd];
        for j in 0..hd {
            let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
            let tc = tanh_c[j];
            let d_o = dh[j] * tc;
            let dc = dh[j] * o * (1.0 - tc * tc) + dc_in[j];
            dpre[j] = dc * g * i * (1.0 - i);
            dpre[hd + j] = dc * c_prev[j] * f * (1.0 - f);
            dpre[2 * hd + j] = dc * i * (1.0 - g * g);
            dpre[3 * hd + j] = d_o * o * (1.0 - o);
            dc_prev[j] = dc * f;
        }
        (dpre, dc_prev)
    }

    /// One recurrent step.
    pub fn step(&self, p: &[f64], x: &[f64], prev: &LstmState) -> (LstmState, StepCache) {
        debug_assert_eq!(x.len(), self.input);
        let mut pre = self.bias.of(p).to_vec();
        matvec_acc(self.w_ih.of(p), x, &mut pre);
        matvec_acc(self.w_hh.of(p), &prev.h, &mut pre);
        let (state, tanh_c) = self.cell(&mut pre, prev);
        let cache = StepCache { x: x.to_vec(), prev: prev.clone(), gates: pre, tanh_c };
        (state, cache)
    }

    /// Backward of [`LstmLayer::step`]. Returns `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        cache: &StepCache,
        dh: &[f64],
        dc: &[f64],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (dpre, dc_prev) = self.cell_backward(&cache.gates, &cache.tanh_c, &cache.prev.c, dh, dc);
        outer_acc(self.w_ih.of_mut(g), &dpre, &cache.x);
        outer_acc(self.w_hh.of_mut(g), &dpre, &cache.prev.h);
        for (b, d) in self.bias.of_mut(g).iter_mut().zip(&dpre) {
            *b += d;
        }
        let mut dx = vec![0.0; self.input];
        matvec_t_acc(self.w_ih.of(p), &dpre, &mut dx);
        let mut dh_prev = vec![0.0; self.hidden];
        matvec_t_acc(self.w_hh.of(p), &dpre, &mut dh_prev);
        (dx, dh_prev, dc_prev)
    }

    /// Runs over all frames of `x` (`T×input`), from the last frame backwards
    /// when `reverse`. The output is indexed by original frame.
    pub fn forward_seq(&self, p: &[f64], x: &Mat, reverse: bool) -> (Mat, SeqCache) {
        let (t_len, hd) = (x.rows(), self.hidden);
        let mut gates = Mat::zeros(t_len, 4 * hd);
        for r in 0..t_len {
            gates.row_mut(r).copy_from_slice(self.bias.of(p));
        }
        gemm(t_len, self.input, 4 * hd, x.as_slice(), false, self.w_ih.of(p), true, 1.0, gates.as_mut_slice());
        let mut c = Mat::zeros(t_len, hd);
        let mut h = Mat::zeros(t_len, hd);
        let mut tanh_c = Mat::zeros(t_len, hd);
        let mut state = LstmState::zeros(hd);
        for k in 0..t_len {
            let t = if reverse { t_len - 1 - k } else { k };
            let pre = gates.row_mut(t);
            matvec_acc(self.w_hh.of(p), &state.h, pre);
            let (next, tc) = self.cell(pre, &state);
            c.row_mut(t).copy_from_slice(&next.c);
            h.row_mut(t).copy_from_slice(&next.h);
            tanh_c.row_mut(t).copy_from_slice(&tc);
            state = next;
        }
        let cache = SeqCache { reverse, gates, c, h: h.clone(), tanh_c };
        (h, cache)
    }

    /// Backward of [`LstmLayer::forward_seq`]; returns `dx`.
    pub fn backward_seq(&self, p: &[f64], g: &mut [f64], x: &Mat, cache: &SeqCache, dh_out: &Mat) -> Mat {
        let (t_len, hd) = (x.rows(), self.hidden);
        let mut dpre_all = Mat::zeros(t_len, 4 * hd);
        let mut h_prev_all = Mat::zeros(t_len, hd);
        let mut dh_carry = vec![0.0; hd];
        let mut dc_carry = vec![0.0; hd];
        let zeros = vec![0.0; hd];
        for k in (0..t_len).rev() {
            let t = if cache.reverse { t_len - 1 - k } else { k };
            let prev_t = if k == 0 {
                None
            } else if cache.reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            let c_prev = prev_t.map_or(&zeros[..], |pt| cache.c.row(pt));
            if let Some(pt) = prev_t {
                h_prev_all.row_mut(t).copy_from_slice(cache.h.row(pt));
            }
            let mut dh = dh_out.row(t).to_vec();
            for (a, b) in dh.iter_mut().zip(&dh_carry) {
                *a += b;
            }
            let (dpre, dc_prev) = self.cell_backward(cache.gates.row(t), cache.tanh_c.row(t), c_prev, &dh, &dc_carry);
            dh_carry.fill(0.0);
            matvec_t_acc(self.w_hh.of(p), &dpre, &mut dh_carry);
            dc_carry = dc_prev;
            dpre_all.row_mut(t).copy_from_slice(&dpre);
        }
        gemm(4 * hd, t_len, self.input, dpre_all.as_slice(), true, x.as_slice(), false, 1.0, self.w_ih.of_mut(g));
        gemm(4 * hd, t_len, hd, dpre_all.as_slice(), true, h_prev_all.as_slice(), false, 1.0, self.w_hh.of_mut(g));
        let gb = self.bias.of_mut(g);
        for t in 0..t_len {
            for (b, d) in gb.iter_mut().zip(dpre_all.row(t)) {
                *b += d;
            }
        }
        let mut dx = Mat::zeros(t_len, self.input);
        gemm(t_len, 4 * hd, self.input, dpre_all.as_slice(), false, self.w_ih.of(p), false, 0.0, dx.as_mut_slice());
        dx
    }
}

/// Stack of bidirectional LSTM layers; each layer outputs `[forward; backward]`.
#[derive(Clone, Debug)]
pub struct Blstm {
    layers: Vec<(LstmLayer, LstmLayer)>,
}

#[derive(Clone, Debug)]
pub struct BlstmCache {
    inputs: Vec<Mat>,
    caches: Vec<(SeqCache, SeqCache)>,
}

impl Blstm {
    pub fn new(layout: &mut Layout, name: &str, input: usize, hidden: usize, layers: usize) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let in_dim = if l == 0 { input } else { 2 * hidden };
                (
                    LstmLayer::new(layout, &format!("{name}.l{l}.fwd"), in_dim, hidden),
                    LstmLayer::new(layout, &format!("{name}.l{l}.bwd"), in_dim, hidden),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map_or(0, |(f, _)| 2 * f.hidden_size())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, p: &[f64], x: &Mat) -> (Mat, BlstmCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (fwd, bwd) in &self.layers {
            let (hf, cf) = fwd.forward_seq(p, &cur, false);
            let (hb, cb) = bwd.forward_seq(p, &cur, true);
            let out = Mat::hcat(&[&hf, &hb]).expect("equal frame counts");
            inputs.push(core::mem::replace(&mut cur, out));
            caches.push((cf, cb));
        }
        (cur, BlstmCache { inputs, caches })
    }

    /// Returns the gradient with respect to the stack input.
    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &BlstmCache, dout: &Mat) -> Mat {
        let mut d = dout.clone();
        for (l, (fwd, bwd)) in self.layers.iter().enumerate().rev() {
            let hd = fwd.hidden_size();
            let x = &cache.inputs[l];
            let (cf, cb) = &cache.caches[l];
            let mut dx = fwd.backward_seq(p, g, x, cf, &d.columns(0, hd));
            dx.add_assign(&bwd.backward_seq(p, g, x, cb, &d.columns(hd, hd)));
            d = dx;
        }
        d
    }
}

/// Unidirectional multi-layer LSTM driven one step at a time.
#[derive(Clone, Debug)]
pub struct LstmStack {
    layers: Vec<LstmLayer>,
}

impl LstmStack {
    pub fn new(layout: &mut Layout, name: &str, input: usize, hidden: usize, layers: usize) -> Self {
        let layers = (0..layers)
            .map(|l| LstmLayer::new(layout, &format!("{name}.l{l}"), if l == 0 { input } else { hidden }, hidden))
            .collect();
        Self { layers }
    }

    pub fn hidden_size(&self) -> usize {
        self.layers[0].hidden_size()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn zero_state(&self) -> Vec<LstmState> {
        self.layers.iter().map(|l| LstmState::zeros(l.hidden_size())).collect()
    }

    pub fn step(&self, p: &[f64], x: &[f64], prev: &[LstmState]) -> (Vec<LstmState>, Vec<StepCache>) {
        let mut states = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut input = x.to_vec();
        for (layer, s) in self.layers.iter().zip(prev) {
            let (next, cache) = layer.step(p, &input, s);
            input = next.h.clone();
            states.push(next);
            caches.push(cache);
        }
        (states, caches)
    }

    /// `dstate` holds `(dh, dc)` per layer for the step's output state. Returns
    /// `dx` and the per-layer gradient for the previous state.
    pub fn step_backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        caches: &[StepCache],
        dstate: &[(Vec<f64>, Vec<f64>)],
    ) -> (Vec<f64>, Vec<(Vec<f64>, Vec<f64>)>) {
        let mut dprev = vec![(Vec::new(), Vec::new()); self.layers.len()];
        let mut d_above: Option<Vec<f64>> = None;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (dh_state, dc_state) = &dstate[l];
            let mut dh = dh_state.clone();
            if let Some(da) = &d_above {
                for (a, b) in dh.iter_mut().zip(da) {
                    *a += b;
                }
            }
            let (dx, dh_prev, dc_prev) = layer.step_backward(p, g, &caches[l], &dh, dc_state);
            dprev[l] = (dh_prev, dc_prev);
            d_above = Some(dx);
        }
        (d_above.unwrap_or_default(), dprev)
    }
}
