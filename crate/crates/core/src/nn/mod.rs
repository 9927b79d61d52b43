//! Parameter bookkeeping and reusable recurrent layers.
//!
//! All trainable values of a model live in one flat `Vec<f64>`; layers hold
//! [`Param`] handles into it. Gradients use a buffer of the same layout, which
//! keeps the optimizer, checkpointing and finite-difference checks trivial.

pub mod lstm;

use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Handle to a `rows×cols` row-major block inside a flat parameter buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Param {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Param {
    #[inline]
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn offset(&self) -> usize {
        self.offset
    }

    #[inline]
    pub fn of<'a>(&self, buf: &'a [f64]) -> &'a [f64] {
        &buf[self.offset..self.offset + self.len()]
    }

    #[inline]
    pub fn of_mut<'a>(&self, buf: &'a mut [f64]) -> &'a mut [f64] {
        &mut buf[self.offset..self.offset + self.len()]
    }

    /// Row `r` of the block.
    #[inline]
    pub fn row<'a>(&self, buf: &'a [f64], r: usize) -> &'a [f64] {
        let at = self.offset + r * self.cols;
        &buf[at..at + self.cols]
    }

    #[inline]
    pub fn row_mut<'a>(&self, buf: &'a mut [f64], r: usize) -> &'a mut [f64] {
        let at = self.offset + r * self.cols;
        &mut buf[at..at + self.cols]
    }
}

/// How a parameter block is filled at initialisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    param: Param,
    init: Init,
}

/// Ordered registry of every parameter block of a model.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    entries: Vec<Entry>,
    len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Param {
        let param = Param { offset: self.len, rows, cols };
        self.len += rows * cols;
        self.entries.push(Entry { name: name.into(), param, init });
        param
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Param)> {
        self.entries.iter().map(|e| (e.name.as_str(), e.param))
    }

    pub fn find(&self, name: &str) -> Option<Param> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.param)
    }

    /// Fresh parameter values, deterministic in `seed`.
    pub fn initialize(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = alloc::vec![0.0; self.len];
        for e in &self.entries {
            let block = e.param.of_mut(&mut values);
            match e.init {
                Init::Zeros => {}
                Init::Const(c) => block.fill(c),
                Init::Uniform(bound) => {
                    if bound > 0.0 {
                        let d = Uniform::new_inclusive(-bound, bound);
                        block.iter_mut().for_each(|v| *v = d.sample(&mut rng));
                    }
                }
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("finite std");
                    block.iter_mut().for_each(|v| *v = d.sample(&mut rng));
                }
            }
        }
        values
    }
}

/// Uniform bound `1/sqrt(fan_in)` used for most weight blocks.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / libm::sqrt(fan_in.max(1) as f64)
}

