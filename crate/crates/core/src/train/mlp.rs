//! A dense network over one flat parameter vector.
//!
//! Layer `l` stores its `out × in` weights row-major followed by its `out`
//! biases, so the parameters of any run of consecutive layers form one
//! contiguous slice. Hidden layers apply the hidden activation; the last
//! layer emits logits for a softmax cross-entropy loss.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HsflError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    hidden: Activation,
    offsets: Vec<usize>,
}

/// Inputs and outputs of every layer in a forward run over `lo..hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    pub lo: usize,
    pub hi: usize,
    pub batch: usize,
    /// `inputs[k]` feeds layer `lo + k`.
    pub inputs: Vec<Vec<f64>>,
    /// `outputs[k]` is layer `lo + k` after its activation; the last one is
    /// the block output.
    pub outputs: Vec<Vec<f64>>,
}

impl BlockCache {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn new(dims: Vec<usize>, hidden: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(HsflError::ModelConstruction(format!("layer widths {dims:?} need at least two positive entries")));
        }
        let mut offsets = vec![0];
        for w in dims.windows(2) {
            offsets.push(offsets.last().unwrap() + w[0] * w[1] + w[1]);
        }
        Ok(Mlp { dims, hidden, offsets })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn hidden(&self) -> Activation {
        self.hidden
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Parameter range of layers `lo..hi`.
    pub fn block_range(&self, lo: usize, hi: usize) -> Range<usize> {
        self.offsets[lo]..self.offsets[hi]
    }

    pub fn layer_range(&self, l: usize) -> Range<usize> {
        self.block_range(l, l + 1)
    }

    /// Uniform `±sqrt(6 / (in + out))` weights and zero biases.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.num_params()];
        for l in 0..self.num_layers() {
            let (inp, out) = (self.dims[l], self.dims[l + 1]);
            let bound = (6.0 / (inp + out) as f64).sqrt();
            let start = self.offsets[l];
            for w in &mut p[start..start + inp * out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    fn activation_of(&self, l: usize) -> Activation {
        if l + 1 == self.num_layers() {
            Activation::Identity
        } else {
            self.hidden
        }
    }

    /// Runs layers `lo..hi`; `params` is the full parameter vector.
    pub fn forward_layers(&self, params: &[f64], lo: usize, hi: usize, input: &[f64], batch: usize) -> Result<BlockCache> {
        if params.len() != self.num_params() {
            return Err(HsflError::ModelConstruction(format!(
                "parameter vector has {} entries, network needs {}",
                params.len(),
                self.num_params()
            )));
        }
        if lo >= hi || hi > self.num_layers() {
            return Err(HsflError::ModelConstruction(format!("layer range {lo}..{hi} is empty or out of bounds")));
        }
        if input.len() != batch * self.dims[lo] {
            return Err(HsflError::ModelConstruction(format!(
                "input has {} values, expected batch {batch} x width {}",
                input.len(),
                self.dims[lo]
            )));
        }
        let mut inputs = Vec::with_capacity(hi - lo);
        let mut outputs = Vec::with_capacity(hi - lo);
        let mut x = input.to_vec();
        for l in lo..hi {
            let (inp, out) = (self.dims[l], self.dims[l + 1]);
            let start = self.offsets[l];
            let w = &params[start..start + inp * out];
            let bias = &params[start + inp * out..start + inp * out + out];
            let mut z = vec![0.0; batch * out];
            for s in 0..batch {
                let xs = &x[s * inp..(s + 1) * inp];
                for o in 0..out {
                    let row = &w[o * inp..(o + 1) * inp];
                    let mut acc = bias[o];
                    for i in 0..inp {
                        acc += row[i] * xs[i];
                    }
                    z[s * out + o] = match self.activation_of(l) {
                        Activation::Tanh => acc.tanh(),
                        Activation::Identity => acc,
                    };
                }
            }
            inputs.push(std::mem::replace(&mut x, z.clone()));
            outputs.push(z);
        }
        Ok(BlockCache { lo, hi, batch, inputs, outputs })
    }

    /// Back-propagates `grad_out` (gradient w.r.t. the block output) through
    /// the cached block, writing parameter gradients into `grad` (full
    /// length, only the block range is touched) and returning the gradient
    /// w.r.t. the block input.
    pub fn backward_layers(&self, params: &[f64], cache: &BlockCache, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let batch = cache.batch;
        let mut upstream = grad_out.to_vec();
        for l in (cache.lo..cache.hi).rev() {
            let k = l - cache.lo;
            let (inp, out) = (self.dims[l], self.dims[l + 1]);
            let a = &cache.outputs[k];
            let x = &cache.inputs[k];
            let dz: Vec<f64> = match self.activation_of(l) {
                Activation::Tanh => upstream.iter().zip(a).map(|(g, a)| g * (1.0 - a * a)).collect(),
                Activation::Identity => upstream,
            };
            let start = self.offsets[l];
            let w = &params[start..start + inp * out];
            let (gw, gb) = grad[start..start + inp * out + out].split_at_mut(inp * out);
            gw.fill(0.0);
            gb.fill(0.0);
            let mut dx = vec![0.0; batch * inp];
            for s in 0..batch {
                let xs = &x[s * inp..(s + 1) * inp];
                let dxs = &mut dx[s * inp..(s + 1) * inp];
                for o in 0..out {
                    let d = dz[s * out + o];
                    gb[o] += d;
                    let row = &w[o * inp..(o + 1) * inp];
                    let grow = &mut gw[o * inp..(o + 1) * inp];
                    for i in 0..inp {
                        grow[i] += d * xs[i];
                        dxs[i] += d * row[i];
                    }
                }
            }
            upstream = dx;
        }
        upstream
    }

    /// Cross-entropy loss averaged over the batch. Entry `y` of `labels` must be
    /// below the number of classes.
    pub fn softmax_cross_entropy(&self, logits: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let classes = self.num_classes();
        let batch = labels.len();
        if logits.len() != batch * classes {
            return Err(HsflError::ModelConstruction("logit count does not match the labels".to_string()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(HsflError::ModelConstruction(format!("label {y} outside 0..{classes}")));
        }
        let mut loss = 0.0;
        let mut grad = vec![0.0; logits.len()];
        for s in 0..batch {
            let z = &logits[s * classes..(s + 1) * classes];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let log_norm = max + sum.ln();
            loss += log_norm - z[labels[s]];
            for c in 0..classes {
                let p = (z[c] - log_norm).exp();
                grad[s * classes + c] = (p - if c == labels[s] { 1.0 } else { 0.0 }) / batch as f64;
            }
        }
        Ok((loss / batch as f64, grad))
    }

    pub fn loss(&self, params: &[f64], x: &[f64], labels: &[usize]) -> Result<f64> {
        let cache = self.forward_layers(params, 0, self.num_layers(), x, labels.len())?;
        Ok(self.softmax_cross_entropy(cache.output(), labels)?.0)
    }

    /// Loss and full gradient of an unsplit forward and backward pass.
    pub fn loss_and_grad(&self, params: &[f64], x: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let cache = self.forward_layers(params, 0, self.num_layers(), x, labels.len())?;
        let (loss, dlogits) = self.softmax_cross_entropy(cache.output(), labels)?;
        let mut grad = vec![0.0; self.num_params()];
        self.backward_layers(params, &cache, &dlogits, &mut grad);
        Ok((loss, grad))
    }

    /// Squared norm of each layer's part of `v`.
    pub fn layer_sq_norms(&self, v: &[f64]) -> Vec<f64> {
        (0..self.num_layers()).map(|l| v[self.layer_range(l)].iter().map(|x| x * x).sum()).collect()
    }
}
