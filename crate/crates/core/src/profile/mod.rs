//! Per-layer cost and gradient-statistics profile of a network.
//!
//! A profile stores per-layer values; every quantity the planner needs for a
//! layer range is a difference of prefix sums, so prefixes are precomputed at
//! construction and the profile is immutable afterwards.

mod builtin;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HsflError, Result};

pub use builtin::{builtin, tinymlp_profile, vgg16_cifar_profile, BUILTIN_NAMES};

/// One layer's contribution, all values for a single sample where applicable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub fp_flops: f64,
    pub bp_flops: f64,
    /// Bytes of the activation emitted at this layer's output, per sample.
    pub activation_bytes: f64,
    /// Bytes of the gradient w.r.t. this layer's output, per sample.
    pub act_grad_bytes: f64,
    pub param_bytes: f64,
    pub optimizer_state_bytes: f64,
    /// Bounded stochastic-gradient variance of this layer.
    pub grad_variance: f64,
    /// Bounded stochastic-gradient second moment of this layer.
    pub grad_second_moment: f64,
}

impl LayerProfile {
    fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("fp_flops", self.fp_flops),
            ("bp_flops", self.bp_flops),
            ("activation_bytes", self.activation_bytes),
            ("act_grad_bytes", self.act_grad_bytes),
            ("param_bytes", self.param_bytes),
            ("optimizer_state_bytes", self.optimizer_state_bytes),
            ("grad_variance", self.grad_variance),
            ("grad_second_moment", self.grad_second_moment),
        ]
    }
}

/// Which byte-valued field a cumulative query sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteKind {
    Activation,
    ActGrad,
    Param,
    OptimizerState,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Prefixes {
    fp: Vec<f64>,
    bp: Vec<f64>,
    activation: Vec<f64>,
    act_grad: Vec<f64>,
    param: Vec<f64>,
    optimizer_state: Vec<f64>,
    variance: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Prefixes {
    fn build(layers: &[LayerProfile]) -> Self {
        fn scan(layers: &[LayerProfile], f: impl Fn(&LayerProfile) -> f64) -> Vec<f64> {
            let mut out = Vec::with_capacity(layers.len() + 1);
            let mut acc = 0.0;
            out.push(acc);
            for layer in layers {
                acc += f(layer);
                out.push(acc);
            }
            out
        }
        Prefixes {
            fp: scan(layers, |l| l.fp_flops),
            bp: scan(layers, |l| l.bp_flops),
            activation: scan(layers, |l| l.activation_bytes),
            act_grad: scan(layers, |l| l.act_grad_bytes),
            param: scan(layers, |l| l.param_bytes),
            optimizer_state: scan(layers, |l| l.optimizer_state_bytes),
            variance: scan(layers, |l| l.grad_variance),
            second_moment: scan(layers, |l| l.grad_second_moment),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelProfile {
    name: String,
    layers: Vec<LayerProfile>,
    prefix: Prefixes,
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    name: String,
    layers: Vec<LayerProfile>,
}

const FILE_HEADER: &str = "\
# hsfl model profile
# units: fp_flops, bp_flops in FLOPs per sample;
#        activation_bytes, act_grad_bytes in bytes per sample;
#        param_bytes, optimizer_state_bytes in bytes;
#        grad_variance, grad_second_moment in squared gradient-norm units.
";

impl ModelProfile {
    pub fn new(name: impl Into<String>, layers: Vec<LayerProfile>) -> Result<Self> {
        let mut problems = Vec::new();
        if layers.len() < 2 {
            problems.push(format!("profile needs at least 2 layers, got {}", layers.len()));
        }
        for (idx, layer) in layers.iter().enumerate() {
            for (field, value) in layer.fields() {
                if !value.is_finite() || value < 0.0 {
                    problems.push(format!("layer {}: {field} = {value} must be finite and >= 0", idx + 1));
                }
            }
        }
        if !problems.is_empty() {
            return Err(HsflError::Validation(problems));
        }
        let prefix = Prefixes::build(&layers);
        Ok(ModelProfile {
            name: name.into(),
            layers,
            prefix,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[LayerProfile] {
        &self.layers
    }

    /// Number of layers `L`.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        if l > self.layers.len() {
            return Err(HsflError::invalid(format!(
                "layer index {l} out of range 0..={}",
                self.layers.len()
            )));
        }
        Ok(())
    }

    fn check_batch(batch: usize) -> Result<()> {
        if batch < 1 {
            return Err(HsflError::invalid("batch size must be >= 1"));
        }
        Ok(())
    }

    /// FP workload of the first `l` layers for a mini-batch of `batch` samples.
    pub fn cumulative_fp_flops(&self, l: usize, batch: usize) -> Result<f64> {
        self.check_layer(l)?;
        Self::check_batch(batch)?;
        Ok(batch as f64 * self.prefix.fp[l])
    }

    /// BP workload of the first `l` layers for a mini-batch of `batch` samples.
    pub fn cumulative_bp_flops(&self, l: usize, batch: usize) -> Result<f64> {
        self.check_layer(l)?;
        Self::check_batch(batch)?;
        Ok(batch as f64 * self.prefix.bp[l])
    }

    pub fn cumulative_bytes(&self, l: usize, kind: ByteKind) -> Result<f64> {
        self.check_layer(l)?;
        let table = match kind {
            ByteKind::Activation => &self.prefix.activation,
            ByteKind::ActGrad => &self.prefix.act_grad,
            ByteKind::Param => &self.prefix.param,
            ByteKind::OptimizerState => &self.prefix.optimizer_state,
        };
        Ok(table[l])
    }

    pub fn cumulative_second_moment(&self, l: usize) -> Result<f64> {
        self.check_layer(l)?;
        Ok(self.prefix.second_moment[l])
    }

    pub fn cumulative_variance(&self, l: usize) -> Result<f64> {
        self.check_layer(l)?;
        Ok(self.prefix.variance[l])
    }

    /// Σ_l σ_l² over the whole network.
    pub fn total_variance(&self) -> f64 {
        self.prefix.variance[self.layers.len()]
    }

    /// Per-sample activation bytes emitted by layer `l` (1-based); zero for `l = 0`.
    pub fn activation_at(&self, l: usize) -> Result<f64> {
        self.check_layer(l)?;
        Ok(if l == 0 { 0.0 } else { self.layers[l - 1].activation_bytes })
    }

    /// Per-sample activation-gradient bytes at the output of layer `l` (1-based).
    pub fn act_grad_at(&self, l: usize) -> Result<f64> {
        self.check_layer(l)?;
        Ok(if l == 0 { 0.0 } else { self.layers[l - 1].act_grad_bytes })
    }

    /// Replaces per-layer gradient statistics, keeping everything else.
    pub fn with_gradient_stats(&self, variance: &[f64], second_moment: &[f64]) -> Result<Self> {
        if variance.len() != self.layers.len() || second_moment.len() != self.layers.len() {
            return Err(HsflError::invalid(format!(
                "gradient statistics cover {}/{} layers, profile has {}",
                variance.len(),
                second_moment.len(),
                self.layers.len()
            )));
        }
        let layers = self
            .layers
            .iter()
            .zip(variance.iter().zip(second_moment))
            .map(|(layer, (&s2, &g2))| LayerProfile {
                grad_variance: s2,
                grad_second_moment: g2,
                ..*layer
            })
            .collect();
        ModelProfile::new(self.name.clone(), layers)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ProfileFile = toml::from_str(text).map_err(|e| HsflError::Parse(e.to_string()))?;
        ModelProfile::new(file.name, file.layers)
    }

    pub fn to_toml_string(&self) -> String {
        let file = ProfileFile {
            name: self.name.clone(),
            layers: self.layers.clone(),
        };
        let body = toml::to_string(&file).expect("profile fields are always serializable");
        format!("{FILE_HEADER}{body}")
    }

    /// Loads a profile file, or a builtin profile when `path` names one.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HsflError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Resolves either a builtin name (`vgg16`, `tinymlp`) or a file path.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match builtin(name_or_path) {
            Some(profile) => Ok(profile),
            None => Self::load(name_or_path),
        }
    }
}
