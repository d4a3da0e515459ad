//! Profiles shipped with the crate, computed from layer dimensions.

use super::{LayerProfile, ModelProfile};
use crate::train::TINY_MLP_DIMS;

pub const BUILTIN_NAMES: &[&str] = &["vgg16", "tinymlp"];

/// Squared gradient-norm budget spread over layers in proportion to parameter count.
const VGG_SECOND_MOMENT_TOTAL: f64 = 10.0;
const VGG_VARIANCE_TOTAL: f64 = 40.0;

const FP32_BYTES: f64 = 4.0;
const F64_BYTES: f64 = 8.0;

pub fn builtin(name: &str) -> Option<ModelProfile> {
    match name {
        "vgg16" => Some(vgg16_cifar_profile()),
        "tinymlp" => Some(tinymlp_profile()),
        _ => None,
    }
}

enum VggLayer {
    Conv { out_channels: usize, pool: bool },
    Dense { out_features: usize },
}

/// VGG-16 (13 conv + 3 dense) on 32x32x3 inputs with 10 classes, fp32.
///
/// Convolutions are 3x3 with padding 1; a 2x2 max-pool folded into a layer
/// shrinks the activation that layer emits. Backward cost is taken as twice
/// the forward cost (input and weight gradients). Plain SGD keeps no
/// optimizer state.
pub fn vgg16_cifar_profile() -> ModelProfile {
    use VggLayer::*;
    let arch = [
        Conv { out_channels: 64, pool: false },
        Conv { out_channels: 64, pool: true },
        Conv { out_channels: 128, pool: false },
        Conv { out_channels: 128, pool: true },
        Conv { out_channels: 256, pool: false },
        Conv { out_channels: 256, pool: false },
        Conv { out_channels: 256, pool: true },
        Conv { out_channels: 512, pool: false },
        Conv { out_channels: 512, pool: false },
        Conv { out_channels: 512, pool: true },
        Conv { out_channels: 512, pool: false },
        Conv { out_channels: 512, pool: false },
        Conv { out_channels: 512, pool: true },
        Dense { out_features: 4096 },
        Dense { out_features: 4096 },
        Dense { out_features: 10 },
    ];

    let mut side = 32usize;
    let mut channels = 3usize;
    let mut features = 0usize;
    let mut raw = Vec::with_capacity(arch.len());
    for layer in &arch {
        let (fp, params, out_elems) = match *layer {
            Conv { out_channels, pool } => {
                let fp = 2.0 * (side * side * channels * out_channels * 9) as f64;
                let params = (9 * channels * out_channels + out_channels) as f64;
                if pool {
                    side /= 2;
                }
                channels = out_channels;
                features = side * side * channels;
                (fp, params, features)
            }
            Dense { out_features } => {
                let fp = 2.0 * (features * out_features) as f64;
                let params = (features * out_features + out_features) as f64;
                features = out_features;
                (fp, params, out_features)
            }
        };
        raw.push((fp, params, out_elems as f64));
    }

    let total_params: f64 = raw.iter().map(|r| r.1).sum();
    let layers = raw
        .into_iter()
        .map(|(fp, params, out_elems)| LayerProfile {
            fp_flops: fp,
            bp_flops: 2.0 * fp,
            activation_bytes: FP32_BYTES * out_elems,
            act_grad_bytes: FP32_BYTES * out_elems,
            param_bytes: FP32_BYTES * params,
            optimizer_state_bytes: 0.0,
            grad_variance: VGG_VARIANCE_TOTAL * params / total_params,
            grad_second_moment: VGG_SECOND_MOMENT_TOTAL * params / total_params,
        })
        .collect();
    ModelProfile::new("vgg16", layers).expect("builtin profile is valid")
}

/// The desk-scale dense network trained by [`crate::train`], in f64.
///
/// Gradient statistics default to one per layer; `hsfl estimate-params`
/// produces measured replacements.
pub fn tinymlp_profile() -> ModelProfile {
    let layers = TINY_MLP_DIMS
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0] as f64, w[1] as f64);
            LayerProfile {
                fp_flops: 2.0 * fan_in * fan_out,
                bp_flops: 4.0 * fan_in * fan_out,
                activation_bytes: F64_BYTES * fan_out,
                act_grad_bytes: F64_BYTES * fan_out,
                param_bytes: F64_BYTES * (fan_in * fan_out + fan_out),
                optimizer_state_bytes: 0.0,
                grad_variance: 1.0,
                grad_second_moment: 1.0,
            }
        })
        .collect();
    ModelProfile::new("tinymlp", layers).expect("builtin profile is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg16_has_sixteen_layers() {
        let p = vgg16_cifar_profile();
        assert_eq!(p.num_layers(), 16);
        // 13 conv layers of a CIFAR VGG-16 hold ~14.7M parameters.
        let conv_params: f64 = p.layers()[..13].iter().map(|l| l.param_bytes / 4.0).sum();
        assert_eq!(conv_params, 14_714_688.0);
        let g2: f64 = p.layers().iter().map(|l| l.grad_second_moment).sum();
        assert!((g2 - VGG_SECOND_MOMENT_TOTAL).abs() < 1e-9);
    }

    #[test]
    fn vgg16_first_layer_by_hand() {
        let first = vgg16_cifar_profile().layers()[0];
        // 32*32 outputs * 3 inputs * 64 filters * 9 taps * 2 flops
        assert_eq!(first.fp_flops, 3_538_944.0);
        assert_eq!(first.activation_bytes, 32.0 * 32.0 * 64.0 * 4.0);
        assert_eq!(first.param_bytes, (1728.0 + 64.0) * 4.0);
    }

    #[test]
    fn tinymlp_matches_dims() {
        let p = tinymlp_profile();
        assert_eq!(p.num_layers(), TINY_MLP_DIMS.len() - 1);
        assert_eq!(p.num_layers(), 4);
        let (i, o) = (TINY_MLP_DIMS[0] as f64, TINY_MLP_DIMS[1] as f64);
        assert_eq!(p.layers()[0].param_bytes, 8.0 * (i * o + o));
        assert_eq!(p.layers()[0].fp_flops, 2.0 * i * o);
    }
}
