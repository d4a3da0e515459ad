//! Desk-scale split training of a small dense network.

pub mod data;
pub mod estimate;
pub mod mlp;
pub mod run;
pub mod split;

pub use data::{generate_clients, ClientDataset, ClientSampler, MixtureConfig, Partition};
pub use estimate::{estimate_params, smoothness, GradientSnapshot, ParamEstimates};
pub use mlp::{Activation, BlockCache, Mlp};
pub use run::{train, RoundRecord, TrainConfig, TrainTrace};
pub use split::{backward_and_step, divergence, entity_average, fed_aggregate, forward, virtual_aggregate, SplitForward, SplitNet};

/// Layer widths of the built-in tiny network: 16 inputs, four dense layers, 2 classes.
pub const TINY_MLP_DIMS: [usize; 5] = [16, 32, 64, 32, 2];

/// The built-in tiny network with tanh hidden units.
pub fn tiny_mlp() -> Mlp {
    Mlp::new(TINY_MLP_DIMS.to_vec(), Activation::Tanh).expect("fixed widths are valid")
}
