//! Shared fixtures for the criterion benchmarks.

use hsfl_core::convergence::ConvergenceParams;
use hsfl_core::profile::{vgg16_cifar_profile, ModelProfile};
use hsfl_core::topology::{build_paper_scenario, paper_scenario, Topology};

/// The VGG-16 profile on the default evaluation topology.
pub fn paper_fixture() -> (ModelProfile, Topology, ConvergenceParams) {
    let topo = build_paper_scenario(0);
    let params = ConvergenceParams {
        beta: 1.0,
        gamma: paper_scenario::LEARNING_RATE,
        epsilon: 0.01,
        vartheta: 2.3,
        num_clients: topo.num_clients(),
    };
    (vgg16_cifar_profile(), topo, params)
}
