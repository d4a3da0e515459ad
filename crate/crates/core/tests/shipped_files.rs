use std::path::PathBuf;

use hsfl_core::profile::{tinymlp_profile, vgg16_cifar_profile};
use hsfl_core::scenario::ScenarioConfig;
use hsfl_core::topology::build_paper_scenario;
use hsfl_core::{ModelProfile, Topology};

fn repo(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn vgg16_profile_file_matches_builtin() {
    let p = ModelProfile::load(repo("profiles/vgg16.profile")).unwrap();
    assert_eq!(p.num_layers(), 16);
    assert_eq!(p, vgg16_cifar_profile());
}

#[test]
fn tinymlp_profile_file_matches_builtin() {
    assert_eq!(ModelProfile::load(repo("profiles/tinymlp.profile")).unwrap(), tinymlp_profile());
}

#[test]
fn topology_file_matches_seeded_scenario() {
    assert_eq!(Topology::load(repo("configs/paper_topology.toml")).unwrap(), build_paper_scenario(0));
}

#[test]
fn scenario_file_resolves_to_the_builtin_scenario() {
    let cfg = ScenarioConfig::load(repo("configs/paper_scenario.toml")).unwrap();
    let s = cfg.resolve().unwrap();
    assert_eq!(s.profile, vgg16_cifar_profile());
    assert_eq!(s.topology, build_paper_scenario(0));
    assert_eq!(s.batch, 16);
    assert_eq!(s.params.gamma, 5e-4);
    assert_eq!(s.params.num_clients, 20);
}
