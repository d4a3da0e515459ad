mod support;

use hsfl_core::plan::{AggSchedule, CutVector};
use hsfl_core::topology::Topology;
use hsfl_core::train::{
    estimate_params, forward, generate_clients, tiny_mlp, train, MixtureConfig, Partition, SplitNet, TrainConfig, TINY_MLP_DIMS,
};
use support::reference::{rows, sync_model_averaging_sgd, RefMlp};

#[test]
fn unit_intervals_match_synchronous_sgd() {
    let clients = 8;
    let data = generate_clients(clients, &MixtureConfig::default(), Partition::Iid, 4).unwrap();
    let topo = Topology::uniform_tree(clients, 3, 4).unwrap();
    let mut net = SplitNet::new(tiny_mlp(), CutVector::new(vec![1, 2], 4).unwrap(), clients, 4).unwrap();
    let init = net.client_params(0).to_vec();
    let cfg = TrainConfig { rounds: 200, seed: 4, ..TrainConfig::default() };
    let trace = train(&mut net, &topo, &data, &AggSchedule::ones(3), &cfg).unwrap();
    let reference = sync_model_averaging_sgd(&TINY_MLP_DIMS, &init, &data, cfg.batch, cfg.gamma, cfg.rounds, cfg.seed);
    let dev = trace.final_aggregate.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-9, "max deviation {dev}");
}

#[test]
fn split_forward_matches_reference_monolith() {
    let data = generate_clients(1, &MixtureConfig::default(), Partition::Iid, 2).unwrap();
    let net = SplitNet::new(tiny_mlp(), CutVector::new(vec![2, 3], 4).unwrap(), 1, 2).unwrap();
    let (x, y) = data[0].gather(&(0..16).collect::<Vec<_>>());
    let fwd = forward(&net, 0, &x, &y).unwrap();
    let reference = RefMlp::from_flat(&TINY_MLP_DIMS, net.client_params(0));
    let loss = reference.loss(&rows(&x, 16), &y);
    assert!((fwd.loss - loss).abs() <= 1e-12 * loss);
    let (_, g) = reference.loss_and_grad(&rows(&x, 16), &y);
    let (_, mine) = net.mlp().loss_and_grad(net.client_params(0), &x, &y).unwrap();
    let dev = g.to_flat().iter().zip(&mine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-12);
}

#[test]
fn divergence_respects_drift_bound() {
    let clients = 8;
    let data = generate_clients(clients, &MixtureConfig::default(), Partition::Shard, 1).unwrap();
    let topo = Topology::uniform_tree(clients, 3, 2).unwrap();
    for interval in [2u64, 5, 10] {
        let mut net = SplitNet::new(tiny_mlp(), CutVector::new(vec![1, 3], 4).unwrap(), clients, 1).unwrap();
        let sched = AggSchedule::new(vec![interval, interval]).unwrap();
        let cfg = TrainConfig { rounds: 300, seed: 1, ..TrainConfig::default() };
        let trace = train(&mut net, &topo, &data, &sched, &cfg).unwrap();
        for m in 0..2 {
            let (lo, hi) = net.tier_layers(m);
            let g2: f64 = trace.layer_grad_max[lo..hi].iter().sum();
            let bound = 4.0 * cfg.gamma * cfg.gamma * (interval * interval) as f64 * g2 * 1.05;
            for r in &trace.rounds {
                assert!(r.divergence[m] <= bound, "I={interval} tier {m} round {}: {} > {bound}", r.round, r.divergence[m]);
            }
        }
    }
}

#[test]
fn estimates_feed_a_finite_round_count() {
    let clients = 4;
    let data = generate_clients(clients, &MixtureConfig::default(), Partition::Iid, 3).unwrap();
    let topo = Topology::uniform_tree(clients, 3, 2).unwrap();
    let mut net = SplitNet::new(tiny_mlp(), CutVector::new(vec![1, 2], 4).unwrap(), clients, 3).unwrap();
    let cfg = TrainConfig { rounds: 40, seed: 3, snapshot_every: 10, ..TrainConfig::default() };
    let trace = train(&mut net, &topo, &data, &AggSchedule::new(vec![2, 2]).unwrap(), &cfg).unwrap();
    let est = estimate_params(&trace.snapshots).unwrap();
    assert_eq!(est.snapshots, 4);
    assert!(est.beta > 0.0 && est.beta.is_finite());
    assert!(est.grad_second_moment.iter().all(|&g| g > 0.0));
    let profile = est.apply_to(&hsfl_core::profile::tinymlp_profile()).unwrap();
    let params = hsfl_core::convergence::ConvergenceParams {
        beta: est.beta,
        gamma: 1.0 / est.beta,
        epsilon: 1.0,
        vartheta: 1.0,
        num_clients: clients,
    };
    let eps = 2.0 * params.variance_tail(&profile) + 1e-3;
    let params = hsfl_core::convergence::ConvergenceParams { epsilon: eps, ..params };
    let r = hsfl_core::convergence::rounds_for_accuracy(&params, &profile, &CutVector::new(vec![1, 2], 4).unwrap(), &AggSchedule::ones(3));
    assert!(r.is_ok());
}

#[test]
fn identical_full_batch_clients_have_zero_variance() {
    let one = generate_clients(1, &MixtureConfig { samples_per_client: 16, ..MixtureConfig::default() }, Partition::Iid, 0).unwrap();
    let data = vec![one[0].clone(); 2];
    let topo = Topology::uniform_tree(2, 3, 2).unwrap();
    let mut net = SplitNet::new(tiny_mlp(), CutVector::new(vec![1, 2], 4).unwrap(), 2, 0).unwrap();
    let cfg = TrainConfig { rounds: 6, batch: 16, snapshot_every: 2, ..TrainConfig::default() };
    let trace = train(&mut net, &topo, &data, &AggSchedule::ones(3), &cfg).unwrap();
    let est = estimate_params(&trace.snapshots).unwrap();
    assert!(est.grad_variance.iter().all(|&v| v < 1e-28), "{:?}", est.grad_variance);
}

fn final_loss(seed: u64, interval: u64) -> f64 {
    let clients = 8;
    let data = generate_clients(clients, &MixtureConfig::default(), Partition::Shard, seed).unwrap();
    let topo = Topology::uniform_tree(clients, 3, 4).unwrap();
    let mut net = SplitNet::new(tiny_mlp(), CutVector::new(vec![1, 3], 4).unwrap(), clients, seed).unwrap();
    let cfg = TrainConfig { rounds: 500, seed, ..TrainConfig::default() };
    let trace = train(&mut net, &topo, &data, &AggSchedule::new(vec![interval, interval]).unwrap(), &cfg).unwrap();
    trace.rounds.last().unwrap().loss
}

#[test]
fn frequent_aggregation_trains_better_on_shards() {
    let wins = (0..5u64)
        .filter(|&seed| {
            let (a, b) = (final_loss(seed, 1), final_loss(seed, 100));
            eprintln!("seed {seed}: I=1 {a:.6} I=100 {b:.6}");
            a < b
        })
        .count();
    assert!(wins >= 4, "I=(1,1) won {wins}/5 seeds");
}
