use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hsfl_core::train::{generate_clients, tiny_mlp, train, MixtureConfig, Partition, SplitNet, TrainConfig};
use hsfl_core::{AggSchedule, CutVector, Topology};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn training(c: &mut Criterion) {
    let mlp = tiny_mlp();
    let params = mlp.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    let data = generate_clients(8, &MixtureConfig::default(), Partition::Iid, 0).unwrap();
    let (x, y) = data[0].gather(&(0..16).collect::<Vec<_>>());
    c.bench_function("mlp_loss_and_grad_b16", |b| b.iter(|| mlp.loss_and_grad(black_box(&params), &x, &y).unwrap()));

    let topo = Topology::uniform_tree(8, 3, 4).unwrap();
    let sched = AggSchedule::new(vec![5, 2]).unwrap();
    let cfg = TrainConfig { rounds: 20, ..TrainConfig::default() };
    c.bench_function("train_8_clients_20_rounds", |b| {
        b.iter(|| {
            let mut net = SplitNet::new(tiny_mlp(), CutVector::new(vec![1, 2], 4).unwrap(), 8, 0).unwrap();
            train(&mut net, &topo, &data, &sched, &cfg).unwrap()
        })
    });
}

criterion_group!(benches, training);
criterion_main!(benches);
