//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the solvers under test; objective values are
//! recomputed from their definitions with straight-line code.

#![allow(dead_code, clippy::needless_range_loop)]

use hsfl_core::convergence::{ConvergenceParams, ObjectiveConstants};
use hsfl_core::profile::{LayerProfile, ModelProfile};
use hsfl_core::topology::{Allocation, Entity, Tier, Topology};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Θ′ from its definition; `None` when the denominator is not positive.
pub fn theta_prime_ref(params: &ConvergenceParams, consts: &ObjectiveConstants, intervals: &[u64]) -> Option<f64> {
    let mut cost = consts.a;
    let mut drift = 0.0;
    for m in 0..intervals.len() {
        let i = intervals[m] as f64;
        cost += consts.b[m] / i;
        if intervals[m] > 1 {
            drift += 4.0 * params.beta * params.beta * params.gamma * params.gamma * consts.d[m] * i * i;
        }
    }
    let denom = params.gamma * (consts.c - drift);
    if denom > 0.0 {
        Some(2.0 * params.vartheta * cost / denom)
    } else {
        None
    }
}

/// Odometer over `{1..=max}^dims` in lexicographic order.
pub fn for_each_grid_point(dims: usize, max: u64, mut f: impl FnMut(&[u64])) {
    let mut point = vec![1u64; dims];
    loop {
        f(&point);
        let mut k = dims;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            if point[k] < max {
                point[k] += 1;
                break;
            }
            point[k] = 1;
        }
    }
}

/// Exhaustive interval search; pinned tiers only take the value 1.
pub fn grid_ma(params: &ConvergenceParams, consts: &ObjectiveConstants, pinned: &[bool], max: u64) -> Option<(Vec<u64>, f64)> {
    let mut best: Option<(Vec<u64>, f64)> = None;
    for_each_grid_point(consts.b.len(), max, |p| {
        if p.iter().zip(pinned).any(|(&i, &pin)| pin && i != 1) {
            return;
        }
        if let Some(v) = theta_prime_ref(params, consts, p) {
            if best.as_ref().is_none_or(|(_, b)| v < *b) {
                best = Some((p.to_vec(), v));
            }
        }
    });
    best
}

/// Random objective constants whose relaxed optimum sits well inside `{1..64}`.
pub fn random_ma_instance(rng: &mut ChaCha8Rng, tiers_below_top: usize) -> (ConvergenceParams, ObjectiveConstants) {
    let params = ConvergenceParams {
        beta: rng.random_range(0.5..2.0),
        gamma: rng.random_range(0.01..0.05),
        epsilon: 1.0,
        vartheta: rng.random_range(0.5..3.0),
        num_clients: 20,
    };
    let a = rng.random_range(0.5..2.0);
    let c = rng.random_range(0.5..1.0);
    let b = (0..tiers_below_top).map(|_| a * rng.random_range(0.05..3.0)).collect();
    let d = (0..tiers_below_top).map(|_| rng.random_range(0.05..1.0)).collect();
    (params, ObjectiveConstants { a, b, c, d })
}

fn layer(rng: &mut ChaCha8Rng) -> LayerProfile {
    LayerProfile {
        fp_flops: rng.random_range(1e8..5e9),
        bp_flops: rng.random_range(2e8..1e10),
        activation_bytes: rng.random_range(1e3..3e5),
        act_grad_bytes: rng.random_range(1e3..3e5),
        param_bytes: rng.random_range(1e4..5e7),
        optimizer_state_bytes: 0.0,
        grad_variance: rng.random_range(0.0..0.2),
        grad_second_moment: rng.random_range(0.01..2.0),
    }
}

pub fn random_profile(rng: &mut ChaCha8Rng, layers: usize) -> ModelProfile {
    let layers = (0..layers).map(|_| layer(rng)).collect();
    ModelProfile::new("random", layers).expect("random profile is valid")
}

/// Three tiers: `devices` clients, `edges` edge servers sharing them evenly,
/// one cloud. Rates and capacities vary per entity.
pub fn random_three_tier(rng: &mut ChaCha8Rng, devices: usize, edges: usize) -> Topology {
    let mut device_entities = Vec::new();
    for n in 0..devices {
        device_entities.push(Entity {
            clients: vec![n],
            compute_flops: rng.random_range(0.3e12..0.8e12),
            uplink_rate: rng.random_range(50e6..100e6),
            downlink_rate: rng.random_range(200e6..400e6),
            fed_uplink_rate: rng.random_range(50e6..100e6),
            fed_downlink_rate: rng.random_range(200e6..400e6),
            memory_bytes: f64::INFINITY,
        });
    }
    let per_edge = devices / edges;
    let mut edge_entities = Vec::new();
    for j in 0..edges {
        let lo = j * per_edge;
        let hi = if j + 1 == edges { devices } else { lo + per_edge };
        let rate = rng.random_range(300e6..500e6);
        edge_entities.push(Entity {
            clients: (lo..hi).collect(),
            compute_flops: rng.random_range(2e12..8e12),
            uplink_rate: rate,
            downlink_rate: rate,
            fed_uplink_rate: rng.random_range(300e6..500e6),
            fed_downlink_rate: rng.random_range(300e6..500e6),
            memory_bytes: f64::INFINITY,
        });
    }
    let cloud = Entity {
        clients: (0..devices).collect(),
        compute_flops: rng.random_range(20e12..80e12),
        uplink_rate: 1.0,
        downlink_rate: 1.0,
        fed_uplink_rate: 1.0,
        fed_downlink_rate: 1.0,
        memory_bytes: f64::INFINITY,
    };
    Topology::new(
        devices,
        vec![Tier { entities: device_entities }, Tier { entities: edge_entities }, Tier { entities: vec![cloud] }],
        Allocation::Even,
    )
    .expect("random topology is valid")
}

/// Per-round split latency recomputed from first principles for the even
/// allocation: every per-client share is the entity value divided by the
/// number of clients it hosts.
pub fn split_round_latency_ref(profile: &ModelProfile, topo: &Topology, cuts: &[usize], batch: usize) -> f64 {
    let layers = profile.layers();
    let bounds: Vec<usize> = std::iter::once(0).chain(cuts.iter().copied()).chain(std::iter::once(layers.len())).collect();
    let b = batch as f64;
    let mut worst: f64 = 0.0;
    for n in 0..topo.num_clients() {
        let mut total = 0.0;
        for m in 0..topo.num_tiers() {
            let tier = &topo.tiers()[m];
            let entity = tier.entities.iter().find(|e| e.clients.contains(&n)).expect("client hosted");
            let share = entity.clients.len() as f64;
            let f = entity.compute_flops / share;
            let mut fp = 0.0;
            let mut bp = 0.0;
            for l in bounds[m]..bounds[m + 1] {
                fp += b * layers[l].fp_flops;
                bp += b * layers[l].bp_flops;
            }
            total += fp / f + bp / f;
            if m + 1 < topo.num_tiers() {
                let cut = bounds[m + 1];
                let up = entity.uplink_rate / share;
                let down = entity.downlink_rate / share;
                total += b * 8.0 * layers[cut - 1].activation_bytes / up;
                total += b * 8.0 * layers[cut - 1].act_grad_bytes / down;
            }
        }
        worst = worst.max(total);
    }
    worst
}

/// Aggregation latency of tier `m` recomputed from first principles.
pub fn aggregation_latency_ref(profile: &ModelProfile, topo: &Topology, cuts: &[usize], m: usize) -> f64 {
    let tier = &topo.tiers()[m];
    if tier.entities.len() <= 1 {
        return 0.0;
    }
    let layers = profile.layers();
    let lo = if m == 0 { 0 } else { cuts[m - 1] };
    let hi = cuts[m];
    let bytes: f64 = layers[lo..hi].iter().map(|l| l.param_bytes).sum();
    let up = tier.entities.iter().map(|e| 8.0 * bytes / e.fed_uplink_rate).fold(0.0, f64::max);
    let down = tier.entities.iter().map(|e| 8.0 * bytes / e.fed_downlink_rate).fold(0.0, f64::max);
    up + down
}

/// A dense tanh network with nested-vector weights, written independently of
/// the crate's flat-vector implementation.
#[derive(Debug, Clone)]
pub struct RefMlp {
    /// `weights[l][o][i]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

impl RefMlp {
    /// Reads the flat layout: per layer, row-major weights then biases.
    pub fn from_flat(dims: &[usize], flat: &[f64]) -> Self {
        let mut at = 0;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (inp, out) = (dims[l], dims[l + 1]);
            let mut w = vec![vec![0.0; inp]; out];
            for row in w.iter_mut() {
                for v in row.iter_mut() {
                    *v = flat[at];
                    at += 1;
                }
            }
            let b = flat[at..at + out].to_vec();
            at += out;
            weights.push(w);
            biases.push(b);
        }
        assert_eq!(at, flat.len());
        RefMlp { weights, biases }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for row in w {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(b);
        }
        out
    }

    fn forward_one(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = acts.last().unwrap();
            let z: Vec<f64> = w
                .iter()
                .zip(b)
                .map(|(row, bias)| bias + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>())
                .collect();
            acts.push(if l == last { z } else { z.iter().map(|v| v.tanh()).collect() });
        }
        acts
    }

    fn log_softmax(z: &[f64]) -> Vec<f64> {
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        z.iter().map(|v| v - lse).collect()
    }

    /// Mean cross-entropy over the rows of `x`.
    pub fn loss(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(xi, &yi)| -Self::log_softmax(self.forward_one(xi).last().unwrap())[yi])
            .sum::<f64>()
            / y.len() as f64
    }

    /// Mean loss and its gradient in the same nested shape.
    pub fn loss_and_grad(&self, x: &[Vec<f64>], y: &[usize]) -> (f64, RefMlp) {
        let mut gw: Vec<Vec<Vec<f64>>> = self.weights.iter().map(|w| vec![vec![0.0; w[0].len()]; w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let scale = 1.0 / y.len() as f64;
        let mut loss = 0.0;
        let last = self.weights.len() - 1;
        for (xi, &yi) in x.iter().zip(y) {
            let acts = self.forward_one(xi);
            let logp = Self::log_softmax(acts.last().unwrap());
            loss -= logp[yi];
            let mut delta: Vec<f64> =
                logp.iter().enumerate().map(|(c, lp)| (lp.exp() - if c == yi { 1.0 } else { 0.0 }) * scale).collect();
            for l in (0..=last).rev() {
                if l != last {
                    delta = delta.iter().zip(&acts[l + 1]).map(|(d, a)| d * (1.0 - a * a)).collect();
                }
                let input = &acts[l];
                for (o, d) in delta.iter().enumerate() {
                    gb[l][o] += d;
                    for (i, xv) in input.iter().enumerate() {
                        gw[l][o][i] += d * xv;
                    }
                }
                let mut down = vec![0.0; input.len()];
                for (o, d) in delta.iter().enumerate() {
                    for (i, dv) in down.iter_mut().enumerate() {
                        *dv += d * self.weights[l][o][i];
                    }
                }
                delta = down;
            }
        }
        (loss * scale, RefMlp { weights: gw, biases: gb })
    }
}

pub fn rows(x: &[f64], dim: usize) -> Vec<Vec<f64>> {
    x.chunks(dim).map(|c| c.to_vec()).collect()
}

/// Synchronous parallel SGD: every client steps from the shared model on its
/// own mini-batch and the full models are averaged every round.
pub fn sync_model_averaging_sgd(
    dims: &[usize],
    init: &[f64],
    datasets: &[hsfl_core::train::ClientDataset],
    batch: usize,
    gamma: f64,
    rounds: u64,
    seed: u64,
) -> Vec<f64> {
    let mut samplers: Vec<_> = (0..datasets.len()).map(|n| hsfl_core::train::ClientSampler::new(seed, n)).collect();
    let mut w = init.to_vec();
    for _ in 0..rounds {
        let mut next = vec![0.0; w.len()];
        for (n, data) in datasets.iter().enumerate() {
            let picked = samplers[n].next_batch(data.len(), batch);
            let (x, y) = data.gather(&picked);
            let model = RefMlp::from_flat(dims, &w);
            let (_, g) = model.loss_and_grad(&rows(&x, data.dim), &y);
            for (acc, (wv, gv)) in next.iter_mut().zip(w.iter().zip(g.to_flat())) {
                *acc += wv - gamma * gv;
            }
        }
        let count = datasets.len() as f64;
        w = next.into_iter().map(|v| v / count).collect();
    }
    w
}

/// Objective constants recomputed with the reference latency code.
pub fn objective_constants_ref(
    params: &ConvergenceParams,
    profile: &ModelProfile,
    topo: &Topology,
    cuts: &[usize],
    batch: usize,
) -> ObjectiveConstants {
    let layers = profile.layers();
    let sigma: f64 = layers.iter().map(|l| l.grad_variance).sum();
    let bounds: Vec<usize> = std::iter::once(0).chain(cuts.iter().copied()).collect();
    ObjectiveConstants {
        a: split_round_latency_ref(profile, topo, cuts, batch),
        b: (0..cuts.len()).map(|m| aggregation_latency_ref(profile, topo, cuts, m)).collect(),
        c: params.epsilon - params.beta * params.gamma * sigma / params.num_clients as f64,
        d: (0..cuts.len())
            .map(|m| layers[bounds[m]..cuts[m]].iter().map(|l| l.grad_second_moment).sum())
            .collect(),
    }
}

/// Every strictly increasing cut vector, lexicographic order.
pub fn all_cuts(layers: usize, tiers: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, left: usize, layers: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(prefix.clone());
            return;
        }
        for c in start..layers {
            prefix.push(c);
            rec(c + 1, left - 1, layers, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(1, tiers - 1, layers, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive joint search over cuts and intervals `{1..=max}`.
pub fn joint_brute_force(
    params: &ConvergenceParams,
    profile: &ModelProfile,
    topo: &Topology,
    batch: usize,
    max: u64,
) -> Option<(Vec<usize>, Vec<u64>, f64)> {
    let mut best: Option<(Vec<usize>, Vec<u64>, f64)> = None;
    for cuts in all_cuts(profile.num_layers(), topo.num_tiers()) {
        let consts = objective_constants_ref(params, profile, topo, &cuts, batch);
        for_each_grid_point(cuts.len(), max, |p| {
            if let Some(v) = theta_prime_ref(params, &consts, p) {
                if best.as_ref().is_none_or(|b| v < b.2) {
                    best = Some((cuts.clone(), p.to_vec(), v));
                }
            }
        });
    }
    best
}
