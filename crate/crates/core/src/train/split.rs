//! Per-client replicas of a network split into tier blocks.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::mlp::{BlockCache, Mlp};
use crate::error::{HsflError, Result};
use crate::plan::CutVector;
use crate::topology::Topology;

/// Seed stream for the shared initial parameters.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitNet {
    mlp: Mlp,
    cut: CutVector,
    /// Full parameter vector of every client; tier blocks are the ranges
    /// given by [`SplitNet::tier_range`].
    clients: Vec<Vec<f64>>,
    round: u64,
}

/// Everything a client's backward pass needs from its forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitForward {
    /// One cache per tier, bottom first; each tier's output is the smashed
    /// data sent upward.
    pub caches: Vec<BlockCache>,
    pub loss: f64,
    dlogits: Vec<f64>,
}

impl SplitForward {
    /// Activations emitted by tier `m`.
    pub fn activation(&self, m: usize) -> &[f64] {
        self.caches[m].output()
    }
}

impl SplitNet {
    /// Every client starts from the same seeded initialization.
    pub fn new(mlp: Mlp, cut: CutVector, num_clients: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let init = mlp.init_params(&mut rng);
        Self::from_params(mlp, cut, vec![init; num_clients])
    }

    pub fn from_params(mlp: Mlp, cut: CutVector, clients: Vec<Vec<f64>>) -> Result<Self> {
        let cut = CutVector::new(cut.cuts().to_vec(), mlp.num_layers())
            .map_err(|e| HsflError::ModelConstruction(format!("cut does not fit the network: {e}")))?;
        if clients.is_empty() || clients.iter().any(|p| p.len() != mlp.num_params()) {
            return Err(HsflError::ModelConstruction("every client needs a full parameter vector".to_string()));
        }
        Ok(SplitNet { mlp, cut, clients, round: 0 })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn cut(&self) -> &CutVector {
        &self.cut
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn num_tiers(&self) -> usize {
        self.cut.num_tiers()
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub(crate) fn advance_round(&mut self) {
        self.round += 1;
    }

    /// Layers `lo..hi` hosted by tier `m`.
    pub fn tier_layers(&self, m: usize) -> (usize, usize) {
        self.cut.tier_bounds(m, self.mlp.num_layers())
    }

    pub fn tier_range(&self, m: usize) -> Range<usize> {
        let (lo, hi) = self.tier_layers(m);
        self.mlp.block_range(lo, hi)
    }

    pub fn client_params(&self, n: usize) -> &[f64] {
        &self.clients[n]
    }

    pub fn block(&self, n: usize, m: usize) -> &[f64] {
        &self.clients[n][self.tier_range(m)]
    }

    pub fn set_block(&mut self, n: usize, m: usize, values: &[f64]) {
        let r = self.tier_range(m);
        self.clients[n][r].copy_from_slice(values);
    }

    pub(crate) fn clients_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.clients
    }

    /// Concatenation of the per-tier virtual aggregates.
    pub fn aggregate_params(&self, topo: &Topology) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.mlp.num_params());
        for m in 0..self.num_tiers() {
            out.extend(virtual_aggregate(self, topo, m));
        }
        out
    }
}

pub(crate) fn forward_params(mlp: &Mlp, cut: &CutVector, params: &[f64], x: &[f64], y: &[usize]) -> Result<SplitForward> {
    let batch = y.len();
    let mut caches = Vec::with_capacity(cut.num_tiers());
    for m in 0..cut.num_tiers() {
        let (lo, hi) = cut.tier_bounds(m, mlp.num_layers());
        let input = if m == 0 { x } else { caches.last().map(BlockCache::output).unwrap_or(x) };
        let cache = mlp.forward_layers(params, lo, hi, input, batch)?;
        caches.push(cache);
    }
    let (loss, dlogits) = mlp.softmax_cross_entropy(caches.last().expect("at least one tier").output(), y)?;
    Ok(SplitForward { caches, loss, dlogits })
}

/// Gradient of the mini-batch loss, computed top tier first; each tier hands
/// the gradient w.r.t. its input down to the tier below.
pub(crate) fn backward_params(mlp: &Mlp, params: &[f64], fwd: &SplitForward) -> Vec<f64> {
    let mut grad = vec![0.0; mlp.num_params()];
    let mut upstream = fwd.dlogits.clone();
    for cache in fwd.caches.iter().rev() {
        upstream = mlp.backward_layers(params, cache, &upstream, &mut grad);
    }
    grad
}

pub(crate) fn sgd_step(params: &mut [f64], grad: &[f64], gamma: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= gamma * g;
    }
}

/// Tier-by-tier forward pass of client `n` on a mini-batch.
pub fn forward(net: &SplitNet, n: usize, x: &[f64], y: &[usize]) -> Result<SplitForward> {
    forward_params(&net.mlp, &net.cut, &net.clients[n], x, y)
}

/// Exact mini-batch gradient through every tier followed by a plain SGD step
/// on each of client `n`'s blocks. Returns the gradient.
pub fn backward_and_step(net: &mut SplitNet, n: usize, fwd: &SplitForward, gamma: f64) -> Vec<f64> {
    let grad = backward_params(&net.mlp, &net.clients[n], fwd);
    sgd_step(&mut net.clients[n], &grad, gamma);
    grad
}

fn check_topology(net: &SplitNet, topo: &Topology, m: usize) {
    assert_eq!(topo.num_clients(), net.num_clients(), "topology and network disagree on the client count");
    assert_eq!(topo.num_tiers(), net.num_tiers(), "topology and network disagree on the tier count");
    assert!(m < net.num_tiers(), "tier {m} out of range");
}

/// Unweighted mean of the listed clients' tier-`m` blocks, summed in
/// ascending client order.
fn entity_mean(net: &SplitNet, clients: &[usize], m: usize) -> Vec<f64> {
    let mut order = clients.to_vec();
    order.sort_unstable();
    let r = net.tier_range(m);
    let mut sum = vec![0.0; r.len()];
    for &n in &order {
        for (s, v) in sum.iter_mut().zip(&net.clients[n][r.clone()]) {
            *s += v;
        }
    }
    let k = order.len() as f64;
    sum.iter_mut().for_each(|s| *s /= k);
    sum
}

/// Replaces every hosted client's tier-`m` block by the mean over the
/// clients its entity hosts.
pub fn entity_average(net: &mut SplitNet, topo: &Topology, m: usize) {
    check_topology(net, topo, m);
    for entity in &topo.tiers()[m].entities {
        if entity.clients.len() <= 1 {
            continue;
        }
        let mean = entity_mean(net, &entity.clients, m);
        for &n in &entity.clients {
            net.set_block(n, m, &mean);
        }
    }
}

fn weighted_entity_mean(net: &SplitNet, topo: &Topology, m: usize) -> Vec<f64> {
    let total = net.num_clients() as f64;
    let mut out = vec![0.0; net.tier_range(m).len()];
    for entity in &topo.tiers()[m].entities {
        let w = entity.clients.len() as f64 / total;
        for (o, v) in out.iter_mut().zip(entity_mean(net, &entity.clients, m)) {
            *o += w * v;
        }
    }
    out
}

/// Fed-server aggregation of tier `m`: the client-count weighted mean of the
/// entity blocks, broadcast to every client.
pub fn fed_aggregate(net: &mut SplitNet, topo: &Topology, m: usize) {
    check_topology(net, topo, m);
    let merged = weighted_entity_mean(net, topo, m);
    for n in 0..net.num_clients() {
        net.set_block(n, m, &merged);
    }
}

/// The tier-`m` block of the virtual aggregate. When all clients already
/// agree this is their common block, bit for bit.
pub fn virtual_aggregate(net: &SplitNet, topo: &Topology, m: usize) -> Vec<f64> {
    check_topology(net, topo, m);
    let first = net.block(0, m);
    if (1..net.num_clients()).all(|n| net.block(n, m) == first) {
        return first.to_vec();
    }
    weighted_entity_mean(net, topo, m)
}

/// `max_n ‖w̄_m − w_{m,n}‖²`.
pub fn divergence(net: &SplitNet, aggregate: &[f64], m: usize) -> f64 {
    (0..net.num_clients())
        .map(|n| net.block(n, m).iter().zip(aggregate).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{Allocation, Entity, Tier};
    use crate::train::mlp::Activation;
    use crate::train::TINY_MLP_DIMS;

    fn entity(clients: Vec<usize>) -> Entity {
        Entity {
            clients,
            compute_flops: 1.0,
            uplink_rate: 1.0,
            downlink_rate: 1.0,
            fed_uplink_rate: 1.0,
            fed_downlink_rate: 1.0,
            memory_bytes: f64::INFINITY,
        }
    }

    /// One scalar parameter per tier: a 1-1-1 identity network.
    fn scalar_net(values: &[f64]) -> SplitNet {
        let mlp = Mlp::new(vec![1, 1, 1], Activation::Identity).unwrap();
        let cut = CutVector::new(vec![1], 2).unwrap();
        let clients = values.iter().map(|&v| vec![v, 0.0, v, 0.0]).collect();
        SplitNet::from_params(mlp, cut, clients).unwrap()
    }

    fn two_tier(groups: Vec<Vec<usize>>, n: usize) -> Topology {
        let tiers = vec![
            Tier { entities: groups.into_iter().map(entity).collect() },
            Tier { entities: vec![entity((0..n).collect())] },
        ];
        Topology::from_parts(n, tiers, Allocation::Even)
    }

    #[test]
    fn entity_mean_examples() {
        let topo = two_tier(vec![vec![0, 1, 2]], 3);
        let mut net = scalar_net(&[1.0, 2.0, 3.0]);
        entity_average(&mut net, &topo, 0);
        for n in 0..3 {
            assert_eq!(net.block(n, 0), &[2.0, 0.0]);
        }
        let topo = two_tier(vec![vec![0, 1]], 2);
        let mut net = scalar_net(&[0.7, -0.7]);
        entity_average(&mut net, &topo, 0);
        assert_eq!(net.block(0, 0), &[0.0, 0.0]);
        let topo = two_tier(vec![vec![0], vec![1]], 2);
        let mut net = scalar_net(&[0.3, 0.9]);
        let before = net.clone();
        entity_average(&mut net, &topo, 0);
        assert_eq!(net, before);
    }

    #[test]
    fn fed_weights_follow_client_counts() {
        let topo = two_tier(vec![vec![0, 1, 2], vec![3]], 4);
        let mut net = scalar_net(&[0.0, 0.0, 0.0, 4.0]);
        fed_aggregate(&mut net, &topo, 0);
        for n in 0..4 {
            assert_eq!(net.block(n, 0)[0], 1.0);
        }
        let mut same = scalar_net(&[2.5; 4]);
        let before = same.clone();
        fed_aggregate(&mut same, &topo, 0);
        assert_eq!(same, before);
    }

    #[test]
    fn single_entity_fed_equals_entity_average() {
        let topo = two_tier(vec![vec![0, 1]], 2);
        let mut a = scalar_net(&[0.1, 0.35]);
        let mut b = a.clone();
        entity_average(&mut a, &topo, 1);
        fed_aggregate(&mut b, &topo, 1);
        assert_eq!(a, b);
    }

    #[test]
    fn split_pass_matches_unsplit_pass() {
        let mlp = Mlp::new(TINY_MLP_DIMS.to_vec(), Activation::Tanh).unwrap();
        let cut = CutVector::new(vec![1, 3], 4).unwrap();
        let net = SplitNet::new(mlp.clone(), cut, 1, 9).unwrap();
        let x: Vec<f64> = (0..4 * 16).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let y = vec![0, 1, 1, 0];
        let fwd = forward(&net, 0, &x, &y).unwrap();
        let (loss, grad) = mlp.loss_and_grad(net.client_params(0), &x, &y).unwrap();
        assert_eq!(fwd.loss, loss);
        assert_eq!(fwd.activation(0).len(), 4 * 32);
        assert_eq!(fwd.activation(1).len(), 4 * 32);
        let mut stepped = net.clone();
        let g = backward_and_step(&mut stepped, 0, &fwd, 0.0);
        assert_eq!(g, grad);
        assert_eq!(stepped, net);
    }
}
