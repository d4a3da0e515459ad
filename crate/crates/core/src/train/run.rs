//! The round loop: local steps, per-entity averaging, periodic fed-server
//! aggregation, and evaluation on the virtual aggregate.

use rayon::prelude::*;
use serde::Serialize;

use super::data::{ClientDataset, ClientSampler};
use super::estimate::GradientSnapshot;
use super::split::{backward_params, divergence, entity_average, fed_aggregate, forward_params, sgd_step, virtual_aggregate, SplitNet};
use crate::error::{HsflError, Result};
use crate::plan::AggSchedule;
use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub batch: usize,
    pub rounds: u64,
    /// Seeds the per-client mini-batch samplers.
    pub seed: u64,
    /// Collect a gradient snapshot every this many rounds; 0 disables.
    pub snapshot_every: u64,
    /// Rows of the pooled data used for full-batch probe gradients.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { gamma: 0.05, batch: 16, rounds: 200, seed: 0, snapshot_every: 0, probe_size: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: u64,
    /// Mean loss of the virtual aggregate over the pooled client data.
    pub loss: f64,
    /// `max_n ‖w̄_m − w_{m,n}‖²` for every tier after this round's averaging.
    pub divergence: Vec<f64>,
    /// Tiers the fed server aggregated this round.
    pub aggregated: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    pub initial_loss: f64,
    pub rounds: Vec<RoundRecord>,
    /// Largest squared stochastic-gradient norm seen per layer.
    pub layer_grad_max: Vec<f64>,
    pub snapshots: Vec<GradientSnapshot>,
    pub final_aggregate: Vec<f64>,
}

struct Pooled {
    x: Vec<f64>,
    y: Vec<usize>,
}

fn pool(datasets: &[ClientDataset]) -> Pooled {
    Pooled {
        x: datasets.iter().flat_map(|d| d.x.iter().copied()).collect(),
        y: datasets.iter().flat_map(|d| d.y.iter().copied()).collect(),
    }
}

struct ClientStep {
    grad: Vec<f64>,
    /// Full-batch gradient of the client's own data at the same point.
    local_full: Option<Vec<f64>>,
}

/// Runs the round loop.
pub fn train(net: &mut SplitNet, topo: &Topology, datasets: &[ClientDataset], sched: &AggSchedule, cfg: &TrainConfig) -> Result<TrainTrace> {
    if topo.num_clients() != net.num_clients() || datasets.len() != net.num_clients() {
        return Err(HsflError::invalid("network, topology and datasets disagree on the client count"));
    }
    if topo.num_tiers() != net.num_tiers() || sched.num_tiers() != net.num_tiers() {
        return Err(HsflError::invalid("network, topology and schedule disagree on the tier count"));
    }
    if cfg.batch == 0 || datasets.iter().any(|d| d.len() < cfg.batch) {
        return Err(HsflError::invalid("every client needs at least one full mini-batch of data"));
    }
    if let Some(d) = datasets.iter().find(|d| d.dim != net.mlp().input_dim()) {
        return Err(HsflError::ModelConstruction(format!("data has {} features, network expects {}", d.dim, net.mlp().input_dim())));
    }
    if !(cfg.gamma >= 0.0) {
        return Err(HsflError::invalid("learning rate must be >= 0"));
    }

    let tiers = net.num_tiers();
    let mlp = net.mlp().clone();
    let cut = net.cut().clone();
    let pooled = pool(datasets);
    let probe = cfg.probe_size.min(pooled.y.len()).max(1);
    let mut samplers: Vec<ClientSampler> = (0..net.num_clients()).map(|n| ClientSampler::new(cfg.seed, n)).collect();

    let initial_loss = mlp.loss(&net.aggregate_params(topo), &pooled.x, &pooled.y)?;
    let mut layer_grad_max = vec![0.0f64; mlp.num_layers()];
    let mut records = Vec::with_capacity(cfg.rounds as usize);
    let mut snapshots = Vec::new();

    for _ in 0..cfg.rounds {
        net.advance_round();
        let t = net.round();
        let snapshot = cfg.snapshot_every > 0 && (t - 1).is_multiple_of(cfg.snapshot_every);
        let aggregate_before = if snapshot { Some(net.aggregate_params(topo)) } else { None };

        let steps: Vec<Result<ClientStep>> = net
            .clients_mut()
            .par_iter_mut()
            .zip(samplers.par_iter_mut())
            .zip(datasets.par_iter())
            .map(|((params, sampler), data)| {
                let rows = sampler.next_batch(data.len(), cfg.batch);
                let (x, y) = data.gather(&rows);
                let fwd = forward_params(&mlp, &cut, params, &x, &y)?;
                let grad = backward_params(&mlp, params, &fwd);
                let local_full = if snapshot { Some(mlp.loss_and_grad(params, &data.x, &data.y)?.1) } else { None };
                sgd_step(params, &grad, cfg.gamma);
                Ok(ClientStep { grad, local_full })
            })
            .collect();
        let steps: Vec<ClientStep> = steps.into_iter().collect::<Result<_>>()?;

        for step in &steps {
            for (max, v) in layer_grad_max.iter_mut().zip(mlp.layer_sq_norms(&step.grad)) {
                *max = max.max(v);
            }
        }
        if let Some(w) = aggregate_before {
            let (loss, full_gradient) = mlp.loss_and_grad(&w, &pooled.x[..probe * mlp.input_dim()], &pooled.y[..probe])?;
            let stochastic_sq = steps.iter().map(|s| mlp.layer_sq_norms(&s.grad)).collect();
            let deviation_sq = steps
                .iter()
                .map(|s| {
                    let full = s.local_full.as_ref().expect("snapshot round computes local gradients");
                    let diff: Vec<f64> = s.grad.iter().zip(full).map(|(a, b)| a - b).collect();
                    mlp.layer_sq_norms(&diff)
                })
                .collect();
            snapshots.push(GradientSnapshot { round: t, aggregate: w, probe_loss: loss, full_gradient, stochastic_sq, deviation_sq });
        }

        for m in 0..tiers {
            entity_average(net, topo, m);
        }
        let mut aggregated = Vec::new();
        for m in 0..tiers - 1 {
            if t.is_multiple_of(sched.interval(m)) {
                fed_aggregate(net, topo, m);
                aggregated.push(m);
            }
        }

        let mut aggregate = Vec::with_capacity(mlp.num_params());
        let mut div = Vec::with_capacity(tiers);
        for m in 0..tiers {
            let block = virtual_aggregate(net, topo, m);
            div.push(divergence(net, &block, m));
            aggregate.extend(block);
        }
        let loss = mlp.loss(&aggregate, &pooled.x, &pooled.y)?;
        if !loss.is_finite() {
            return Err(HsflError::invalid(format!("loss became {loss} at round {t}; lower the learning rate")));
        }
        records.push(RoundRecord { round: t, loss, divergence: div, aggregated });
    }

    Ok(TrainTrace {
        initial_loss,
        rounds: records,
        layer_grad_max,
        snapshots,
        final_aggregate: net.aggregate_params(topo),
    })
}
