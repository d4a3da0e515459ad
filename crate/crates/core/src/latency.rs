//! Latency of one split-training round and of each tier's aggregation, summed
//! into the total training time for `R` rounds.
//!
//! Profiles carry bytes and links carry bit/s; [`transfer_seconds`] is the
//! only place the two meet.

use serde::Serialize;

use crate::error::{HsflError, Result};
use crate::plan::{AggSchedule, CutVector};
use crate::profile::{ByteKind, ModelProfile};
use crate::topology::Topology;

const BITS_PER_BYTE: f64 = 8.0;

/// Seconds to push `bytes` over a `rate_bps` link.
pub fn transfer_seconds(bytes: f64, rate_bps: f64) -> Result<f64> {
    if !(rate_bps > 0.0) {
        return Err(HsflError::invalid(format!("link rate {rate_bps} bit/s must be > 0")));
    }
    Ok(BITS_PER_BYTE * bytes / rate_bps)
}

fn compute_seconds(flops: f64, rate: f64) -> Result<f64> {
    if !(rate > 0.0) {
        return Err(HsflError::invalid(format!("compute capacity {rate} FLOP/s must be > 0")));
    }
    Ok(flops / rate)
}

pub(crate) fn check_plan(profile: &ModelProfile, topo: &Topology, cut: &CutVector) -> Result<()> {
    if cut.num_tiers() != topo.num_tiers() {
        return Err(HsflError::invalid(format!(
            "cut vector has {} tiers, topology has {}",
            cut.num_tiers(),
            topo.num_tiers()
        )));
    }
    CutVector::new(cut.cuts().to_vec(), profile.num_layers()).map(|_| ())
}

fn check_tier(topo: &Topology, m: usize) -> Result<()> {
    if m >= topo.num_tiers() {
        return Err(HsflError::invalid(format!("tier {m} out of range")));
    }
    Ok(())
}

fn check_lower_tier(topo: &Topology, m: usize) -> Result<()> {
    if m + 1 >= topo.num_tiers() {
        return Err(HsflError::invalid(format!("tier {m} has no upstream boundary")));
    }
    Ok(())
}

/// `T^F_{m,n}`: forward pass of client `n`'s tier-`m` sub-model.
pub fn fp_latency(profile: &ModelProfile, topo: &Topology, cut: &CutVector, batch: usize, m: usize, n: usize) -> Result<f64> {
    check_tier(topo, m)?;
    let (lo, hi) = cut.tier_bounds(m, profile.num_layers());
    let work = profile.cumulative_fp_flops(hi, batch)? - profile.cumulative_fp_flops(lo, batch)?;
    compute_seconds(work, topo.compute_flops(m, n)?)
}

/// `T^B_{m,n}`: backward pass of client `n`'s tier-`m` sub-model.
pub fn bp_latency(profile: &ModelProfile, topo: &Topology, cut: &CutVector, batch: usize, m: usize, n: usize) -> Result<f64> {
    check_tier(topo, m)?;
    let (lo, hi) = cut.tier_bounds(m, profile.num_layers());
    let work = profile.cumulative_bp_flops(hi, batch)? - profile.cumulative_bp_flops(lo, batch)?;
    compute_seconds(work, topo.compute_flops(m, n)?)
}

/// `T^A_{m,n}`: uploading the cut-layer activations of a mini-batch to tier `m + 1`.
pub fn activation_upload_latency(
    profile: &ModelProfile,
    topo: &Topology,
    cut: &CutVector,
    batch: usize,
    m: usize,
    n: usize,
) -> Result<f64> {
    check_lower_tier(topo, m)?;
    if batch < 1 {
        return Err(HsflError::invalid("batch size must be >= 1"));
    }
    let bytes = batch as f64 * profile.activation_at(cut.cut(m))?;
    transfer_seconds(bytes, topo.uplink_rate(m, n)?)
}

/// `T^G_{m,n}`: downloading the cut-layer activation gradients to tier `m`.
pub fn grad_download_latency(
    profile: &ModelProfile,
    topo: &Topology,
    cut: &CutVector,
    batch: usize,
    m: usize,
    n: usize,
) -> Result<f64> {
    check_lower_tier(topo, m)?;
    if batch < 1 {
        return Err(HsflError::invalid("batch size must be >= 1"));
    }
    let bytes = batch as f64 * profile.act_grad_at(cut.cut(m))?;
    transfer_seconds(bytes, topo.downlink_rate(m, n)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

/// `T^{j,U}_m` / `T^{j,D}_m`: moving entity `j`'s tier-`m` sub-model to or
/// from the fed server. Zero when the tier has a single entity.
pub fn model_transfer_latency(
    profile: &ModelProfile,
    topo: &Topology,
    cut: &CutVector,
    m: usize,
    j: usize,
    direction: Direction,
) -> Result<f64> {
    check_lower_tier(topo, m)?;
    if topo.entities_in(m) <= 1 {
        return Ok(0.0);
    }
    let (lo, hi) = cut.tier_bounds(m, profile.num_layers());
    let bytes = profile.cumulative_bytes(hi, ByteKind::Param)? - profile.cumulative_bytes(lo, ByteKind::Param)?;
    let entity = topo.entity(m, j);
    let rate = match direction {
        Direction::Up => entity.fed_uplink_rate,
        Direction::Down => entity.fed_downlink_rate,
    };
    transfer_seconds(bytes, rate)
}

/// Sum of the four pipeline components for one client.
pub fn client_pipeline_latency(profile: &ModelProfile, topo: &Topology, cut: &CutVector, batch: usize, n: usize) -> Result<f64> {
    let tiers = topo.num_tiers();
    let mut total = 0.0;
    for m in 0..tiers {
        total += fp_latency(profile, topo, cut, batch, m, n)?;
        total += bp_latency(profile, topo, cut, batch, m, n)?;
        if m + 1 < tiers {
            total += activation_upload_latency(profile, topo, cut, batch, m, n)?;
            total += grad_download_latency(profile, topo, cut, batch, m, n)?;
        }
    }
    Ok(total)
}

/// `T_S`: the slowest client's pipeline.
pub fn split_round_latency(profile: &ModelProfile, topo: &Topology, cut: &CutVector, batch: usize) -> Result<f64> {
    check_plan(profile, topo, cut)?;
    let mut worst = 0.0f64;
    for n in 0..topo.num_clients() {
        worst = worst.max(client_pipeline_latency(profile, topo, cut, batch, n)?);
    }
    Ok(worst)
}

/// `T_{m,A}`: slowest upload plus slowest download among tier-`m` entities.
pub fn aggregation_latency(profile: &ModelProfile, topo: &Topology, cut: &CutVector, m: usize) -> Result<f64> {
    check_lower_tier(topo, m)?;
    let mut up = 0.0f64;
    let mut down = 0.0f64;
    for j in 0..topo.entities_in(m) {
        up = up.max(model_transfer_latency(profile, topo, cut, m, j, Direction::Up)?);
        down = down.max(model_transfer_latency(profile, topo, cut, m, j, Direction::Down)?);
    }
    Ok(up + down)
}

/// `R·T_S + Σ_m ⌊R/I_m⌋·T_{m,A}`.
pub fn total_latency(
    profile: &ModelProfile,
    topo: &Topology,
    cut: &CutVector,
    sched: &AggSchedule,
    batch: usize,
    rounds: u64,
) -> Result<f64> {
    if rounds < 1 {
        return Err(HsflError::invalid("rounds must be >= 1"));
    }
    check_schedule(topo, sched)?;
    let t_s = split_round_latency(profile, topo, cut, batch)?;
    let mut total = rounds as f64 * t_s;
    for m in 0..topo.num_tiers() - 1 {
        let aggregations = rounds / sched.interval(m);
        total += aggregations as f64 * aggregation_latency(profile, topo, cut, m)?;
    }
    Ok(total)
}

pub(crate) fn check_schedule(topo: &Topology, sched: &AggSchedule) -> Result<()> {
    if sched.num_tiers() != topo.num_tiers() {
        return Err(HsflError::invalid(format!(
            "schedule covers {} tiers, topology has {}",
            sched.num_tiers(),
            topo.num_tiers()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientLatency {
    pub fp: Vec<f64>,
    pub activation_up: Vec<f64>,
    pub bp: Vec<f64>,
    pub grad_down: Vec<f64>,
    pub pipeline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityTransfer {
    pub up: Vec<f64>,
    pub down: Vec<f64>,
}

/// Every latency component of a plan, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyBreakdown {
    pub clients: Vec<ClientLatency>,
    /// One entry per tier below the top.
    pub model_transfer: Vec<EntityTransfer>,
    pub split_round: f64,
    pub aggregation: Vec<f64>,
    pub rounds: u64,
    pub total: f64,
}

pub fn breakdown(
    profile: &ModelProfile,
    topo: &Topology,
    cut: &CutVector,
    sched: &AggSchedule,
    batch: usize,
    rounds: u64,
) -> Result<LatencyBreakdown> {
    check_plan(profile, topo, cut)?;
    check_schedule(topo, sched)?;
    let tiers = topo.num_tiers();
    let mut clients = Vec::with_capacity(topo.num_clients());
    for n in 0..topo.num_clients() {
        let mut c = ClientLatency {
            fp: Vec::new(),
            activation_up: Vec::new(),
            bp: Vec::new(),
            grad_down: Vec::new(),
            pipeline: 0.0,
        };
        for m in 0..tiers {
            c.fp.push(fp_latency(profile, topo, cut, batch, m, n)?);
            c.bp.push(bp_latency(profile, topo, cut, batch, m, n)?);
            if m + 1 < tiers {
                c.activation_up.push(activation_upload_latency(profile, topo, cut, batch, m, n)?);
                c.grad_down.push(grad_download_latency(profile, topo, cut, batch, m, n)?);
            }
        }
        c.pipeline = client_pipeline_latency(profile, topo, cut, batch, n)?;
        clients.push(c);
    }
    let mut model_transfer = Vec::with_capacity(tiers - 1);
    let mut aggregation = Vec::with_capacity(tiers - 1);
    for m in 0..tiers - 1 {
        let mut t = EntityTransfer { up: Vec::new(), down: Vec::new() };
        for j in 0..topo.entities_in(m) {
            t.up.push(model_transfer_latency(profile, topo, cut, m, j, Direction::Up)?);
            t.down.push(model_transfer_latency(profile, topo, cut, m, j, Direction::Down)?);
        }
        model_transfer.push(t);
        aggregation.push(aggregation_latency(profile, topo, cut, m)?);
    }
    Ok(LatencyBreakdown {
        clients,
        model_transfer,
        split_round: split_round_latency(profile, topo, cut, batch)?,
        aggregation,
        rounds,
        total: total_latency(profile, topo, cut, sched, batch, rounds)?,
    })
}
