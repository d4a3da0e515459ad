//! Empirical estimates of the smoothness constant and per-layer gradient
//! statistics from training snapshots.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HsflError, Result};
use crate::profile::ModelProfile;

/// Gradient information gathered at the start of one round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientSnapshot {
    pub round: u64,
    /// Virtual aggregate the probe gradient was taken at.
    pub aggregate: Vec<f64>,
    pub probe_loss: f64,
    /// Full-batch gradient of the probe subset at `aggregate`.
    pub full_gradient: Vec<f64>,
    /// Per client, per layer `‖g_n‖²` of the stochastic gradient.
    pub stochastic_sq: Vec<Vec<f64>>,
    /// Per client, per layer `‖g_n − ∇F_n‖²` around the client's full-batch gradient.
    pub deviation_sq: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimates {
    pub beta: f64,
    pub grad_variance: Vec<f64>,
    pub grad_second_moment: Vec<f64>,
    /// Drop in probe loss between the first and the best snapshot.
    pub vartheta_hint: f64,
    pub snapshots: usize,
}

/// `max ‖∇f(w) − ∇f(w′)‖ / ‖w − w′‖` over all pairs of distinct points.
pub fn smoothness(points: &[Vec<f64>], grads: &[Vec<f64>]) -> Result<f64> {
    if points.len() != grads.len() || points.len() < 2 {
        return Err(HsflError::invalid("smoothness needs at least two points with gradients"));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let dw = dist(&points[i], &points[j]);
            if dw > 0.0 {
                best = best.max(dist(&grads[i], &grads[j]) / dw);
            }
        }
    }
    Ok(best)
}

fn column_max(rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Vec<f64> {
    rows.fold(vec![0.0; width], |mut acc, row| {
        for (a, v) in acc.iter_mut().zip(row) {
            *a = a.max(v);
        }
        acc
    })
}

pub fn estimate_params(snapshots: &[GradientSnapshot]) -> Result<ParamEstimates> {
    if snapshots.len() < 2 {
        return Err(HsflError::invalid(format!("need at least 2 snapshots, got {}", snapshots.len())));
    }
    let layers = snapshots[0].stochastic_sq.first().map_or(0, Vec::len);
    let second = column_max(snapshots.iter().flat_map(|s| s.stochastic_sq.iter().cloned()), layers);
    let variance = column_max(snapshots.iter().flat_map(|s| s.deviation_sq.iter().cloned()), layers);
    let points: Vec<Vec<f64>> = snapshots.iter().map(|s| s.aggregate.clone()).collect();
    let grads: Vec<Vec<f64>> = snapshots.iter().map(|s| s.full_gradient.clone()).collect();
    let best = snapshots.iter().map(|s| s.probe_loss).fold(f64::INFINITY, f64::min);
    Ok(ParamEstimates {
        beta: smoothness(&points, &grads)?,
        grad_variance: variance,
        grad_second_moment: second,
        vartheta_hint: snapshots[0].probe_loss - best,
        snapshots: snapshots.len(),
    })
}

const FRAGMENT_HEADER: &str = "# hsfl gradient statistics; merge into a profile with the same layer count\n";

impl ParamEstimates {
    pub fn to_toml_string(&self) -> String {
        format!("{FRAGMENT_HEADER}{}", toml::to_string(self).expect("estimates are serializable"))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HsflError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HsflError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// `profile` with its gradient statistics replaced by these estimates.
    pub fn apply_to(&self, profile: &ModelProfile) -> Result<ModelProfile> {
        profile.with_gradient_stats(&self.grad_variance, &self.grad_second_moment)
    }
}
