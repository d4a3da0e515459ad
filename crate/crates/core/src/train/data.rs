//! Synthetic Gaussian-mixture classification data and client partitions.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{HsflError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    /// Equal-size random split.
    #[default]
    Iid,
    /// Label-sorted order cut into two shards per client.
    Shard,
}

impl std::str::FromStr for Partition {
    type Err = HsflError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Partition::Iid),
            "shard" => Ok(Partition::Shard),
            other => Err(HsflError::Parse(format!("unknown partition {other:?}; expected iid or shard"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    /// Row-major `len × dim` features.
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub dim: usize,
    pub partition: Partition,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Features and labels of the given rows.
    pub fn gather(&self, rows: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(rows.len() * self.dim);
        let mut y = Vec::with_capacity(rows.len());
        for &r in rows {
            x.extend_from_slice(&self.x[r * self.dim..(r + 1) * self.dim]);
            y.push(self.y[r]);
        }
        (x, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub dim: usize,
    pub classes: usize,
    pub samples_per_client: usize,
    /// Standard deviation of the class means around the origin; noise is unit.
    pub separation: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig { dim: 16, classes: 2, samples_per_client: 64, separation: 0.5 }
    }
}

/// Seed stream used for data generation, disjoint from the client samplers.
const DATA_STREAM: u64 = u64::MAX - 1;

/// Draws `num_clients · samples_per_client` labelled points with balanced
/// classes and splits them across clients.
pub fn generate_clients(num_clients: usize, cfg: &MixtureConfig, partition: Partition, seed: u64) -> Result<Vec<ClientDataset>> {
    if num_clients == 0 || cfg.dim == 0 || cfg.classes < 2 || cfg.samples_per_client == 0 {
        return Err(HsflError::invalid("mixture needs clients, a positive dimension, two classes and samples"));
    }
    if partition == Partition::Shard && !cfg.samples_per_client.is_multiple_of(2) {
        return Err(HsflError::invalid("shard partition needs an even number of samples per client"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.dim).map(|_| cfg.separation * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let total = num_clients * cfg.samples_per_client;
    let labels: Vec<usize> = (0..total).map(|i| i % cfg.classes).collect();
    let features: Vec<f64> = labels
        .iter()
        .flat_map(|&y| means[y].clone())
        .map(|mu| mu + rng.sample::<f64, _>(StandardNormal))
        .collect();

    let order: Vec<usize> = match partition {
        Partition::Iid => {
            let mut idx: Vec<usize> = (0..total).collect();
            idx.shuffle(&mut rng);
            idx
        }
        Partition::Shard => {
            let mut sorted: Vec<usize> = (0..total).collect();
            sorted.sort_by_key(|&i| (labels[i], i));
            let shard = cfg.samples_per_client / 2;
            let mut shards: Vec<usize> = (0..2 * num_clients).collect();
            shards.shuffle(&mut rng);
            shards.iter().flat_map(|&s| sorted[s * shard..(s + 1) * shard].to_vec()).collect()
        }
    };

    Ok(order
        .chunks(cfg.samples_per_client)
        .map(|rows| {
            let mut x = Vec::with_capacity(rows.len() * cfg.dim);
            for &r in rows {
                x.extend_from_slice(&features[r * cfg.dim..(r + 1) * cfg.dim]);
            }
            ClientDataset { x, y: rows.iter().map(|&r| labels[r]).collect(), dim: cfg.dim, partition }
        })
        .collect())
}

/// Per-client mini-batch sampler; client `n` reads stream `n` of the seed.
#[derive(Debug, Clone)]
pub struct ClientSampler {
    rng: ChaCha8Rng,
}

impl ClientSampler {
    pub fn new(seed: u64, client: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(client as u64);
        ClientSampler { rng }
    }

    /// `batch` distinct rows of a dataset with `len` rows.
    pub fn next_batch(&mut self, len: usize, batch: usize) -> Vec<usize> {
        index::sample(&mut self.rng, len, batch.min(len)).into_vec()
    }
}
