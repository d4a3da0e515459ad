//! The tiered compute hierarchy: entities, client association, capacities.
//!
//! Tiers and clients are indexed from zero. Tier 0 holds one entity per
//! client device; the last tier holds the single cloud entity. Raw capacities
//! live on entities; the per-sub-model values the latency model consumes are
//! derived from them according to [`Allocation`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HsflError, Result};

/// A computing entity and the sub-models it hosts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    /// Clients whose sub-model for this tier runs on this entity.
    pub clients: Vec<usize>,
    /// Raw compute capability, FLOP/s.
    pub compute_flops: f64,
    /// Activation uplink to the parent entity, bit/s. Unused on the top tier.
    #[serde(default)]
    pub uplink_rate: f64,
    /// Activation-gradient downlink from the parent entity, bit/s.
    #[serde(default)]
    pub downlink_rate: f64,
    /// Sub-model upload to the fed server, bit/s.
    #[serde(default)]
    pub fed_uplink_rate: f64,
    /// Sub-model download from the fed server, bit/s.
    #[serde(default)]
    pub fed_downlink_rate: f64,
    /// Memory budget, bytes. Omitted means unconstrained.
    #[serde(default = "unbounded")]
    pub memory_bytes: f64,
}

fn unbounded() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tier {
    pub entities: Vec<Entity>,
}

/// Per-(tier, client) values used when allocation is explicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitAllocation {
    /// `compute_flops[m][n]`, FLOP/s, for every tier.
    pub compute_flops: Vec<Vec<f64>>,
    /// `uplink_rate[m][n]`, bit/s, for every tier but the top.
    pub uplink_rate: Vec<Vec<f64>>,
    /// `downlink_rate[m][n]`, bit/s, for every tier but the top.
    pub downlink_rate: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Allocation {
    /// Each entity splits compute and smashed-data links evenly over its sub-models.
    Even,
    Explicit(ExplicitAllocation),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    num_clients: usize,
    tiers: Vec<Tier>,
    allocation: Allocation,
    /// `host[m][n]`: entity of tier `m` that hosts client `n`, if any.
    host: Vec<Vec<Option<usize>>>,
}

#[derive(Serialize, Deserialize)]
struct TopologyFile {
    num_clients: usize,
    #[serde(default)]
    allocation: AllocationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    explicit: Option<ExplicitAllocation>,
    tiers: Vec<Tier>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
enum AllocationKind {
    #[default]
    Even,
    Explicit,
}

impl Topology {
    /// Builds a topology without checking invariants; see [`Topology::validate`].
    pub fn from_parts(num_clients: usize, tiers: Vec<Tier>, allocation: Allocation) -> Self {
        let host = tiers
            .iter()
            .map(|tier| {
                let mut row = vec![None; num_clients];
                for (j, entity) in tier.entities.iter().enumerate() {
                    for &n in &entity.clients {
                        if n < num_clients && row[n].is_none() {
                            row[n] = Some(j);
                        }
                    }
                }
                row
            })
            .collect();
        Topology {
            num_clients,
            tiers,
            allocation,
            host,
        }
    }

    /// Builds and validates.
    pub fn new(num_clients: usize, tiers: Vec<Tier>, allocation: Allocation) -> Result<Self> {
        let topo = Self::from_parts(num_clients, tiers, allocation);
        topo.validate().map_err(HsflError::Validation)?;
        Ok(topo)
    }

    pub fn num_tiers(&self) -> usize {
        self.tiers.len()
    }

    pub fn num_clients(&self) -> usize {
        self.num_clients
    }

    pub fn tiers(&self) -> &[Tier] {
        &self.tiers
    }

    pub fn allocation(&self) -> &Allocation {
        &self.allocation
    }

    /// `J_m`.
    pub fn entities_in(&self, m: usize) -> usize {
        self.tiers[m].entities.len()
    }

    pub fn entity(&self, m: usize, j: usize) -> &Entity {
        &self.tiers[m].entities[j]
    }

    pub fn host_of(&self, m: usize, n: usize) -> Result<usize> {
        self.host
            .get(m)
            .and_then(|row| row.get(n).copied().flatten())
            .ok_or_else(|| HsflError::invalid(format!("no tier-{m} entity hosts client {n}")))
    }

    fn hosted_count(&self, m: usize, n: usize) -> Result<f64> {
        let j = self.host_of(m, n)?;
        Ok(self.tiers[m].entities[j].clients.len() as f64)
    }

    /// `f_{m,n}`: compute allocated to client `n`'s tier-`m` sub-model.
    pub fn compute_flops(&self, m: usize, n: usize) -> Result<f64> {
        match &self.allocation {
            Allocation::Even => {
                let j = self.host_of(m, n)?;
                Ok(self.tiers[m].entities[j].compute_flops / self.hosted_count(m, n)?)
            }
            Allocation::Explicit(e) => lookup(&e.compute_flops, m, n),
        }
    }

    /// `r^A_{m,n}`: activation uplink rate from tier `m` to `m + 1`.
    pub fn uplink_rate(&self, m: usize, n: usize) -> Result<f64> {
        self.check_not_top(m)?;
        match &self.allocation {
            Allocation::Even => {
                let j = self.host_of(m, n)?;
                Ok(self.tiers[m].entities[j].uplink_rate / self.hosted_count(m, n)?)
            }
            Allocation::Explicit(e) => lookup(&e.uplink_rate, m, n),
        }
    }

    /// `r^G_{m,n}`: activation-gradient downlink rate from tier `m + 1` to `m`.
    pub fn downlink_rate(&self, m: usize, n: usize) -> Result<f64> {
        self.check_not_top(m)?;
        match &self.allocation {
            Allocation::Even => {
                let j = self.host_of(m, n)?;
                Ok(self.tiers[m].entities[j].downlink_rate / self.hosted_count(m, n)?)
            }
            Allocation::Explicit(e) => lookup(&e.downlink_rate, m, n),
        }
    }

    fn check_not_top(&self, m: usize) -> Result<()> {
        if m + 1 >= self.tiers.len() {
            return Err(HsflError::invalid(format!("tier {m} has no upstream link")));
        }
        Ok(())
    }

    /// Every invariant violation, or `Ok` when there are none.
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut diag = Vec::new();
        let m_total = self.tiers.len();
        if m_total < 2 {
            diag.push(format!("need at least 2 tiers, got {m_total}"));
        }
        if self.num_clients == 0 {
            diag.push("need at least one client".to_string());
        }
        if let Some(top) = self.tiers.last() {
            if top.entities.len() != 1 {
                diag.push(format!("top tier must have one entity, got {}", top.entities.len()));
            }
        }
        if let Some(bottom) = self.tiers.first() {
            if bottom.entities.len() != self.num_clients {
                diag.push(format!(
                    "bottom tier must have one entity per client ({}), got {}",
                    self.num_clients,
                    bottom.entities.len()
                ));
            }
            if bottom.entities.iter().any(|e| e.clients.len() != 1) {
                diag.push("each bottom-tier entity must host exactly one client".to_string());
            }
        }

        for (m, tier) in self.tiers.iter().enumerate() {
            let mut seen = vec![0usize; self.num_clients];
            for (j, entity) in tier.entities.iter().enumerate() {
                if entity.clients.is_empty() {
                    diag.push(format!("tier {m} entity {j} hosts no clients"));
                }
                for &n in &entity.clients {
                    if n >= self.num_clients {
                        diag.push(format!("partition violation: tier {m} entity {j} lists unknown client {n}"));
                    } else {
                        seen[n] += 1;
                    }
                }
                let is_top = m + 1 == m_total;
                let mut positive = vec![("compute_flops", entity.compute_flops)];
                if !is_top {
                    positive.extend([
                        ("uplink_rate", entity.uplink_rate),
                        ("downlink_rate", entity.downlink_rate),
                        ("fed_uplink_rate", entity.fed_uplink_rate),
                        ("fed_downlink_rate", entity.fed_downlink_rate),
                        ("memory_bytes", entity.memory_bytes),
                    ]);
                }
                for (name, value) in positive {
                    if value.is_nan() || value <= 0.0 {
                        diag.push(format!("tier {m} entity {j}: {name} = {value} must be > 0"));
                    }
                }
            }
            for (n, &count) in seen.iter().enumerate() {
                if count != 1 {
                    diag.push(format!(
                        "partition violation: client {n} hosted {count} times in tier {m}"
                    ));
                }
            }
        }

        // Tree nesting: clients sharing an entity must share the parent entity too.
        for m in 0..m_total.saturating_sub(1) {
            for (j, entity) in self.tiers[m].entities.iter().enumerate() {
                let parents: Vec<Option<usize>> = entity
                    .clients
                    .iter()
                    .filter(|&&n| n < self.num_clients)
                    .map(|&n| self.host[m + 1][n])
                    .collect();
                if parents.windows(2).any(|w| w[0] != w[1]) {
                    diag.push(format!("nesting violation: tier {m} entity {j} splits across tier {} entities", m + 1));
                }
            }
        }

        if let Allocation::Explicit(e) = &self.allocation {
            let check = |name: &str, table: &Vec<Vec<f64>>, rows: usize, diag: &mut Vec<String>| {
                if table.len() != rows || table.iter().any(|r| r.len() != self.num_clients) {
                    diag.push(format!("explicit {name} must be {rows} x {}", self.num_clients));
                } else if table.iter().flatten().any(|&v| v.is_nan() || v <= 0.0) {
                    diag.push(format!("explicit {name} entries must be > 0"));
                }
            };
            check("compute_flops", &e.compute_flops, m_total, &mut diag);
            check("uplink_rate", &e.uplink_rate, m_total.saturating_sub(1), &mut diag);
            check("downlink_rate", &e.downlink_rate, m_total.saturating_sub(1), &mut diag);
        }

        if diag.is_empty() {
            Ok(())
        } else {
            Err(diag)
        }
    }

    /// Copy with all compute capacities scaled by `compute` and all link rates by `comm`.
    pub fn scaled(&self, compute: f64, comm: f64) -> Topology {
        let tiers = self
            .tiers
            .iter()
            .map(|tier| Tier {
                entities: tier
                    .entities
                    .iter()
                    .map(|e| Entity {
                        clients: e.clients.clone(),
                        compute_flops: e.compute_flops * compute,
                        uplink_rate: e.uplink_rate * comm,
                        downlink_rate: e.downlink_rate * comm,
                        fed_uplink_rate: e.fed_uplink_rate * comm,
                        fed_downlink_rate: e.fed_downlink_rate * comm,
                        memory_bytes: e.memory_bytes,
                    })
                    .collect(),
            })
            .collect();
        let scale = |t: &Vec<Vec<f64>>, k: f64| -> Vec<Vec<f64>> {
            t.iter().map(|r| r.iter().map(|v| v * k).collect()).collect()
        };
        let allocation = match &self.allocation {
            Allocation::Even => Allocation::Even,
            Allocation::Explicit(e) => Allocation::Explicit(ExplicitAllocation {
                compute_flops: scale(&e.compute_flops, compute),
                uplink_rate: scale(&e.uplink_rate, comm),
                downlink_rate: scale(&e.downlink_rate, comm),
            }),
        };
        Topology::from_parts(self.num_clients, tiers, allocation)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TopologyFile = toml::from_str(text).map_err(|e| HsflError::Parse(e.to_string()))?;
        let allocation = match (file.allocation, file.explicit) {
            (AllocationKind::Even, None) => Allocation::Even,
            (AllocationKind::Explicit, Some(e)) => Allocation::Explicit(e),
            (AllocationKind::Even, Some(_)) => {
                return Err(HsflError::Parse("[explicit] table given but allocation is \"even\"".into()))
            }
            (AllocationKind::Explicit, None) => {
                return Err(HsflError::Parse("allocation = \"explicit\" needs an [explicit] table".into()))
            }
        };
        Topology::new(file.num_clients, file.tiers, allocation)
    }

    pub fn to_toml_string(&self) -> String {
        let file = TopologyFile {
            num_clients: self.num_clients,
            allocation: match self.allocation {
                Allocation::Even => AllocationKind::Even,
                Allocation::Explicit(_) => AllocationKind::Explicit,
            },
            explicit: match &self.allocation {
                Allocation::Even => None,
                Allocation::Explicit(e) => Some(e.clone()),
            },
            tiers: self.tiers.clone(),
        };
        let body = toml::to_string(&file).expect("topology is always serializable");
        format!(
            "# hsfl topology\n# rates in bit/s, compute in FLOP/s, memory in bytes; client and tier indices start at 0\n{body}"
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HsflError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// A tree with `fanout` children per entity on every intermediate tier.
    ///
    /// All capacities are 1; useful where only association matters (training).
    pub fn uniform_tree(num_clients: usize, num_tiers: usize, fanout: usize) -> Result<Self> {
        if num_tiers < 2 || num_clients == 0 || fanout == 0 {
            return Err(HsflError::invalid("uniform tree needs >= 2 tiers, >= 1 client, fanout >= 1"));
        }
        let unit = |clients: Vec<usize>| Entity {
            clients,
            compute_flops: 1.0,
            uplink_rate: 1.0,
            downlink_rate: 1.0,
            fed_uplink_rate: 1.0,
            fed_downlink_rate: 1.0,
            memory_bytes: f64::INFINITY,
        };
        let mut tiers = vec![Tier {
            entities: (0..num_clients).map(|n| unit(vec![n])).collect(),
        }];
        for _ in 1..num_tiers - 1 {
            let below = &tiers.last().unwrap().entities;
            let entities = below
                .chunks(fanout)
                .map(|group| unit(group.iter().flat_map(|e| e.clients.clone()).collect()))
                .collect();
            tiers.push(Tier { entities });
        }
        tiers.push(Tier {
            entities: vec![unit((0..num_clients).collect())],
        });
        Topology::new(num_clients, tiers, Allocation::Even)
    }
}

fn lookup(table: &[Vec<f64>], m: usize, n: usize) -> Result<f64> {
    table
        .get(m)
        .and_then(|row| row.get(n))
        .copied()
        .ok_or_else(|| HsflError::invalid(format!("no explicit allocation for tier {m} client {n}")))
}

/// Constants of the three-tier client-edge-cloud evaluation scenario.
pub mod paper_scenario {
    pub const NUM_DEVICES: usize = 20;
    pub const NUM_EDGE_SERVERS: usize = 5;
    pub const DEVICES_PER_EDGE: usize = 4;
    pub const CLOUD_FLOPS: f64 = 50e12;
    pub const EDGE_FLOPS: f64 = 5e12;
    pub const DEVICE_FLOPS: (f64, f64) = (0.4e12, 0.6e12);
    pub const DEVICE_UPLINK_BPS: (f64, f64) = (75e6, 80e6);
    pub const DEVICE_DOWNLINK_BPS: f64 = 370e6;
    pub const BACKHAUL_BPS: (f64, f64) = (370e6, 400e6);
    pub const BATCH: usize = 16;
    pub const LEARNING_RATE: f64 = 5e-4;
}

/// The 20-device / 5-edge / 1-cloud scenario with seeded uniform draws.
///
/// Draw order is fixed (devices first, then edge servers) so a seed pins the
/// topology bit-for-bit.
pub fn build_paper_scenario(seed: u64) -> Topology {
    use paper_scenario::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |range: (f64, f64)| rng.random_range(range.0..=range.1);

    let devices = (0..NUM_DEVICES)
        .map(|n| Entity {
            clients: vec![n],
            compute_flops: uniform(DEVICE_FLOPS),
            uplink_rate: uniform(DEVICE_UPLINK_BPS),
            downlink_rate: DEVICE_DOWNLINK_BPS,
            fed_uplink_rate: uniform(DEVICE_UPLINK_BPS),
            fed_downlink_rate: DEVICE_DOWNLINK_BPS,
            memory_bytes: f64::INFINITY,
        })
        .collect();
    let edges = (0..NUM_EDGE_SERVERS)
        .map(|j| Entity {
            clients: (j * DEVICES_PER_EDGE..(j + 1) * DEVICES_PER_EDGE).collect(),
            compute_flops: EDGE_FLOPS,
            uplink_rate: uniform(BACKHAUL_BPS),
            downlink_rate: uniform(BACKHAUL_BPS),
            fed_uplink_rate: uniform(BACKHAUL_BPS),
            fed_downlink_rate: uniform(BACKHAUL_BPS),
            memory_bytes: f64::INFINITY,
        })
        .collect();
    let cloud = Entity {
        clients: (0..NUM_DEVICES).collect(),
        compute_flops: CLOUD_FLOPS,
        uplink_rate: 0.0,
        downlink_rate: 0.0,
        fed_uplink_rate: 0.0,
        fed_downlink_rate: 0.0,
        memory_bytes: f64::INFINITY,
    };
    Topology::from_parts(
        NUM_DEVICES,
        vec![Tier { entities: devices }, Tier { entities: edges }, Tier { entities: vec![cloud] }],
        Allocation::Even,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn paper_scenario_is_valid() {
        let t = build_paper_scenario(0);
        assert_eq!(t.validate(), Ok(()));
        assert_eq!(t.num_tiers(), 3);
        assert_eq!((t.entities_in(0), t.entities_in(1), t.entities_in(2)), (20, 5, 1));
        for n in 0..20 {
            let f = t.compute_flops(0, n).unwrap();
            assert!((0.4e12..=0.6e12).contains(&f));
            let up = t.uplink_rate(0, n).unwrap();
            assert!((75e6..=80e6).contains(&up));
            assert_eq!(t.downlink_rate(0, n).unwrap(), 370e6);
        }
    }

    #[test]
    fn paper_scenario_even_split_over_four_hosted_devices() {
        let t = build_paper_scenario(0);
        for n in 0..20 {
            let j = t.host_of(1, n).unwrap();
            assert_eq!(j, n / 4);
            let edge = t.entity(1, j);
            assert_eq!(t.compute_flops(1, n).unwrap(), 5e12 / 4.0);
            assert_eq!(t.uplink_rate(1, n).unwrap(), edge.uplink_rate / 4.0);
            assert_eq!(t.downlink_rate(1, n).unwrap(), edge.downlink_rate / 4.0);
            assert!((370e6..=400e6).contains(&edge.fed_uplink_rate));
            assert_eq!(t.compute_flops(2, n).unwrap(), 50e12 / 20.0);
        }
    }

    #[test]
    fn paper_scenario_deterministic() {
        assert_eq!(build_paper_scenario(0), build_paper_scenario(0));
        assert_ne!(build_paper_scenario(0), build_paper_scenario(1));
    }

    #[test]
    fn top_tier_with_two_entities_flagged() {
        let mut t = build_paper_scenario(0);
        let mut cloud = t.tiers[2].entities[0].clone();
        cloud.clients = (10..20).collect();
        t.tiers[2].entities[0].clients = (0..10).collect();
        t.tiers[2].entities.push(cloud);
        let t = Topology::from_parts(t.num_clients, t.tiers, t.allocation);
        let diag = t.validate().unwrap_err();
        assert!(diag.iter().any(|d| d.contains("top tier must have one entity")));
    }

    #[test]
    fn missing_client_flagged_as_partition_violation() {
        let t = build_paper_scenario(0);
        let mut tiers = t.tiers.clone();
        tiers[1].entities[1].clients.retain(|&n| n != 7);
        let t = Topology::from_parts(20, tiers, Allocation::Even);
        let diag = t.validate().unwrap_err();
        assert!(diag.iter().any(|d| d.contains("partition violation") && d.contains("client 7")));
    }

    #[test]
    fn split_association_flagged_as_nesting_violation() {
        // 4 clients, 4 tiers: tier 1 groups {0,2},{1,3} but tier 2 groups {0,1},{2,3}.
        let base = Topology::uniform_tree(4, 4, 2).unwrap();
        let mut tiers = base.tiers.clone();
        let template = tiers[2].entities[0].clone();
        tiers[1].entities[0].clients = vec![0, 2];
        tiers[1].entities[1].clients = vec![1, 3];
        tiers[2].entities = vec![
            Entity { clients: vec![0, 1], ..template.clone() },
            Entity { clients: vec![2, 3], ..template },
        ];
        let bad = Topology::from_parts(4, tiers, Allocation::Even);
        assert!(bad.validate().unwrap_err().iter().any(|d| d.contains("nesting violation")));
    }

    #[test]
    fn nonpositive_rate_flagged() {
        let mut tiers = build_paper_scenario(0).tiers.clone();
        tiers[0].entities[3].uplink_rate = 0.0;
        let diag = Topology::from_parts(20, tiers, Allocation::Even).validate().unwrap_err();
        assert!(diag.iter().any(|d| d.contains("uplink_rate")));
    }

    #[test]
    fn file_round_trip() {
        let t = build_paper_scenario(3);
        let text = t.to_toml_string();
        let back = Topology::from_toml_str(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn explicit_allocation_file() {
        let text = r#"
num_clients = 2
allocation = "explicit"

[explicit]
compute_flops = [[1e12, 2e12], [5e12, 5e12]]
uplink_rate = [[80e6, 75e6]]
downlink_rate = [[370e6, 370e6]]

[[tiers]]
[[tiers.entities]]
clients = [0]
compute_flops = 1e12
uplink_rate = 80e6
downlink_rate = 370e6
fed_uplink_rate = 80e6
fed_downlink_rate = 370e6
[[tiers.entities]]
clients = [1]
compute_flops = 2e12
uplink_rate = 75e6
downlink_rate = 370e6
fed_uplink_rate = 75e6
fed_downlink_rate = 370e6

[[tiers]]
[[tiers.entities]]
clients = [0, 1]
compute_flops = 10e12
"#;
        let t = Topology::from_toml_str(text).unwrap();
        assert_eq!(t.compute_flops(0, 1).unwrap(), 2e12);
        assert_eq!(t.compute_flops(1, 0).unwrap(), 5e12);
        assert_eq!(t.uplink_rate(0, 1).unwrap(), 75e6);
        assert!(t.entity(0, 0).memory_bytes.is_infinite());
    }

    proptest! {
        #[test]
        fn paper_scenario_valid_for_all_seeds(seed in any::<u64>()) {
            prop_assert_eq!(build_paper_scenario(seed).validate(), Ok(()));
        }

        #[test]
        fn uniform_trees_valid(n in 1usize..40, m in 2usize..5, fanout in 1usize..6) {
            let t = Topology::uniform_tree(n, m, fanout).unwrap();
            prop_assert_eq!(t.validate(), Ok(()));
        }
    }
}
