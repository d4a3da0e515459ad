use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HsflError, Result};

/// Cut layers `c_1 < … < c_{M-1}`, each in `1..L`.
///
/// Tier `m` (0-based) hosts layers `c_m + 1 ..= c_{m+1}` with the conventions
/// `c_0 = 0` and `c_M = L`, so every tier gets at least one layer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CutVector(Vec<usize>);

impl CutVector {
    pub fn new(cuts: Vec<usize>, num_layers: usize) -> Result<Self> {
        if cuts.is_empty() {
            return Err(HsflError::invalid("cut vector needs at least one cut (M >= 2)"));
        }
        if let Some(&c) = cuts.iter().find(|&&c| c < 1 || c >= num_layers) {
            return Err(HsflError::invalid(format!("cut {c} outside 1..={}", num_layers.saturating_sub(1))));
        }
        if cuts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HsflError::invalid(format!("cuts {cuts:?} must be strictly increasing")));
        }
        Ok(CutVector(cuts))
    }

    pub(crate) fn new_unchecked(cuts: Vec<usize>) -> Self {
        CutVector(cuts)
    }

    pub fn cuts(&self) -> &[usize] {
        &self.0
    }

    /// Number of tiers `M` this cut vector splits the model into.
    pub fn num_tiers(&self) -> usize {
        self.0.len() + 1
    }

    /// Half-open layer-prefix range `(c_m, c_{m+1})` of tier `m`.
    pub fn tier_bounds(&self, m: usize, num_layers: usize) -> (usize, usize) {
        let lo = if m == 0 { 0 } else { self.0[m - 1] };
        let hi = if m < self.0.len() { self.0[m] } else { num_layers };
        (lo, hi)
    }

    /// The cut layer at the top of tier `m`, for `m < M - 1`.
    pub fn cut(&self, m: usize) -> usize {
        self.0[m]
    }
}

impl fmt::Display for CutVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_joined(f, &self.0)
    }
}

/// Aggregation intervals `I_1..I_{M-1}`; the top tier is synchronized every round.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AggSchedule(Vec<u64>);

impl AggSchedule {
    pub fn new(intervals: Vec<u64>) -> Result<Self> {
        if intervals.iter().any(|&i| i < 1) {
            return Err(HsflError::invalid(format!("intervals {intervals:?} must all be >= 1")));
        }
        Ok(AggSchedule(intervals))
    }

    pub fn ones(num_tiers: usize) -> Self {
        AggSchedule(vec![1; num_tiers.saturating_sub(1)])
    }

    pub fn intervals(&self) -> &[u64] {
        &self.0
    }

    pub fn interval(&self, m: usize) -> u64 {
        self.0[m]
    }

    pub fn num_tiers(&self) -> usize {
        self.0.len() + 1
    }
}

impl fmt::Display for AggSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_joined(f, &self.0)
    }
}

fn write_joined<T: fmt::Display>(f: &mut fmt::Formatter<'_>, items: &[T]) -> fmt::Result {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(",")?;
        }
        write!(f, "{item}")?;
    }
    Ok(())
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| HsflError::Parse(format!("bad list element {part:?} in {s:?}")))
        })
        .collect()
}

impl FromStr for AggSchedule {
    type Err = HsflError;
    fn from_str(s: &str) -> Result<Self> {
        AggSchedule::new(parse_list(s)?)
    }
}

/// Parses `"3,8"` into raw cut indices; validate against a profile with [`CutVector::new`].
pub fn parse_cuts(s: &str) -> Result<Vec<usize>> {
    parse_list(s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub cut: CutVector,
    pub intervals: AggSchedule,
}
