//! Probability tables over small variable subsets.
//!
//! Every table in the crate uses one bit order: the subset's variables are
//! sorted ascending and bit `t` (least significant first) of a table index
//! carries the value of the `t`-th variable.

use serde::{Deserialize, Serialize};

use crate::error::{AdfaError, Result};

/// A variable in the joint space. Latents sort before observed variables, so
/// the global id of `Latent(i)` is `i` and of `Observed(j)` is `m + j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Var {
    Latent(usize),
    Observed(usize),
}

impl Var {
    pub fn index(self) -> usize {
        match self {
            Var::Latent(i) | Var::Observed(i) => i,
        }
    }

    pub fn is_latent(self) -> bool {
        matches!(self, Var::Latent(_))
    }
}

impl std::fmt::Display for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Var::Latent(i) => write!(f, "Y{i}"),
            Var::Observed(j) => write!(f, "X{j}"),
        }
    }
}

pub fn latents(ids: &[usize]) -> Vec<Var> {
    ids.iter().map(|&i| Var::Latent(i)).collect()
}

/// Probability table `μ_Z` over a sorted subset `Z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetMoment {
    pub ids: Vec<Var>,
    pub table: Vec<f64>,
}

impl SubsetMoment {
    /// Checks ordering and shape; entries are not checked (see [`Self::check_distribution`]).
    pub fn new(ids: Vec<Var>, table: Vec<f64>) -> Result<Self> {
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AdfaError::invalid(format!(
                "subset ids must be strictly ascending: {ids:?}"
            )));
        }
        if ids.len() >= usize::BITS as usize || table.len() != 1usize << ids.len() {
            return Err(AdfaError::invalid(format!(
                "table of length {} does not match {} variables",
                table.len(),
                ids.len()
            )));
        }
        Ok(Self { ids, table })
    }

    pub fn uniform(ids: Vec<Var>) -> Self {
        let size = 1usize << ids.len();
        Self {
            ids,
            table: vec![1.0 / size as f64; size],
        }
    }

    pub fn arity(&self) -> usize {
        self.ids.len()
    }

    pub fn position(&self, var: Var) -> Option<usize> {
        self.ids.iter().position(|&v| v == var)
    }

    pub fn sum(&self) -> f64 {
        self.table.iter().sum()
    }

    pub fn check_distribution(&self, tol: f64) -> Result<()> {
        if let Some(p) = self.table.iter().find(|p| !(**p >= -tol)) {
            return Err(AdfaError::invalid(format!(
                "negative or NaN entry {p} in table over {:?}",
                self.ids
            )));
        }
        let s = self.sum();
        if (s - 1.0).abs() > tol {
            return Err(AdfaError::invalid(format!(
                "table over {:?} sums to {s}",
                self.ids
            )));
        }
        Ok(())
    }

    /// Probability of a full assignment given in `ids` order.
    pub fn prob(&self, values: &[bool]) -> f64 {
        self.table[pack(values)]
    }

    /// Sums out every variable not in `keep`. `keep` must be a subset of `ids`.
    pub fn marginalize(&self, keep: &[Var]) -> Result<SubsetMoment> {
        let mut keep: Vec<Var> = keep.to_vec();
        keep.sort();
        keep.dedup();
        let positions = keep
            .iter()
            .map(|v| {
                self.position(*v).ok_or_else(|| {
                    AdfaError::invalid(format!("{v} is not in table over {:?}", self.ids))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![0.0; 1 << keep.len()];
        for (idx, p) in self.table.iter().enumerate() {
            out[project(idx, &positions)] += p;
        }
        Ok(SubsetMoment {
            ids: keep,
            table: out,
        })
    }

    /// Clamps negative entries to zero and renormalizes.
    pub fn clamped(&self) -> SubsetMoment {
        let mut table: Vec<f64> = self.table.iter().map(|p| p.max(0.0)).collect();
        let s: f64 = table.iter().sum();
        if s > 0.0 {
            table.iter_mut().for_each(|p| *p /= s);
        }
        SubsetMoment {
            ids: self.ids.clone(),
            table,
        }
    }

    pub fn max_abs_diff(&self, other: &SubsetMoment) -> f64 {
        self.table
            .iter()
            .zip(&other.table)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Packs a value vector into a table index (first value is the low bit).
pub fn pack(values: &[bool]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |acc, (t, &v)| acc | ((v as usize) << t))
}

pub fn unpack(index: usize, width: usize) -> Vec<bool> {
    (0..width).map(|t| (index >> t) & 1 == 1).collect()
}

/// Gathers the bits at `positions` of `index` into a compact index.
pub fn project(index: usize, positions: &[usize]) -> usize {
    positions
        .iter()
        .enumerate()
        .fold(0, |acc, (t, &p)| acc | (((index >> p) & 1) << t))
}

/// All subsets of `ids` with `1 ≤ size ≤ k`, ordered by size and then
/// lexicographically.
pub fn subsets_up_to(ids: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut out = Vec::new();
    for size in 1..=k.min(sorted.len()) {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            out.push(combo.iter().map(|&c| sorted[c]).collect());
            let mut t = size;
            while t > 0 && combo[t - 1] == sorted.len() - size + t - 1 {
                t -= 1;
            }
            if t == 0 {
                break;
            }
            combo[t - 1] += 1;
            for u in t..size {
                combo[u] = combo[u - 1] + 1;
            }
        }
    }
    out
}
