//! Latent moment recovery from anchor moments.
//!
//! An *anchor-view* moment for a latent subset `Z` is the distribution of the
//! anchors of `Z`, stored with `ids = Z` so bit `t` is the anchor of `Z[t]`.
//! Observed variables act as their own anchors.

mod lp;
mod mixing;
mod oracle;
mod polytope;
mod simplex;

pub use lp::{solve_lp, LpSolution};
pub use mixing::{build_mixing, MixingMatrix};
pub use oracle::{linear_oracle_local, linear_oracle_marginal, OracleResult};
pub use polytope::{recover_polytope, PolytopeRecovery};
pub use simplex::{independent_marginal_vector, recover_simplex, simplex_objective, SimplexRecovery};

use serde::{Deserialize, Serialize};

use crate::dataset::BinaryDataset;
use crate::error::{AdfaError, Result};
use crate::model::{marginal_from_prior, AdfaModel, AnchorMap, LatentNetwork};
use crate::table::{latents, pack, subsets_up_to, SubsetMoment, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constraint {
    Simplex,
    Local,
    Marginal,
}

impl std::str::FromStr for Constraint {
    type Err = AdfaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simplex" => Ok(Constraint::Simplex),
            "local" => Ok(Constraint::Local),
            "marginal" => Ok(Constraint::Marginal),
            _ => Err(AdfaError::invalid(format!("unknown constraint family `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    LineSearch,
    Harmonic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub constraint: Constraint,
    pub lambda: f64,
    pub gap_tol: f64,
    pub max_iters: usize,
    pub step_rule: StepRule,
    pub epsilon_clamp: f64,
    /// Exponentiated-gradient iterations of each fully-corrective weight update.
    pub corrective_iters: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            constraint: Constraint::Marginal,
            lambda: 0.01,
            gap_tol: 0.005,
            max_iters: 1000,
            step_rule: StepRule::LineSearch,
            epsilon_clamp: 1e-12,
            corrective_iters: 200,
        }
    }
}

impl RecoveryConfig {
    pub fn with_constraint(mut self, constraint: Constraint) -> Self {
        self.constraint = constraint;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gap_tol > 0.0) {
            return Err(AdfaError::invalid("gap_tol must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(AdfaError::invalid("lambda must be nonnegative"));
        }
        if !(self.epsilon_clamp > 0.0) {
            return Err(AdfaError::invalid("epsilon_clamp must be positive"));
        }
        Ok(())
    }
}

/// Tables for every subset of `latents` of size at most `order`, kept in
/// canonical order (by size, then lexicographic).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub order: usize,
    pub latents: Vec<usize>,
    pub moments: Vec<SubsetMoment>,
}

impl MomentSet {
    pub fn new(order: usize, latents: Vec<usize>, mut moments: Vec<SubsetMoment>) -> Result<Self> {
        moments.sort_by(|a, b| canonical_key(&a.ids).cmp(&canonical_key(&b.ids)));
        let expected = subsets_up_to(&latents, order);
        if expected.len() != moments.len()
            || expected
                .iter()
                .zip(&moments)
                .any(|(z, mm)| latents_of(&mm.ids).as_deref() != Some(&z[..]))
        {
            return Err(AdfaError::invalid(format!(
                "moment set must hold exactly the subsets of size <= {order} over {latents:?}"
            )));
        }
        Ok(Self {
            order,
            latents,
            moments,
        })
    }

    pub fn get(&self, ids: &[usize]) -> Option<&SubsetMoment> {
        let key = latents(ids);
        self.moments
            .binary_search_by(|m| canonical_key(&m.ids).cmp(&canonical_key(&key)))
            .ok()
            .map(|p| &self.moments[p])
    }

    pub fn require(&self, ids: &[usize]) -> Result<&SubsetMoment> {
        self.get(ids)
            .ok_or_else(|| AdfaError::invalid(format!("moment over latents {ids:?} is missing")))
    }

    pub fn layout(&self) -> MomentLayout {
        MomentLayout::new(
            self.moments
                .iter()
                .map(|m| m.ids.iter().map(|v| v.index()).collect())
                .collect(),
        )
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.moments.iter().flat_map(|m| m.table.iter().copied()).collect()
    }

    pub fn from_flat(layout: &MomentLayout, order: usize, latents: Vec<usize>, flat: &[f64]) -> Result<Self> {
        let moments = layout
            .subsets
            .iter()
            .enumerate()
            .map(|(s, z)| SubsetMoment::new(crate::table::latents(z), layout.slice(flat, s).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(order, latents, moments)
    }

    /// Largest disagreement between a table's marginal and the table of the
    /// sub-subset one variable smaller.
    pub fn consistency_residual(&self) -> f64 {
        self.layout().consistency_residual(&self.to_flat())
    }

    pub fn max_abs_diff(&self, other: &MomentSet) -> f64 {
        self.moments
            .iter()
            .zip(&other.moments)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn canonical_key(ids: &[Var]) -> (usize, &[Var]) {
    (ids.len(), ids)
}

fn latents_of(ids: &[Var]) -> Option<Vec<usize>> {
    ids.iter()
        .map(|v| match v {
            Var::Latent(i) => Some(*i),
            Var::Observed(_) => None,
        })
        .collect()
}

/// Offsets of each subset table inside a flat moment vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentLayout {
    pub subsets: Vec<Vec<usize>>,
    pub offsets: Vec<usize>,
    pub dim: usize,
}

impl MomentLayout {
    pub fn new(subsets: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(subsets.len());
        let mut dim = 0;
        for z in &subsets {
            offsets.push(dim);
            dim += 1 << z.len();
        }
        Self {
            subsets,
            offsets,
            dim,
        }
    }

    pub fn for_latents(latents: &[usize], order: usize) -> Self {
        Self::new(subsets_up_to(latents, order))
    }

    pub fn slice<'a>(&self, flat: &'a [f64], s: usize) -> &'a [f64] {
        &flat[self.offsets[s]..self.offsets[s] + (1 << self.subsets[s].len())]
    }

    pub fn find(&self, z: &[usize]) -> Option<usize> {
        self.subsets.iter().position(|s| s == z)
    }

    /// Indicator vector of a full latent assignment (`y[i]` for latent id `i`).
    pub fn indicator(&self, y: impl Fn(usize) -> bool) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for (s, z) in self.subsets.iter().enumerate() {
            let vals: Vec<bool> = z.iter().map(|&i| y(i)).collect();
            v[self.offsets[s] + pack(&vals)] = 1.0;
        }
        v
    }

    /// Every table uniform.
    pub fn uniform(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for (s, z) in self.subsets.iter().enumerate() {
            let size = 1usize << z.len();
            v[self.offsets[s]..self.offsets[s] + size].fill(1.0 / size as f64);
        }
        v
    }

    /// `(parent table, child table, position of removed variable)` for every
    /// pair `Z' = Z \ {v}` present in the layout.
    pub fn containment_pairs(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (s, z) in self.subsets.iter().enumerate() {
            if z.len() < 2 {
                continue;
            }
            for t in 0..z.len() {
                let mut sub = z.clone();
                sub.remove(t);
                if let Some(c) = self.find(&sub) {
                    out.push((s, c, t));
                }
            }
        }
        out
    }

    pub fn consistency_residual(&self, flat: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (s, z) in self.subsets.iter().enumerate() {
            if z.len() == 1 {
                let t = self.slice(flat, s);
                worst = worst.max((t[0] + t[1] - 1.0).abs());
            }
        }
        for (s, c, t) in self.containment_pairs() {
            let parent = self.slice(flat, s);
            let child = self.slice(flat, c);
            let mut marg = vec![0.0; child.len()];
            for (idx, p) in parent.iter().enumerate() {
                marg[drop_bit(idx, t)] += p;
            }
            for (a, b) in marg.iter().zip(child) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

/// Removes bit `t` from `idx`, shifting higher bits down.
pub(crate) fn drop_bit(idx: usize, t: usize) -> usize {
    let low = idx & ((1 << t) - 1);
    let high = idx >> (t + 1);
    low | (high << t)
}

/// Empirical frequency tables over observed subsets.
pub fn empirical_moments(data: &BinaryDataset, subsets: &[Vec<usize>]) -> Result<Vec<SubsetMoment>> {
    if data.is_empty() {
        return Err(AdfaError::invalid("empty dataset"));
    }
    subsets
        .iter()
        .map(|cols| {
            let mut sorted = cols.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if let Some(&c) = sorted.iter().find(|&&c| c >= data.n_observed) {
                return Err(AdfaError::invalid(format!("observed id {c} out of range")));
            }
            let table = empirical_table(data, &sorted);
            SubsetMoment::new(sorted.into_iter().map(Var::Observed).collect(), table)
        })
        .collect()
}

/// Frequency table over `cols`, bit `t` carrying column `cols[t]`.
pub(crate) fn empirical_table(data: &BinaryDataset, cols: &[usize]) -> Vec<f64> {
    let mut counts = vec![0usize; 1 << cols.len()];
    for row in &data.observed_rows {
        let idx = cols
            .iter()
            .enumerate()
            .fold(0, |acc, (t, &c)| acc | ((row[c] as usize) << t));
        counts[idx] += 1;
    }
    let n = data.len() as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Observed column standing in for `v`: the anchor of a latent, or itself.
fn view_column(anchors: &AnchorMap, v: Var) -> Result<usize> {
    match v {
        Var::Latent(i) => anchors
            .anchor_of
            .get(i)
            .copied()
            .ok_or_else(|| AdfaError::invalid(format!("latent {i} has no anchor"))),
        Var::Observed(j) => Ok(j),
    }
}

/// Empirical anchor-view moment for a mixed subset `ids` (sorted).
pub fn anchor_view_empirical(data: &BinaryDataset, anchors: &AnchorMap, ids: &[Var]) -> Result<SubsetMoment> {
    if data.is_empty() {
        return Err(AdfaError::invalid("empty dataset"));
    }
    let cols = ids
        .iter()
        .map(|&v| view_column(anchors, v))
        .collect::<Result<Vec<_>>>()?;
    SubsetMoment::new(ids.to_vec(), empirical_table(data, &cols))
}

/// Population anchor-view moment under `model` (which may be misspecified).
pub fn anchor_view_population(model: &AdfaModel, prior: &[f64], ids: &[Var]) -> Result<SubsetMoment> {
    let cols = ids
        .iter()
        .map(|&v| view_column(&model.anchors, v))
        .collect::<Result<Vec<_>>>()?;
    let obs: Vec<Var> = cols.iter().map(|&c| Var::Observed(c)).collect();
    let sorted = marginal_from_prior(model, prior, &obs)?;
    // re-index from ascending observed order into `ids` order
    let positions: Vec<usize> = obs
        .iter()
        .map(|v| sorted.position(*v).expect("column present"))
        .collect();
    let mut table = vec![0.0; sorted.table.len()];
    for (idx, slot) in table.iter_mut().enumerate() {
        let src = positions
            .iter()
            .enumerate()
            .fold(0, |acc, (t, &p)| acc | (((idx >> t) & 1) << p));
        *slot = sorted.table[src];
    }
    SubsetMoment::new(ids.to_vec(), table)
}

/// Empirical anchor-view moments for all latent subsets up to `order`.
pub fn anchor_moments_empirical(data: &BinaryDataset, anchors: &AnchorMap, order: usize) -> Result<MomentSet> {
    let ids: Vec<usize> = (0..anchors.len()).collect();
    let moments = subsets_up_to(&ids, order)
        .iter()
        .map(|z| anchor_view_empirical(data, anchors, &latents(z)))
        .collect::<Result<Vec<_>>>()?;
    MomentSet::new(order, ids, moments)
}

/// Exact anchor-view moments for all latent subsets up to `order`.
pub fn anchor_moments_population(model: &AdfaModel, order: usize) -> Result<MomentSet> {
    let prior = model.latent.joint_table()?;
    let ids: Vec<usize> = (0..model.m()).collect();
    let moments = subsets_up_to(&ids, order)
        .iter()
        .map(|z| anchor_view_population(model, &prior, &latents(z)))
        .collect::<Result<Vec<_>>>()?;
    MomentSet::new(order, ids, moments)
}

/// Exact latent moments for all subsets up to `order`.
pub fn latent_moments_population(model: &AdfaModel, order: usize) -> Result<MomentSet> {
    let prior = model.latent.joint_table()?;
    let ids: Vec<usize> = (0..model.m()).collect();
    let moments = subsets_up_to(&ids, order)
        .iter()
        .map(|z| marginal_from_prior(model, &prior, &latents(z)))
        .collect::<Result<Vec<_>>>()?;
    MomentSet::new(order, ids, moments)
}

/// Exact moments of a latent network alone, for all subsets up to `order`.
pub fn network_moments(latent: &LatentNetwork, order: usize) -> Result<MomentSet> {
    let ids: Vec<usize> = (0..latent.len()).collect();
    let joint = SubsetMoment::new(latents(&ids), latent.joint_table()?)?;
    let moments = subsets_up_to(&ids, order)
        .iter()
        .map(|z| joint.marginalize(&latents(z)))
        .collect::<Result<Vec<_>>>()?;
    MomentSet::new(order, ids, moments)
}

/// Singleton recovery (λ = 0) followed by per-subset simplex recovery with
/// the product of recovered singletons as the regularization target.
pub fn recover_all_simplex(anchor_moments: &MomentSet, anchors: &AnchorMap, config: &RecoveryConfig) -> Result<(MomentSet, bool)> {
    config.validate()?;
    let singles_cfg = RecoveryConfig {
        lambda: 0.0,
        ..config.clone()
    };
    let mut converged = true;
    let mut singles = Vec::new();
    for &i in &anchor_moments.latents {
        let r = build_mixing(anchors, &[Var::Latent(i)])?;
        let rec = recover_simplex(anchor_moments.require(&[i])?, &r, None, &singles_cfg)?;
        converged &= rec.converged;
        singles.push(rec.moment);
    }
    let results: Vec<Result<SimplexRecovery>> = {
        use rayon::prelude::*;
        anchor_moments
            .moments
            .par_iter()
            .filter(|m| m.arity() >= 2)
            .map(|am| {
                let r = build_mixing(anchors, &am.ids)?;
                let indep = independent_marginal_vector(&singles, &am.ids)?;
                recover_simplex(am, &r, Some(&indep), config)
            })
            .collect()
    };
    let mut moments = singles;
    for r in results {
        let r = r?;
        converged &= r.converged;
        moments.push(r.moment);
    }
    Ok((
        MomentSet::new(anchor_moments.order, anchor_moments.latents.clone(), moments)?,
        converged,
    ))
}
