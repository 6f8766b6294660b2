//! Noisy-or failure and leak estimation from recovered conditional moments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::dataset::BinaryDataset;
use crate::error::{AdfaError, Result};
use crate::generate::sample_latents;
use crate::inference::{quickscore_product, tree_failure_expectation};
use crate::model::{marginal_from_prior, AdfaModel, AnchorMap, LatentNetwork, NoisyOrLoadings, VariableSpace};
use crate::moments::{
    anchor_view_empirical, build_mixing, empirical_moments, independent_marginal_vector, recover_simplex,
    Constraint, MomentSet, RecoveryConfig,
};
use crate::table::{latents, pack, SubsetMoment, Var};

/// Probabilities below this are treated as impossible conditioning events.
pub const MIN_CONDITIONING_MASS: f64 = 1e-9;

/// Smallest failure probability an estimator returns.
pub const FAILURE_FLOOR: f64 = 1e-6;

/// Largest leak an estimator returns.
pub const LEAK_CEILING: f64 = 1.0 - 1e-9;

/// Default pruning threshold: estimates at or above it become "no edge".
pub const PRUNE_THRESHOLD: f64 = 0.98;

pub const DEFAULT_LEAK_SAMPLES: usize = 100_000;

/// `P(x_j = 0 | z)` for every assignment `z` of the latent conditioning set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMoment {
    pub target: usize,
    pub conditioning: Vec<usize>,
    pub table: Vec<f64>,
    /// `μ(z)`, the probability of each conditioning assignment.
    pub mass: Vec<f64>,
}

impl ConditionalMoment {
    fn position(&self, i: usize) -> Result<usize> {
        self.conditioning
            .iter()
            .position(|&c| c == i)
            .ok_or_else(|| AdfaError::invalid(format!("latent {i} is not in the conditioning set")))
    }

    /// Index of the assignment with latent `i` set to `yi` and the others to `b`
    /// (given in conditioning order, skipping `i`).
    fn index_with(&self, pos: usize, yi: bool, b: &[bool]) -> usize {
        let mut vals = b.to_vec();
        vals.insert(pos, yi);
        pack(&vals)
    }
}

fn split_joint(joint: &SubsetMoment, strict: bool) -> Result<ConditionalMoment> {
    let k = joint.arity();
    let (obs, lat): (Vec<Var>, Vec<Var>) = joint.ids.iter().partition(|v| !v.is_latent());
    if obs.len() != 1 {
        return Err(AdfaError::invalid(format!(
            "conditional needs exactly one observed target, table is over {:?}",
            joint.ids
        )));
    }
    // latents sort before observed variables, so the target is the top bit
    let top = 1usize << (k - 1);
    let mut table = Vec::with_capacity(top);
    let mut mass = Vec::with_capacity(top);
    for z in 0..top {
        let p0 = joint.table[z].max(0.0);
        let p1 = joint.table[z | top].max(0.0);
        let mz = p0 + p1;
        if mz < MIN_CONDITIONING_MASS {
            if strict {
                return Err(AdfaError::degenerate(format!(
                    "conditioning assignment {z:#b} of {:?} has probability {mz:e}",
                    lat
                )));
            }
            table.push(1.0);
        } else {
            table.push((p0 / mz).clamp(0.0, 1.0));
        }
        mass.push(mz);
    }
    Ok(ConditionalMoment {
        target: obs[0].index(),
        conditioning: lat.iter().map(|v| v.index()).collect(),
        table,
        mass,
    })
}

/// Bayes-rule division of a joint over `{X_j} ∪ Z`.
pub fn conditional_from_joint(joint: &SubsetMoment) -> Result<ConditionalMoment> {
    split_joint(joint, true)
}

fn ratio(num: f64, den: f64, what: impl FnOnce() -> String) -> Result<f64> {
    if den < MIN_CONDITIONING_MASS {
        return Err(AdfaError::degenerate(what()));
    }
    Ok((num / den).clamp(FAILURE_FLOOR, 1.0))
}

/// `P(x_j=0 | y_i=1) / P(x_j=0 | y_i=0)`; exact when latents are independent.
pub fn f_direct(cond: &ConditionalMoment) -> Result<f64> {
    if cond.conditioning.len() != 1 {
        return Err(AdfaError::invalid("f_direct conditions on exactly one latent"));
    }
    if cond.mass.iter().any(|&m| m < MIN_CONDITIONING_MASS) {
        return Err(AdfaError::degenerate(format!(
            "latent {} is (nearly) deterministic",
            cond.conditioning[0]
        )));
    }
    ratio(cond.table[1], cond.table[0], || {
        format!("P(x_{}=0 | y_{}=0) vanishes", cond.target, cond.conditioning[0])
    })
}

/// The same ratio with the Markov blanket of `i` clamped to `b` (conditioning
/// order, skipping `i`).
pub fn f_blanket(cond: &ConditionalMoment, i: usize, b: &[bool]) -> Result<f64> {
    let pos = cond.position(i)?;
    if b.len() + 1 != cond.conditioning.len() {
        return Err(AdfaError::invalid("blanket assignment has the wrong length"));
    }
    let (i0, i1) = (cond.index_with(pos, false, b), cond.index_with(pos, true, b));
    if cond.mass[i0] < MIN_CONDITIONING_MASS || cond.mass[i1] < MIN_CONDITIONING_MASS {
        return Err(AdfaError::degenerate(format!(
            "blanket assignment {b:?} of latent {i} has (nearly) zero probability"
        )));
    }
    ratio(cond.table[i1], cond.table[i0], || {
        format!("P(x_{}=0 | y_{i}=0, b={b:?}) vanishes", cond.target)
    })
}

fn blanket_assignments(cond: &ConditionalMoment, i: usize) -> Result<Vec<(Vec<bool>, f64)>> {
    let pos = cond.position(i)?;
    let k = cond.conditioning.len() - 1;
    Ok((0..1usize << k)
        .map(|bi| {
            let b: Vec<bool> = (0..k).map(|t| bi >> t & 1 == 1).collect();
            let w = cond.mass[cond.index_with(pos, false, &b)] + cond.mass[cond.index_with(pos, true, &b)];
            (b, w)
        })
        .collect())
}

/// [`f_blanket`] at the most probable blanket assignment.
pub fn f_blanket_best(cond: &ConditionalMoment, i: usize) -> Result<f64> {
    let all = blanket_assignments(cond, i)?;
    let pos = cond.position(i)?;
    let usable = all.iter().filter(|(b, _)| {
        cond.mass[cond.index_with(pos, false, b)] >= MIN_CONDITIONING_MASS
            && cond.mass[cond.index_with(pos, true, b)] >= MIN_CONDITIONING_MASS
    });
    let best = usable
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .ok_or_else(|| AdfaError::degenerate(format!("no blanket assignment of latent {i} is usable")))?;
    f_blanket(cond, i, &best.0)
}

/// [`f_blanket`] averaged over usable blanket assignments, weighted by `P(b)`.
pub fn f_blanket_weighted(cond: &ConditionalMoment, i: usize) -> Result<f64> {
    let (mut acc, mut total) = (0.0, 0.0);
    for (b, w) in blanket_assignments(cond, i)? {
        if let Ok(f) = f_blanket(cond, i, &b) {
            acc += w * f;
            total += w;
        }
    }
    if total <= 0.0 {
        return Err(AdfaError::degenerate(format!("no blanket assignment of latent {i} is usable")));
    }
    Ok((acc / total).clamp(FAILURE_FLOOR, 1.0))
}

/// Anything that can produce joint tables over latents and at most one
/// observed variable, plus `P(x_j = 0)`.
pub trait MomentSource: Sync {
    fn joint(&self, latent_ids: &[usize], observed: Option<usize>) -> Result<SubsetMoment>;
    fn negative_rate(&self, j: usize) -> Result<f64>;

    fn conditional(&self, latent_ids: &[usize], j: usize) -> Result<ConditionalMoment> {
        conditional_from_joint(&self.joint(latent_ids, Some(j))?)
    }
}

fn mixed_ids(latent_ids: &[usize], observed: Option<usize>) -> Result<Vec<Var>> {
    let mut ids = latents(latent_ids);
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AdfaError::invalid(format!("latent ids must be ascending: {latent_ids:?}")));
    }
    ids.extend(observed.map(Var::Observed));
    Ok(ids)
}

/// Exact moments of a known model.
pub struct PopulationSource<'a> {
    model: &'a AdfaModel,
    prior: Vec<f64>,
}

impl<'a> PopulationSource<'a> {
    pub fn new(model: &'a AdfaModel) -> Result<Self> {
        Ok(Self {
            model,
            prior: model.latent.joint_table()?,
        })
    }
}

impl MomentSource for PopulationSource<'_> {
    fn joint(&self, latent_ids: &[usize], observed: Option<usize>) -> Result<SubsetMoment> {
        marginal_from_prior(self.model, &self.prior, &mixed_ids(latent_ids, observed)?)
    }

    fn negative_rate(&self, j: usize) -> Result<f64> {
        Ok(marginal_from_prior(self.model, &self.prior, &[Var::Observed(j)])?.table[0])
    }
}

/// Moments recovered from data through the anchors; an observed target acts
/// as its own anchor.
pub struct RecoveredSource<'a> {
    data: &'a BinaryDataset,
    anchors: &'a AnchorMap,
    config: RecoveryConfig,
    singles: Vec<SubsetMoment>,
    latent_moments: Option<&'a MomentSet>,
    unconverged: AtomicUsize,
}

/// Simplex constraints with λ = 0.1.
pub fn loadings_recovery_config() -> RecoveryConfig {
    RecoveryConfig {
        constraint: Constraint::Simplex,
        lambda: 0.1,
        ..RecoveryConfig::default()
    }
}

impl<'a> RecoveredSource<'a> {
    /// `latent_moments`, when given, answers latent-only queries directly.
    pub fn new(
        data: &'a BinaryDataset,
        anchors: &'a AnchorMap,
        config: RecoveryConfig,
        latent_moments: Option<&'a MomentSet>,
    ) -> Result<Self> {
        config.validate()?;
        let unconverged = AtomicUsize::new(0);
        let single_cfg = RecoveryConfig {
            lambda: 0.0,
            ..config.clone()
        };
        let singles = (0..anchors.len())
            .map(|i| {
                let ids = [Var::Latent(i)];
                let rec = recover_simplex(
                    &anchor_view_empirical(data, anchors, &ids)?,
                    &build_mixing(anchors, &ids)?,
                    None,
                    &single_cfg,
                )?;
                if !rec.converged {
                    unconverged.fetch_add(1, Ordering::Relaxed);
                }
                Ok(rec.moment)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            data,
            anchors,
            config,
            singles,
            latent_moments,
            unconverged,
        })
    }

    /// Recoveries that stopped at the iteration cap so far.
    pub fn unconverged(&self) -> usize {
        self.unconverged.load(Ordering::Relaxed)
    }
}

impl MomentSource for RecoveredSource<'_> {
    fn joint(&self, latent_ids: &[usize], observed: Option<usize>) -> Result<SubsetMoment> {
        if observed.is_none() {
            if let Some(mm) = self.latent_moments.and_then(|mm| mm.get(latent_ids)) {
                return Ok(mm.clone());
            }
        }
        let ids = mixed_ids(latent_ids, observed)?;
        if let Some(j) = observed {
            if let Some(i) = self.anchors.anchor_of.iter().position(|&a| a == j) {
                if latent_ids.contains(&i) {
                    return Err(AdfaError::invalid(format!(
                        "observed {j} is the anchor of latent {i} and cannot be its own view here"
                    )));
                }
            }
        }
        let am = anchor_view_empirical(self.data, self.anchors, &ids)?;
        let mixing = build_mixing(self.anchors, &ids)?;
        let indep = if self.config.lambda > 0.0 {
            let mut singles = self.singles.clone();
            if let Some(j) = observed {
                let mut s = empirical_moments(self.data, &[vec![j]])?.remove(0);
                s.ids = vec![Var::Observed(j)];
                singles.push(s);
            }
            Some(independent_marginal_vector(&singles, &ids)?)
        } else {
            None
        };
        let rec = recover_simplex(&am, &mixing, indep.as_ref(), &self.config)?;
        if !rec.converged {
            self.unconverged.fetch_add(1, Ordering::Relaxed);
        }
        Ok(rec.moment)
    }

    fn negative_rate(&self, j: usize) -> Result<f64> {
        self.data.negative_rate(j)
    }
}

/// Tree-corrected estimator: the direct ratio divided by one correction
/// factor per neighbor of `i`, each needing only pairwise latent conditioning.
pub fn f_tree(source: &impl MomentSource, latent: &LatentNetwork, i: usize, j: usize) -> Result<f64> {
    if !latent.is_forest() {
        return Err(AdfaError::Precondition("f_tree requires a tree-structured latent network".into()));
    }
    let direct = source.conditional(&[i], j)?;
    let p0 = direct.table[0];
    if direct.mass.iter().any(|&m| m < MIN_CONDITIONING_MASS) || p0 < MIN_CONDITIONING_MASS {
        return Err(AdfaError::degenerate(format!("P(x_{j}=0 | y_{i}=0) vanishes")));
    }
    let mut est = direct.table[1] / p0;
    for k in latent.neighbors()[i].iter().copied() {
        est /= correction(source, i, j, k, p0)?;
    }
    Ok(est.clamp(FAILURE_FLOOR, 1.0))
}

/// `c_{i,j,k} = Σ_{y_k} P(y_k | y_i=1) P(x_j=0 | y_i=0, y_k) / P(x_j=0 | y_i=0)`.
fn correction(source: &impl MomentSource, i: usize, j: usize, k: usize, p0: f64) -> Result<f64> {
    let ids = if i < k { [i, k] } else { [k, i] };
    let (pi, pk) = if i < k { (0, 1) } else { (1, 0) };
    let undefined = || AdfaError::degenerate(format!("P(Y_{k} | Y_{i}) is deterministic; correction ({i},{k}) undefined"));
    let pair = source.joint(&ids, None)?.clamped();
    let at = |yi: usize, yk: usize| pair.table[(yi << pi) | (yk << pk)];
    let pi1 = at(1, 0) + at(1, 1);
    if pi1 < MIN_CONDITIONING_MASS || at(0, 0) < MIN_CONDITIONING_MASS || at(0, 1) < MIN_CONDITIONING_MASS {
        return Err(undefined());
    }
    let cond = split_joint(&source.joint(&ids, Some(j))?, false)?;
    let c = (0..2)
        .map(|yk| at(1, yk) / pi1 * cond.table[yk << pk])
        .sum::<f64>()
        / p0;
    if !(c > 0.0) {
        return Err(undefined());
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeakMethod {
    Quickscore,
    TreeBp,
    Sampling,
    /// Enumeration over all latent assignments.
    Exact,
}

impl std::str::FromStr for LeakMethod {
    type Err = AdfaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quickscore" => Ok(Self::Quickscore),
            "tree-bp" => Ok(Self::TreeBp),
            "sampling" => Ok(Self::Sampling),
            "exact" => Ok(Self::Exact),
            _ => Err(AdfaError::invalid(format!("unknown leak method `{s}`"))),
        }
    }
}

impl LeakMethod {
    /// Quickscore for independent latents, tree BP for forests, sampling otherwise.
    pub fn for_network(latent: &LatentNetwork) -> Self {
        if !latent.has_edges() {
            Self::Quickscore
        } else if latent.is_forest() {
            Self::TreeBp
        } else {
            Self::Sampling
        }
    }
}

/// Evaluates `E[Π_i f_i^{y_i}]`, i.e. `P(x_j = 0)` without the leak.
pub struct LeakFreeEvaluator<'a> {
    latent: &'a LatentNetwork,
    method: LeakMethod,
    samples: Option<Vec<Vec<bool>>>,
    prior: Option<Vec<f64>>,
}

impl<'a> LeakFreeEvaluator<'a> {
    pub fn new(latent: &'a LatentNetwork, method: LeakMethod, draws: usize, seed: u64) -> Result<Self> {
        let mut samples = None;
        let mut prior = None;
        match method {
            LeakMethod::Quickscore if latent.has_edges() => {
                return Err(AdfaError::Precondition("quickscore requires independent latents".into()))
            }
            LeakMethod::TreeBp if !latent.is_forest() => {
                return Err(AdfaError::Precondition("tree-bp requires a forest".into()))
            }
            LeakMethod::Sampling => {
                if draws == 0 {
                    return Err(AdfaError::invalid("sampling needs at least one draw"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                samples = Some(sample_latents(latent, draws, &mut rng)?);
            }
            LeakMethod::Exact => prior = Some(latent.joint_table()?),
            _ => {}
        }
        Ok(Self {
            latent,
            method,
            samples,
            prior,
        })
    }

    pub fn negative_without_leak(&self, failures: &[f64]) -> Result<f64> {
        if failures.len() != self.latent.len() {
            return Err(AdfaError::invalid("failure column length must equal latent count"));
        }
        match self.method {
            LeakMethod::Quickscore => quickscore_product(self.latent, failures),
            LeakMethod::TreeBp => tree_failure_expectation(self.latent, failures, &vec![None; failures.len()]),
            LeakMethod::Sampling => {
                let s = self.samples.as_ref().expect("samples drawn");
                let total: f64 = s
                    .iter()
                    .map(|y| y.iter().zip(failures).filter(|(b, _)| **b).map(|(_, f)| f).product::<f64>())
                    .sum();
                Ok(total / s.len() as f64)
            }
            LeakMethod::Exact => {
                let prior = self.prior.as_ref().expect("prior enumerated");
                Ok(prior
                    .iter()
                    .enumerate()
                    .map(|(y, p)| p * (0..failures.len()).filter(|i| y >> i & 1 == 1).map(|i| failures[i]).product::<f64>())
                    .sum())
            }
        }
    }
}

/// `l̂ = 1 - P̂(x_j=0) / P_{-l}(x_j=0)`, clamped to `[0, 1)`.
pub fn leak_from(p_hat_negative: f64, p_without_leak: f64) -> Result<f64> {
    if p_without_leak < MIN_CONDITIONING_MASS {
        return Err(AdfaError::degenerate(format!(
            "leak-free negative probability {p_without_leak:e} vanishes"
        )));
    }
    Ok((1.0 - p_hat_negative / p_without_leak).clamp(0.0, LEAK_CEILING))
}

/// Leak of one observed variable given its failure column and `P̂(x_j = 0)`.
pub fn estimate_leak(
    latent: &LatentNetwork,
    failures: &[f64],
    p_hat_negative: f64,
    method: LeakMethod,
    seed: u64,
) -> Result<f64> {
    let eval = LeakFreeEvaluator::new(latent, method, DEFAULT_LEAK_SAMPLES, seed)?;
    leak_from(p_hat_negative, eval.negative_without_leak(failures)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureEstimator {
    /// Direct for independent latents, tree for forests, blanket otherwise.
    Auto,
    Direct,
    Blanket,
    BlanketWeighted,
    Tree,
}

impl std::str::FromStr for FailureEstimator {
    type Err = AdfaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "direct" => Ok(Self::Direct),
            "blanket" => Ok(Self::Blanket),
            "blanket-weighted" => Ok(Self::BlanketWeighted),
            "tree" => Ok(Self::Tree),
            _ => Err(AdfaError::invalid(format!("unknown failure estimator `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadingsConfig {
    pub estimator: FailureEstimator,
    /// `None` picks by network shape.
    pub leak_method: Option<LeakMethod>,
    pub prune_threshold: f64,
    pub leak_samples: usize,
    pub seed: u64,
}

impl Default for LoadingsConfig {
    fn default() -> Self {
        Self {
            estimator: FailureEstimator::Auto,
            leak_method: None,
            prune_threshold: PRUNE_THRESHOLD,
            leak_samples: DEFAULT_LEAK_SAMPLES,
            seed: 0,
        }
    }
}

fn estimate_failure(
    source: &impl MomentSource,
    latent: &LatentNetwork,
    estimator: FailureEstimator,
    i: usize,
    j: usize,
) -> Result<f64> {
    let estimator = match estimator {
        FailureEstimator::Auto if !latent.has_edges() => FailureEstimator::Direct,
        FailureEstimator::Auto if latent.is_forest() => FailureEstimator::Tree,
        FailureEstimator::Auto => FailureEstimator::Blanket,
        e => e,
    };
    let blanket_cond = || -> Result<ConditionalMoment> {
        let mut ids = latent.markov_blanket(i);
        ids.push(i);
        ids.sort_unstable();
        split_joint(&source.joint(&ids, Some(j))?, false)
    };
    match estimator {
        FailureEstimator::Direct => f_direct(&source.conditional(&[i], j)?),
        FailureEstimator::Tree => f_tree(source, latent, i, j),
        FailureEstimator::Blanket => f_blanket_best(&blanket_cond()?, i),
        FailureEstimator::BlanketWeighted => f_blanket_weighted(&blanket_cond()?, i),
        FailureEstimator::Auto => unreachable!(),
    }
}

/// Failures and leaks for every observed variable. Anchor columns take their
/// parameters from the anchor conditionals.
pub fn learn_loadings(
    source: &impl MomentSource,
    latent: &LatentNetwork,
    anchors: &AnchorMap,
    n_observed: usize,
    config: &LoadingsConfig,
) -> Result<NoisyOrLoadings> {
    let m = latent.len();
    if anchors.len() != m {
        return Err(AdfaError::invalid("one anchor per latent required"));
    }
    if !(0.0..=1.0).contains(&config.prune_threshold) {
        return Err(AdfaError::invalid("prune threshold must lie in [0, 1]"));
    }
    let method = config.leak_method.unwrap_or_else(|| LeakMethod::for_network(latent));
    let eval = LeakFreeEvaluator::new(latent, method, config.leak_samples, config.seed)?;
    let columns: Vec<(Vec<f64>, f64)> = (0..n_observed)
        .into_par_iter()
        .map(|j| -> Result<(Vec<f64>, f64)> {
            if let Some(i) = anchors.anchor_of.iter().position(|&a| a == j) {
                let (f, l) = anchors.implied_noisy_or(i);
                let mut col = vec![1.0; m];
                col[i] = f.min(1.0 - 1e-12);
                return Ok((col, l.clamp(0.0, LEAK_CEILING)));
            }
            let col = (0..m)
                .map(|i| {
                    let f = estimate_failure(source, latent, config.estimator, i, j)?;
                    Ok(if f >= config.prune_threshold { 1.0 } else { f })
                })
                .collect::<Result<Vec<f64>>>()?;
            let leak = leak_from(source.negative_rate(j)?, eval.negative_without_leak(&col)?)?;
            Ok((col, leak))
        })
        .collect::<Result<Vec<_>>>()?;
    let failures = (0..m).map(|i| columns.iter().map(|c| c.0[i]).collect()).collect();
    let leaks = columns.iter().map(|c| c.1).collect();
    NoisyOrLoadings::new(failures, leaks)
}

/// Per observed variable, its parents ranked by weight `log(1/f)` as
/// tab-separated `observed rank latent failure weight` rows.
pub fn loadings_table(loadings: &NoisyOrLoadings, space: &VariableSpace) -> String {
    let mut out = String::from("observed\trank\tlatent\tfailure\tweight\n");
    for j in 0..loadings.n() {
        let mut ps: Vec<(usize, f64)> = loadings.parents_of(j).into_iter().map(|i| (i, loadings.failures[i][j])).collect();
        ps.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for (rank, (i, f)) in ps.into_iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{f:.6}\t{:.6}\n",
                space.observed_names[j],
                rank + 1,
                space.latent_names[i],
                (1.0 / f).ln()
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{random_model, ParamRanges, StructureKind};
    use crate::inference::tree_negative_prob;
    use crate::model::exact_marginal;
    use proptest::prelude::*;

    /// Anchors occupy columns `0..m` (f = 0.4, l = 0.05); targets follow.
    fn with_targets(latent: LatentNetwork, targets: &[(Vec<f64>, f64)]) -> AdfaModel {
        let m = latent.len();
        let n = m + targets.len();
        let mut failures = vec![vec![1.0; n]; m];
        let mut leaks = vec![0.05; m];
        for i in 0..m {
            failures[i][i] = 0.4;
        }
        for (t, (col, l)) in targets.iter().enumerate() {
            for i in 0..m {
                failures[i][m + t] = col[i];
            }
            leaks.push(*l);
        }
        let loadings = NoisyOrLoadings::new(failures, leaks).unwrap();
        let anchors = AnchorMap::from_loadings((0..m).collect(), &loadings).unwrap();
        AdfaModel::new(VariableSpace::anonymous(m, n).unwrap(), latent, loadings, anchors).unwrap()
    }

    fn chain3() -> LatentNetwork {
        LatentNetwork::new(
            vec![vec![], vec![0], vec![1]],
            vec![
                vec![[0.6, 0.4]],
                vec![[0.8, 0.2], [0.25, 0.75]],
                vec![[0.7, 0.3], [0.15, 0.85]],
            ],
        )
        .unwrap()
    }

    fn cond_of(t: [f64; 4]) -> ConditionalMoment {
        conditional_from_joint(&SubsetMoment::new(vec![Var::Latent(0), Var::Observed(0)], t.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn conditional_by_hand() {
        // index = y + 2x
        let c = cond_of([0.54, 0.16, 0.06, 0.24]);
        assert!((c.table[0] - 0.9).abs() < 1e-12);
        assert!((c.table[1] - 0.4).abs() < 1e-12);
        let flat = cond_of([0.3 * 0.7, 0.7 * 0.7, 0.3 * 0.3, 0.7 * 0.3]);
        assert!((flat.table[0] - flat.table[1]).abs() < 1e-12);
    }

    #[test]
    fn conditional_degenerate() {
        let j = SubsetMoment::new(vec![Var::Latent(0), Var::Observed(0)], vec![0.5, 0.0, 0.5, 0.0]).unwrap();
        assert!(matches!(conditional_from_joint(&j), Err(AdfaError::Degenerate(_))));
        let two = SubsetMoment::new(vec![Var::Observed(0), Var::Observed(1)], vec![0.25; 4]).unwrap();
        assert!(conditional_from_joint(&two).is_err());
    }

    #[test]
    fn conditional_matches_tree_inference() {
        let model = with_targets(chain3(), &[(vec![0.3, 0.6, 0.5], 0.1)]);
        let joint = exact_marginal(&model, &[Var::Latent(0), Var::Latent(2), Var::Observed(3)]).unwrap();
        let c = conditional_from_joint(&joint).unwrap();
        for z in 0..4 {
            let cond = [Some(z & 1 == 1), None, Some(z & 2 == 2)];
            let t = tree_negative_prob(&model, 3, &cond).unwrap();
            assert!((c.table[z] - t).abs() < 1e-10);
        }
    }

    #[test]
    fn f_direct_examples() {
        // single latent, f = 0.3, l = 0.1
        let c = ConditionalMoment {
            target: 0,
            conditioning: vec![0],
            table: vec![0.9, 0.27],
            mass: vec![0.5, 0.5],
        };
        assert!((f_direct(&c).unwrap() - 0.3).abs() < 1e-12);
        let flat = ConditionalMoment {
            table: vec![0.9, 0.9],
            ..c.clone()
        };
        assert_eq!(f_direct(&flat).unwrap(), 1.0);
        let zero = ConditionalMoment {
            table: vec![0.0, 0.0],
            ..c
        };
        assert!(matches!(f_direct(&zero), Err(AdfaError::Degenerate(_))));
    }

    #[test]
    fn f_direct_biased_under_correlation_tree_is_not() {
        let latent = LatentNetwork::new(vec![vec![], vec![0]], vec![vec![[0.5, 0.5]], vec![[0.9, 0.1], [0.2, 0.8]]]).unwrap();
        let model = with_targets(latent.clone(), &[(vec![0.3, 0.5], 0.05)]);
        let src = PopulationSource::new(&model).unwrap();
        let direct = f_direct(&src.conditional(&[0], 2).unwrap()).unwrap();
        assert!((direct - 0.3).abs() > 0.05);
        assert!((f_tree(&src, &latent, 0, 2).unwrap() - 0.3).abs() < 1e-9);
    }

    #[test]
    fn f_blanket_chain_every_assignment() {
        let model = with_targets(chain3(), &[(vec![0.3, 0.6, 0.5], 0.1)]);
        let src = PopulationSource::new(&model).unwrap();
        let cond = src.conditional(&[0, 1, 2], 3).unwrap();
        for b in [[false, false], [true, false], [false, true], [true, true]] {
            assert!((f_blanket(&cond, 1, &b).unwrap() - 0.6).abs() < 1e-9);
        }
        assert!((f_blanket_weighted(&cond, 1).unwrap() - 0.6).abs() < 1e-9);
        assert!((f_blanket_best(&cond, 1).unwrap() - 0.6).abs() < 1e-9);
    }

    #[test]
    fn f_blanket_empty_blanket_is_direct() {
        let c = cond_of([0.54, 0.16, 0.06, 0.24]);
        assert_eq!(f_blanket(&c, 0, &[]).unwrap(), f_direct(&c).unwrap());
    }

    #[test]
    fn f_tree_chain_all_parents() {
        let truth = [0.3, 0.6, 0.5];
        let model = with_targets(chain3(), &[(truth.to_vec(), 0.1)]);
        let src = PopulationSource::new(&model).unwrap();
        for i in 0..3 {
            assert!((f_tree(&src, &model.latent, i, 3).unwrap() - truth[i]).abs() < 1e-8);
        }
    }

    /// Records the largest latent conditioning set requested.
    struct Recording<'a> {
        inner: PopulationSource<'a>,
        widest: AtomicUsize,
        calls: AtomicUsize,
    }

    impl MomentSource for Recording<'_> {
        fn joint(&self, latent_ids: &[usize], observed: Option<usize>) -> Result<SubsetMoment> {
            self.widest.fetch_max(latent_ids.len(), Ordering::Relaxed);
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.inner.joint(latent_ids, observed)
        }
        fn negative_rate(&self, j: usize) -> Result<f64> {
            self.inner.negative_rate(j)
        }
    }

    #[test]
    fn f_tree_needs_only_pairs() {
        // star: latent 0 has four neighbors, so its blanket has size 4
        let star = LatentNetwork::new(
            vec![vec![], vec![0], vec![0], vec![0], vec![0]],
            std::iter::once(vec![[0.5, 0.5]])
                .chain((0..4).map(|_| vec![[0.8, 0.2], [0.3, 0.7]]))
                .collect(),
        )
        .unwrap();
        let model = with_targets(star.clone(), &[(vec![0.4, 0.5, 0.6, 0.7, 0.8], 0.1)]);
        let src = Recording {
            inner: PopulationSource::new(&model).unwrap(),
            widest: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        };
        let f = f_tree(&src, &star, 0, 5).unwrap();
        assert!((f - 0.4).abs() < 1e-8);
        assert_eq!(src.widest.load(Ordering::Relaxed), 2);
        // leaf: one direct conditional plus one correction (pair + pair with target)
        src.calls.store(0, Ordering::Relaxed);
        assert!((f_tree(&src, &star, 3, 5).unwrap() - 0.7).abs() < 1e-8);
        assert_eq!(src.calls.load(Ordering::Relaxed), 3);
    }

    #[test]
    fn f_tree_independent_equals_direct() {
        let latent = LatentNetwork::independent(&[0.3, 0.6]).unwrap();
        let model = with_targets(latent.clone(), &[(vec![0.3, 0.5], 0.05)]);
        let src = PopulationSource::new(&model).unwrap();
        for i in 0..2 {
            let d = f_direct(&src.conditional(&[i], 2).unwrap()).unwrap();
            assert_eq!(f_tree(&src, &latent, i, 2).unwrap(), d);
        }
    }

    #[test]
    fn f_tree_degenerate_pair() {
        let latent = LatentNetwork::new(vec![vec![], vec![0]], vec![vec![[0.5, 0.5]], vec![[1.0, 0.0], [0.0, 1.0]]]);
        // deterministic CPT is allowed by the network type
        let latent = latent.unwrap();
        let model = with_targets(latent.clone(), &[(vec![0.3, 0.5], 0.05)]);
        let src = PopulationSource::new(&model).unwrap();
        assert!(matches!(f_tree(&src, &latent, 0, 2), Err(AdfaError::Degenerate(_))));
    }

    #[test]
    fn leak_examples() {
        let latent = LatentNetwork::independent(&[0.4]).unwrap();
        let l = estimate_leak(&latent, &[0.5], 0.64, LeakMethod::Quickscore, 0).unwrap();
        assert!((l - 0.2).abs() < 1e-12);
        let l0 = estimate_leak(&latent, &[0.5], 0.8, LeakMethod::Quickscore, 0).unwrap();
        assert!(l0.abs() < 1e-9);
        assert!(estimate_leak(&chain3(), &[0.5; 3], 0.5, LeakMethod::Quickscore, 0).is_err());
    }

    #[test]
    fn leak_methods_on_tree_model() {
        let model = random_model(5, 12, StructureKind::Tree, 11, &ParamRanges::default()).unwrap();
        let src = PopulationSource::new(&model).unwrap();
        for method in [LeakMethod::TreeBp, LeakMethod::Exact, LeakMethod::Sampling] {
            let eval = LeakFreeEvaluator::new(&model.latent, method, DEFAULT_LEAK_SAMPLES, 3).unwrap();
            let tol = if method == LeakMethod::Sampling { 2e-2 } else { 1e-8 };
            for j in 0..model.n() {
                let l = leak_from(src.negative_rate(j).unwrap(), eval.negative_without_leak(&model.loadings.failure_column(j)).unwrap()).unwrap();
                assert!((l - model.loadings.leaks[j]).abs() < tol, "{method:?} j={j}");
            }
        }
    }

    #[test]
    fn learn_loadings_population_tree() {
        let model = random_model(5, 12, StructureKind::Tree, 4, &ParamRanges::default()).unwrap();
        let src = PopulationSource::new(&model).unwrap();
        let est = learn_loadings(&src, &model.latent, &model.anchors, model.n(), &LoadingsConfig::default()).unwrap();
        for j in 0..model.n() {
            for i in 0..model.m() {
                assert!((est.failures[i][j] - model.loadings.failures[i][j]).abs() < 1e-8);
            }
            assert!((est.leaks[j] - model.loadings.leaks[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn learn_loadings_population_dag_blanket() {
        let model = random_model(4, 9, StructureKind::InDegree(2), 2, &ParamRanges::default()).unwrap();
        let src = PopulationSource::new(&model).unwrap();
        let cfg = LoadingsConfig {
            leak_method: Some(LeakMethod::Exact),
            ..LoadingsConfig::default()
        };
        let est = learn_loadings(&src, &model.latent, &model.anchors, model.n(), &cfg).unwrap();
        for j in 0..model.n() {
            for i in 0..model.m() {
                assert!((est.failures[i][j] - model.loadings.failures[i][j]).abs() < 1e-8);
            }
            assert!((est.leaks[j] - model.loadings.leaks[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn recovered_source_close_to_population() {
        let model = random_model(3, 8, StructureKind::Independent, 9, &ParamRanges::default()).unwrap();
        let data = crate::generate::sample_dataset(&model, 100_000, 1).unwrap();
        let src = RecoveredSource::new(&data, &model.anchors, loadings_recovery_config(), None).unwrap();
        let est = learn_loadings(&src, &model.latent, &model.anchors, model.n(), &LoadingsConfig::default()).unwrap();
        for j in model.m()..model.n() {
            for i in 0..model.m() {
                assert!((est.failures[i][j] - model.loadings.failures[i][j]).abs() < 0.1, "i={i} j={j}");
            }
        }
    }

    #[test]
    fn loadings_table_ranks_by_weight() {
        let l = NoisyOrLoadings::new(vec![vec![0.5], vec![0.2], vec![1.0]], vec![0.1]).unwrap();
        let text = loadings_table(&l, &VariableSpace::anonymous(3, 1).unwrap());
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].starts_with("x0\t1\ty1\t0.200000"));
        assert!(rows[1].starts_with("x0\t2\ty0\t0.500000"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn direct_exact_on_independent(seed in 0u64..10_000) {
            let model = random_model(4, 8, StructureKind::Independent, seed, &ParamRanges::default()).unwrap();
            let src = PopulationSource::new(&model).unwrap();
            for j in 0..model.n() {
                for i in model.loadings.parents_of(j) {
                    let f = f_direct(&src.conditional(&[i], j).unwrap()).unwrap();
                    prop_assert!((f - model.loadings.failures[i][j]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn tree_and_blanket_agree_on_trees(seed in 0u64..10_000, m in 2usize..7) {
            let model = random_model(m, m + 3, StructureKind::Tree, seed, &ParamRanges::default()).unwrap();
            let src = PopulationSource::new(&model).unwrap();
            for j in m..model.n() {
                for i in 0..m {
                    let t = f_tree(&src, &model.latent, i, j).unwrap();
                    let b = estimate_failure(&src, &model.latent, FailureEstimator::Blanket, i, j).unwrap();
                    prop_assert!((t - model.loadings.failures[i][j]).abs() < 1e-8);
                    prop_assert!((t - b).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn estimators_clamp_noisy_input(t in proptest::collection::vec(-0.1f64..1.0, 4)) {
            let j = SubsetMoment::new(vec![Var::Latent(0), Var::Observed(0)], t).unwrap();
            if let Ok(c) = conditional_from_joint(&j) {
                if let Ok(f) = f_direct(&c) {
                    prop_assert!(f > 0.0 && f <= 1.0);
                }
            }
            let l = leak_from(0.9, 0.3).unwrap();
            prop_assert!((0.0..1.0).contains(&l));
        }
    }
}
