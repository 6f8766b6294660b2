//! Per-subset recovery over the probability simplex by exponentiated gradient.

use serde::{Deserialize, Serialize};

use super::mixing::MixingMatrix;
use super::RecoveryConfig;
use crate::error::{AdfaError, Result};
use crate::table::{SubsetMoment, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexRecovery {
    pub moment: SubsetMoment,
    pub converged: bool,
    pub iterations: usize,
    pub gap: f64,
    pub objective: f64,
}

/// `Σ p log(p / max(q, eps))`, skipping `p = 0` terms.
pub(crate) fn kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pa, _)| **pa > 0.0)
        .map(|(pa, qa)| pa * (pa / qa.max(eps)).ln())
        .sum()
}

/// Objective and gradient of `KL(μ_A, Rμ) + λ KL(μ_indep, μ)` for one table.
pub(crate) struct TableObjective<'a> {
    pub target: &'a [f64],
    pub mixing: &'a MixingMatrix,
    pub indep: Option<&'a [f64]>,
    pub lambda: f64,
    pub eps: f64,
}

impl TableObjective<'_> {
    pub fn value(&self, mu: &[f64]) -> f64 {
        let mut v = kl(self.target, &self.mixing.apply(mu), self.eps);
        if let Some(ind) = self.indep {
            if self.lambda > 0.0 {
                v += self.lambda * kl(ind, mu, self.eps);
            }
        }
        v
    }

    /// Adds the gradient at `mu` into `out`.
    pub fn add_gradient(&self, mu: &[f64], out: &mut [f64]) {
        let rmu = self.mixing.apply(mu);
        let ratio: Vec<f64> = self
            .target
            .iter()
            .zip(&rmu)
            .map(|(a, r)| a / r.max(self.eps))
            .collect();
        for (o, g) in out.iter_mut().zip(self.mixing.apply_transpose(&ratio)) {
            *o -= g;
        }
        if let Some(ind) = self.indep {
            if self.lambda > 0.0 {
                for ((o, p), m) in out.iter_mut().zip(ind).zip(mu) {
                    *o -= self.lambda * p / m.max(self.eps);
                }
            }
        }
    }
}

/// Objective of [`recover_simplex`] at `mu`.
pub fn simplex_objective(
    anchor_moment: &SubsetMoment,
    mixing: &MixingMatrix,
    indep: Option<&SubsetMoment>,
    lambda: f64,
    eps: f64,
    mu: &[f64],
) -> f64 {
    TableObjective {
        target: &anchor_moment.table,
        mixing,
        indep: indep.map(|m| &m.table[..]),
        lambda,
        eps,
    }
    .value(mu)
}

/// Minimizes a smooth convex function over the simplex with exponentiated
/// gradient and an adaptive step. Returns `(point, value, gap, iterations, converged)`.
pub(crate) fn exponentiated_gradient(
    start: Vec<f64>,
    value: impl Fn(&[f64]) -> f64,
    gradient: impl Fn(&[f64]) -> Vec<f64>,
    gap_tol: f64,
    max_iters: usize,
) -> (Vec<f64>, f64, f64, usize, bool) {
    let mut x = start;
    let mut fx = value(&x);
    let mut eta = 1.0;
    let mut gap = f64::INFINITY;
    for it in 0..max_iters {
        let g = gradient(&x);
        let gmin = g.iter().copied().fold(f64::INFINITY, f64::min);
        gap = x.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() - gmin;
        if gap <= gap_tol {
            return (x, fx, gap, it, true);
        }
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand: Vec<f64> = x
                .iter()
                .zip(&g)
                .map(|(xi, gi)| xi * (-eta * (gi - gmin)).exp())
                .collect();
            let s: f64 = cand.iter().sum();
            cand.iter_mut().for_each(|c| *c /= s);
            let fc = value(&cand);
            if fc <= fx {
                let moved = cand.iter().zip(&x).any(|(a, b)| a != b);
                x = cand;
                fx = fc;
                eta = (eta * 1.5).min(1e6);
                accepted = moved;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            // no representable descent step left
            return (x, fx, gap, it, gap <= gap_tol);
        }
    }
    (x, fx, gap, max_iters, gap <= gap_tol)
}

/// Solves `argmin_{μ ∈ Δ} KL(μ_A, Rμ) + λ KL(μ_indep, μ)` from a uniform start.
/// Non-convergence within `max_iters` is reported through `converged`.
pub fn recover_simplex(
    anchor_moment: &SubsetMoment,
    mixing: &MixingMatrix,
    indep: Option<&SubsetMoment>,
    config: &RecoveryConfig,
) -> Result<SimplexRecovery> {
    config.validate()?;
    let dim = anchor_moment.table.len();
    if mixing.dim != dim || mixing.ids != anchor_moment.ids {
        return Err(AdfaError::invalid("mixing matrix does not match the anchor moment"));
    }
    if let Some(ind) = indep {
        if ind.table.len() != dim {
            return Err(AdfaError::invalid("independence target has the wrong size"));
        }
    }
    if config.lambda > 0.0 && indep.is_none() {
        return Err(AdfaError::invalid("lambda > 0 requires an independence target"));
    }
    let obj = TableObjective {
        target: &anchor_moment.table,
        mixing,
        indep: indep.map(|m| &m.table[..]),
        lambda: config.lambda,
        eps: config.epsilon_clamp,
    };
    let (mu, objective, gap, iterations, converged) = exponentiated_gradient(
        vec![1.0 / dim as f64; dim],
        |x| obj.value(x),
        |x| {
            let mut g = vec![0.0; x.len()];
            obj.add_gradient(x, &mut g);
            g
        },
        config.gap_tol,
        config.max_iters,
    );
    Ok(SimplexRecovery {
        moment: SubsetMoment::new(anchor_moment.ids.clone(), mu)?,
        converged,
        iterations,
        gap,
        objective,
    })
}

/// Product distribution of single-variable marginals over `ids`.
pub fn independent_marginal_vector(singletons: &[SubsetMoment], ids: &[Var]) -> Result<SubsetMoment> {
    let p1 = ids
        .iter()
        .map(|v| {
            singletons
                .iter()
                .find(|s| s.ids == [*v])
                .map(|s| s.table[1] / (s.table[0] + s.table[1]))
                .ok_or_else(|| AdfaError::invalid(format!("no singleton marginal for {v}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = (0..1usize << ids.len())
        .map(|idx| {
            p1.iter()
                .enumerate()
                .map(|(t, p)| if (idx >> t) & 1 == 1 { *p } else { 1.0 - p })
                .product()
        })
        .collect();
    SubsetMoment::new(ids.to_vec(), table)
}
