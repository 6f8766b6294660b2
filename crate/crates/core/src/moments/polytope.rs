//! Joint recovery of all low-order latent moments over a relaxation of the
//! marginal polytope, by fully-corrective conditional gradient.

use serde::{Deserialize, Serialize};

use super::mixing::{build_mixing, MixingMatrix};
use super::oracle::{linear_oracle_local, linear_oracle_marginal};
use super::simplex::{exponentiated_gradient, independent_marginal_vector, recover_simplex, TableObjective};
use super::{Constraint, MomentLayout, MomentSet, RecoveryConfig, StepRule};
use crate::error::{AdfaError, Result};
use crate::model::AnchorMap;
use crate::table::{latents, SubsetMoment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolytopeRecovery {
    pub moments: MomentSet,
    pub converged: bool,
    pub iterations: usize,
    pub gap: f64,
    pub objective: f64,
    /// Objective value at the start of every outer iteration, then the final value.
    pub trace: Vec<f64>,
}

const BISECTION_STEPS: usize = 40;

struct JointObjective {
    layout: MomentLayout,
    targets: Vec<Vec<f64>>,
    mixings: Vec<MixingMatrix>,
    indeps: Vec<Option<Vec<f64>>>,
    lambda: f64,
    eps: f64,
}

impl JointObjective {
    fn table(&self, s: usize) -> TableObjective<'_> {
        TableObjective {
            target: &self.targets[s],
            mixing: &self.mixings[s],
            indep: self.indeps[s].as_deref(),
            lambda: self.lambda,
            eps: self.eps,
        }
    }

    fn value(&self, mu: &[f64]) -> f64 {
        (0..self.targets.len())
            .map(|s| self.table(s).value(self.layout.slice(mu, s)))
            .sum()
    }

    fn gradient(&self, mu: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; mu.len()];
        for s in 0..self.targets.len() {
            let off = self.layout.offsets[s];
            let len = 1 << self.layout.subsets[s].len();
            self.table(s).add_gradient(self.layout.slice(mu, s), &mut g[off..off + len]);
        }
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn combine(atoms: &[Vec<f64>], weights: &[f64], dim: usize) -> Vec<f64> {
    let mut mu = vec![0.0; dim];
    for (atom, &w) in atoms.iter().zip(weights) {
        if w != 0.0 {
            for (m, a) in mu.iter_mut().zip(atom) {
                *m += w * a;
            }
        }
    }
    mu
}

/// Minimizes `Σ_Z KL(μ_{A_Z}, R_Z μ_Z) + λ Σ_Z KL(μ_indep,Z, μ_Z)` over the
/// local or marginal polytope. `anchor_moments` holds anchor-view tables for
/// every latent subset up to its order.
pub fn recover_polytope(anchor_moments: &MomentSet, anchors: &AnchorMap, config: &RecoveryConfig) -> Result<PolytopeRecovery> {
    config.validate()?;
    if config.constraint == Constraint::Simplex {
        return Err(AdfaError::invalid("recover_polytope needs the local or marginal constraint"));
    }
    let ids = &anchor_moments.latents;
    let m = ids.len();
    // oracles work on positions 0..m
    let position = |i: usize| ids.iter().position(|&x| x == i).expect("latent in set");
    let layout = MomentLayout::new(
        anchor_moments
            .moments
            .iter()
            .map(|mm| mm.ids.iter().map(|v| position(v.index())).collect())
            .collect(),
    );

    let mixings = anchor_moments
        .moments
        .iter()
        .map(|mm| build_mixing(anchors, &mm.ids))
        .collect::<Result<Vec<_>>>()?;
    let indeps = if config.lambda > 0.0 {
        let cfg = RecoveryConfig {
            lambda: 0.0,
            ..config.clone()
        };
        let singles = ids
            .iter()
            .map(|&i| {
                let am = anchor_moments.require(&[i])?;
                Ok(recover_simplex(am, &build_mixing(anchors, &am.ids)?, None, &cfg)?.moment)
            })
            .collect::<Result<Vec<SubsetMoment>>>()?;
        anchor_moments
            .moments
            .iter()
            .map(|mm| Ok(Some(independent_marginal_vector(&singles, &mm.ids)?.table)))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![None; anchor_moments.moments.len()]
    };
    let objective = JointObjective {
        targets: anchor_moments.moments.iter().map(|mm| mm.table.clone()).collect(),
        layout,
        mixings,
        indeps,
        lambda: config.lambda,
        eps: config.epsilon_clamp,
    };
    let dim = objective.layout.dim;
    let oracle = |g: &[f64]| -> Result<Vec<f64>> {
        Ok(match config.constraint {
            Constraint::Marginal => linear_oracle_marginal(&objective.layout, g, m)?.point,
            Constraint::Local => linear_oracle_local(&objective.layout, g)?.point,
            Constraint::Simplex => unreachable!(),
        })
    };

    let mut atoms = vec![objective.layout.uniform()];
    let mut weights = vec![1.0];
    let mut mu = atoms[0].clone();
    let mut f = objective.value(&mu);
    let mut trace = Vec::new();
    let mut gap = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for t in 0..config.max_iters {
        iterations = t;
        trace.push(f);
        let g = objective.gradient(&mu);
        let s = oracle(&g)?;
        gap = dot(&mu, &g) - dot(&s, &g);
        if gap <= config.gap_tol {
            converged = true;
            break;
        }
        let idx = match atoms
            .iter()
            .position(|a| a.iter().zip(&s).all(|(x, y)| (x - y).abs() < 1e-12))
        {
            Some(i) => i,
            None => {
                atoms.push(s.clone());
                weights.push(0.0);
                atoms.len() - 1
            }
        };

        // step toward the new vertex
        let d: Vec<f64> = s.iter().zip(&mu).map(|(a, b)| a - b).collect();
        let gamma = match config.step_rule {
            StepRule::Harmonic => 2.0 / (t as f64 + 2.0),
            StepRule::LineSearch => line_search(&objective, &mu, &d),
        };
        let mut stepped: Vec<f64> = weights.iter().map(|w| w * (1.0 - gamma)).collect();
        stepped[idx] += gamma;
        let stepped_mu = combine(&atoms, &stepped, dim);
        let fs = objective.value(&stepped_mu);
        if fs <= f {
            weights = stepped;
            mu = stepped_mu;
            f = fs;
        } else if config.step_rule == StepRule::Harmonic {
            let gamma = line_search(&objective, &mu, &d);
            let mut ls: Vec<f64> = weights.iter().map(|w| w * (1.0 - gamma)).collect();
            ls[idx] += gamma;
            let ls_mu = combine(&atoms, &ls, dim);
            let fl = objective.value(&ls_mu);
            if fl <= f {
                weights = ls;
                mu = ls_mu;
                f = fl;
            }
        }

        // fully corrective re-weighting over the active set
        if config.corrective_iters > 0 && atoms.len() > 1 {
            let (w, fw, _, _, _) = exponentiated_gradient(
                weights.clone(),
                |w| objective.value(&combine(&atoms, w, dim)),
                |w| {
                    let g = objective.gradient(&combine(&atoms, w, dim));
                    atoms.iter().map(|a| dot(a, &g)).collect()
                },
                config.gap_tol * 1e-2,
                config.corrective_iters,
            );
            if fw <= f {
                weights = w;
                mu = combine(&atoms, &weights, dim);
                f = objective.value(&mu);
            }
        }

        // drop atoms whose weight has vanished, if that does not cost anything
        if weights.iter().any(|&w| w < 1e-13) {
            let keep: Vec<usize> = (0..atoms.len()).filter(|&a| weights[a] >= 1e-13).collect();
            let total: f64 = keep.iter().map(|&a| weights[a]).sum();
            let pruned_atoms: Vec<Vec<f64>> = keep.iter().map(|&a| atoms[a].clone()).collect();
            let pruned_weights: Vec<f64> = keep.iter().map(|&a| weights[a] / total).collect();
            let pruned_mu = combine(&pruned_atoms, &pruned_weights, dim);
            let fp = objective.value(&pruned_mu);
            if fp <= f {
                atoms = pruned_atoms;
                weights = pruned_weights;
                mu = pruned_mu;
                f = fp;
            }
        }
        iterations = t + 1;
    }
    trace.push(f);

    let moments = MomentSet::from_flat(
        &MomentLayout::new(
            anchor_moments
                .moments
                .iter()
                .map(|mm| mm.ids.iter().map(|v| v.index()).collect())
                .collect(),
        ),
        anchor_moments.order,
        ids.clone(),
        &mu,
    )?;
    debug_assert!(moments.moments.iter().all(|mm| mm.ids == latents(&mm.ids.iter().map(|v| v.index()).collect::<Vec<_>>())));
    Ok(PolytopeRecovery {
        moments,
        converged,
        iterations,
        gap,
        objective: f,
        trace,
    })
}

/// Bisection on the directional derivative of the convex objective.
fn line_search(objective: &JointObjective, mu: &[f64], d: &[f64]) -> f64 {
    let deriv = |gamma: f64| -> f64 {
        let point: Vec<f64> = mu.iter().zip(d).map(|(m, x)| m + gamma * x).collect();
        dot(&objective.gradient(&point), d)
    };
    if deriv(1.0) <= 0.0 {
        return 1.0;
    }
    if deriv(0.0) >= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if deriv(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}
