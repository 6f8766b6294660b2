//! Linear minimization oracles over the marginal polytope (exact, by
//! enumeration) and the local consistency polytope (linear programming).

use super::lp::solve_lp;
use super::{drop_bit, MomentLayout};
use crate::error::{AdfaError, Result};
use crate::model::check_enumerable;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    /// Flat moment vector in the layout's order.
    pub point: Vec<f64>,
    pub value: f64,
    /// The minimizing joint assignment for the marginal oracle.
    pub assignment: Option<Vec<bool>>,
}

/// Exact minimization of `⟨gradient, μ⟩` over the marginal polytope of the
/// latents `0..m`. Ties go to the lexicographically smallest assignment,
/// comparing `y_0` first.
pub fn linear_oracle_marginal(layout: &MomentLayout, gradient: &[f64], m: usize) -> Result<OracleResult> {
    check_enumerable(m)?;
    if gradient.len() != layout.dim {
        return Err(AdfaError::invalid("gradient does not match the moment layout"));
    }
    if layout.subsets.iter().flatten().any(|&i| i >= m) {
        return Err(AdfaError::invalid("layout mentions latents outside 0..m"));
    }
    // subsets touching each latent, with the latent's bit position
    let mut touching: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
    for (s, z) in layout.subsets.iter().enumerate() {
        for (t, &i) in z.iter().enumerate() {
            touching[i].push((s, t));
        }
    }
    let mut local_idx = vec![0usize; layout.subsets.len()];
    let mut value: f64 = layout.offsets.iter().map(|&o| gradient[o]).sum();
    let mut values = vec![0.0; 1 << m];
    let mut y = 0usize;
    values[0] = value;
    // Gray-code walk: one latent flips per step
    for step in 1usize..(1 << m) {
        let bit = step.trailing_zeros() as usize;
        y ^= 1 << bit;
        for &(s, t) in &touching[bit] {
            let off = layout.offsets[s];
            let old = local_idx[s];
            let new = old ^ (1 << t);
            value += gradient[off + new] - gradient[off + old];
            local_idx[s] = new;
        }
        values[y] = value;
    }
    let eval = |y: usize| -> f64 {
        layout
            .subsets
            .iter()
            .enumerate()
            .map(|(s, z)| {
                let idx = z
                    .iter()
                    .enumerate()
                    .fold(0, |acc, (t, &i)| acc | (((y >> i) & 1) << t));
                gradient[layout.offsets[s] + idx]
            })
            .sum()
    };
    let approx_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = gradient.iter().map(|g| g.abs()).sum::<f64>() + 1.0;
    let tol = 1e-11 * scale;
    let lex_key = |y: usize| y.reverse_bits() >> (usize::BITS as usize - m.max(1));
    let mut best: Option<(usize, f64)> = None;
    for (cand, &v) in values.iter().enumerate() {
        if v > approx_min + tol {
            continue;
        }
        let exact = eval(cand);
        best = match best {
            None => Some((cand, exact)),
            Some((b, bv)) => {
                if exact < bv - tol || (exact <= bv + tol && lex_key(cand) < lex_key(b)) {
                    Some((cand, exact))
                } else {
                    Some((b, bv))
                }
            }
        };
    }
    let (y, value) = best.expect("at least one assignment");
    let assignment: Vec<bool> = (0..m).map(|i| (y >> i) & 1 == 1).collect();
    Ok(OracleResult {
        point: layout.indicator(|i| assignment[i]),
        value,
        assignment: Some(assignment),
    })
}

/// Minimizes `⟨gradient, μ⟩` over the local consistency polytope: every
/// singleton table is a distribution and every table marginalizes onto each
/// of its one-smaller sub-tables.
pub fn linear_oracle_local(layout: &MomentLayout, gradient: &[f64]) -> Result<OracleResult> {
    if gradient.len() != layout.dim {
        return Err(AdfaError::invalid("gradient does not match the moment layout"));
    }
    let order = layout.subsets.iter().map(Vec::len).max().unwrap_or(0);
    if !(1..=3).contains(&order) {
        return Err(AdfaError::invalid(format!("local oracle supports order 1..=3, got {order}")));
    }
    let (a, b) = local_constraints(layout);
    let sol = solve_lp(&a, &b, gradient)?;
    let residual = layout.consistency_residual(&sol.x);
    if residual > 1e-7 {
        return Err(AdfaError::Internal(format!(
            "local oracle solution violates consistency by {residual:e}"
        )));
    }
    Ok(OracleResult {
        point: sol.x,
        value: sol.value,
        assignment: None,
    })
}

fn local_constraints(layout: &MomentLayout) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (s, z) in layout.subsets.iter().enumerate() {
        if z.len() == 1 {
            let mut row = vec![0.0; layout.dim];
            row[layout.offsets[s]] = 1.0;
            row[layout.offsets[s] + 1] = 1.0;
            a.push(row);
            b.push(1.0);
        }
    }
    for (s, c, t) in layout.containment_pairs() {
        let child_len = 1usize << layout.subsets[c].len();
        for child_idx in 0..child_len {
            let mut row = vec![0.0; layout.dim];
            for idx in 0..(1usize << layout.subsets[s].len()) {
                if drop_bit(idx, t) == child_idx {
                    row[layout.offsets[s] + idx] = 1.0;
                }
            }
            row[layout.offsets[c] + child_idx] = -1.0;
            a.push(row);
            b.push(0.0);
        }
    }
    (a, b)
}
