//! Dense two-phase primal simplex for `min cᵀx  s.t.  Ax = b, x ≥ 0`.
//!
//! Sized for the local-polytope programs of desk-scale moment recovery; the
//! tableau is dense, so memory grows as rows × columns.

use crate::error::{AdfaError, Result};

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;
/// Consecutive degenerate pivots before switching to Bland's rule.
const DEGENERATE_SWITCH: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub value: f64,
    pub pivots: usize,
}

struct Tableau {
    rows: usize,
    width: usize,
    data: Vec<f64>,
    basis: Vec<usize>,
    /// Reduced costs (length `width - 1`) followed by `-objective`.
    cost: Vec<f64>,
    active_row: Vec<bool>,
    pivots: usize,
}

impl Tableau {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.data[r * self.width + self.width - 1]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.width;
        let p = self.data[r * w + c];
        for k in 0..w {
            self.data[r * w + k] /= p;
        }
        let pivot_row: Vec<f64> = self.data[r * w..(r + 1) * w].to_vec();
        for rr in 0..self.rows {
            if rr == r || !self.active_row[rr] {
                continue;
            }
            let f = self.data[rr * w + c];
            if f != 0.0 {
                for (k, pv) in pivot_row.iter().enumerate() {
                    if *pv != 0.0 {
                        self.data[rr * w + k] -= f * pv;
                    }
                }
            }
        }
        let f = self.cost[c];
        if f != 0.0 {
            for (k, pv) in pivot_row.iter().enumerate() {
                self.cost[k] -= f * pv;
            }
        }
        self.basis[r] = c;
        self.pivots += 1;
    }

    fn set_costs(&mut self, c: &[f64]) {
        let w = self.width;
        self.cost = vec![0.0; w];
        self.cost[..c.len()].copy_from_slice(c);
        for r in 0..self.rows {
            if !self.active_row[r] {
                continue;
            }
            let cb = c.get(self.basis[r]).copied().unwrap_or(0.0);
            if cb != 0.0 {
                for k in 0..w {
                    self.cost[k] -= cb * self.data[r * w + k];
                }
            }
        }
    }

    /// Runs simplex iterations over columns `< allowed`.
    fn optimize(&mut self, allowed: usize) -> Result<()> {
        let mut degenerate_streak = 0;
        let limit = 50 * (self.rows + self.width) + 10_000;
        for _ in 0..limit {
            let bland = degenerate_streak > DEGENERATE_SWITCH;
            let entering = if bland {
                (0..allowed).find(|&c| self.cost[c] < -PIVOT_TOL)
            } else {
                (0..allowed)
                    .filter(|&c| self.cost[c] < -PIVOT_TOL)
                    .min_by(|&a, &b| self.cost[a].total_cmp(&self.cost[b]))
            };
            let Some(c) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                if !self.active_row[r] {
                    continue;
                }
                let a = self.at(r, c);
                if a > PIVOT_TOL {
                    let ratio = self.rhs(r) / a;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((br, bv)) => {
                            if ratio < bv - 1e-12 || (ratio <= bv + 1e-12 && self.basis[r] < self.basis[br]) {
                                Some((r, ratio))
                            } else {
                                Some((br, bv))
                            }
                        }
                    };
                }
            }
            let Some((r, ratio)) = leave else {
                return Err(AdfaError::Internal("linear program is unbounded".into()));
            };
            if ratio.abs() < 1e-12 {
                degenerate_streak += 1;
            } else {
                degenerate_streak = 0;
            }
            self.pivot(r, c);
        }
        Err(AdfaError::Internal("simplex iteration limit reached".into()))
    }
}

/// Solves the standard-form program. `a` is row-major with `b.len()` rows.
pub fn solve_lp(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Result<LpSolution> {
    let rows = b.len();
    let n = c.len();
    if a.len() != rows || a.iter().any(|r| r.len() != n) {
        return Err(AdfaError::invalid("constraint matrix shape mismatch"));
    }
    let width = n + rows + 1;
    let mut data = vec![0.0; rows * width];
    for (r, (row, &br)) in a.iter().zip(b).enumerate() {
        let sign = if br < 0.0 { -1.0 } else { 1.0 };
        for (k, &v) in row.iter().enumerate() {
            data[r * width + k] = sign * v;
        }
        data[r * width + n + r] = 1.0;
        data[r * width + width - 1] = sign * br;
    }
    let mut t = Tableau {
        rows,
        width,
        data,
        basis: (n..n + rows).collect(),
        cost: Vec::new(),
        active_row: vec![true; rows],
        pivots: 0,
    };

    // phase 1: minimize the sum of artificials
    let mut phase1 = vec![0.0; n + rows];
    phase1[n..].fill(1.0);
    t.set_costs(&phase1);
    t.optimize(n + rows)?;
    let infeasibility = -t.cost[width - 1];
    if infeasibility > FEAS_TOL {
        return Err(AdfaError::Internal(format!(
            "linear program infeasible (phase-1 residual {infeasibility:e})"
        )));
    }
    // drive artificials out of the basis; rows that cannot pivot are redundant
    for r in 0..rows {
        if t.basis[r] < n {
            continue;
        }
        match (0..n).find(|&k| t.at(r, k).abs() > PIVOT_TOL) {
            Some(k) => t.pivot(r, k),
            None => t.active_row[r] = false,
        }
    }

    // phase 2
    t.set_costs(c);
    t.optimize(n)?;

    let mut x = vec![0.0; n];
    for r in 0..rows {
        if t.active_row[r] && t.basis[r] < n {
            x[t.basis[r]] = t.rhs(r).max(0.0);
        }
    }
    let value = x.iter().zip(c).map(|(xi, ci)| xi * ci).sum();
    Ok(LpSolution {
        x,
        value,
        pivots: t.pivots,
    })
}
