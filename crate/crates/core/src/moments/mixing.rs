use serde::{Deserialize, Serialize};

use crate::error::{AdfaError, Result};
use crate::model::{AnchorMap, ANCHOR_MIN_SEPARATION};
use crate::table::Var;

/// `R_Z` with `entries[a * dim + z] = Π_k P(A_k = a_k | Z_k = z_k)`, the
/// Kronecker product of the per-variable anchor conditionals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingMatrix {
    pub ids: Vec<Var>,
    pub dim: usize,
    pub entries: Vec<f64>,
}

impl MixingMatrix {
    pub fn get(&self, a: usize, z: usize) -> f64 {
        self.entries[a * self.dim + z]
    }

    /// `R μ`.
    pub fn apply(&self, mu: &[f64]) -> Vec<f64> {
        self.entries
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(mu).map(|(r, m)| r * m).sum())
            .collect()
    }

    /// `Rᵀ v`.
    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (row, &va) in self.entries.chunks_exact(self.dim).zip(v) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += r * va;
            }
        }
        out
    }
}

/// Builds `R_Z`; latents use their anchor conditionals, observed variables
/// act as their own (perfect) anchors.
pub fn build_mixing(anchors: &AnchorMap, ids: &[Var]) -> Result<MixingMatrix> {
    let factors = ids
        .iter()
        .map(|&v| match v {
            Var::Latent(i) => {
                let c = anchors
                    .conditionals
                    .get(i)
                    .ok_or_else(|| AdfaError::invalid(format!("latent {i} has no anchor")))?;
                if (c[1][1] - c[1][0]).abs() < ANCHOR_MIN_SEPARATION {
                    return Err(AdfaError::degenerate(format!(
                        "anchor conditional of latent {i} has equal columns"
                    )));
                }
                Ok(*c)
            }
            Var::Observed(_) => Ok([[1.0, 0.0], [0.0, 1.0]]),
        })
        .collect::<Result<Vec<_>>>()?;
    let dim = 1usize << ids.len();
    let mut entries = vec![0.0; dim * dim];
    for a in 0..dim {
        for z in 0..dim {
            entries[a * dim + z] = factors
                .iter()
                .enumerate()
                .map(|(k, c)| c[(a >> k) & 1][(z >> k) & 1])
                .product();
        }
    }
    Ok(MixingMatrix {
        ids: ids.to_vec(),
        dim,
        entries,
    })
}
