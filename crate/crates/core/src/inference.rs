//! Closed-form and message-passing evaluation of `P(x_j = 0)` for
//! independent and tree-structured latent networks.

use crate::error::{AdfaError, Result};
use crate::model::{AdfaModel, LatentNetwork};

/// Quickscore: `Π_i (P(y_i=0) + P(y_i=1) f_{i,j})`, times `(1 - l_j)` if asked.
pub fn quickscore_negative(model: &AdfaModel, j: usize, include_leak: bool) -> Result<f64> {
    if j >= model.n() {
        return Err(AdfaError::invalid(format!("observed index {j} out of range")));
    }
    let base = quickscore_product(&model.latent, &model.loadings.failure_column(j))?;
    Ok(if include_leak {
        base * (1.0 - model.loadings.leaks[j])
    } else {
        base
    })
}

/// Quickscore product for an explicit failure column.
pub fn quickscore_product(latent: &LatentNetwork, failures: &[f64]) -> Result<f64> {
    if latent.has_edges() {
        return Err(AdfaError::Precondition(
            "quickscore requires independent latents".into(),
        ));
    }
    Ok(latent
        .cpts
        .iter()
        .zip(failures)
        .map(|(cpt, f)| cpt[0][0] + cpt[0][1] * f)
        .product())
}

/// `P(x_j = 0 | conditioning)` on a tree (or forest) latent network.
/// `conditioning[i] = Some(v)` clamps latent `i` to `v`.
pub fn tree_negative_prob(
    model: &AdfaModel,
    j: usize,
    conditioning: &[Option<bool>],
) -> Result<f64> {
    if j >= model.n() {
        return Err(AdfaError::invalid(format!("observed index {j} out of range")));
    }
    let f = model.loadings.failure_column(j);
    let ratio = tree_failure_expectation(&model.latent, &f, conditioning)?;
    Ok((1.0 - model.loadings.leaks[j]) * ratio)
}

/// `E[Π_i f_i^{y_i} | conditioning]` by upward sum-product on a forest.
pub fn tree_failure_expectation(
    latent: &LatentNetwork,
    failures: &[f64],
    conditioning: &[Option<bool>],
) -> Result<f64> {
    if !latent.is_forest() {
        return Err(AdfaError::Precondition(
            "tree inference requires every latent to have at most one parent".into(),
        ));
    }
    let m = latent.len();
    if failures.len() != m || conditioning.len() != m {
        return Err(AdfaError::invalid("failure/conditioning length must equal latent count"));
    }
    let weighted = upward_partition(latent, conditioning, |i, y| if y { failures[i] } else { 1.0 })?;
    let plain = upward_partition(latent, conditioning, |_, _| 1.0)?;
    if plain <= 0.0 {
        return Err(AdfaError::degenerate(format!(
            "conditioning event {conditioning:?} has zero probability"
        )));
    }
    Ok(weighted / plain)
}

fn upward_partition(
    latent: &LatentNetwork,
    conditioning: &[Option<bool>],
    potential: impl Fn(usize, bool) -> f64,
) -> Result<f64> {
    let order = latent.topological_order()?;
    let children = latent.children();
    // message[i][v]: contribution of the subtree under i given its parent takes value v
    let mut message = vec![[1.0f64; 2]; latent.len()];
    let mut total = 1.0;
    for &i in order.iter().rev() {
        let local = |y: bool| -> f64 {
            if conditioning[i].is_some_and(|c| c != y) {
                return 0.0;
            }
            potential(i, y) * children[i].iter().map(|&c| message[c][y as usize]).product::<f64>()
        };
        let (l0, l1) = (local(false), local(true));
        match latent.parents[i].first() {
            Some(_) => {
                let cpt = &latent.cpts[i];
                message[i] = [
                    cpt[0][0] * l0 + cpt[0][1] * l1,
                    cpt[1][0] * l0 + cpt[1][1] * l1,
                ];
            }
            None => {
                let cpt = latent.cpts[i][0];
                total *= cpt[0] * l0 + cpt[1] * l1;
            }
        }
    }
    Ok(total)
}
