use serde::{Deserialize, Serialize};

use crate::error::{AdfaError, Result};

/// `N` binary observation rows, optionally with ground-truth latent rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryDataset {
    pub n_observed: usize,
    pub observed_rows: Vec<Vec<bool>>,
    pub latent_rows: Option<Vec<Vec<bool>>>,
}

impl BinaryDataset {
    pub fn new(
        n_observed: usize,
        observed_rows: Vec<Vec<bool>>,
        latent_rows: Option<Vec<Vec<bool>>>,
    ) -> Result<Self> {
        if let Some(r) = observed_rows.iter().position(|r| r.len() != n_observed) {
            return Err(AdfaError::invalid(format!("row {r} does not have {n_observed} columns")));
        }
        if let Some(lat) = &latent_rows {
            if lat.len() != observed_rows.len() {
                return Err(AdfaError::invalid("latent rows and observed rows differ in count"));
            }
            if let Some(first) = lat.first() {
                if lat.iter().any(|r| r.len() != first.len()) {
                    return Err(AdfaError::invalid("latent rows differ in length"));
                }
            }
        }
        Ok(Self {
            n_observed,
            observed_rows,
            latent_rows,
        })
    }

    pub fn len(&self) -> usize {
        self.observed_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed_rows.is_empty()
    }

    pub fn m_latent(&self) -> Option<usize> {
        self.latent_rows.as_ref().and_then(|r| r.first().map(Vec::len))
    }

    /// Splits into `[0, at)` and `[at, N)`.
    pub fn split_at(&self, at: usize) -> (BinaryDataset, BinaryDataset) {
        let at = at.min(self.len());
        let (a, b) = self.observed_rows.split_at(at);
        let (la, lb) = match &self.latent_rows {
            Some(l) => {
                let (x, y) = l.split_at(at);
                (Some(x.to_vec()), Some(y.to_vec()))
            }
            None => (None, None),
        };
        (
            BinaryDataset {
                n_observed: self.n_observed,
                observed_rows: a.to_vec(),
                latent_rows: la,
            },
            BinaryDataset {
                n_observed: self.n_observed,
                observed_rows: b.to_vec(),
                latent_rows: lb,
            },
        )
    }

    /// Empirical `P(x_j = 0)`.
    pub fn negative_rate(&self, j: usize) -> Result<f64> {
        if self.is_empty() {
            return Err(AdfaError::invalid("empty dataset"));
        }
        let zeros = self.observed_rows.iter().filter(|r| !r[j]).count();
        Ok(zeros as f64 / self.len() as f64)
    }
}
