//! Synthetic ground truth: random models and forward sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::BinaryDataset;
use crate::error::{AdfaError, Result};
use crate::model::{AdfaModel, AnchorMap, LatentNetwork, NoisyOrLoadings, VariableSpace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructureKind {
    Independent,
    Tree,
    /// Every latent (after the first `k` in a random order) gets exactly `k` parents.
    InDegree(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    /// Range of `P(y = 1 | pa)` per CPT row.
    pub prior: (f64, f64),
    pub failure: (f64, f64),
    pub leak: (f64, f64),
    pub anchor_failure: (f64, f64),
    /// Probability that a non-anchor observation gets an edge from a given latent.
    pub edge_prob: f64,
    /// Minimum change in `P(y = 1 | pa)` when any single parent flips.
    pub cpt_min_gap: f64,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            prior: (0.1, 0.9),
            failure: (0.1, 0.9),
            leak: (0.01, 0.1),
            anchor_failure: (0.1, 0.5),
            edge_prob: 0.5,
            cpt_min_gap: 0.0,
        }
    }
}

impl ParamRanges {
    fn validate(&self) -> Result<()> {
        let open = |(lo, hi): (f64, f64), name: &str, allow_zero: bool| -> Result<()> {
            let lo_ok = if allow_zero { lo >= 0.0 } else { lo > 0.0 };
            if !(lo_ok && lo <= hi && hi < 1.0) {
                return Err(AdfaError::invalid(format!("infeasible {name} range ({lo}, {hi})")));
            }
            Ok(())
        };
        open(self.prior, "prior", false)?;
        open(self.failure, "failure", false)?;
        open(self.leak, "leak", true)?;
        open(self.anchor_failure, "anchor failure", false)?;
        if !(0.0..=1.0).contains(&self.edge_prob) {
            return Err(AdfaError::invalid("edge_prob must lie in [0,1]"));
        }
        if self.cpt_min_gap < 0.0 || self.cpt_min_gap > self.prior.1 - self.prior.0 {
            return Err(AdfaError::invalid(format!(
                "cpt_min_gap {} cannot be met inside the prior range",
                self.cpt_min_gap
            )));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draws a valid model. Anchors are the first `m` observed variables.
pub fn random_model(
    m: usize,
    n: usize,
    structure: StructureKind,
    seed: u64,
    ranges: &ParamRanges,
) -> Result<AdfaModel> {
    ranges.validate()?;
    if m == 0 || n < m {
        return Err(AdfaError::invalid(format!("need 1 <= m <= n, got m={m}, n={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);

    let mut parents = vec![Vec::new(); m];
    for (t, &node) in order.iter().enumerate() {
        let earlier = &order[..t];
        parents[node] = match structure {
            StructureKind::Independent => Vec::new(),
            StructureKind::Tree if t > 0 => vec![earlier[rng.gen_range(0..t)]],
            StructureKind::Tree => Vec::new(),
            StructureKind::InDegree(k) => {
                let mut chosen: Vec<usize> = earlier.choose_multiple(&mut rng, k.min(t)).copied().collect();
                chosen.sort_unstable();
                chosen
            }
        };
    }
    let cpts = parents
        .iter()
        .map(|pa| random_cpt(&mut rng, pa.len(), ranges))
        .collect::<Result<Vec<_>>>()?;
    let latent = LatentNetwork::new(parents, cpts)?;

    let mut failures = vec![vec![1.0; n]; m];
    let mut leaks = vec![0.0; n];
    for j in 0..n {
        leaks[j] = uniform(&mut rng, ranges.leak);
        if j < m {
            failures[j][j] = uniform(&mut rng, ranges.anchor_failure);
        } else {
            for row in failures.iter_mut() {
                if rng.gen_bool(ranges.edge_prob) {
                    row[j] = uniform(&mut rng, ranges.failure);
                }
            }
        }
    }
    let loadings = NoisyOrLoadings::new(failures, leaks)?;
    let anchors = AnchorMap::from_loadings((0..m).collect(), &loadings)?;
    AdfaModel::new(VariableSpace::anonymous(m, n)?, latent, loadings, anchors)
}

fn random_cpt(rng: &mut impl Rng, k: usize, ranges: &ParamRanges) -> Result<Vec<[f64; 2]>> {
    const MAX_TRIES: usize = 100_000;
    for _ in 0..MAX_TRIES {
        let p1: Vec<f64> = (0..1usize << k).map(|_| uniform(rng, ranges.prior)).collect();
        let separated = (0..k).all(|t| {
            (0..p1.len())
                .filter(|r| r & (1 << t) == 0)
                .all(|r| (p1[r | (1 << t)] - p1[r]).abs() >= ranges.cpt_min_gap)
        });
        if separated {
            return Ok(p1.into_iter().map(|p| [1.0 - p, p]).collect());
        }
    }
    Err(AdfaError::invalid(format!(
        "could not draw a {k}-parent CPT with gap {}",
        ranges.cpt_min_gap
    )))
}

/// Gives every anchor a second, weak latent parent with failure probability
/// `failure`. The anchor conditionals stay those of the original single-parent
/// columns, so a learner trusting them is misspecified.
pub fn add_anchor_confounders(model: &AdfaModel, failure: f64, seed: u64) -> Result<AdfaModel> {
    let m = model.m();
    if m < 2 {
        return Err(AdfaError::invalid("confounding anchors needs at least two latents"));
    }
    if !(failure > 0.0 && failure < 1.0) {
        return Err(AdfaError::invalid(format!("confounder failure {failure} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loadings = model.loadings.clone();
    for (i, &a) in model.anchors.anchor_of.iter().enumerate() {
        let mut k = rng.gen_range(0..m - 1);
        if k >= i {
            k += 1;
        }
        loadings.failures[k][a] = failure;
        loadings.edge_mask[k][a] = true;
    }
    AdfaModel::from_parts_unchecked(model.space.clone(), model.latent.clone(), loadings, model.anchors.clone())
}

/// Forward samples `n` latent rows.
pub fn sample_latents(latent: &LatentNetwork, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec<bool>>> {
    let order = latent.topological_order()?;
    Ok((0..n)
        .map(|_| {
            let mut y = vec![false; latent.len()];
            for &i in &order {
                let p1 = latent.cond_prob(i, true, |p| y[p]);
                y[i] = rng.gen::<f64>() < p1;
            }
            y
        })
        .collect())
}

/// Forward samples `n` rows with latent ground truth; deterministic in `seed`.
pub fn sample_dataset(model: &AdfaModel, n: usize, seed: u64) -> Result<BinaryDataset> {
    if n == 0 {
        return Err(AdfaError::invalid("sample count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent_rows = sample_latents(&model.latent, n, &mut rng)?;
    let observed_rows = latent_rows
        .iter()
        .map(|y| {
            (0..model.n())
                .map(|j| rng.gen::<f64>() >= model.loadings.prob_negative(j, |i| y[i]))
                .collect()
        })
        .collect();
    BinaryDataset::new(model.n(), observed_rows, Some(latent_rows))
}
