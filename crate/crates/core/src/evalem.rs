//! Posterior inference, evaluation tasks and Monte-Carlo EM refinement of
//! the noisy-or loadings.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::BinaryDataset;
use crate::error::{AdfaError, Result};
use crate::loadings::{FAILURE_FLOOR, LEAK_CEILING};
use crate::model::{check_enumerable, AdfaModel, AnchorMap, LatentNetwork, NoisyOrLoadings};

/// Per-factor probability floor for held-out likelihoods.
pub const LOGLIK_FLOOR: f64 = 1e-12;

const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// Rows are processed in chunks of this size so that reductions happen in a
/// fixed order whatever the thread count.
const CHUNK: usize = 256;

/// Derives an independent seed for a named sub-task.
pub fn substream(seed: u64, tag: u64, index: u64) -> u64 {
    // splitmix64 over a combination of the three words
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Exact posterior by enumeration over all latent assignments, reusing the
/// log-prior table across rows.
pub struct PosteriorEngine<'a> {
    model: &'a AdfaModel,
    log_prior: Vec<f64>,
    /// `log f_{i,j}` indexed `[j][i]`.
    log_f: Vec<Vec<f64>>,
}

impl<'a> PosteriorEngine<'a> {
    pub fn new(model: &'a AdfaModel) -> Result<Self> {
        check_enumerable(model.m())?;
        let log_prior = model
            .latent
            .joint_table()?
            .into_iter()
            .map(|p| if p > 0.0 { p.ln() } else { LOG_ZERO })
            .collect();
        let log_f = (0..model.n())
            .map(|j| model.loadings.failure_column(j).iter().map(|f| f.ln()).collect())
            .collect();
        Ok(Self {
            model,
            log_prior,
            log_f,
        })
    }

    /// Unnormalized `log P(y, x)` for every `y`, with latents fixed by
    /// `clamp` excluded.
    fn log_joint(&self, x: &[bool], clamp: &[Option<bool>]) -> Result<Vec<f64>> {
        let (m, n) = (self.model.m(), self.model.n());
        if x.len() != n || clamp.len() != m {
            return Err(AdfaError::invalid("row or clamp length does not match the model"));
        }
        let size = 1usize << m;
        // negatives contribute a term linear in y
        let mut a = vec![0.0; m];
        let mut base = 0.0;
        for j in (0..n).filter(|&j| !x[j]) {
            base += (1.0 - self.model.loadings.leaks[j]).ln();
            for (ai, lf) in a.iter_mut().zip(&self.log_f[j]) {
                *ai += lf;
            }
        }
        let mut w = vec![0.0; size];
        for y in 1..size {
            let low = y.trailing_zeros() as usize;
            w[y] = w[y & (y - 1)] + a[low];
        }
        let (mut fixed_mask, mut fixed_val) = (0usize, 0usize);
        for (i, c) in clamp.iter().enumerate() {
            if let Some(v) = c {
                fixed_mask |= 1 << i;
                fixed_val |= (*v as usize) << i;
            }
        }
        for (y, wy) in w.iter_mut().enumerate() {
            *wy = if y & fixed_mask != fixed_val {
                LOG_ZERO
            } else {
                *wy + base + self.log_prior[y]
            };
        }
        // positives: Π f^{y} by a low-bit recursion
        let mut prod = vec![1.0; size];
        for j in (0..n).filter(|&j| x[j]) {
            let col = self.model.loadings.failure_column(j);
            let keep = 1.0 - self.model.loadings.leaks[j];
            for y in 1..size {
                prod[y] = prod[y & (y - 1)] * col[y.trailing_zeros() as usize];
            }
            for (wy, p) in w.iter_mut().zip(&prod) {
                let fire = 1.0 - keep * p;
                *wy += if fire > 0.0 { fire.ln() } else { LOG_ZERO };
            }
        }
        Ok(w)
    }

    /// `P(y_i = 1 | x, clamp)` for every latent.
    pub fn posterior(&self, x: &[bool], clamp: &[Option<bool>]) -> Result<Vec<f64>> {
        let w = self.log_joint(x, clamp)?;
        let top = w.iter().copied().fold(LOG_ZERO, f64::max);
        if top == LOG_ZERO {
            return Err(AdfaError::degenerate("evidence has zero probability under the model"));
        }
        let m = self.model.m();
        let mut out = vec![0.0; m];
        let mut total = 0.0;
        for (y, wy) in w.iter().enumerate() {
            let p = (wy - top).exp();
            if p == 0.0 {
                continue;
            }
            total += p;
            let mut bits = y;
            while bits != 0 {
                out[bits.trailing_zeros() as usize] += p;
                bits &= bits - 1;
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
        Ok(out)
    }

    /// `log P(x)`.
    pub fn log_evidence(&self, x: &[bool]) -> Result<f64> {
        let w = self.log_joint(x, &vec![None; self.model.m()])?;
        let top = w.iter().copied().fold(LOG_ZERO, f64::max);
        if top == LOG_ZERO {
            return Ok(LOG_ZERO);
        }
        Ok(top + w.iter().map(|v| (v - top).exp()).sum::<f64>().ln())
    }
}

/// Exact `P(y_i = 1 | x)` for every latent.
pub fn posterior_exact(model: &AdfaModel, x: &[bool]) -> Result<Vec<f64>> {
    PosteriorEngine::new(model)?.posterior(x, &vec![None; model.m()])
}

/// Per-latent edges and children, for single-site updates.
struct GibbsKernel<'a> {
    model: &'a AdfaModel,
    children: Vec<Vec<usize>>,
    edges: Vec<Vec<(usize, f64)>>,
    parents_of: Vec<Vec<usize>>,
}

impl<'a> GibbsKernel<'a> {
    fn new(model: &'a AdfaModel) -> Self {
        let l = &model.loadings;
        Self {
            model,
            children: model.latent.children(),
            edges: (0..l.m())
                .map(|i| (0..l.n()).filter(|&j| l.edge_mask[i][j]).map(|j| (j, l.failures[i][j])).collect())
                .collect(),
            parents_of: (0..l.n()).map(|j| l.parents_of(j)).collect(),
        }
    }

    /// `P(y_i = 1 | y_{-i}, x)`, or `None` if both values are impossible.
    fn site_prob(&self, y: &mut [bool], x: &[bool], i: usize) -> Option<f64> {
        let net = &self.model.latent;
        let l = &self.model.loadings;
        let mut lw = [0.0f64; 2];
        for v in [false, true] {
            y[i] = v;
            let yr: &[bool] = y;
            let mut s = net.cond_prob(i, v, |p| yr[p]).ln();
            for &c in &self.children[i] {
                s += net.cond_prob(c, yr[c], |p| yr[p]).ln();
            }
            for &(j, _) in &self.edges[i] {
                let q = (1.0 - l.leaks[j])
                    * self.parents_of[j].iter().filter(|&&k| yr[k]).map(|&k| l.failures[k][j]).product::<f64>();
                s += if x[j] { (1.0 - q).ln() } else { q.ln() };
            }
            lw[v as usize] = s;
        }
        if lw[0] == LOG_ZERO && lw[1] == LOG_ZERO {
            return None;
        }
        Some(1.0 / (1.0 + (lw[0] - lw[1]).exp()))
    }

    /// One systematic sweep; adds Rao-Blackwellized site probabilities to `tally`.
    fn sweep(&self, y: &mut [bool], x: &[bool], rng: &mut impl Rng, tally: Option<&mut [f64]>) {
        let mut tally = tally;
        for i in 0..y.len() {
            let current = y[i];
            match self.site_prob(y, x, i) {
                Some(p1) => {
                    y[i] = rng.gen::<f64>() < p1;
                    if let Some(t) = tally.as_deref_mut() {
                        t[i] += p1;
                    }
                }
                None => {
                    y[i] = current;
                    if let Some(t) = tally.as_deref_mut() {
                        t[i] += current as u8 as f64;
                    }
                }
            }
        }
    }
}

/// Gibbs chains for a set of rows, with Rao-Blackwellized tallies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsState {
    pub assignments: Vec<Vec<bool>>,
    pub seed: u64,
    /// Sum over recorded sweeps of `P(y_i = 1 | y_{-i}, x)`, per row.
    pub tallies: Vec<Vec<f64>>,
    pub recorded: usize,
}

impl GibbsState {
    pub fn new(rows: usize, m: usize, seed: u64) -> Self {
        Self {
            assignments: vec![vec![false; m]; rows],
            seed,
            tallies: vec![vec![0.0; m]; rows],
            recorded: 0,
        }
    }

    pub fn marginals(&self, row: usize) -> Vec<f64> {
        let r = self.recorded.max(1) as f64;
        self.tallies[row].iter().map(|t| t / r).collect()
    }
}

/// Single-site Gibbs estimate of `P(y_i = 1 | x)`.
pub fn gibbs_posterior(model: &AdfaModel, x: &[bool], sweeps: usize, burn_in: usize, seed: u64) -> Result<Vec<f64>> {
    if sweeps <= burn_in {
        return Err(AdfaError::invalid("sweeps must exceed burn-in"));
    }
    if x.len() != model.n() {
        return Err(AdfaError::invalid("row length does not match the model"));
    }
    let kernel = GibbsKernel::new(model);
    let mut state = GibbsState::new(1, model.m(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in 0..sweeps {
        let record = s >= burn_in;
        let (y, t) = (&mut state.assignments[0], &mut state.tallies[0]);
        kernel.sweep(y, x, &mut rng, record.then_some(&mut t[..]));
        state.recorded += record as usize;
    }
    Ok(state.marginals(0))
}

/// Mean `log P(y)` per row, each factor floored at [`LOGLIK_FLOOR`].
pub fn heldout_latent_loglik(latent: &LatentNetwork, rows: &[Vec<bool>]) -> Result<f64> {
    if rows.is_empty() {
        return Err(AdfaError::invalid("no rows to score"));
    }
    let m = latent.len();
    let mut total = 0.0;
    for y in rows {
        if y.len() != m {
            return Err(AdfaError::invalid("latent row length does not match the network"));
        }
        total += (0..m)
            .map(|i| latent.cond_prob(i, y[i], |p| y[p]).max(LOGLIK_FLOOR).ln())
            .sum::<f64>();
    }
    Ok(total / rows.len() as f64)
}

/// Candidates (latents not revealed) ranked by `P(y_c = 1 | revealed, x)`,
/// ties broken by id.
pub fn last_tag_predict(engine: &PosteriorEngine<'_>, revealed: &[usize], x: &[bool]) -> Result<Vec<(usize, f64)>> {
    let m = engine.model.m();
    let mut clamp = vec![None; m];
    for &r in revealed {
        *clamp
            .get_mut(r)
            .ok_or_else(|| AdfaError::invalid(format!("latent {r} out of range")))? = Some(true);
    }
    let post = engine.posterior(x, &clamp)?;
    let mut ranked: Vec<(usize, f64)> = (0..m).filter(|i| clamp[*i].is_none()).map(|i| (i, post[i])).collect();
    if ranked.is_empty() {
        return Err(AdfaError::invalid("every latent is revealed; nothing to predict"));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Top-1 accuracy of withheld-tag prediction over up to `max_rows` rows with
/// at least two positive tags; one random tag is withheld per row.
pub fn last_tag_accuracy(model: &AdfaModel, data: &BinaryDataset, max_rows: usize, seed: u64) -> Result<LastTagReport> {
    let truth = data
        .latent_rows
        .as_ref()
        .ok_or_else(|| AdfaError::invalid("last-tag evaluation needs latent rows"))?;
    if data.m_latent() != Some(model.m()) || data.n_observed != model.n() {
        return Err(AdfaError::invalid("dataset shape does not match the model"));
    }
    let engine = PosteriorEngine::new(model)?;
    let eligible: Vec<usize> = (0..data.len())
        .filter(|&r| truth[r].iter().filter(|&&t| t).count() >= 2)
        .take(max_rows)
        .collect();
    if eligible.is_empty() {
        return Err(AdfaError::invalid("no row has two or more positive tags"));
    }
    let hits: Vec<bool> = eligible
        .par_iter()
        .map(|&r| -> Result<bool> {
            let tags: Vec<usize> = (0..model.m()).filter(|&i| truth[r][i]).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, 1, r as u64));
            let withheld = *tags.choose(&mut rng).expect("two or more tags");
            let revealed: Vec<usize> = tags.into_iter().filter(|&t| t != withheld).collect();
            let ranked = last_tag_predict(&engine, &revealed, &data.observed_rows[r])?;
            Ok(ranked[0].0 == withheld)
        })
        .collect::<Result<Vec<_>>>()?;
    let correct = hits.iter().filter(|&&h| h).count();
    Ok(LastTagReport {
        rows: hits.len(),
        correct,
        accuracy: correct as f64 / hits.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LastTagReport {
    pub rows: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Expected auxiliary-variable counts per observed variable. Slot `k < m` is
/// "latent `k` fired first", slot `m` is the leak, slot `m + 1` is "nothing
/// fired" (`x_j = 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxCounts {
    /// `count(A_j = k)`, indexed `[j][k]` for `k` in `0..=m+1`.
    pub fired: Vec<Vec<f64>>,
    /// `count(A_j ≥ k ∧ y_k = 1)`, indexed `[j][k]` for `k` in `0..=m`
    /// (the leak is always on).
    pub reached: Vec<Vec<f64>>,
}

impl AuxCounts {
    fn zeros(m: usize, n: usize) -> Self {
        Self {
            fired: vec![vec![0.0; m + 2]; n],
            reached: vec![vec![0.0; m + 1]; n],
        }
    }

    fn add(&mut self, other: &AuxCounts) {
        for (a, b) in self.fired.iter_mut().flatten().zip(other.fired.iter().flatten()) {
            *a += b;
        }
        for (a, b) in self.reached.iter_mut().flatten().zip(other.reached.iter().flatten()) {
            *a += b;
        }
    }

    /// `count(A_j ≤ k)` for every slot.
    pub fn cumulative(&self, j: usize) -> Vec<f64> {
        self.fired[j]
            .iter()
            .scan(0.0, |acc, c| {
                *acc += c;
                Some(*acc)
            })
            .collect()
    }
}

/// `P(A_j = k | y)` for `k` in `0..=m+1` under the auxiliary generative
/// model: parents are tried in id order, then the leak.
pub fn aux_distribution(loadings: &NoisyOrLoadings, j: usize, y: &[bool]) -> Vec<f64> {
    let m = loadings.m();
    let mut out = vec![0.0; m + 2];
    let mut survive = 1.0;
    for k in 0..m {
        if y[k] {
            let f = loadings.failures[k][j];
            out[k] = survive * (1.0 - f);
            survive *= f;
        }
    }
    out[m] = survive * loadings.leaks[j];
    out[m + 1] = survive * (1.0 - loadings.leaks[j]);
    out
}

/// Inner E-step: responsibilities over auxiliary slots for every
/// (row, sample), accumulated into counts.
pub fn inner_e_step(loadings: &NoisyOrLoadings, rows: &[Vec<bool>], samples: &[Vec<Vec<bool>>]) -> AuxCounts {
    let (m, n) = (loadings.m(), loadings.n());
    let partial: Vec<AuxCounts> = rows
        .par_chunks(CHUNK)
        .zip(samples.par_chunks(CHUNK))
        .map(|(xs, ys)| {
            let mut c = AuxCounts::zeros(m, n);
            for (x, row_samples) in xs.iter().zip(ys) {
                for y in row_samples {
                    for j in 0..n {
                        accumulate(loadings, j, x[j], y, &mut c);
                    }
                }
            }
            c
        })
        .collect();
    let mut total = AuxCounts::zeros(m, n);
    for c in &partial {
        total.add(c);
    }
    total
}

fn accumulate(loadings: &NoisyOrLoadings, j: usize, xj: bool, y: &[bool], c: &mut AuxCounts) {
    let m = loadings.m();
    let mut resp = aux_distribution(loadings, j, y);
    if xj {
        resp[m + 1] = 0.0;
    } else {
        resp.iter_mut().take(m + 1).for_each(|r| *r = 0.0);
    }
    let z: f64 = resp.iter().sum();
    if z <= 0.0 {
        // impossible under the current parameters; contributes nothing
        return;
    }
    // tail[k] = P(A_j ≥ k | x, y)
    let mut tail = 1.0;
    for k in 0..=m {
        let r = resp[k] / z;
        if k == m || y[k] {
            c.reached[j][k] += tail;
        }
        c.fired[j][k] += r;
        tail -= r;
    }
    c.fired[j][m + 1] += resp[m + 1] / z;
}

/// `1 - count(A = k) / denominator`, or `None` for an empty denominator.
pub fn m_step_failure(count_fired: f64, denominator: f64) -> Option<f64> {
    (denominator > 0.0).then(|| 1.0 - count_fired / denominator)
}

/// Inner M-step. Only existing edges are updated; parameters with an empty
/// denominator are left unchanged.
pub fn inner_m_step(loadings: &NoisyOrLoadings, counts: &AuxCounts) -> Result<NoisyOrLoadings> {
    let (m, n) = (loadings.m(), loadings.n());
    let mut failures = loadings.failures.clone();
    let mut leaks = loadings.leaks.clone();
    for j in 0..n {
        for k in 0..m {
            if !loadings.edge_mask[k][j] {
                continue;
            }
            if let Some(f) = m_step_failure(counts.fired[j][k], counts.reached[j][k]) {
                failures[k][j] = f.clamp(FAILURE_FLOOR, 1.0 - 1e-12);
            }
        }
        if let Some(keep) = m_step_failure(counts.fired[j][m], counts.reached[j][m]) {
            leaks[j] = (1.0 - keep).clamp(0.0, LEAK_CEILING);
        }
    }
    NoisyOrLoadings::new(failures, leaks)
}

/// `Σ log P(x | y)` over rows and their samples (`P(y)` is held fixed).
pub fn complete_loglik(loadings: &NoisyOrLoadings, rows: &[Vec<bool>], samples: &[Vec<Vec<bool>>]) -> f64 {
    let partial: Vec<f64> = rows
        .par_chunks(CHUNK)
        .zip(samples.par_chunks(CHUNK))
        .map(|(xs, ys)| {
            let mut s = 0.0;
            for (x, row_samples) in xs.iter().zip(ys) {
                for y in row_samples {
                    for (j, &xj) in x.iter().enumerate() {
                        let q = loadings.prob_negative(j, |i| y[i]);
                        let p = if xj { 1.0 - q } else { q };
                        s += p.max(f64::MIN_POSITIVE).ln();
                    }
                }
            }
            s
        })
        .collect();
    partial.iter().sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub outer_steps: usize,
    pub burn_in: usize,
    pub sweeps: usize,
    /// Samples retained per row, evenly spaced over the post-burn-in sweeps.
    pub samples: usize,
    pub inner_steps: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            outer_steps: 10,
            burn_in: 10,
            sweeps: 20,
            samples: 5,
            inner_steps: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmStep {
    pub step: usize,
    pub loglik_before: f64,
    pub loglik_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmResult {
    pub model: AdfaModel,
    pub trace: Vec<EmStep>,
}

/// Monte-Carlo EM over failures and leaks with `P(Y)` held fixed. Anchor
/// conditionals are re-derived from the refined anchor columns.
pub fn em_refine(model: &AdfaModel, data: &BinaryDataset, config: &EmConfig) -> Result<EmResult> {
    em_refine_with(model, data, config, |_, _| Ok(()))
}

/// As [`em_refine`], calling `on_step(step, model)` after every outer step.
pub fn em_refine_with(
    model: &AdfaModel,
    data: &BinaryDataset,
    config: &EmConfig,
    mut on_step: impl FnMut(usize, &AdfaModel) -> Result<()>,
) -> Result<EmResult> {
    if config.samples == 0 || config.sweeps < config.samples || config.inner_steps == 0 {
        return Err(AdfaError::invalid("EM needs samples >= 1, sweeps >= samples and inner_steps >= 1"));
    }
    if data.n_observed != model.n() {
        return Err(AdfaError::invalid("dataset width does not match the model"));
    }
    let mut current = model.clone();
    let mut state = GibbsState::new(data.len(), model.m(), config.seed);
    let mut trace = Vec::new();
    let stride = config.sweeps / config.samples;
    for step in 0..config.outer_steps {
        let kernel = GibbsKernel::new(&current);
        let samples: Vec<Vec<Vec<bool>>> = state
            .assignments
            .par_iter_mut()
            .zip(data.observed_rows.par_iter())
            .enumerate()
            .map(|(r, (y, x))| {
                let mut rng = ChaCha8Rng::seed_from_u64(substream(config.seed, step as u64, r as u64));
                let burn = if step == 0 { config.burn_in } else { config.burn_in.min(2) };
                for _ in 0..burn {
                    kernel.sweep(y, x, &mut rng, None);
                }
                let mut kept = Vec::with_capacity(config.samples);
                for s in 0..config.sweeps {
                    kernel.sweep(y, x, &mut rng, None);
                    if (s + 1) % stride == 0 && kept.len() < config.samples {
                        kept.push(y.clone());
                    }
                }
                kept
            })
            .collect();

        let mut loadings = current.loadings.clone();
        let before = complete_loglik(&loadings, &data.observed_rows, &samples);
        let mut prev = before;
        for _ in 0..config.inner_steps {
            let counts = inner_e_step(&loadings, &data.observed_rows, &samples);
            let next = inner_m_step(&loadings, &counts)?;
            let ll = complete_loglik(&next, &data.observed_rows, &samples);
            if ll < prev - 1e-9 * prev.abs().max(1.0) {
                return Err(AdfaError::Internal(format!(
                    "EM inner step decreased the complete-data log-likelihood: {prev} -> {ll}"
                )));
            }
            loadings = next;
            prev = ll;
        }
        trace.push(EmStep {
            step,
            loglik_before: before,
            loglik_after: prev,
        });
        let anchors = AnchorMap::from_loadings(current.anchors.anchor_of.clone(), &loadings)?;
        current = AdfaModel::from_parts_unchecked(current.space.clone(), current.latent.clone(), loadings, anchors)?;
        on_step(step, &current)?;
    }
    Ok(EmResult { model: current, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::{random_model, sample_dataset, ParamRanges, StructureKind};
    use crate::model::{joint_prob, VariableSpace};
    use proptest::prelude::*;

    fn brute_posterior(model: &AdfaModel, x: &[bool]) -> Vec<f64> {
        let m = model.m();
        let mut out = vec![0.0; m];
        let mut total = 0.0;
        for y in 0..1usize << m {
            let yv: Vec<bool> = (0..m).map(|i| y >> i & 1 == 1).collect();
            let p = joint_prob(model, &yv, x).unwrap();
            total += p;
            for i in 0..m {
                if yv[i] {
                    out[i] += p;
                }
            }
        }
        out.iter().map(|v| v / total).collect()
    }

    fn single(prior: f64, f: f64, l: f64) -> AdfaModel {
        let loadings = NoisyOrLoadings::new(vec![vec![f]], vec![l]).unwrap();
        let anchors = AnchorMap::from_loadings(vec![0], &loadings).unwrap();
        AdfaModel::new(
            VariableSpace::anonymous(1, 1).unwrap(),
            LatentNetwork::independent(&[prior]).unwrap(),
            loadings,
            anchors,
        )
        .unwrap()
    }

    #[test]
    fn posterior_matches_enumeration() {
        let model = random_model(5, 9, StructureKind::Tree, 3, &ParamRanges::default()).unwrap();
        let data = sample_dataset(&model, 30, 1).unwrap();
        let engine = PosteriorEngine::new(&model).unwrap();
        for x in &data.observed_rows {
            let fast = engine.posterior(x, &[None; 5]).unwrap();
            for (a, b) in fast.iter().zip(brute_posterior(&model, x)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_uninformative_is_prior() {
        let mut model = single(0.35, 0.3, 0.05);
        model.loadings = NoisyOrLoadings::new(vec![vec![1.0]], vec![0.05]).unwrap();
        for v in [false, true] {
            assert!((posterior_exact(&model, &[v]).unwrap()[0] - 0.35).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_near_perfect_anchor() {
        let model = single(0.3, 0.01, 0.001);
        let p = posterior_exact(&model, &[true]).unwrap()[0];
        // 0.3·0.99 / (0.3·(1 - 0.999·0.01) + 0.7·0.001)
        let expected = 0.3 * (1.0 - 0.999 * 0.01) / (0.3 * (1.0 - 0.999 * 0.01) + 0.7 * 0.001);
        assert!((p - expected).abs() < 1e-12);
        assert!(p > 0.99);
    }

    #[test]
    fn total_probability() {
        let model = random_model(3, 4, StructureKind::Tree, 8, &ParamRanges::default()).unwrap();
        let engine = PosteriorEngine::new(&model).unwrap();
        let mut acc = [0.0; 3];
        for xs in 0..16usize {
            let x: Vec<bool> = (0..4).map(|j| xs >> j & 1 == 1).collect();
            let px = engine.log_evidence(&x).unwrap().exp();
            for (a, p) in acc.iter_mut().zip(engine.posterior(&x, &[None; 3]).unwrap()) {
                *a += p * px;
            }
        }
        let truth = crate::moments::latent_moments_population(&model, 1).unwrap();
        for i in 0..3 {
            assert!((acc[i] - truth.require(&[i]).unwrap().table[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn gibbs_converges() {
        let model = random_model(3, 6, StructureKind::Tree, 5, &ParamRanges::default()).unwrap();
        let data = sample_dataset(&model, 5, 2).unwrap();
        for x in &data.observed_rows {
            let g = gibbs_posterior(&model, x, 5000, 500, 9).unwrap();
            let e = posterior_exact(&model, x).unwrap();
            for (a, b) in g.iter().zip(&e) {
                assert!((a - b).abs() < 0.02);
            }
        }
        let x = &data.observed_rows[0];
        assert_eq!(gibbs_posterior(&model, x, 200, 10, 4).unwrap(), gibbs_posterior(&model, x, 200, 10, 4).unwrap());
        assert!(gibbs_posterior(&model, x, 10, 10, 4).is_err());
    }

    #[test]
    fn gibbs_perfect_anchor_pins_latent() {
        let model = single(0.2, 0.5, 0.0);
        let g = gibbs_posterior(&model, &[true], 300, 20, 1).unwrap();
        assert_eq!(g[0], 1.0);
    }

    #[test]
    fn heldout_examples() {
        let uniform = LatentNetwork::independent(&[0.5; 4]).unwrap();
        let ll = heldout_latent_loglik(&uniform, &[vec![true, false, true, true]]).unwrap();
        assert!((ll + 4.0 * 2f64.ln()).abs() < 1e-12);
        let det = LatentNetwork::independent(&[1.0]).unwrap();
        let ll = heldout_latent_loglik(&det, &[vec![false]]).unwrap();
        assert!((ll - LOGLIK_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn heldout_true_model_wins() {
        let model = random_model(5, 5, StructureKind::Tree, 12, &ParamRanges::default()).unwrap();
        let data = sample_dataset(&model, 10_000, 3).unwrap();
        let rows = data.latent_rows.as_ref().unwrap();
        let truth = heldout_latent_loglik(&model.latent, rows).unwrap();
        let others = [
            LatentNetwork::independent(&[0.5; 5]).unwrap(),
            random_model(5, 5, StructureKind::Tree, 13, &ParamRanges::default()).unwrap().latent,
        ];
        for o in &others {
            assert!(truth > heldout_latent_loglik(o, rows).unwrap());
        }
    }

    #[test]
    fn last_tag_prefers_correlated_partner() {
        let latent = LatentNetwork::new(
            vec![vec![], vec![0], vec![]],
            vec![vec![[0.7, 0.3]], vec![[0.95, 0.05], [0.1, 0.9]], vec![[0.5, 0.5]]],
        )
        .unwrap();
        let mut failures = vec![vec![1.0; 3]; 3];
        for i in 0..3 {
            failures[i][i] = 0.4;
        }
        let loadings = NoisyOrLoadings::new(failures, vec![0.05; 3]).unwrap();
        let anchors = AnchorMap::from_loadings(vec![0, 1, 2], &loadings).unwrap();
        let model = AdfaModel::new(VariableSpace::anonymous(3, 3).unwrap(), latent, loadings, anchors).unwrap();
        let engine = PosteriorEngine::new(&model).unwrap();
        let ranked = last_tag_predict(&engine, &[0], &[false, false, false]).unwrap();
        assert_eq!(ranked[0].0, 1);
    }

    #[test]
    fn last_tag_follows_priors_without_evidence() {
        let latent = LatentNetwork::independent(&[0.2, 0.6, 0.4]).unwrap();
        let loadings = NoisyOrLoadings::new(vec![vec![0.5, 1.0, 1.0], vec![1.0, 0.5, 1.0], vec![1.0, 1.0, 0.5]], vec![0.1; 3]).unwrap();
        let anchors = AnchorMap::from_loadings(vec![0, 1, 2], &loadings).unwrap();
        let mut model = AdfaModel::new(VariableSpace::anonymous(3, 3).unwrap(), latent, loadings.clone(), anchors).unwrap();
        // drop the observations' influence entirely
        model.loadings = NoisyOrLoadings::new(vec![vec![1.0; 3]; 3], vec![0.1; 3]).unwrap();
        let engine = PosteriorEngine::new(&model).unwrap();
        let ranked = last_tag_predict(&engine, &[], &[false; 3]).unwrap();
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2, 0]);
    }

    #[test]
    fn aux_mixture_reproduces_noisy_or() {
        let model = random_model(4, 8, StructureKind::Tree, 2, &ParamRanges::default()).unwrap();
        for y in 0..16usize {
            let yv: Vec<bool> = (0..4).map(|i| y >> i & 1 == 1).collect();
            for j in 0..8 {
                let d = aux_distribution(&model.loadings, j, &yv);
                assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let fired: f64 = d[..=4].iter().sum();
                let q = model.loadings.prob_negative(j, |i| yv[i]);
                assert!((fired - (1.0 - q)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn m_step_arithmetic() {
        assert!((m_step_failure(3.0, 10.0).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(m_step_failure(0.0, 0.0), None);
    }

    #[test]
    fn m_step_matches_direct_counts() {
        // complete data with the auxiliary slots observed: f = 1 - fired/reached
        let loadings = NoisyOrLoadings::new(vec![vec![0.5], vec![0.5]], vec![0.1]).unwrap();
        let mut c = AuxCounts::zeros(2, 1);
        // rows: (y, A): ([1,1], 0), ([1,1], 1), ([1,1], 3), ([1,0], 0), ([0,1], 2), ([0,1], 3)
        let rows: [([bool; 2], usize); 6] = [([true, true], 0), ([true, true], 1), ([true, true], 3), ([true, false], 0), ([false, true], 2), ([false, true], 3)];
        for (y, a) in rows {
            c.fired[0][a] += 1.0;
            for k in 0..=2 {
                if a >= k && (k == 2 || y[k]) {
                    c.reached[0][k] += 1.0;
                }
            }
        }
        let next = inner_m_step(&loadings, &c).unwrap();
        // latent 0 was tried in 4 rows and fired in 2
        assert!((next.failures[0][0] - 0.5).abs() < 1e-15);
        // latent 1 was reached in rows 2, 3, 5, 6 and fired once
        assert!((next.failures[1][0] - 0.75).abs() < 1e-15);
        // the leak was reached in rows 3, 5, 6 and fired once
        assert!((next.leaks[0] - 1.0 / 3.0).abs() < 1e-15);
        let cum = c.cumulative(0);
        assert!(cum.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn em_stationary_at_truth() {
        let model = random_model(3, 6, StructureKind::Tree, 21, &ParamRanges::default()).unwrap();
        let data = sample_dataset(&model, 30_000, 5).unwrap();
        let cfg = EmConfig {
            outer_steps: 1,
            ..EmConfig::default()
        };
        let out = em_refine(&model, &data, &cfg).unwrap();
        for (a, b) in out.model.loadings.failures.iter().flatten().zip(model.loadings.failures.iter().flatten()) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
        for (a, b) in out.model.loadings.leaks.iter().zip(&model.loadings.leaks) {
            assert!((a - b).abs() < 0.02);
        }
    }

    #[test]
    fn em_is_deterministic_and_monotone() {
        let model = random_model(4, 8, StructureKind::Tree, 7, &ParamRanges::default()).unwrap();
        let data = sample_dataset(&model, 800, 5).unwrap();
        let start = random_model(4, 8, StructureKind::Tree, 7, &ParamRanges {
            failure: (0.3, 0.7),
            ..ParamRanges::default()
        })
        .unwrap();
        let start = AdfaModel::from_parts_unchecked(start.space, model.latent.clone(), start.loadings, start.anchors).unwrap();
        let cfg = EmConfig {
            outer_steps: 3,
            inner_steps: 3,
            seed: 4,
            ..EmConfig::default()
        };
        let a = em_refine(&start, &data, &cfg).unwrap();
        let b = em_refine(&start, &data, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.trace.iter().all(|s| s.loglik_after >= s.loglik_before));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn inner_step_never_decreases(seed in 0u64..10_000, rows in 5usize..60) {
            let model = random_model(3, 6, StructureKind::Tree, seed, &ParamRanges::default()).unwrap();
            let data = sample_dataset(&model, rows, seed).unwrap();
            let samples: Vec<Vec<Vec<bool>>> = data.latent_rows.as_ref().unwrap().iter().map(|y| vec![y.clone()]).collect();
            let other = random_model(3, 6, StructureKind::Tree, seed + 1, &ParamRanges::default()).unwrap();
            for start in [&model.loadings, &other.loadings] {
                let before = complete_loglik(start, &data.observed_rows, &samples);
                let next = inner_m_step(start, &inner_e_step(start, &data.observed_rows, &samples)).unwrap();
                let after = complete_loglik(&next, &data.observed_rows, &samples);
                prop_assert!(after >= before - 1e-9 * before.abs().max(1.0));
            }
        }
    }
}
