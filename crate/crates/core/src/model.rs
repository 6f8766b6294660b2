//! The anchored discrete factor analysis model family.
//!
//! Binary latents `Y` follow a Bayesian network; binary observations `X` are
//! noisy-or children of the latents, and each latent has one designated
//! anchor observation whose only latent parent is that latent.

use serde::{Deserialize, Serialize};

use crate::error::{AdfaError, Result};
use crate::table::{SubsetMoment, Var};

/// Largest latent count for which full enumeration is attempted.
pub const MAX_ENUM_LATENTS: usize = 22;

const CPT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableSpace {
    pub n_observed: usize,
    pub m_latent: usize,
    pub observed_names: Vec<String>,
    pub latent_names: Vec<String>,
}

impl VariableSpace {
    pub fn new(observed_names: Vec<String>, latent_names: Vec<String>) -> Result<Self> {
        let space = Self {
            n_observed: observed_names.len(),
            m_latent: latent_names.len(),
            observed_names,
            latent_names,
        };
        space.validate()?;
        Ok(space)
    }

    /// Names `x0..`, `y0..`.
    pub fn anonymous(m_latent: usize, n_observed: usize) -> Result<Self> {
        Self::new(
            (0..n_observed).map(|j| format!("x{j}")).collect(),
            (0..m_latent).map(|i| format!("y{i}")).collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_observed == 0 || self.m_latent == 0 {
            return Err(AdfaError::invalid("need at least one latent and one observed variable"));
        }
        if self.n_observed != self.observed_names.len() || self.m_latent != self.latent_names.len() {
            return Err(AdfaError::invalid("name lists do not match variable counts"));
        }
        for names in [&self.observed_names, &self.latent_names] {
            let mut sorted: Vec<&String> = names.iter().collect();
            sorted.sort();
            if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
                return Err(AdfaError::invalid(format!("duplicate variable name `{}`", w[0])));
            }
        }
        Ok(())
    }
}

/// Bayesian network over the latents. `cpts[i][r]` is `[P(y_i=0|pa), P(y_i=1|pa)]`
/// where row `r` packs the parent values in ascending parent order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNetwork {
    pub parents: Vec<Vec<usize>>,
    pub cpts: Vec<Vec<[f64; 2]>>,
}

impl LatentNetwork {
    pub fn new(parents: Vec<Vec<usize>>, cpts: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        let net = Self { parents, cpts };
        net.validate()?;
        Ok(net)
    }

    /// Independent latents with the given `P(y_i = 1)`.
    pub fn independent(priors: &[f64]) -> Result<Self> {
        Self::new(
            vec![Vec::new(); priors.len()],
            priors.iter().map(|&p| vec![[1.0 - p, p]]).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.parents.len();
        if self.cpts.len() != m {
            return Err(AdfaError::invalid("one CPT per latent required"));
        }
        for (i, pa) in self.parents.iter().enumerate() {
            if pa.windows(2).any(|w| w[0] >= w[1]) || pa.iter().any(|&p| p >= m || p == i) {
                return Err(AdfaError::invalid(format!("bad parent list for latent {i}: {pa:?}")));
            }
            if pa.len() >= 30 || self.cpts[i].len() != 1 << pa.len() {
                return Err(AdfaError::invalid(format!("CPT of latent {i} has wrong row count")));
            }
            for row in &self.cpts[i] {
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row[0] + row[1] - 1.0).abs() > CPT_TOL {
                    return Err(AdfaError::invalid(format!("CPT row {row:?} of latent {i} is not a distribution")));
                }
            }
        }
        self.topological_order().map(|_| ())
    }

    /// Kahn's algorithm; ties resolved by smallest id.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let m = self.parents.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let children = self.children();
        let mut ready: std::collections::BTreeSet<usize> =
            (0..m).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(m);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &children[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != m {
            return Err(AdfaError::invalid("latent parent relation has a cycle"));
        }
        Ok(order)
    }

    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.parents.len()];
        for (i, pa) in self.parents.iter().enumerate() {
            for &p in pa {
                ch[p].push(i);
            }
        }
        ch
    }

    /// Undirected neighbors, sorted.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = self.children();
        for (i, pa) in self.parents.iter().enumerate() {
            nb[i].extend(pa.iter().copied());
        }
        for n in &mut nb {
            n.sort_unstable();
            n.dedup();
        }
        nb
    }

    pub fn has_edges(&self) -> bool {
        self.parents.iter().any(|p| !p.is_empty())
    }

    /// True when every latent has at most one parent (a directed forest).
    pub fn is_forest(&self) -> bool {
        self.parents.iter().all(|p| p.len() <= 1)
    }

    /// Parents, children and the children's other parents.
    pub fn markov_blanket(&self, i: usize) -> Vec<usize> {
        let children = self.children();
        let mut b: Vec<usize> = self.parents[i].clone();
        for &c in &children[i] {
            b.push(c);
            b.extend(self.parents[c].iter().copied().filter(|&p| p != i));
        }
        b.sort_unstable();
        b.dedup();
        b
    }

    pub fn cpt_row(&self, i: usize, y: impl Fn(usize) -> bool) -> usize {
        self.parents[i]
            .iter()
            .enumerate()
            .fold(0, |acc, (t, &p)| acc | ((y(p) as usize) << t))
    }

    /// `P(y_i = value | parents)` reading parent values through `y`.
    pub fn cond_prob(&self, i: usize, value: bool, y: impl Fn(usize) -> bool) -> f64 {
        self.cpts[i][self.cpt_row(i, y)][value as usize]
    }

    /// `P(y)` for a full assignment.
    pub fn prob(&self, y: &[bool]) -> f64 {
        (0..self.len()).map(|i| self.cond_prob(i, y[i], |p| y[p])).product()
    }

    /// `P(y)` for all `2^m` assignments (bit `i` of the index is `y_i`).
    pub fn joint_table(&self) -> Result<Vec<f64>> {
        let m = self.len();
        check_enumerable(m)?;
        let mut out = vec![0.0; 1 << m];
        for (y, slot) in out.iter_mut().enumerate() {
            *slot = (0..m)
                .map(|i| self.cond_prob(i, (y >> i) & 1 == 1, |p| (y >> p) & 1 == 1))
                .product();
        }
        Ok(out)
    }
}

pub(crate) fn check_enumerable(m: usize) -> Result<()> {
    if m > MAX_ENUM_LATENTS {
        return Err(AdfaError::Capacity(format!(
            "{m} latents exceeds the enumeration limit of {MAX_ENUM_LATENTS}"
        )));
    }
    Ok(())
}

/// Noisy-or links: `P(x_j = 0 | y) = (1 - l_j) Π_i f_{i,j}^{y_i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyOrLoadings {
    /// `failures[i][j]`, one row per latent.
    pub failures: Vec<Vec<f64>>,
    pub leaks: Vec<f64>,
    pub edge_mask: Vec<Vec<bool>>,
}

impl NoisyOrLoadings {
    /// Builds loadings, deriving the edge mask from `f < 1`.
    pub fn new(failures: Vec<Vec<f64>>, leaks: Vec<f64>) -> Result<Self> {
        let edge_mask = failures
            .iter()
            .map(|row| row.iter().map(|&f| f < 1.0).collect())
            .collect();
        let l = Self {
            failures,
            leaks,
            edge_mask,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn m(&self) -> usize {
        self.failures.len()
    }

    pub fn n(&self) -> usize {
        self.leaks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.leaks.len();
        if self.edge_mask.len() != self.failures.len() {
            return Err(AdfaError::invalid("edge mask shape mismatch"));
        }
        for (i, row) in self.failures.iter().enumerate() {
            if row.len() != n || self.edge_mask[i].len() != n {
                return Err(AdfaError::invalid(format!("failure row {i} has wrong length")));
            }
            for (j, &f) in row.iter().enumerate() {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(AdfaError::invalid(format!("failure f[{i}][{j}] = {f} outside (0,1]")));
                }
                if (f < 1.0) != self.edge_mask[i][j] {
                    return Err(AdfaError::invalid(format!("edge mask disagrees with f[{i}][{j}] = {f}")));
                }
            }
        }
        if let Some((j, l)) = self.leaks.iter().enumerate().find(|(_, l)| !(**l >= 0.0 && **l < 1.0)) {
            return Err(AdfaError::invalid(format!("leak l[{j}] = {l} outside [0,1)")));
        }
        Ok(())
    }

    pub fn parents_of(&self, j: usize) -> Vec<usize> {
        (0..self.m()).filter(|&i| self.edge_mask[i][j]).collect()
    }

    pub fn failure_column(&self, j: usize) -> Vec<f64> {
        self.failures.iter().map(|row| row[j]).collect()
    }

    /// `P(x_j = 0 | y)`.
    pub fn prob_negative(&self, j: usize, y: impl Fn(usize) -> bool) -> f64 {
        (1.0 - self.leaks[j])
            * (0..self.m())
                .filter(|&i| y(i))
                .map(|i| self.failures[i][j])
                .product::<f64>()
    }
}

/// Anchor assignment. `conditionals[i][a][y] = P(A_i = a | Y_i = y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorMap {
    pub anchor_of: Vec<usize>,
    pub conditionals: Vec<[[f64; 2]; 2]>,
}

/// Minimum separation `|P(A=1|Y=1) - P(A=1|Y=0)|` for a usable anchor.
pub const ANCHOR_MIN_SEPARATION: f64 = 1e-9;

impl AnchorMap {
    pub fn new(anchor_of: Vec<usize>, conditionals: Vec<[[f64; 2]; 2]>) -> Result<Self> {
        let a = Self {
            anchor_of,
            conditionals,
        };
        a.validate()?;
        Ok(a)
    }

    /// Conditionals from `(P(A=1|Y=1), P(A=1|Y=0))` pairs.
    pub fn from_rates(anchor_of: Vec<usize>, rates: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            anchor_of,
            rates
                .iter()
                .map(|&(p1, p0)| [[1.0 - p0, 1.0 - p1], [p0, p1]])
                .collect(),
        )
    }

    /// Reads the anchor conditionals implied by the anchor columns of `loadings`.
    pub fn from_loadings(anchor_of: Vec<usize>, loadings: &NoisyOrLoadings) -> Result<Self> {
        let rates: Vec<(f64, f64)> = anchor_of
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                let l = loadings.leaks[j];
                let f = loadings.failures[i][j];
                (1.0 - (1.0 - l) * f, l)
            })
            .collect();
        Self::from_rates(anchor_of, &rates)
    }

    pub fn len(&self) -> usize {
        self.anchor_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_of.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchor_of.len() != self.conditionals.len() {
            return Err(AdfaError::invalid("one conditional table per anchor required"));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, &a) in self.anchor_of.iter().enumerate() {
            if !seen.insert(a) {
                return Err(AdfaError::invalid(format!(
                    "observed variable {a} anchors more than one latent (latent {i})"
                )));
            }
        }
        for (i, c) in self.conditionals.iter().enumerate() {
            for y in 0..2 {
                if c[0][y] < 0.0 || c[1][y] < 0.0 || (c[0][y] + c[1][y] - 1.0).abs() > CPT_TOL {
                    return Err(AdfaError::invalid(format!(
                        "anchor conditional of latent {i} is not a distribution for y={y}"
                    )));
                }
            }
            if (c[1][1] - c[1][0]).abs() < ANCHOR_MIN_SEPARATION {
                return Err(AdfaError::degenerate(format!(
                    "anchor of latent {i} is independent of its latent"
                )));
            }
        }
        Ok(())
    }

    pub fn p(&self, i: usize, a: bool, y: bool) -> f64 {
        self.conditionals[i][a as usize][y as usize]
    }

    /// `(f, l)` of the noisy-or column implied by anchor `i`.
    pub fn implied_noisy_or(&self, i: usize) -> (f64, f64) {
        let l = self.p(i, true, false);
        let f = self.p(i, false, true) / (1.0 - l);
        (f.clamp(f64::MIN_POSITIVE, 1.0), l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdfaModel {
    pub space: VariableSpace,
    pub latent: LatentNetwork,
    pub loadings: NoisyOrLoadings,
    pub anchors: AnchorMap,
}

impl AdfaModel {
    pub fn new(
        space: VariableSpace,
        latent: LatentNetwork,
        loadings: NoisyOrLoadings,
        anchors: AnchorMap,
    ) -> Result<Self> {
        let model = Self::from_parts_unchecked(space, latent, loadings, anchors)?;
        model.check_anchor_structure()?;
        Ok(model)
    }

    /// Validates shapes and parameters but not the single-parent anchor
    /// structure. Used for deliberately misspecified generators.
    pub fn from_parts_unchecked(
        space: VariableSpace,
        latent: LatentNetwork,
        loadings: NoisyOrLoadings,
        anchors: AnchorMap,
    ) -> Result<Self> {
        space.validate()?;
        latent.validate()?;
        loadings.validate()?;
        anchors.validate()?;
        let (m, n) = (space.m_latent, space.n_observed);
        if latent.len() != m || loadings.m() != m || loadings.n() != n || anchors.len() != m {
            return Err(AdfaError::invalid("component dimensions disagree with the variable space"));
        }
        if let Some(&a) = anchors.anchor_of.iter().find(|&&a| a >= n) {
            return Err(AdfaError::invalid(format!("anchor index {a} out of range")));
        }
        Ok(Self {
            space,
            latent,
            loadings,
            anchors,
        })
    }

    pub fn check_anchor_structure(&self) -> Result<()> {
        for (i, &a) in self.anchors.anchor_of.iter().enumerate() {
            let parents = self.loadings.parents_of(a);
            if parents != [i] {
                return Err(AdfaError::invalid(format!(
                    "anchor x{a} of latent {i} has latent parents {parents:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.space.m_latent
    }

    pub fn n(&self) -> usize {
        self.space.n_observed
    }

    pub fn is_anchor(&self, j: usize) -> bool {
        self.anchors.anchor_of.contains(&j)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: AdfaModel = serde_json::from_str(s)?;
        Self::from_parts_unchecked(model.space, model.latent, model.loadings, model.anchors)
    }
}

/// `P(y) Π_j P(x_j | y)`.
pub fn joint_prob(model: &AdfaModel, y: &[bool], x: &[bool]) -> Result<f64> {
    if y.len() != model.m() || x.len() != model.n() {
        return Err(AdfaError::invalid(format!(
            "assignment lengths ({}, {}) do not match model ({}, {})",
            y.len(),
            x.len(),
            model.m(),
            model.n()
        )));
    }
    let mut p = model.latent.prob(y);
    for (j, &xj) in x.iter().enumerate() {
        let q = model.loadings.prob_negative(j, |i| y[i]);
        p *= if xj { 1.0 - q } else { q };
    }
    Ok(p)
}

/// Exact marginal over any mix of latent and observed variables, by
/// enumerating all latent assignments.
pub fn exact_marginal(model: &AdfaModel, ids: &[Var]) -> Result<SubsetMoment> {
    let prior = model.latent.joint_table()?;
    marginal_from_prior(model, &prior, ids)
}

/// As [`exact_marginal`] with a precomputed `P(y)` table.
pub fn marginal_from_prior(model: &AdfaModel, prior: &[f64], ids: &[Var]) -> Result<SubsetMoment> {
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    for v in &sorted {
        let ok = match *v {
            Var::Latent(i) => i < model.m(),
            Var::Observed(j) => j < model.n(),
        };
        if !ok {
            return Err(AdfaError::invalid(format!("{v} out of range")));
        }
    }
    let latent_pos: Vec<(usize, usize)> = sorted
        .iter()
        .enumerate()
        .filter_map(|(t, v)| match v {
            Var::Latent(i) => Some((t, *i)),
            _ => None,
        })
        .collect();
    let observed_pos: Vec<(usize, usize)> = sorted
        .iter()
        .enumerate()
        .filter_map(|(t, v)| match v {
            Var::Observed(j) => Some((t, *j)),
            _ => None,
        })
        .collect();
    let mut table = vec![0.0; 1 << sorted.len()];
    let mut neg = vec![0.0; observed_pos.len()];
    for (y, &py) in prior.iter().enumerate() {
        if py == 0.0 {
            continue;
        }
        let base = latent_pos
            .iter()
            .fold(0, |acc, &(t, i)| acc | (((y >> i) & 1) << t));
        for (q, &(_, j)) in neg.iter_mut().zip(&observed_pos) {
            *q = model.loadings.prob_negative(j, |i| (y >> i) & 1 == 1);
        }
        for xs in 0..(1usize << observed_pos.len()) {
            let mut p = py;
            let mut idx = base;
            for (u, &(t, _)) in observed_pos.iter().enumerate() {
                if (xs >> u) & 1 == 1 {
                    p *= 1.0 - neg[u];
                    idx |= 1 << t;
                } else {
                    p *= neg[u];
                }
            }
            table[idx] += p;
        }
    }
    SubsetMoment::new(sorted, table)
}
