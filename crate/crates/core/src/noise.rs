//! Estimating anchor noise rates `P(A | Y)`: two-anchor triplet
//! decomposition and the singly-labeled estimator.

use serde::{Deserialize, Serialize};

use crate::dataset::BinaryDataset;
use crate::error::{AdfaError, Result};
use crate::moments::empirical_table;
use crate::structure::mutual_information;
use crate::table::{SubsetMoment, Var};

/// Smallest eigenvalue gap (and determinant scale) accepted by the decomposition.
pub const EIGEN_GAP_TOL: f64 = 1e-6;

pub const DEFAULT_MIN_COUNT: usize = 20;

/// Joint `P(W1, W2, X)`; index bit 0 is `W1`, bit 1 is `W2`, bit 2 is `X`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletTensor {
    pub table: [f64; 8],
}

impl TripletTensor {
    pub fn new(table: [f64; 8]) -> Result<Self> {
        if table.iter().any(|p| !(*p >= 0.0)) || (table.iter().sum::<f64>() - 1.0).abs() > 1e-8 {
            return Err(AdfaError::invalid("triplet tensor must be a distribution"));
        }
        Ok(Self { table })
    }

    /// `Σ_y P(y) P(w1|y) P(w2|y) P(x|y)`; conditionals indexed `[value][y]`.
    pub fn from_parameters(p: &TripletParameters) -> Result<Self> {
        let mut table = [0.0; 8];
        for (idx, slot) in table.iter_mut().enumerate() {
            let (w1, w2, x) = (idx & 1, idx >> 1 & 1, idx >> 2 & 1);
            *slot = (0..2)
                .map(|y| p.prior[y] * p.w1[w1][y] * p.w2[w2][y] * p.x[x][y])
                .sum();
        }
        Self::new(table)
    }

    /// Empirical tensor of three observed columns.
    pub fn empirical(data: &BinaryDataset, w1: usize, w2: usize, x: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(AdfaError::invalid("empty dataset"));
        }
        if w1 == w2 || w1 == x || w2 == x || w1.max(w2).max(x) >= data.n_observed {
            return Err(AdfaError::invalid("triplet needs three distinct observed columns"));
        }
        let t = empirical_table(data, &[w1, w2, x]);
        Self::new(t.try_into().expect("eight cells"))
    }

    fn slab(&self, x: usize) -> [[f64; 2]; 2] {
        let t = &self.table;
        [[t[x << 2], t[x << 2 | 2]], [t[x << 2 | 1], t[x << 2 | 3]]]
    }
}

/// `prior[y]` and conditionals indexed `[value][y]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletParameters {
    pub prior: [f64; 2],
    pub w1: [[f64; 2]; 2],
    pub w2: [[f64; 2]; 2],
    pub x: [[f64; 2]; 2],
}

impl TripletParameters {
    /// `(P(W1=1|Y=1), P(W1=1|Y=0))`, the rates an anchor map takes.
    pub fn w1_rates(&self) -> (f64, f64) {
        (self.w1[1][1], self.w1[1][0])
    }

    pub fn max_abs_diff(&self, other: &TripletParameters) -> f64 {
        let a = [self.prior, self.w1[0], self.w1[1], self.w2[0], self.w2[1], self.x[0], self.x[1]];
        let b = [other.prior, other.w1[0], other.w1[1], other.w2[0], other.w2[1], other.x[0], other.x[1]];
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max)
    }
}

type Mat2 = [[f64; 2]; 2];

fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

fn inverse(m: &Mat2) -> Result<Mat2> {
    let d = det(m);
    let scale = m.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    if d.abs() <= EIGEN_GAP_TOL * scale * scale {
        return Err(AdfaError::IllConditioned(format!("2x2 matrix is (nearly) singular, det {d:e}")));
    }
    Ok([[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]])
}

fn mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            out[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c];
        }
    }
    out
}

/// Eigenvectors of a 2x2 matrix with real, separated eigenvalues, each
/// normalized to sum 1.
fn eigenvectors(m: &Mat2) -> Result<[[f64; 2]; 2]> {
    let tr = m[0][0] + m[1][1];
    let disc = tr * tr - 4.0 * det(m);
    if disc < 0.0 {
        return Err(AdfaError::IllConditioned("pencil has complex eigenvalues".into()));
    }
    let root = disc.sqrt();
    if root < EIGEN_GAP_TOL {
        return Err(AdfaError::IllConditioned(format!("eigenvalue gap {root:e} too small")));
    }
    let mut out = [[0.0; 2]; 2];
    for (k, lambda) in [(tr - root) / 2.0, (tr + root) / 2.0].into_iter().enumerate() {
        // null vector of (m - λI): either row gives one, take the larger
        let r0 = [m[0][0] - lambda, m[0][1]];
        let r1 = [m[1][0], m[1][1] - lambda];
        let row = if r0[0].hypot(r0[1]) >= r1[0].hypot(r1[1]) { r0 } else { r1 };
        let v = [row[1], -row[0]];
        let s = v[0] + v[1];
        if s.abs() < EIGEN_GAP_TOL {
            return Err(AdfaError::IllConditioned("eigenvector is not a probability direction".into()));
        }
        out[k] = [v[0] / s, v[1] / s];
    }
    Ok(out)
}

fn normalize_column(p: [f64; 2]) -> Result<[f64; 2]> {
    let c = [p[0].max(0.0), p[1].max(0.0)];
    let s = c[0] + c[1];
    if s <= 0.0 {
        return Err(AdfaError::IllConditioned("recovered conditional is empty".into()));
    }
    Ok([c[0] / s, c[1] / s])
}

/// Rank-2 decomposition of a 2x2x2 tensor through the eigenvectors of
/// `T_1 T_0^{-1}` (slabs along `X`).
pub fn triplet_decompose(tensor: &TripletTensor) -> Result<TripletParameters> {
    decompose_with(tensor, false)
}

/// As [`triplet_decompose`], using `T_0 T_1^{-1}` when `reverse_slabs`.
pub fn decompose_with(tensor: &TripletTensor, reverse_slabs: bool) -> Result<TripletParameters> {
    let (t0, t1) = (tensor.slab(0), tensor.slab(1));
    let (num, den) = if reverse_slabs { (t0, t1) } else { (t1, t0) };
    let pencil = mul(&num, &inverse(&den)?);
    let vecs = eigenvectors(&pencil)?;
    // columns of A are P(W1 | Y=y); order them by the labeling convention
    let (c0, c1) = if vecs[0][1] <= vecs[1][1] { (vecs[0], vecs[1]) } else { (vecs[1], vecs[0]) };
    if (c1[1] - c0[1]).abs() < EIGEN_GAP_TOL {
        return Err(AdfaError::IllConditioned("W1 does not separate the components".into()));
    }
    let a: Mat2 = [[c0[0], c1[0]], [c0[1], c1[1]]];
    let a_inv = inverse(&a)?;

    // A^{-1} Σ_x T_x = diag(π) B^T
    let m: Mat2 = [
        [t0[0][0] + t1[0][0], t0[0][1] + t1[0][1]],
        [t0[1][0] + t1[1][0], t0[1][1] + t1[1][1]],
    ];
    let pb = mul(&a_inv, &m);
    let mut prior = [pb[0][0] + pb[0][1], pb[1][0] + pb[1][1]];
    if prior.iter().any(|&p| p <= EIGEN_GAP_TOL) {
        return Err(AdfaError::IllConditioned(format!("component weight {prior:?} vanishes")));
    }
    let w2_cols = [normalize_column(pb[0])?, normalize_column(pb[1])?];

    // A^{-1} P(W1, X=x) = π ∘ P(X=x | Y)
    let px: Vec<[f64; 2]> = [t0, t1]
        .iter()
        .map(|t| {
            let v = [t[0][0] + t[0][1], t[1][0] + t[1][1]];
            [a_inv[0][0] * v[0] + a_inv[0][1] * v[1], a_inv[1][0] * v[0] + a_inv[1][1] * v[1]]
        })
        .collect();
    let x_cols = [
        normalize_column([px[0][0], px[1][0]])?,
        normalize_column([px[0][1], px[1][1]])?,
    ];
    let s = prior[0] + prior[1];
    prior = [prior[0] / s, prior[1] / s];
    let w1_cols = [normalize_column(c0)?, normalize_column(c1)?];
    let by_value = |cols: [[f64; 2]; 2]| [[cols[0][0], cols[1][0]], [cols[0][1], cols[1][1]]];
    Ok(TripletParameters {
        prior,
        w1: by_value(w1_cols),
        w2: by_value(w2_cols),
        x: by_value(x_cols),
    })
}

/// Observed column (other than the two anchors and `exclude`) maximizing
/// `min(I(W1; X), I(W2; X))`.
pub fn pick_third_view(data: &BinaryDataset, w1: usize, w2: usize, exclude: &[usize]) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for x in 0..data.n_observed {
        if x == w1 || x == w2 || exclude.contains(&x) {
            continue;
        }
        let mi = |w: usize| -> Result<f64> {
            let (lo, hi) = (w.min(x), w.max(x));
            let t = SubsetMoment::new(vec![Var::Observed(lo), Var::Observed(hi)], empirical_table(data, &[lo, hi]))?;
            mutual_information(&t, Var::Observed(w))
        };
        let score = mi(w1)?.min(mi(w2)?);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, x));
        }
    }
    best.map(|(_, x)| x)
        .ok_or_else(|| AdfaError::invalid("no candidate third view"))
}

/// Smoothed `P(A | Y)` from labeled rows, with a Hoeffding half-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledEstimate {
    /// Indexed `[a][y]`.
    pub conditional: [[f64; 2]; 2],
    /// Half-width of the 95% interval for each `y`.
    pub half_width: [f64; 2],
    pub counts: [usize; 2],
}

impl LabeledEstimate {
    pub fn rates(&self) -> (f64, f64) {
        (self.conditional[1][1], self.conditional[1][0])
    }
}

/// Estimates `P(A = a | Y = y)` for anchor column `a` from rows whose label
/// is known (`labels[r] = Some(y)`).
pub fn singly_labeled_estimate(
    data: &BinaryDataset,
    labels: &[Option<bool>],
    a: usize,
    min_count: usize,
) -> Result<LabeledEstimate> {
    if labels.len() != data.len() {
        return Err(AdfaError::invalid("one label slot per row required"));
    }
    if a >= data.n_observed {
        return Err(AdfaError::invalid(format!("observed index {a} out of range")));
    }
    let mut counts = [0usize; 2];
    let mut positives = [0usize; 2];
    for (row, label) in data.observed_rows.iter().zip(labels) {
        if let Some(y) = label {
            counts[*y as usize] += 1;
            positives[*y as usize] += row[a] as usize;
        }
    }
    if counts.iter().any(|&c| c < min_count) {
        return Err(AdfaError::InsufficientLabels(format!(
            "{counts:?} labeled rows per class, need {min_count}"
        )));
    }
    let mut conditional = [[0.0; 2]; 2];
    let mut half_width = [0.0; 2];
    for y in 0..2 {
        let p1 = (positives[y] as f64 + 1.0) / (counts[y] as f64 + 2.0);
        conditional[1][y] = p1;
        conditional[0][y] = 1.0 - p1;
        half_width[y] = ((2.0f64 / 0.05).ln() / (2.0 * counts[y] as f64)).sqrt();
    }
    Ok(LabeledEstimate {
        conditional,
        half_width,
        counts,
    })
}

/// Labels for latent `i` on the given rows, taken from ground truth.
pub fn labels_from_truth(data: &BinaryDataset, i: usize, rows: &[usize]) -> Result<Vec<Option<bool>>> {
    let truth = data
        .latent_rows
        .as_ref()
        .ok_or_else(|| AdfaError::invalid("dataset has no latent rows"))?;
    let mut labels = vec![None; data.len()];
    for &r in rows {
        let row = truth.get(r).ok_or_else(|| AdfaError::invalid(format!("row {r} out of range")))?;
        labels[r] = Some(*row.get(i).ok_or_else(|| AdfaError::invalid(format!("latent {i} out of range")))?);
    }
    Ok(labels)
}
