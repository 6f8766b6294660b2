//! Learning the latent network from (recovered) moments: information
//! quantities, BIC scores, Chow–Liu forests, exact search and CPT fitting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AdfaError, Result};
use crate::model::LatentNetwork;
use crate::moments::MomentSet;
use crate::table::{project, SubsetMoment, Var};

/// Largest latent count accepted by [`exact_search`].
pub const MAX_EXACT_LATENTS: usize = 16;

/// MI values below this are treated as exactly zero.
const MI_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredStructure {
    pub parents: Vec<Vec<usize>>,
    pub score: f64,
    pub family_scores: Vec<f64>,
}

impl ScoredStructure {
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .parents
            .iter()
            .enumerate()
            .flat_map(|(c, ps)| ps.iter().map(move |&p| (p, c)))
            .collect();
        e.sort_unstable();
        e
    }

    /// Undirected edges as `(min, max)` pairs, sorted.
    pub fn skeleton(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self.edges().into_iter().map(|(a, b)| (a.min(b), a.max(b))).collect();
        e.sort_unstable();
        e
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Shannon entropy in nats, with `0 log 0 = 0`. Negative entries are ignored.
pub fn entropy(moment: &SubsetMoment) -> f64 {
    -moment
        .table
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `I(target; rest)` for a joint table containing `target`.
pub fn mutual_information(joint: &SubsetMoment, target: Var) -> Result<f64> {
    if joint.position(target).is_none() {
        return Err(AdfaError::invalid(format!("{target} is not in table over {:?}", joint.ids)));
    }
    let rest: Vec<Var> = joint.ids.iter().copied().filter(|&v| v != target).collect();
    let h_t = entropy(&joint.marginalize(&[target])?);
    let h_r = entropy(&joint.marginalize(&rest)?);
    Ok(h_t + h_r - entropy(joint))
}

fn family_table(moments: &MomentSet, i: usize, parents: &[usize]) -> Result<SubsetMoment> {
    let mut fam: Vec<usize> = parents.to_vec();
    fam.push(i);
    fam.sort_unstable();
    if fam.len() > moments.order {
        return Err(AdfaError::invalid(format!(
            "family {fam:?} needs moments of order {}, have {}",
            fam.len(),
            moments.order
        )));
    }
    Ok(moments.require(&fam)?.clamped())
}

/// BIC contribution of latent `i` with parent set `parents`.
pub fn family_score(moments: &MomentSet, i: usize, parents: &[usize], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(AdfaError::invalid("sample count must be positive"));
    }
    let table = family_table(moments, i, parents)?;
    let nf = n as f64;
    let h_i = entropy(&table.marginalize(&[Var::Latent(i)])?);
    let mi = if parents.is_empty() {
        0.0
    } else {
        mutual_information(&table, Var::Latent(i))?
    };
    Ok(nf * mi - nf * h_i - nf.ln() * (1u64 << parents.len()) as f64)
}

fn check_acyclic(parents: &[Vec<usize>]) -> Result<()> {
    let m = parents.len();
    for (c, ps) in parents.iter().enumerate() {
        if let Some(&p) = ps.iter().find(|&&p| p >= m || p == c) {
            return Err(AdfaError::invalid(format!("latent {c} has invalid parent {p}")));
        }
    }
    let mut indeg: Vec<usize> = parents.iter().map(|p| p.len()).collect();
    let mut stack: Vec<usize> = (0..m).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(v) = stack.pop() {
        seen += 1;
        for (c, ps) in parents.iter().enumerate() {
            if ps.contains(&v) {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    stack.push(c);
                }
            }
        }
    }
    if seen != m {
        return Err(AdfaError::invalid("parent sets contain a cycle"));
    }
    Ok(())
}

/// Decomposable BIC score of a candidate structure.
pub fn bic_score(moments: &MomentSet, parents: &[Vec<usize>], n: usize) -> Result<ScoredStructure> {
    check_latents(moments)?;
    if parents.len() != moments.latents.len() {
        return Err(AdfaError::invalid("structure and moments cover different latents"));
    }
    check_acyclic(parents)?;
    let family_scores = parents
        .iter()
        .enumerate()
        .map(|(i, ps)| {
            let mut ps = ps.clone();
            ps.sort_unstable();
            family_score(moments, i, &ps, n)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoredStructure {
        parents: parents
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.sort_unstable();
                p
            })
            .collect(),
        score: family_scores.iter().sum(),
        family_scores,
    })
}

fn check_latents(moments: &MomentSet) -> Result<()> {
    if moments.latents.iter().enumerate().any(|(t, &i)| t != i) {
        return Err(AdfaError::invalid("structure learning needs moments over latents 0..m"));
    }
    Ok(())
}

/// Pairwise MI matrix, clamped at zero.
pub fn pairwise_mi(moments: &MomentSet) -> Result<Vec<Vec<f64>>> {
    check_latents(moments)?;
    let m = moments.latents.len();
    let mut w = vec![vec![0.0; m]; m];
    for a in 0..m {
        for b in a + 1..m {
            let mi = mutual_information(&moments.require(&[a, b])?.clamped(), Var::Latent(a))?;
            let mi = if mi < MI_FLOOR { 0.0 } else { mi };
            w[a][b] = mi;
            w[b][a] = mi;
        }
    }
    Ok(w)
}

/// Kruskal over edges with weight > `threshold`, heaviest first, ties broken
/// by the smaller id pair. Returns undirected edges `(a, b)` with `a < b`.
fn kruskal(weights: &[Vec<f64>], threshold: Option<f64>) -> Vec<(usize, usize)> {
    let m = weights.len();
    let mut cand: Vec<(f64, usize, usize)> = (0..m)
        .flat_map(|a| (a + 1..m).map(move |b| (a, b)))
        .map(|(a, b)| (weights[a][b], a, b))
        .filter(|&(w, _, _)| threshold.is_none_or(|t| w > t))
        .collect();
    cand.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut comp: Vec<usize> = (0..m).collect();
    fn find(comp: &mut [usize], mut x: usize) -> usize {
        while comp[x] != x {
            comp[x] = comp[comp[x]];
            x = comp[x];
        }
        x
    }
    let mut out = Vec::new();
    for (_, a, b) in cand {
        let (ra, rb) = (find(&mut comp, a), find(&mut comp, b));
        if ra != rb {
            comp[ra.max(rb)] = ra.min(rb);
            out.push((a, b));
        }
    }
    out.sort_unstable();
    out
}

/// Orients a forest away from the lowest id of each component.
pub fn orient_forest(m: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); m];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut parents = vec![Vec::new(); m];
    let mut seen = vec![false; m];
    for root in 0..m {
        if seen[root] {
            continue;
        }
        seen[root] = true;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            let mut next = adj[v].clone();
            next.sort_unstable();
            for u in next {
                if !seen[u] {
                    seen[u] = true;
                    parents[u].push(v);
                    queue.push_back(u);
                }
            }
        }
    }
    parents
}

/// Maximum-weight spanning tree (forest only if the graph is disconnected,
/// which it never is here), as undirected edges.
pub fn max_spanning_tree(weights: &[Vec<f64>]) -> Vec<(usize, usize)> {
    kruskal(weights, None)
}

/// Chow–Liu: the maximum-MI spanning forest, keeping only edges whose BIC
/// gain `N·I − log N` is positive.
pub fn chow_liu(moments: &MomentSet, n: usize) -> Result<ScoredStructure> {
    if n == 0 {
        return Err(AdfaError::invalid("sample count must be positive"));
    }
    let m = moments.latents.len();
    if m < 2 {
        return bic_score(moments, &vec![Vec::new(); m], n);
    }
    if moments.order < 2 {
        return Err(AdfaError::invalid("chow_liu needs pairwise moments"));
    }
    let mi = pairwise_mi(moments)?;
    let nf = n as f64;
    let gain: Vec<Vec<f64>> = mi
        .iter()
        .map(|row| row.iter().map(|&w| nf * w - nf.ln()).collect())
        .collect();
    let edges = kruskal(&gain, Some(0.0));
    bic_score(moments, &orient_forest(m, &edges), n)
}

/// Globally optimal BIC structure with at most `max_indegree` parents per
/// latent, by dynamic programming over subsets.
pub fn exact_search(moments: &MomentSet, n: usize, max_indegree: usize) -> Result<ScoredStructure> {
    check_latents(moments)?;
    let m = moments.latents.len();
    if m > MAX_EXACT_LATENTS {
        return Err(AdfaError::Capacity(format!(
            "exact search supports at most {MAX_EXACT_LATENTS} latents, got {m}"
        )));
    }
    if max_indegree + 1 > moments.order {
        return Err(AdfaError::invalid(format!(
            "max_indegree {max_indegree} needs moments of order {}",
            max_indegree + 1
        )));
    }
    let full = 1usize << m;

    // best[i][U]: best score and parent mask for latent i with parents within U
    let best: Vec<Vec<(f64, usize)>> = (0..m)
        .into_par_iter()
        .map(|i| -> Result<Vec<(f64, usize)>> {
            let mut table = vec![(f64::NEG_INFINITY, 0usize); full];
            for u in 0..full {
                if u >> i & 1 == 1 {
                    continue;
                }
                let mut cur = (f64::NEG_INFINITY, 0);
                if (u.count_ones() as usize) <= max_indegree {
                    cur = (family_score(moments, i, &bits(u), n)?, u);
                }
                for v in bits(u) {
                    let sub = table[u & !(1 << v)];
                    if sub.0 > cur.0 || (sub.0 == cur.0 && sub.1 < cur.1) {
                        cur = sub;
                    }
                }
                table[u] = cur;
            }
            Ok(table)
        })
        .collect::<Result<Vec<_>>>()?;

    // sinks[W]: best network over W, remembered through the last-placed sink
    let mut value = vec![f64::NEG_INFINITY; full];
    let mut sink = vec![usize::MAX; full];
    value[0] = 0.0;
    for w in 1..full {
        for i in bits(w) {
            let rest = w & !(1 << i);
            let v = value[rest] + best[i][rest].0;
            if v > value[w] {
                value[w] = v;
                sink[w] = i;
            }
        }
    }
    let mut parents = vec![Vec::new(); m];
    let mut w = full - 1;
    while w != 0 {
        let i = sink[w];
        let rest = w & !(1 << i);
        parents[i] = bits(best[i][rest].1);
        w = rest;
    }
    bic_score(moments, &parents, n)
}

fn bits(mask: usize) -> Vec<usize> {
    (0..usize::BITS as usize).filter(|&b| mask >> b & 1 == 1).collect()
}

/// Conditional tables `P(y_i | y_Pa(i))` read off the family moments.
pub fn fit_cpts(moments: &MomentSet, parents: &[Vec<usize>]) -> Result<LatentNetwork> {
    check_latents(moments)?;
    check_acyclic(parents)?;
    let mut cpts = Vec::with_capacity(parents.len());
    let mut sorted_parents = Vec::with_capacity(parents.len());
    for (i, ps) in parents.iter().enumerate() {
        let mut ps = ps.clone();
        ps.sort_unstable();
        let table = family_table(moments, i, &ps)?;
        let pos_i = table.position(Var::Latent(i)).expect("family contains i");
        let pos_pa: Vec<usize> = ps.iter().map(|&p| table.position(Var::Latent(p)).expect("parent")).collect();
        let mut rows = vec![[0.0f64; 2]; 1 << ps.len()];
        for (idx, &p) in table.table.iter().enumerate() {
            rows[project(idx, &pos_pa)][idx >> pos_i & 1] += p.max(0.0);
        }
        for (r, row) in rows.iter_mut().enumerate() {
            let mass = row[0] + row[1];
            if mass < 1e-9 {
                return Err(AdfaError::degenerate(format!(
                    "family {i} <- {ps:?}: parent configuration {r} has probability {mass:e}"
                )));
            }
            row[0] /= mass;
            row[1] /= mass;
        }
        cpts.push(rows);
        sorted_parents.push(ps);
    }
    LatentNetwork::new(sorted_parents, cpts)
}

/// Signed covariance of two latents from their pairwise moment.
pub fn pair_covariance(moments: &MomentSet, a: usize, b: usize) -> Result<f64> {
    let (lo, hi) = (a.min(b), a.max(b));
    let t = moments.require(&[lo, hi])?;
    let p11 = t.table[3];
    let pa = t.table[1] + t.table[3];
    let pb = t.table[2] + t.table[3];
    Ok(p11 - pa * pb)
}

/// Tab-separated `parent child sign covariance` lines, one per edge.
pub fn edge_list(structure: &ScoredStructure, moments: &MomentSet, names: &[String]) -> Result<String> {
    let mut out = String::from("parent\tchild\tsign\tcovariance\n");
    for (p, c) in structure.edges() {
        let cov = pair_covariance(moments, p, c)?;
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| Var::Latent(i).to_string());
        let sign = if cov >= 0.0 { '+' } else { '-' };
        out.push_str(&format!("{}\t{}\t{sign}\t{cov:.6e}\n", name(p), name(c)));
    }
    Ok(out)
}
