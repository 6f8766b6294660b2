//! Acceptance suite: one PASS/FAIL line per criterion.

use std::time::{Duration, Instant};

use adfa::evalem::{
    em_refine, heldout_latent_loglik, inner_e_step, inner_m_step, last_tag_accuracy, AuxCounts, EmConfig,
};
use adfa::generate::{
    add_anchor_confounders, random_model, sample_dataset, sample_latents, ParamRanges, StructureKind,
};
use adfa::inference::{quickscore_negative, tree_negative_prob};
use adfa::io::AnchorSpec;
use adfa::loadings::{
    estimate_leak, f_blanket_best, f_direct, f_tree, learn_loadings, FailureEstimator, LeakMethod, LoadingsConfig,
    MomentSource, PopulationSource,
};
use adfa::model::exact_marginal;
use adfa::moments::{
    anchor_moments_population, latent_moments_population, linear_oracle_local, linear_oracle_marginal,
    recover_all_simplex, recover_polytope, Constraint, MomentLayout, RecoveryConfig,
};
use adfa::noise::{triplet_decompose, TripletParameters, TripletTensor};
use adfa::pipeline::{moments_stage, run_pipeline_on, structure_stage, PipelineConfig, StructureMode};
use adfa::structure::{chow_liu, exact_search, mutual_information};
use adfa::{AdfaModel, NoisyOrLoadings, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn skeleton(parents: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let mut e: Vec<(usize, usize)> = parents
        .iter()
        .enumerate()
        .flat_map(|(c, ps)| ps.iter().map(move |&p| (p.min(c), p.max(c))))
        .collect();
    e.sort_unstable();
    e
}

fn v_structures(parents: &[Vec<usize>]) -> Vec<(usize, usize, usize)> {
    let sk = skeleton(parents);
    let mut out = Vec::new();
    for (c, ps) in parents.iter().enumerate() {
        for (x, &a) in ps.iter().enumerate() {
            for &b in &ps[x + 1..] {
                if !sk.contains(&(a.min(b), a.max(b))) {
                    out.push((a.min(b), a.max(b), c));
                }
            }
        }
    }
    out.sort_unstable();
    out
}

fn markov_equivalent(a: &[Vec<usize>], b: &[Vec<usize>]) -> bool {
    skeleton(a) == skeleton(b) && v_structures(a) == v_structures(b)
}

fn kinds() -> [StructureKind; 3] {
    [StructureKind::Independent, StructureKind::Tree, StructureKind::InDegree(2)]
}

fn moment_recovery() -> Outcome {
    let (mut worst_simplex, mut worst_polytope) = (0.0f64, 0.0f64);
    let simplex_cfg = RecoveryConfig {
        constraint: Constraint::Simplex,
        lambda: 0.0,
        gap_tol: 1e-14,
        max_iters: 200_000,
        ..RecoveryConfig::default()
    };
    let polytope_cfg = RecoveryConfig {
        constraint: Constraint::Marginal,
        lambda: 0.0,
        gap_tol: 1e-4,
        max_iters: 5000,
        ..RecoveryConfig::default()
    };
    for s in 0..20u64 {
        let model = random_model(5, 8, kinds()[s as usize % 3], 1000 + s, &ParamRanges::default()).unwrap();
        let anchor = anchor_moments_population(&model, 2).unwrap();
        let truth = latent_moments_population(&model, 2).unwrap();
        let (simplex, _) = recover_all_simplex(&anchor, &model.anchors, &simplex_cfg).unwrap();
        worst_simplex = worst_simplex.max(simplex.max_abs_diff(&truth));
        let poly = recover_polytope(&anchor, &model.anchors, &polytope_cfg).unwrap();
        worst_polytope = worst_polytope.max(poly.moments.max_abs_diff(&truth));
    }
    outcome(
        worst_simplex <= 1e-6 && worst_polytope <= 2e-3,
        format!("20 models, simplex max error {worst_simplex:.2e} (<= 1e-6), marginal polytope {worst_polytope:.2e} (<= 2e-3)"),
    )
}

fn relaxation_dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut violations, mut worst_residual) = (0, 0.0f64);
    for t in 0..100 {
        let m = 3 + t % 3;
        let ids: Vec<usize> = (0..m).collect();
        let layout = MomentLayout::for_latents(&ids, 2);
        let g: Vec<f64> = (0..layout.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let local = linear_oracle_local(&layout, &g).unwrap();
        let marginal = linear_oracle_marginal(&layout, &g, m).unwrap();
        if local.value > marginal.value + 1e-9 {
            violations += 1;
        }
        worst_residual = worst_residual
            .max(layout.consistency_residual(&local.point))
            .max(layout.consistency_residual(&marginal.point));
    }
    outcome(
        violations == 0 && worst_residual < 1e-7,
        format!("100 gradients, local > marginal in {violations} cases, max residual {worst_residual:.2e}"),
    )
}

fn edge_mi_ok(model: &AdfaModel, min_mi: f64) -> bool {
    let truth = latent_moments_population(model, 2).unwrap();
    model.latent.parents.iter().enumerate().all(|(c, ps)| {
        ps.iter().all(|&p| {
            let pair = truth.require(&[p.min(c), p.max(c)]).unwrap();
            mutual_information(pair, Var::Latent(c)).unwrap() >= min_mi
        })
    })
}

fn structure_recovery() -> Outcome {
    const N: usize = 100_000;
    let cfg = |gap_tol: f64| RecoveryConfig {
        constraint: Constraint::Marginal,
        lambda: 0.0,
        gap_tol,
        max_iters: 20_000,
        ..RecoveryConfig::default()
    };
    let ranges = ParamRanges {
        cpt_min_gap: 0.4,
        ..ParamRanges::default()
    };
    let mut trees = 0;
    let mut tree_hits = 0;
    let mut seed = 0u64;
    while trees < 20 && seed < 5000 {
        seed += 1;
        let model = random_model(7, 7, StructureKind::Tree, seed, &ranges).unwrap();
        if !edge_mi_ok(&model, 0.05) {
            continue;
        }
        trees += 1;
        let anchor = anchor_moments_population(&model, 2).unwrap();
        let rec = recover_polytope(&anchor, &model.anchors, &cfg(1e-5)).unwrap();
        let learned = chow_liu(&rec.moments, N).unwrap();
        tree_hits += (skeleton(&learned.parents) == skeleton(&model.latent.parents)) as usize;
    }
    let mut dags = 0;
    let mut dag_hits = 0;
    while dags < 10 && seed < 10_000 {
        seed += 1;
        let model = random_model(6, 6, StructureKind::InDegree(2), seed, &ranges).unwrap();
        if !edge_mi_ok(&model, 0.01) {
            continue;
        }
        dags += 1;
        let anchor = anchor_moments_population(&model, 3).unwrap();
        let rec = recover_polytope(&anchor, &model.anchors, &cfg(1e-5)).unwrap();
        let learned = exact_search(&rec.moments, N, 2).unwrap();
        dag_hits += markov_equivalent(&learned.parents, &model.latent.parents) as usize;
    }
    outcome(
        trees == 20 && dags == 10 && tree_hits >= 19 && dag_hits >= 9,
        format!("Chow-Liu skeletons {tree_hits}/{trees} (>= 19), exact search Markov-equivalent {dag_hits}/{dags} (>= 9)"),
    )
}

fn loadings_consistency() -> Outcome {
    let (mut worst_tree, mut worst_blanket, mut worst_agree, mut max_direct_bias) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut worst_leak = [0.0f64; 3];
    for s in 0..20u64 {
        let m = 3 + (s as usize % 6);
        let model = random_model(m, m + 5, StructureKind::Tree, 300 + s, &ParamRanges::default()).unwrap();
        let source = PopulationSource::new(&model).unwrap();
        for j in 0..model.n() {
            for i in 0..m {
                let truth = model.loadings.failures[i][j];
                let ft = f_tree(&source, &model.latent, i, j).unwrap();
                let mut ids = model.latent.markov_blanket(i);
                ids.push(i);
                ids.sort_unstable();
                let fb = f_blanket_best(&source.conditional(&ids, j).unwrap(), i).unwrap();
                let fd = f_direct(&source.conditional(&[i], j).unwrap()).unwrap();
                worst_tree = worst_tree.max((ft - truth).abs());
                worst_blanket = worst_blanket.max((fb - truth).abs());
                worst_agree = worst_agree.max((ft - fb).abs());
                max_direct_bias = max_direct_bias.max((fd - truth).abs());
            }
        }
    }
    // leaks through the full estimator, one P_{-l} method per valid structure
    let cases = [
        (StructureKind::Independent, FailureEstimator::Direct, LeakMethod::Quickscore),
        (StructureKind::Tree, FailureEstimator::Tree, LeakMethod::TreeBp),
        (StructureKind::InDegree(2), FailureEstimator::Blanket, LeakMethod::Exact),
    ];
    for (c, &(kind, estimator, method)) in cases.iter().enumerate() {
        for s in 0..8u64 {
            let model = random_model(5, 11, kind, 500 + s, &ParamRanges::default()).unwrap();
            let source = PopulationSource::new(&model).unwrap();
            let config = LoadingsConfig {
                estimator,
                leak_method: Some(method),
                prune_threshold: 1.0,
                ..LoadingsConfig::default()
            };
            let learned = learn_loadings(&source, &model.latent, &model.anchors, model.n(), &config).unwrap();
            for j in 0..model.n() {
                worst_leak[c] = worst_leak[c].max((learned.leaks[j] - model.loadings.leaks[j]).abs());
            }
        }
    }
    let mut worst_sampling = 0.0f64;
    for s in 0..4u64 {
        let model = random_model(5, 9, StructureKind::InDegree(2), 600 + s, &ParamRanges::default()).unwrap();
        let source = PopulationSource::new(&model).unwrap();
        for j in 0..model.n() {
            let p_hat = source.negative_rate(j).unwrap();
            let l = estimate_leak(&model.latent, &model.loadings.failure_column(j), p_hat, LeakMethod::Sampling, s).unwrap();
            worst_sampling = worst_sampling.max((l - model.loadings.leaks[j]).abs());
        }
    }
    let pass = worst_tree <= 1e-8
        && worst_blanket <= 1e-8
        && worst_agree <= 1e-8
        && max_direct_bias > 0.01
        && worst_leak.iter().all(|&e| e <= 1e-8);
    outcome(
        pass,
        format!(
            "f_tree {worst_tree:.1e}, f_blanket {worst_blanket:.1e}, agreement {worst_agree:.1e}, f_direct max bias {max_direct_bias:.3}; \
             leak error quickscore {:.1e}, tree-bp {:.1e}, exact {:.1e}; sampling (1e5 draws, Monte-Carlo) {worst_sampling:.1e}",
            worst_leak[0], worst_leak[1], worst_leak[2]
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for s in 0..50u64 {
        let kind = if s % 2 == 0 { StructureKind::Independent } else { StructureKind::Tree };
        let m = 2 + (s as usize % 7);
        let model = random_model(m, m + 4, kind, 700 + s, &ParamRanges::default()).unwrap();
        for j in 0..model.n() {
            let exact = exact_marginal(&model, &[Var::Observed(j)]).unwrap().table[0];
            if kind == StructureKind::Independent {
                worst = worst.max((quickscore_negative(&model, j, true).unwrap() - exact).abs());
            }
            worst = worst.max((tree_negative_prob(&model, j, &vec![None; m]).unwrap() - exact).abs());
            let r = j % m;
            let joint = exact_marginal(&model, &[Var::Latent(r), Var::Observed(j)]).unwrap();
            for v in [false, true] {
                let y = v as usize;
                let cond = joint.table[y] / (joint.table[y] + joint.table[y | 2]);
                let mut clamp = vec![None; m];
                clamp[r] = Some(v);
                worst = worst.max((tree_negative_prob(&model, j, &clamp).unwrap() - cond).abs());
            }
        }
    }
    outcome(worst <= 1e-10, format!("50 models, max deviation from enumeration {worst:.1e}"))
}

fn robustness_trend() -> Outcome {
    const SEEDS: u64 = 8;
    let ranges = ParamRanges {
        prior: (0.02, 0.4),
        ..ParamRanges::default()
    };
    let constraints = [Constraint::Simplex, Constraint::Local, Constraint::Marginal];
    let run = |misspecified: bool| -> Vec<[f64; 3]> {
        (0..SEEDS)
            .map(|s| {
                let base = random_model(6, 18, StructureKind::Tree, 100 + s, &ranges).unwrap();
                let model = if misspecified { add_anchor_confounders(&base, 0.7, s).unwrap() } else { base };
                let data = sample_dataset(&model, 10_000, 7 + s).unwrap();
                let held = sample_latents(&model.latent, 5000, &mut ChaCha8Rng::seed_from_u64(999 + s)).unwrap();
                let mut row = [0.0; 3];
                for (c, &constraint) in constraints.iter().enumerate() {
                    let config = PipelineConfig {
                        constraint,
                        ..PipelineConfig::default()
                    };
                    let moments = moments_stage(&data, &model.anchors, &config).unwrap();
                    let st = structure_stage(&moments, StructureMode::Tree).unwrap();
                    row[c] = heldout_latent_loglik(&st.network, &held).unwrap();
                }
                row
            })
            .collect()
    };
    let mean = |rows: &[[f64; 3]], c: usize| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
    let mis = run(true);
    let well = run(false);
    let means: Vec<f64> = (0..3).map(|c| mean(&mis, c)).collect();
    let inversions = |hi: usize, lo: usize| mis.iter().filter(|r| r[hi] < r[lo]).count();
    let (inv_ls, inv_ml) = (inversions(1, 0), inversions(2, 1));
    let well_means: Vec<f64> = (0..3).map(|c| mean(&well, c)).collect();
    let spread = well_means.iter().cloned().fold(f64::MIN, f64::max) - well_means.iter().cloned().fold(f64::MAX, f64::min);
    let pass = means[2] >= means[1] && means[1] >= means[0] && inv_ls <= 1 && inv_ml <= 1 && spread <= 0.02;
    outcome(
        pass,
        format!(
            "misspecified mean held-out loglik simplex {:.4} local {:.4} marginal {:.4}, seed inversions local<simplex {inv_ls}, marginal<local {inv_ml}; well-specified spread {spread:.4} nats/row",
            means[0], means[1], means[2]
        ),
    )
}

fn random_triplet(rng: &mut impl Rng) -> TripletParameters {
    let view = |rng: &mut ChaCha8Rng| -> [[f64; 2]; 2] {
        loop {
            let (a, b): (f64, f64) = (rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95));
            if (a - b).abs() >= 0.5 {
                return [[1.0 - b, 1.0 - a], [b, a]];
            }
        }
    };
    let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
    let p1 = r.gen_range(0.3..0.7);
    let mut w1 = view(&mut r);
    if w1[1][1] < w1[1][0] {
        w1 = [[w1[0][1], w1[0][0]], [w1[1][1], w1[1][0]]];
    }
    TripletParameters {
        prior: [1.0 - p1, p1],
        w1,
        w2: view(&mut r),
        x: view(&mut r),
    }
}

fn tensor_decomposition() -> Outcome {
    const N: usize = 500_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut worst_exact, mut worst_sampled) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let p = random_triplet(&mut rng);
        let exact = triplet_decompose(&TripletTensor::from_parameters(&p).unwrap()).unwrap();
        worst_exact = worst_exact.max(exact.max_abs_diff(&p));
        let mut counts = [0.0; 8];
        for _ in 0..N {
            let y = (rng.gen::<f64>() < p.prior[1]) as usize;
            let w1 = (rng.gen::<f64>() < p.w1[1][y]) as usize;
            let w2 = (rng.gen::<f64>() < p.w2[1][y]) as usize;
            let x = (rng.gen::<f64>() < p.x[1][y]) as usize;
            counts[w1 | w2 << 1 | x << 2] += 1.0;
        }
        counts.iter_mut().for_each(|c| *c /= N as f64);
        let sampled = triplet_decompose(&TripletTensor::new(counts).unwrap()).unwrap();
        worst_sampled = worst_sampled.max(sampled.max_abs_diff(&p));
    }
    outcome(
        worst_exact <= 1e-6 && worst_sampled <= 5e-3,
        format!("50 triplets, exact max error {worst_exact:.1e} (<= 1e-6), N=500000 max error {worst_sampled:.1e} (<= 5e-3)"),
    )
}

/// Expected auxiliary counts by enumerating every activation pattern.
fn brute_force_counts(loadings: &NoisyOrLoadings, rows: &[Vec<bool>], samples: &[Vec<Vec<bool>>]) -> AuxCounts {
    let (m, n) = (loadings.m(), loadings.n());
    let mut c = AuxCounts {
        fired: vec![vec![0.0; m + 2]; n],
        reached: vec![vec![0.0; m + 1]; n],
    };
    for (x, ys) in rows.iter().zip(samples) {
        for y in ys {
            for j in 0..n {
                let active: Vec<usize> = (0..m).filter(|&k| y[k]).collect();
                let slots = active.len() + 1;
                let mut post = vec![0.0; m + 2];
                for z in 0..1usize << slots {
                    let mut w = 1.0;
                    for (t, &k) in active.iter().enumerate() {
                        let f = loadings.failures[k][j];
                        w *= if z >> t & 1 == 1 { 1.0 - f } else { f };
                    }
                    let l = loadings.leaks[j];
                    w *= if z >> active.len() & 1 == 1 { l } else { 1.0 - l };
                    if (z != 0) != x[j] {
                        continue;
                    }
                    let first = (0..active.len()).find(|&t| z >> t & 1 == 1);
                    let a = match first {
                        Some(t) => active[t],
                        None if z >> active.len() & 1 == 1 => m,
                        None => m + 1,
                    };
                    post[a] += w;
                }
                let total: f64 = post.iter().sum();
                if total == 0.0 {
                    continue;
                }
                for k in 0..m + 2 {
                    c.fired[j][k] += post[k] / total;
                }
                for k in 0..=m {
                    if k == m || y[k] {
                        c.reached[j][k] += post[k..].iter().sum::<f64>() / total;
                    }
                }
            }
        }
    }
    c
}

fn em_guarantees() -> Outcome {
    let mut runs = 0;
    let mut decreases = 0;
    for s in 0..4u64 {
        let model = random_model(4, 10, kinds()[s as usize % 3], 800 + s, &ParamRanges::default()).unwrap();
        let data = sample_dataset(&model, 1500, s).unwrap();
        let config = EmConfig {
            outer_steps: 5,
            seed: s,
            ..EmConfig::default()
        };
        let result = em_refine(&model, &data, &config).unwrap();
        runs += 1;
        decreases += result
            .trace
            .iter()
            .filter(|t| t.loglik_after < t.loglik_before - 1e-9 * t.loglik_before.abs())
            .count();
    }
    let mut worst_count = 0.0f64;
    let mut worst_update = 0.0f64;
    for s in 0..6u64 {
        let model = random_model(4, 8, StructureKind::Tree, 900 + s, &ParamRanges::default()).unwrap();
        let data = sample_dataset(&model, 60, s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let samples: Vec<Vec<Vec<bool>>> = data
            .latent_rows
            .as_ref()
            .unwrap()
            .iter()
            .map(|y| {
                let mut v = vec![y.clone()];
                v.extend((0..2).map(|_| (0..4).map(|_| rng.gen_bool(0.5)).collect()));
                v
            })
            .collect();
        let fast = inner_e_step(&model.loadings, &data.observed_rows, &samples);
        let slow = brute_force_counts(&model.loadings, &data.observed_rows, &samples);
        for j in 0..model.n() {
            for (a, b) in fast.fired[j].iter().zip(&slow.fired[j]) {
                worst_count = worst_count.max((a - b).abs());
            }
            for (a, b) in fast.reached[j].iter().zip(&slow.reached[j]) {
                worst_count = worst_count.max((a - b).abs());
            }
        }
        let updated = inner_m_step(&model.loadings, &slow).unwrap();
        for j in 0..model.n() {
            for k in 0..4 {
                if model.loadings.edge_mask[k][j] && slow.reached[j][k] > 0.0 {
                    let f = (1.0 - slow.fired[j][k] / slow.reached[j][k]).clamp(1e-6, 1.0 - 1e-12);
                    worst_update = worst_update.max((updated.failures[k][j] - f).abs());
                }
            }
            let l = slow.fired[j][4] / slow.reached[j][4];
            worst_update = worst_update.max((updated.leaks[j] - l).abs());
        }
    }
    outcome(
        decreases == 0 && worst_count <= 1e-9 && worst_update <= 1e-12,
        format!(
            "{runs} EM runs, {decreases} inner-step decreases; counts vs enumeration {worst_count:.1e}, M-step vs direct counts {worst_update:.1e}"
        ),
    )
}

fn prediction_gap() -> Outcome {
    let ranges = ParamRanges {
        cpt_min_gap: 0.4,
        ..ParamRanges::default()
    };
    let mut gaps = Vec::new();
    for s in 0..5u64 {
        let truth = random_model(10, 30, StructureKind::Tree, 40 + s, &ranges).unwrap();
        let train = sample_dataset(&truth, 50_000, 100 + s).unwrap();
        let eval = sample_dataset(&truth, 20_000, 200 + s).unwrap();
        let spec = AnchorSpec::from_map(truth.space.latent_names.clone(), &truth.anchors);
        let acc = |mode: StructureMode| {
            let config = PipelineConfig {
                structure: mode,
                seed: s,
                ..PipelineConfig::default()
            };
            let model = run_pipeline_on(&train, &spec, &config).unwrap().model;
            last_tag_accuracy(&model, &eval, 5000, s).unwrap().accuracy
        };
        gaps.push(acc(StructureMode::Tree) - acc(StructureMode::Independent));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    outcome(
        mean >= 0.03,
        format!("mean top-1 gap tree - independent {:.2} points over 5 seeds ({:?})", 100.0 * mean, gaps.iter().map(|g| (g * 1000.0).round() / 10.0).collect::<Vec<_>>()),
    )
}

fn main() {
    // criterion 6 is an empirical trend; its line is printed but does not set the exit code
    let criteria: [(usize, fn() -> Outcome, Duration, bool); 9] = [
        (1, moment_recovery, Duration::from_secs(60), true),
        (2, relaxation_dominance, Duration::from_secs(30), true),
        (3, structure_recovery, Duration::from_secs(300), true),
        (4, loadings_consistency, Duration::from_secs(120), true),
        (5, oracle_equivalence, Duration::from_secs(30), true),
        (6, robustness_trend, Duration::from_secs(1800), false),
        (7, tensor_decomposition, Duration::from_secs(60), true),
        (8, em_guarantees, Duration::from_secs(300), true),
        (9, prediction_gap, Duration::from_secs(900), true),
    ];
    let only: Option<usize> = std::env::args().nth(1).and_then(|a| a.parse().ok());
    let mut failed = Vec::new();
    for (n, f, budget, gating) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let took = start.elapsed();
        let pass = o.pass && took <= budget;
        println!(
            "{} criterion {n}: {} [{:.1}s, budget {}s]{}",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64(),
            budget.as_secs(),
            if gating { "" } else { " (reported, not gating)" }
        );
        if !pass && gating {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
