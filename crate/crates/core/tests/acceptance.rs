//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails. Every tolerance is pinned here.

use std::time::{Duration, Instant};

use igbo::attribution::{linear_path, tig, tig_with_rule, AttributionConfig, RiemannRule, TigMethod};
use igbo::biopt::{
    classify_case, default_eps_term, evaluate_losses, loss_gradients, naive_combination, naive_feasible_interval,
    noise_probe, project, recover_parameters, train, Case, Example, GradientPair, LambdaSchedule, TrainConfig,
};
use igbo::dagbuild::{
    build_dag, edge_probability, orient_edges, transitivity_check, normal_quantile, DagEdge, IntervalRule,
    ScoreBatches, VarianceMode,
};
use igbo::experiment::{
    banana_dataset, evaluate, examples, gen_data, make_baseline, train_baseline, EvalConfig, GeneratorConfig,
    PathSource,
};
use igbo::ndiff::finite_diff;
use igbo::pathoracle::{generate_anchors, train_oracle, DensityAssessor, OracleParams, OraclePair, OracleTrainConfig};
use igbo::seqmodel::{forward, input_jacobian, predict, task_loss, BaselineKind, ElmanParams, Sample};
use igbo::{Array, Baseline, InterpretabilityDag, TimeSeries, ValidityAssessor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

// pinned tolerances and budgets
const C1_PAIRS: usize = 10_000;
const C1_BUDGET: Duration = Duration::from_secs(10);
const C2_PAIRS: usize = 10_000;
const C2_REL_TOL: f64 = 1e-10;
const C3_PAIRS: usize = 10_000;
const C3_REL_TOL: f64 = 1e-8;
const C4_PAIRS: usize = 1_000;
const C5_STEPS: usize = 200;
const C5_ETA: f64 = 1e-3;
const C5_MIN_RATE: f64 = 0.95;
const C6_EXACT_TOL: f64 = 1e-10;
const C6_FINE_M: usize = 512;
const C6_FINE_TOL: f64 = 1e-3;
const C6_MIN_RATIO: f64 = 1.8;
const C7_REL_TOL: f64 = 1e-4;
const C7_FD_STEP: f64 = 1e-5;
const C7_BUDGET: Duration = Duration::from_secs(120);
const C8_BATCHES: usize = 2_000;
const C8_TOL: f64 = 0.02;
const C8_INSTANCES: usize = 1_000;
const C9_INSTANCES: usize = 1_000;
const C10_LO: f64 = 1.6;
const C10_HI: f64 = 2.4;
const C11_MIN_SATISFACTION: f64 = 0.8;
const C11_MAX_DEGRADATION: f64 = 0.05;
const C11_BUDGET: Duration = Duration::from_secs(600);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn reject(g: &[f64], h: &[f64]) -> Vec<f64> {
    let c = dot(g, h) / dot(h, h);
    g.iter().zip(h).map(|(x, y)| x - c * y).collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Pairs with a random mix of shared and independent directions, so both
/// aligned and conflicting geometry appear at every dimension.
fn random_pair(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let g1 = gaussian(rng, n);
    let noise = gaussian(rng, n);
    let c: f64 = rng.random_range(-1.5..1.5);
    let s1: f64 = rng.random_range(0.1..10.0);
    let s2: f64 = rng.random_range(0.1..10.0);
    let g2: Vec<f64> = g1.iter().zip(&noise).map(|(a, e)| s2 * (c * a + e)).collect();
    (g1.iter().map(|a| s1 * a).collect(), g2)
}

fn pair_of(g1: &[f64], g2: &[f64]) -> GradientPair {
    GradientPair::from_slices(g1, g2).unwrap()
}

fn non_terminal(p: &GradientPair) -> bool {
    !classify_case(p, default_eps_term(p.len())).is_terminal()
}

fn c1_simultaneous_descent() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0;
    let mut checked = 0;
    for n in [2, 10, 1000] {
        let mut pairs = 0;
        while pairs < C1_PAIRS {
            let (g1, g2) = random_pair(&mut rng, n);
            let p = pair_of(&g1, &g2);
            if !non_terminal(&p) {
                continue;
            }
            pairs += 1;
            for lambda in [0.1, 0.5, 0.9] {
                let v = project(&p, lambda).unwrap().direction;
                checked += 1;
                if !(dot(v.data(), &g1) > 0.0 && dot(v.data(), &g2) > 0.0) {
                    failures += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && elapsed < C1_BUDGET,
        format!("{checked} projections, {failures} without simultaneous descent, {elapsed:.2?}"),
    )
}

fn c2_conflicting_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    while count < C2_PAIRS {
        let n = [2, 10, 100][count % 3];
        let (g1, g2) = random_pair(&mut rng, n);
        let p = pair_of(&g1, &g2);
        if classify_case(&p, default_eps_term(n)) != Case::Conflicting {
            continue;
        }
        count += 1;
        let lambda: f64 = rng.random_range(0.01..0.99);
        let v = project(&p, lambda).unwrap().direction;
        let p12 = reject(&g1, &g2);
        let p21 = reject(&g2, &g1);
        let want1 = (1.0 - lambda) * dot(&p12, &p12);
        let want2 = lambda * dot(&p21, &p21);
        let e1 = (dot(v.data(), &g1) - want1).abs() / want1;
        let e2 = (dot(v.data(), &g2) - want2).abs() / want2;
        worst = worst.max(e1).max(e2);
    }
    outcome(
        worst <= C2_REL_TOL,
        format!("{count} conflicting pairs, worst relative error {worst:.2e} (tol {C2_REL_TOL:.0e})"),
    )
}

fn c3_parameterization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut aligned, mut conflicting) = (0, 0);
    let mut worst: f64 = 0.0;
    while aligned + conflicting < C3_PAIRS {
        let n = [2, 10, 100][(aligned + conflicting) % 3];
        let (g1, g2) = random_pair(&mut rng, n);
        let p = pair_of(&g1, &g2);
        let case = classify_case(&p, default_eps_term(n));
        if case.is_terminal() {
            continue;
        }
        let alpha = 10f64.powf(rng.random_range(-1.0..1.0));
        let beta = 10f64.powf(rng.random_range(-1.0..1.0));
        let w: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| alpha * a + beta * b).collect();
        if !(dot(&w, &g1) > 0.0 && dot(&w, &g2) > 0.0) {
            continue;
        }
        match case {
            Case::Aligned => aligned += 1,
            _ => conflicting += 1,
        }
        let (lambda, eta) = recover_parameters(&p, alpha, beta).unwrap();
        let v = project(&p, lambda).unwrap().direction;
        let diff: Vec<f64> = v.data().iter().zip(&w).map(|(x, y)| eta * x - y).collect();
        worst = worst.max(norm(&diff) / norm(&w));
    }
    outcome(
        worst <= C3_REL_TOL && aligned > 0 && conflicting > 0,
        format!("{aligned} aligned + {conflicting} conflicting targets, worst relative error {worst:.2e} (tol {C3_REL_TOL:.0e})"),
    )
}

fn c4_naive_interval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut count = 0;
    let (mut inside_bad, mut outside_bad) = (0, 0);
    while count < C4_PAIRS {
        let n = [2, 10, 100][count % 3];
        let (g1, g2) = random_pair(&mut rng, n);
        let p = pair_of(&g1, &g2);
        if classify_case(&p, default_eps_term(n)) != Case::Conflicting {
            continue;
        }
        let (lo, hi) = naive_feasible_interval(&p);
        if !(hi - lo > 1e-6 && lo > 1e-6 && hi < 1.0 - 1e-6) {
            continue;
        }
        count += 1;
        let inside = lo + rng.random_range(0.01..0.99) * (hi - lo);
        let v = naive_combination(&p, inside);
        if !(dot(v.data(), &g1) > 0.0 && dot(v.data(), &g2) > 0.0) {
            inside_bad += 1;
        }
        // outside: below lo or above hi, away from the boundary by 1% of the gap
        let below = rng.random_bool(lo / (lo + 1.0 - hi));
        let outside = if below {
            rng.random_range(0.0..0.99) * lo
        } else {
            hi + rng.random_range(0.01..1.0) * (1.0 - hi)
        };
        let v = naive_combination(&p, outside.clamp(1e-12, 1.0 - 1e-12));
        if dot(v.data(), &g1) > 0.0 && dot(v.data(), &g2) > 0.0 {
            outside_bad += 1;
        }
    }
    outcome(
        inside_bad == 0 && outside_bad == 0,
        format!("{count} conflicting pairs: {inside_bad} inside failures, {outside_bad} outside descents"),
    )
}

fn synthetic(series: usize, len: usize, seed: u64) -> igbo::experiment::Dataset {
    gen_data(&GeneratorConfig {
        series,
        len,
        coefficients: vec![2.0, 1.0, 0.0],
        mu: 0.5,
        lag: 1,
        noise: 0.1,
        correlation: None,
        seed,
    })
    .unwrap()
}

fn c5_both_decrease() -> Outcome {
    let data = synthetic(64, 4, 5);
    let baseline = Baseline::zero(4, 3);
    let exs = examples(&data, &baseline, &PathSource::Linear, 8).unwrap();
    // asks feature 2 (no signal) to outrank feature 0: active for generic models
    let dag = InterpretabilityDag::with_default_names(3, vec![DagEdge { src: 2, dst: 0, eps: 0.1, delta: 0.8 }], "user")
        .unwrap();
    let cfg = AttributionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut sampled, mut good, mut skipped) = (0, 0, 0);
    while sampled < C5_STEPS {
        let model = ElmanParams::init(4, 3, rng.random());
        let idx: Vec<usize> = (0..8).map(|_| rng.random_range(0..exs.len())).collect();
        let batch: Vec<&Example> = idx.iter().map(|&i| &exs[i]).collect();
        let (task, interp, pair) = loss_gradients(&model, &batch, &dag, &cfg).unwrap();
        if !(interp > 0.0) || !non_terminal(&pair) {
            skipped += 1;
            continue;
        }
        sampled += 1;
        let v = project(&pair, 0.5).unwrap().direction;
        let mut flat = model.to_flat();
        flat.axpy(-C5_ETA, &v);
        let (task2, interp2) = evaluate_losses(&model.with_flat(&flat), &batch, &dag, &cfg).unwrap();
        if task2 < task && interp2 < interp {
            good += 1;
        }
    }
    let rate = good as f64 / sampled as f64;
    outcome(
        rate >= C5_MIN_RATE,
        format!("{good}/{sampled} steps decreased both losses ({:.1}%), {skipped} inactive or terminal draws skipped", 100.0 * rate),
    )
}

fn random_series(rng: &mut ChaCha8Rng, t: usize, d: usize) -> TimeSeries {
    TimeSeries::new(Array::from_fn(&[t, d], |_| rng.random_range(-1.0..1.0))).unwrap()
}

fn completeness(model: &ElmanParams, x: &TimeSeries, base: &Baseline, m: usize) -> f64 {
    let path = linear_path(x, base, m).unwrap();
    let a = tig(model, &path).unwrap();
    let fx = forward(model, x).unwrap().0;
    let fb = predict(model, &base.values);
    a.completeness_error(&fx, &fb)
}

fn c6_completeness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact: f64 = 0.0;
    for _ in 0..20 {
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let model = ElmanParams::memoryless_linear(&w, 4);
        let x = random_series(&mut rng, 5, 3);
        let base = Baseline::user(random_series(&mut rng, 5, 3).values().clone()).unwrap();
        exact = exact.max(completeness(&model, &x, &base, 2));
    }
    let mut fine: f64 = 0.0;
    let mut min_ratio = f64::INFINITY;
    for seed in 0..5 {
        let mut model = ElmanParams::init(8, 3, 100 + seed);
        // stronger weights so the model is visibly nonlinear along the path
        let flat = model.to_flat().scale(3.0);
        model.set_flat(&flat);
        let x = random_series(&mut rng, 5, 3);
        let base = Baseline::zero(5, 3);
        fine = fine.max(completeness(&model, &x, &base, C6_FINE_M));
        let coarse = completeness(&model, &x, &base, 33);
        let finer = completeness(&model, &x, &base, 65);
        min_ratio = min_ratio.min(coarse / finer);
    }
    outcome(
        exact <= C6_EXACT_TOL && fine <= C6_FINE_TOL && min_ratio >= C6_MIN_RATIO,
        format!(
            "linear M=2 error {exact:.1e}; width-8 M={C6_FINE_M} error {fine:.1e}; min error ratio M=33 vs 65 {min_ratio:.3}"
        ),
    )
}

fn rel_err(a: &Array, b: &Array) -> f64 {
    a.sub(b).norm() / b.norm().max(1e-12)
}

fn c7_gradient_checks() -> Outcome {
    let start = Instant::now();
    let data = synthetic(6, 4, 7);
    let baseline = Baseline::zero(4, 3);
    let exs = examples(&data, &baseline, &PathSource::Linear, 6).unwrap();
    let batch: Vec<&Example> = exs.iter().collect();
    let samples: Vec<Sample> = data.samples.clone();
    // a wide-margin edge keeps every gap strictly inside the hinge's linear piece
    let dag = InterpretabilityDag::with_default_names(3, vec![DagEdge { src: 2, dst: 0, eps: 0.9, delta: 0.95 }], "user")
        .unwrap();
    let model = ElmanParams::init(4, 3, 77);
    assert!(model.num_params() <= 200);
    let theta = model.to_flat();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();

    let (_, g) = task_loss(&model, &samples).unwrap();
    let fd = finite_diff(|f| Ok(task_loss(&model.with_flat(f), &samples)?.0), &theta, C7_FD_STEP).unwrap();
    let e = rel_err(&g, &fd);
    worst = worst.max(e);
    parts.push(format!("task {e:.1e}"));

    for method in [TigMethod::Tangent, TigMethod::Reverse] {
        let cfg = AttributionConfig { method, ..Default::default() };
        let (_, interp, pair) = loss_gradients(&model, &batch, &dag, &cfg).unwrap();
        assert!(interp > 0.0);
        let fd = finite_diff(
            |f| Ok(evaluate_losses(&model.with_flat(f), &batch, &dag, &cfg)?.1),
            &theta,
            C7_FD_STEP,
        )
        .unwrap();
        let e = rel_err(pair.g2(), &fd);
        worst = worst.max(e);
        parts.push(format!("interp/{method:?} {e:.1e}"));
    }

    let x = &data.samples[0].x;
    let jac = input_jacobian(&model, x).unwrap();
    let mut e_jac: f64 = 0.0;
    for (t, j) in jac.iter().enumerate() {
        let fd = finite_diff(|v| Ok(predict(&model, v)[t]), x.values(), C7_FD_STEP).unwrap();
        e_jac = e_jac.max(rel_err(j, &fd));
    }
    worst = worst.max(e_jac);
    parts.push(format!("input Jacobian {e_jac:.1e}"));

    // attribution tensor against differences of the model along the path
    let path = linear_path(x, &baseline, 4).unwrap();
    let a = tig_with_rule(&model, &path, RiemannRule::Left).unwrap();
    let mut manual = Array::zeros(a.values.shape());
    let (t_len, d) = (x.len(), x.features());
    for j in 0..path.len() - 1 {
        let p = &path.points()[j];
        let step = path.points()[j + 1].sub(p);
        for t in 0..t_len {
            let g = finite_diff(|v| Ok(predict(&model, v)[t]), p, C7_FD_STEP).unwrap();
            for i in 0..t_len {
                for k in 0..d {
                    let idx = [t, i, k];
                    manual.set(&idx, manual.get(&idx) + g.get(&[i, k]) * step.get(&[i, k]));
                }
            }
        }
    }
    let e_tig = rel_err(&a.values, &manual);
    worst = worst.max(e_tig);
    parts.push(format!("attribution {e_tig:.1e}"));

    let elapsed = start.elapsed();
    outcome(
        worst <= C7_REL_TOL && elapsed < C7_BUDGET,
        format!("{} params; relative errors: {}; {elapsed:.2?}", model.num_params(), parts.join(", ")),
    )
}

fn beta_batches(rng: &mut ChaCha8Rng, a: (f64, f64), b: (f64, f64), n: usize, count: usize) -> Vec<Array> {
    let da = Beta::new(a.0, a.1).unwrap();
    let db = Beta::new(b.0, b.1).unwrap();
    (0..count)
        .map(|_| {
            let mut m = Vec::with_capacity(2 * n);
            for _ in 0..n {
                m.push(da.sample(rng));
                m.push(db.sample(rng));
            }
            Array::matrix(n, 2, m)
        })
        .collect()
}

fn c8_clt() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for (a, b) in [((2.0, 2.0), (2.0, 2.2)), ((2.0, 2.0), (2.0, 2.6)), ((2.0, 5.0), (1.5, 5.0)), ((5.0, 2.0), (4.0, 2.0))] {
        let raw = beta_batches(&mut rng, a, b, 16, C8_BATCHES);
        let batches = ScoreBatches::from_samples(&raw).unwrap();
        let diffs = batches.batch_differences(0, 1);
        let empirical = diffs.iter().filter(|g| **g > 0.0).count() as f64 / diffs.len() as f64;
        for mode in [VarianceMode::BetweenBatch, VarianceMode::WithinBatch] {
            let p = edge_probability(&batches, 0, 1, mode).unwrap().probability;
            worst = worst.max((p - empirical).abs());
            if mode == VarianceMode::BetweenBatch {
                notes.push(format!("{p:.3}/{empirical:.3}"));
            }
        }
    }
    // separable instances: alpha = 0.5 orients every pair by mean
    let mut mismatched = 0;
    for _ in 0..C8_INSTANCES {
        let d = rng.random_range(3..7);
        let mut mu: Vec<f64> = (0..d).map(|k| 0.1 + 0.8 * k as f64 / (d - 1) as f64).collect();
        for i in (1..d).rev() {
            mu.swap(i, rng.random_range(0..=i));
        }
        let raw: Vec<Array> = (0..4)
            .map(|_| Array::from_fn(&[8, d], |i| (mu[i % d] + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)))
            .collect();
        let b = ScoreBatches::from_samples(&raw).unwrap();
        let o = orient_edges(&b, 0.5, VarianceMode::default_for(&b)).unwrap();
        let mut want = Vec::new();
        for u in 0..d {
            for v in u + 1..d {
                want.push(if mu[u] > mu[v] { (u, v) } else { (v, u) });
            }
        }
        let mut got = o.edges.clone();
        got.sort();
        want.sort();
        if got != want {
            mismatched += 1;
        }
    }
    outcome(
        worst <= C8_TOL && mismatched == 0,
        format!(
            "max |plug-in - empirical| {worst:.4} (tol {C8_TOL}) over {C8_BATCHES} batches [{}]; {mismatched}/{C8_INSTANCES} separable orientations wrong",
            notes.join(", ")
        ),
    )
}

// independent cycle check by depth-first search
fn has_cycle(n: usize, edges: &[(usize, usize)]) -> bool {
    fn visit(u: usize, adj: &[Vec<usize>], state: &mut [u8]) -> bool {
        state[u] = 1;
        for &v in &adj[u] {
            if state[v] == 1 || (state[v] == 0 && visit(v, adj, state)) {
                return true;
            }
        }
        state[u] = 2;
        false
    }
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[u].push(v);
    }
    let mut state = vec![0u8; n];
    (0..n).any(|u| state[u] == 0 && visit(u, &adj, &mut state))
}

fn c9_acyclicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cyclic = 0;
    let mut edges_seen = 0;
    for _ in 0..C9_INSTANCES {
        let d = rng.random_range(2..8);
        let nb = rng.random_range(2..12);
        let spread = rng.random_range(0.0..0.3);
        let centers: Vec<f64> = (0..d).map(|_| rng.random_range(0.2..0.8)).collect();
        let means = Array::from_fn(&[nb, d], |i| (centers[i % d] + rng.random_range(-spread..=spread)).clamp(0.0, 1.0));
        let b = ScoreBatches::from_means(means, 8).unwrap();
        let alpha = rng.random_range(0.5..0.99);
        let built = build_dag(&b, alpha, VarianceMode::BetweenBatch, None, &IntervalRule::Clt).unwrap();
        let e = built.dag.edge_pairs();
        edges_seen += e.len();
        if has_cycle(d, &e) {
            cyclic += 1;
        }
    }
    // margins of at least 3 z_alpha sigma between consecutive true means
    let mut violations = 0;
    let mut margin_instances = 0;
    for _ in 0..200 {
        let d = rng.random_range(3..6);
        let alpha = rng.random_range(0.6..0.95);
        let z = normal_quantile(alpha);
        let (n, s) = (16usize, 0.05);
        let sigma = s * (2.0 / n as f64).sqrt();
        let gap = 3.0 * z * sigma * rng.random_range(1.0..1.5);
        let mut mu: Vec<f64> = (0..d).map(|k| 0.5 + gap * (k as f64 - (d - 1) as f64 / 2.0)).collect();
        for i in (1..d).rev() {
            mu.swap(i, rng.random_range(0..=i));
        }
        let raw: Vec<Array> = (0..20)
            .map(|_| {
                Array::from_fn(&[n, d], |i| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (mu[i % d] + s * e).clamp(0.0, 1.0)
                })
            })
            .collect();
        let b = ScoreBatches::from_samples(&raw).unwrap();
        let mode = VarianceMode::BetweenBatch;
        let o = orient_edges(&b, alpha, mode).unwrap();
        violations += transitivity_check(&b, alpha, &o.edges, mode).unwrap().len();
        margin_instances += 1;
    }
    outcome(
        cyclic == 0 && violations == 0,
        format!(
            "{cyclic}/{C9_INSTANCES} built DAGs cyclic ({edges_seen} edges); {violations} margin violations over {margin_instances} separated instances"
        ),
    )
}

fn c10_noise_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let aligned = {
        let g1 = gaussian(&mut rng, 50);
        let e = gaussian(&mut rng, 50);
        let g2: Vec<f64> = g1.iter().zip(&e).map(|(a, e)| a + 0.5 * e).collect();
        pair_of(&g1, &g2)
    };
    let conflicting = {
        let g1 = gaussian(&mut rng, 50);
        let e = gaussian(&mut rng, 50);
        let g2: Vec<f64> = g1.iter().zip(&e).map(|(a, e)| -0.4 * a + e).collect();
        pair_of(&g1, &g2)
    };
    assert_eq!(classify_case(&aligned, 1e-8), Case::Aligned);
    assert_eq!(classify_case(&conflicting, 1e-8), Case::Conflicting);
    let a = noise_probe(&aligned, 0.5, 1.0, 32, 4000, 100).unwrap();
    let c = noise_probe(&conflicting, 0.3, 0.5, 64, 4000, 200).unwrap();
    let ok = |r: f64| (C10_LO..=C10_HI).contains(&r);
    outcome(
        ok(a.ratio) && ok(c.ratio),
        format!(
            "aligned B=32 ratio {:.3}, conflicting B=64 ratio {:.3} (band [{C10_LO}, {C10_HI}])",
            a.ratio, c.ratio
        ),
    )
}

fn c11_end_to_end() -> Outcome {
    let start = Instant::now();
    // feature 2 carries no signal of its own but is a near copy of feature 0
    let data = gen_data(&GeneratorConfig {
        series: 400,
        len: 6,
        coefficients: vec![2.0, 1.0, 0.0],
        mu: 0.0,
        lag: 1,
        noise: 1.0,
        correlation: Some((0, 2, 0.99)),
        seed: 7,
    })
    .unwrap();
    let (train_set, test_set) = data.split(0.5).unwrap();
    let (reference, _) = train_baseline(&ElmanParams::init(4, 3, 1), &train_set, 30, 20, 0.05, 3).unwrap();
    let baseline = make_baseline(BaselineKind::Zero, &train_set).unwrap();
    let (eps, delta) = (0.02, 0.6);
    let dag = InterpretabilityDag::with_default_names(
        3,
        vec![DagEdge { src: 2, dst: 0, eps, delta }, DagEdge { src: 0, dst: 1, eps, delta }],
        "user",
    )
    .unwrap();
    let m = 16;
    let ecfg = EvalConfig { m, batches: 4, perturbations: 0, ..Default::default() };
    let before = evaluate(&reference, &test_set, &baseline, Some(&dag), &PathSource::Linear, None, &ecfg).unwrap();
    // train against a slightly raised lower bound so held-out gaps clear eps
    let mut train_dag = dag.clone();
    for e in &mut train_dag.edges {
        e.eps = 2.0 * eps;
    }
    let exs = examples(&train_set, &baseline, &PathSource::Linear, m).unwrap();
    let tcfg = TrainConfig {
        epochs: 40,
        batch_size: 20,
        eta: 0.2,
        lambda: LambdaSchedule::Fixed { value: 0.9 },
        seed: 5,
        ..Default::default()
    };
    let (model, _) = train(&reference, &exs, &train_dag, &tcfg).unwrap();
    let after = evaluate(&model, &test_set, &baseline, Some(&dag), &PathSource::Linear, Some(&reference), &ecfg).unwrap();
    let elapsed = start.elapsed();
    let sat0 = before.dag_satisfaction_rate.unwrap();
    let sat = after.dag_satisfaction_rate.unwrap();
    let degradation = after.relative_accuracy_delta.unwrap();
    outcome(
        sat0 < 1.0 && sat >= C11_MIN_SATISFACTION && degradation <= C11_MAX_DEGRADATION && elapsed < C11_BUDGET,
        format!(
            "held-out satisfaction {sat0:.3} -> {sat:.3} (target >= {C11_MIN_SATISFACTION}), relative MSE change {:+.2}% (target <= {:.0}%), {elapsed:.1?}",
            100.0 * degradation,
            100.0 * C11_MAX_DEGRADATION
        ),
    )
}

fn c12_oracle_value() -> Outcome {
    let t = 4;
    let data = banana_dataset(200, t, 11).unwrap();
    let (train_set, test_set) = data.split(0.5).unwrap();
    let (model, _) = train_baseline(&ElmanParams::init(8, 2, 2), &train_set, 400, 20, 0.3, 1).unwrap();
    let assessor = DensityAssessor::fit(&train_set.inputs()).unwrap();
    let baseline = make_baseline(BaselineKind::Zero, &train_set).unwrap();
    let k = 1;
    let pairs: Vec<OraclePair> = train_set.inputs().into_iter().map(|x| (baseline.clone(), x)).collect();
    let ocfg = OracleTrainConfig {
        k,
        epochs: 100,
        batch_size: 16,
        eta: 0.2,
        lambda: LambdaSchedule::Fixed { value: 0.2 },
        seed: 4,
    };
    let (oracle, _) = train_oracle(&OracleParams::init(t, 2, 16, 3), &assessor, &pairs, &ocfg).unwrap();
    let (mut anchor_v, mut mid_v) = (0.0, 0.0);
    for x in test_set.inputs() {
        let a = generate_anchors(&oracle, &baseline, &x, k).unwrap();
        anchor_v += a.iter().map(|p| assessor.score(p)).sum::<f64>() / k as f64;
        mid_v += assessor.score(&baseline.values.add(x.values()).scale(0.5));
    }
    let n = test_set.len() as f64;
    let (anchor_v, mid_v) = (anchor_v / n, mid_v / n);
    let ecfg = EvalConfig { m: 32, perturbations: 8, consistency_samples: 32, ..Default::default() };
    let lin = evaluate(&model, &test_set, &baseline, None, &PathSource::Linear, None, &ecfg)
        .unwrap()
        .attribution_consistency
        .unwrap();
    let orc = evaluate(&model, &test_set, &baseline, None, &PathSource::Oracle { oracle: &oracle, k }, None, &ecfg)
        .unwrap()
        .attribution_consistency
        .unwrap();
    let gain = (orc - lin) / lin;
    let inconsistency_drop = ((1.0 - lin) - (1.0 - orc)) / (1.0 - lin);
    outcome(
        orc > lin && anchor_v > mid_v,
        format!(
            "consistency oracle {orc:.12} vs linear {lin:.12} ({:+.2e}% relative, inconsistency {:+.2e}% reduced); validity anchors {anchor_v:.4} vs midpoints {mid_v:.4}",
            100.0 * gain,
            100.0 * inconsistency_drop
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("simultaneous descent", c1_simultaneous_descent),
        ("conflicting-case identities", c2_conflicting_identities),
        ("parameterization completeness", c3_parameterization),
        ("naive combination interval", c4_naive_interval),
        ("both objectives decrease", c5_both_decrease),
        ("attribution completeness", c6_completeness),
        ("gradient checks", c7_gradient_checks),
        ("normal-approximation calibration", c8_clt),
        ("acyclicity and transitivity", c9_acyclicity),
        ("batch-size noise scaling", c10_noise_scaling),
        ("end-to-end constrained training", c11_end_to_end),
        ("oracle path value", c12_oracle_value),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        println!("criterion {:>2} {:<34} {}  {}", i + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
