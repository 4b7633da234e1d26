//! Two-gradient projection, hinge-interval interpretability loss and the
//! training loop that combines them.
//!
//! Given the task gradient `g1` and the interpretability gradient `g2`,
//!
//! ```text
//! P(g1, g2, lambda) = lambda g1 + (1 - lambda) g2                      if g1 . g2 >= 0
//!                   = lambda g2_perp1 + (1 - lambda) g1_perp2          otherwise
//! g2_perp1 = g2 - (g1 . g2 / |g1|^2) g1,   g1_perp2 = g1 - (g1 . g2 / |g2|^2) g2
//! ```
//!
//! is a direction with positive inner product against both gradients, so the
//! step `theta - eta P` lowers both losses for small `eta`.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribution::{scores_var, AttributionConfig, IntegrationPath};
use crate::dagbuild::InterpretabilityDag;
use crate::error::{ensure, Error, Result};
use crate::ndiff::{self, Array, Var};
use crate::seqmodel::{task_loss_var, ElmanParams, ParamVars, Sample};

/// Negligibility threshold per unit of `sqrt(p)`.
pub const EPS_TERM_SCALE: f64 = 1e-8;

/// `EPS_TERM_SCALE * sqrt(p)` for `p` parameters.
pub fn default_eps_term(p: usize) -> f64 {
    EPS_TERM_SCALE * (p.max(1) as f64).sqrt()
}

/// Two gradients with their inner product and norms recomputed on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    g1: Array,
    g2: Array,
    dot: f64,
    norm1: f64,
    norm2: f64,
}

impl GradientPair {
    pub fn new(g1: Array, g2: Array) -> Result<Self> {
        ensure!(
            g1.len() == g2.len(),
            "gradient lengths differ: {} vs {}",
            g1.len(),
            g2.len()
        );
        ensure!(g1.all_finite() && g2.all_finite(), "gradients must be finite");
        let (n1, n2) = (g1.len(), g2.len());
        let g1 = g1.reshaped(&[n1]);
        let g2 = g2.reshaped(&[n2]);
        let dot = g1.dot(&g2);
        let norm1 = g1.norm();
        let norm2 = g2.norm();
        Ok(Self {
            g1,
            g2,
            dot,
            norm1,
            norm2,
        })
    }

    pub fn from_slices(g1: &[f64], g2: &[f64]) -> Result<Self> {
        Self::new(Array::vector(g1.to_vec()), Array::vector(g2.to_vec()))
    }

    pub fn g1(&self) -> &Array {
        &self.g1
    }

    pub fn g2(&self) -> &Array {
        &self.g2
    }

    pub fn dot(&self) -> f64 {
        self.dot
    }

    pub fn norm1(&self) -> f64 {
        self.norm1
    }

    pub fn norm2(&self) -> f64 {
        self.norm2
    }

    pub fn len(&self) -> usize {
        self.g1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g1.is_empty()
    }

    /// `g2 - (g1.g2 / |g1|^2) g1`.
    pub fn g2_perp1(&self) -> Array {
        reject(&self.g2, &self.g1, self.dot, self.norm1)
    }

    /// `g1 - (g1.g2 / |g2|^2) g2`.
    pub fn g1_perp2(&self) -> Array {
        reject(&self.g1, &self.g2, self.dot, self.norm2)
    }
}

// Component of `g` orthogonal to `h`. A second Gram-Schmidt pass removes the
// rounding residue that the first leaves along `h` when `g` and `h` are
// nearly parallel.
fn reject(g: &Array, h: &Array, dot: f64, norm_h: f64) -> Array {
    let hh = norm_h * norm_h;
    let mut out = g.clone();
    out.axpy(-dot / hh, h);
    let residue = out.dot(h);
    out.axpy(-residue / hh, h);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Case {
    Aligned,
    Conflicting,
    MaxConflict,
    G1Negligible,
    G2Negligible,
}

impl Case {
    pub fn is_terminal(self) -> bool {
        !matches!(self, Case::Aligned | Case::Conflicting)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Case::Aligned => "aligned",
            Case::Conflicting => "conflicting",
            Case::MaxConflict => "max-conflict",
            Case::G1Negligible => "g1-negligible",
            Case::G2Negligible => "g2-negligible",
        }
    }
}

/// Negligible norms first, then exact opposition, then the sign of `g1.g2`.
pub fn classify_case(pair: &GradientPair, eps_term: f64) -> Case {
    assert!(eps_term > 0.0, "eps_term must be positive");
    if pair.norm1 < eps_term {
        Case::G1Negligible
    } else if pair.norm2 < eps_term {
        Case::G2Negligible
    } else if pair.dot <= -(1.0 - 1e-12) * pair.norm1 * pair.norm2 {
        Case::MaxConflict
    } else if pair.dot >= 0.0 {
        Case::Aligned
    } else {
        Case::Conflicting
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub direction: Array,
    pub case: Case,
    pub lambda: f64,
    /// `v . g1`
    pub dot_g1: f64,
    /// `v . g2`
    pub dot_g2: f64,
    pub g2_perp1: Option<Array>,
    pub g1_perp2: Option<Array>,
}

/// The projected direction; terminal cases are a contract violation.
pub fn project(pair: &GradientPair, lambda: f64) -> Result<ProjectionResult> {
    project_with(pair, lambda, default_eps_term(pair.len()))
}

pub fn project_with(pair: &GradientPair, lambda: f64, eps_term: f64) -> Result<ProjectionResult> {
    ensure!(lambda > 0.0 && lambda < 1.0, "lambda must lie in (0, 1), got {lambda}");
    ensure!(eps_term > 0.0, "eps_term must be positive");
    let case = classify_case(pair, eps_term);
    ensure!(!case.is_terminal(), "projection undefined in terminal case {}", case.as_str());
    Ok(projection_for_case(pair, lambda, case))
}

fn projection_for_case(pair: &GradientPair, lambda: f64, case: Case) -> ProjectionResult {
    let (direction, g2_perp1, g1_perp2) = match case {
        Case::Aligned => {
            let mut v = pair.g1.scale(lambda);
            v.axpy(1.0 - lambda, &pair.g2);
            (v, None, None)
        }
        Case::Conflicting => {
            let p21 = pair.g2_perp1();
            let p12 = pair.g1_perp2();
            let mut v = p21.scale(lambda);
            v.axpy(1.0 - lambda, &p12);
            (v, Some(p21), Some(p12))
        }
        Case::G1Negligible => (pair.g2.clone(), None, None),
        Case::G2Negligible => (pair.g1.clone(), None, None),
        Case::MaxConflict => (Array::zeros(&[pair.len()]), None, None),
    };
    ProjectionResult {
        dot_g1: direction.dot(&pair.g1),
        dot_g2: direction.dot(&pair.g2),
        direction,
        case,
        lambda,
        g2_perp1,
        g1_perp2,
    }
}

/// Update direction for any case: the projection when it is defined, the
/// surviving gradient when the other is negligible, zero on exact opposition.
pub fn step_direction(pair: &GradientPair, lambda: f64, eps_term: f64) -> ProjectionResult {
    let case = classify_case(pair, eps_term);
    projection_for_case(pair, lambda, case)
}

/// `lambda g1 + (1 - lambda) g2`.
pub fn naive_combination(pair: &GradientPair, lambda: f64) -> Array {
    let mut v = pair.g1.scale(lambda);
    v.axpy(1.0 - lambda, &pair.g2);
    v
}

/// Open interval of `lambda` for which the naive combination descends on both.
///
/// Returns `(0, 1)` when the gradients do not conflict.
pub fn naive_feasible_interval(pair: &GradientPair) -> (f64, f64) {
    if pair.dot >= 0.0 {
        return (0.0, 1.0);
    }
    let a = pair.norm1 * pair.norm1;
    let b = pair.norm2 * pair.norm2;
    (-pair.dot / (a - pair.dot), b / (b - pair.dot))
}

/// `(lambda, eta)` with `eta P(g1, g2, lambda) = alpha g1 + beta g2`.
///
/// Errors when the target is not a simultaneous-descent direction.
pub fn recover_parameters(pair: &GradientPair, alpha: f64, beta: f64) -> Result<(f64, f64)> {
    ensure!(alpha > 0.0 && beta > 0.0, "alpha and beta must be positive");
    let a = pair.norm1 * pair.norm1;
    let b = pair.norm2 * pair.norm2;
    let dot = pair.dot;
    let (lambda, eta) = if dot >= 0.0 {
        (alpha / (alpha + beta), alpha + beta)
    } else {
        // coefficients of g1 and g2:
        //   eta (1 - lambda - lambda dot / a) = alpha
        //   eta (lambda - (1 - lambda) dot / b) = beta
        let lambda = (beta * a * b + alpha * a * dot) / ((alpha + beta) * a * b + dot * (alpha * a + beta * b));
        let eta = alpha * a / (a - lambda * (a + dot));
        (lambda, eta)
    };
    ensure!(
        lambda > 0.0 && lambda < 1.0 && eta > 0.0,
        "target lies outside the simultaneous-descent cone (lambda {lambda}, eta {eta})"
    );
    Ok((lambda, eta))
}

/// Per-edge gaps and penalties for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePenaltyReport {
    /// `d_{u,v}`: batch mean of `H_u - H_v`, in DAG edge order.
    pub gaps: Vec<f64>,
    pub penalties: Vec<f64>,
    /// Mean penalty over edges.
    pub total: f64,
}

/// Hinge-interval loss `mean_e [max(eps - d, 0) + max(d - delta, 0)]` on the graph.
///
/// `scores` is `[B, d]`. Returns `(total, gaps [E])`.
pub fn interp_loss_var(scores: &Var, dag: &InterpretabilityDag) -> Result<(Var, Var)> {
    let shape = scores.shape().to_vec();
    ensure!(shape.len() == 2 && shape[0] >= 1, "scores must be [B, d] with B >= 1");
    let (bsz, d) = (shape[0], shape[1]);
    let e = dag.edges.len();
    ensure!(e >= 1, "interpretability loss needs at least one edge");
    ensure!(dag.len() == d, "DAG has {} nodes, scores have {d} features", dag.len());
    let mut select = Array::zeros(&[d, e]);
    for (j, edge) in dag.edges.iter().enumerate() {
        ensure!(edge.src < d && edge.dst < d, "edge {}->{} references an unknown feature", edge.src, edge.dst);
        select.set(&[edge.src, j], 1.0);
        select.set(&[edge.dst, j], -1.0);
    }
    let gaps = Var::constant(Array::full(&[1, bsz], 1.0 / bsz as f64))
        .matmul(scores)
        .matmul(&Var::constant(select))
        .reshape(&[e]);
    let eps = Var::constant(Array::vector(dag.edges.iter().map(|x| x.eps).collect()));
    let delta = Var::constant(Array::vector(dag.edges.iter().map(|x| x.delta).collect()));
    let penalties = eps.sub(&gaps).relu().add(&gaps.sub(&delta).relu());
    Ok((penalties.mean(), gaps))
}

/// Hinge-interval loss on plain per-sample scores `[B, d]`.
pub fn interp_loss(scores: &Array, dag: &InterpretabilityDag) -> Result<EdgePenaltyReport> {
    let _g = ndiff::no_grad();
    let (total, gaps) = interp_loss_var(&Var::constant(scores.clone()), dag)?;
    let gaps = gaps.value().data().to_vec();
    let penalties = gaps
        .iter()
        .zip(&dag.edges)
        .map(|(&g, e)| (e.eps - g).max(0.0) + (g - e.delta).max(0.0))
        .collect();
    Ok(EdgePenaltyReport {
        gaps,
        penalties,
        total: total.item(),
    })
}

/// Rule for the trade-off parameter over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LambdaSchedule {
    Fixed { value: f64 },
    /// `from + (to - from) min(step, steps) / steps`.
    Linear { from: f64, to: f64, steps: usize },
    /// `|g2| / (|g1| + |g2|)` clamped to `[0.05, 0.95]`.
    Dynamic,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Fixed { value: 0.5 }
    }
}

const LAMBDA_CLAMP: (f64, f64) = (0.05, 0.95);

impl LambdaSchedule {
    pub fn value(&self, step: usize, pair: Option<&GradientPair>) -> f64 {
        let raw = match *self {
            LambdaSchedule::Fixed { value } => value,
            LambdaSchedule::Linear { from, to, steps } => {
                if steps == 0 {
                    to
                } else {
                    from + (to - from) * step.min(steps) as f64 / steps as f64
                }
            }
            LambdaSchedule::Dynamic => {
                let (n1, n2) = pair.map_or((1.0, 1.0), |p| (p.norm1, p.norm2));
                if n1 + n2 > 0.0 {
                    (n2 / (n1 + n2)).clamp(LAMBDA_CLAMP.0, LAMBDA_CLAMP.1)
                } else {
                    0.5
                }
            }
        };
        if raw > 0.0 && raw < 1.0 {
            raw
        } else {
            let clamped = if raw.is_nan() { 0.5 } else { raw.clamp(LAMBDA_CLAMP.0, LAMBDA_CLAMP.1) };
            log::warn!("lambda {raw} outside (0, 1); using {clamped}");
            clamped
        }
    }
}

impl FromStr for LambdaSchedule {
    type Err = Error;

    /// `fixed:0.5`, `linear:0.9:0.1:100`, `dynamic`, or a bare number.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| {
            t.parse::<f64>()
                .map_err(|_| Error::contract(format!("bad number `{t}` in lambda schedule `{s}`")))
        };
        match parts.as_slice() {
            ["dynamic"] => Ok(LambdaSchedule::Dynamic),
            ["fixed", v] => Ok(LambdaSchedule::Fixed { value: num(v)? }),
            ["linear", a, b, n] => Ok(LambdaSchedule::Linear {
                from: num(a)?,
                to: num(b)?,
                steps: n
                    .parse()
                    .map_err(|_| Error::contract(format!("bad step count in lambda schedule `{s}`")))?,
            }),
            [v] => Ok(LambdaSchedule::Fixed { value: num(v)? }),
            _ => Err(Error::contract(format!("unrecognised lambda schedule `{s}`"))),
        }
    }
}

/// One row of training history. `case` is `None` for the closing evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task_loss: f64,
    pub interp_loss: f64,
    pub case: Option<Case>,
    pub lambda: f64,
    pub dot_g1: f64,
    pub dot_g2: f64,
    pub eta: f64,
}

/// A training example with its integration path.
#[derive(Debug, Clone)]
pub struct Example {
    pub sample: Sample,
    pub path: IntegrationPath,
}

/// Per-sample scores stacked to `[B, d]` on the graph of `pv`.
pub fn batch_scores_var(pv: &ParamVars, batch: &[&Example], config: &AttributionConfig) -> Result<Var> {
    ensure!(!batch.is_empty(), "empty batch");
    let d = batch[0].sample.x.features();
    let rows = batch
        .iter()
        .map(|ex| scores_var(pv, &ex.sample.x, &ex.path, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(Var::concat(&rows, &[batch.len(), d]))
}

/// Task loss and interpretability loss on `batch`, without gradients.
pub fn evaluate_losses(
    model: &ElmanParams,
    batch: &[&Example],
    dag: &InterpretabilityDag,
    config: &AttributionConfig,
) -> Result<(f64, f64)> {
    let pv = model.vars(false);
    let samples: Vec<Sample> = batch.iter().map(|e| e.sample.clone()).collect();
    let task = {
        let _g = ndiff::no_grad();
        task_loss_var(&pv, &samples)?.item()
    };
    let interp = if dag.edges.is_empty() {
        0.0
    } else {
        interp_loss_var(&batch_scores_var(&pv, batch, config)?, dag)?.0.item()
    };
    Ok((task, interp))
}

/// Both losses and their flat parameter gradients at `model`.
pub fn loss_gradients(
    model: &ElmanParams,
    batch: &[&Example],
    dag: &InterpretabilityDag,
    config: &AttributionConfig,
) -> Result<(f64, f64, GradientPair)> {
    let pv = model.vars(true);
    let samples: Vec<Sample> = batch.iter().map(|e| e.sample.clone()).collect();
    let task = task_loss_var(&pv, &samples)?;
    let g1 = pv.flat_grad(&task)?;
    let (interp, g2) = if dag.edges.is_empty() {
        (0.0, Array::zeros(&[model.num_params()]))
    } else {
        let (h, _) = interp_loss_var(&batch_scores_var(&pv, batch, config)?, dag)?;
        (h.item(), pv.flat_grad(&h)?)
    };
    Ok((task.item(), interp, GradientPair::new(g1, g2)?))
}

/// One projected step `theta - eta v`.
///
/// `lambda` comes from `schedule` at `step`, after the gradients are known.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &ElmanParams,
    batch: &[&Example],
    dag: &InterpretabilityDag,
    config: &AttributionConfig,
    schedule: &LambdaSchedule,
    step: usize,
    eta: f64,
    eps_term: f64,
) -> Result<(ElmanParams, StepRecord)> {
    ensure!(eta >= 0.0 && eta.is_finite(), "step size must be non-negative, got {eta}");
    let (task, interp, pair) = match loss_gradients(model, batch, dag, config) {
        Ok(v) => v,
        Err(Error::NumericalOverflow { primitive }) => {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite gradient (first at `{primitive}`)"),
            })
        }
        Err(e) => return Err(e),
    };
    if !task.is_finite() || !interp.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("task loss {task}, interpretability loss {interp}"),
        });
    }
    let lambda = schedule.value(step, Some(&pair));
    let proj = step_direction(&pair, lambda, eps_term);
    if proj.case == Case::MaxConflict {
        log::warn!("step {step}: exactly opposing gradients, update skipped");
    }
    let mut flat = model.to_flat();
    flat.axpy(-eta, &proj.direction);
    let record = StepRecord {
        step,
        task_loss: task,
        interp_loss: interp,
        case: Some(proj.case),
        lambda,
        dot_g1: proj.dot_g1,
        dot_g2: proj.dot_g2,
        eta,
    };
    Ok((model.with_flat(&flat), record))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub lambda: LambdaSchedule,
    pub eps_term_scale: f64,
    pub seed: u64,
    pub attribution: AttributionConfig,
    /// Write `model_step{N}.json` every this many steps.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            eta: 0.05,
            lambda: LambdaSchedule::default(),
            eps_term_scale: EPS_TERM_SCALE,
            seed: 0,
            attribution: AttributionConfig::default(),
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

/// Batches of example indices for one epoch, shuffled by `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Runs projected training. The history ends with an evaluation row
/// (`case = None`) holding both losses at the final parameters over the
/// whole dataset as one batch.
pub fn train(
    model: &ElmanParams,
    data: &[Example],
    dag: &InterpretabilityDag,
    config: &TrainConfig,
) -> Result<(ElmanParams, Vec<StepRecord>)> {
    ensure!(!data.is_empty(), "training needs at least one example");
    ensure!(config.batch_size >= 1, "batch size must be positive");
    let d = model.features();
    ensure!(dag.len() == d, "DAG has {} nodes, model has {d} features", dag.len());
    for (i, ex) in data.iter().enumerate() {
        ensure!(ex.sample.x.features() == d, "example {i} has {} features, expected {d}", ex.sample.x.features());
    }
    let eps_term = config.eps_term_scale * (model.num_params() as f64).sqrt();
    let mut current = model.clone();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        for idx in epoch_batches(data.len(), config.batch_size, config.seed, epoch) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            let (next, rec) = train_step(
                &current,
                &batch,
                dag,
                &config.attribution,
                &config.lambda,
                step,
                config.eta,
                eps_term,
            )?;
            log::debug!(
                "step {step}: task {:.6} interp {:.6} {}",
                rec.task_loss,
                rec.interp_loss,
                rec.case.map_or("", Case::as_str)
            );
            current = next;
            history.push(rec);
            step += 1;
            if let (Some(every), Some(dir)) = (config.checkpoint_every, &config.checkpoint_dir) {
                if every > 0 && step % every == 0 {
                    current.save(&dir.join(format!("model_step{step}.json")))?;
                }
            }
        }
    }
    let all: Vec<&Example> = data.iter().collect();
    let (task, interp) = evaluate_losses(&current, &all, dag, &config.attribution)?;
    history.push(StepRecord {
        step,
        task_loss: task,
        interp_loss: interp,
        case: None,
        lambda: f64::NAN,
        dot_g1: f64::NAN,
        dot_g2: f64::NAN,
        eta: 0.0,
    });
    Ok((current, history))
}

/// History as CSV `step,task_loss,interp_loss,case,lambda,dot_g1,dot_g2,eta`.
pub fn history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,task_loss,interp_loss,case,lambda,dot_g1,dot_g2,eta\n");
    for r in history {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.step,
            r.task_loss,
            r.interp_loss,
            r.case.map_or("final", Case::as_str),
            r.lambda,
            r.dot_g1,
            r.dot_g2,
            r.eta
        )
        .unwrap();
    }
    out
}

/// Spread of the projected direction under gradient noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProbe {
    pub batch: usize,
    /// Summed per-coordinate variance of `P` at batch size `B`.
    pub variance_b: f64,
    /// The same at `2B`.
    pub variance_2b: f64,
    pub ratio: f64,
}

/// Summed per-coordinate sample variance of `P(g1 + n1, g2 + n2, lambda)` with
/// `n_i ~ N(0, sigma^2 / batch)` per coordinate.
pub fn projection_variance(
    pair: &GradientPair,
    lambda: f64,
    sigma: f64,
    batch: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    ensure!(batch >= 1 && draws >= 2, "need batch >= 1 and at least 2 draws");
    ensure!(sigma > 0.0, "noise scale must be positive");
    let p = pair.len();
    let eps_term = default_eps_term(p);
    let noise = Normal::new(0.0, sigma / (batch as f64).sqrt()).expect("valid normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    for k in 0..draws {
        let mut g1 = pair.g1.clone();
        let mut g2 = pair.g2.clone();
        for v in g1.data_mut().iter_mut().chain(g2.data_mut().iter_mut()) {
            *v += noise.sample(&mut rng);
        }
        let v = step_direction(&GradientPair::new(g1, g2)?, lambda, eps_term).direction;
        // Welford update per coordinate
        for (i, &x) in v.data().iter().enumerate() {
            let delta = x - mean[i];
            mean[i] += delta / (k + 1) as f64;
            m2[i] += delta * (x - mean[i]);
        }
    }
    Ok(m2.iter().sum::<f64>() / (draws - 1) as f64)
}

/// Variance of `P` at batch sizes `B` and `2B` and their ratio.
pub fn noise_probe(
    pair: &GradientPair,
    lambda: f64,
    sigma: f64,
    batch: usize,
    draws: usize,
    seed: u64,
) -> Result<NoiseProbe> {
    let variance_b = projection_variance(pair, lambda, sigma, batch, draws, seed)?;
    let variance_2b = projection_variance(pair, lambda, sigma, 2 * batch, draws, seed.wrapping_add(1))?;
    Ok(NoiseProbe {
        batch,
        variance_b,
        variance_2b,
        ratio: variance_b / variance_2b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dagbuild::DagEdge;

    fn pair(a: &[f64], b: &[f64]) -> GradientPair {
        GradientPair::from_slices(a, b).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn case_examples() {
        let e = 1e-6;
        assert_eq!(classify_case(&pair(&[1.0, 2.0], &[-2.0, -4.0]), e), Case::MaxConflict);
        assert_eq!(classify_case(&pair(&[e / 2.0, 0.0], &[1.0, 0.0]), e), Case::G1Negligible);
        assert_eq!(classify_case(&pair(&[1.0, 0.0], &[0.0, e / 2.0]), e), Case::G2Negligible);
        assert_eq!(classify_case(&pair(&[3.0, 0.0], &[0.0, 5.0]), e), Case::Aligned);
        assert_eq!(classify_case(&pair(&[1.0, 0.0], &[-1.0, 1.0]), e), Case::Conflicting);
        // negligibility wins over opposition
        assert_eq!(classify_case(&pair(&[e / 4.0, 0.0], &[-1.0, 0.0]), e), Case::G1Negligible);
    }

    #[test]
    fn orthogonal_unit_projection() {
        let r = project(&pair(&[1.0, 0.0], &[0.0, 1.0]), 0.25).unwrap();
        assert_eq!(r.case, Case::Aligned);
        assert!(close(r.direction.data(), &[0.25, 0.75], 1e-15));
        assert!((r.dot_g1 - 0.25).abs() < 1e-15 && (r.dot_g2 - 0.75).abs() < 1e-15);
    }

    #[test]
    fn conflicting_projection_by_hand() {
        let r = project(&pair(&[1.0, 0.0], &[-1.0, 1.0]), 0.5).unwrap();
        assert_eq!(r.case, Case::Conflicting);
        assert!(close(r.g2_perp1.as_ref().unwrap().data(), &[0.0, 1.0], 1e-15));
        assert!(close(r.g1_perp2.as_ref().unwrap().data(), &[0.5, 0.5], 1e-15));
        assert!(close(r.direction.data(), &[0.25, 0.75], 1e-15));
        assert!((r.dot_g1 - 0.25).abs() < 1e-15);
        assert!((r.dot_g2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn equal_gradients_give_themselves() {
        let g = [0.3, -1.2, 2.0];
        for lam in [0.1, 0.5, 0.9] {
            let r = project(&pair(&g, &g), lam).unwrap();
            assert!(close(r.direction.data(), &g, 1e-15));
        }
    }

    #[test]
    fn terminal_and_bad_lambda_rejected() {
        assert!(project(&pair(&[1.0, 0.0], &[-1.0, 0.0]), 0.5).is_err());
        assert!(project(&pair(&[1.0, 0.0], &[0.0, 1.0]), 0.0).is_err());
        assert!(project(&pair(&[1.0, 0.0], &[0.0, 1.0]), 1.0).is_err());
        assert!(GradientPair::from_slices(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn naive_interval_examples() {
        let p = pair(&[1.0, 0.0], &[-0.5, 0.5]);
        let (lo, hi) = naive_feasible_interval(&p);
        assert!((lo - 1.0 / 3.0).abs() < 1e-15 && (hi - 0.5).abs() < 1e-15);
        let v = naive_combination(&p, 0.4);
        assert!(close(v.data(), &[0.1, 0.3], 1e-15));
        assert!(v.dot(p.g1()) > 0.0 && v.dot(p.g2()) > 0.0);
        let v = naive_combination(&p, 0.3);
        assert!((v.dot(p.g1()) + 0.05).abs() < 1e-15);
        assert_eq!(naive_feasible_interval(&pair(&[1.0, 0.0], &[1.0, 1.0])), (0.0, 1.0));
    }

    /// Solves the 2x2 coefficient system by Cramer's rule.
    fn cramer_oracle(p: &GradientPair, alpha: f64, beta: f64) -> (f64, f64) {
        // unknowns x = eta * lambda, y = eta * (1 - lambda)
        //   x * (-dot / a) + y       = alpha
        //   x + y * (-dot / b)       = beta
        let a = p.norm1() * p.norm1();
        let b = p.norm2() * p.norm2();
        let (m11, m12, m21, m22) = (-p.dot() / a, 1.0, 1.0, -p.dot() / b);
        let det = m11 * m22 - m12 * m21;
        let x = (alpha * m22 - m12 * beta) / det;
        let y = (m11 * beta - m21 * alpha) / det;
        (x / (x + y), x + y)
    }

    #[test]
    fn converse_matches_cramer_solution() {
        let p = pair(&[1.0, 0.2, -0.3], &[-0.4, 1.0, 0.5]);
        assert!(p.dot() < 0.0);
        for (alpha, beta) in [(1.0, 1.0), (1.0, 1.5), (2.0, 0.7)] {
            let (lam, eta) = recover_parameters(&p, alpha, beta).unwrap();
            let (lo, eo) = cramer_oracle(&p, alpha, beta);
            assert!((lam - lo).abs() < 1e-12 && (eta - eo).abs() < 1e-12);
            let v = project(&p, lam).unwrap().direction.scale(eta);
            let mut w = p.g1().scale(alpha);
            w.axpy(beta, p.g2());
            assert!(v.sub(&w).norm() <= 1e-12 * w.norm());
        }
        // 0.3 g1 + 2 g2 leaves the descent cone for this pair
        assert!(recover_parameters(&p, 0.3, 2.0).is_err());
        let aligned = pair(&[1.0, 0.0], &[0.5, 1.0]);
        assert_eq!(recover_parameters(&aligned, 1.0, 3.0).unwrap(), (0.25, 4.0));
    }

    #[test]
    fn converse_rejects_non_descent_targets() {
        // w = g1 + 0.01 g2 has w . g2 < 0 for this pair
        let p = pair(&[1.0, 0.0], &[-1.0, 0.1]);
        assert!(recover_parameters(&p, 1.0, 0.01).is_err());
    }

    fn one_edge() -> InterpretabilityDag {
        InterpretabilityDag::with_default_names(
            2,
            vec![DagEdge { src: 0, dst: 1, eps: 0.05, delta: 0.3 }],
            "user",
        )
        .unwrap()
    }

    #[test]
    fn hinge_examples() {
        let dag = one_edge();
        let at = |gap: f64| {
            let s = Array::matrix(2, 2, vec![0.5 + gap, 0.5, 0.5 + gap, 0.5]);
            interp_loss(&s, &dag).unwrap().total
        };
        assert_eq!(at(0.1), 0.0);
        assert!((at(0.02) - 0.03).abs() < 1e-12);
        assert!((at(0.4) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn hinge_gradient_matches_differences() {
        let dag = InterpretabilityDag::with_default_names(
            3,
            vec![
                DagEdge { src: 0, dst: 1, eps: 0.2, delta: 0.3 },
                DagEdge { src: 1, dst: 2, eps: 0.01, delta: 0.05 },
            ],
            "user",
        )
        .unwrap();
        let s = Array::matrix(2, 3, vec![0.6, 0.5, 0.3, 0.4, 0.45, 0.2]);
        let g = ndiff::grad(|v| interp_loss_var(v, &dag).unwrap().0, &s).unwrap();
        let fd = ndiff::finite_diff(|a| Ok(interp_loss(a, &dag)?.total), &s, 1e-7).unwrap();
        for (a, b) in g.data().iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3), "{a} vs {b}");
        }
    }

    #[test]
    fn schedules() {
        assert_eq!(LambdaSchedule::Fixed { value: 0.5 }.value(7, None), 0.5);
        let lin = LambdaSchedule::Linear { from: 0.9, to: 0.1, steps: 100 };
        assert!((lin.value(50, None) - 0.5).abs() < 1e-15);
        assert!((lin.value(500, None) - 0.1).abs() < 1e-15);
        let p = pair(&[3.0, 0.0], &[0.0, 1.0]);
        assert_eq!(LambdaSchedule::Dynamic.value(0, Some(&p)), 0.25);
        let p = pair(&[1.0, 0.0], &[0.0, 0.0]);
        assert_eq!(LambdaSchedule::Dynamic.value(0, Some(&p)), 0.05);
        assert_eq!(LambdaSchedule::Fixed { value: 1.5 }.value(0, None), 0.95);
        assert_eq!("linear:0.9:0.1:100".parse::<LambdaSchedule>().unwrap(), lin);
        assert_eq!("0.3".parse::<LambdaSchedule>().unwrap(), LambdaSchedule::Fixed { value: 0.3 });
        assert!("linear:x".parse::<LambdaSchedule>().is_err());
    }

    #[test]
    fn noise_variance_halves_with_double_batch() {
        let p = pair(&[1.0, 0.5, -0.2, 0.3], &[-0.3, 1.0, 0.4, 0.1]);
        let probe = noise_probe(&p, 0.5, 0.1, 8, 4000, 3).unwrap();
        assert!(probe.ratio > 1.6 && probe.ratio < 2.4, "{probe:?}");
    }
}
