//! Temporal integrated gradients (TIG) and per-feature satisfaction scores.
//!
//! For a path `q_1 = X' .. q_M = X`, the attribution of input cell `(i, k)`
//! toward output `t` is the Riemann sum
//!
//! ```text
//! TIG_{i,k}[t] = sum_j dF(q_j)[t] / dq_{j,i,k} * (q_{j+1,i,k} - q_{j,i,k})
//! ```
//!
//! and the satisfaction score of feature `k` is
//!
//! ```text
//! h_{t,k} = | F(X)[t] - F(X')[t] - sum_{i<=t} TIG_{i,k}[t] |
//! H_k     = mean_t 1 / (1 + beta * h_{t,k})
//! ```
//!
//! All `*_var` functions keep the result on the graph so that parameter
//! gradients can flow through the input gradients.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ndiff::{self, no_grad, Array, Var};
use crate::seqmodel::{Baseline, ElmanParams, ParamVars, TimeSeries};

pub const DEFAULT_BETA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathProvenance {
    Linear,
    Oracle,
}

/// Points `q_1..q_M` from the baseline to the input.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationPath {
    points: Vec<Array>,
    provenance: PathProvenance,
}

impl IntegrationPath {
    pub fn new(points: Vec<Array>, provenance: PathProvenance) -> Result<Self> {
        ensure!(points.len() >= 2, "integration path needs M >= 2 points, got {}", points.len());
        let shape = points[0].shape().to_vec();
        ensure!(shape.len() == 2, "path points must be T x d arrays");
        ensure!(
            points.iter().all(|p| p.shape() == shape.as_slice()),
            "path points differ in shape"
        );
        Ok(Self { points, provenance })
    }

    pub fn points(&self) -> &[Array] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn provenance(&self) -> PathProvenance {
        self.provenance
    }

    pub fn start(&self) -> &Array {
        &self.points[0]
    }

    pub fn end(&self) -> &Array {
        self.points.last().expect("path has points")
    }

    /// Sum of segment lengths.
    pub fn length(&self) -> f64 {
        self.points.windows(2).map(|w| w[1].sub(&w[0]).norm()).sum()
    }

    /// Per-point weights `W_j` such that `TIG = sum_j grad F(q_j) * W_j`.
    fn point_weights(&self, rule: RiemannRule) -> Vec<Option<Array>> {
        let m = self.points.len();
        let steps: Vec<Array> = self.points.windows(2).map(|w| w[1].sub(&w[0])).collect();
        (0..m)
            .map(|j| match rule {
                RiemannRule::Left => steps.get(j).cloned(),
                RiemannRule::Trapezoid => {
                    let prev = j.checked_sub(1).map(|p| &steps[p]);
                    let next = steps.get(j);
                    match (prev, next) {
                        (Some(a), Some(b)) => Some(a.add(b).scale(0.5)),
                        (Some(a), None) => Some(a.scale(0.5)),
                        (None, Some(b)) => Some(b.scale(0.5)),
                        (None, None) => None,
                    }
                }
            })
            .collect()
    }
}

/// Straight line `q_j = X' + (j - 1)/(M - 1) (X - X')`.
pub fn linear_path(x: &TimeSeries, baseline: &Baseline, m: usize) -> Result<IntegrationPath> {
    ensure!(m >= 2, "linear path needs M >= 2, got {m}");
    baseline.check_pairs_with(x)?;
    let start = &baseline.values;
    let delta = x.values().sub(start);
    let mut points: Vec<Array> = (0..m)
        .map(|j| {
            let mut p = start.clone();
            p.axpy(j as f64 / (m - 1) as f64, &delta);
            p
        })
        .collect();
    // exact endpoint even when the scaling above rounds
    points[m - 1] = x.values().clone();
    IntegrationPath::new(points, PathProvenance::Linear)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiemannRule {
    #[default]
    Left,
    Trapezoid,
}

/// How cumulative attributions are differentiated during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TigMethod {
    /// One reverse sweep per output with the input gradient kept on the graph.
    Reverse,
    /// Forward tangents per feature; gives only the cumulative sums, faster.
    #[default]
    Tangent,
}

/// `values[t][i, k]`: attribution of input `(i, k)` toward output `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionTensor {
    pub values: Array,
}

impl AttributionTensor {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn get(&self, t: usize, i: usize, k: usize) -> f64 {
        self.values.get(&[t, i, k])
    }

    /// `[T, d]` array of `sum_{i <= t} TIG_{i,k}[t]`.
    pub fn cumulative(&self) -> Array {
        let (t_len, d) = (self.len(), self.features());
        let mut out = Array::zeros(&[t_len, d]);
        for t in 0..t_len {
            for k in 0..d {
                let s: f64 = (0..=t).map(|i| self.get(t, i, k)).sum();
                out.set(&[t, k], s);
            }
        }
        out
    }

    /// `max_t | sum_{i,k} TIG[t][i,k] - (F(X)[t] - F(X')[t]) |`.
    pub fn completeness_error(&self, fx: &[f64], fbase: &[f64]) -> f64 {
        let (t_len, d) = (self.len(), self.features());
        (0..t_len)
            .map(|t| {
                let block = &self.values.data()[t * t_len * d..(t + 1) * t_len * d];
                let total: f64 = block.iter().sum();
                (total - (fx[t] - fbase[t])).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Full attribution tensor on the graph, `[T, T, d]`, by nested reverse sweeps.
pub fn tig_var(pv: &ParamVars, path: &IntegrationPath, rule: RiemannRule) -> Result<Var> {
    let shape = path.start().shape().to_vec();
    let (t_len, d) = (shape[0], shape[1]);
    let _rec = ndiff::enable_grad();
    let mut per_output: Vec<Option<Var>> = vec![None; t_len];
    for (j, weight) in path.point_weights(rule).into_iter().enumerate() {
        let Some(weight) = weight else { continue };
        let q = Var::leaf(path.points()[j].clone());
        let out = pv.forward(&q);
        let weight = Var::constant(weight);
        for (t, acc) in per_output.iter_mut().enumerate() {
            let seed = Var::constant(Array::from_fn(&[t_len], |i| if i == t { 1.0 } else { 0.0 }));
            let (g, _) = ndiff::vjp(&out, &seed, std::slice::from_ref(&q), true);
            let g = &g[0];
            if !g.value().all_finite() {
                return Err(Error::OodGradient { point: j + 1 });
            }
            let piece = g.mul(&weight);
            *acc = Some(match acc.take() {
                Some(a) => a.add(&piece),
                None => piece,
            });
        }
    }
    let parts: Vec<Var> = per_output
        .into_iter()
        .map(|p| p.unwrap_or_else(|| Var::constant(Array::zeros(&[t_len, d]))))
        .collect();
    Ok(Var::concat(&parts, &[t_len, t_len, d]))
}

/// `[T, d]` node of `sum_{i<=t} TIG_{i,k}[t]` from a full `[T, T, d]` node.
fn cumulative_from_full(full: &Var) -> Var {
    let s = full.shape();
    let (t_len, d) = (s[0], s[2]);
    let rows: Vec<Var> = (0..t_len)
        .map(|t| {
            let block = full.slice(t * t_len * d, &[t + 1, d]);
            Var::constant(Array::ones(&[1, t + 1])).matmul(&block)
        })
        .collect();
    Var::concat(&rows, &[t_len, d])
}

/// `[T, d]` node of cumulative attributions using the chosen differentiation route.
pub fn cumulative_var(
    pv: &ParamVars,
    path: &IntegrationPath,
    rule: RiemannRule,
    method: TigMethod,
) -> Result<Var> {
    match method {
        TigMethod::Reverse => Ok(cumulative_from_full(&tig_var(pv, path, rule)?)),
        TigMethod::Tangent => {
            let shape = path.start().shape().to_vec();
            let (t_len, d) = (shape[0], shape[1]);
            let mut cols: Vec<Option<Var>> = vec![None; d];
            for (j, weight) in path.point_weights(rule).into_iter().enumerate() {
                let Some(weight) = weight else { continue };
                let dirs: Vec<Var> = (0..d)
                    .map(|k| {
                        Var::constant(Array::from_fn(&[t_len, d], |idx| {
                            if idx % d == k {
                                weight.data()[idx]
                            } else {
                                0.0
                            }
                        }))
                    })
                    .collect();
                let q = Var::constant(path.points()[j].clone());
                let (_, tangents) = pv.forward_tangents(&q, &dirs);
                for (k, tan) in tangents.into_iter().enumerate() {
                    if !tan.value().all_finite() {
                        return Err(Error::OodGradient { point: j + 1 });
                    }
                    cols[k] = Some(match cols[k].take() {
                        Some(a) => a.add(&tan),
                        None => tan,
                    });
                }
            }
            // columns are [T]; assemble [T, d] via a transpose of [d, T]
            let cols: Vec<Var> = cols
                .into_iter()
                .map(|c| c.unwrap_or_else(|| Var::constant(Array::zeros(&[t_len]))))
                .collect();
            Ok(Var::concat(&cols, &[d, t_len]).transpose())
        }
    }
}

/// Left-Riemann attributions for every output.
pub fn tig(model: &ElmanParams, path: &IntegrationPath) -> Result<AttributionTensor> {
    tig_with_rule(model, path, RiemannRule::Left)
}

pub fn tig_with_rule(
    model: &ElmanParams,
    path: &IntegrationPath,
    rule: RiemannRule,
) -> Result<AttributionTensor> {
    ensure!(
        path.start().shape()[1] == model.features(),
        "path has {} features, model expects {}",
        path.start().shape()[1],
        model.features()
    );
    ensure!(
        path.points().iter().all(Array::all_finite),
        "integration path contains non-finite points"
    );
    let pv = model.vars(false);
    let full = tig_var(&pv, path, rule)?;
    Ok(AttributionTensor {
        values: full.value().clone(),
    })
}

/// Residuals and scores for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct SatisfactionReport {
    /// `[T, d]`, all `>= 0`.
    pub residuals: Array,
    /// `[d]`, each in `(0, 1]`.
    pub scores: Array,
    pub beta: f64,
}

/// Scores `H` (`[d]`) and residuals (`[T, d]`) as graph nodes.
pub fn satisfaction_var(
    pv: &ParamVars,
    x: &Var,
    baseline: &Var,
    cumulative: &Var,
    beta: f64,
) -> (Var, Var) {
    let shape = x.shape().to_vec();
    let (t_len, d) = (shape[0], shape[1]);
    let diff = pv.forward(x).sub(&pv.forward(baseline));
    let spread = diff.reshape(&[t_len, 1]).matmul(&Var::constant(Array::ones(&[1, d])));
    let residual = spread.sub(cumulative).abs();
    let agreement = residual.scale(beta).shift(1.0).recip();
    let scores = Var::constant(Array::full(&[1, t_len], 1.0 / t_len as f64))
        .matmul(&agreement)
        .reshape(&[d]);
    (scores, residual)
}

pub fn satisfaction(
    model: &ElmanParams,
    x: &TimeSeries,
    baseline: &Baseline,
    attributions: &AttributionTensor,
    beta: f64,
) -> Result<SatisfactionReport> {
    ensure!(beta > 0.0, "beta must be positive, got {beta}");
    baseline.check_pairs_with(x)?;
    ensure!(
        attributions.len() == x.len() && attributions.features() == x.features(),
        "attribution tensor does not match the series shape"
    );
    let _g = no_grad();
    let pv = model.vars(false);
    let (scores, residual) = satisfaction_var(
        &pv,
        &Var::constant(x.values().clone()),
        &Var::constant(baseline.values.clone()),
        &Var::constant(attributions.cumulative()),
        beta,
    );
    Ok(SatisfactionReport {
        residuals: residual.value().clone(),
        scores: scores.value().clone(),
        beta,
    })
}

/// Settings shared by everything that turns a model into satisfaction scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub beta: f64,
    pub rule: RiemannRule,
    pub method: TigMethod,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            rule: RiemannRule::Left,
            method: TigMethod::Tangent,
        }
    }
}

/// Satisfaction scores `[d]` for one input along a given path, on the graph.
pub fn scores_var(
    pv: &ParamVars,
    x: &TimeSeries,
    path: &IntegrationPath,
    config: &AttributionConfig,
) -> Result<Var> {
    ensure!(config.beta > 0.0, "beta must be positive, got {}", config.beta);
    let cum = cumulative_var(pv, path, config.rule, config.method)?;
    let (scores, _) = satisfaction_var(
        pv,
        &Var::constant(x.values().clone()),
        &Var::constant(path.start().clone()),
        &cum,
        config.beta,
    );
    Ok(scores)
}

/// Satisfaction scores without gradients.
pub fn scores(
    model: &ElmanParams,
    x: &TimeSeries,
    path: &IntegrationPath,
    config: &AttributionConfig,
) -> Result<Array> {
    // parameters are constants, so only the inner input-gradient graph is recorded
    let pv = model.vars(false);
    Ok(scores_var(&pv, x, path, config)?.value().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{forward, input_jacobian};

    fn series(rows: &[&[f64]]) -> TimeSeries {
        TimeSeries::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_path_examples() {
        let x = series(&[&[2.0]]);
        let b = Baseline::zero(1, 1);
        let p = linear_path(&x, &b, 2).unwrap();
        assert_eq!(p.points(), &[Array::zeros(&[1, 1]), x.values().clone()]);
        let p = linear_path(&x, &b, 3).unwrap();
        let vals: Vec<f64> = p.points().iter().map(|q| q.item()).collect();
        assert_eq!(vals, vec![0.0, 1.0, 2.0]);
        assert!(linear_path(&x, &b, 1).is_err());

        let x = series(&[&[0.1, 0.7], &[0.3, -0.9]]);
        let b = Baseline::user(Array::matrix(2, 2, vec![0.2, 0.2, 0.1, 0.3])).unwrap();
        for m in [2, 5, 17] {
            let p = linear_path(&x, &b, m).unwrap();
            assert_eq!(p.start(), &b.values);
            assert_eq!(p.end(), x.values());
        }
    }

    #[test]
    fn linear_model_tig_is_exact() {
        let w = [1.5, -0.5, 2.0];
        let model = ElmanParams::memoryless_linear(&w, 3);
        let x = series(&[&[1.0, 2.0, -1.0], &[0.5, 0.0, 3.0]]);
        let b = Baseline::user(Array::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.1, 0.4, 0.0])).unwrap();
        for m in [2, 4, 9] {
            let a = tig(&model, &linear_path(&x, &b, m).unwrap()).unwrap();
            for t in 0..2 {
                for i in 0..2 {
                    for k in 0..3 {
                        let want = if i == t {
                            w[k] * (x.values().get(&[t, k]) - b.values.get(&[t, k]))
                        } else {
                            0.0
                        };
                        assert!((a.get(t, i, k) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_length_path_gives_zero() {
        let model = ElmanParams::init(3, 2, 1);
        let x = series(&[&[0.4, 0.1], &[0.2, 0.3]]);
        let b = Baseline::user(x.values().clone()).unwrap();
        let a = tig(&model, &linear_path(&x, &b, 6).unwrap()).unwrap();
        assert!(a.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_path_is_jacobian_times_delta() {
        let model = ElmanParams::init(4, 2, 5);
        let x = series(&[&[0.4, 0.1], &[0.2, 0.3], &[-0.6, 0.8]]);
        let b = Baseline::zero(3, 2);
        let a = tig(&model, &linear_path(&x, &b, 2).unwrap()).unwrap();
        let base = TimeSeries::new(b.values.clone()).unwrap();
        let j = input_jacobian(&model, &base).unwrap();
        for t in 0..3 {
            for i in 0..3 {
                for k in 0..2 {
                    let want = j[t].get(&[i, k]) * x.values().get(&[i, k]);
                    assert!((a.get(t, i, k) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn satisfaction_examples() {
        // T = 1, y = 2x, X = 1, X' = 0
        let model = ElmanParams::memoryless_linear(&[2.0], 1);
        let x = series(&[&[1.0]]);
        let b = Baseline::zero(1, 1);
        let a = tig(&model, &linear_path(&x, &b, 2).unwrap()).unwrap();
        let r = satisfaction(&model, &x, &b, &a, 5.0).unwrap();
        assert_eq!(r.scores.data(), &[1.0]);

        let model = ElmanParams::memoryless_linear(&[1.5, 0.5], 1);
        let x = series(&[&[1.0, 1.0]]);
        let b = Baseline::zero(1, 2);
        let a = tig(&model, &linear_path(&x, &b, 2).unwrap()).unwrap();
        let r = satisfaction(&model, &x, &b, &a, 2.0).unwrap();
        assert!((r.residuals.data()[0] - 0.5).abs() < 1e-15);
        assert!((r.residuals.data()[1] - 1.5).abs() < 1e-15);
        assert!((r.scores.data()[0] - 0.5).abs() < 1e-15);
        assert!((r.scores.data()[1] - 0.25).abs() < 1e-15);

        let r = satisfaction(&model, &x, &b, &a, 1e12).unwrap();
        assert!(r.scores.data().iter().all(|&h| h < 1e-11));
        assert!(satisfaction(&model, &x, &b, &a, 0.0).is_err());
    }

    #[test]
    fn tangent_and_reverse_routes_agree() {
        let model = ElmanParams::init(4, 3, 9);
        let x = series(&[&[0.4, 0.1, -0.3], &[0.2, 0.3, 0.5], &[-0.6, 0.8, 0.0], &[1.0, -1.0, 0.2]]);
        let b = Baseline::zero(4, 3);
        let path = linear_path(&x, &b, 7).unwrap();
        let pv = model.vars(false);
        for rule in [RiemannRule::Left, RiemannRule::Trapezoid] {
            let r = cumulative_var(&pv, &path, rule, TigMethod::Reverse).unwrap();
            let t = cumulative_var(&pv, &path, rule, TigMethod::Tangent).unwrap();
            for (a, b) in r.value().data().iter().zip(t.value().data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
        let full = tig(&model, &path).unwrap();
        let r = cumulative_var(&pv, &path, RiemannRule::Left, TigMethod::Reverse).unwrap();
        for (a, b) in r.value().data().iter().zip(full.cumulative().data()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn causal_model_attributes_nothing_to_future_inputs() {
        let model = ElmanParams::init(5, 2, 3);
        let x = series(&[&[0.4, 0.1], &[0.2, 0.3], &[-0.6, 0.8]]);
        let a = tig(&model, &linear_path(&x, &Baseline::zero(3, 2), 9).unwrap()).unwrap();
        for t in 0..3 {
            for i in t + 1..3 {
                for k in 0..2 {
                    assert!(a.get(t, i, k).abs() <= 1e-9);
                }
            }
        }
        let (fx, _) = forward(&model, &x).unwrap();
        assert!(a.completeness_error(&fx, &[0.0; 3]).is_finite());
    }
}
