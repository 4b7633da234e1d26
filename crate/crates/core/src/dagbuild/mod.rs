//! Construction of the interpretability DAG from batched satisfaction scores.
//!
//! Edge `u -> v` asserts that feature `u` is more important than `v`:
//! `E[H_u - H_v]` lies in `[eps, delta]`. Orientation compares batch means
//! through a normal approximation `P(s_u > s_v) = Phi(m / sigma)`, where `m`
//! is the mean gap and `sigma` the spread of a single batch's gap.

mod graph;
mod normal;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use graph::{verify_acyclic, Acyclicity};
pub use normal::{erfc, normal_cdf, normal_pdf, normal_quantile};

use crate::error::{ensure, Error, Result};
use crate::ndiff::Array;

/// Smallest lower interval bound assigned by [`build_dag`].
pub const EPS_MIN: f64 = 1e-3;

/// Bootstrap resamples used when the normal statistic is degenerate.
pub const FALLBACK_RESAMPLES: usize = 1000;

/// Gap spreads at or below this are treated as zero.
pub const DEGENERATE_SIGMA: f64 = 1e-12;

/// Per-batch mean satisfaction scores.
#[derive(Debug, Clone)]
pub struct ScoreBatches {
    means: Array,
    batch_size: usize,
    samples: Option<Vec<Array>>,
}

impl ScoreBatches {
    /// Batches from raw per-sample scores, each `[n, d]` with a shared `n`.
    pub fn from_samples(batches: &[Array]) -> Result<Self> {
        ensure!(!batches.is_empty(), "need at least one batch");
        let first = batches[0].shape().to_vec();
        ensure!(first.len() == 2, "batches must be [n, d], got {first:?}");
        let (n, d) = (first[0], first[1]);
        ensure!(n >= 2, "each batch needs at least 2 samples, got {n}");
        ensure!(d >= 1, "scores need at least one feature");
        let mut means = Array::zeros(&[batches.len(), d]);
        for (i, b) in batches.iter().enumerate() {
            ensure!(
                b.shape() == first.as_slice(),
                "batch {i} has shape {:?}, expected {first:?}",
                b.shape()
            );
            ensure!(
                b.data().iter().all(|v| (0.0..=1.0).contains(v)),
                "batch {i} has scores outside [0, 1]"
            );
            for k in 0..d {
                let m = (0..n).map(|r| b.get(&[r, k])).sum::<f64>() / n as f64;
                means.set(&[i, k], m);
            }
        }
        Ok(Self {
            means,
            batch_size: n,
            samples: Some(batches.to_vec()),
        })
    }

    /// Batches known only through their means `[N, d]`.
    pub fn from_means(means: Array, batch_size: usize) -> Result<Self> {
        ensure!(means.ndim() == 2 && means.shape()[0] >= 1, "means must be [N, d] with N >= 1");
        ensure!(batch_size >= 2, "batch size must be at least 2");
        ensure!(
            means.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "batch means must lie in [0, 1]"
        );
        Ok(Self {
            means,
            batch_size,
            samples: None,
        })
    }

    pub fn means(&self) -> &Array {
        &self.means
    }

    pub fn num_batches(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn samples(&self) -> Option<&[Array]> {
        self.samples.as_deref()
    }

    /// Mean over batches of feature `k`.
    pub fn grand_mean(&self, k: usize) -> f64 {
        let n = self.num_batches();
        (0..n).map(|i| self.means.get(&[i, k])).sum::<f64>() / n as f64
    }

    /// Per-batch mean gaps `s_u^(i) - s_v^(i)`.
    pub fn batch_differences(&self, u: usize, v: usize) -> Vec<f64> {
        (0..self.num_batches())
            .map(|i| self.means.get(&[i, u]) - self.means.get(&[i, v]))
            .collect()
    }

    /// Unbiased within-batch variance of feature `k` in batch `i`.
    pub fn within_variance(&self, i: usize, k: usize) -> Option<f64> {
        let b = &self.samples.as_ref()?[i];
        let col: Vec<f64> = (0..self.batch_size).map(|r| b.get(&[r, k])).collect();
        Some(unbiased_variance(&col))
    }

    /// Pooled unbiased within-batch covariance of features `u` and `v`.
    fn within_covariance(&self, u: usize, v: usize) -> Option<f64> {
        let samples = self.samples.as_ref()?;
        let n = self.batch_size as f64;
        let total: f64 = samples
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let (mu, mv) = (self.means.get(&[i, u]), self.means.get(&[i, v]));
                (0..self.batch_size)
                    .map(|r| (b.get(&[r, u]) - mu) * (b.get(&[r, v]) - mv))
                    .sum::<f64>()
                    / (n - 1.0)
            })
            .sum();
        Some(total / samples.len() as f64)
    }
}

/// Per-batch means and retained samples; each batch is `[n, d]`.
pub fn batch_stats(scores: &[Array]) -> Result<ScoreBatches> {
    ScoreBatches::from_samples(scores)
}

pub fn unbiased_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
}

/// Where the spread of a batch-mean gap comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Sample standard deviation of the per-batch gaps across batches.
    BetweenBatch,
    /// Pooled within-batch variance of the per-sample gap, divided by `n`.
    WithinBatch,
}

impl VarianceMode {
    /// Between-batch when there are at least 8 batches, within-batch otherwise.
    pub fn default_for(batches: &ScoreBatches) -> Self {
        if batches.num_batches() >= 8 {
            VarianceMode::BetweenBatch
        } else {
            VarianceMode::WithinBatch
        }
    }
}

/// Normal-approximation statistic for one ordered pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeStat {
    pub u: usize,
    pub v: usize,
    pub mean_diff: f64,
    pub sigma: f64,
    pub probability: f64,
    pub source: VarianceMode,
}

/// Standard deviation of a single batch's gap `s_u - s_v`.
pub fn gap_sigma(batches: &ScoreBatches, u: usize, v: usize, mode: VarianceMode) -> Result<f64> {
    let d = batches.features();
    ensure!(u < d && v < d, "feature index out of range ({u}, {v}) for d = {d}");
    match mode {
        VarianceMode::BetweenBatch => {
            ensure!(batches.num_batches() >= 2, "between-batch variance needs at least 2 batches");
            Ok(unbiased_variance(&batches.batch_differences(u, v)).max(0.0).sqrt())
        }
        VarianceMode::WithinBatch => {
            let (cuu, cvv, cuv) = match (
                batches.within_covariance(u, u),
                batches.within_covariance(v, v),
                batches.within_covariance(u, v),
            ) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(Error::contract("within-batch variance needs per-sample scores")),
            };
            let var = (cuu + cvv - 2.0 * cuv) / batches.batch_size() as f64;
            Ok(var.max(0.0).sqrt())
        }
    }
}

/// `P(s_u > s_v) = Phi(m / sigma)` with `m` the mean gap over batches.
pub fn edge_probability(
    batches: &ScoreBatches,
    u: usize,
    v: usize,
    mode: VarianceMode,
) -> Result<EdgeStat> {
    let sigma = gap_sigma(batches, u, v, mode)?;
    let mean_diff = batches.grand_mean(u) - batches.grand_mean(v);
    if !(sigma > DEGENERATE_SIGMA) {
        return Err(Error::DegenerateStatistic { u, v });
    }
    Ok(EdgeStat {
        u,
        v,
        mean_diff,
        sigma,
        probability: normal_cdf(mean_diff / sigma),
        source: mode,
    })
}

/// Fraction of bootstrap resamples over batches whose mean gap is positive.
pub fn bootstrap_probability(
    batches: &ScoreBatches,
    u: usize,
    v: usize,
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    bootstrap_fractions(batches, u, v, resamples, seed).map(|(pos, _)| pos)
}

/// Fractions of bootstrap resamples whose mean gap is positive and negative.
/// Exact zeros count toward neither.
pub fn bootstrap_fractions(
    batches: &ScoreBatches,
    u: usize,
    v: usize,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    ensure!(resamples >= 100, "bootstrap needs at least 100 resamples, got {resamples}");
    let n = batches.num_batches();
    ensure!(n >= 2, "bootstrap needs at least 2 batches, got {n}");
    let diffs = batches.batch_differences(u, v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg) = (0usize, 0usize);
    for _ in 0..resamples {
        let s: f64 = (0..n).map(|_| diffs[rng.random_range(0..n)]).sum();
        if s > DEGENERATE_SIGMA {
            pos += 1;
        } else if s < -DEGENERATE_SIGMA {
            neg += 1;
        }
    }
    let r = resamples as f64;
    Ok((pos as f64 / r, neg as f64 / r))
}

/// How a pair's probability was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbabilityMethod {
    Normal,
    Bootstrap,
    /// Degenerate statistic with too few batches to resample.
    Tie,
}

/// Outcome for one unordered pair `u < v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Forward,
    Backward,
    None,
    /// Oriented, but its interval collapsed in [`build_dag`].
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDecision {
    pub u: usize,
    pub v: usize,
    pub mean_diff: f64,
    /// Zero when the statistic was degenerate.
    pub sigma: f64,
    /// Estimated `P(s_u > s_v)`.
    pub probability: f64,
    pub method: ProbabilityMethod,
    pub decision: Decision,
}

impl PairDecision {
    /// The directed edge implied by the decision, if any.
    pub fn edge(&self) -> Option<(usize, usize)> {
        match self.decision {
            Decision::Forward => Some((self.u, self.v)),
            Decision::Backward => Some((self.v, self.u)),
            Decision::None | Decision::Dropped => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Orientation {
    pub pairs: Vec<PairDecision>,
    pub edges: Vec<(usize, usize)>,
    pub order: Vec<usize>,
}

/// Orients every pair with `P(s_u > s_v) > alpha`; at most one direction per pair.
pub fn orient_edges(batches: &ScoreBatches, alpha: f64, mode: VarianceMode) -> Result<Orientation> {
    ensure!((0.5..1.0).contains(&alpha), "alpha must lie in [0.5, 1), got {alpha}");
    let d = batches.features();
    let mut pairs = Vec::new();
    for u in 0..d {
        for v in u + 1..d {
            let mean_diff = batches.grand_mean(u) - batches.grand_mean(v);
            let (sigma, probability, reverse, method) = match edge_probability(batches, u, v, mode) {
                Ok(s) => (s.sigma, s.probability, 1.0 - s.probability, ProbabilityMethod::Normal),
                Err(Error::DegenerateStatistic { .. }) if batches.num_batches() >= 2 => {
                    let seed = (u * d + v) as u64;
                    let (pos, neg) = bootstrap_fractions(batches, u, v, FALLBACK_RESAMPLES, seed)?;
                    (0.0, pos, neg, ProbabilityMethod::Bootstrap)
                }
                Err(Error::DegenerateStatistic { .. }) => (0.0, 0.5, 0.5, ProbabilityMethod::Tie),
                Err(e) => return Err(e),
            };
            let decision = if method == ProbabilityMethod::Tie {
                Decision::None
            } else if probability > alpha {
                Decision::Forward
            } else if reverse > alpha {
                Decision::Backward
            } else {
                Decision::None
            };
            pairs.push(PairDecision {
                u,
                v,
                mean_diff,
                sigma,
                probability,
                method,
                decision,
            });
        }
    }
    let edges: Vec<_> = pairs.iter().filter_map(PairDecision::edge).collect();
    match verify_acyclic(d, &edges) {
        Acyclicity::Order(order) => Ok(Orientation { pairs, edges, order }),
        Acyclicity::Cycle(cycle) => Err(Error::Cycle { cycle }),
    }
}

/// An edge whose estimated margin is below `z_alpha * sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginViolation {
    pub u: usize,
    pub v: usize,
    pub margin: f64,
    pub required: f64,
}

/// Flags every edge `u -> v` with `mean_u - mean_v < z_alpha * sigma_uv`.
///
/// An empty result certifies the margin condition under which the oriented
/// relation is transitive.
pub fn transitivity_check(
    batches: &ScoreBatches,
    alpha: f64,
    edges: &[(usize, usize)],
    mode: VarianceMode,
) -> Result<Vec<MarginViolation>> {
    ensure!((0.5..1.0).contains(&alpha), "alpha must lie in [0.5, 1), got {alpha}");
    let z = if alpha == 0.5 { 0.0 } else { normal_quantile(alpha) };
    let mut out = Vec::new();
    for &(u, v) in edges {
        let sigma = gap_sigma(batches, u, v, mode)?;
        let margin = batches.grand_mean(u) - batches.grand_mean(v);
        let required = z * sigma;
        if margin < required {
            out.push(MarginViolation { u, v, margin, required });
        }
    }
    Ok(out)
}

/// Triples where `sigma_uw > sigma_uv + sigma_vw + tolerance`.
pub fn triangle_check(
    batches: &ScoreBatches,
    mode: VarianceMode,
    tolerance: f64,
) -> Result<Vec<(usize, usize, usize, f64)>> {
    let d = batches.features();
    let mut sig = vec![vec![0.0; d]; d];
    for u in 0..d {
        for v in u + 1..d {
            let s = gap_sigma(batches, u, v, mode)?;
            sig[u][v] = s;
            sig[v][u] = s;
        }
    }
    let mut out = Vec::new();
    for u in 0..d {
        for v in 0..d {
            for w in 0..d {
                if u == v || v == w || u == w {
                    continue;
                }
                let excess = sig[u][w] - sig[u][v] - sig[v][w];
                if excess > tolerance {
                    out.push((u, v, w, excess));
                }
            }
        }
    }
    Ok(out)
}

/// One directed edge with its admissible gap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DagEdge {
    pub src: usize,
    pub dst: usize,
    pub eps: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretabilityDag {
    pub nodes: Vec<String>,
    pub edges: Vec<DagEdge>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub provenance: String,
}

impl InterpretabilityDag {
    pub fn new(nodes: Vec<String>, edges: Vec<DagEdge>, provenance: &str) -> Result<Self> {
        let dag = Self {
            nodes,
            edges,
            alpha: None,
            provenance: provenance.to_string(),
        };
        dag.validate()?;
        Ok(dag)
    }

    /// A DAG over features named `x0, x1, ...`.
    pub fn with_default_names(d: usize, edges: Vec<DagEdge>, provenance: &str) -> Result<Self> {
        Self::new(default_names(d), edges, provenance)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.src, e.dst)).collect()
    }

    /// Checks indices, intervals, duplicates and acyclicity.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut seen = std::collections::HashSet::new();
        for e in &self.edges {
            ensure!(e.src < n && e.dst < n, "edge {}->{} references a missing node", e.src, e.dst);
            ensure!(e.src != e.dst, "self-loop on node {}", e.src);
            ensure!(
                e.eps > 0.0 && e.eps <= e.delta && e.delta.is_finite(),
                "edge {}->{} needs 0 < eps <= delta, got [{}, {}]",
                e.src,
                e.dst,
                e.eps,
                e.delta
            );
            ensure!(
                seen.insert((e.src.min(e.dst), e.src.max(e.dst))),
                "more than one edge between {} and {}",
                e.src,
                e.dst
            );
        }
        match verify_acyclic(n, &self.edge_pairs()) {
            Acyclicity::Order(_) => Ok(()),
            Acyclicity::Cycle(cycle) => Err(Error::Cycle { cycle }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("dag serializes");
        std::fs::write(path, text + "\n").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let dag: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        dag.validate()?;
        Ok(dag)
    }
}

pub fn default_names(d: usize) -> Vec<String> {
    (0..d).map(|k| format!("x{k}")).collect()
}

/// How edge intervals are assigned.
#[derive(Debug, Clone, Default)]
pub enum IntervalRule {
    /// `[max(EPS_MIN, m - z sigma), m + z sigma]`.
    #[default]
    Clt,
    /// Fixed intervals for the listed edges; other oriented edges use the CLT rule.
    User(Vec<DagEdge>),
}

#[derive(Debug, Clone)]
pub struct DagBuild {
    pub dag: InterpretabilityDag,
    pub pairs: Vec<PairDecision>,
    /// Oriented edges whose interval collapsed.
    pub dropped: Vec<(usize, usize)>,
}

/// Lower and upper interval bounds for a gap `m` with spread `sigma`.
pub fn clt_interval(mean_diff: f64, sigma: f64, z: f64) -> (f64, f64) {
    ((mean_diff - z * sigma).max(EPS_MIN), mean_diff + z * sigma)
}

pub fn build_dag(
    batches: &ScoreBatches,
    alpha: f64,
    mode: VarianceMode,
    names: Option<Vec<String>>,
    rule: &IntervalRule,
) -> Result<DagBuild> {
    let d = batches.features();
    let names = names.unwrap_or_else(|| default_names(d));
    ensure!(names.len() == d, "{} names for {d} features", names.len());
    let orientation = orient_edges(batches, alpha, mode)?;
    let z = if alpha == 0.5 { 0.0 } else { normal_quantile(alpha) };
    let user: HashMap<(usize, usize), DagEdge> = match rule {
        IntervalRule::Clt => HashMap::new(),
        IntervalRule::User(edges) => edges.iter().map(|e| ((e.src, e.dst), *e)).collect(),
    };
    let mut pairs = orientation.pairs;
    let mut edges = Vec::new();
    let mut dropped = Vec::new();
    for p in pairs.iter_mut() {
        let Some((src, dst)) = p.edge() else { continue };
        if let Some(e) = user.get(&(src, dst)) {
            ensure!(
                e.eps > 0.0 && e.eps <= e.delta,
                "user interval for {src}->{dst} needs 0 < eps <= delta"
            );
            edges.push(*e);
            continue;
        }
        let gap = if src == p.u { p.mean_diff } else { -p.mean_diff };
        let (eps, delta) = clt_interval(gap, p.sigma, z);
        if eps > delta {
            log::info!("dropping edge {src}->{dst}: interval [{eps}, {delta}] collapsed");
            dropped.push((src, dst));
            p.decision = Decision::Dropped;
        } else {
            edges.push(DagEdge { src, dst, eps, delta });
        }
    }
    let mut dag = InterpretabilityDag::new(names, edges, "clt")?;
    dag.alpha = Some(alpha);
    Ok(DagBuild { dag, pairs, dropped })
}

/// Pair statistics as CSV `u,v,mean_diff,sigma,prob,decision`.
pub fn stats_csv(pairs: &[PairDecision]) -> String {
    let mut out = String::from("u,v,mean_diff,sigma,prob,decision\n");
    for p in pairs {
        let decision = match p.decision {
            Decision::Forward => format!("{}->{}", p.u, p.v),
            Decision::Backward => format!("{}->{}", p.v, p.u),
            Decision::None => "none".to_string(),
            Decision::Dropped => "dropped".to_string(),
        };
        writeln!(
            out,
            "{},{},{:.16e},{:.16e},{:.16e},{}",
            p.u, p.v, p.mean_diff, p.sigma, p.probability, decision
        )
        .unwrap();
    }
    out
}
