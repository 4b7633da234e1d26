//! Learned integration paths.
//!
//! The oracle is a small recurrent generator of anchors `p_1..p_K` between a
//! baseline `X'` and an input `X`. With `r_i = K - i + 1` remaining steps,
//! `z_i = [r_i, vec X, vec p_{i-1}]`, `p_0 = X'` and `h_0 = 0`:
//!
//! ```text
//! h_i = tanh(A h_{i-1} + B z_i + b)
//! p_i = U h_{i-1} + W z_i + c
//! ```
//!
//! It is trained against two losses: squared path length and the negative
//! log validity of the anchors under a frozen assessor.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{IntegrationPath, PathProvenance};
use crate::biopt::{self, Case, GradientPair, LambdaSchedule};
use crate::error::{ensure, Error, Result};
use crate::ndiff::{self, Array, Var};
use crate::seqmodel::{Activation, Baseline, Checkpoint, TimeSeries};

pub const DEFAULT_WIDTH: usize = 16;
/// Median training-point score after calibration.
pub const DEFAULT_CALIBRATION: f64 = 0.9;
/// Lowest score the assessor returns.
pub const DEFAULT_FLOOR: f64 = 1e-6;
/// Smallest per-feature scale.
pub const SCALE_FLOOR: f64 = 1e-6;

const ORACLE_NAMES: [&str; 6] = ["A", "B", "b", "U", "W", "c"];

/// Weights of the anchor generator for series of shape `T x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleParams {
    len: usize,
    features: usize,
    /// `[H, H]`
    pub a: Array,
    /// `[H, 1 + 2n]`, `n = T d`
    pub b_in: Array,
    /// `[H]`
    pub b: Array,
    /// `[n, H]`
    pub u: Array,
    /// `[n, 1 + 2n]`
    pub w: Array,
    /// `[n]`
    pub c: Array,
}

impl OracleParams {
    pub fn zeros(len: usize, features: usize, width: usize) -> Self {
        let n = len * features;
        Self {
            len,
            features,
            a: Array::zeros(&[width, width]),
            b_in: Array::zeros(&[width, 1 + 2 * n]),
            b: Array::zeros(&[width]),
            u: Array::zeros(&[n, width]),
            w: Array::zeros(&[n, 1 + 2 * n]),
            c: Array::zeros(&[n]),
        }
    }

    /// Random recurrent weights and an output head that starts at
    /// `p_i = (X + p_{i-1}) / 2`.
    pub fn init(len: usize, features: usize, width: usize, seed: u64) -> Self {
        let mut p = Self::zeros(len, features, width);
        let n = p.point_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s_h = 0.5 / (width.max(1) as f64).sqrt();
        let s_z = 0.5 / ((1 + 2 * n) as f64).sqrt();
        for v in p.a.data_mut() {
            *v = rng.random_range(-s_h..=s_h);
        }
        for v in p.b_in.data_mut() {
            *v = rng.random_range(-s_z..=s_z);
        }
        for i in 0..n {
            p.w.set(&[i, 1 + i], 0.5);
            p.w.set(&[i, 1 + n + i], 0.5);
        }
        p
    }

    pub fn width(&self) -> usize {
        self.b.len()
    }

    pub fn series_len(&self) -> usize {
        self.len
    }

    pub fn features(&self) -> usize {
        self.features
    }

    fn point_len(&self) -> usize {
        self.len * self.features
    }

    fn blocks(&self) -> [&Array; 6] {
        [&self.a, &self.b_in, &self.b, &self.u, &self.w, &self.c]
    }

    fn blocks_mut(&mut self) -> [&mut Array; 6] {
        [
            &mut self.a,
            &mut self.b_in,
            &mut self.b,
            &mut self.u,
            &mut self.w,
            &mut self.c,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|a| a.len()).sum()
    }

    pub fn to_flat(&self) -> Array {
        let mut out = Vec::with_capacity(self.num_params());
        for b in self.blocks() {
            out.extend_from_slice(b.data());
        }
        Array::vector(out)
    }

    pub fn set_flat(&mut self, flat: &Array) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length mismatch");
        let mut off = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.data_mut().copy_from_slice(&flat.data()[off..off + n]);
            off += n;
        }
    }

    pub fn vars(&self, trainable: bool) -> OracleVars {
        let mk = |a: &Array| if trainable { Var::leaf(a.clone()) } else { Var::constant(a.clone()) };
        OracleVars {
            len: self.len,
            features: self.features,
            a: mk(&self.a),
            b_in: mk(&self.b_in),
            b: mk(&self.b),
            u: mk(&self.u),
            w: mk(&self.w),
            c: mk(&self.c),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut params = BTreeMap::new();
        for (name, arr) in ORACLE_NAMES.iter().zip(self.blocks()) {
            params.insert(name.to_string(), arr.clone());
        }
        Checkpoint {
            version: 1,
            h: self.width(),
            d: self.features,
            t_free: false,
            activation: Activation::Tanh,
            role: Some("oracle".to_string()),
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ensure!(ck.role.as_deref() == Some("oracle"), "checkpoint is not an oracle");
        ensure!(ck.d >= 1, "oracle checkpoint has no features");
        let c = ck
            .params
            .get("c")
            .ok_or_else(|| Error::contract("oracle checkpoint lacks parameter `c`"))?;
        ensure!(c.len() % ck.d == 0, "oracle output size {} is not a multiple of d = {}", c.len(), ck.d);
        let mut p = Self::zeros(c.len() / ck.d, ck.d, ck.h);
        for (name, slot) in ORACLE_NAMES.iter().zip(p.blocks_mut()) {
            let arr = ck
                .params
                .get(*name)
                .ok_or_else(|| Error::contract(format!("oracle checkpoint lacks parameter `{name}`")))?;
            ensure!(
                arr.shape() == slot.shape(),
                "oracle parameter `{name}` has shape {:?}, expected {:?}",
                arr.shape(),
                slot.shape()
            );
            *slot = arr.clone();
        }
        ensure!(p.to_flat().all_finite(), "oracle parameters are not finite");
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&ck).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Oracle weights as graph nodes.
#[derive(Clone)]
pub struct OracleVars {
    len: usize,
    features: usize,
    pub a: Var,
    pub b_in: Var,
    pub b: Var,
    pub u: Var,
    pub w: Var,
    pub c: Var,
}

impl OracleVars {
    pub fn leaves(&self) -> [Var; 6] {
        [
            self.a.clone(),
            self.b_in.clone(),
            self.b.clone(),
            self.u.clone(),
            self.w.clone(),
            self.c.clone(),
        ]
    }

    fn flat_grad(&self, output: &Var) -> Result<Array> {
        let grads = ndiff::try_grad_of(output, &self.leaves(), false)?;
        let mut flat = Vec::new();
        for g in grads {
            flat.extend_from_slice(g.value().data());
        }
        Ok(Array::vector(flat))
    }

    /// Anchors as `[T, d]` nodes.
    pub fn anchors(&self, baseline: &Array, x: &Array, k: usize) -> Vec<Var> {
        let n = self.len * self.features;
        let width = self.b.shape()[0];
        let xv = Var::constant(x.clone().reshaped(&[n]));
        let mut prev = Var::constant(baseline.clone().reshaped(&[n]));
        let mut h = Var::constant(Array::zeros(&[width]));
        let mut out = Vec::with_capacity(k);
        for i in 1..=k {
            let remaining = Var::constant(Array::vector(vec![(k - i + 1) as f64]));
            let z = Var::concat(&[remaining, xv.clone(), prev.clone()], &[1 + 2 * n]);
            let p = self.u.matvec(&h).add(&self.w.matvec(&z)).add(&self.c);
            h = self.a.matvec(&h).add(&self.b_in.matvec(&z)).add(&self.b).tanh();
            out.push(p.reshape(&[self.len, self.features]));
            prev = p;
        }
        out
    }
}

fn check_pair(oracle: &OracleParams, baseline: &Array, x: &Array) -> Result<()> {
    let want = [oracle.len, oracle.features];
    ensure!(
        baseline.shape() == want && x.shape() == want,
        "oracle expects {want:?} series, got baseline {:?} and input {:?}",
        baseline.shape(),
        x.shape()
    );
    Ok(())
}

/// Anchors `p_1..p_K` between `baseline` and `x`.
pub fn generate_anchors(oracle: &OracleParams, baseline: &Baseline, x: &TimeSeries, k: usize) -> Result<Vec<Array>> {
    ensure!(k >= 1, "oracle needs K >= 1 anchors, got {k}; use a linear path for K = 0");
    check_pair(oracle, &baseline.values, x.values())?;
    let _g = ndiff::no_grad();
    Ok(oracle
        .vars(false)
        .anchors(&baseline.values, x.values(), k)
        .into_iter()
        .map(|v| v.value().clone())
        .collect())
}

/// `M` points through `baseline`, the anchors and `x`, with the `M - K - 2`
/// free points spread over the segments in proportion to their length.
pub fn expand_points(anchors: &[Array], baseline: &Baseline, x: &TimeSeries, m: usize) -> Result<IntegrationPath> {
    let k = anchors.len();
    ensure!(k >= 1, "expansion needs at least one anchor");
    ensure!(m >= k + 2, "M = {m} is below K + 2 = {}", k + 2);
    let mut nodes = Vec::with_capacity(k + 2);
    nodes.push(baseline.values.clone());
    nodes.extend(anchors.iter().cloned());
    nodes.push(x.values().clone());
    let shape = nodes[0].shape().to_vec();
    ensure!(nodes.iter().all(|p| p.shape() == shape.as_slice()), "anchors differ in shape from the input");
    let lengths: Vec<f64> = nodes.windows(2).map(|w| w[1].sub(&w[0]).norm()).collect();
    let counts = apportion(m - k - 2, &lengths);
    let mut points = Vec::with_capacity(m);
    for (s, w) in nodes.windows(2).enumerate() {
        points.push(w[0].clone());
        let step = w[1].sub(&w[0]);
        for j in 1..=counts[s] {
            let mut p = w[0].clone();
            p.axpy(j as f64 / (counts[s] + 1) as f64, &step);
            points.push(p);
        }
    }
    points.push(x.values().clone());
    debug_assert_eq!(points.len(), m);
    IntegrationPath::new(points, PathProvenance::Oracle)
}

/// Largest-remainder split of `total` in proportion to `weights`; ties and
/// all-zero weights go to earlier segments first.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let s: f64 = weights.iter().sum();
    let quotas: Vec<f64> = if s > 0.0 {
        weights.iter().map(|w| total as f64 * w / s).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&i, &j| {
        let (ri, rj) = (quotas[i] - quotas[i].floor(), quotas[j] - quotas[j].floor());
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Oracle path with `k` anchors and `m` points in total.
pub fn oracle_path(oracle: &OracleParams, baseline: &Baseline, x: &TimeSeries, k: usize, m: usize) -> Result<IntegrationPath> {
    let anchors = generate_anchors(oracle, baseline, x, k)?;
    expand_points(&anchors, baseline, x, m)
}

fn path_loss_var(anchors: &[Var], baseline: &Var, x: &Var) -> Var {
    let k = anchors.len();
    let mut total = baseline.sub(&anchors[0]).square().sum();
    total = total.add(&x.sub(&anchors[k - 1]).square().sum());
    for w in anchors.windows(2) {
        total = total.add(&w[1].sub(&w[0]).square().sum());
    }
    total.scale(1.0 / (k + 1) as f64)
}

/// `(|X' - p_1|^2 + |X - p_K|^2 + sum |p_{i+1} - p_i|^2) / (K + 1)`.
pub fn path_loss(anchors: &[Array], baseline: &Array, x: &Array) -> Result<f64> {
    ensure!(!anchors.is_empty(), "path loss needs K >= 1 anchors");
    let _g = ndiff::no_grad();
    let a: Vec<Var> = anchors.iter().map(|p| Var::constant(p.clone())).collect();
    Ok(path_loss_var(&a, &Var::constant(baseline.clone()), &Var::constant(x.clone())).item())
}

/// Probability-like score of a point being in distribution.
pub trait ValidityAssessor {
    /// `log D(p)` for a `[T, d]` node; must be `<= 0`.
    fn log_score_var(&self, p: &Var) -> Var;

    fn score(&self, p: &Array) -> f64 {
        let _g = ndiff::no_grad();
        self.log_score_var(&Var::constant(p.clone())).item().exp()
    }
}

/// Diagonal Gaussian over features, calibrated so the median training series
/// scores `calibration`, and clamped to `[floor, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityAssessor {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub calibration: f64,
    /// Added to the mean log-density so the calibration holds.
    pub offset: f64,
    pub floor: f64,
}

impl DensityAssessor {
    pub fn fit(data: &[TimeSeries]) -> Result<Self> {
        Self::fit_with(data, DEFAULT_CALIBRATION, DEFAULT_FLOOR)
    }

    pub fn fit_with(data: &[TimeSeries], calibration: f64, floor: f64) -> Result<Self> {
        ensure!(!data.is_empty(), "assessor needs a non-empty dataset");
        ensure!(calibration > 0.0 && calibration < 1.0, "calibration must lie in (0, 1)");
        ensure!(floor > 0.0 && floor < calibration, "floor must lie in (0, calibration)");
        let d = data[0].features();
        ensure!(data.iter().all(|s| s.features() == d), "series differ in feature count");
        let mut sum = vec![0.0; d];
        let mut count = 0.0;
        for s in data {
            for t in 0..s.len() {
                for (k, acc) in sum.iter_mut().enumerate() {
                    *acc += s.values().get(&[t, k]);
                }
            }
            count += s.len() as f64;
        }
        let mean: Vec<f64> = sum.iter().map(|v| v / count).collect();
        let mut ss = vec![0.0; d];
        for s in data {
            for t in 0..s.len() {
                for k in 0..d {
                    let e = s.values().get(&[t, k]) - mean[k];
                    ss[k] += e * e;
                }
            }
        }
        let scale: Vec<f64> = ss
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let sd = (v / count).sqrt();
                if sd < SCALE_FLOOR {
                    log::warn!("feature {k} has near-zero spread; scale floored at {SCALE_FLOOR}");
                }
                sd.max(SCALE_FLOOR)
            })
            .collect();
        let mut fit = Self {
            mean,
            scale,
            calibration,
            offset: 0.0,
            floor,
        };
        let mut raw: Vec<f64> = data.iter().map(|s| fit.raw_log_density(s.values())).collect();
        raw.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = raw.len() / 2;
        let median = if raw.len() % 2 == 1 { raw[mid] } else { 0.5 * (raw[mid - 1] + raw[mid]) };
        fit.offset = calibration.ln() - median;
        Ok(fit)
    }

    /// `-mean_{t,k} z_{t,k}^2 / 2` with `z` standardised per feature.
    fn raw_log_density(&self, p: &Array) -> f64 {
        let d = self.mean.len();
        let n = p.len() as f64;
        -p.data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let z = (v - self.mean[i % d]) / self.scale[i % d];
                0.5 * z * z
            })
            .sum::<f64>()
            / n
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let a: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let ok = !a.mean.is_empty()
            && a.mean.len() == a.scale.len()
            && a.scale.iter().all(|s| *s > 0.0)
            && a.floor > 0.0
            && a.floor <= 1.0;
        if !ok {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: "inconsistent assessor statistics".into(),
            });
        }
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("assessor serializes");
        std::fs::write(path, text + "\n").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl ValidityAssessor for DensityAssessor {
    fn log_score_var(&self, p: &Var) -> Var {
        let shape = p.shape().to_vec();
        let d = self.mean.len();
        assert_eq!(shape[shape.len() - 1], d, "assessor fitted on {d} features");
        let n = p.value().len();
        let center = Var::constant(Array::from_fn(&shape, |i| self.mean[i % d]));
        let inv = Var::constant(Array::from_fn(&shape, |i| 1.0 / self.scale[i % d]));
        let z = p.sub(&center).mul(&inv);
        let raw = z.square().sum().scale(-0.5 / n as f64).shift(self.offset);
        // min(0, max(ln floor, raw))
        let lo = self.floor.ln();
        let above = raw.shift(-lo).relu().shift(lo);
        above.sub(&above.relu())
    }
}

fn validity_loss_var(anchors: &[Var], assessor: &dyn ValidityAssessor) -> Var {
    let k = anchors.len();
    let mut total = assessor.log_score_var(&anchors[0]);
    for a in &anchors[1..] {
        total = total.add(&assessor.log_score_var(a));
    }
    total.scale(-1.0 / k as f64)
}

/// `-(1/K) sum_i log D(p_i)`.
pub fn validity_loss(anchors: &[Array], assessor: &dyn ValidityAssessor) -> Result<f64> {
    ensure!(!anchors.is_empty(), "validity loss needs K >= 1 anchors");
    let _g = ndiff::no_grad();
    let a: Vec<Var> = anchors.iter().map(|p| Var::constant(p.clone())).collect();
    Ok(validity_loss_var(&a, assessor).item())
}

/// Both oracle losses, averaged over a batch of pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleLossReport {
    pub path: f64,
    pub valid: f64,
}

/// `(baseline, input)` pairs for oracle training.
pub type OraclePair = (Baseline, TimeSeries);

fn batch_losses(ov: &OracleVars, pairs: &[&OraclePair], k: usize, assessor: &dyn ValidityAssessor) -> (Var, Var) {
    let mut lp: Option<Var> = None;
    let mut lv: Option<Var> = None;
    for (base, x) in pairs {
        let anchors = ov.anchors(&base.values, x.values(), k);
        let p = path_loss_var(&anchors, &Var::constant(base.values.clone()), &Var::constant(x.values().clone()));
        let v = validity_loss_var(&anchors, assessor);
        lp = Some(lp.map_or(p.clone(), |acc| acc.add(&p)));
        lv = Some(lv.map_or(v.clone(), |acc| acc.add(&v)));
    }
    let s = 1.0 / pairs.len() as f64;
    (lp.expect("non-empty").scale(s), lv.expect("non-empty").scale(s))
}

pub fn oracle_losses(
    oracle: &OracleParams,
    pairs: &[OraclePair],
    k: usize,
    assessor: &dyn ValidityAssessor,
) -> Result<OracleLossReport> {
    ensure!(k >= 1 && !pairs.is_empty(), "need K >= 1 and at least one pair");
    for (b, x) in pairs {
        check_pair(oracle, &b.values, x.values())?;
    }
    let _g = ndiff::no_grad();
    let refs: Vec<&OraclePair> = pairs.iter().collect();
    let (p, v) = batch_losses(&oracle.vars(false), &refs, k, assessor);
    Ok(OracleLossReport {
        path: p.item(),
        valid: v.item(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleTrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub lambda: LambdaSchedule,
    pub seed: u64,
}

impl Default for OracleTrainConfig {
    fn default() -> Self {
        Self {
            k: 3,
            epochs: 20,
            batch_size: 16,
            eta: 0.01,
            lambda: LambdaSchedule::Fixed { value: 0.5 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleStepRecord {
    pub step: usize,
    pub path_loss: f64,
    pub valid_loss: f64,
    pub case: Case,
    pub lambda: f64,
    pub dot_path: f64,
    pub dot_valid: f64,
}

/// Projected descent on `(L_path, L_valid)`; the assessor is only read.
pub fn train_oracle(
    oracle: &OracleParams,
    assessor: &dyn ValidityAssessor,
    pairs: &[OraclePair],
    config: &OracleTrainConfig,
) -> Result<(OracleParams, Vec<OracleStepRecord>)> {
    ensure!(config.k >= 1, "oracle needs K >= 1");
    ensure!(!pairs.is_empty(), "oracle training needs at least one pair");
    ensure!(config.eta >= 0.0, "step size must be non-negative");
    for (b, x) in pairs {
        check_pair(oracle, &b.values, x.values())?;
    }
    let eps_term = biopt::default_eps_term(oracle.num_params());
    let mut current = oracle.clone();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        for idx in biopt::epoch_batches(pairs.len(), config.batch_size, config.seed, epoch) {
            let batch: Vec<&OraclePair> = idx.iter().map(|&i| &pairs[i]).collect();
            let ov = current.vars(true);
            let (lp, lv) = batch_losses(&ov, &batch, config.k, assessor);
            if !lp.item().is_finite() || !lv.item().is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("path loss {}, validity loss {}", lp.item(), lv.item()),
                });
            }
            let diverged = |e: Error| match e {
                Error::NumericalOverflow { primitive } => Error::Divergence {
                    step,
                    detail: format!("non-finite gradient (first at `{primitive}`)"),
                },
                e => e,
            };
            let g1 = ov.flat_grad(&lp).map_err(diverged)?;
            let g2 = ov.flat_grad(&lv).map_err(diverged)?;
            let pair = GradientPair::new(g1, g2)?;
            let lambda = config.lambda.value(step, Some(&pair));
            let proj = biopt::step_direction(&pair, lambda, eps_term);
            let mut flat = current.to_flat();
            flat.axpy(-config.eta, &proj.direction);
            current.set_flat(&flat);
            history.push(OracleStepRecord {
                step,
                path_loss: lp.item(),
                valid_loss: lv.item(),
                case: proj.case,
                lambda,
                dot_path: proj.dot_g1,
                dot_valid: proj.dot_g2,
            });
            step += 1;
        }
    }
    Ok((current, history))
}

/// History as CSV `step,path_loss,valid_loss,case,lambda,dot_path,dot_valid`.
pub fn oracle_history_csv(history: &[OracleStepRecord]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("step,path_loss,valid_loss,case,lambda,dot_path,dot_valid\n");
    for r in history {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{},{:.16e},{:.16e},{:.16e}",
            r.step,
            r.path_loss,
            r.valid_loss,
            r.case.as_str(),
            r.lambda,
            r.dot_path,
            r.dot_valid
        )
        .unwrap();
    }
    out
}
