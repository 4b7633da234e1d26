//! Elman-style recurrent sequence model with one scalar output per step.
//!
//! ```text
//! h_t = act(W_h h_{t-1} + W_x x_t + b),   h_0 = 0
//! y_t = u . h_{t-1} + w . x_t + c
//! ```
//!
//! `y_t` reads the state *before* step `t` is folded in, so output `t`
//! depends on inputs `1..=t` only.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ndiff::{self, no_grad, Array, Var};

/// A `T x d` input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    values: Array,
}

impl TimeSeries {
    pub fn new(values: Array) -> Result<Self> {
        ensure!(values.ndim() == 2, "time series must be rank 2, got {:?}", values.shape());
        ensure!(
            values.shape()[0] >= 1 && values.shape()[1] >= 1,
            "time series needs T >= 1 and d >= 1, got {:?}",
            values.shape()
        );
        ensure!(values.all_finite(), "time series contains non-finite entries");
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "time series needs at least one row");
        let d = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == d), "ragged time series rows");
        let data = rows.iter().flatten().copied().collect();
        Self::new(Array::matrix(rows.len(), d, data))
    }

    pub fn values(&self) -> &Array {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn features(&self) -> usize {
        self.values.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Zero,
    FeatureMean,
    User,
}

/// Reference input `X'` that attributions are measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub values: Array,
    pub kind: BaselineKind,
}

impl Baseline {
    pub fn zero(len: usize, features: usize) -> Self {
        Self {
            values: Array::zeros(&[len, features]),
            kind: BaselineKind::Zero,
        }
    }

    /// Per-feature mean over every step of every series, repeated over time.
    pub fn feature_mean(data: &[TimeSeries]) -> Result<Self> {
        ensure!(!data.is_empty(), "feature-mean baseline needs data");
        let (t, d) = (data[0].len(), data[0].features());
        let mut mean = vec![0.0; d];
        let mut count = 0usize;
        for s in data {
            ensure!(s.features() == d, "feature count differs across series");
            for r in 0..s.len() {
                for (k, m) in mean.iter_mut().enumerate() {
                    *m += s.values.get(&[r, k]);
                }
                count += 1;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        Ok(Self {
            values: Array::from_fn(&[t, d], |i| mean[i % d]),
            kind: BaselineKind::FeatureMean,
        })
    }

    pub fn user(values: Array) -> Result<Self> {
        TimeSeries::new(values.clone())?;
        Ok(Self {
            values,
            kind: BaselineKind::User,
        })
    }

    /// The same baseline values laid over a series of a different length.
    pub fn resized(&self, len: usize) -> Self {
        let d = self.values.shape()[1];
        let row = self.values.row(0);
        match self.kind {
            BaselineKind::User => self.clone(),
            _ => Self {
                values: Array::from_fn(&[len, d], |i| row.data()[i % d]),
                kind: self.kind,
            },
        }
    }

    pub fn check_pairs_with(&self, x: &TimeSeries) -> Result<()> {
        ensure!(
            self.values.shape() == x.values().shape(),
            "baseline shape {:?} does not match series {:?}",
            self.values.shape(),
            x.values().shape()
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    /// Linear recurrence; used for hand-checkable models.
    Identity,
}

/// Parameters of the Elman cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ElmanParams {
    pub activation: Activation,
    /// `[h, h]`
    pub w_h: Array,
    /// `[h, d]`
    pub w_x: Array,
    /// `[h]`
    pub b: Array,
    /// `[h]`
    pub u: Array,
    /// `[d]`
    pub w: Array,
    /// scalar
    pub c: Array,
}

pub const PARAM_NAMES: [&str; 6] = ["w_h", "w_x", "b", "u", "w", "c"];

impl ElmanParams {
    pub fn zeros(hidden: usize, features: usize) -> Self {
        Self {
            activation: Activation::Tanh,
            w_h: Array::zeros(&[hidden, hidden]),
            w_x: Array::zeros(&[hidden, features]),
            b: Array::zeros(&[hidden]),
            u: Array::zeros(&[hidden]),
            w: Array::zeros(&[features]),
            c: Array::scalar(0.0),
        }
    }

    /// Uniform in `[-0.5, 0.5] / sqrt(h)` from a seeded generator.
    pub fn init(hidden: usize, features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (hidden.max(1) as f64).sqrt();
        let mut p = Self::zeros(hidden, features);
        let mut flat = p.to_flat();
        for v in flat.data_mut() {
            *v = rng.random_range(-0.5..=0.5) * scale;
        }
        p.set_flat(&flat);
        p
    }

    /// Memoryless linear model `y_t = sum_k w_k x_{t,k}`.
    pub fn memoryless_linear(weights: &[f64], hidden: usize) -> Self {
        let mut p = Self::zeros(hidden, weights.len());
        p.w = Array::vector(weights.to_vec());
        p
    }

    pub fn hidden(&self) -> usize {
        self.b.len()
    }

    pub fn features(&self) -> usize {
        self.w.len()
    }

    fn blocks(&self) -> [&Array; 6] {
        [&self.w_h, &self.w_x, &self.b, &self.u, &self.w, &self.c]
    }

    fn blocks_mut(&mut self) -> [&mut Array; 6] {
        [
            &mut self.w_h,
            &mut self.w_x,
            &mut self.b,
            &mut self.u,
            &mut self.w,
            &mut self.c,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|a| a.len()).sum()
    }

    /// All parameters as one vector, in `PARAM_NAMES` order.
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

    pub fn with_flat(&self, flat: &Array) -> Self {
        let mut p = self.clone();
        p.set_flat(flat);
        p
    }

    fn check_input(&self, x: &TimeSeries) -> Result<()> {
        ensure!(
            x.features() == self.features(),
            "series has {} features, model expects {}",
            x.features(),
            self.features()
        );
        Ok(())
    }

    /// Parameters as graph nodes. `trainable` decides whether they are leaves
    /// that gradients flow into.
    pub fn vars(&self, trainable: bool) -> ParamVars {
        let mk = |a: &Array| {
            if trainable {
                Var::leaf(a.clone())
            } else {
                Var::constant(a.clone())
            }
        };
        ParamVars {
            activation: self.activation,
            w_h: mk(&self.w_h),
            w_x: mk(&self.w_x),
            b: mk(&self.b),
            u: mk(&self.u),
            w: mk(&self.w),
            c: mk(&self.c),
        }
    }

    /// Flattened-JSON checkpoint.
    pub fn to_checkpoint(&self, role: Option<&str>) -> Checkpoint {
        let mut params = BTreeMap::new();
        for (name, arr) in PARAM_NAMES.iter().zip(self.blocks()) {
            params.insert(name.to_string(), arr.clone());
        }
        Checkpoint {
            version: 1,
            h: self.hidden(),
            d: self.features(),
            t_free: true,
            activation: self.activation,
            role: role.map(str::to_string),
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut p = Self::zeros(ck.h, ck.d);
        p.activation = ck.activation;
        for (name, slot) in PARAM_NAMES.iter().zip(p.blocks_mut()) {
            let arr = ck
                .params
                .get(*name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks parameter `{name}`")))?;
            ensure!(
                arr.shape() == slot.shape(),
                "parameter `{name}` has shape {:?}, expected {:?}",
                arr.shape(),
                slot.shape()
            );
            *slot = arr.clone();
        }
        ensure!(p.to_flat().all_finite(), "checkpoint parameters are not finite");
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if let Some(role) = &ck.role {
            if role != "model" {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    detail: format!("expected a model checkpoint, found role `{role}`"),
                });
            }
        }
        Self::from_checkpoint(&ck)
    }
}

/// On-disk parameter file shared by sequence models and path oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub h: usize,
    pub d: usize,
    #[serde(rename = "T_free")]
    pub t_free: bool,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    pub params: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Model parameters as graph nodes.
#[derive(Clone)]
pub struct ParamVars {
    pub activation: Activation,
    pub w_h: Var,
    pub w_x: Var,
    pub b: Var,
    pub u: Var,
    pub w: Var,
    pub c: Var,
}

impl ParamVars {
    pub fn leaves(&self) -> [Var; 6] {
        [
            self.w_h.clone(),
            self.w_x.clone(),
            self.b.clone(),
            self.u.clone(),
            self.w.clone(),
            self.c.clone(),
        ]
    }

    /// Gradient of `output` w.r.t. all parameters, flattened in `PARAM_NAMES` order.
    pub fn flat_grad(&self, output: &Var) -> Result<Array> {
        let grads = ndiff::try_grad_of(output, &self.leaves(), false)?;
        let mut flat = Vec::new();
        for g in grads {
            flat.extend_from_slice(g.value().data());
        }
        Ok(Array::vector(flat))
    }

    fn activate(&self, a: &Var) -> Var {
        match self.activation {
            Activation::Tanh => a.tanh(),
            Activation::Identity => a.clone(),
        }
    }

    /// Outputs `[T]` for an input node of shape `[T, d]`.
    pub fn forward(&self, x: &Var) -> Var {
        self.forward_with_states(x).0
    }

    fn forward_with_states(&self, x: &Var) -> (Var, Vec<Var>) {
        let t_len = x.shape()[0];
        let mut outputs = Vec::with_capacity(t_len);
        let mut states: Vec<Var> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = x.row(t);
            let mut y = self.w.dot(&xt).add(&self.c);
            let mut a = self.w_x.matvec(&xt).add(&self.b);
            if let Some(h) = states.last() {
                y = y.add(&self.u.dot(h));
                a = a.add(&self.w_h.matvec(h));
            }
            outputs.push(y);
            states.push(self.activate(&a));
        }
        (Var::concat(&outputs, &[t_len]), states)
    }

    /// Forward pass plus directional derivatives of the outputs along each of
    /// `directions` (each `[T, d]`), propagated alongside the recurrence.
    ///
    /// Returns `(outputs [T], [J . direction] each [T])`. Everything stays on the
    /// graph, so the tangents are differentiable in the parameters.
    pub fn forward_tangents(&self, x: &Var, directions: &[Var]) -> (Var, Vec<Var>) {
        let t_len = x.shape()[0];
        let (outputs, states) = self.forward_with_states(x);
        let tangents = directions
            .iter()
            .map(|dx| {
                let mut dy = Vec::with_capacity(t_len);
                let mut dh: Option<Var> = None;
                for t in 0..t_len {
                    let dxt = dx.row(t);
                    let mut y = self.w.dot(&dxt);
                    let mut a = self.w_x.matvec(&dxt);
                    if let Some(dh) = &dh {
                        y = y.add(&self.u.dot(dh));
                        a = a.add(&self.w_h.matvec(dh));
                    }
                    dy.push(y);
                    dh = Some(match self.activation {
                        Activation::Tanh => a.mul(&states[t].square().neg().shift(1.0)),
                        Activation::Identity => a,
                    });
                }
                Var::concat(&dy, &[t_len])
            })
            .collect();
        (outputs, tangents)
    }
}

/// Hidden states `h_0..h_T` as a `(T + 1) x h` array; row 0 is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrajectory {
    pub states: Array,
}

/// Runs the model on `x`. Output `t` depends on `x_1..x_t` only.
pub fn forward(params: &ElmanParams, x: &TimeSeries) -> Result<(Vec<f64>, HiddenTrajectory)> {
    params.check_input(x)?;
    let _g = no_grad();
    let pv = params.vars(false);
    let (out, states) = pv.forward_with_states(&Var::constant(x.values().clone()));
    let h = params.hidden();
    let mut traj = vec![0.0; h];
    for s in &states {
        traj.extend_from_slice(s.value().data());
    }
    Ok((
        out.value().data().to_vec(),
        HiddenTrajectory {
            states: Array::matrix(x.len() + 1, h, traj),
        },
    ))
}

/// Outputs only.
pub fn predict(params: &ElmanParams, x: &Array) -> Vec<f64> {
    let _g = no_grad();
    params
        .vars(false)
        .forward(&Var::constant(x.clone()))
        .value()
        .data()
        .to_vec()
}

/// `J[t]` is the `T x d` gradient of output `t` w.r.t. the whole input.
pub fn input_jacobian(params: &ElmanParams, x: &TimeSeries) -> Result<Vec<Array>> {
    params.check_input(x)?;
    let pv = params.vars(false);
    let xv = Var::leaf(x.values().clone());
    let out = pv.forward(&xv);
    let t_len = x.len();
    let mut jac = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let seed = Var::constant(Array::from_fn(&[t_len], |i| if i == t { 1.0 } else { 0.0 }));
        let (g, _) = ndiff::vjp(&out, &seed, std::slice::from_ref(&xv), false);
        jac.push(g[0].value().clone());
    }
    Ok(jac)
}

/// An input series with its per-step regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: TimeSeries,
    pub y: Vec<f64>,
}

/// Mean squared error over all `(sample, t)` as a graph node.
pub fn task_loss_var(pv: &ParamVars, batch: &[Sample]) -> Result<Var> {
    ensure!(!batch.is_empty(), "task loss needs a non-empty batch");
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for s in batch {
        ensure!(
            s.y.len() == s.x.len(),
            "target length {} differs from series length {}",
            s.y.len(),
            s.x.len()
        );
        let pred = pv.forward(&Var::constant(s.x.values().clone()));
        let err = pred.sub(&Var::constant(Array::vector(s.y.clone()))).square().sum();
        count += s.y.len();
        total = Some(match total {
            Some(t) => t.add(&err),
            None => err,
        });
    }
    Ok(total.expect("non-empty batch").scale(1.0 / count as f64))
}

/// Mean squared error and its parameter gradient (flat, `PARAM_NAMES` order).
pub fn task_loss(params: &ElmanParams, batch: &[Sample]) -> Result<(f64, Array)> {
    for s in batch {
        params.check_input(&s.x)?;
    }
    let pv = params.vars(true);
    let loss = task_loss_var(&pv, batch)?;
    let g = pv.flat_grad(&loss)?;
    Ok((loss.item(), g))
}

/// Mean squared error without gradients.
pub fn mse(params: &ElmanParams, batch: &[Sample]) -> Result<f64> {
    let _g = no_grad();
    let pv = params.vars(false);
    Ok(task_loss_var(&pv, batch)?.item())
}
