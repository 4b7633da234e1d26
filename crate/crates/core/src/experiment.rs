//! Synthetic data, dataset files, score batching and evaluation metrics.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attribution::{self, linear_path, AttributionConfig, IntegrationPath};
use crate::biopt::{evaluate_losses, Example};
use crate::dagbuild::{InterpretabilityDag, ScoreBatches};
use crate::error::{ensure, Error, Result};
use crate::ndiff::Array;
use crate::pathoracle::{oracle_path, OracleParams};
use crate::seqmodel::{mse, Baseline, BaselineKind, ElmanParams, Sample, TimeSeries};

/// Settings of the linear-plus-lagged-tanh generator
/// `y_t = sum_k c_k x_{t,k} + mu tanh(sum_k c_k x_{t-lag,k}) + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub series: usize,
    pub len: usize,
    pub coefficients: Vec<f64>,
    pub mu: f64,
    pub lag: usize,
    pub noise: f64,
    /// `(i, j, rho)`: feature `j` is redrawn as `rho x_i + sqrt(1 - rho^2) e`.
    pub correlation: Option<(usize, usize, f64)>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            series: 200,
            len: 8,
            coefficients: vec![2.0, 1.0, 0.0],
            mu: 0.5,
            lag: 1,
            noise: 0.1,
            correlation: None,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn features(&self) -> usize {
        self.coefficients.len()
    }
}

/// A list of samples sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        ensure!(!samples.is_empty(), "dataset is empty");
        let (t, d) = (samples[0].x.len(), samples[0].x.features());
        for (i, s) in samples.iter().enumerate() {
            ensure!(
                s.x.len() == t && s.x.features() == d && s.y.len() == t,
                "series {i} does not match the first series' shape ({t} x {d})"
            );
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn series_len(&self) -> usize {
        self.samples[0].x.len()
    }

    pub fn features(&self) -> usize {
        self.samples[0].x.features()
    }

    pub fn inputs(&self) -> Vec<TimeSeries> {
        self.samples.iter().map(|s| s.x.clone()).collect()
    }

    /// First `ceil(fraction n)` series and the rest.
    pub fn split(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        ensure!(fraction > 0.0 && fraction < 1.0, "split fraction must lie in (0, 1)");
        let cut = ((self.len() as f64 * fraction).ceil() as usize).clamp(1, self.len() - 1);
        let (a, b) = self.samples.split_at(cut);
        Ok((Dataset::new(a.to_vec())?, Dataset::new(b.to_vec())?))
    }

    /// Per-feature standard deviation over all rows.
    pub fn feature_std(&self) -> Vec<f64> {
        let d = self.features();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0.0;
        for s in &self.samples {
            for t in 0..s.x.len() {
                for k in 0..d {
                    let v = s.x.values().get(&[t, k]);
                    sum[k] += v;
                    sq[k] += v * v;
                }
                n += 1.0;
            }
        }
        (0..d)
            .map(|k| {
                let m = sum[k] / n;
                (sq[k] / n - m * m).max(0.0).sqrt()
            })
            .collect()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        let d = self.features();
        let mut header = vec!["series_id".to_string(), "t".to_string()];
        header.extend((0..d).map(|k| format!("x_{k}")));
        header.push("y".into());
        w.write_record(&header).map_err(io)?;
        for (id, s) in self.samples.iter().enumerate() {
            for t in 0..s.x.len() {
                let mut row = vec![id.to_string(), t.to_string()];
                row.extend((0..d).map(|k| format!("{:.16e}", s.x.values().get(&[t, k]))));
                row.push(format!("{:.16e}", s.y[t]));
                w.write_record(&row).map_err(io)?;
            }
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => fmt(format!("{other:?}")),
        })?;
        let header = r.headers().map_err(|e| fmt(e.to_string()))?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let d = cols.len().saturating_sub(3);
        let expected: Vec<String> = ["series_id".to_string(), "t".to_string()]
            .into_iter()
            .chain((0..d).map(|k| format!("x_{k}")))
            .chain(["y".to_string()])
            .collect();
        if d == 0 || cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(fmt(format!("header must be {}", expected.join(","))));
        }
        let mut series: Vec<(usize, Vec<Vec<f64>>, Vec<f64>)> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| fmt(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| fmt(format!("row {}: bad number `{}`", line + 2, &rec[i])))
            };
            let id: usize = rec[0].trim().parse().map_err(|_| fmt(format!("row {}: bad series_id", line + 2)))?;
            let t: usize = rec[1].trim().parse().map_err(|_| fmt(format!("row {}: bad t", line + 2)))?;
            if series.last().is_none_or(|s| s.0 != id) {
                series.push((id, Vec::new(), Vec::new()));
            }
            let cur = series.last_mut().unwrap();
            if t != cur.1.len() {
                return Err(fmt(format!("row {}: series {id} steps out of order", line + 2)));
            }
            cur.1.push((0..d).map(|k| num(2 + k)).collect::<Result<Vec<_>>>()?);
            cur.2.push(num(2 + d)?);
        }
        let samples = series
            .into_iter()
            .map(|(_, rows, y)| Ok(Sample { x: TimeSeries::from_rows(&rows)?, y }))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| fmt(e.to_string()))?;
        Dataset::new(samples).map_err(|e| fmt(e.to_string()))
    }
}

/// Draws a dataset from the linear-plus-lagged-tanh generator.
pub fn gen_data(cfg: &GeneratorConfig) -> Result<Dataset> {
    let d = cfg.features();
    ensure!(d >= 2, "generator needs d >= 2 features, got {d}");
    ensure!(cfg.len >= 2, "generator needs T >= 2, got {}", cfg.len);
    ensure!(cfg.series >= 1, "generator needs at least one series");
    ensure!(cfg.noise >= 0.0, "noise must be non-negative");
    if let Some((i, j, rho)) = cfg.correlation {
        ensure!(i < d && j < d && i != j, "correlation indices ({i}, {j}) invalid for d = {d}");
        ensure!(rho.abs() <= 1.0, "correlation must lie in [-1, 1]");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::contract(e.to_string()))?;
    let samples = (0..cfg.series)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..cfg.len)
                .map(|_| {
                    let mut r: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    if let Some((i, j, rho)) = cfg.correlation {
                        r[j] = rho * r[i] + (1.0 - rho * rho).sqrt() * r[j];
                    }
                    r
                })
                .collect();
            let lin = |t: usize| -> f64 { rows[t].iter().zip(&cfg.coefficients).map(|(x, c)| x * c).sum() };
            let y = (0..cfg.len)
                .map(|t| {
                    let lagged = if t >= cfg.lag { lin(t - cfg.lag) } else { 0.0 };
                    lin(t) + cfg.mu * lagged.tanh() + noise.sample(&mut rng)
                })
                .collect();
            Ok(Sample {
                x: TimeSeries::from_rows(&rows)?,
                y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}

/// Two-feature series whose rows lie near the upper unit half-circle, with
/// `y_t = 1 - 2 theta_t / pi`, the normalised position along the arc. Straight
/// chords between rows cut through the empty interior.
pub fn banana_dataset(series: usize, len: usize, seed: u64) -> Result<Dataset> {
    ensure!(len >= 2 && series >= 1, "banana data needs T >= 2 and at least one series");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.05).expect("valid normal");
    let samples = (0..series)
        .map(|_| {
            let rows: Vec<Vec<f64>> = (0..len)
                .map(|_| {
                    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    let r = 1.0 + jitter.sample(&mut rng);
                    vec![r * theta.cos(), r * theta.sin()]
                })
                .collect();
            let y = rows
                .iter()
                .map(|r| 1.0 - 2.0 * r[1].atan2(r[0]) / std::f64::consts::PI)
                .collect();
            Ok(Sample {
                x: TimeSeries::from_rows(&rows)?,
                y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}

/// How integration paths are produced for a dataset.
#[derive(Debug, Clone)]
pub enum PathSource<'a> {
    Linear,
    Oracle { oracle: &'a OracleParams, k: usize },
}

/// Baseline for `x` of the requested kind; `feature_mean` is fitted on `data`.
pub fn make_baseline(kind: BaselineKind, data: &Dataset) -> Result<Baseline> {
    match kind {
        BaselineKind::Zero => Ok(Baseline::zero(data.series_len(), data.features())),
        BaselineKind::FeatureMean => Baseline::feature_mean(&data.inputs()),
        BaselineKind::User => Err(Error::contract("user baselines must be loaded explicitly")),
    }
}

pub fn path_for(x: &TimeSeries, baseline: &Baseline, source: &PathSource<'_>, m: usize) -> Result<IntegrationPath> {
    let base = baseline.resized(x.len());
    match source {
        PathSource::Linear => linear_path(x, &base, m),
        PathSource::Oracle { oracle, k } => oracle_path(oracle, &base, x, *k, m),
    }
}

/// Pairs every sample with its integration path.
pub fn examples(data: &Dataset, baseline: &Baseline, source: &PathSource<'_>, m: usize) -> Result<Vec<Example>> {
    data.samples
        .iter()
        .map(|s| {
            Ok(Example {
                sample: s.clone(),
                path: path_for(&s.x, baseline, source, m)?,
            })
        })
        .collect()
}

/// Per-sample satisfaction scores grouped into consecutive batches of `batch`
/// samples; an incomplete tail is dropped.
pub fn score_batches(
    model: &ElmanParams,
    examples: &[Example],
    config: &AttributionConfig,
    batch: usize,
) -> Result<ScoreBatches> {
    ensure!(batch >= 2, "score batches need at least 2 samples each");
    ensure!(examples.len() >= batch, "{} samples do not fill one batch of {batch}", examples.len());
    let d = model.features();
    let scores: Vec<Array> = examples
        .iter()
        .map(|ex| attribution::scores(model, &ex.sample.x, &ex.path, config))
        .collect::<Result<_>>()?;
    let batches: Vec<Array> = scores
        .chunks_exact(batch)
        .map(|c| Array::matrix(batch, d, c.iter().flat_map(|s| s.data().iter().copied()).collect()))
        .collect();
    ScoreBatches::from_samples(&batches)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRow {
    pub src: usize,
    pub dst: usize,
    pub eps: f64,
    pub delta: f64,
    /// Mean over batches of the batch-mean gap.
    pub gap: f64,
    /// Fraction of batches whose gap lies in `[eps, delta]`.
    pub satisfied: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub samples: usize,
    pub mse: f64,
    pub baseline_mse: Option<f64>,
    pub relative_accuracy_delta: Option<f64>,
    /// Fraction of `(edge, batch)` pairs whose batch-mean gap is in its interval.
    pub dag_satisfaction_rate: Option<f64>,
    /// Hinge-interval loss over the whole dataset as one batch.
    pub interp_loss: Option<f64>,
    pub attribution_consistency: Option<f64>,
    pub edges: Vec<EdgeRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub attribution: AttributionConfig,
    pub m: usize,
    /// Number of consecutive batches for the satisfaction rate.
    pub batches: usize,
    /// Perturbed copies per input for the consistency metric; 0 skips it.
    pub perturbations: usize,
    pub perturbation_scale: f64,
    /// Inputs used for the consistency metric (first ones in the dataset).
    pub consistency_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attribution: AttributionConfig::default(),
            m: 32,
            batches: 1,
            perturbations: 8,
            perturbation_scale: 0.01,
            consistency_samples: 32,
            seed: 0,
        }
    }
}

/// Cosine similarity of two flattened arrays; 1 when both are zero.
pub fn cosine(a: &Array, b: &Array) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

/// Mean pairwise cosine similarity of attribution tensors across `J` noisy
/// copies of each input, averaged over inputs.
pub fn attribution_consistency(
    model: &ElmanParams,
    inputs: &[TimeSeries],
    baseline: &Baseline,
    source: &PathSource<'_>,
    config: &EvalConfig,
    feature_std: &[f64],
) -> Result<f64> {
    let j = config.perturbations;
    ensure!(j >= 2, "consistency needs at least 2 perturbations");
    ensure!(!inputs.is_empty(), "consistency needs at least one input");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut total = 0.0;
    for x in inputs {
        let d = x.features();
        let tensors = (0..j)
            .map(|_| {
                let noisy = x.values().zip_map(
                    &Array::from_fn(x.values().shape(), |i| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * config.perturbation_scale * feature_std[i % d]
                    }),
                    |a, b| a + b,
                );
                let xs = TimeSeries::new(noisy)?;
                let path = path_for(&xs, baseline, source, config.m)?;
                Ok(attribution::tig_with_rule(model, &path, config.attribution.rule)?.values)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut acc = 0.0;
        let mut pairs = 0;
        for a in 0..j {
            for b in a + 1..j {
                acc += cosine(&tensors[a], &tensors[b]);
                pairs += 1;
            }
        }
        total += acc / pairs as f64;
    }
    Ok(total / inputs.len() as f64)
}

/// Per-edge interval checks on consecutive batches of `batch` samples.
pub fn edge_table(batches: &ScoreBatches, dag: &InterpretabilityDag) -> Vec<EdgeRow> {
    dag.edges
        .iter()
        .map(|e| {
            let diffs = batches.batch_differences(e.src, e.dst);
            let ok = diffs.iter().filter(|g| **g >= e.eps && **g <= e.delta).count();
            EdgeRow {
                src: e.src,
                dst: e.dst,
                eps: e.eps,
                delta: e.delta,
                gap: diffs.iter().sum::<f64>() / diffs.len() as f64,
                satisfied: ok as f64 / diffs.len() as f64,
            }
        })
        .collect()
}

/// Metrics for `model` on `data`. `reference` is the unconstrained model used
/// for the accuracy comparison.
pub fn evaluate(
    model: &ElmanParams,
    data: &Dataset,
    baseline: &Baseline,
    dag: Option<&InterpretabilityDag>,
    source: &PathSource<'_>,
    reference: Option<&ElmanParams>,
    config: &EvalConfig,
) -> Result<EvaluationReport> {
    ensure!(
        model.features() == data.features(),
        "model expects {} features, data has {}",
        model.features(),
        data.features()
    );
    if let Some(dag) = dag {
        ensure!(
            dag.len() == data.features(),
            "DAG has {} nodes, data has {} features",
            dag.len(),
            data.features()
        );
    }
    ensure!(config.batches >= 1, "need at least one evaluation batch");
    let err = mse(model, &data.samples)?;
    let baseline_mse = reference.map(|r| mse(r, &data.samples)).transpose()?;
    let relative_accuracy_delta = baseline_mse.map(|b| (err - b) / b);
    let needs_paths = dag.is_some() || config.perturbations >= 2;
    let exs = if needs_paths {
        examples(data, baseline, source, config.m)?
    } else {
        Vec::new()
    };
    let (mut dag_satisfaction_rate, mut interp_loss, mut edges) = (None, None, Vec::new());
    if let Some(dag) = dag {
        let all: Vec<&Example> = exs.iter().collect();
        interp_loss = Some(evaluate_losses(model, &all, dag, &config.attribution)?.1);
        let per = data.len() / config.batches;
        ensure!(per >= 2, "{} samples cannot fill {} batches of at least 2", data.len(), config.batches);
        let sb = score_batches(model, &exs, &config.attribution, per)?;
        edges = edge_table(&sb, dag);
        if !edges.is_empty() {
            dag_satisfaction_rate = Some(edges.iter().map(|e| e.satisfied).sum::<f64>() / edges.len() as f64);
        }
    }
    let attribution_consistency = if config.perturbations >= 2 {
        let n = config.consistency_samples.min(data.len()).max(1);
        let inputs: Vec<TimeSeries> = data.samples[..n].iter().map(|s| s.x.clone()).collect();
        Some(attribution_consistency(
            model,
            &inputs,
            baseline,
            source,
            config,
            &data.feature_std(),
        )?)
    } else {
        None
    };
    Ok(EvaluationReport {
        samples: data.len(),
        mse: err,
        baseline_mse,
        relative_accuracy_delta,
        dag_satisfaction_rate,
        interp_loss,
        attribution_consistency,
        edges,
    })
}

/// Plain gradient descent on the task loss.
pub fn train_baseline(
    model: &ElmanParams,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    eta: f64,
    seed: u64,
) -> Result<(ElmanParams, Vec<f64>)> {
    ensure!(eta >= 0.0, "step size must be non-negative");
    let mut current = model.clone();
    let mut losses = Vec::new();
    for epoch in 0..epochs {
        for idx in crate::biopt::epoch_batches(data.len(), batch_size, seed, epoch) {
            let batch: Vec<Sample> = idx.iter().map(|&i| data.samples[i].clone()).collect();
            let (loss, g) = crate::seqmodel::task_loss(&current, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: losses.len(),
                    detail: format!("task loss {loss}"),
                });
            }
            let mut flat = current.to_flat();
            flat.axpy(-eta, &g);
            current.set_flat(&flat);
            losses.push(loss);
        }
    }
    Ok((current, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_generator_copies_feature() {
        let cfg = GeneratorConfig {
            series: 3,
            len: 5,
            coefficients: vec![1.0, 0.0],
            mu: 0.0,
            noise: 0.0,
            ..Default::default()
        };
        let data = gen_data(&cfg).unwrap();
        for s in &data.samples {
            for t in 0..5 {
                assert_eq!(s.y[t], s.x.values().get(&[t, 0]));
            }
        }
        assert_eq!(gen_data(&cfg).unwrap(), data);
    }

    #[test]
    fn generator_rejects_bad_dims() {
        let one = GeneratorConfig {
            coefficients: vec![1.0],
            ..Default::default()
        };
        assert!(gen_data(&one).is_err());
        let short = GeneratorConfig {
            len: 1,
            ..Default::default()
        };
        assert!(gen_data(&short).is_err());
    }

    #[test]
    fn correlation_is_applied() {
        let cfg = GeneratorConfig {
            series: 200,
            len: 10,
            correlation: Some((0, 1, 0.9)),
            ..Default::default()
        };
        let data = gen_data(&cfg).unwrap();
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for s in &data.samples {
            for t in 0..10 {
                let (a, b) = (s.x.values().get(&[t, 0]), s.x.values().get(&[t, 1]));
                sxy += a * b;
                sxx += a * a;
                syy += b * b;
            }
        }
        let r = sxy / (sxx * syy).sqrt();
        assert!((r - 0.9).abs() < 0.03, "{r}");
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let data = gen_data(&GeneratorConfig {
            series: 4,
            len: 3,
            ..Default::default()
        })
        .unwrap();
        let dir = std::env::temp_dir().join(format!("igbo-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("d.csv");
        data.save_csv(&p).unwrap();
        assert_eq!(Dataset::load_csv(&p).unwrap(), data);
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(Dataset::load_csv(&p).is_err());
        assert!(matches!(Dataset::load_csv(&dir.join("missing.csv")), Err(Error::Io { .. })));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn banana_rows_lie_on_arc() {
        let data = banana_dataset(10, 4, 1).unwrap();
        for s in &data.samples {
            for t in 0..4 {
                let (a, b) = (s.x.values().get(&[t, 0]), s.x.values().get(&[t, 1]));
                let r = (a * a + b * b).sqrt();
                assert!((r - 1.0).abs() < 0.3 && b > -0.3);
                let want = 1.0 - 2.0 * b.atan2(a) / std::f64::consts::PI;
                assert!((s.y[t] - want).abs() < 1e-15 && s.y[t].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn self_comparison_has_zero_delta() {
        let data = gen_data(&GeneratorConfig {
            series: 6,
            len: 4,
            ..Default::default()
        })
        .unwrap();
        let m = ElmanParams::init(3, 3, 0);
        let cfg = EvalConfig {
            perturbations: 0,
            ..Default::default()
        };
        let base = make_baseline(BaselineKind::Zero, &data).unwrap();
        let r = evaluate(&m, &data, &base, None, &PathSource::Linear, Some(&m), &cfg).unwrap();
        assert_eq!(r.relative_accuracy_delta, Some(0.0));
    }

    #[test]
    fn cosine_edge_cases() {
        let z = Array::zeros(&[3]);
        let a = Array::vector(vec![1.0, 2.0, 0.0]);
        assert_eq!(cosine(&z, &z), 1.0);
        assert_eq!(cosine(&a, &z), 0.0);
        assert!((cosine(&a, &a.scale(3.0)) - 1.0).abs() < 1e-15);
    }
}
