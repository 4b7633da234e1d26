use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use igbo::attribution::AttributionConfig;
use igbo::biopt::{self, Example, GradientPair, TrainConfig};
use igbo::dagbuild::{self, IntervalRule, ScoreBatches, VarianceMode};
use igbo::experiment::{self, Dataset, EvalConfig, GeneratorConfig, PathSource};
use igbo::pathoracle::{self, DensityAssessor, OracleParams, OraclePair, OracleTrainConfig};
use igbo::seqmodel::{BaselineKind, ElmanParams};
use igbo::{Baseline, InterpretabilityDag};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::{parse_lambda, DataKind, ExperimentConfig, VarianceChoice};
use crate::{BaselineChoice, Cli, CliError, CliResult, Command, Global, PathArgs};

struct Ctx {
    cfg: ExperimentConfig,
    seed: Option<u64>,
    out: PathBuf,
}

impl Ctx {
    fn new(global: &Global) -> CliResult<Self> {
        let cfg = match &global.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self {
            seed: global.seed.or(cfg.seed),
            cfg,
            out: global.out.clone(),
        })
    }

    fn seed(&self) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::Usage("this command samples; pass --seed or set `seed` in the config".into()))
    }

    fn out_file(&self, name: &str) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Failure(format!("{}: {e}", self.out.display())))?;
        Ok(self.out.join(name))
    }

    fn attribution(&self) -> AttributionConfig {
        AttributionConfig {
            beta: self.cfg.training.beta,
            ..Default::default()
        }
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_text(path, &(text + "\n"))
}

fn usage_if(cond: bool, msg: impl Into<String>) -> CliResult<()> {
    if cond {
        Err(CliError::Usage(msg.into()))
    } else {
        Ok(())
    }
}

fn baseline_for(choice: BaselineChoice, data: &Dataset) -> CliResult<Baseline> {
    let kind = match choice {
        BaselineChoice::Zero => BaselineKind::Zero,
        BaselineChoice::FeatureMean => BaselineKind::FeatureMean,
    };
    Ok(experiment::make_baseline(kind, data)?)
}

/// Loaded oracle (if any) plus the `K` and `M` to use with it.
struct Paths {
    oracle: Option<OracleParams>,
    k: usize,
    m: usize,
}

impl Paths {
    fn load(args: &PathArgs, ctx: &Ctx) -> CliResult<Self> {
        let k = args.k.unwrap_or(ctx.cfg.oracle.k);
        let m = args.m.unwrap_or(ctx.cfg.oracle.m);
        usage_if(k < 1, "--K must be at least 1")?;
        usage_if(m < 2, "--M must be at least 2")?;
        let oracle = args.oracle.as_deref().map(OracleParams::load).transpose()?;
        if oracle.is_some() {
            usage_if(m < k + 2, format!("--M {m} is below K + 2 = {}", k + 2))?;
        }
        Ok(Self { oracle, k, m })
    }

    fn source(&self) -> PathSource<'_> {
        match &self.oracle {
            Some(o) => PathSource::Oracle { oracle: o, k: self.k },
            None => PathSource::Linear,
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Command::GenData {
            kind,
            series,
            len,
            coefficients,
            mu,
            lag,
            noise,
            correlation,
        } => {
            let d = &ctx.cfg.data;
            let correlation = match correlation {
                Some(s) => Some(parse_correlation(&s)?),
                None => d.correlation,
            };
            let gen = GeneratorConfig {
                series: series.unwrap_or(d.series),
                len: len.unwrap_or(d.len),
                coefficients: coefficients.unwrap_or_else(|| d.coefficients.clone()),
                mu: mu.unwrap_or(d.mu),
                lag: lag.unwrap_or(d.lag),
                noise: noise.unwrap_or(d.noise),
                correlation,
                seed: ctx.seed()?,
            };
            gen_data(&ctx, kind.unwrap_or(d.kind), &gen)
        }
        Command::FitAssessor { data, calibration, floor } => {
            let data = Dataset::load_csv(&data)?;
            let a = DensityAssessor::fit_with(&data.inputs(), calibration, floor)?;
            let path = ctx.out_file("assessor.json")?;
            a.save(&path)?;
            println!("assessor fitted on {} series -> {}", data.len(), path.display());
            Ok(())
        }
        Command::TrainOracle {
            data,
            assessor,
            k,
            width,
            epochs,
            eta,
            lambda,
            baseline,
        } => {
            let o = &ctx.cfg.oracle;
            let lambda = match lambda {
                Some(s) => parse_lambda(&s)?,
                None => o.lambda.schedule()?,
            };
            let cfg = OracleTrainConfig {
                k: k.unwrap_or(o.k),
                epochs: epochs.unwrap_or(o.epochs),
                batch_size: o.batch_size,
                eta: eta.unwrap_or(o.eta),
                lambda,
                seed: ctx.seed()?,
            };
            usage_if(cfg.k < 1, "--K must be at least 1")?;
            train_oracle(&ctx, &data, &assessor, width.unwrap_or(o.width), baseline, &cfg)
        }
        Command::BuildDag {
            data,
            model,
            alpha,
            variance,
            batches,
            path,
        } => {
            let alpha = alpha.unwrap_or(ctx.cfg.dag.alpha);
            usage_if(!(0.5..1.0).contains(&alpha), format!("--alpha must lie in [0.5, 1), got {alpha}"))?;
            let batches = batches.unwrap_or(ctx.cfg.dag.batches);
            usage_if(batches < 1, "--batches must be at least 1")?;
            build_dag(
                &ctx,
                &data,
                &model,
                alpha,
                variance.unwrap_or(ctx.cfg.dag.variance),
                batches,
                &path,
            )
        }
        Command::TrainBaseline {
            data,
            hidden,
            epochs,
            eta,
            batch_size,
        } => {
            let t = &ctx.cfg.training;
            let data = Dataset::load_csv(&data)?;
            let seed = ctx.seed()?;
            let model = fresh_model(&ctx, hidden, data.features(), seed)?;
            let (model, losses) = experiment::train_baseline(
                &model,
                &data,
                epochs.unwrap_or(t.epochs),
                batch_size.unwrap_or(t.batch_size),
                eta.unwrap_or(t.eta),
                seed,
            )?;
            let mut csv = String::from("step,task_loss\n");
            for (i, l) in losses.iter().enumerate() {
                writeln!(csv, "{i},{l:.16e}").unwrap();
            }
            write_text(&ctx.out_file("baseline_history.csv")?, &csv)?;
            let path = ctx.out_file("model.json")?;
            model.save(&path)?;
            println!(
                "baseline trained for {} steps, final batch loss {:.6} -> {}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                path.display()
            );
            Ok(())
        }
        Command::TrainIgbo {
            data,
            dag,
            model,
            hidden,
            epochs,
            eta,
            batch_size,
            lambda,
            checkpoint_every,
            path,
        } => {
            let t = &ctx.cfg.training;
            let lambda = match lambda {
                Some(s) => parse_lambda(&s)?,
                None => t.lambda.schedule()?,
            };
            let seed = ctx.seed()?;
            let data = Dataset::load_csv(&data)?;
            let dag = InterpretabilityDag::load(&dag)?;
            let model = match model {
                Some(p) => ElmanParams::load(&p)?,
                None => fresh_model(&ctx, hidden, data.features(), seed)?,
            };
            let paths = Paths::load(&path, &ctx)?;
            let baseline = baseline_for(path.baseline, &data)?;
            let exs = experiment::examples(&data, &baseline, &paths.source(), paths.m)?;
            let checkpoint_every = checkpoint_every.or(t.checkpoint_every);
            let cfg = TrainConfig {
                epochs: epochs.unwrap_or(t.epochs),
                batch_size: batch_size.unwrap_or(t.batch_size),
                eta: eta.unwrap_or(t.eta),
                lambda,
                seed,
                attribution: ctx.attribution(),
                checkpoint_every,
                checkpoint_dir: checkpoint_every.map(|_| ctx.out.clone()),
                ..Default::default()
            };
            if checkpoint_every.is_some() {
                ctx.out_file("model.json")?;
            }
            let (trained, history) = biopt::train(&model, &exs, &dag, &cfg)?;
            write_text(&ctx.out_file("history.csv")?, &biopt::history_csv(&history))?;
            let out = ctx.out_file("model.json")?;
            trained.save(&out)?;
            let last = history.last().expect("history ends with an evaluation row");
            println!(
                "trained for {} steps: task loss {:.6}, interpretability loss {:.6} -> {}",
                history.len() - 1,
                last.task_loss,
                last.interp_loss,
                out.display()
            );
            Ok(())
        }
        Command::Evaluate {
            model,
            data,
            dag,
            reference,
            batches,
            perturbations,
            consistency_samples,
            path,
        } => {
            usage_if(perturbations == 1, "--perturbations must be 0 or at least 2")?;
            usage_if(batches < 1, "--batches must be at least 1")?;
            let model = ElmanParams::load(&model)?;
            let data = Dataset::load_csv(&data)?;
            let dag = dag.as_deref().map(InterpretabilityDag::load).transpose()?;
            let reference = reference.as_deref().map(ElmanParams::load).transpose()?;
            let paths = Paths::load(&path, &ctx)?;
            let baseline = baseline_for(path.baseline, &data)?;
            let cfg = EvalConfig {
                attribution: ctx.attribution(),
                m: paths.m,
                batches,
                perturbations,
                consistency_samples,
                seed: if perturbations >= 2 { ctx.seed()? } else { ctx.seed.unwrap_or(0) },
                ..Default::default()
            };
            let report = experiment::evaluate(
                &model,
                &data,
                &baseline,
                dag.as_ref(),
                &paths.source(),
                reference.as_ref(),
                &cfg,
            )?;
            let out = ctx.out_file("report.json")?;
            write_json(&out, &report)?;
            use std::io::Write as _;
            let _ = writeln!(
                std::io::stdout(),
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            Ok(())
        }
        Command::NoiseProbe {
            batches,
            sigma,
            draws,
            lambda,
            model,
            data,
            dag,
            m,
        } => {
            let n = &ctx.cfg.noise_probe;
            let batches = batches.unwrap_or_else(|| n.batches.clone());
            usage_if(batches.len() < 2, "--batches needs at least two sizes")?;
            usage_if(batches.contains(&0), "batch sizes must be positive")?;
            let sigma = sigma.unwrap_or(n.sigma);
            usage_if(!(sigma > 0.0), "--sigma must be positive")?;
            let draws = draws.unwrap_or(n.draws);
            usage_if(draws < 2, "--draws must be at least 2")?;
            let lambda = lambda.unwrap_or(n.lambda);
            usage_if(!(lambda > 0.0 && lambda < 1.0), "--lambda must lie in (0, 1)")?;
            let seed = ctx.seed()?;
            let pair = match (model, data, dag) {
                (Some(model), Some(data), Some(dag)) => {
                    let model = ElmanParams::load(&model)?;
                    let data = Dataset::load_csv(&data)?;
                    let dag = InterpretabilityDag::load(&dag)?;
                    let baseline = experiment::make_baseline(BaselineKind::Zero, &data)?;
                    let exs = experiment::examples(&data, &baseline, &PathSource::Linear, m.unwrap_or(ctx.cfg.oracle.m))?;
                    let all: Vec<&Example> = exs.iter().collect();
                    biopt::loss_gradients(&model, &all, &dag, &ctx.attribution())?.2
                }
                _ => synthetic_pair(n.dim, seed)?,
            };
            noise_probe(&ctx, &pair, lambda, sigma, &batches, draws, seed)
        }
    }
}

fn parse_correlation(s: &str) -> CliResult<(usize, usize, f64)> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || CliError::Usage(format!("--correlation expects `i,j,rho`, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok((
        parts[0].parse().map_err(|_| bad())?,
        parts[1].parse().map_err(|_| bad())?,
        parts[2].parse().map_err(|_| bad())?,
    ))
}

fn gen_data(ctx: &Ctx, kind: DataKind, gen: &GeneratorConfig) -> CliResult<()> {
    usage_if(gen.len < 2, format!("series length must be at least 2, got {}", gen.len))?;
    usage_if(gen.series < 1, "need at least one series")?;
    let data = match kind {
        DataKind::Synthetic => {
            usage_if(
                gen.features() < 2,
                format!("need at least 2 features (coefficients), got {}", gen.features()),
            )?;
            if let Some((i, j, rho)) = gen.correlation {
                usage_if(
                    i >= gen.features() || j >= gen.features() || i == j || !(-1.0..=1.0).contains(&rho),
                    format!("invalid correlation ({i}, {j}, {rho})"),
                )?;
            }
            usage_if(gen.lag >= gen.len, format!("lag {} must be below the length {}", gen.lag, gen.len))?;
            usage_if(!(gen.noise >= 0.0), "noise must be non-negative")?;
            experiment::gen_data(gen)?
        }
        DataKind::Banana => experiment::banana_dataset(gen.series, gen.len, gen.seed)?,
    };
    let path = ctx.out_file("data.csv")?;
    data.save_csv(&path)?;
    println!(
        "{} series of length {} with {} features -> {}",
        data.len(),
        data.series_len(),
        data.features(),
        path.display()
    );
    Ok(())
}

fn fresh_model(ctx: &Ctx, hidden: Option<usize>, features: usize, seed: u64) -> CliResult<ElmanParams> {
    let h = hidden.unwrap_or(ctx.cfg.model.hidden);
    usage_if(h < 1, "hidden width must be at least 1")?;
    let mut model = ElmanParams::init(h, features, seed);
    model.activation = ctx.cfg.model.activation;
    Ok(model)
}

fn train_oracle(
    ctx: &Ctx,
    data: &Path,
    assessor: &Path,
    width: usize,
    baseline: BaselineChoice,
    cfg: &OracleTrainConfig,
) -> CliResult<()> {
    usage_if(width < 1, "oracle width must be at least 1")?;
    let data = Dataset::load_csv(data)?;
    let assessor = DensityAssessor::load(assessor)?;
    usage_if(
        assessor.mean.len() != data.features(),
        format!("assessor has {} features, data has {}", assessor.mean.len(), data.features()),
    )
    .map_err(|e| match e {
        CliError::Usage(m) => CliError::Failure(m),
        e => e,
    })?;
    let base = baseline_for(baseline, &data)?;
    let pairs: Vec<OraclePair> = data.inputs().into_iter().map(|x| (base.clone(), x)).collect();
    let init = OracleParams::init(data.series_len(), data.features(), width, cfg.seed);
    let (oracle, history) = pathoracle::train_oracle(&init, &assessor, &pairs, cfg)?;
    write_text(&ctx.out_file("oracle_history.csv")?, &pathoracle::oracle_history_csv(&history))?;
    let path = ctx.out_file("oracle.json")?;
    oracle.save(&path)?;
    if let Some(last) = history.last() {
        println!(
            "oracle trained for {} steps: path loss {:.6}, validity loss {:.6} -> {}",
            history.len(),
            last.path_loss,
            last.valid_loss,
            path.display()
        );
    }
    Ok(())
}

fn build_dag(
    ctx: &Ctx,
    data: &Path,
    model: &Path,
    alpha: f64,
    variance: VarianceChoice,
    batches: usize,
    path: &PathArgs,
) -> CliResult<()> {
    let model = ElmanParams::load(model)?;
    let data = Dataset::load_csv(data)?;
    let paths = Paths::load(path, ctx)?;
    let baseline = baseline_for(path.baseline, &data)?;
    let per = data.len() / batches;
    usage_if(
        per < 2,
        format!("{} series cannot fill {batches} batches of at least 2", data.len()),
    )?;
    let exs = experiment::examples(&data, &baseline, &paths.source(), paths.m)?;
    let sb: ScoreBatches = experiment::score_batches(&model, &exs, &ctx.attribution(), per)?;
    let mode = match variance {
        VarianceChoice::Auto => VarianceMode::default_for(&sb),
        VarianceChoice::Between => VarianceMode::BetweenBatch,
        VarianceChoice::Within => VarianceMode::WithinBatch,
    };
    let built = dagbuild::build_dag(&sb, alpha, mode, None, &IntervalRule::Clt)?;
    write_text(&ctx.out_file("edge_stats.csv")?, &dagbuild::stats_csv(&built.pairs))?;
    let out = ctx.out_file("dag.json")?;
    built.dag.save(&out)?;
    let edges: Vec<String> = built.dag.edges.iter().map(|e| format!("{}->{}", e.src, e.dst)).collect();
    println!(
        "{} edges [{}], {} dropped, from {} batches of {} -> {}",
        edges.len(),
        edges.join(", "),
        built.dropped.len(),
        sb.num_batches(),
        per,
        out.display()
    );
    Ok(())
}

fn synthetic_pair(dim: usize, seed: u64) -> CliResult<GradientPair> {
    usage_if(dim < 2, "noise-probe dimension must be at least 2")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
    let g1: Vec<f64> = (0..dim).map(|_| draw()).collect();
    let g2: Vec<f64> = g1.iter().map(|a| 0.5 * a + draw()).collect();
    Ok(GradientPair::from_slices(&g1, &g2)?)
}

#[derive(Serialize)]
struct VarianceRow {
    batch: usize,
    variance: f64,
}

#[derive(Serialize)]
struct RatioRow {
    from: usize,
    to: usize,
    ratio: f64,
    expected: f64,
}

#[derive(Serialize)]
struct NoiseReport {
    case: String,
    lambda: f64,
    sigma: f64,
    draws: usize,
    seed: u64,
    variances: Vec<VarianceRow>,
    ratios: Vec<RatioRow>,
}

fn noise_probe(
    ctx: &Ctx,
    pair: &GradientPair,
    lambda: f64,
    sigma: f64,
    batches: &[usize],
    draws: usize,
    seed: u64,
) -> CliResult<()> {
    let case = biopt::classify_case(pair, biopt::default_eps_term(pair.len()));
    let variances = batches
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            Ok(VarianceRow {
                batch: b,
                variance: biopt::projection_variance(pair, lambda, sigma, b, draws, seed.wrapping_add(i as u64))?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let ratios = variances
        .windows(2)
        .map(|w| RatioRow {
            from: w[0].batch,
            to: w[1].batch,
            ratio: w[0].variance / w[1].variance,
            expected: w[1].batch as f64 / w[0].batch as f64,
        })
        .collect();
    let report = NoiseReport {
        case: case.as_str().to_string(),
        lambda,
        sigma,
        draws,
        seed,
        variances,
        ratios,
    };
    let out = ctx.out_file("noise_probe.json")?;
    write_json(&out, &report)?;
    for r in &report.ratios {
        println!("B {} -> {}: variance ratio {:.4} (expected {:.4})", r.from, r.to, r.ratio, r.expected);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlation_triples() {
        assert_eq!(parse_correlation("0, 2, 0.9").unwrap(), (0, 2, 0.9));
        assert!(matches!(parse_correlation("0,2"), Err(CliError::Usage(_))));
        assert!(matches!(parse_correlation("a,2,0.1"), Err(CliError::Usage(_))));
    }
}
