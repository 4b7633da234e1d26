//! TOML experiment configuration. Every field has a default; flags given on
//! the command line override the file.

use std::path::Path;

use igbo::biopt::LambdaSchedule;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub data: DataSection,
    pub dag: DagSection,
    pub oracle: OracleSection,
    pub training: TrainingSection,
    pub noise_probe: NoiseProbeSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub activation: igbo::seqmodel::Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: 8,
            activation: Default::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Synthetic,
    Banana,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub series: usize,
    pub len: usize,
    pub coefficients: Vec<f64>,
    pub mu: f64,
    pub lag: usize,
    pub noise: f64,
    pub correlation: Option<(usize, usize, f64)>,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = igbo::experiment::GeneratorConfig::default();
        Self {
            kind: DataKind::Synthetic,
            series: g.series,
            len: g.len,
            coefficients: g.coefficients,
            mu: g.mu,
            lag: g.lag,
            noise: g.noise,
            correlation: g.correlation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum VarianceChoice {
    Auto,
    Between,
    Within,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DagSection {
    pub alpha: f64,
    pub variance: VarianceChoice,
    /// Number of score batches the data is cut into.
    pub batches: usize,
}

impl Default for DagSection {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            variance: VarianceChoice::Auto,
            batches: 8,
        }
    }
}

/// A lambda given either as a number or as a schedule string.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum LambdaSpec {
    Value(f64),
    Spec(String),
}

impl LambdaSpec {
    pub fn schedule(&self) -> Result<LambdaSchedule, CliError> {
        match self {
            LambdaSpec::Value(v) => Ok(LambdaSchedule::Fixed { value: *v }),
            LambdaSpec::Spec(s) => parse_lambda(s),
        }
    }
}

pub fn parse_lambda(s: &str) -> Result<LambdaSchedule, CliError> {
    s.parse().map_err(|e: igbo::Error| CliError::Usage(e.to_string()))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub k: usize,
    pub m: usize,
    pub width: usize,
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
    pub lambda: LambdaSpec,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            k: 3,
            m: 32,
            width: igbo::pathoracle::DEFAULT_WIDTH,
            epochs: 20,
            eta: 0.01,
            batch_size: 16,
            lambda: LambdaSpec::Value(0.5),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: LambdaSpec,
    pub beta: f64,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            eta: 0.05,
            epochs: 10,
            batch_size: 16,
            lambda: LambdaSpec::Value(0.5),
            beta: igbo::attribution::DEFAULT_BETA,
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProbeSection {
    /// Per-coordinate gradient noise scale for a single sample.
    pub sigma: f64,
    pub batches: Vec<usize>,
    pub draws: usize,
    /// Dimension of the synthetic gradient pair when no model is given.
    pub dim: usize,
    pub lambda: f64,
}

impl Default for NoiseProbeSection {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            batches: vec![64, 128],
            draws: 2000,
            dim: 50,
            lambda: 0.5,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_accepts_number_or_schedule() {
        let cfg: ExperimentConfig = toml::from_str("[training]\nlambda = 0.25\n[oracle]\nlambda = \"dynamic\"\n").unwrap();
        assert!(matches!(cfg.training.lambda.schedule().unwrap(), LambdaSchedule::Fixed { value } if value == 0.25));
        assert!(matches!(cfg.oracle.lambda.schedule().unwrap(), LambdaSchedule::Dynamic));
        assert!(matches!(parse_lambda("bogus"), Err(CliError::Usage(_))));
    }

    #[test]
    fn empty_file_is_all_defaults() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.seed, None);
        assert_eq!(cfg.model.hidden, 8);
        assert_eq!(cfg.noise_probe.batches, vec![64, 128]);
        assert_eq!(cfg.dag.variance, VarianceChoice::Auto);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[dag]\nalhpa = 0.9\n").is_err());
    }
}
