//! Interpretability-guided bi-objective training for small recurrent
//! sequence models.
//!
//! The crate is organised bottom-up:
//!
//! - [`ndiff`]: dense arrays and nested reverse-mode differentiation.
//! - [`seqmodel`]: the Elman-style sequence model, its task loss and input Jacobians.
//! - [`attribution`]: temporal integrated gradients and per-feature satisfaction scores.
//! - [`pathoracle`]: learned anchor paths and the frozen validity assessor.
//! - [`dagbuild`]: CLT-based construction of the feature-importance DAG.
//! - [`biopt`]: the two-gradient projection, the hinge-interval loss and the training loop.
//! - [`experiment`]: synthetic data, evaluation metrics and the noise probe.

pub mod attribution;
pub mod biopt;
pub mod dagbuild;
pub mod error;
pub mod experiment;
pub mod ndiff;
pub mod pathoracle;
pub mod seqmodel;

pub use attribution::{AttributionTensor, IntegrationPath, PathProvenance, SatisfactionReport};
pub use biopt::{Case, EdgePenaltyReport, GradientPair, ProjectionResult};
pub use dagbuild::{EdgeStat, InterpretabilityDag, ScoreBatches, VarianceMode};
pub use error::{Error, Result};
pub use ndiff::{Array, Var};
pub use pathoracle::{DensityAssessor, OracleLossReport, OracleParams, ValidityAssessor};
pub use seqmodel::{Baseline, BaselineKind, ElmanParams, HiddenTrajectory, TimeSeries};
