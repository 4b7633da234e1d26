//! Benchmark fixtures: a small synthetic problem with an untrained model,
//! a three-edge DAG and linear-path examples.

use igbo::biopt::Example;
use igbo::experiment::{self, Dataset, GeneratorConfig, PathSource};
use igbo::seqmodel::{BaselineKind, ElmanParams};
use igbo::dagbuild::DagEdge;
use igbo::InterpretabilityDag;

pub struct Fixture {
    pub data: Dataset,
    pub model: ElmanParams,
    pub dag: InterpretabilityDag,
    pub examples: Vec<Example>,
}

/// `series` inputs of length `len`, three features, hidden width `hidden`,
/// `m` points per path.
pub fn fixture(series: usize, len: usize, hidden: usize, m: usize) -> Fixture {
    let data = experiment::gen_data(&GeneratorConfig {
        series,
        len,
        coefficients: vec![2.0, 1.0, 0.0],
        seed: 1,
        ..Default::default()
    })
    .expect("generator config is valid");
    let model = ElmanParams::init(hidden, 3, 2);
    let edge = |src, dst| DagEdge {
        src,
        dst,
        eps: 0.05,
        delta: 0.5,
    };
    let dag = InterpretabilityDag::with_default_names(3, vec![edge(0, 1), edge(0, 2), edge(1, 2)], "manual")
        .expect("acyclic");
    let baseline = experiment::make_baseline(BaselineKind::Zero, &data).expect("baseline");
    let examples = experiment::examples(&data, &baseline, &PathSource::Linear, m).expect("examples");
    Fixture {
        data,
        model,
        dag,
        examples,
    }
}
