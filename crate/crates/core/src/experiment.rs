//! Shared fixtures for comparing training arms on one split.
//!
//! Zero-shot scores and the neighbor graph are computed once; arms differ only in
//! their cue selection and loss weights.

use serde::{Deserialize, Serialize};

use crate::cues::{expand_targets_llm, expand_targets_zs, variant_cues, zero_shot_logits, CueMode, ZeroShotLogits};
use crate::dataset::{compute_prior, ClassCounts, ClassPrior, LabeledEmbeddings};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::metrics::{evaluate_with_sigma, transition_analysis, EvalReport, TransitionReport, BALANCEDNESS_SIGMA};
use crate::neighbors::NeighborGraph;
use crate::trainer::{train, TrainConfig, TrainReport};

pub struct Experiment {
    pub train: LabeledEmbeddings,
    pub test: LabeledEmbeddings,
    pub prototypes: Matrix,
    pub graph: NeighborGraph,
    pub train_counts: ClassCounts,
    pub prior: ClassPrior,
    pub train_scores: ZeroShotLogits,
    pub test_zs_predictions: Vec<usize>,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub k: usize,
    pub mode: CueMode,
    pub lambda_zs: f64,
    pub lambda_llm: f64,
    pub seed: u64,
}

pub struct ArmOutcome {
    pub report: TrainReport,
    pub eval: EvalReport,
    pub transitions: TransitionReport,
}

impl Experiment {
    pub fn new(train: LabeledEmbeddings, test: LabeledEmbeddings, prototypes: Matrix, graph: NeighborGraph) -> Result<Self> {
        let train_counts = train.counts();
        let prior = compute_prior(&train_counts)?;
        let train_scores = zero_shot_logits(train.features(), &prototypes)?;
        let test_zs_predictions = zero_shot_logits(test.features(), &prototypes)?.predict();
        Ok(Self {
            train,
            test,
            prototypes,
            graph,
            train_counts,
            prior,
            train_scores,
            test_zs_predictions,
            sigma: BALANCEDNESS_SIGMA,
        })
    }

    /// Trains one arm with `base` as the template; `arm` overrides seed, cue mode and weights.
    pub fn run(&self, arm: &ArmSpec, base: &TrainConfig) -> Result<ArmOutcome> {
        let mut config = base.clone();
        config.seed = arm.seed;
        config.loss.lambda_zs = arm.lambda_zs;
        config.loss.lambda_llm = arm.lambda_llm;
        let labels = self.train.labels();
        let classes = self.train.num_classes();
        let cues = variant_cues(&self.train_scores, labels, arm.k, arm.mode, arm.seed)?;
        let t_zs = expand_targets_zs(&cues, labels, classes)?;
        let t_llm = expand_targets_llm(&self.graph, labels, classes)?;
        let report = train(&self.train, &self.prior, &t_zs, &t_llm, Some(&self.prototypes), &config)?;
        let predictions = report.model.predict(self.test.features())?;
        let eval = evaluate_with_sigma(&predictions, self.test.labels(), &self.train_counts, self.sigma)?;
        let transitions = transition_analysis(&self.test_zs_predictions, &predictions, self.test.labels(), &self.graph)?;
        Ok(ArmOutcome {
            report,
            eval,
            transitions,
        })
    }
}
