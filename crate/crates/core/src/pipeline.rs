//! Split, train, evaluate: the experiment protocol shared by the command
//! line and the acceptance suite.

use crate::error::{Error, Result};
use crate::eval::{correlation_from_stats, evaluate, pair_stats, Correlation, EvalReport, PairStat, RankingTask, ScoreFn};
use crate::graph::{split_interactions, InteractionSplit, NodeKind, Relation, SplitSpec, TripartiteGraph};
use crate::metrics::{build_member_metrics, build_tuple_metrics};
use crate::model::train::{pair_losses, positive_pairs, run_variant_with, NoHook, PipelineConfig, StageHook, VariantRun};
use crate::model::Variant;

/// A graph with its full interaction set and one seeded split of it.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub graph: TripartiteGraph,
    pub split: InteractionSplit,
}

impl Experiment {
    pub fn new(graph: TripartiteGraph, spec: &SplitSpec) -> Result<Self> {
        let split = split_interactions(graph.y(), spec)?;
        Ok(Experiment { graph, split })
    }

    /// The graph as seen during training: `Y` replaced by the training
    /// split, or by nothing at all in the cold-start setting.
    pub fn training_graph(&self, cold_start: bool) -> Result<TripartiteGraph> {
        let y = if cold_start {
            Relation::empty(NodeKind::Tuple, NodeKind::Object, self.graph.n_tuples(), self.graph.n_objects())
        } else {
            self.split.train.clone()
        };
        self.graph.with_tuple_interactions(y)
    }

    /// Validation ranking (training positives excluded), if the validation
    /// split is non-empty.
    pub fn valid_task(&self) -> Option<RankingTask> {
        RankingTask::new(&self.split.valid, &[&self.split.train]).ok()
    }

    /// Test ranking with training and validation positives excluded.
    pub fn test_task(&self) -> Result<RankingTask> {
        RankingTask::new(&self.split.test, &[&self.split.train, &self.split.valid])
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub ks: Vec<usize>,
    /// Train without any tuple interactions; early stopping falls back to
    /// the training loss.
    pub cold_start: bool,
    /// Attach the per-pair loss correlation block to the report.
    pub correlation: bool,
    pub score_fn: ScoreFn,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            ks: crate::eval::DEFAULT_KS.to_vec(),
            cold_start: false,
            correlation: false,
            score_fn: ScoreFn::Cosine,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub run: VariantRun,
    pub report: EvalReport,
}

pub fn run_and_evaluate(exp: &Experiment, variant: Variant, cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunOutput> {
    run_and_evaluate_with(exp, variant, cfg, opts, &mut NoHook)
}

pub fn run_and_evaluate_with(
    exp: &Experiment,
    variant: Variant,
    cfg: &PipelineConfig,
    opts: &RunOptions,
    hook: &mut dyn StageHook,
) -> Result<RunOutput> {
    let train_graph = exp.training_graph(opts.cold_start)?;
    let valid = if opts.cold_start { None } else { exp.valid_task() };
    let run = run_variant_with(&train_graph, variant, cfg, valid.as_ref(), hook)?;
    let test = exp.test_task()?;
    let metrics = evaluate(&test, &run.embeddings, &opts.ks, opts.score_fn)?;
    let correlation = if opts.correlation {
        Some(stage_one_correlation(&train_graph, &run)?)
    } else {
        None
    };
    let report = EvalReport {
        label: variant.name().to_string(),
        recommendees: test.recommendees().len(),
        metrics,
        correlation,
        config_hash: None,
    };
    Ok(RunOutput { run, report })
}

/// Per-pair losses of the first stage, computed with that stage's best
/// embeddings over its own metric set.
pub fn stage_one_pair_stats(train_graph: &TripartiteGraph, run: &VariantRun) -> Result<Vec<PairStat>> {
    let summary = run
        .provenance
        .stages
        .first()
        .ok_or_else(|| Error::InvalidConfig("run has no stages".into()))?;
    let metrics = match summary.data.as_str() {
        "member" => build_member_metrics(train_graph)?,
        _ => build_tuple_metrics(train_graph.y())?,
    };
    let pairs = positive_pairs(&metrics);
    let losses = pair_losses(&metrics, &run.stages[0].embeddings, &summary.config, &pairs);
    pair_stats(&pairs, &losses, &metrics)
}

/// Pearson correlations of the first stage's per-pair losses.
pub fn stage_one_correlation(train_graph: &TripartiteGraph, run: &VariantRun) -> Result<Correlation> {
    correlation_from_stats(&stage_one_pair_stats(train_graph, run)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::UniverseCounts;
    use crate::model::TrainConfig;
    use crate::synth::{community_graph, CommunityShape};

    fn small() -> Experiment {
        let shape = CommunityShape {
            counts: UniverseCounts { tuples: 40, members: 80, objects: 30 },
            y_edges: 200,
            x_edges: 400,
            z_edges: 160,
            communities: 4,
            locality: 0.9,
        };
        let g = community_graph(1, &shape).unwrap();
        Experiment::new(g, &SplitSpec { train: 0.5, test: 0.3, valid: 0.1, seed: 0 }).unwrap()
    }

    fn quick() -> PipelineConfig {
        let c = TrainConfig { dim: 8, learning_rate: 0.01, batch_size: 64, max_epochs: 4, ..TrainConfig::default() };
        PipelineConfig { pretrain: c.clone(), finetune: c }
    }

    #[test]
    fn cold_start_training_graph_has_no_interactions() {
        let exp = small();
        assert!(exp.training_graph(true).unwrap().y().is_empty());
        assert_eq!(exp.training_graph(false).unwrap().y(), &exp.split.train);
    }

    #[test]
    fn report_is_reproducible_and_bounded() {
        let exp = small();
        let opts = RunOptions { correlation: true, ..RunOptions::default() };
        let a = run_and_evaluate(&exp, Variant::Cdr, &quick(), &opts).unwrap();
        let b = run_and_evaluate(&exp, Variant::Cdr, &quick(), &opts).unwrap();
        assert_eq!(a.report.to_jsonl(), b.report.to_jsonl());
        for m in &a.report.metrics {
            for v in [m.recall, m.precision, m.ndcg, m.f1] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert!(a.report.correlation.as_ref().unwrap().pairs > 3);
    }

    #[test]
    fn cold_start_pretraining_evaluates() {
        let exp = small();
        let opts = RunOptions { cold_start: true, ..RunOptions::default() };
        let out = run_and_evaluate(&exp, Variant::CdrP, &quick(), &opts).unwrap();
        assert_eq!(out.report.metrics.len(), 3);
        assert!(run_and_evaluate(&exp, Variant::Cdr, &quick(), &opts).is_err());
    }
}
