//! Epoch loop, early stopping and the two-stage pipeline.
//!
//! An epoch is one pass over every positive pair of the stage's metric set
//! in a seeded shuffled order; a batch is a contiguous slice of that order.
//! The shuffle of epoch `k` depends only on `(seed, k)`, so a run resumed
//! from a saved [`TrainState`] follows the uninterrupted trajectory exactly.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, RankingTask, ScoreFn};
use crate::graph::TripartiteGraph;
use crate::metrics::{build_member_metrics, build_tuple_metrics, MetricSet};
use crate::model::adam::{adam_step, AdamState};
use crate::model::embedding::{init_embeddings, EmbeddingRole, EmbeddingTable};
use crate::model::loss::{cd_loss, cd_loss_grad, pairwise_loss_grad, Batch, Candidates, PositivePair, Supervision, WeightedPair};
use crate::model::{Negatives, TrainConfig, Variant, PAIRWISE_DEFAULT_NEGATIVES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub valid_ndcg: Option<f64>,
    pub improved: bool,
    pub patience_counter: usize,
    pub skipped_pairs: usize,
}

/// Patience counter over a score where larger is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records an epoch's score; returns whether it beat the best by more
    /// than `margin`.
    pub fn observe(&mut self, epoch: usize, score: f64, margin: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some(best) => score > best + margin,
        };
        if improved {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// Everything needed to continue a stage: current weights, optimiser
/// moments, best checkpoint and the log so far.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub current: EmbeddingTable,
    pub best: EmbeddingTable,
    pub adam: AdamState,
    pub epoch: usize,
    pub stopper: EarlyStopper,
    pub log: Vec<EpochRecord>,
    pub finished: bool,
}

impl TrainState {
    pub fn fresh(init: EmbeddingTable, patience: usize) -> Self {
        TrainState {
            adam: AdamState::for_table(&init),
            best: init.clone(),
            current: init,
            epoch: 0,
            stopper: EarlyStopper::new(patience),
            log: Vec::new(),
            finished: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub stage: String,
    /// Best-checkpoint embeddings.
    pub embeddings: EmbeddingTable,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

pub struct StageTrainer<'a> {
    stage: String,
    metrics: &'a MetricSet,
    cfg: TrainConfig,
    valid: Option<&'a RankingTask>,
    pairs: Vec<PositivePair>,
    state: TrainState,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// All positive pairs of a metric set in `(v1, v2)` order.
pub fn positive_pairs(metrics: &MetricSet) -> Vec<PositivePair> {
    metrics
        .positive_pairs()
        .into_iter()
        .map(|(anchor, positive, c)| PositivePair { anchor, positive, c })
        .collect()
}

/// `n` distinct uniform draws from `0..size` without `exclude`.
fn sample_others(rng: &mut ChaCha8Rng, size: usize, exclude: usize, n: usize) -> Vec<usize> {
    let pool = size - 1;
    index::sample(rng, pool, n.min(pool))
        .into_iter()
        .map(|i| if i >= exclude { i + 1 } else { i })
        .collect()
}

impl<'a> StageTrainer<'a> {
    pub fn new(stage: &str, metrics: &'a MetricSet, init: EmbeddingTable, cfg: &TrainConfig, valid: Option<&'a RankingTask>) -> Result<Self> {
        let state = TrainState::fresh(init, cfg.patience);
        Self::resume(stage, metrics, state, cfg, valid)
    }

    pub fn resume(stage: &str, metrics: &'a MetricSet, state: TrainState, cfg: &TrainConfig, valid: Option<&'a RankingTask>) -> Result<Self> {
        cfg.validate()?;
        if state.current.rows() != metrics.joint_size() {
            return Err(Error::DimensionMismatch(format!(
                "{stage}: embedding table has {} rows, metric set has {} nodes",
                state.current.rows(),
                metrics.joint_size()
            )));
        }
        let pairs = positive_pairs(metrics);
        if pairs.is_empty() {
            return Err(Error::EmptyPositiveSet(format!("{stage} metric set has no pair with positive consistency")));
        }
        Ok(StageTrainer {
            stage: stage.to_string(),
            metrics,
            cfg: cfg.clone(),
            valid,
            pairs,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn pairs(&self) -> &[PositivePair] {
        &self.pairs
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    fn supervision(&self) -> Supervision<'a> {
        Supervision::binarized(self.metrics, self.cfg.binarize_c, self.cfg.binarize_d)
    }

    fn batch_step(&mut self, chunk: &[usize], rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
        let sup = self.supervision();
        let pairs: Vec<PositivePair> = chunk.iter().map(|&i| self.pairs[i]).collect();
        let n = self.metrics.joint_size();
        let (loss, skipped, grad) = match self.cfg.loss.pairwise() {
            None => {
                let candidates = match self.cfg.negatives {
                    Negatives::Full => Candidates::All,
                    Negatives::Sampled(k) => {
                        let mut anchors: Vec<usize> = pairs.iter().map(|p| p.anchor).collect();
                        anchors.sort_unstable();
                        anchors.dedup();
                        Candidates::Sampled(anchors.into_iter().map(|a| (a, sample_others(rng, n, a, k))).collect::<BTreeMap<_, _>>())
                    }
                };
                let batch = Batch { pairs, candidates };
                let (out, grad) = cd_loss_grad(&batch, sup, &self.state.current, self.cfg.tau);
                (out.loss, out.skipped_pairs, grad)
            }
            Some(kind) => {
                let k = match self.cfg.negatives {
                    Negatives::Full => PAIRWISE_DEFAULT_NEGATIVES,
                    Negatives::Sampled(k) => k,
                };
                let mut weighted = Vec::with_capacity(pairs.len() * (k + 1));
                for p in &pairs {
                    weighted.push(WeightedPair {
                        v1: p.anchor,
                        v2: p.positive,
                        c: sup.c_weight(p.c),
                        d: sup.discrepancy(p.anchor, p.positive),
                    });
                    for v in sample_others(rng, n, p.anchor, k) {
                        weighted.push(WeightedPair {
                            v1: p.anchor,
                            v2: v,
                            c: sup.consistency(p.anchor, v),
                            d: sup.discrepancy(p.anchor, v),
                        });
                    }
                }
                let (loss, grad) = pairwise_loss_grad(kind, &weighted, &self.state.current);
                (loss, 0, grad)
            }
        };
        adam_step(&mut self.state.current, &grad, &mut self.state.adam, self.cfg.learning_rate)?;
        Ok((loss, skipped))
    }

    /// Runs one epoch, then validates and updates the patience counter.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.state.epoch + 1;
        let mut rng = epoch_rng(self.cfg.seed, epoch);
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut skipped = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let (l, s) = self.batch_step(chunk, &mut rng)?;
            total += l;
            skipped += s;
        }
        if !total.is_finite() {
            return Err(Error::Diverged {
                stage: self.stage.clone(),
                epoch,
            });
        }
        let scored = (self.pairs.len() - skipped.min(self.pairs.len())).max(1);
        let mean_loss = total / scored as f64;

        let (valid_ndcg, improved) = match self.valid {
            Some(task) => {
                let ndcg = evaluate(task, &self.state.current, &[self.cfg.valid_k], ScoreFn::Cosine)?[0].ndcg;
                (Some(ndcg), self.state.stopper.observe(epoch, ndcg, 0.0))
            }
            None => {
                let margin = self.cfg.plateau_tolerance * mean_loss.abs();
                (None, self.state.stopper.observe(epoch, -mean_loss, margin))
            }
        };
        if improved {
            self.state.best = self.state.current.clone();
        }
        self.state.epoch = epoch;
        self.state.finished = self.state.stopper.should_stop() || epoch >= self.cfg.max_epochs;
        log::info!(
            "{} epoch {epoch}: loss {mean_loss:.6}{} patience {}/{}",
            self.stage,
            valid_ndcg.map(|v| format!(" valid NDCG@{} {v:.4}", self.cfg.valid_k)).unwrap_or_default(),
            self.state.stopper.bad_epochs,
            self.cfg.patience
        );
        self.state.log.push(EpochRecord {
            stage: self.stage.clone(),
            epoch,
            loss: mean_loss,
            valid_ndcg,
            improved,
            patience_counter: self.state.stopper.bad_epochs,
            skipped_pairs: skipped,
        });
        Ok(self.state.log.last().expect("just pushed"))
    }

    pub fn into_outcome(self) -> StageOutcome {
        let stopped_early = self.state.stopper.should_stop();
        StageOutcome {
            stage: self.stage,
            embeddings: self.state.best,
            log: self.state.log,
            best_epoch: self.state.stopper.best_epoch,
            epochs_run: self.state.epoch,
            stopped_early,
        }
    }

    /// Trains to completion, calling `after_epoch` with the state after
    /// every epoch. A `false` from the hook interrupts the run.
    pub fn run_with(mut self, after_epoch: &mut dyn FnMut(&str, &TrainState) -> Result<bool>) -> Result<StageOutcome> {
        while !self.state.finished {
            self.run_epoch()?;
            if !after_epoch(&self.stage, &self.state)? {
                return Err(Error::Interrupted {
                    stage: self.stage,
                    epoch: self.state.epoch,
                });
            }
        }
        Ok(self.into_outcome())
    }

    pub fn run(self) -> Result<StageOutcome> {
        self.run_with(&mut |_, _| Ok(true))
    }
}

/// Per-pair contrastive losses over all candidates, in `pairs` order.
pub fn pair_losses(metrics: &MetricSet, e: &EmbeddingTable, cfg: &TrainConfig, pairs: &[PositivePair]) -> Vec<Option<f64>> {
    let sup = Supervision::binarized(metrics, cfg.binarize_c, cfg.binarize_d);
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(cfg.batch_size.max(1)) {
        let batch = Batch {
            pairs: chunk.to_vec(),
            candidates: Candidates::All,
        };
        out.extend(cd_loss(&batch, sup, e, cfg.tau).per_pair);
    }
    out
}

/// Per-stage configurations of the two-stage pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            pretrain: TrainConfig::default(),
            finetune: TrainConfig::default(),
        }
    }
}

/// Observer for a multi-stage run: supplies saved states to resume from
/// and sees every epoch.
pub trait StageHook {
    fn resume(&mut self, _stage: &str) -> Result<Option<TrainState>> {
        Ok(None)
    }

    /// Returning `false` interrupts the run.
    fn after_epoch(&mut self, _stage: &str, _state: &TrainState) -> Result<bool> {
        Ok(true)
    }
}

/// A hook that does nothing.
pub struct NoHook;

impl StageHook for NoHook {}

fn run_stage(
    stage: &str,
    metrics: &MetricSet,
    init: impl FnOnce() -> Result<EmbeddingTable>,
    cfg: &TrainConfig,
    valid: Option<&RankingTask>,
    hook: &mut dyn StageHook,
) -> Result<StageOutcome> {
    let trainer = match hook.resume(stage)? {
        Some(state) => StageTrainer::resume(stage, metrics, state, cfg, valid)?,
        None => StageTrainer::new(stage, metrics, init()?, cfg, valid)?,
    };
    trainer.run_with(&mut |s, st| hook.after_epoch(s, st))
}

/// Pre-training on member-derived metrics from a random start.
pub fn pretrain(graph: &TripartiteGraph, cfg: &TrainConfig, valid: Option<&RankingTask>) -> Result<StageOutcome> {
    let metrics = build_member_metrics(graph)?;
    let init = || Ok(init_embeddings(metrics.joint_size(), cfg.dim, cfg.seed)?.with_role(EmbeddingRole::Pretrain));
    run_stage("pretrain", &metrics, init, cfg, valid, &mut NoHook)
}

/// Builds the fine-tuning start table: `E^f` copied from `E^p` and
/// concatenated with a frozen `E^p`, or a fresh random `E^f` alone.
pub fn finetune_init(pre: Option<&EmbeddingTable>, rows: usize, cfg: &TrainConfig) -> Result<EmbeddingTable> {
    match pre {
        Some(p) => {
            if p.rows() != rows {
                return Err(Error::DimensionMismatch(format!(
                    "pre-trained table has {} rows, fine-tuning needs {rows}",
                    p.rows()
                )));
            }
            let fine = p.clone().with_role(EmbeddingRole::Finetune);
            EmbeddingTable::concatenate(&fine, p)
        }
        None => Ok(init_embeddings(rows, cfg.dim, cfg.seed)?.with_role(EmbeddingRole::Finetune)),
    }
}

/// Fine-tuning on tuple-interaction metrics.
pub fn finetune(pre: Option<&EmbeddingTable>, y_train: &crate::graph::Relation, cfg: &TrainConfig, valid: Option<&RankingTask>) -> Result<StageOutcome> {
    let metrics = build_tuple_metrics(y_train)?;
    let init = || finetune_init(pre, metrics.joint_size(), cfg);
    run_stage("finetune", &metrics, init, cfg, valid, &mut NoHook)
}

/// How a run was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub variant: String,
    pub stages: Vec<StageSummary>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub data: String,
    pub config: TrainConfig,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub embeddings: EmbeddingTable,
    pub stages: Vec<StageOutcome>,
    pub provenance: Provenance,
}

fn variant_error(variant: Variant, reason: &str) -> Error {
    Error::VariantData {
        variant: variant.name().to_string(),
        reason: reason.to_string(),
    }
}

/// Checks the data a variant needs before any training starts.
pub fn check_variant_data(graph: &TripartiteGraph, variant: Variant) -> Result<()> {
    if variant.uses_member_data() && (graph.x().is_empty() || graph.z().is_empty()) {
        return Err(variant_error(variant, "member interactions and affiliations must be non-empty"));
    }
    if variant.uses_tuple_interactions() && graph.y().is_empty() {
        return Err(variant_error(variant, "training tuple interactions are empty"));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Source {
    Member,
    Tuple,
}

/// Runs a variant on `graph`, whose `Y` must hold the training
/// interactions only.
pub fn run_variant(graph: &TripartiteGraph, variant: Variant, cfg: &PipelineConfig, valid: Option<&RankingTask>) -> Result<VariantRun> {
    run_variant_with(graph, variant, cfg, valid, &mut NoHook)
}

pub fn run_variant_with(
    graph: &TripartiteGraph,
    variant: Variant,
    cfg: &PipelineConfig,
    valid: Option<&RankingTask>,
    hook: &mut dyn StageHook,
) -> Result<VariantRun> {
    check_variant_data(graph, variant)?;
    let started = Instant::now();
    let pre_cfg = variant.adjust(&cfg.pretrain);
    let fine_cfg = variant.adjust(&cfg.finetune);
    let plan: Vec<(Source, bool)> = match variant {
        Variant::CdrP => vec![(Source::Member, false)],
        Variant::CdrF => vec![(Source::Tuple, true)],
        Variant::CdrR => vec![(Source::Tuple, false), (Source::Member, true)],
        _ => vec![(Source::Member, false), (Source::Tuple, true)],
    };

    let mut stages: Vec<StageOutcome> = Vec::new();
    let mut summaries = Vec::new();
    let mut previous: Option<EmbeddingTable> = None;
    for (source, second_stage) in plan {
        let metrics = match source {
            Source::Member => build_member_metrics(graph)?,
            Source::Tuple => build_tuple_metrics(graph.y())?,
        };
        let (stage, stage_cfg) = if second_stage { ("finetune", &fine_cfg) } else { ("pretrain", &pre_cfg) };
        let prev = previous.as_ref();
        let init = || {
            if second_stage {
                finetune_init(prev, metrics.joint_size(), stage_cfg)
            } else {
                Ok(init_embeddings(metrics.joint_size(), stage_cfg.dim, stage_cfg.seed)?.with_role(EmbeddingRole::Pretrain))
            }
        };
        let outcome = run_stage(stage, &metrics, init, stage_cfg, valid, hook)?;
        summaries.push(StageSummary {
            stage: stage.to_string(),
            data: match source {
                Source::Member => "member".into(),
                Source::Tuple => "tuple".into(),
            },
            config: stage_cfg.clone(),
            epochs_run: outcome.epochs_run,
            best_epoch: outcome.best_epoch,
            stopped_early: outcome.stopped_early,
        });
        previous = Some(outcome.embeddings.clone());
        stages.push(outcome);
    }
    let embeddings = previous.expect("every plan has a stage");
    Ok(VariantRun {
        variant,
        embeddings,
        stages,
        provenance: Provenance {
            variant: variant.name().to_string(),
            stages: summaries,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    })
}
