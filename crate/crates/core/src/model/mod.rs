//! Embedding tables, objectives, optimiser and the two-stage training
//! pipeline.

pub mod adam;
pub mod checkpoint;
pub mod embedding;
pub mod gradcheck;
pub mod loss;
pub mod train;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use embedding::{init_embeddings, EmbeddingRole, EmbeddingTable};
pub use loss::{cd_loss, cd_loss_grad, Batch, Candidates, PairwiseLoss, PositivePair, Supervision, WeightedPair};
pub use train::{finetune, pretrain, run_variant, StageOutcome, StageTrainer, TrainState, VariantRun};

/// Denominator candidates: the whole joint index space or `n` uniform
/// draws per anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Negatives {
    Full,
    Sampled(usize),
}

impl Negatives {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(Negatives::Full),
            _ => s.strip_prefix("sampled:").and_then(|n| n.parse().ok()).filter(|&n| n > 0).map(Negatives::Sampled),
        }
    }
}

impl fmt::Display for Negatives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Negatives::Full => f.write_str("full"),
            Negatives::Sampled(n) => write!(f, "sampled:{n}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Cd,
    Origin,
    Mse,
    Ce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cd => "cd",
            LossKind::Origin => "origin",
            LossKind::Mse => "mse",
            LossKind::Ce => "ce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cd" => Some(LossKind::Cd),
            "origin" => Some(LossKind::Origin),
            "mse" => Some(LossKind::Mse),
            "ce" => Some(LossKind::Ce),
            _ => None,
        }
    }

    pub fn pairwise(self) -> Option<PairwiseLoss> {
        match self {
            LossKind::Cd => None,
            LossKind::Origin => Some(PairwiseLoss::Origin),
            LossKind::Mse => Some(PairwiseLoss::Mse),
            LossKind::Ce => Some(PairwiseLoss::Ce),
        }
    }
}

/// Negatives drawn per positive pair by the pairwise objectives when the
/// contrastive candidate set is `Full`.
pub const PAIRWISE_DEFAULT_NEGATIVES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub negatives: Negatives,
    pub loss: LossKind,
    pub binarize_c: bool,
    pub binarize_d: bool,
    pub max_epochs: usize,
    /// Cut-off of the validation NDCG used for early stopping.
    pub valid_k: usize,
    /// Relative loss decrease that counts as progress when stopping on the
    /// training loss.
    pub plateau_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            tau: 1.0,
            learning_rate: 0.001,
            batch_size: 1024,
            patience: 10,
            seed: 0,
            negatives: Negatives::Full,
            loss: LossKind::Cd,
            binarize_c: false,
            binarize_d: false,
            max_epochs: 200,
            valid_k: 20,
            plateau_tolerance: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.valid_k == 0 {
            return bad("validation K must be at least 1".into());
        }
        if !(self.plateau_tolerance >= 0.0) {
            return bad("plateau tolerance must be non-negative".into());
        }
        Ok(())
    }
}

/// Training pipelines compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Pre-train on member data, fine-tune on tuple interactions.
    Cdr,
    /// Pre-training only.
    CdrP,
    /// Fine-tuning only, from a random start.
    CdrF,
    /// Stage data swapped.
    CdrR,
    WithoutC,
    WithoutD,
    WithoutCd,
    Origin,
    Mse,
    Ce,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Cdr,
        Variant::CdrP,
        Variant::CdrF,
        Variant::CdrR,
        Variant::WithoutC,
        Variant::WithoutD,
        Variant::WithoutCd,
        Variant::Origin,
        Variant::Mse,
        Variant::Ce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cdr => "CDR",
            Variant::CdrP => "CDR-P",
            Variant::CdrF => "CDR-F",
            Variant::CdrR => "CDR-R",
            Variant::WithoutC => "w/o-c",
            Variant::WithoutD => "w/o-d",
            Variant::WithoutCd => "w/o-cd",
            Variant::Origin => "Origin",
            Variant::Mse => "MSE",
            Variant::Ce => "CE",
        }
    }

    /// Case-insensitive; `cdr-origin`, `wo-c` style spellings are accepted.
    pub fn parse(s: &str) -> Option<Self> {
        let key: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        match key.as_str() {
            "cdr" => Some(Variant::Cdr),
            "cdrp" => Some(Variant::CdrP),
            "cdrf" => Some(Variant::CdrF),
            "cdrr" => Some(Variant::CdrR),
            "woc" => Some(Variant::WithoutC),
            "wod" => Some(Variant::WithoutD),
            "wocd" | "wocandd" => Some(Variant::WithoutCd),
            "origin" | "cdrorigin" => Some(Variant::Origin),
            "mse" | "cdrmse" => Some(Variant::Mse),
            "ce" | "cdrce" => Some(Variant::Ce),
            _ => None,
        }
    }

    pub fn uses_member_data(self) -> bool {
        self != Variant::CdrF
    }

    pub fn uses_tuple_interactions(self) -> bool {
        self != Variant::CdrP
    }

    /// Applies the variant's supervision and loss overrides to a stage
    /// configuration.
    pub fn adjust(self, cfg: &TrainConfig) -> TrainConfig {
        let mut cfg = cfg.clone();
        match self {
            Variant::WithoutC => cfg.binarize_c = true,
            Variant::WithoutD => cfg.binarize_d = true,
            Variant::WithoutCd => {
                cfg.binarize_c = true;
                cfg.binarize_d = true;
            }
            Variant::Origin => cfg.loss = LossKind::Origin,
            Variant::Mse => cfg.loss = LossKind::Mse,
            Variant::Ce => cfg.loss = LossKind::Ce,
            Variant::Cdr | Variant::CdrP | Variant::CdrF | Variant::CdrR => {}
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
