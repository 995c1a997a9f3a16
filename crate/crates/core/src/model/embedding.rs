use ndarray::{concatenate, s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingRole {
    Pretrain,
    Finetune,
    /// Fine-tuned block followed by the frozen pre-trained block.
    Concatenated,
}

impl EmbeddingRole {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingRole::Pretrain => "pretrain",
            EmbeddingRole::Finetune => "finetune",
            EmbeddingRole::Concatenated => "concatenated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(EmbeddingRole::Pretrain),
            "finetune" => Some(EmbeddingRole::Finetune),
            "concatenated" => Some(EmbeddingRole::Concatenated),
            _ => None,
        }
    }
}

/// One embedding row per tuple and object (joint index order). The leading
/// `trainable` columns are updated by the optimiser; the rest are frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    data: Array2<f64>,
    role: EmbeddingRole,
    trainable: usize,
}

/// Uniform initialisation in `[-1/sqrt(dim), 1/sqrt(dim)]`.
pub fn init_embeddings(n_rows: usize, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim == 0 {
        return Err(Error::InvalidConfig("embedding dimension must be at least 1".into()));
    }
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Array2::zeros((n_rows, dim));
    for mut row in data.rows_mut() {
        loop {
            for x in row.iter_mut() {
                *x = rng.random_range(-bound..=bound);
            }
            if row.iter().any(|&x| x != 0.0) {
                break;
            }
        }
    }
    Ok(EmbeddingTable {
        data,
        role: EmbeddingRole::Pretrain,
        trainable: dim,
    })
}

impl EmbeddingTable {
    pub fn new(data: Array2<f64>, role: EmbeddingRole, trainable: usize) -> Result<Self> {
        if trainable > data.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{trainable} trainable columns exceed dimension {}",
                data.ncols()
            )));
        }
        Ok(EmbeddingTable {
            data,
            role,
            trainable,
        })
    }

    /// `E = E^f ∥ E^p` with the pre-trained block frozen.
    pub fn concatenate(fine: &EmbeddingTable, pre: &EmbeddingTable) -> Result<Self> {
        if fine.rows() != pre.rows() {
            return Err(Error::DimensionMismatch(format!(
                "cannot concatenate {} rows with {} rows",
                fine.rows(),
                pre.rows()
            )));
        }
        let data = concatenate(Axis(1), &[fine.data.view(), pre.data.view()]).expect("row counts match");
        Ok(EmbeddingTable {
            data,
            role: EmbeddingRole::Concatenated,
            trainable: fine.dim(),
        })
    }

    pub fn with_role(mut self, role: EmbeddingRole) -> Self {
        self.role = role;
        self
    }

    pub fn role(&self) -> EmbeddingRole {
        self.role
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn trainable_dim(&self) -> usize {
        self.trainable
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn row(&self, v: usize) -> ArrayView1<'_, f64> {
        self.data.row(v)
    }

    pub fn trainable_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let t = self.trainable;
        self.data.slice_mut(s![.., ..t])
    }

    pub fn frozen(&self) -> ArrayView2<'_, f64> {
        self.data.slice(s![.., self.trainable..])
    }

    /// Copy of the trainable block as a stand-alone table.
    pub fn trainable_part(&self) -> EmbeddingTable {
        EmbeddingTable {
            data: self.data.slice(s![.., ..self.trainable]).to_owned(),
            role: EmbeddingRole::Finetune,
            trainable: self.trainable,
        }
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Mutable access to every entry, frozen columns included. Meant for
    /// tests and finite-difference probes.
    pub fn data_mut_unchecked(&mut self) -> ArrayViewMut2<'_, f64> {
        self.data.view_mut()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.mapv_inplace(|x| x * factor);
    }
}
