use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::model::embedding::EmbeddingTable;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moments for the trainable slice of a table.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn for_table(e: &EmbeddingTable) -> Self {
        let shape = (e.rows(), e.trainable_dim());
        AdamState {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of the trainable columns.
pub fn adam_step(e: &mut EmbeddingTable, grads: &Array2<f64>, state: &mut AdamState, lr: f64) -> Result<()> {
    let shape = (e.rows(), e.trainable_dim());
    if grads.dim() != shape || state.m.dim() != shape || state.v.dim() != shape {
        return Err(Error::DimensionMismatch(format!(
            "gradient {:?} / state {:?} do not match trainable slice {shape:?}",
            grads.dim(),
            state.m.dim()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    Zip::from(e.trainable_mut())
        .and(&mut state.m)
        .and(&mut state.v)
        .and(grads)
        .for_each(|w, m, v, &g| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::embedding::{init_embeddings, EmbeddingRole};

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut e = init_embeddings(3, 2, 0).unwrap();
        let before = e.clone();
        let mut st = AdamState::for_table(&e);
        st.m.fill(1.0);
        st.v.fill(1.0);
        let g = Array2::zeros((3, 2));
        adam_step(&mut e, &g, &mut st, 0.0).unwrap();
        assert_eq!(e, before);
        assert!(st.m.iter().all(|&x| (x - 0.9).abs() < 1e-15));
        assert!(st.v.iter().all(|&x| (x - 0.999).abs() < 1e-15));
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let mut e = init_embeddings(3, 2, 0).unwrap();
        let before = e.clone();
        let mut st = AdamState::for_table(&e);
        adam_step(&mut e, &Array2::zeros((3, 2)), &mut st, 0.01).unwrap();
        assert_eq!(e, before);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        let mut e = EmbeddingTable::new(Array2::zeros((1, 1)), EmbeddingRole::Pretrain, 1).unwrap();
        let mut st = AdamState::for_table(&e);
        let g = Array2::from_elem((1, 1), 3.7);
        let lr = 0.001;
        let mut prev = 0.0;
        for _ in 0..500 {
            adam_step(&mut e, &g, &mut st, lr).unwrap();
            let now = e.row(0)[0];
            assert!(((prev - now) - lr).abs() < 1e-9);
            prev = now;
        }
    }

    #[test]
    fn frozen_columns_untouched() {
        let f = init_embeddings(4, 2, 1).unwrap();
        let p = init_embeddings(4, 3, 2).unwrap();
        let mut e = EmbeddingTable::concatenate(&f, &p).unwrap();
        let mut st = AdamState::for_table(&e);
        let g = Array2::from_elem((4, 2), 0.5);
        for _ in 0..10 {
            adam_step(&mut e, &g, &mut st, 0.1).unwrap();
        }
        assert_eq!(e.frozen(), p.data());
        assert_ne!(e.trainable_part().data(), f.data());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut e = init_embeddings(4, 2, 1).unwrap();
        let mut st = AdamState::for_table(&e);
        assert!(adam_step(&mut e, &Array2::zeros((4, 3)), &mut st, 0.1).is_err());
    }
}
