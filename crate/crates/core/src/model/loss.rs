//! Training objectives and their closed-form gradients.
//!
//! The contrastive objective for a positive pair `(a, p)` is
//!
//! ```text
//! ℓ(a, p) = −log [ c(a,p) · exp(cos(a,p)/τ) / Σ_{v ≠ a} d(a,v) · exp(cos(a,v)/τ) ]
//! ```
//!
//! The three pairwise objectives (`Origin`, `Mse`, `Ce`) act on the dot
//! product `x = e₁ᵀe₂` of a pair carrying both its consistency and
//! discrepancy.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::metrics::MetricSet;
use crate::model::embedding::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositivePair {
    pub anchor: usize,
    pub positive: usize,
    pub c: f64,
}

/// Denominator candidates of a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Candidates {
    /// Every joint index except the anchor itself.
    All,
    /// Per-anchor candidate lists (anchor excluded, no repeats).
    Sampled(BTreeMap<usize, Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub pairs: Vec<PositivePair>,
    pub candidates: Candidates,
}

/// Consistency/discrepancy lookups with optional binarisation.
#[derive(Clone, Copy, Debug)]
pub struct Supervision<'a> {
    pub metrics: &'a MetricSet,
    pub binarize_c: bool,
    pub binarize_d: bool,
}

#[inline]
fn indicator(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl<'a> Supervision<'a> {
    pub fn new(metrics: &'a MetricSet) -> Self {
        Supervision {
            metrics,
            binarize_c: false,
            binarize_d: false,
        }
    }

    pub fn binarized(metrics: &'a MetricSet, binarize_c: bool, binarize_d: bool) -> Self {
        Supervision {
            metrics,
            binarize_c,
            binarize_d,
        }
    }

    #[inline]
    pub fn c_weight(&self, c: f64) -> f64 {
        if self.binarize_c {
            indicator(c)
        } else {
            c
        }
    }

    #[inline]
    pub fn d_weight(&self, d: f64) -> f64 {
        if self.binarize_d {
            indicator(d)
        } else {
            d
        }
    }

    pub fn consistency(&self, v1: usize, v2: usize) -> f64 {
        self.c_weight(self.metrics.consistency(v1, v2))
    }

    pub fn discrepancy(&self, v1: usize, v2: usize) -> f64 {
        self.d_weight(self.metrics.discrepancy(v1, v2))
    }

    pub fn discrepancy_row_into(&self, v1: usize, out: &mut [f64]) {
        self.metrics.discrepancy_row_into(v1, out);
        if self.binarize_d {
            out.iter_mut().for_each(|x| *x = indicator(*x));
        }
    }
}

/// Value of the contrastive objective on a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CdLoss {
    pub loss: f64,
    /// Per-pair terms in batch order; `None` for pairs whose anchor has a
    /// zero denominator.
    pub per_pair: Vec<Option<f64>>,
    pub skipped_pairs: usize,
    pub degenerate_anchors: usize,
}

/// Unit-normalised rows and their original norms. Zero rows stay zero.
fn normalize_rows(e: &EmbeddingTable) -> (Array2<f64>, Array1<f64>) {
    let mut u = e.data().to_owned();
    let mut norms = Array1::zeros(u.nrows());
    for (mut row, n) in u.rows_mut().into_iter().zip(norms.iter_mut()) {
        let norm = row.dot(&row).sqrt();
        *n = norm;
        if norm > 0.0 {
            row.mapv_inplace(|x| x / norm);
        }
    }
    (u, norms)
}

/// Maps a gradient w.r.t. unit rows back to the raw rows and keeps the
/// trainable columns.
fn unnormalize_grad(grad_u: Array2<f64>, u: &Array2<f64>, norms: &Array1<f64>, trainable: usize) -> Array2<f64> {
    let mut out = Array2::zeros((u.nrows(), trainable));
    for v in 0..u.nrows() {
        let norm = norms[v];
        if norm == 0.0 {
            continue;
        }
        let g = grad_u.row(v);
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let uv = u.row(v);
        let proj = g.dot(&uv);
        let mut o = out.row_mut(v);
        for j in 0..trainable {
            o[j] = (g[j] - proj * uv[j]) / norm;
        }
    }
    out
}

fn add_scaled(dst: &mut ndarray::ArrayViewMut1<f64>, src: &ArrayView1<f64>, scale: f64) {
    dst.scaled_add(scale, src);
}

/// Contrastive loss on a batch.
pub fn cd_loss(batch: &Batch, sup: Supervision<'_>, e: &EmbeddingTable, tau: f64) -> CdLoss {
    cd_forward(batch, sup, e, tau, false).0
}

/// Contrastive loss and its gradient w.r.t. the trainable columns of `e`.
pub fn cd_loss_grad(batch: &Batch, sup: Supervision<'_>, e: &EmbeddingTable, tau: f64) -> (CdLoss, Array2<f64>) {
    let (loss, grad) = cd_forward(batch, sup, e, tau, true);
    (loss, grad.expect("gradient requested"))
}

struct AnchorTerms {
    /// `log Σ d·exp(cos/τ)` per anchor, `None` if degenerate.
    log_denominator: Vec<Option<f64>>,
}

fn cd_forward(
    batch: &Batch,
    sup: Supervision<'_>,
    e: &EmbeddingTable,
    tau: f64,
    want_grad: bool,
) -> (CdLoss, Option<Array2<f64>>) {
    assert!(tau > 0.0, "temperature must be positive");
    let n = e.rows();
    let (u, norms) = normalize_rows(e);

    let mut anchors: Vec<usize> = batch.pairs.iter().map(|p| p.anchor).collect();
    anchors.sort_unstable();
    anchors.dedup();
    let slot: BTreeMap<usize, usize> = anchors.iter().enumerate().map(|(i, &a)| (a, i)).collect();
    let mut multiplicity = vec![0.0f64; anchors.len()];
    for p in &batch.pairs {
        multiplicity[slot[&p.anchor]] += 1.0;
    }

    let shift = 1.0 / tau;
    let mut grad_u = want_grad.then(|| Array2::<f64>::zeros(u.raw_dim()));
    let mut terms = AnchorTerms {
        log_denominator: vec![None; anchors.len()],
    };
    let mut d_row = vec![0.0; n];

    match &batch.candidates {
        Candidates::All => {
            let u_anchor = u.select(Axis(0), &anchors);
            // scores become the softmax coefficients in place
            let mut coef = u_anchor.dot(&u.t());
            for (i, &a) in anchors.iter().enumerate() {
                sup.discrepancy_row_into(a, &mut d_row);
                d_row[a] = 0.0;
                let mut row = coef.row_mut(i);
                let mut total = 0.0;
                for (x, &w) in row.iter_mut().zip(&d_row) {
                    let val = if w > 0.0 { w * ((*x - 1.0) / tau).exp() } else { 0.0 };
                    *x = val;
                    total += val;
                }
                if total > 0.0 && total.is_finite() {
                    terms.log_denominator[i] = Some(shift + total.ln());
                    let scale = multiplicity[i] / (total * tau);
                    row.mapv_inplace(|x| x * scale);
                } else {
                    row.fill(0.0);
                }
            }
            if let Some(g) = grad_u.as_mut() {
                let pulled = coef.dot(&u);
                for (i, &a) in anchors.iter().enumerate() {
                    let mut ga = g.row_mut(a);
                    ga += &pulled.row(i);
                }
                *g += &coef.t().dot(&u_anchor);
            }
        }
        Candidates::Sampled(lists) => {
            for (i, &a) in anchors.iter().enumerate() {
                let Some(cands) = lists.get(&a) else { continue };
                let ua = u.row(a);
                let mut weights = Vec::with_capacity(cands.len());
                let mut total = 0.0;
                for &v in cands {
                    if v == a {
                        weights.push(0.0);
                        continue;
                    }
                    let w = sup.discrepancy(a, v);
                    let val = if w > 0.0 { w * ((ua.dot(&u.row(v)) - 1.0) / tau).exp() } else { 0.0 };
                    weights.push(val);
                    total += val;
                }
                if !(total > 0.0 && total.is_finite()) {
                    continue;
                }
                terms.log_denominator[i] = Some(shift + total.ln());
                if let Some(g) = grad_u.as_mut() {
                    let scale = multiplicity[i] / (total * tau);
                    for (&v, &val) in cands.iter().zip(&weights) {
                        if val == 0.0 {
                            continue;
                        }
                        let coef = val * scale;
                        let uv = u.row(v).to_owned();
                        add_scaled(&mut g.row_mut(a), &uv.view(), coef);
                        add_scaled(&mut g.row_mut(v), &ua, coef);
                    }
                }
            }
        }
    }

    let mut loss = 0.0;
    let mut skipped = 0;
    let mut per_pair = Vec::with_capacity(batch.pairs.len());
    for p in &batch.pairs {
        let i = slot[&p.anchor];
        let c = sup.c_weight(p.c);
        match terms.log_denominator[i] {
            Some(log_den) if c > 0.0 => {
                let cos = u.row(p.anchor).dot(&u.row(p.positive));
                let l = -c.ln() - cos / tau + log_den;
                loss += l;
                per_pair.push(Some(l));
                if let Some(g) = grad_u.as_mut() {
                    let up = u.row(p.positive).to_owned();
                    let ua = u.row(p.anchor).to_owned();
                    add_scaled(&mut g.row_mut(p.anchor), &up.view(), -1.0 / tau);
                    add_scaled(&mut g.row_mut(p.positive), &ua.view(), -1.0 / tau);
                }
            }
            _ => {
                skipped += 1;
                per_pair.push(None);
            }
        }
    }
    let degenerate = terms.log_denominator.iter().filter(|x| x.is_none()).count();
    let grad = grad_u.map(|g| unnormalize_grad(g, &u, &norms, e.trainable_dim()));
    (
        CdLoss {
            loss,
            per_pair,
            skipped_pairs: skipped,
            degenerate_anchors: degenerate,
        },
        grad,
    )
}

/// A pair with both of its metric values attached.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedPair {
    pub v1: usize,
    pub v2: usize,
    pub c: f64,
    pub d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairwiseLoss {
    /// `(d − c)·σ(x)`
    Origin,
    /// `(σ(x) − σ(c − d))²`
    Mse,
    /// `−c·log σ(x) − d·log(1 − σ(x))`, σ clamped to `[1e-7, 1 − 1e-7]`
    Ce,
}

pub const CE_CLAMP: f64 = 1e-7;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    }
}

/// Value and derivative w.r.t. the logit of one pair's term.
pub fn pairwise_term(kind: PairwiseLoss, logit: f64, c: f64, d: f64) -> (f64, f64) {
    let s = sigmoid(logit);
    match kind {
        PairwiseLoss::Origin => ((d - c) * s, (d - c) * s * (1.0 - s)),
        PairwiseLoss::Mse => {
            let target = sigmoid(c - d);
            let diff = s - target;
            (diff * diff, 2.0 * diff * s * (1.0 - s))
        }
        PairwiseLoss::Ce => {
            let clamped = s.clamp(CE_CLAMP, 1.0 - CE_CLAMP);
            let value = -c * clamped.ln() - d * (1.0 - clamped).ln();
            let slope = if clamped != s { 0.0 } else { -c * (1.0 - s) + d * s };
            (value, slope)
        }
    }
}

pub fn pairwise_loss(kind: PairwiseLoss, pairs: &[WeightedPair], e: &EmbeddingTable) -> f64 {
    pairs
        .iter()
        .map(|p| pairwise_term(kind, e.row(p.v1).dot(&e.row(p.v2)), p.c, p.d).0)
        .sum()
}

pub fn pairwise_loss_grad(kind: PairwiseLoss, pairs: &[WeightedPair], e: &EmbeddingTable) -> (f64, Array2<f64>) {
    let t = e.trainable_dim();
    let data = e.data();
    let mut grad = Array2::zeros((e.rows(), t));
    let mut loss = 0.0;
    for p in pairs {
        let (r1, r2) = (data.row(p.v1), data.row(p.v2));
        let (value, slope) = pairwise_term(kind, r1.dot(&r2), p.c, p.d);
        loss += value;
        if slope == 0.0 {
            continue;
        }
        for j in 0..t {
            grad[[p.v1, j]] += slope * r2[j];
            grad[[p.v2, j]] += slope * r1[j];
        }
    }
    (loss, grad)
}

pub fn origin_loss(pairs: &[WeightedPair], e: &EmbeddingTable) -> f64 {
    pairwise_loss(PairwiseLoss::Origin, pairs, e)
}

pub fn mse_loss(pairs: &[WeightedPair], e: &EmbeddingTable) -> f64 {
    pairwise_loss(PairwiseLoss::Mse, pairs, e)
}

pub fn ce_loss(pairs: &[WeightedPair], e: &EmbeddingTable) -> f64 {
    pairwise_loss(PairwiseLoss::Ce, pairs, e)
}
