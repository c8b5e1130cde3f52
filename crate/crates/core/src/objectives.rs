//! Training objectives over a user embedding, its positive item and a set of
//! negative (or impression) items. Every loss returns its value together with
//! the gradient w.r.t. the user embedding.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::score;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    L2,
    Nce,
    Bpr,
    Hinge,
    CrossEntropy,
}

impl ObjectiveKind {
    pub fn needs_negatives(self) -> bool {
        matches!(self, ObjectiveKind::Nce | ObjectiveKind::Bpr | ObjectiveKind::Hinge)
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::L2 => "L2",
            ObjectiveKind::Nce => "NCE",
            ObjectiveKind::Bpr => "BPR",
            ObjectiveKind::Hinge => "Hinge",
            ObjectiveKind::CrossEntropy => "CrossEntropy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    /// Items shown alongside the interaction; falls back to uniform draws
    /// when an interaction has no impressions.
    Impressions,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Hinge margin δ.
    pub margin: f64,
    /// Uniform negatives drawn per positive (and the cap on impression
    /// negatives).
    pub negatives: usize,
    pub source: NegativeSource,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { kind: ObjectiveKind::Hinge, margin: 0.5, negatives: 10, source: NegativeSource::Impressions }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::config(format!("margin must be finite and >= 0, got {}", self.margin)));
        }
        if self.kind.needs_negatives() && self.negatives == 0 {
            return Err(Error::config(format!("{} needs at least one negative", self.kind.name())));
        }
        Ok(())
    }
}

/// One prediction with its positive item and negatives. `mask[i] == false`
/// marks padding rows of `negatives`.
#[derive(Debug, Clone, Copy)]
pub struct TrainingTriple<'a, T: Real> {
    pub u: ArrayView1<'a, T>,
    pub positive: ArrayView1<'a, T>,
    pub negatives: ArrayView2<'a, T>,
    pub mask: Option<&'a [bool]>,
}

/// Loss value and gradients w.r.t. the positive score and each negative score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrad<T> {
    pub loss: T,
    pub d_pos: T,
    pub d_neg: Vec<T>,
}

fn valid(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i])
}

/// `−log σ(pos) − Σ log σ(−neg)`.
pub fn nce_scores<T: Real>(pos: T, neg: &[T], mask: Option<&[bool]>) -> ScoreGrad<T> {
    let mut loss = -pos.log_sigmoid();
    let d_pos = -(-pos).sigmoid();
    let mut d_neg = vec![T::zero(); neg.len()];
    for (i, &c) in neg.iter().enumerate() {
        if valid(mask, i) {
            loss -= (-c).log_sigmoid();
            d_neg[i] = c.sigmoid();
        }
    }
    ScoreGrad { loss, d_pos, d_neg }
}

/// `−Σ log σ(pos − neg)`.
pub fn bpr_scores<T: Real>(pos: T, neg: &[T], mask: Option<&[bool]>) -> ScoreGrad<T> {
    let mut loss = T::zero();
    let mut d_pos = T::zero();
    let mut d_neg = vec![T::zero(); neg.len()];
    for (i, &c) in neg.iter().enumerate() {
        if valid(mask, i) {
            let z = pos - c;
            loss -= z.log_sigmoid();
            let g = (-z).sigmoid();
            d_pos -= g;
            d_neg[i] = g;
        }
    }
    ScoreGrad { loss, d_pos, d_neg }
}

/// `Σ max(0, δ + neg − pos)`; the subgradient at the kink is zero.
pub fn hinge_scores<T: Real>(pos: T, neg: &[T], margin: T, mask: Option<&[bool]>) -> ScoreGrad<T> {
    let mut loss = T::zero();
    let mut d_pos = T::zero();
    let mut d_neg = vec![T::zero(); neg.len()];
    for (i, &c) in neg.iter().enumerate() {
        if valid(mask, i) {
            let v = margin + c - pos;
            if v > T::zero() {
                loss += v;
                d_pos -= T::one();
                d_neg[i] = T::one();
            }
        }
    }
    ScoreGrad { loss, d_pos, d_neg }
}

/// Softmax cross-entropy of `logits` against the class `target`; returns the
/// loss and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Real>(logits: ArrayView1<T>, target: usize) -> Result<(T, Array1<T>)> {
    if target >= logits.len() {
        return Err(Error::Shape(format!("target {target} outside {} logits", logits.len())));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exp = logits.mapv(|z| (z - max).exp());
    let total: T = exp.iter().copied().sum();
    let loss = total.ln() + max - logits[target];
    let mut grad = exp.mapv(|e| e / total);
    grad[target] -= T::one();
    Ok((loss, grad))
}

/// Cross-entropy with a one-hot target vector.
pub fn cross_entropy_loss<T: Real>(logits: ArrayView1<T>, onehot: ArrayView1<T>) -> Result<T> {
    if logits.len() != onehot.len() {
        return Err(Error::Shape(format!(
            "{} logits but a target over {} items",
            logits.len(),
            onehot.len()
        )));
    }
    let hot: Vec<usize> = onehot.iter().enumerate().filter(|(_, &v)| v != T::zero()).map(|(i, _)| i).collect();
    if hot.len() != 1 || onehot[hot[0]] != T::one() {
        return Err(Error::data("cross-entropy target must be one-hot"));
    }
    Ok(softmax_cross_entropy(logits, hot[0])?.0)
}

/// `‖x − u‖₂` and its gradient w.r.t. `u` (zero where `u = x`).
pub fn l2_loss<T: Real>(u: ArrayView1<T>, x: ArrayView1<T>) -> (T, Array1<T>) {
    let diff = &u - &x;
    let norm = diff.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm == T::zero() {
        return (norm, Array1::zeros(u.len()));
    }
    (norm, diff.mapv(|v| v / norm))
}

fn check_triple<T: Real>(t: &TrainingTriple<'_, T>) -> Result<()> {
    let d = t.u.len();
    if t.positive.len() != d || t.negatives.ncols() != d && t.negatives.nrows() > 0 {
        return Err(Error::Shape("triple embeddings disagree in dimension".into()));
    }
    if let Some(m) = t.mask {
        if m.len() != t.negatives.nrows() {
            return Err(Error::Shape("negative mask length".into()));
        }
    }
    Ok(())
}

/// Loss of one triple and its gradient w.r.t. `u`. For cross-entropy the
/// negatives are the rest of the catalog and the softmax runs over the
/// positive plus every valid negative.
pub fn objective_loss<T: Real>(cfg: &ObjectiveConfig, t: &TrainingTriple<'_, T>) -> Result<(T, Array1<T>)> {
    check_triple(t)?;
    if cfg.kind == ObjectiveKind::L2 {
        return Ok(l2_loss(t.u, t.positive));
    }
    let n_valid = (0..t.negatives.nrows()).filter(|&i| valid(t.mask, i)).count();
    if cfg.kind.needs_negatives() && n_valid == 0 {
        return Err(Error::data(format!("{} needs at least one negative", cfg.kind.name())));
    }
    let pos = score(t.u, t.positive);
    let neg: Vec<T> = t.negatives.rows().into_iter().map(|c| score(t.u, c)).collect();
    let g = match cfg.kind {
        ObjectiveKind::Nce => nce_scores(pos, &neg, t.mask),
        ObjectiveKind::Bpr => bpr_scores(pos, &neg, t.mask),
        ObjectiveKind::Hinge => hinge_scores(pos, &neg, T::of(cfg.margin), t.mask),
        ObjectiveKind::CrossEntropy => {
            let idx: Vec<usize> = (0..neg.len()).filter(|&i| valid(t.mask, i)).collect();
            let logits = Array1::from_iter(std::iter::once(pos).chain(idx.iter().map(|&i| neg[i])));
            let (loss, dl) = softmax_cross_entropy(logits.view(), 0)?;
            let mut d_neg = vec![T::zero(); neg.len()];
            for (k, &i) in idx.iter().enumerate() {
                d_neg[i] = dl[k + 1];
            }
            ScoreGrad { loss, d_pos: dl[0], d_neg }
        }
        ObjectiveKind::L2 => unreachable!(),
    };
    let mut du = t.positive.mapv(|v| v * g.d_pos);
    for (c, &w) in t.negatives.rows().into_iter().zip(&g.d_neg) {
        if w != T::zero() {
            du.scaled_add(w, &c);
        }
    }
    Ok((g.loss, du))
}
