//! Subgraph multi-classification objective.
//!
//! Every pooled triple input is classified over all `N` entities. The target
//! `(h, r, ?)` gives `L_ce`; inputs `(h, r, t')` built from subgraph entities
//! give `L_pos` (tails sharing head and relation) and `L_neg` (everything else).
//! The combined loss is `L_ce + beta1 (L_pos - beta2 L_neg)` where `beta2` is
//! recomputed from detached loss values every step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::linear;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which relation token pairs with a constructed `(h, ., t')` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RelationChoice {
    /// The target triple's relation token.
    Target,
    /// The relation token of the triple that introduced `t'`.
    Occurrence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub beta1: f64,
    pub relation_choice: RelationChoice,
    /// Width of the pooled triple representation.
    pub d_pool: usize,
    /// Hidden width of the classifier MLP.
    pub classifier_hidden: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { beta1: 0.5, relation_choice: RelationChoice::Target, d_pool: 256, classifier_hidden: 512 }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 >= 0.0 && self.beta1.is_finite()) {
            return Err(Error::Config(format!("beta1 must be finite and non-negative, got {}", self.beta1)));
        }
        if self.d_pool == 0 || self.classifier_hidden == 0 {
            return Err(Error::Config("d_pool and classifier_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Two-layer MLP `d_in -> hidden -> N`.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_in: usize,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        d_in: usize,
        hidden: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Other;
        let w1 = store.add_normal("classifier.w1", g, d_in, hidden, (1.0 / d_in as f64).sqrt(), rng);
        let b1 = store.add_no_decay("classifier.b1", g, Tensor::zeros(1, hidden));
        let w2 = store.add_normal("classifier.w2", g, hidden, num_classes, (1.0 / hidden as f64).sqrt(), rng);
        let b2 = store.add_no_decay("classifier.b2", g, Tensor::zeros(1, num_classes));
        Self { w1, b1, w2, b2, d_in, num_classes }
    }

    /// Logits, one row per input row.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let width = tape.shape(x).1;
        if width != self.d_in {
            return Err(Error::Contract(format!("classifier expects width {}, got {width}", self.d_in)));
        }
        let h = linear(tape, x, self.w1, self.b1);
        let h = tape.gelu(h);
        Ok(linear(tape, h, self.w2, self.b2))
    }

    /// Probability vector for one pooled input.
    pub fn classify<T: Scalar>(&self, store: &ParamStore<T>, pooled: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new(store);
        let x = tape.constant(pooled.clone());
        let logits = self.forward(&mut tape, x)?;
        Ok(softmax(tape.value(logits).row_slice(0)))
    }
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn loss_ce(probabilities: &[f64], gold: usize) -> Result<f64> {
    let p = probabilities
        .get(gold)
        .ok_or_else(|| Error::Lookup(format!("gold class {gold} outside {} classes", probabilities.len())))?;
    Ok(-p.ln())
}

/// Mean of `-log p` over constructed inputs; 0 for an empty set.
pub fn mean_neg_log(per_item: &[f64]) -> f64 {
    if per_item.is_empty() {
        0.0
    } else {
        per_item.iter().sum::<f64>() / per_item.len() as f64
    }
}

/// `1` when `L_pos > L_neg`, else `0.5 L_pos / L_neg`; `1` when both vanish.
pub fn adaptive_beta2(l_pos: f64, l_neg: f64) -> Result<f64> {
    if !(l_pos >= 0.0 && l_neg >= 0.0) {
        return Err(Error::Contract(format!("losses must be non-negative, got L_pos={l_pos} L_neg={l_neg}")));
    }
    if l_pos > l_neg || l_neg == 0.0 {
        Ok(1.0)
    } else {
        Ok(0.5 * l_pos / l_neg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_pos: f64,
    pub l_neg: f64,
    pub beta2: f64,
    pub total: f64,
    pub pos_count: usize,
    pub neg_count: usize,
}

pub fn total_loss(l_ce: f64, l_pos: f64, l_neg: f64, beta1: f64) -> Result<LossBreakdown> {
    let beta2 = adaptive_beta2(l_pos, l_neg)?;
    Ok(LossBreakdown { l_ce, l_pos, l_neg, beta2, total: combine(l_ce, l_pos, l_neg, beta1, beta2), pos_count: 0, neg_count: 0 })
}

pub fn combine(l_ce: f64, l_pos: f64, l_neg: f64, beta1: f64, beta2: f64) -> f64 {
    l_ce + beta1 * (l_pos - beta2 * l_neg)
}
