use serde::{Deserialize, Serialize};

use super::examples::TurnExample;
use crate::autodiff::{Tape, Var};
use crate::encoder::{embed_rows, Model};
use crate::heads::{constraint_logits, ctype_logits, domain_logits, keep_logits, label_constraint_map, tag_logits};
use crate::tensor::{Scalar, Tensor};

/// Weights of the domain, C-type, tagging, correction and constraint terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            alpha: w,
            beta: w,
            gamma: w,
            theta: w,
            epsilon: w,
        }
    }

    /// Only the `i`-th term (in [`LossTerms`] order) switched on.
    pub fn only(i: usize) -> Self {
        let mut w = [0.0; 5];
        w[i] = 1.0;
        Self::from_array(w)
    }

    pub fn from_array(w: [f64; 5]) -> Self {
        Self {
            alpha: w[0],
            beta: w[1],
            gamma: w[2],
            theta: w[3],
            epsilon: w[4],
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.alpha, self.beta, self.gamma, self.theta, self.epsilon]
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.as_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(crate::Error::Config("loss weights must be finite and non-negative".into()))
        }
    }
}

/// Per-head losses: domain, C-type, tagging, correction, constraint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub domain: f64,
    pub ctype: f64,
    pub tag: f64,
    pub keep: f64,
    pub constraint: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 5] = ["domain", "ctype", "tag", "keep", "constraint"];

    pub fn as_array(&self) -> [f64; 5] {
        [self.domain, self.ctype, self.tag, self.keep, self.constraint]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            domain: a[0],
            ctype: a[1],
            tag: a[2],
            keep: a[3],
            constraint: a[4],
        }
    }

    pub fn add(&mut self, other: &LossTerms) {
        let mut a = self.as_array();
        for (x, y) in a.iter_mut().zip(other.as_array()) {
            *x += y;
        }
        *self = Self::from_array(a);
    }

    pub fn scale(&mut self, c: f64) {
        *self = Self::from_array(self.as_array().map(|x| x * c));
    }
}

/// `KL(p || q) = sum p ln(p / q)`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// The weighted sum of the five head losses.
pub fn joint_loss(terms: &LossTerms, weights: &LossWeights) -> f64 {
    terms
        .as_array()
        .iter()
        .zip(weights.as_array())
        .map(|(l, w)| l * w)
        .sum()
}

/// Records the joint loss of one turn. Label embeddings are read from
/// `labels` as constants.
pub(crate) fn turn_loss<F: Scalar>(
    model: &Model<F>,
    tape: &mut Tape<'_, F>,
    ex: &TurnExample,
    labels: &Tensor<F>,
    weights: &LossWeights,
    masked_tag_loss: bool,
) -> (Var, LossTerms) {
    let h = model.encode_on_tape(tape, &ex.ids);
    let n = ex.ids.len();
    let h_cls = tape.slice_rows(h, 0, 1);
    let h_tokens = tape.slice_rows(h, 1, n - 1);
    let e_prev = embed_rows(labels, &[ex.prev_domain]);

    let zd = domain_logits(model, tape, h_cls, &e_prev);
    let l_domain = tape.cross_entropy(zd, &[Some(ex.domain)]);

    let zr = constraint_logits(model, tape, h_cls, &e_prev);
    let target: Vec<F> = ex.r_real.iter().map(|&p| F::of(p)).collect();
    let l_constraint = tape.kl_divergence(zr, &target);

    let zs = tag_logits(model, tape, h_tokens);
    let zs = if masked_tag_loss {
        // Cross-entropy of the renormalized masked scores:
        // log y + log R[map(label)].
        let s = model.ontology.num_stype();
        let log_y = tape.log_softmax_rows(zs);
        let log_r = tape.log_softmax_rows(zr);
        let log_r = tape.column_gather(log_r, &label_constraint_map(s));
        tape.add_row(log_y, log_r)
    } else {
        zs
    };
    let l_tag = tape.cross_entropy(zs, &ex.tags);

    let l_ctype = if ex.ctype.is_empty() {
        tape.constant(Tensor::row_vector(vec![F::zero()]))
    } else {
        let items: Vec<Vec<F>> = ex.ctype.iter().map(|(ids, _)| embed_rows(labels, ids)).collect();
        let targets: Vec<Option<usize>> = ex.ctype.iter().map(|&(_, c)| Some(c)).collect();
        let zc = ctype_logits(model, tape, h_cls, &e_prev, &items);
        tape.cross_entropy(zc, &targets)
    };

    let l_keep = if ex.carried.is_empty() {
        tape.constant(Tensor::row_vector(vec![F::zero()]))
    } else {
        let items: Vec<Vec<F>> = ex.carried.iter().map(|(t, _)| t.embed(labels)).collect();
        let targets: Vec<F> = ex.carried.iter().map(|&(_, k)| F::of(k)).collect();
        let zp = keep_logits(model, tape, h_cls, &e_prev, &items);
        tape.bce_with_logits(zp, &targets)
    };

    let w = weights.as_array().map(F::of);
    let parts = [l_domain, l_ctype, l_tag, l_keep, l_constraint];
    let terms = LossTerms::from_array(parts.map(|v| tape.scalar(v).as_f64()));
    let total = tape.weighted_sum(&[
        (parts[0], w[0]),
        (parts[1], w[1]),
        (parts[2], w[2]),
        (parts[3], w[3]),
        (parts[4], w[4]),
    ]);
    (total, terms)
}
