//! Domain prediction, the slot constraint, S-type tagging, C-type
//! classification and state correction.
//!
//! The `*_logits` builders record a head on a [`Tape`] and are shared by
//! training and inference. The public functions run one head on an already
//! encoded turn.

use crate::autodiff::{Tape, Var};
use crate::corpus::{decode_tags, label_slot, CtypeLabel, DecodedSpans, Ontology, Triplet};
use crate::encoder::{EncodedTurn, HeadIds, Model};
use crate::error::{Error, Result};
use crate::tensor::{argmax, sigmoid, softmax, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DomainPrediction<F> {
    pub probs: Vec<F>,
    pub index: usize,
    pub domain: String,
}

/// Distribution over the S-type slots followed by `[EMPTY]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintDistribution<F> {
    pub probs: Vec<F>,
}

impl<F: Scalar> ConstraintDistribution<F> {
    pub fn empty_index(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn uniform(s: usize) -> Self {
        Self {
            probs: vec![F::of(1.0 / (s + 1) as f64); s + 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotTagging<F> {
    /// Per-token label distributions, `n x (2s + 1)`.
    pub probs: Tensor<F>,
    /// Label scores after the constraint, not renormalized.
    pub masked: Tensor<F>,
    /// Per-token argmax of `masked`.
    pub labels: Vec<usize>,
    /// Per-token argmax of `probs`.
    pub unmasked_labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtypePrediction<F> {
    pub slot: String,
    /// Yes, no, dontcare, absent.
    pub probs: [F; 4],
}

impl<F: Scalar> CtypePrediction<F> {
    /// Distribution over yes / no / dontcare alone.
    pub fn three_way(&self) -> [F; 3] {
        let z = self.probs[0] + self.probs[1] + self.probs[2];
        [self.probs[0] / z, self.probs[1] / z, self.probs[2] / z]
    }

    pub fn label(&self) -> CtypeLabel {
        CtypeLabel::from_index(argmax(&self.probs))
    }

    /// The state triplet this prediction emits, if any.
    pub fn triplet(&self) -> Option<Triplet> {
        let value = self.label().value()?;
        let (d, s) = crate::corpus::split_slot(&self.slot)?;
        Some(Triplet::new(d, s, value))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RemovalPrediction<F> {
    pub keep_prob: F,
}

impl<F: Scalar> RemovalPrediction<F> {
    pub fn keep(&self) -> bool {
        self.keep_prob >= F::of(0.5)
    }
}

/// Index into the constraint distribution that scales IOB label `label`.
pub fn constraint_index(label: usize, s: usize) -> usize {
    match label_slot(label) {
        Some((slot, _)) => slot,
        None => s,
    }
}

/// The constraint-index of every label, in label order.
pub fn label_constraint_map(s: usize) -> Vec<usize> {
    (0..2 * s + 1).map(|l| constraint_index(l, s)).collect()
}

/// Target constraint for a turn whose gold S-type slots are `slots`
/// (qualified names, dontcare values already excluded).
pub fn build_r_real<'a, F: Scalar>(
    slots: impl IntoIterator<Item = &'a str>,
    ontology: &Ontology,
) -> Result<ConstraintDistribution<F>> {
    let s = ontology.num_stype();
    let mut hit = vec![false; s];
    for q in slots {
        let i = ontology
            .stype_slots()
            .binary_search_by(|x| x.as_str().cmp(q))
            .map_err(|_| Error::UnknownSlot(q.to_string()))?;
        hit[i] = true;
    }
    let k = hit.iter().filter(|&&h| h).count();
    let mut probs = vec![F::zero(); s + 1];
    if k == 0 {
        probs[s] = F::one();
    } else {
        let share = F::one() / F::of(k as f64);
        for (p, _) in probs.iter_mut().zip(&hit).filter(|(_, &h)| h) {
            *p = share;
        }
    }
    Ok(ConstraintDistribution { probs })
}

/// `masked[i][l] = probs[i][l] * r[constraint_index(l)]`.
pub fn mask_scores<F: Scalar>(probs: &Tensor<F>, r: &[F]) -> Tensor<F> {
    let s = r.len() - 1;
    assert_eq!(probs.cols(), 2 * s + 1, "label count does not match constraint");
    let map = label_constraint_map(s);
    let mut out = probs.clone();
    for i in 0..out.rows() {
        for (v, &m) in out.row_mut(i).iter_mut().zip(&map) {
            *v = *v * r[m];
        }
    }
    out
}

pub fn row_argmax<F: Scalar>(t: &Tensor<F>) -> Vec<usize> {
    (0..t.rows()).map(|i| argmax(t.row(i))).collect()
}

// ---- tape builders ----

fn row_const<F: Scalar>(tape: &mut Tape<'_, F>, v: &[F]) -> Var {
    tape.constant(Tensor::row_vector(v.to_vec()))
}

/// `[h_cls; E(D_l)]`
fn cls_prev<F: Scalar>(tape: &mut Tape<'_, F>, h_cls: Var, e_prev: &[F]) -> Var {
    let e = row_const(tape, e_prev);
    tape.concat_cols(&[h_cls, e])
}

pub(crate) fn domain_logits<F: Scalar>(model: &Model<F>, tape: &mut Tape<'_, F>, h_cls: Var, e_prev: &[F]) -> Var {
    let x = cls_prev(tape, h_cls, e_prev);
    let w = tape.param(model.ids.domain);
    tape.matmul(x, w)
}

pub(crate) fn constraint_logits<F: Scalar>(
    model: &Model<F>,
    tape: &mut Tape<'_, F>,
    h_cls: Var,
    e_prev: &[F],
) -> Var {
    let x = cls_prev(tape, h_cls, e_prev);
    let w = tape.param(model.ids.constraint);
    tape.matmul(x, w)
}

pub(crate) fn tag_logits<F: Scalar>(model: &Model<F>, tape: &mut Tape<'_, F>, h_tokens: Var) -> Var {
    let w = tape.param(model.ids.tag);
    tape.matmul(h_tokens, w)
}

fn classifier<F: Scalar>(tape: &mut Tape<'_, F>, head: &HeadIds, x: Var) -> Var {
    let x = match head.hidden {
        Some((u, b)) => {
            let u = tape.param(u);
            let b = tape.param(b);
            let h = tape.matmul(x, u);
            let h = tape.add_row(h, b);
            tape.gelu(h)
        }
        None => x,
    };
    let w = tape.param(head.out);
    tape.matmul(x, w)
}

/// Rows `[item_i; E(D_l); h_cls]` for every item embedding.
fn item_features<F: Scalar>(tape: &mut Tape<'_, F>, h_cls: Var, e_prev: &[F], items: &[Vec<F>]) -> Var {
    let d = e_prev.len();
    let mut data = Vec::with_capacity(items.len() * 2 * d);
    for item in items {
        data.extend_from_slice(item);
        data.extend_from_slice(e_prev);
    }
    let fixed = tape.constant(Tensor::from_vec(items.len(), 2 * d, data));
    let cls = tape.repeat_rows(h_cls, items.len());
    tape.concat_cols(&[fixed, cls])
}

/// `m x 4` logits, one row per C-type slot embedding.
pub(crate) fn ctype_logits<F: Scalar>(
    model: &Model<F>,
    tape: &mut Tape<'_, F>,
    h_cls: Var,
    e_prev: &[F],
    slots: &[Vec<F>],
) -> Var {
    let x = item_features(tape, h_cls, e_prev, slots);
    classifier(tape, &model.ids.ctype, x)
}

/// `m x 1` keep logits, one row per carried-triplet embedding.
pub(crate) fn keep_logits<F: Scalar>(
    model: &Model<F>,
    tape: &mut Tape<'_, F>,
    h_cls: Var,
    e_prev: &[F],
    triplets: &[Vec<F>],
) -> Var {
    let x = item_features(tape, h_cls, e_prev, triplets);
    classifier(tape, &model.ids.keep, x)
}

// ---- inference ----

fn cls_tape<'p, F: Scalar>(model: &'p Model<F>, enc: &EncodedTurn<F>) -> (Tape<'p, F>, Var) {
    let mut tape = Tape::new(model.params.tensors());
    let h = tape.constant(Tensor::row_vector(enc.h_cls.clone()));
    (tape, h)
}

pub fn predict_domain<F: Scalar>(model: &Model<F>, enc: &EncodedTurn<F>, prev: Option<&str>) -> DomainPrediction<F> {
    let (mut tape, h) = cls_tape(model, enc);
    let e = model.embed_domain(prev);
    let z = domain_logits(model, &mut tape, h, &e);
    let probs = softmax(tape.value(z).row(0));
    let index = argmax(&probs);
    DomainPrediction {
        domain: model.ontology.domains()[index].clone(),
        probs,
        index,
    }
}

pub fn compute_constraint<F: Scalar>(
    model: &Model<F>,
    enc: &EncodedTurn<F>,
    prev: Option<&str>,
) -> ConstraintDistribution<F> {
    let (mut tape, h) = cls_tape(model, enc);
    let e = model.embed_domain(prev);
    let z = constraint_logits(model, &mut tape, h, &e);
    ConstraintDistribution {
        probs: softmax(tape.value(z).row(0)),
    }
}

/// Tags every token; `r` must come from [`compute_constraint`] at inference.
pub fn tag_stype<F: Scalar>(model: &Model<F>, enc: &EncodedTurn<F>, r: &ConstraintDistribution<F>) -> SlotTagging<F> {
    let mut tape = Tape::new(model.params.tensors());
    let h = tape.constant(enc.h_tokens.clone());
    let z = tag_logits(model, &mut tape, h);
    let logits = tape.value(z);
    let mut probs = Tensor::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        probs.row_mut(i).copy_from_slice(&softmax(logits.row(i)));
    }
    let masked = mask_scores(&probs, &r.probs);
    SlotTagging {
        labels: row_argmax(&masked),
        unmasked_labels: row_argmax(&probs),
        probs,
        masked,
    }
}

pub fn decode<F>(model: &Model<F>, enc: &EncodedTurn<F>, labels: &[usize]) -> DecodedSpans {
    decode_tags(labels, enc.tokens.positions(), &model.ontology)
}

/// Classifies one C-type slot (qualified name) of the predicted domain.
pub fn classify_ctype<F: Scalar>(
    model: &Model<F>,
    enc: &EncodedTurn<F>,
    slot: &str,
    prev: Option<&str>,
) -> CtypePrediction<F> {
    let (mut tape, h) = cls_tape(model, enc);
    let e = model.embed_domain(prev);
    let name = crate::corpus::split_slot(slot).map_or(slot, |(_, s)| s);
    let z = ctype_logits(model, &mut tape, h, &e, &[model.embed_slot(name)]);
    let p = softmax(tape.value(z).row(0));
    CtypePrediction {
        slot: slot.to_string(),
        probs: [p[0], p[1], p[2], p[3]],
    }
}

pub fn correct_state<F: Scalar>(
    model: &Model<F>,
    enc: &EncodedTurn<F>,
    carried: &Triplet,
    prev: Option<&str>,
) -> RemovalPrediction<F> {
    let (mut tape, h) = cls_tape(model, enc);
    let e = model.embed_domain(prev);
    let z = keep_logits(model, &mut tape, h, &e, &[model.embed_triplet(carried)]);
    RemovalPrediction {
        keep_prob: sigmoid(tape.scalar(z)),
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::corpus::{align_iob, begin_label, inside_label, DialogueTurn, LABEL_O};
    use crate::encoder::{tokenize, ModelConfig, Vocab};

    fn ontology() -> Ontology {
        Ontology::new(
            ["hotel", "taxi", "train"].map(String::from),
            ["hotel.area", "hotel.name", "train.departure", "train.destination"].map(String::from),
            BTreeMap::from([("hotel".to_string(), vec!["hotel.internet".to_string(), "hotel.parking".to_string()])]),
        )
        .unwrap()
    }

    fn model(o: &Ontology) -> Model<f64> {
        let mut tokens = Vocab::build(o, []).tokens().to_vec();
        tokens.extend(["cambridge", "from", "leaving", "london", "wifi"].map(String::from));
        Model::new(ModelConfig::tiny(8), Vocab::from_tokens(tokens).unwrap(), o.clone(), 11).unwrap()
    }

    fn zero_heads(m: &mut Model<f64>) {
        for i in 0..m.params.len() {
            if m.params.name(i).starts_with("head.") {
                m.params.tensors_mut()[i].fill(0.0);
            }
        }
    }

    /// Hand-built target: names in, expected vector out.
    fn oracle_r(o: &Ontology, gold: &[&str]) -> Vec<f64> {
        let s = o.num_stype();
        let mut v = vec![0.0; s + 1];
        if gold.is_empty() {
            v[s] = 1.0;
        }
        for (i, q) in o.stype_slots().iter().enumerate() {
            if gold.contains(&q.as_str()) {
                v[i] = 1.0 / gold.len() as f64;
            }
        }
        v
    }

    #[test]
    fn r_real_rules() {
        let o = ontology();
        let r: ConstraintDistribution<f64> = build_r_real([], &o).unwrap();
        assert_eq!(r.probs, vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        let gold = ["train.departure", "train.destination"];
        let r: ConstraintDistribution<f64> = build_r_real(gold, &o).unwrap();
        assert_eq!(r.probs, oracle_r(&o, &gold));
        assert_eq!(r.probs[2], 0.5);
        let r: ConstraintDistribution<f64> = build_r_real(["hotel.name"], &o).unwrap();
        assert_eq!(r.probs[1], 1.0);
        assert!(build_r_real::<f64>(["hotel.stars"], &o).is_err());
    }

    #[test]
    fn domain_argmax_and_ties() {
        let o = ontology();
        let mut m = model(&o);
        zero_heads(&mut m);
        let enc = m.encode(&tokenize("", "leaving from cambridge"));
        let p = predict_domain(&m, &enc, None);
        assert_eq!(p.domain, "hotel");
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // logits (2.0, 0.1, 0.1): only the first feature is non-zero and only
        // its row of W^d is set.
        let mut m2 = m.clone();
        m2.params.tensors_mut()[m2.ids.domain].fill(0.0);
        let mut h_cls = vec![0.0; 8];
        h_cls[0] = 1.0;
        let enc0 = EncodedTurn { h_cls, ..enc.clone() };
        let wd = &mut m2.params.tensors_mut()[m2.ids.domain];
        wd.set(0, 0, 2.0);
        wd.set(0, 1, 0.1);
        wd.set(0, 2, 0.1);
        let p = predict_domain(&m2, &enc0, None);
        assert_eq!(p.domain, "hotel");
        let want = softmax(&[2.0, 0.1, 0.1]);
        for (a, b) in p.probs.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn previous_domain_is_wired_in() {
        let o = ontology();
        let m = model(&o);
        let enc = m.encode(&tokenize("", "leaving from cambridge"));
        let a = predict_domain(&m, &enc, None);
        let b = predict_domain(&m, &enc, Some("train"));
        assert_ne!(a.probs, b.probs);
        // Gradient of y^d w.r.t. the E(D_l) half of W^d.
        let mut tape = Tape::new(m.params.tensors());
        let h = tape.constant(Tensor::row_vector(enc.h_cls.clone()));
        let e = m.embed_domain(Some("train"));
        let z = domain_logits(&m, &mut tape, h, &e);
        let loss = tape.cross_entropy(z, &[Some(1)]);
        let g = tape.backward(loss);
        let gw = &g[m.ids.domain];
        let lower: f64 = (8..16).flat_map(|r| gw.row(r).to_vec()).map(f64::abs).sum();
        assert!(lower > 0.0);
    }

    #[test]
    fn zero_weights_give_uniform_outputs() {
        let o = ontology();
        let mut m = model(&o);
        zero_heads(&mut m);
        let enc = m.encode(&tokenize("", "wifi please"));
        let r = compute_constraint(&m, &enc, None);
        assert!(r.probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let c = classify_ctype(&m, &enc, "hotel.internet", None);
        for p in c.three_way() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let k = correct_state(&m, &enc, &Triplet::new("hotel", "area", "centre"), None);
        assert_eq!(k.keep_prob, 0.5);
        assert!(k.keep());
    }

    #[test]
    fn tagging_rows_are_distributions() {
        let o = ontology();
        let m = model(&o);
        let enc = m.encode(&tokenize("where from ?", "leaving from cambridge"));
        let r = compute_constraint(&m, &enc, Some("train"));
        assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.probs.iter().all(|&p| p > 0.0));
        let t = tag_stype(&m, &enc, &r);
        assert_eq!(t.probs.rows(), enc.h_tokens.rows());
        for i in 0..t.probs.rows() {
            assert!((t.probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn align_then_decode_is_identity_on_extractable_values() {
        let o = ontology();
        let turn = DialogueTurn {
            sys_utterance: "where to ?".into(),
            user_utterance: "leaving from cambridge to london".into(),
            gold_domain: "train".into(),
            gold_adds: [
                Triplet::new("train", "departure", "cambridge"),
                Triplet::new("train", "destination", "london"),
            ]
            .into(),
            gold_removes: Default::default(),
            turn_index: 0,
        };
        let tok = tokenize(&turn.sys_utterance, &turn.user_utterance);
        let a = align_iob(&turn, &o, tok.positions());
        let d = decode_tags(&a.tags.labels, tok.positions(), &o);
        assert_eq!(d.triplets, turn.gold_adds);
    }

    fn random_probs(rows: usize, cols: usize, seed: &[f64]) -> Tensor<f64> {
        let mut t = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let logits: Vec<f64> = (0..cols).map(|j| seed[(i * cols + j) % seed.len()] * (1 + j % 3) as f64).collect();
            t.row_mut(i).copy_from_slice(&softmax(&logits));
        }
        t
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn zero_constraint_zeroes_every_tag_of_the_slot(
            seed in prop::collection::vec(-4.0f64..4.0, 1..40),
            r in prop::collection::vec(0.01f64..1.0, 5),
            q in 0usize..4,
            n in 1usize..12,
        ) {
            let probs = random_probs(n, 9, &seed);
            let mut r = r;
            r[q] = 0.0;
            let masked = mask_scores(&probs, &r);
            for i in 0..n {
                prop_assert_eq!(masked.get(i, begin_label(q)), 0.0);
                prop_assert_eq!(masked.get(i, inside_label(q)), 0.0);
            }
            prop_assert!(row_argmax(&masked).iter().all(|&l| constraint_index(l, 4) != q));
        }

        #[test]
        fn uniform_constraint_preserves_decoding(
            seed in prop::collection::vec(-4.0f64..4.0, 1..40),
            n in 1usize..12,
        ) {
            let probs = random_probs(n, 9, &seed);
            let masked = mask_scores(&probs, &ConstraintDistribution::<f64>::uniform(4).probs);
            prop_assert_eq!(row_argmax(&masked), row_argmax(&probs));
        }

        #[test]
        fn rescaling_constraint_preserves_decoding(
            seed in prop::collection::vec(-4.0f64..4.0, 1..40),
            r in prop::collection::vec(0.0f64..1.0, 5),
            c in 1e-3f64..1e3,
            n in 1usize..12,
        ) {
            let probs = random_probs(n, 9, &seed);
            let scaled: Vec<f64> = r.iter().map(|x| x * c).collect();
            let a = row_argmax(&mask_scores(&probs, &r));
            let b = row_argmax(&mask_scores(&probs, &scaled));
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn label_map_layout() {
        assert_eq!(label_constraint_map(2), vec![2, 0, 0, 1, 1]);
        assert_eq!(constraint_index(LABEL_O, 7), 7);
    }
}
