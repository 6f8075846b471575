//! Turn-by-turn belief tracking, evaluation metrics, the inference-count
//! benchmark and the interactive loop.

mod bench;
mod metrics;
mod repl;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{BeliefState, Dialogue, Triplet};
use crate::encoder::Model;
use crate::heads::{classify_ctype, compute_constraint, correct_state, decode, predict_domain, tag_stype};
use crate::tensor::Scalar;

pub use bench::{bench_itc, bench_csv, BenchRow, PerPairBaseline};
pub use metrics::{evaluate, DialogueDetail, EvalOptions, EvalReport, OsrReference};
pub use repl::run_repl;

/// Forward invocations spent on one turn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub encoder: usize,
    pub sstm: usize,
    pub cscm: usize,
    pub dscm: usize,
}

impl PassCounts {
    pub fn add(&mut self, other: &PassCounts) {
        self.encoder += other.encoder;
        self.sstm += other.sstm;
        self.cscm += other.cscm;
        self.dscm += other.dscm;
    }
}

pub struct TurnInput<'a> {
    pub dialogue_id: &'a str,
    pub turn_index: usize,
    pub sys: &'a str,
    pub usr: &'a str,
    pub prev_domain: Option<&'a str>,
    pub belief: &'a BeliefState,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnInference {
    pub domain: String,
    /// Triplets extracted or classified in this turn.
    pub new_triplets: BTreeSet<Triplet>,
    /// Carried triplets judged outdated.
    pub removals: Vec<Triplet>,
    pub passes: PassCounts,
    pub truncated: bool,
}

/// Anything that can predict one turn: the trained model or a test stub.
pub trait TurnModel: Sync {
    fn infer(&self, input: &TurnInput<'_>) -> TurnInference;
}

/// Drops `removals` from the carried state, then adds the new triplets,
/// overwriting any value already held for the same slot.
pub fn merge(belief: &mut BeliefState, removals: &[Triplet], new: &BTreeSet<Triplet>) {
    for t in removals {
        belief.remove(t);
    }
    for t in new {
        belief.insert(t.clone());
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackSession {
    pub dialogue_id: String,
    pub belief: BeliefState,
    pub prev_domain: Option<String>,
    pub turn_index: usize,
    pub passes: PassCounts,
    pub truncations: usize,
}

impl TrackSession {
    pub fn new(dialogue_id: impl Into<String>) -> Self {
        Self {
            dialogue_id: dialogue_id.into(),
            ..Self::default()
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new(std::mem::take(&mut self.dialogue_id));
    }

    /// Runs one turn and folds its prediction into the session.
    pub fn track_turn(&mut self, model: &dyn TurnModel, sys: &str, usr: &str) -> TurnInference {
        let out = model.infer(&TurnInput {
            dialogue_id: &self.dialogue_id,
            turn_index: self.turn_index,
            sys,
            usr,
            prev_domain: self.prev_domain.as_deref(),
            belief: &self.belief,
        });
        merge(&mut self.belief, &out.removals, &out.new_triplets);
        self.prev_domain = Some(out.domain.clone());
        self.turn_index += 1;
        self.passes.add(&out.passes);
        self.truncations += usize::from(out.truncated);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrackOptions {
    /// Multiply tag probabilities by the slot constraint before decoding.
    pub masking: bool,
}

impl Default for TrackOptions {
    fn default() -> Self {
        Self { masking: true }
    }
}

/// The full pipeline: one encoder pass, domain, constrained tagging,
/// C-type slots of the predicted domain, correction of carried triplets.
pub struct EmdTracker<'m, F> {
    pub model: &'m Model<F>,
    pub options: TrackOptions,
}

impl<'m, F: Scalar> EmdTracker<'m, F> {
    pub fn new(model: &'m Model<F>) -> Self {
        Self {
            model,
            options: TrackOptions::default(),
        }
    }

    pub fn with_options(model: &'m Model<F>, options: TrackOptions) -> Self {
        Self { model, options }
    }
}

impl<F: Scalar> TurnModel for EmdTracker<'_, F> {
    fn infer(&self, input: &TurnInput<'_>) -> TurnInference {
        let m = self.model;
        let mut passes = PassCounts::default();
        let tokens = m.tokenize(input.sys, input.usr);
        let enc = m.encode(&tokens);
        passes.encoder += 1;

        let domain = predict_domain(m, &enc, input.prev_domain);
        let r = compute_constraint(m, &enc, input.prev_domain);
        let tagging = tag_stype(m, &enc, &r);
        passes.sstm += 1;
        let labels = if self.options.masking {
            &tagging.labels
        } else {
            &tagging.unmasked_labels
        };
        let mut new_triplets = decode(m, &enc, labels).triplets;

        for slot in m.ontology.ctype_slots(&domain.domain) {
            let c = classify_ctype(m, &enc, slot, input.prev_domain);
            passes.cscm += 1;
            new_triplets.extend(c.triplet());
        }

        let mut removals = Vec::new();
        for t in input.belief.triplets() {
            passes.dscm += 1;
            if !correct_state(m, &enc, &t, input.prev_domain).keep() {
                removals.push(t);
            }
        }

        TurnInference {
            domain: domain.domain,
            new_triplets,
            removals,
            passes,
            truncated: tokens.truncated > 0,
        }
    }
}

/// Replays fixed per-turn predictions, keyed by dialogue id and turn index.
#[derive(Clone, Debug, Default)]
pub struct ScriptedPredictor {
    pub turns: BTreeMap<(String, usize), TurnInference>,
}

impl ScriptedPredictor {
    /// Predicts every gold delta and domain exactly.
    pub fn perfect(corpus: &[Dialogue]) -> Self {
        let mut turns = BTreeMap::new();
        for d in corpus {
            for t in &d.turns {
                turns.insert(
                    (d.id.clone(), t.turn_index),
                    TurnInference {
                        domain: t.gold_domain.clone(),
                        new_triplets: t.gold_adds.clone(),
                        removals: t.gold_removes.iter().cloned().collect(),
                        passes: PassCounts::default(),
                        truncated: false,
                    },
                );
            }
        }
        Self { turns }
    }

    pub fn turn_mut(&mut self, dialogue_id: &str, turn_index: usize) -> Option<&mut TurnInference> {
        self.turns.get_mut(&(dialogue_id.to_string(), turn_index))
    }
}

impl TurnModel for ScriptedPredictor {
    fn infer(&self, input: &TurnInput<'_>) -> TurnInference {
        self.turns
            .get(&(input.dialogue_id.to_string(), input.turn_index))
            .cloned()
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::corpus::synthetic::{generate_synthetic, SyntheticConfig};

    #[test]
    fn overwrite_keeps_one_value_per_slot() {
        let mut b = BeliefState::default();
        b.insert(Triplet::new("train", "day", "monday"));
        let new = BTreeSet::from([Triplet::new("train", "day", "tuesday")]);
        merge(&mut b, &[], &new);
        assert_eq!(b.triplets(), vec![Triplet::new("train", "day", "tuesday")]);
    }

    #[test]
    fn removal_then_readd_nets_to_new_value() {
        let mut b = BeliefState::default();
        b.insert(Triplet::new("hotel", "area", "centre"));
        let new = BTreeSet::from([Triplet::new("hotel", "area", "north")]);
        merge(&mut b, &[Triplet::new("hotel", "area", "centre")], &new);
        assert_eq!(b.get("hotel", "area"), Some("north"));
    }

    #[test]
    fn perfect_predictor_replays_gold_states() {
        let mut cfg = SyntheticConfig::standard(3);
        cfg.n_train = 60;
        let splits = generate_synthetic(&cfg, 5).unwrap();
        let stub = ScriptedPredictor::perfect(&splits.train);
        for d in &splits.train {
            let mut s = TrackSession::new(&d.id);
            for (t, gold) in d.turns.iter().zip(d.gold_states()) {
                s.track_turn(&stub, &t.sys_utterance, &t.user_utterance);
                assert_eq!(s.belief, gold);
                assert_eq!(s.prev_domain.as_deref(), Some(t.gold_domain.as_str()));
            }
        }
    }

    fn arb_triplets() -> impl Strategy<Value = BTreeSet<Triplet>> {
        prop::collection::btree_set(
            (0usize..2, 0usize..3, 0usize..3)
                .prop_map(|(d, s, v)| Triplet::new(["hotel", "train"][d], ["area", "day", "name"][s], ["a", "b", "c"][v])),
            0..6,
        )
    }

    proptest! {
        #[test]
        fn merge_is_idempotent_and_key_unique(start in arb_triplets(), new in arb_triplets()) {
            let mut once = BeliefState::from_triplets(&start);
            merge(&mut once, &[], &new);
            let mut twice = once.clone();
            merge(&mut twice, &[], &new);
            prop_assert_eq!(&once, &twice);
            let keys: BTreeSet<_> = once.triplets().iter().map(Triplet::key).collect();
            prop_assert_eq!(keys.len(), once.len());
        }
    }
}
