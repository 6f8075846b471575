//! Behaviour of the heads after fitting the small synthetic corpus. Each
//! test picks training turns that exercise one behaviour and runs them with
//! the gold history as context.

use std::sync::OnceLock;

use emd_core::corpus::synthetic::{generate_synthetic, SyntheticConfig};
use emd_core::corpus::{BeliefState, CorpusSplits, Dialogue, DialogueTurn, Triplet};
use emd_core::encoder::{Model, ModelConfig};
use emd_core::heads::{compute_constraint, predict_domain};
use emd_core::tracker::{EmdTracker, TurnInference, TurnInput, TurnModel};
use emd_core::training::{train, TrainConfig};

struct Fitted {
    splits: CorpusSplits,
    model: Model<f32>,
}

fn fitted() -> &'static Fitted {
    static FITTED: OnceLock<Fitted> = OnceLock::new();
    FITTED.get_or_init(|| {
        let mut cfg = SyntheticConfig::standard(3);
        cfg.n_train = 50;
        cfg.n_dev = 0;
        cfg.n_test = 0;
        let splits = generate_synthetic(&cfg, 7).unwrap();
        let config = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 30,
            seed: 1,
            model: ModelConfig::default(),
            ..TrainConfig::default()
        };
        let model = train(&splits, &config, |_| {}).unwrap().model;
        Fitted { splits, model }
    })
}

/// A training turn with the gold state and domain before it.
struct Case<'a> {
    dialogue: &'a Dialogue,
    turn: &'a DialogueTurn,
    before: BeliefState,
    prev_domain: Option<&'a str>,
}

fn cases() -> Vec<Case<'static>> {
    let mut out = Vec::new();
    for d in &fitted().splits.train {
        let states = d.gold_states();
        for (i, turn) in d.turns.iter().enumerate() {
            out.push(Case {
                dialogue: d,
                turn,
                before: if i == 0 { BeliefState::default() } else { states[i - 1].clone() },
                prev_domain: (i > 0).then(|| d.turns[i - 1].gold_domain.as_str()),
            });
        }
    }
    out
}

fn infer(c: &Case<'_>) -> TurnInference {
    EmdTracker::new(&fitted().model).infer(&TurnInput {
        dialogue_id: &c.dialogue.id,
        turn_index: c.turn.turn_index,
        sys: &c.turn.sys_utterance,
        usr: &c.turn.user_utterance,
        prev_domain: c.prev_domain,
        belief: &c.before,
    })
}

#[test]
fn constraint_concentrates_on_the_turn_domain() {
    let m = &fitted().model;
    let mut checked = 0;
    for c in cases() {
        let has_train_slot = c.turn.gold_adds.iter().any(|t| t.domain == "train" && m.ontology.is_stype("train", &t.slot));
        if c.turn.gold_domain != "train" || !has_train_slot {
            continue;
        }
        let enc = m.encode(&m.tokenize(&c.turn.sys_utterance, &c.turn.user_utterance));
        assert_eq!(predict_domain(m, &enc, c.prev_domain).domain, "train");
        let r = compute_constraint(m, &enc, c.prev_domain);
        let mass: f32 = m
            .ontology
            .stype_slots()
            .iter()
            .zip(&r.probs)
            .filter(|(q, _)| q.starts_with("train."))
            .map(|(_, p)| p)
            .sum();
        assert!(mass > 0.8, "{:?}: train mass {mass}", c.turn.user_utterance);
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} train turns");
}

#[test]
fn internet_requests_are_classified() {
    let mut checked = 0;
    for c in cases() {
        let Some(gold) = c.turn.gold_adds.iter().find(|t| t.domain == "hotel" && t.slot == "internet") else {
            continue;
        };
        let out = infer(&c);
        assert!(out.new_triplets.contains(gold), "{:?}: {out:?}", c.turn.user_utterance);
        checked += 1;
    }
    assert!(checked >= 5, "only {checked} internet turns");
}

#[test]
fn naming_a_hotel_drops_the_area() {
    let mut checked = 0;
    for c in cases() {
        let superseded = c.turn.gold_adds.iter().any(|t| t.domain == "hotel" && t.slot == "name")
            && c.turn.gold_removes.iter().any(|t| t.domain == "hotel" && t.slot == "area");
        if !superseded {
            continue;
        }
        let out = infer(&c);
        let area = c.before.get("hotel", "area").unwrap();
        assert!(
            out.removals.contains(&Triplet::new("hotel", "area", area)),
            "{:?}: {out:?}",
            c.turn.user_utterance
        );
        checked += 1;
    }
    assert!(checked >= 1, "no supersede turns");
}

#[test]
fn other_domains_survive_a_switch() {
    let mut checked = 0;
    for c in cases() {
        let switched = c.prev_domain.is_some_and(|p| p != c.turn.gold_domain);
        let carried: Vec<Triplet> = c
            .before
            .triplets()
            .into_iter()
            .filter(|t| t.domain != c.turn.gold_domain && !c.turn.gold_removes.contains(t))
            .collect();
        if !switched || carried.is_empty() {
            continue;
        }
        let out = infer(&c);
        assert_eq!(out.domain, c.turn.gold_domain);
        for t in &carried {
            assert!(!out.removals.contains(t), "{:?} dropped {t}", c.turn.user_utterance);
        }
        checked += 1;
    }
    assert!(checked >= 5, "only {checked} switch turns");
}
