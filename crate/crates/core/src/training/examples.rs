//! Turning gold dialogues into per-turn training targets.

use crate::corpus::{align_iob, derive_ctype_labels, split_slot, BeliefState, Dialogue, Ontology};
use crate::encoder::{tokenize_with_limit, TripletIds, Vocab};
use crate::error::{Error, Result};

/// Everything the joint loss needs for one turn. Label embeddings are kept
/// as token ids so they can be read from any embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnExample {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub ids: Vec<usize>,
    /// One target per token after `[CLS]`.
    pub tags: Vec<Option<usize>>,
    pub domain: usize,
    /// Vocabulary id of the gold previous domain (teacher forcing).
    pub prev_domain: usize,
    pub r_real: Vec<f64>,
    /// `(slot-name token ids, class)` for each C-type slot of the gold domain.
    pub ctype: Vec<(Vec<usize>, usize)>,
    /// Carried gold triplets with their keep target.
    pub(crate) carried: Vec<(TripletIds, f64)>,
    pub truncated: bool,
}

impl TurnExample {
    pub fn num_carried(&self) -> usize {
        self.carried.len()
    }
}

pub fn build_examples(
    dialogues: &[Dialogue],
    ontology: &Ontology,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<TurnExample>> {
    let mut out = Vec::new();
    for d in dialogues {
        let mut state = BeliefState::default();
        let mut prev: Option<&str> = None;
        for turn in &d.turns {
            let tok = tokenize_with_limit(&turn.sys_utterance, &turn.user_utterance, max_len);
            let align = align_iob(turn, ontology, tok.positions());
            let domain = ontology.domain_index(&turn.gold_domain).ok_or_else(|| Error::Dialogue {
                dialogue: d.id.clone(),
                message: format!("unknown domain {}", turn.gold_domain),
            })?;

            // The constraint target covers the slots that were actually tagged.
            let s = ontology.num_stype();
            let mut hit = vec![false; s];
            for &l in &align.tags.labels {
                if let Some((slot, _)) = crate::corpus::label_slot(l) {
                    hit[slot] = true;
                }
            }
            let slots: Vec<&str> = (0..s)
                .filter(|&i| hit[i])
                .map(|i| ontology.stype_slots()[i].as_str())
                .collect();
            let r_real = crate::heads::build_r_real::<f64>(slots, ontology)?.probs;

            let labels = derive_ctype_labels(turn, ontology)?;
            let ctype = ontology
                .ctype_slots(&turn.gold_domain)
                .iter()
                .map(|q| {
                    let name = split_slot(q).map_or(q.as_str(), |(_, n)| n);
                    (vocab.label_ids(name), labels[q].index())
                })
                .collect();

            let carried = state
                .triplets()
                .iter()
                .map(|t| {
                    let keep = if turn.gold_removes.contains(t) { 0.0 } else { 1.0 };
                    (TripletIds::new(vocab, t), keep)
                })
                .collect();

            out.push(TurnExample {
                dialogue_id: d.id.clone(),
                turn_index: turn.turn_index,
                ids: vocab.ids(&tok.tokens),
                tags: align.tags.labels.iter().map(|&l| Some(l)).collect(),
                domain,
                prev_domain: vocab.domain_id(prev),
                r_real,
                ctype,
                carried,
                truncated: tok.truncated > 0,
            });
            state.apply_delta(&turn.gold_removes, &turn.gold_adds);
            prev = Some(&turn.gold_domain);
        }
    }
    Ok(out)
}
