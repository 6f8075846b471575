//! MultiWoz 2.0 reader.
//!
//! `data.json` maps dialogue ids to `{"log": [...]}` where even entries are
//! user turns and odd entries are system turns whose `metadata` holds the
//! cumulative belief state as `{domain: {"semi": {...}, "book": {...}}}`.
//! Cumulative states are turned into per-turn deltas by set difference.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use super::{
    normalize_ctype_value, CorpusSplits, Dialogue, DialogueTurn, Ontology, Triplet, DONTCARE,
};
use crate::encoder::tokenizer::normalize_value;
use crate::error::{Error, Result};

/// Slots whose values are categorical yes/no/dontcare in MultiWoz.
pub const CTYPE_SLOTS: [&str; 2] = ["hotel.internet", "hotel.parking"];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub dialogues: usize,
    pub turns: usize,
    /// Annotations skipped because the slot is not in the supplied ontology.
    pub skipped_slots: BTreeMap<String, usize>,
    /// C-type annotations whose value could not be normalized.
    pub unmapped_ctype_values: usize,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub ontology: Ontology,
    pub dialogues: Vec<Dialogue>,
    /// Cumulative state per turn as read from the source annotations (after
    /// filtering and normalization), parallel to `dialogues`.
    pub source_states: Vec<Vec<super::BeliefState>>,
    pub report: IngestReport,
}

impl Ingested {
    /// Number of dialogues whose replayed deltas diverge from the source
    /// cumulative states at some turn.
    pub fn reconstruction_mismatches(&self) -> usize {
        self.dialogues
            .iter()
            .zip(&self.source_states)
            .filter(|(d, src)| d.gold_states() != **src)
            .count()
    }
}

#[derive(Deserialize)]
struct RawDialogue {
    log: Vec<RawTurn>,
}

#[derive(Deserialize)]
struct RawTurn {
    text: String,
    #[serde(default)]
    metadata: BTreeMap<String, Value>,
}

fn slot_name(section: &str, key: &str) -> String {
    let key = key.to_lowercase();
    if section == "book" {
        format!("book {key}")
    } else {
        key
    }
}

fn is_absent(value: &str) -> bool {
    matches!(value.trim().to_lowercase().as_str(), "" | "not mentioned" | "none")
}

/// Raw `(domain, slot, value)` annotations of one metadata block.
fn metadata_triplets(id: &str, metadata: &BTreeMap<String, Value>) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (domain, block) in metadata {
        let Value::Object(sections) = block else {
            return Err(Error::Dialogue {
                dialogue: id.to_string(),
                message: format!("metadata for {domain} is not an object"),
            });
        };
        for section in ["semi", "book"] {
            let Some(Value::Object(slots)) = sections.get(section) else {
                continue;
            };
            for (key, value) in slots {
                if key == "booked" {
                    continue;
                }
                let Value::String(v) = value else {
                    continue;
                };
                if is_absent(v) {
                    continue;
                }
                out.push(Triplet::new(domain.to_lowercase(), slot_name(section, key), v.clone()));
            }
        }
    }
    Ok(out)
}

fn is_dontcare(v: &str) -> bool {
    normalize_ctype_value(v) == Some(super::CtypeLabel::DontCare)
        && !matches!(v.trim(), "any" | "anything")
}

/// Parses the contents of a MultiWoz `data.json`. With `ontology` given,
/// annotations outside it are skipped and counted; otherwise the ontology is
/// derived from the data.
pub fn parse_multiwoz(text: &str, ontology: Option<&Ontology>) -> Result<Ingested> {
    let root: BTreeMap<String, Value> =
        serde_json::from_str(text).map_err(|e| Error::json("multiwoz data", e))?;

    let mut raw: Vec<(String, Vec<(String, String, Vec<Triplet>)>)> = Vec::new();
    for (id, value) in root {
        let dialogue: RawDialogue =
            serde_json::from_value(value).map_err(|e| Error::Dialogue {
                dialogue: id.clone(),
                message: e.to_string(),
            })?;
        let mut turns = Vec::new();
        for t in 0..dialogue.log.len() / 2 {
            let usr = dialogue.log[2 * t].text.clone();
            let sys = if t == 0 {
                String::new()
            } else {
                dialogue.log[2 * t - 1].text.clone()
            };
            let state = metadata_triplets(&id, &dialogue.log[2 * t + 1].metadata)?;
            turns.push((sys, usr, state));
        }
        raw.push((id.trim_end_matches(".json").to_string(), turns));
    }

    let ontology = match ontology {
        Some(o) => o.clone(),
        None => derive_ontology(&raw)?,
    };

    let mut report = IngestReport::default();
    let mut dialogues = Vec::with_capacity(raw.len());
    let mut source_states = Vec::with_capacity(raw.len());
    for (id, turns) in raw {
        let mut states = Vec::with_capacity(turns.len());
        let mut texts = Vec::with_capacity(turns.len());
        for (sys, usr, triplets) in turns {
            let mut state = super::BeliefState::default();
            for t in triplets {
                if !ontology.contains(&t.domain, &t.slot) {
                    *report.skipped_slots.entry(t.qualified_slot()).or_default() += 1;
                    continue;
                }
                let value = if ontology.is_ctype(&t.domain, &t.slot) {
                    match normalize_ctype_value(&t.value).and_then(|l| l.value()) {
                        Some(v) => v.to_string(),
                        None => {
                            report.unmapped_ctype_values += 1;
                            continue;
                        }
                    }
                } else if is_dontcare(&t.value) {
                    DONTCARE.to_string()
                } else {
                    normalize_value(&t.value)
                };
                state.insert(Triplet::new(t.domain, t.slot, value));
            }
            states.push(state);
            texts.push((sys, usr));
        }
        let dialogue = deltas_to_dialogue(&id, texts, &states, &ontology);
        report.dialogues += 1;
        report.turns += dialogue.turns.len();
        dialogues.push(dialogue);
        source_states.push(states);
    }

    Ok(Ingested {
        ontology,
        dialogues,
        source_states,
        report,
    })
}

fn derive_ontology(raw: &[(String, Vec<(String, String, Vec<Triplet>)>)]) -> Result<Ontology> {
    let mut domains = BTreeSet::new();
    let mut stype = BTreeSet::new();
    let mut ctype: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (_, turns) in raw {
        for (_, _, triplets) in turns {
            for t in triplets {
                domains.insert(t.domain.clone());
                let q = t.qualified_slot();
                if CTYPE_SLOTS.contains(&q.as_str()) {
                    let list = ctype.entry(t.domain.clone()).or_default();
                    if !list.contains(&q) {
                        list.push(q);
                    }
                } else {
                    stype.insert(q);
                }
            }
        }
    }
    Ontology::new(domains, stype, ctype)
}

/// Converts cumulative states into per-turn deltas and assigns each turn a
/// domain: the majority domain of its changed slots, ties and empty turns
/// falling back to the previous turn's domain.
fn deltas_to_dialogue(
    id: &str,
    texts: Vec<(String, String)>,
    states: &[super::BeliefState],
    ontology: &Ontology,
) -> Dialogue {
    let empty = super::BeliefState::default();
    let mut deltas = Vec::with_capacity(states.len());
    for (i, state) in states.iter().enumerate() {
        let prev = if i == 0 { &empty } else { &states[i - 1] };
        let now: BTreeSet<Triplet> = state.triplets().into_iter().collect();
        let before: BTreeSet<Triplet> = prev.triplets().into_iter().collect();
        let adds: BTreeSet<Triplet> = now.difference(&before).cloned().collect();
        let removes: BTreeSet<Triplet> = before.difference(&now).cloned().collect();
        deltas.push((adds, removes));
    }

    let majorities: Vec<Vec<String>> = deltas
        .iter()
        .map(|(adds, removes)| {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for t in adds.iter().chain(removes) {
                *counts.entry(t.domain.as_str()).or_default() += 1;
            }
            let best = counts.values().copied().max().unwrap_or(0);
            counts
                .into_iter()
                .filter(|&(_, c)| c == best && best > 0)
                .map(|(d, _)| d.to_string())
                .collect()
        })
        .collect();

    let mut prev: Option<String> = None;
    let mut turns = Vec::with_capacity(texts.len());
    for (i, ((sys, usr), (adds, removes))) in texts.into_iter().zip(deltas).enumerate() {
        let tied = &majorities[i];
        let domain = if tied.is_empty() {
            prev.clone()
                .or_else(|| majorities[i..].iter().find_map(|m| m.first().cloned()))
                .unwrap_or_else(|| ontology.domains()[0].clone())
        } else if let Some(p) = prev.as_ref().filter(|p| tied.contains(p)) {
            p.clone()
        } else {
            tied[0].clone()
        };
        prev = Some(domain.clone());
        turns.push(DialogueTurn {
            sys_utterance: sys,
            user_utterance: usr,
            gold_domain: domain,
            gold_adds: adds,
            gold_removes: removes,
            turn_index: i,
        });
    }
    Dialogue::new(id, turns)
}

/// Reads `data.json` from a MultiWoz directory (or the file itself).
pub fn load_multiwoz(path: &Path) -> Result<Ingested> {
    let file = if path.is_dir() {
        path.join("data.json")
    } else {
        path.to_path_buf()
    };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    parse_multiwoz(&text, None)
}

/// Reads a split list: either a JSON array of ids or one id per line.
pub fn parse_id_list(text: &str) -> BTreeSet<String> {
    let ids: Vec<String> = serde_json::from_str(text).unwrap_or_else(|_| {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    });
    ids.into_iter()
        .map(|s| s.trim_end_matches(".json").to_string())
        .collect()
}

/// Partitions ingested dialogues with `valListFile.json` and
/// `testListFile.json` from `dir`; everything else is training data.
pub fn split_official(dir: &Path, ingested: Ingested) -> Result<CorpusSplits> {
    let read = |name: &str| -> Result<BTreeSet<String>> {
        let p = dir.join(name);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(parse_id_list(&text))
    };
    let dev_ids = read("valListFile.json")?;
    let test_ids = read("testListFile.json")?;
    let mut splits = CorpusSplits {
        ontology: ingested.ontology,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for d in ingested.dialogues {
        if dev_ids.contains(&d.id) {
            splits.dev.push(d);
        } else if test_ids.contains(&d.id) {
            splits.test.push(d);
        } else {
            splits.train.push(d);
        }
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{
      "MUL0001.json": {"log": [
        {"text": "I need a train from Cambridge.", "metadata": {}},
        {"text": "Where to?", "metadata": {
          "train": {"semi": {"departure": "cambridge", "destination": ""}, "book": {"booked": [], "people": ""}},
          "hotel": {"semi": {"area": "not mentioned", "internet": "not mentioned"}, "book": {"booked": []}}}},
        {"text": "To London. Also a hotel in the centre with free wifi.", "metadata": {}},
        {"text": "OK.", "metadata": {
          "train": {"semi": {"departure": "cambridge", "destination": "london"}, "book": {"booked": []}},
          "hotel": {"semi": {"area": "centre", "internet": "yes"}, "book": {"booked": []}}}},
        {"text": "I wanna the King House.", "metadata": {}},
        {"text": "Booked.", "metadata": {
          "train": {"semi": {"departure": "cambridge", "destination": "london"}, "book": {"booked": []}},
          "hotel": {"semi": {"area": "not mentioned", "name": "King House", "internet": "yes"}, "book": {"booked": [], "day": "don't care"}}}}
      ]},
      "SNG0002.json": {"log": [
        {"text": "A hotel with parking.", "metadata": {}},
        {"text": "Sure.", "metadata": {
          "hotel": {"semi": {"parking": "free", "area": "centre"}, "book": {"booked": []}}}}
      ]}
    }"#;

    #[test]
    fn deltas_and_domains() {
        let ing = parse_multiwoz(FIXTURE, None).unwrap();
        assert_eq!(ing.dialogues.len(), 2);
        let d = &ing.dialogues[0];
        assert_eq!(d.id, "MUL0001");
        assert_eq!(d.turns[0].sys_utterance, "");
        assert_eq!(d.turns[1].sys_utterance, "Where to?");
        assert_eq!(d.turns[0].gold_domain, "train");
        assert_eq!(
            d.turns[0].gold_adds.iter().cloned().collect::<Vec<_>>(),
            vec![Triplet::new("train", "departure", "cambridge")]
        );
        // turn 1 changes one train slot and two hotel slots
        assert_eq!(d.turns[1].gold_domain, "hotel");
        assert!(d.turns[1].gold_adds.contains(&Triplet::new("hotel", "internet", "yes")));
        // the King House turn drops the area
        let t2 = &d.turns[2];
        assert!(t2.gold_adds.contains(&Triplet::new("hotel", "name", "king house")));
        assert!(t2.gold_adds.contains(&Triplet::new("hotel", "book day", DONTCARE)));
        assert_eq!(
            t2.gold_removes.iter().cloned().collect::<Vec<_>>(),
            vec![Triplet::new("hotel", "area", "centre")]
        );
        assert_eq!(ing.dialogues[1].turns[0].gold_adds.len(), 2);
        assert!(ing.dialogues[1].turns[0]
            .gold_adds
            .contains(&Triplet::new("hotel", "parking", "yes")));
        assert_eq!(ing.reconstruction_mismatches(), 0);
        for d in &ing.dialogues {
            d.validate(&ing.ontology).unwrap();
        }
    }

    #[test]
    fn derived_ontology_separates_ctype() {
        let ing = parse_multiwoz(FIXTURE, None).unwrap();
        assert_eq!(ing.ontology.ctype_slots("hotel"), ["hotel.internet", "hotel.parking"]);
        assert!(ing.ontology.is_stype("hotel", "book day"));
        assert!(ing.ontology.is_stype("train", "departure"));
    }

    #[test]
    fn slots_outside_a_given_ontology_are_counted() {
        let ontology = Ontology::new(
            ["hotel", "train"].map(String::from),
            ["train.departure", "train.destination", "hotel.name", "hotel.area"].map(String::from),
            BTreeMap::from([("hotel".to_string(), vec!["hotel.internet".to_string()])]),
        )
        .unwrap();
        let ing = parse_multiwoz(FIXTURE, Some(&ontology)).unwrap();
        assert_eq!(ing.report.skipped_slots["hotel.parking"], 1);
        assert_eq!(ing.report.skipped_slots["hotel.book day"], 1);
        assert_eq!(ing.reconstruction_mismatches(), 0);
    }

    #[test]
    fn malformed_dialogue_names_its_id() {
        let err = parse_multiwoz(r#"{"BAD1.json": {"log": [{"text": 3}]}}"#, None).unwrap_err();
        assert!(err.to_string().contains("BAD1"), "{err}");
        assert!(parse_multiwoz("[not json", None).is_err());
    }

    #[test]
    fn id_lists_in_both_formats() {
        assert_eq!(
            parse_id_list("SNG01.json\nMUL02.json\n"),
            BTreeSet::from(["SNG01".to_string(), "MUL02".to_string()])
        );
        assert_eq!(parse_id_list(r#"["A.json"]"#), BTreeSet::from(["A".to_string()]));
    }
}
