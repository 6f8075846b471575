//! Gold value to IOB alignment, and IOB span decoding.

use std::collections::BTreeSet;

use super::{begin_label, inside_label, label_slot, DialogueTurn, Ontology, TagSequence, Triplet, DONTCARE, LABEL_O};
use crate::encoder::tokenizer::tokenize_text;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub tags: TagSequence,
    /// S-type values with no exact token match.
    pub unmatched: Vec<Triplet>,
    /// Values whose first match overlapped an earlier-starting (or equally
    /// early, longer) span.
    pub overlapping: Vec<Triplet>,
}

/// Tags the first case-folded exact token match of every S-type value added
/// in `turn`. `positions` are the tagged tokens (everything after `[CLS]`).
pub fn align_iob(turn: &DialogueTurn, ontology: &Ontology, positions: &[String]) -> Alignment {
    let mut labels = vec![LABEL_O; positions.len()];
    let mut unmatched = Vec::new();
    let mut candidates: Vec<(usize, usize, usize, &Triplet)> = Vec::new();

    for t in &turn.gold_adds {
        let Some(slot) = ontology.stype_index(&t.domain, &t.slot) else {
            continue;
        };
        if t.value == DONTCARE {
            continue;
        }
        let needle = tokenize_text(&t.value);
        match find_first(positions, &needle) {
            Some(start) => candidates.push((start, needle.len(), slot, t)),
            None => unmatched.push(t.clone()),
        }
    }

    // Earlier start wins, then the longer span.
    candidates.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    let mut taken = vec![false; positions.len()];
    let mut overlapping = Vec::new();
    for (start, len, slot, t) in candidates {
        if taken[start..start + len].iter().any(|&x| x) {
            overlapping.push(t.clone());
            continue;
        }
        labels[start] = begin_label(slot);
        for l in &mut labels[start + 1..start + len] {
            *l = inside_label(slot);
        }
        taken[start..start + len].iter_mut().for_each(|x| *x = true);
    }

    Alignment {
        tags: TagSequence { labels },
        unmatched,
        overlapping,
    }
}

fn find_first(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecodedSpans {
    pub triplets: BTreeSet<Triplet>,
    /// Later spans for a slot that already produced a value.
    pub dropped: Vec<Triplet>,
}

/// Assembles maximal `B-q (I-q)*` runs into triplets. A stray `I-q` that
/// does not continue a run of `q` opens a new run. For a slot with several
/// runs the first one wins.
pub fn decode_tags(labels: &[usize], positions: &[String], ontology: &Ontology) -> DecodedSpans {
    assert_eq!(labels.len(), positions.len(), "one label per token");
    let mut spans: Vec<(usize, usize, usize)> = Vec::new(); // (slot, start, end)
    let mut open: Option<(usize, usize)> = None;
    for (i, &label) in labels.iter().enumerate() {
        match label_slot(label) {
            Some((slot, false)) if matches!(open, Some((s, _)) if s == slot) => {}
            Some((slot, _)) => {
                if let Some((s, start)) = open.take() {
                    spans.push((s, start, i));
                }
                open = Some((slot, i));
            }
            None => {
                if let Some((s, start)) = open.take() {
                    spans.push((s, start, i));
                }
            }
        }
    }
    if let Some((s, start)) = open {
        spans.push((s, start, labels.len()));
    }

    let mut out = DecodedSpans::default();
    let mut seen = BTreeSet::new();
    for (slot, start, end) in spans {
        let qualified = &ontology.stype_slots()[slot];
        let (domain, name) = super::split_slot(qualified).expect("qualified slot");
        let t = Triplet::new(domain, name, positions[start..end].join(" "));
        if seen.insert(slot) {
            out.triplets.insert(t);
        } else {
            out.dropped.push(t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::encoder::tokenizer::tokenize;

    fn ontology() -> Ontology {
        Ontology::new(
            ["hotel", "train"].map(String::from),
            ["hotel.name", "hotel.area", "train.departure", "train.destination"].map(String::from),
            BTreeMap::from([("hotel".to_string(), vec!["hotel.internet".to_string()])]),
        )
        .unwrap()
    }

    fn turn(sys: &str, usr: &str, adds: &[(&str, &str, &str)]) -> DialogueTurn {
        DialogueTurn {
            sys_utterance: sys.into(),
            user_utterance: usr.into(),
            gold_domain: "train".into(),
            gold_adds: adds.iter().map(|&(d, s, v)| Triplet::new(d, s, v)).collect(),
            gold_removes: BTreeSet::new(),
            turn_index: 0,
        }
    }

    fn tags_of(a: &Alignment, o: &Ontology) -> Vec<String> {
        a.tags.labels.iter().map(|&l| o.label_name(l)).collect()
    }

    /// Oracle: every window of every length, compared token by token.
    fn brute_force_spans(positions: &[String], value: &str) -> Vec<(usize, usize)> {
        let needle = tokenize_text(value);
        let mut out = Vec::new();
        for start in 0..positions.len() {
            for end in start + 1..=positions.len() {
                if end - start == needle.len()
                    && positions[start..end].iter().zip(&needle).all(|(a, b)| a == b)
                {
                    out.push((start, end));
                }
            }
        }
        out
    }

    #[test]
    fn single_token_value_gets_begin_tag() {
        let o = ontology();
        let t = turn("", "I am leaving from Cambridge today", &[("train", "departure", "cambridge")]);
        let tok = tokenize(&t.sys_utterance, &t.user_utterance);
        let a = align_iob(&t, &o, tok.positions());
        assert_eq!(a.tags.labels.len(), tok.positions().len());
        let tags = tags_of(&a, &o);
        let idx = tok.positions().iter().position(|w| w == "cambridge").unwrap();
        assert_eq!(tags[idx], "B-train.departure");
        assert_eq!(tags.iter().filter(|t| *t != "O").count(), 1);
    }

    #[test]
    fn no_stype_values_means_all_outside() {
        let o = ontology();
        let t = turn("hello", "wifi please", &[("hotel", "internet", "yes")]);
        let tok = tokenize(&t.sys_utterance, &t.user_utterance);
        let a = align_iob(&t, &o, tok.positions());
        assert!(a.tags.labels.iter().all(|&l| l == LABEL_O));
        assert!(a.unmatched.is_empty());
    }

    #[test]
    fn multi_token_value_matches_brute_force_window() {
        let o = ontology();
        let t = turn("", "i wanna the King House please", &[("hotel", "name", "king house")]);
        let tok = tokenize(&t.sys_utterance, &t.user_utterance);
        let a = align_iob(&t, &o, tok.positions());
        let windows = brute_force_spans(tok.positions(), "king house");
        assert_eq!(windows.len(), 1);
        let (s, e) = windows[0];
        let tags = tags_of(&a, &o);
        assert_eq!(tags[s], "B-hotel.name");
        assert_eq!(tags[e - 1], "I-hotel.name");
        assert_eq!(tags.iter().filter(|t| *t != "O").count(), 2);
    }

    #[test]
    fn first_occurrence_wins_and_unmatched_is_reported() {
        let o = ontology();
        let t = turn(
            "from ely ?",
            "yes , from ely to london",
            &[("train", "departure", "ely"), ("train", "destination", "paris")],
        );
        let tok = tokenize(&t.sys_utterance, &t.user_utterance);
        let a = align_iob(&t, &o, tok.positions());
        let first = brute_force_spans(tok.positions(), "ely")[0].0;
        assert_eq!(a.tags.labels[first], begin_label(o.stype_index("train", "departure").unwrap()));
        assert_eq!(a.unmatched, vec![Triplet::new("train", "destination", "paris")]);
    }

    #[test]
    fn dontcare_values_are_not_tagged() {
        let o = ontology();
        let t = turn("", "any area is fine , dontcare", &[("hotel", "area", DONTCARE)]);
        let tok = tokenize(&t.sys_utterance, &t.user_utterance);
        let a = align_iob(&t, &o, tok.positions());
        assert!(a.tags.labels.iter().all(|&l| l == LABEL_O));
        assert!(a.unmatched.is_empty());
    }

    #[test]
    fn overlapping_values_keep_earlier_longer_span() {
        let o = ontology();
        let t = turn(
            "",
            "the king house in king",
            &[("hotel", "name", "king house"), ("hotel", "area", "king")],
        );
        let tok = tokenize(&t.sys_utterance, &t.user_utterance);
        let a = align_iob(&t, &o, tok.positions());
        assert_eq!(a.overlapping, vec![Triplet::new("hotel", "area", "king")]);
        let tags = tags_of(&a, &o);
        assert_eq!(&tags[2..4], ["B-hotel.name", "I-hotel.name"]);
    }

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn decode_simple_span() {
        let o = ontology();
        let dep = o.stype_index("train", "departure").unwrap();
        let d = decode_tags(
            &[LABEL_O, LABEL_O, begin_label(dep), LABEL_O],
            &words("leaving from cambridge today"),
            &o,
        );
        assert_eq!(
            d.triplets.into_iter().collect::<Vec<_>>(),
            vec![Triplet::new("train", "departure", "cambridge")]
        );
        assert!(decode_tags(&[0, 0], &words("a b"), &o).triplets.is_empty());
    }

    #[test]
    fn stray_inside_tags_open_a_span() {
        let o = ontology();
        let name = o.stype_index("hotel", "name").unwrap();
        let labels = [inside_label(name), inside_label(name)];
        let toks = words("king house");
        let d = decode_tags(&labels, &toks, &o);
        assert_eq!(
            d.triplets.iter().cloned().collect::<Vec<_>>(),
            vec![Triplet::new("hotel", "name", "king house")]
        );
        // Oracle: enumerate all (start, end) windows that form a maximal run
        // under the repair rule.
        let mut runs = Vec::new();
        for s in 0..labels.len() {
            for e in s + 1..=labels.len() {
                let all_q = labels[s..e].iter().all(|&l| label_slot(l).map(|x| x.0) == Some(name));
                let opens = s == 0 || label_slot(labels[s - 1]).map(|x| x.0) != Some(name) || labels[s] == begin_label(name);
                let continues = labels[s + 1..e].iter().all(|&l| l == inside_label(name));
                let closes = e == labels.len() || labels[e] != inside_label(name);
                if all_q && opens && continues && closes {
                    runs.push((s, e));
                }
            }
        }
        assert_eq!(runs, vec![(0, 2)]);
    }

    #[test]
    fn second_span_for_a_slot_is_dropped() {
        let o = ontology();
        let area = o.stype_index("hotel", "area").unwrap();
        let d = decode_tags(
            &[begin_label(area), LABEL_O, begin_label(area)],
            &words("north or south"),
            &o,
        );
        assert_eq!(d.triplets.len(), 1);
        assert!(d.triplets.contains(&Triplet::new("hotel", "area", "north")));
        assert_eq!(d.dropped, vec![Triplet::new("hotel", "area", "south")]);
    }

    #[test]
    fn begin_after_begin_splits_and_switching_slot_closes() {
        let o = ontology();
        let dep = o.stype_index("train", "departure").unwrap();
        let dest = o.stype_index("train", "destination").unwrap();
        let d = decode_tags(
            &[begin_label(dep), inside_label(dest), inside_label(dest)],
            &words("ely new york"),
            &o,
        );
        let got: Vec<_> = d.triplets.into_iter().collect();
        assert_eq!(
            got,
            vec![
                Triplet::new("train", "departure", "ely"),
                Triplet::new("train", "destination", "new york"),
            ]
        );
    }
}
