//! Dialogue data model, canonical corpus format and turn-level supervision.
//!
//! The canonical corpus is JSON-lines, one dialogue per line:
//!
//! ```text
//! {"id": "...", "turns": [{"sys": "...", "usr": "...", "domain": "hotel",
//!                          "adds": [["hotel", "area", "centre"]], "removes": []}]}
//! ```
//!
//! Turn-level `adds`/`removes` are deltas against the previous turn's
//! cumulative state. [`Dialogue::gold_states`] replays them.

mod align;
pub mod multiwoz;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use align::{align_iob, decode_tags, Alignment, DecodedSpans};

/// A `(domain, slot, value)` triplet. `slot` is the short slot name; the
/// fully-qualified name is `domain.slot`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(String, String, String)", into = "(String, String, String)")]
pub struct Triplet {
    pub domain: String,
    pub slot: String,
    pub value: String,
}

impl Triplet {
    pub fn new(domain: impl Into<String>, slot: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            slot: slot.into(),
            value: value.into(),
        }
    }

    pub fn key(&self) -> SlotKey {
        SlotKey {
            domain: self.domain.clone(),
            slot: self.slot.clone(),
        }
    }

    pub fn qualified_slot(&self) -> String {
        format!("{}.{}", self.domain, self.slot)
    }
}

impl From<(String, String, String)> for Triplet {
    fn from((domain, slot, value): (String, String, String)) -> Self {
        Self { domain, slot, value }
    }
}

impl From<Triplet> for (String, String, String) {
    fn from(t: Triplet) -> Self {
        (t.domain, t.slot, t.value)
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.domain, self.slot, self.value)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotKey {
    pub domain: String,
    pub slot: String,
}

/// Splits `"domain.slot"` at the first dot.
pub fn split_slot(qualified: &str) -> Option<(&str, &str)> {
    qualified.split_once('.')
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct RawOntology {
    domains: Vec<String>,
    stype: Vec<String>,
    ctype: BTreeMap<String, Vec<String>>,
}

/// Domains plus the S-type / C-type slot partition. All lists are kept in
/// lexicographic order so vector indices are stable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawOntology", into = "RawOntology")]
pub struct Ontology {
    domains: Vec<String>,
    stype: Vec<String>,
    ctype: BTreeMap<String, Vec<String>>,
    stype_index: BTreeMap<String, usize>,
}

impl TryFrom<RawOntology> for Ontology {
    type Error = Error;

    fn try_from(raw: RawOntology) -> Result<Self> {
        Ontology::new(raw.domains, raw.stype, raw.ctype)
    }
}

impl From<Ontology> for RawOntology {
    fn from(o: Ontology) -> Self {
        RawOntology {
            domains: o.domains,
            stype: o.stype,
            ctype: o.ctype,
        }
    }
}

impl Ontology {
    /// Builds an ontology from fully-qualified slot names. Lists are sorted
    /// and de-duplicated; every domain gets a (possibly empty) C-type list.
    pub fn new(
        domains: impl IntoIterator<Item = String>,
        stype: impl IntoIterator<Item = String>,
        ctype: BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        let domains: BTreeSet<String> = domains.into_iter().collect();
        let stype: BTreeSet<String> = stype.into_iter().collect();
        if stype.is_empty() {
            return Err(Error::Ontology("at least one S-type slot is required".into()));
        }
        for d in &domains {
            if d.is_empty() || d.contains('.') || d.chars().any(char::is_whitespace) {
                return Err(Error::Ontology(format!("bad domain name {d:?}")));
            }
        }
        let check = |q: &str| -> Result<()> {
            match split_slot(q) {
                Some((d, s)) if domains.contains(d) && !s.is_empty() => Ok(()),
                _ => Err(Error::Ontology(format!(
                    "slot {q:?} is not of the form <known domain>.<slot>"
                ))),
            }
        };
        for q in &stype {
            check(q)?;
        }
        let mut ctype_sorted: BTreeMap<String, Vec<String>> =
            domains.iter().map(|d| (d.clone(), Vec::new())).collect();
        for (d, slots) in ctype {
            let Some(list) = ctype_sorted.get_mut(&d) else {
                return Err(Error::Ontology(format!("C-type list for unknown domain {d:?}")));
            };
            let set: BTreeSet<String> = slots.into_iter().collect();
            for q in &set {
                check(q)?;
                if split_slot(q).map(|p| p.0) != Some(d.as_str()) {
                    return Err(Error::Ontology(format!("C-type slot {q:?} listed under {d:?}")));
                }
                if stype.contains(q) {
                    return Err(Error::Ontology(format!("slot {q:?} is both S-type and C-type")));
                }
            }
            *list = set.into_iter().collect();
        }
        let stype: Vec<String> = stype.into_iter().collect();
        let stype_index = stype.iter().enumerate().map(|(i, q)| (q.clone(), i)).collect();
        Ok(Self {
            domains: domains.into_iter().collect(),
            stype,
            ctype: ctype_sorted,
            stype_index,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::json("ontology", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("ontology serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn domain_index(&self, domain: &str) -> Option<usize> {
        self.domains.binary_search_by(|d| d.as_str().cmp(domain)).ok()
    }

    /// Fully-qualified S-type slot names; their order defines the `s` axis.
    pub fn stype_slots(&self) -> &[String] {
        &self.stype
    }

    /// Number of S-type slots (`s`).
    pub fn num_stype(&self) -> usize {
        self.stype.len()
    }

    pub fn stype_index(&self, domain: &str, slot: &str) -> Option<usize> {
        self.stype_index.get(&format!("{domain}.{slot}")).copied()
    }

    pub fn ctype_slots(&self, domain: &str) -> &[String] {
        self.ctype.get(domain).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all_ctype_slots(&self) -> impl Iterator<Item = &String> {
        self.ctype.values().flatten()
    }

    pub fn is_stype(&self, domain: &str, slot: &str) -> bool {
        self.stype_index(domain, slot).is_some()
    }

    pub fn is_ctype(&self, domain: &str, slot: &str) -> bool {
        let q = format!("{domain}.{slot}");
        self.ctype_slots(domain).contains(&q)
    }

    pub fn contains(&self, domain: &str, slot: &str) -> bool {
        self.is_stype(domain, slot) || self.is_ctype(domain, slot)
    }

    /// Size of the IOB label space, `2s + 1`.
    pub fn num_labels(&self) -> usize {
        2 * self.stype.len() + 1
    }

    pub fn label_name(&self, label: usize) -> String {
        match label_slot(label) {
            None => "O".to_string(),
            Some((slot, begin)) => {
                format!("{}-{}", if begin { "B" } else { "I" }, self.stype[slot])
            }
        }
    }
}

/// IOB label index layout: `0` is `O`; S-type slot `i` owns `B = 1 + 2i`
/// and `I = 2 + 2i`.
pub const LABEL_O: usize = 0;

pub fn begin_label(slot: usize) -> usize {
    1 + 2 * slot
}

pub fn inside_label(slot: usize) -> usize {
    2 + 2 * slot
}

/// Returns `(slot index, is_begin)` for a B/I label, `None` for `O`.
pub fn label_slot(label: usize) -> Option<(usize, bool)> {
    if label == LABEL_O {
        None
    } else {
        Some(((label - 1) / 2, label % 2 == 1))
    }
}

/// One label per tagged position (every encoded token after `[CLS]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSequence {
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    #[serde(rename = "sys")]
    pub sys_utterance: String,
    #[serde(rename = "usr")]
    pub user_utterance: String,
    #[serde(rename = "domain")]
    pub gold_domain: String,
    #[serde(rename = "adds", default)]
    pub gold_adds: BTreeSet<Triplet>,
    #[serde(rename = "removes", default)]
    pub gold_removes: BTreeSet<Triplet>,
    #[serde(skip)]
    pub turn_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<DialogueTurn>,
}

impl Dialogue {
    pub fn new(id: impl Into<String>, mut turns: Vec<DialogueTurn>) -> Self {
        for (i, t) in turns.iter_mut().enumerate() {
            t.turn_index = i;
        }
        Self { id: id.into(), turns }
    }

    /// Cumulative gold state after each turn, by replaying the deltas.
    pub fn gold_states(&self) -> Vec<BeliefState> {
        let mut state = BeliefState::default();
        self.turns
            .iter()
            .map(|t| {
                state.apply_delta(&t.gold_removes, &t.gold_adds);
                state.clone()
            })
            .collect()
    }

    /// Distinct gold domains over all turns.
    pub fn domains(&self) -> BTreeSet<&str> {
        self.turns.iter().map(|t| t.gold_domain.as_str()).collect()
    }

    pub fn is_multi_domain(&self) -> bool {
        self.domains().len() > 1
    }

    pub fn validate(&self, ontology: &Ontology) -> Result<()> {
        let fail = |message: String| Error::Dialogue {
            dialogue: self.id.clone(),
            message,
        };
        for t in &self.turns {
            if ontology.domain_index(&t.gold_domain).is_none() {
                return Err(fail(format!(
                    "turn {} has unknown domain {:?}",
                    t.turn_index, t.gold_domain
                )));
            }
            if let Some(both) = t.gold_adds.intersection(&t.gold_removes).next() {
                return Err(fail(format!(
                    "turn {} both adds and removes {both}",
                    t.turn_index
                )));
            }
            for tr in t.gold_adds.iter().chain(&t.gold_removes) {
                if !ontology.contains(&tr.domain, &tr.slot) {
                    return Err(fail(format!(
                        "turn {}: {}",
                        t.turn_index,
                        Error::UnknownSlot(tr.qualified_slot())
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Cumulative dialogue state: at most one value per `(domain, slot)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BeliefState {
    slots: BTreeMap<SlotKey, String>,
}

impl BeliefState {
    pub fn from_triplets<'a>(triplets: impl IntoIterator<Item = &'a Triplet>) -> Self {
        let mut s = Self::default();
        for t in triplets {
            s.insert(t.clone());
        }
        s
    }

    /// Inserts, overwriting any value held under the same key. Returns the
    /// displaced value.
    pub fn insert(&mut self, t: Triplet) -> Option<String> {
        self.slots.insert(
            SlotKey {
                domain: t.domain,
                slot: t.slot,
            },
            t.value,
        )
    }

    /// Removes `t` only if the state holds exactly that value.
    pub fn remove(&mut self, t: &Triplet) -> bool {
        let key = t.key();
        if self.slots.get(&key) == Some(&t.value) {
            self.slots.remove(&key);
            true
        } else {
            false
        }
    }

    pub fn apply_delta<'a>(
        &mut self,
        removes: impl IntoIterator<Item = &'a Triplet>,
        adds: impl IntoIterator<Item = &'a Triplet>,
    ) {
        for t in removes {
            self.remove(t);
        }
        for t in adds {
            self.insert(t.clone());
        }
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&str> {
        self.slots
            .get(&SlotKey {
                domain: domain.to_string(),
                slot: slot.to_string(),
            })
            .map(String::as_str)
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.get(&t.domain, &t.slot) == Some(t.value.as_str())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn clear(&mut self) {
        self.slots.clear();
    }

    /// Triplets in key order.
    pub fn triplets(&self) -> Vec<Triplet> {
        self.slots
            .iter()
            .map(|(k, v)| Triplet::new(k.domain.clone(), k.slot.clone(), v.clone()))
            .collect()
    }
}

impl Serialize for BeliefState {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.triplets().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BeliefState {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let triplets = Vec::<Triplet>::deserialize(deserializer)?;
        Ok(Self::from_triplets(&triplets))
    }
}

/// C-type slot classes; `Absent` marks a slot not mentioned in the turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CtypeLabel {
    Yes,
    No,
    DontCare,
    Absent,
}

impl CtypeLabel {
    pub const ALL: [CtypeLabel; 4] = [
        CtypeLabel::Yes,
        CtypeLabel::No,
        CtypeLabel::DontCare,
        CtypeLabel::Absent,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    /// Canonical value string; `None` for `Absent`.
    pub fn value(self) -> Option<&'static str> {
        match self {
            CtypeLabel::Yes => Some("yes"),
            CtypeLabel::No => Some("no"),
            CtypeLabel::DontCare => Some("dontcare"),
            CtypeLabel::Absent => None,
        }
    }
}

/// Maps raw annotation strings onto the three C-type values.
pub fn normalize_ctype_value(raw: &str) -> Option<CtypeLabel> {
    let v: String = raw
        .trim()
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect();
    match v.as_str() {
        "yes" | "y" | "true" | "free" => Some(CtypeLabel::Yes),
        "no" | "n" | "false" | "none" => Some(CtypeLabel::No),
        "dontcare" | "dontcares" | "doesntcare" | "dontmind" | "any" | "anything" => {
            Some(CtypeLabel::DontCare)
        }
        _ => None,
    }
}

/// Normalized "don't care" spelling for S-type values.
pub const DONTCARE: &str = "dontcare";

/// C-type classes for every C-type slot in the ontology, keyed by the
/// fully-qualified slot name.
pub fn derive_ctype_labels(
    turn: &DialogueTurn,
    ontology: &Ontology,
) -> Result<BTreeMap<String, CtypeLabel>> {
    let mut labels: BTreeMap<String, CtypeLabel> = ontology
        .all_ctype_slots()
        .map(|q| (q.clone(), CtypeLabel::Absent))
        .collect();
    for t in &turn.gold_adds {
        if !ontology.is_ctype(&t.domain, &t.slot) {
            continue;
        }
        let label = normalize_ctype_value(&t.value).ok_or_else(|| Error::CtypeValue {
            slot: t.qualified_slot(),
            value: t.value.clone(),
        })?;
        labels.insert(t.qualified_slot(), label);
    }
    Ok(labels)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_dialogs: usize,
    pub n_single_domain: usize,
    pub n_multi_domain: usize,
    pub avg_turns: f64,
}

pub fn stats(corpus: &[Dialogue]) -> CorpusStats {
    let n_dialogs = corpus.len();
    let n_multi_domain = corpus.iter().filter(|d| d.is_multi_domain()).count();
    let turns: usize = corpus.iter().map(|d| d.turns.len()).sum();
    CorpusStats {
        n_dialogs,
        n_single_domain: n_dialogs - n_multi_domain,
        n_multi_domain,
        avg_turns: if n_dialogs == 0 {
            0.0
        } else {
            turns as f64 / n_dialogs as f64
        },
    }
}

/// Parses canonical JSON-lines. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Dialogue>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("<corpus line {}>", lineno + 1), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Dialogue = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("corpus line {}", lineno + 1), e))?;
        out.push(Dialogue::new(d.id, d.turns));
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut writer: W, corpus: &[Dialogue]) -> std::io::Result<()> {
    for d in corpus {
        serde_json::to_writer(&mut writer, d)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Dialogue>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Json { context, source } => Error::Json {
            context: format!("{}: {context}", path.display()),
            source,
        },
        other => other,
    })
}

pub fn save_jsonl(path: &Path, corpus: &[Dialogue]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_jsonl(&mut w, corpus).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// The on-disk layout shared by `gen-corpus`, `ingest`, `train` and `eval`:
/// `train.jsonl`, `dev.jsonl`, `test.jsonl` and `ontology.json` in one
/// directory.
#[derive(Clone, Debug)]
pub struct CorpusSplits {
    pub ontology: Ontology,
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Dev => "dev.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

pub const ONTOLOGY_FILE: &str = "ontology.json";

impl CorpusSplits {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.ontology.save(&dir.join(ONTOLOGY_FILE))?;
        save_jsonl(&dir.join(Split::Train.file_name()), &self.train)?;
        save_jsonl(&dir.join(Split::Dev.file_name()), &self.dev)?;
        save_jsonl(&dir.join(Split::Test.file_name()), &self.test)
    }

    /// Loads and validates every split present in `dir`; a missing split
    /// file reads as empty.
    pub fn load(dir: &Path) -> Result<Self> {
        let ontology = Ontology::load(&dir.join(ONTOLOGY_FILE))?;
        let read = |split: Split| -> Result<Vec<Dialogue>> {
            let path = dir.join(split.file_name());
            if !path.exists() {
                return Ok(Vec::new());
            }
            let corpus = load_jsonl(&path)?;
            for d in &corpus {
                d.validate(&ontology)?;
            }
            Ok(corpus)
        };
        Ok(Self {
            train: read(Split::Train)?,
            dev: read(Split::Dev)?,
            test: read(Split::Test)?,
            ontology,
        })
    }

    pub fn split(&self, split: Split) -> &[Dialogue] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Resolves a `--corpus` argument: a corpus directory, or a single
/// JSON-lines file whose directory holds `ontology.json`.
pub fn load_corpus_arg(path: &Path, split: Split) -> Result<(Ontology, Vec<Dialogue>)> {
    if let Err(e) = std::fs::metadata(path) {
        return Err(Error::io(path, e));
    }
    if path.is_dir() {
        let splits = CorpusSplits::load(path)?;
        let corpus = splits.split(split).to_vec();
        return Ok((splits.ontology, corpus));
    }
    let dir: PathBuf = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let ontology = Ontology::load(&dir.join(ONTOLOGY_FILE))?;
    let corpus = load_jsonl(path)?;
    for d in &corpus {
        d.validate(&ontology)?;
    }
    Ok((ontology, corpus))
}
