//! Seeded generator of template dialogues with exact turn deltas.
//!
//! Dialogues exercise everything the heads have to learn: domain switches
//! (announced by an intro phrase), values shared between domains (`area`,
//! `day`) whose slot is only identifiable from the dialogue's domain,
//! system recaps that repeat earlier values without changing the state,
//! value overwrites, and supersede rules (informing a hotel name makes the
//! hotel area outdated).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BeliefState, CorpusSplits, CtypeLabel, Dialogue, DialogueTurn, Ontology, Triplet};
use crate::encoder::tokenizer::tokenize_text;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub values: Vec<String>,
    /// User phrasings; `{v}` is replaced by the value.
    pub templates: Vec<String>,
    /// System question asking for this slot.
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtypeSpec {
    pub name: String,
    pub yes: Vec<String>,
    pub no: Vec<String>,
    pub dontcare: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Phrases announcing the domain at dialogue start or after a switch.
    pub intros: Vec<String>,
    pub stype: Vec<SlotSpec>,
    pub ctype: Vec<CtypeSpec>,
    /// `(informed slot, outdated slot)`: informing the first removes the
    /// second from the state.
    #[serde(default)]
    pub supersedes: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub domains: Vec<DomainSpec>,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Probability that a dialogue may switch domains.
    pub p_multi_domain: f64,
    /// Per-turn switch probability inside a multi-domain dialogue.
    pub p_switch: f64,
    pub p_overwrite: f64,
    pub p_ctype: f64,
    /// Probability that the system repeats an earlier value.
    pub p_recap: f64,
    /// Probability of a turn that changes nothing.
    pub p_chitchat: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::standard(3)
    }
}

impl SyntheticConfig {
    /// The built-in catalog restricted to its first `num_domains` domains
    /// (hotel, restaurant, train, taxi, attraction).
    pub fn standard(num_domains: usize) -> Self {
        let mut domains = catalog();
        domains.truncate(num_domains.max(1));
        Self {
            domains,
            n_train: 50,
            n_dev: 20,
            n_test: 20,
            min_turns: 2,
            max_turns: 8,
            p_multi_domain: 0.6,
            p_switch: 0.3,
            p_overwrite: 0.15,
            p_ctype: 0.35,
            p_recap: 0.3,
            p_chitchat: 0.1,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::json("synthetic config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.domains.len() < 2 {
            return bad("at least two domains are required".into());
        }
        let mut names = BTreeSet::new();
        for d in &self.domains {
            if !names.insert(&d.name) {
                return bad(format!("duplicate domain {}", d.name));
            }
            if d.intros.is_empty() {
                return bad(format!("domain {} has no intro phrases", d.name));
            }
            if d.stype.len() < 2 {
                return bad(format!("domain {} needs at least two S-type slots", d.name));
            }
            if d.ctype.is_empty() {
                return bad(format!("domain {} needs at least one C-type slot", d.name));
            }
            for s in &d.stype {
                if s.values.is_empty() {
                    return bad(format!("slot {}.{} has an empty value inventory", d.name, s.name));
                }
                if s.templates.is_empty() || s.templates.iter().any(|t| !t.contains("{v}")) {
                    return bad(format!("slot {}.{} needs templates containing {{v}}", d.name, s.name));
                }
                if s.values.iter().any(|v| tokenize_text(v).join(" ") != *v) {
                    return bad(format!("slot {}.{} values must be normalized lowercase tokens", d.name, s.name));
                }
            }
            for c in &d.ctype {
                if c.yes.is_empty() || c.no.is_empty() || c.dontcare.is_empty() {
                    return bad(format!("C-type slot {}.{} needs phrases for every class", d.name, c.name));
                }
            }
            for (a, b) in &d.supersedes {
                if !d.stype.iter().any(|s| &s.name == a) || !d.stype.iter().any(|s| &s.name == b) {
                    return bad(format!("supersede rule {a}->{b} in {} names unknown slots", d.name));
                }
            }
        }
        if self.min_turns == 0 || self.min_turns > self.max_turns {
            return bad("need 1 <= min_turns <= max_turns".into());
        }
        for p in [
            self.p_multi_domain,
            self.p_switch,
            self.p_overwrite,
            self.p_ctype,
            self.p_recap,
            self.p_chitchat,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn ontology(&self) -> Result<Ontology> {
        let domains = self.domains.iter().map(|d| d.name.clone());
        let stype = self
            .domains
            .iter()
            .flat_map(|d| d.stype.iter().map(move |s| format!("{}.{}", d.name, s.name)));
        let ctype = self
            .domains
            .iter()
            .map(|d| {
                let slots = d.ctype.iter().map(|c| format!("{}.{}", d.name, c.name)).collect();
                (d.name.clone(), slots)
            })
            .collect();
        Ontology::new(domains, stype, ctype)
    }
}

/// Generates train/dev/test splits. The ontology depends on the config
/// only; dialogues depend on the config and the seed.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<CorpusSplits> {
    config.validate()?;
    let ontology = config.ontology()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |split: &str, n: usize| -> Vec<Dialogue> {
        (0..n)
            .map(|i| generate_dialogue(config, &mut rng, format!("syn-{split}-{i:05}")))
            .collect()
    };
    let train = make("train", config.n_train);
    let dev = make("dev", config.n_dev);
    let test = make("test", config.n_test);
    Ok(CorpusSplits {
        ontology,
        train,
        dev,
        test,
    })
}

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [String]) -> &'a str {
    items.choose(rng).expect("non-empty")
}

fn render(template: &str, value: &str) -> String {
    template.replace("{v}", value)
}

const CHITCHAT: [&str; 4] = [
    "ok , thank you .",
    "that sounds good .",
    "great , thanks .",
    "alright .",
];

const GREETINGS: [&str; 2] = ["hello , how can i help you ?", "welcome , what can i do for you ?"];

fn generate_dialogue(config: &SyntheticConfig, rng: &mut ChaCha8Rng, id: String) -> Dialogue {
    let n_turns = rng.gen_range(config.min_turns..=config.max_turns);
    let multi = rng.gen_bool(config.p_multi_domain);
    let mut domain = rng.gen_range(0..config.domains.len());
    let mut state = BeliefState::default();
    let mut turns = Vec::with_capacity(n_turns);

    for t in 0..n_turns {
        let spec = &config.domains[domain];
        let unfilled: Vec<&SlotSpec> = spec
            .stype
            .iter()
            .filter(|s| state.get(&spec.name, &s.name).is_none())
            .collect();

        let sys_prompt = if t == 0 {
            GREETINGS.choose(rng).unwrap().to_string()
        } else if let Some(s) = unfilled.choose(rng) {
            s.prompt.clone()
        } else {
            "is there anything else ?".to_string()
        };

        let switch = t > 0 && multi && (rng.gen_bool(config.p_switch) || unfilled.is_empty());
        if switch {
            let others: Vec<usize> = (0..config.domains.len()).filter(|&d| d != domain).collect();
            domain = *others.choose(rng).unwrap();
        }
        let spec = &config.domains[domain];

        let mut parts: Vec<String> = Vec::new();
        if t == 0 || switch {
            parts.push(pick(rng, &spec.intros).to_string());
        }

        let mut adds: BTreeSet<Triplet> = BTreeSet::new();
        let mut new_values: Vec<String> = Vec::new();
        let mut informed: Vec<String> = Vec::new();
        let chitchat = t > 0 && !switch && rng.gen_bool(config.p_chitchat);

        if !chitchat {
            let filled: Vec<&SlotSpec> = spec
                .stype
                .iter()
                .filter(|s| state.get(&spec.name, &s.name).is_some())
                .collect();
            let unfilled: Vec<&SlotSpec> = spec
                .stype
                .iter()
                .filter(|s| state.get(&spec.name, &s.name).is_none())
                .collect();
            let overwrite = !filled.is_empty() && rng.gen_bool(config.p_overwrite);
            if overwrite {
                let slot = *filled.choose(rng).unwrap();
                let old = state.get(&spec.name, &slot.name).unwrap().to_string();
                let candidates: Vec<&String> = slot.values.iter().filter(|v| **v != old).collect();
                if let Some(v) = candidates.choose(rng) {
                    let phrase = render(pick(rng, &slot.templates), v);
                    parts.push(format!("actually , i would prefer {phrase} instead"));
                    adds.insert(Triplet::new(&spec.name, &slot.name, v.as_str()));
                    new_values.push((*v).clone());
                    informed.push(slot.name.clone());
                }
            } else if !unfilled.is_empty() {
                let k = if unfilled.len() >= 2 && rng.gen_bool(0.4) { 2 } else { 1 };
                let chosen: Vec<&&SlotSpec> = unfilled.choose_multiple(rng, k).collect();
                for slot in chosen {
                    let free: Vec<&String> = slot
                        .values
                        .iter()
                        .filter(|v| !new_values.iter().any(|n| values_clash(n, v)))
                        .collect();
                    let Some(v) = free.choose(rng) else { continue };
                    parts.push(render(pick(rng, &slot.templates), v));
                    adds.insert(Triplet::new(&spec.name, &slot.name, v.as_str()));
                    new_values.push((*v).clone());
                    informed.push(slot.name.clone());
                }
            }

            let open_ctype: Vec<&CtypeSpec> = spec
                .ctype
                .iter()
                .filter(|c| state.get(&spec.name, &c.name).is_none())
                .collect();
            if (adds.is_empty() || rng.gen_bool(config.p_ctype)) && !open_ctype.is_empty() {
                let c = *open_ctype.choose(rng).unwrap();
                let label = *[CtypeLabel::Yes, CtypeLabel::No, CtypeLabel::DontCare]
                    .choose(rng)
                    .unwrap();
                let phrases = match label {
                    CtypeLabel::Yes => &c.yes,
                    CtypeLabel::No => &c.no,
                    _ => &c.dontcare,
                };
                parts.push(pick(rng, phrases).to_string());
                adds.insert(Triplet::new(&spec.name, &c.name, label.value().unwrap()));
            }
        }
        if parts.is_empty() {
            parts.push(CHITCHAT.choose(rng).unwrap().to_string());
        }

        // State changes: supersede rules, then overwrites.
        let mut removes: BTreeSet<Triplet> = BTreeSet::new();
        for (by, outdated) in &spec.supersedes {
            if informed.contains(by) && !informed.contains(outdated) {
                if let Some(v) = state.get(&spec.name, outdated) {
                    removes.insert(Triplet::new(&spec.name, outdated.as_str(), v));
                }
            }
        }
        for a in &adds {
            if let Some(v) = state.get(&a.domain, &a.slot) {
                removes.insert(Triplet::new(&a.domain, &a.slot, v));
            }
        }

        let mut sys = sys_prompt;
        if t > 0 && rng.gen_bool(config.p_recap) {
            let old: Vec<Triplet> = state
                .triplets()
                .into_iter()
                .filter(|tr| {
                    config
                        .domains
                        .iter()
                        .any(|d| d.name == tr.domain && d.stype.iter().any(|s| s.name == tr.slot))
                })
                .filter(|tr| !new_values.iter().any(|n| values_clash(n, &tr.value)))
                .collect();
            if let Some(tr) = old.choose(rng) {
                sys = format!("i have noted {} . {sys}", tr.value);
            }
        }

        state.apply_delta(&removes, &adds);
        turns.push(DialogueTurn {
            sys_utterance: sys,
            user_utterance: parts.join(" , ") + " .",
            gold_domain: spec.name.clone(),
            gold_adds: adds,
            gold_removes: removes,
            turn_index: t,
        });
    }
    Dialogue::new(id, turns)
}

/// Two values clash when one's tokens occur inside the other's.
fn values_clash(a: &str, b: &str) -> bool {
    let ta = tokenize_text(a);
    let tb = tokenize_text(b);
    let (short, long) = if ta.len() <= tb.len() { (&ta, &tb) } else { (&tb, &ta) };
    long.windows(short.len()).any(|w| w == short.as_slice())
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn slot(name: &str, values: &[&str], templates: &[&str], prompt: &str) -> SlotSpec {
    SlotSpec {
        name: name.into(),
        values: strings(values),
        templates: strings(templates),
        prompt: prompt.into(),
    }
}

fn ctype(name: &str, yes: &[&str], no: &[&str], dontcare: &[&str]) -> CtypeSpec {
    CtypeSpec {
        name: name.into(),
        yes: strings(yes),
        no: strings(no),
        dontcare: strings(dontcare),
    }
}

const AREAS: [&str; 5] = ["north", "south", "east", "west", "centre"];
const DAYS: [&str; 7] = [
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
];
const CITIES: [&str; 8] = [
    "cambridge", "london", "ely", "norwich", "stevenage", "peterborough", "kings lynn", "bishops stortford",
];
const TIMES: [&str; 8] = ["9am", "10am", "11am", "noon", "2pm", "4pm", "6pm", "8pm"];
const AREA_TEMPLATES: [&str; 3] = ["somewhere in the {v}", "in the {v} area please", "the {v} part of town"];
const DAY_TEMPLATES: [&str; 3] = ["on {v}", "for {v}", "starting {v}"];

fn catalog() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            name: "hotel".into(),
            intros: strings(&["i need a hotel", "i am looking for a place to stay"]),
            stype: vec![
                slot("area", &AREAS, &AREA_TEMPLATES, "what area would you like ?"),
                slot("day", &DAYS, &DAY_TEMPLATES, "what day will you arrive ?"),
                slot(
                    "name",
                    &["king house", "acorn guest house", "gonville hotel", "lensfield hotel", "autumn house", "bridge guest house"],
                    &["i wanna the {v}", "book me into the {v}", "the {v} sounds nice"],
                    "do you have a particular hotel in mind ?",
                ),
                slot(
                    "pricerange",
                    &["cheap", "moderate", "expensive"],
                    &["a {v} one", "something {v}", "in the {v} price range"],
                    "what is your budget ?",
                ),
            ],
            ctype: vec![
                ctype(
                    "internet",
                    &["with free wifi", "it should have internet"],
                    &["no need for internet", "wifi is not needed"],
                    &["i do not care about the internet"],
                ),
                ctype(
                    "parking",
                    &["with free parking", "i need parking"],
                    &["parking is not needed", "no parking please"],
                    &["parking does not matter"],
                ),
            ],
            supersedes: vec![("name".into(), "area".into())],
        },
        DomainSpec {
            name: "restaurant".into(),
            intros: strings(&["i want a restaurant", "i am looking for somewhere to eat"]),
            stype: vec![
                slot("area", &AREAS, &AREA_TEMPLATES, "which part of town ?"),
                slot("day", &DAYS, &DAY_TEMPLATES, "which day is the booking for ?"),
                slot(
                    "food",
                    &["italian", "chinese", "indian", "british", "french", "thai", "modern european", "mexican"],
                    &["serving {v} food", "i fancy {v}", "{v} cuisine"],
                    "what type of food would you like ?",
                ),
                slot(
                    "name",
                    &["golden wok", "pizza express", "the copper kettle", "curry garden", "bedouin", "sala thong"],
                    &["a table at {v}", "i would like {v}", "how about {v}"],
                    "do you have a restaurant in mind ?",
                ),
            ],
            ctype: vec![ctype(
                "outdoor",
                &["with outdoor seating", "we want to sit outside"],
                &["indoor seating only", "no outdoor tables"],
                &["seating does not matter"],
            )],
            supersedes: vec![],
        },
        DomainSpec {
            name: "train".into(),
            intros: strings(&["i need a train", "i want to book a train"]),
            stype: vec![
                slot("day", &DAYS, &DAY_TEMPLATES, "what day do you travel ?"),
                slot("departure", &CITIES, &["from {v}", "departing from {v}"], "where are you leaving from ?"),
                slot("destination", &CITIES, &["to {v}", "going to {v}"], "where are you going ?"),
                slot("leaveat", &TIMES, &["leaving after {v}", "departing after {v}"], "when do you want to leave ?"),
            ],
            ctype: vec![ctype(
                "bikes",
                &["i will bring a bike", "bikes must be allowed"],
                &["no bikes", "i have no bike"],
                &["bikes do not matter"],
            )],
            supersedes: vec![],
        },
        DomainSpec {
            name: "taxi".into(),
            intros: strings(&["i need a taxi", "please book a cab"]),
            stype: vec![
                slot("arriveby", &TIMES, &["arriving by {v}", "i must arrive by {v}"], "when do you need to arrive ?"),
                slot("departure", &CITIES, &["pick me up at {v}", "from {v}"], "where should it pick you up ?"),
                slot("destination", &CITIES, &["drop me at {v}", "to {v}"], "where are you heading ?"),
                slot("leaveat", &TIMES, &["leaving at {v}", "pick up at {v}"], "when do you want to leave ?"),
            ],
            ctype: vec![ctype(
                "luggage",
                &["i have luggage", "with room for bags"],
                &["no luggage", "i travel light"],
                &["luggage space does not matter"],
            )],
            supersedes: vec![],
        },
        DomainSpec {
            name: "attraction".into(),
            intros: strings(&["i want to visit an attraction", "something fun to see"]),
            stype: vec![
                slot("area", &AREAS, &AREA_TEMPLATES, "which area do you want to visit ?"),
                slot(
                    "name",
                    &["kings college", "the fitzwilliam museum", "castle galleries", "parkside pools"],
                    &["i want to see {v}", "take me to {v}"],
                    "any particular attraction ?",
                ),
                slot(
                    "type",
                    &["museum", "college", "park", "theatre", "boat"],
                    &["a {v}", "some {v}"],
                    "what kind of place ?",
                ),
            ],
            ctype: vec![ctype(
                "free",
                &["it must be free", "free entry please"],
                &["i can pay entry", "paid is fine"],
                &["entry fee does not matter"],
            )],
            supersedes: vec![],
        },
    ]
}

/// A config whose `p_overwrite` is 1 and dialogues are long enough for an
/// overwrite to happen after the first turn.
pub fn overwrite_config() -> SyntheticConfig {
    SyntheticConfig {
        p_overwrite: 1.0,
        p_chitchat: 0.0,
        min_turns: 3,
        max_turns: 3,
        ..SyntheticConfig::standard(2)
    }
}

/// Counts per slot of how many generated values failed to align; used by
/// tests to confirm the generator's verbatim-value guarantee.
pub fn unaligned_values(splits: &CorpusSplits) -> BTreeMap<String, usize> {
    use crate::encoder::tokenizer::tokenize;
    let mut out = BTreeMap::new();
    for d in splits.train.iter().chain(&splits.dev).chain(&splits.test) {
        for t in &d.turns {
            let tok = tokenize(&t.sys_utterance, &t.user_utterance);
            let a = super::align_iob(t, &splits.ontology, tok.positions());
            for u in a.unmatched.iter().chain(&a.overlapping) {
                *out.entry(u.qualified_slot()).or_insert(0) += 1;
            }
        }
    }
    out
}
