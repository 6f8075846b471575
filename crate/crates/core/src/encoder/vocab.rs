use std::collections::{BTreeSet, HashMap};

use super::tokenizer::{tokenize_text, CLS, NONE_DOMAIN, PAD, SEP, UNK};
use crate::corpus::{split_slot, Dialogue, Ontology};
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const NONE_DOMAIN_ID: usize = 4;

pub fn domain_token(domain: &str) -> String {
    format!("[DOMAIN:{domain}]")
}

/// Token <-> index map. Indices 0..=4 are `[PAD] [UNK] [CLS] [SEP]
/// [NONE_DOMAIN]`, followed by one pseudo-token per domain, followed by
/// words in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Collects words from utterances, slot names and values.
    pub fn build<'a>(ontology: &Ontology, corpus: impl IntoIterator<Item = &'a Dialogue>) -> Self {
        let mut words = BTreeSet::new();
        let mut add = |text: &str| words.extend(tokenize_text(text));
        for q in ontology.stype_slots().iter().chain(ontology.all_ctype_slots()) {
            if let Some((_, slot)) = split_slot(q) {
                add(slot);
            }
        }
        for v in ["yes", "no", "dontcare"] {
            add(v);
        }
        for d in corpus {
            for t in &d.turns {
                add(&t.sys_utterance);
                add(&t.user_utterance);
                for tr in t.gold_adds.iter().chain(&t.gold_removes) {
                    add(&tr.value);
                }
            }
        }
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP, NONE_DOMAIN].map(String::from).to_vec();
        tokens.extend(ontology.domains().iter().map(|d| domain_token(d)));
        tokens.extend(words);
        Self::from_tokens(tokens).expect("freshly built vocabulary is valid")
    }

    /// Rebuilds a vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = [PAD, UNK, CLS, SEP, NONE_DOMAIN];
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved {
            return Err(Error::Checkpoint("vocabulary does not start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Pseudo-token id for a domain, `[NONE_DOMAIN]` for `None`.
    pub fn domain_id(&self, domain: Option<&str>) -> usize {
        match domain {
            None => NONE_DOMAIN_ID,
            Some(d) => self.id(&domain_token(d)),
        }
    }

    /// Token ids of a free-text label (slot name or value); never empty.
    pub fn label_ids(&self, text: &str) -> Vec<usize> {
        let ids = self.ids(&tokenize_text(text));
        if ids.is_empty() {
            vec![UNK_ID]
        } else {
            ids
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    #[test]
    fn reserved_layout_and_round_trip() {
        let o = Ontology::new(
            ["hotel", "train"].map(String::from),
            ["hotel.area", "train.book day"].map(String::from),
            BTreeMap::new(),
        )
        .unwrap();
        let v = Vocab::build(&o, []);
        assert_eq!(v.id(CLS), CLS_ID);
        assert_eq!(v.domain_id(None), NONE_DOMAIN_ID);
        assert_eq!(v.token(v.domain_id(Some("hotel"))), "[DOMAIN:hotel]");
        assert_ne!(v.id("book"), UNK_ID);
        assert_eq!(v.id("zebra"), UNK_ID);
        assert_eq!(v.label_ids(""), vec![UNK_ID]);
        let back = Vocab::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(back, v);
        let mut dup = v.tokens().to_vec();
        dup.push("area".into());
        assert!(Vocab::from_tokens(dup).is_err());
    }
}
