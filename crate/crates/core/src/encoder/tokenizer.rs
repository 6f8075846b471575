//! Lowercasing whitespace+punctuation tokenizer.

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const PAD: &str = "[PAD]";
pub const NONE_DOMAIN: &str = "[NONE_DOMAIN]";

/// Splits text into lowercase tokens: runs of alphanumeric characters form
/// one token, every other non-space character is a token by itself.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
            continue;
        }
        if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Canonical surface form of a value: its tokens joined by single spaces.
pub fn normalize_value(value: &str) -> String {
    tokenize_text(value).join(" ")
}

/// `[CLS] sys [SEP] usr [SEP]`, possibly truncated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedTurn {
    pub tokens: Vec<String>,
    /// Number of utterance tokens dropped to fit the length limit.
    pub truncated: usize,
}

impl TokenizedTurn {
    /// Tokens after `[CLS]`, i.e. the positions that receive IOB tags.
    pub fn positions(&self) -> &[String] {
        &self.tokens[1..]
    }
}

pub fn tokenize(sys: &str, usr: &str) -> TokenizedTurn {
    tokenize_with_limit(sys, usr, usize::MAX)
}

/// Tokenizes a turn keeping at most `max_len` tokens (markers included).
/// User tokens are dropped from the end first, then system tokens.
pub fn tokenize_with_limit(sys: &str, usr: &str, max_len: usize) -> TokenizedTurn {
    let mut sys_tokens = tokenize_text(sys);
    let mut usr_tokens = tokenize_text(usr);
    let budget = max_len.saturating_sub(3);
    let mut truncated = 0;
    if sys_tokens.len() + usr_tokens.len() > budget {
        let excess = sys_tokens.len() + usr_tokens.len() - budget;
        let from_usr = excess.min(usr_tokens.len());
        usr_tokens.truncate(usr_tokens.len() - from_usr);
        let from_sys = excess - from_usr;
        sys_tokens.truncate(sys_tokens.len() - from_sys);
        truncated = excess;
    }
    let mut tokens = Vec::with_capacity(sys_tokens.len() + usr_tokens.len() + 3);
    tokens.push(CLS.to_string());
    tokens.extend(sys_tokens);
    tokens.push(SEP.to_string());
    tokens.extend(usr_tokens);
    tokens.push(SEP.to_string());
    TokenizedTurn { tokens, truncated }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_turn_is_just_markers() {
        assert_eq!(tokenize("", "").tokens, [CLS, SEP, SEP]);
    }

    #[test]
    fn golden_system_sentence() {
        assert_eq!(
            tokenize("Leaving from Cambridge.", "").tokens,
            [CLS, "leaving", "from", "cambridge", ".", SEP, SEP]
        );
    }

    #[test]
    fn punctuation_and_case() {
        assert_eq!(
            tokenize_text("I'd like 2 rooms, at 17:45!"),
            ["i", "'", "d", "like", "2", "rooms", ",", "at", "17", ":", "45", "!"]
        );
        assert_eq!(normalize_value("  King   House "), "king house");
    }

    #[test]
    fn deterministic() {
        assert_eq!(tokenize("a b", "c, d"), tokenize("a b", "c, d"));
    }

    #[test]
    fn truncation_drops_user_tail_first() {
        let t = tokenize_with_limit("a b", "c d e", 6);
        assert_eq!(t.tokens, [CLS, "a", "b", SEP, "c", SEP]);
        assert_eq!(t.truncated, 2);
        let t = tokenize_with_limit("a b c", "d", 4);
        assert_eq!(t.tokens, [CLS, "a", SEP, SEP]);
        assert_eq!(t.truncated, 3);
    }
}
