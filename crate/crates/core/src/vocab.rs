//! Token alphabet shared by the policy, the verifier and the synthetic tasks.
//!
//! Tags are single vocabulary tokens, not character spans, so the schema
//! parser never has to deal with partial tags. The begin-of-sequence marker
//! is deliberately *not* a vocab token: the policy conditions on it through a
//! reserved transition row but can never emit it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into a [`Vocab`].
pub type TokenId = usize;

pub const TAG_THINKING_OPEN: &str = "<thinking>";
pub const TAG_THINKING_CLOSE: &str = "</thinking>";
pub const TAG_FEEDBACK_OPEN: &str = "<feedback>";
pub const TAG_FEEDBACK_CLOSE: &str = "</feedback>";
pub const TAG_BOX: &str = "<box>";
pub const TAG_EOS: &str = "<eos>";
pub const TAG_UNK: &str = "<unk>";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("duplicate token {0:?}")]
    Duplicate(String),
    #[error("reserved marker {0:?} missing from vocabulary")]
    MissingReserved(&'static str),
}

/// Ordered list of distinct symbols. Fixed for the lifetime of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    const RESERVED: [&'static str; 7] = [
        TAG_THINKING_OPEN,
        TAG_THINKING_CLOSE,
        TAG_FEEDBACK_OPEN,
        TAG_FEEDBACK_CLOSE,
        TAG_BOX,
        TAG_EOS,
        TAG_UNK,
    ];

    /// Builds a vocabulary, checking distinctness and that every reserved
    /// marker is present exactly once.
    pub fn new<I, S>(tokens: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        for (i, t) in tokens.iter().enumerate() {
            if tokens[..i].contains(t) {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        for r in Self::RESERVED {
            if !tokens.iter().any(|t| t == r) {
                return Err(VocabError::MissingReserved(r));
            }
        }
        Ok(Self { tokens })
    }

    /// The canonical alphabet for the synthetic modular-arithmetic tasks:
    /// schema tags, the ten digits, the two task operators, three hint
    /// symbols (one per answer residue class) and two feedback words.
    pub fn standard() -> Self {
        let mut toks: Vec<String> = Self::RESERVED.iter().map(|s| s.to_string()).collect();
        for d in 0..10 {
            toks.push(d.to_string());
        }
        toks.push("⊕".to_string());
        toks.push("⊗".to_string());
        for k in 0..3 {
            toks.push(format!("H{k}"));
        }
        toks.push("issue".to_string());
        toks.push("fix".to_string());
        Self::new(toks).expect("standard vocab is well-formed")
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn thinking_open(&self) -> TokenId {
        self.id(TAG_THINKING_OPEN).unwrap()
    }
    pub fn thinking_close(&self) -> TokenId {
        self.id(TAG_THINKING_CLOSE).unwrap()
    }
    pub fn feedback_open(&self) -> TokenId {
        self.id(TAG_FEEDBACK_OPEN).unwrap()
    }
    pub fn feedback_close(&self) -> TokenId {
        self.id(TAG_FEEDBACK_CLOSE).unwrap()
    }
    pub fn box_marker(&self) -> TokenId {
        self.id(TAG_BOX).unwrap()
    }
    pub fn eos(&self) -> TokenId {
        self.id(TAG_EOS).unwrap()
    }
    pub fn unk(&self) -> TokenId {
        self.id(TAG_UNK).unwrap()
    }

    pub fn digit(&self, d: u8) -> Option<TokenId> {
        debug_assert!(d < 10);
        self.id(&d.to_string())
    }

    pub fn hint(&self, class: u8) -> Option<TokenId> {
        self.id(&format!("H{class}"))
    }

    /// True for the five structural schema tags. `<eos>` and `<unk>` are
    /// reserved but not structural: they may appear in content regions.
    pub fn is_structural(&self, id: TokenId) -> bool {
        id == self.thinking_open()
            || id == self.thinking_close()
            || id == self.feedback_open()
            || id == self.feedback_close()
            || id == self.box_marker()
    }

    /// Renders a token sequence for logs and transcripts.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.token(t).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_vocab_has_reserved_markers_once() {
        let v = Vocab::standard();
        for r in Vocab::RESERVED {
            assert_eq!(v.tokens().iter().filter(|t| *t == r).count(), 1, "{r}");
        }
        assert_eq!(v.size(), 24);
    }

    #[test]
    fn duplicate_token_rejected() {
        let mut toks: Vec<String> = Vocab::standard().tokens().to_vec();
        toks.push("issue".to_string());
        assert_eq!(
            Vocab::new(toks).unwrap_err(),
            VocabError::Duplicate("issue".to_string())
        );
    }

    #[test]
    fn missing_reserved_rejected() {
        let toks: Vec<String> = Vocab::standard()
            .tokens()
            .iter()
            .filter(|t| *t != TAG_BOX)
            .cloned()
            .collect();
        assert_eq!(
            Vocab::new(toks).unwrap_err(),
            VocabError::MissingReserved(TAG_BOX)
        );
    }

    #[test]
    fn digit_and_hint_lookup() {
        let v = Vocab::standard();
        assert_eq!(v.token(v.digit(7).unwrap()), Some("7"));
        assert_eq!(v.token(v.hint(2).unwrap()), Some("H2"));
        assert!(v.is_structural(v.box_marker()));
        assert!(!v.is_structural(v.eos()));
        assert!(!v.is_structural(v.digit(0).unwrap()));
    }
}
