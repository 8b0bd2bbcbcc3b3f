use serde::{Deserialize, Serialize};

/// Lowercased word tokens in text order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

impl From<Vec<String>> for TokenSeq {
    /// Accepts pre-split tokens; empty strings are dropped.
    fn from(v: Vec<String>) -> Self {
        Self(v.into_iter().filter(|t| !t.is_empty()).collect())
    }
}

/// Splits on every character that is not Unicode alphanumeric, then lowercases.
/// No stemming and no stopword removal.
pub fn tokenize(text: &str) -> TokenSeq {
    let tokens = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    TokenSeq(tokens)
}
