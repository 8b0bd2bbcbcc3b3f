//! Shared vocabulary: entailment labels, presentation orders, prompt styles.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Three-way textual entailment relation between a premise and a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntailmentLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl EntailmentLabel {
    /// Canonical order, also used as the index into count arrays and matrices.
    pub const ALL: [EntailmentLabel; 3] = [Self::Entailment, Self::Neutral, Self::Contradiction];

    pub fn index(self) -> usize {
        match self {
            Self::Entailment => 0,
            Self::Neutral => 1,
            Self::Contradiction => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Upper-case keyword as it appears in prompts and answers.
    pub fn keyword(self) -> &'static str {
        match self {
            Self::Entailment => "ENTAILMENT",
            Self::Neutral => "NEUTRAL",
            Self::Contradiction => "CONTRADICTION",
        }
    }
}

impl fmt::Display for EntailmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown value `{0}`")]
pub struct UnknownVariant(pub String);

impl FromStr for EntailmentLabel {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ENTAILMENT" | "E" => Ok(Self::Entailment),
            "NEUTRAL" | "N" => Ok(Self::Neutral),
            "CONTRADICTION" | "C" => Ok(Self::Contradiction),
            _ => Err(UnknownVariant(s.to_string())),
        }
    }
}

/// A single vote: a label, or an answer that could not be parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Vote {
    Entailment,
    Neutral,
    Contradiction,
    Unparsable,
}

impl Vote {
    pub fn label(self) -> Option<EntailmentLabel> {
        match self {
            Vote::Entailment => Some(EntailmentLabel::Entailment),
            Vote::Neutral => Some(EntailmentLabel::Neutral),
            Vote::Contradiction => Some(EntailmentLabel::Contradiction),
            Vote::Unparsable => None,
        }
    }
}

impl From<EntailmentLabel> for Vote {
    fn from(l: EntailmentLabel) -> Self {
        match l {
            EntailmentLabel::Entailment => Vote::Entailment,
            EntailmentLabel::Neutral => Vote::Neutral,
            EntailmentLabel::Contradiction => Vote::Contradiction,
        }
    }
}

impl From<Option<EntailmentLabel>> for Vote {
    fn from(l: Option<EntailmentLabel>) -> Self {
        l.map(Vote::from).unwrap_or(Vote::Unparsable)
    }
}

/// Which text plays the premise role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PresentationOrder {
    /// The post is the premise, the claim the hypothesis.
    PostFirst,
    /// The claim is the premise, the post the hypothesis.
    ClaimFirst,
}

impl PresentationOrder {
    pub const BOTH: [PresentationOrder; 2] = [Self::PostFirst, Self::ClaimFirst];

    pub fn slug(self) -> &'static str {
        match self {
            Self::PostFirst => "post-first",
            Self::ClaimFirst => "claim-first",
        }
    }
}

impl fmt::Display for PresentationOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for PresentationOrder {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "post-first" | "tweet-claim" => Ok(Self::PostFirst),
            "claim-first" | "claim-tweet" => Ok(Self::ClaimFirst),
            _ => Err(UnknownVariant(s.to_string())),
        }
    }
}

/// Annotation prompting style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    AnnotationOnly,
    ZeroShot,
    ZeroShotCot,
    FewShotCot,
}

impl PromptStyle {
    pub const ALL: [PromptStyle; 4] = [
        Self::AnnotationOnly,
        Self::ZeroShot,
        Self::ZeroShotCot,
        Self::FewShotCot,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            Self::AnnotationOnly => "annotation-only",
            Self::ZeroShot => "zero-shot",
            Self::ZeroShotCot => "zero-shot-cot",
            Self::FewShotCot => "few-shot-cot",
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for PromptStyle {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|st| st.slug() == norm)
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}
