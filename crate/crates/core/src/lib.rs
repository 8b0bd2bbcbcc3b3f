//! Matching fact-checked claims to social media posts: retrieval, reranking,
//! vote adjudication, model annotation, synthetic training data and
//! Monte Carlo evaluation.

pub mod adjudication;
pub mod eval;
pub mod gateway;
pub mod http;
pub mod ingest;
pub mod label;
pub mod par;
pub mod pipeline;
pub mod prompts;
pub mod rerank;
pub mod retrieval;
pub mod synth;

#[doc(hidden)]
pub mod testkit;

pub use label::{EntailmentLabel, PresentationOrder, PromptStyle, Vote};
