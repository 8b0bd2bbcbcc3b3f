//! Lexical candidate retrieval: tokenization and BM25 over posts.

pub mod bm25;
pub mod tokenize;

pub use bm25::{
    bm25_score, idf, retrieve_all, retrieve_candidates, term_weight, Bm25Config, Bm25Error,
    Bm25Index, ScoredCandidate,
};
pub use tokenize::{tokenize, TokenSeq};
