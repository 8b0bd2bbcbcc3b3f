use std::collections::HashMap;

use chrono::NaiveDate;
use serde_json::{json, Value};

use claim_match::ingest::Claim;
use claim_match::rerank::{embedder_for, rerank, EmbedError, EmbeddingProviderSpec};
use claim_match::retrieval::ScoredCandidate;
use claim_match::testkit::ScriptedServer;

fn claim() -> Claim {
    Claim {
        id: "c1".into(),
        text: "masks cause oxygen deprivation".into(),
        first_debunked: NaiveDate::from_ymd_opt(2020, 7, 1).unwrap(),
        source: String::new(),
        rating: "False".into(),
    }
}

fn candidates() -> (Vec<ScoredCandidate>, HashMap<String, String>) {
    let cands = ["p1", "p2", "p3"]
        .iter()
        .enumerate()
        .map(|(i, id)| ScoredCandidate { post_id: id.to_string(), bm25_score: 3.0 - i as f64 })
        .collect();
    let texts = [("p1", "wearing a mask all day"), ("p2", "masks starve you of oxygen"), ("p3", "oxygen bars")]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    (cands, texts)
}

fn spec(url: &str) -> EmbeddingProviderSpec {
    EmbeddingProviderSpec { backoff_ms: 1, ..EmbeddingProviderSpec::remote(url, "mini-embed", 3) }
}

#[test]
fn remote_vectors_drive_the_ranking_after_a_retry() {
    let vectors = json!({"vectors": [[1, 0, 0], [0, 1, 0], [0.9, 0.1, 0], [-1, 0, 0]]});
    let server = ScriptedServer::start(vec![(503, "{}".into()), (200, vectors.to_string())]);
    let embedder = embedder_for(&spec(&server.url)).unwrap();
    let (cands, texts) = candidates();
    let ranked = rerank(&claim(), &cands, &texts, embedder.as_ref()).unwrap();

    let order: Vec<&str> = ranked.iter().map(|p| p.post_id.as_str()).collect();
    assert_eq!(order, ["p2", "p1", "p3"]);
    assert_eq!(ranked[2].cosine_score, -1.0);
    assert_eq!(ranked[0].bm25_score, 2.0);

    let reqs = server.requests();
    assert_eq!(reqs.len(), 2);
    let body: Value = serde_json::from_str(&reqs[1]).unwrap();
    assert_eq!(body["model_name"], "mini-embed");
    assert_eq!(body["texts"][0], "masks cause oxygen deprivation");
    assert_eq!(body["texts"].as_array().unwrap().len(), 4);
}

#[test]
fn wrong_dimension_is_rejected() {
    let server = ScriptedServer::start(vec![(200, json!({"vectors": [[1, 0], [0, 1], [1, 1], [0, 1]]}).to_string())]);
    let embedder = embedder_for(&spec(&server.url)).unwrap();
    let (cands, texts) = candidates();
    let err = rerank(&claim(), &cands, &texts, embedder.as_ref()).unwrap_err();
    assert!(matches!(err, EmbedError::DimensionMismatch { expected: 3, got: 2 }), "{err}");
}

#[test]
fn persistent_outage_surfaces_as_unavailable() {
    let server = ScriptedServer::start(vec![(503, "{}".into())]);
    let embedder = embedder_for(&spec(&server.url)).unwrap();
    let (cands, texts) = candidates();
    let err = rerank(&claim(), &cands, &texts, embedder.as_ref()).unwrap_err();
    assert!(matches!(err, EmbedError::ProviderUnavailable(_)), "{err}");
    assert_eq!(server.requests().len(), 4);
}
