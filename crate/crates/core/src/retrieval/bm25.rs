//! Okapi BM25 over an in-memory inverted index of posts.
//!
//! score(D, Q) = Σ_{q ∈ Q} IDF(q) · f(q,D)·(k1+1) / (f(q,D) + k1·(1 − b + b·|D|/avgdl))
//! IDF(q)      = ln(1 + (N − n(q) + 0.5) / (n(q) + 0.5))
//!
//! Query tokens are summed with multiplicity, in query order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::tokenize::{tokenize, TokenSeq};
use crate::ingest::{Claim, Post};
use crate::par;

const FORMAT_MAGIC: &str = "claim-match-bm25";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum Bm25Error {
    #[error("cannot build an index from zero posts")]
    EmptyCorpus,
    #[error("duplicate post id `{0}`")]
    DuplicateId(String),
    #[error("post id `{0}` contains a tab or newline")]
    InvalidId(String),
    #[error("invalid BM25 parameters k1={k1}, b={b}")]
    InvalidConfig { k1: f64, b: f64 },
    #[error("post `{0}` is not in the index")]
    UnknownDoc(String),
    #[error("index file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Config {
    /// Term-frequency saturation, > 0.
    pub k1: f64,
    /// Length normalization, in [0, 1].
    pub b: f64,
}

impl Default for Bm25Config {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Config {
    pub fn validate(&self) -> Result<(), Bm25Error> {
        let ok = self.k1.is_finite() && self.k1 > 0.0 && (0.0..=1.0).contains(&self.b);
        if ok {
            Ok(())
        } else {
            Err(Bm25Error::InvalidConfig { k1: self.k1, b: self.b })
        }
    }
}

/// Inverse document frequency, always > 0 for 0 ≤ n ≤ N.
pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// One term's contribution for a document.
#[inline]
pub fn term_weight(idf: f64, tf: u32, doc_len: u32, avgdl: f64, cfg: &Bm25Config) -> f64 {
    let tf = tf as f64;
    let norm = 1.0 - cfg.b + cfg.b * (doc_len as f64) / avgdl;
    idf * (tf * (cfg.k1 + 1.0)) / (tf + cfg.k1 * norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    doc: u32,
    tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub post_id: String,
    pub bm25_score: f64,
}

/// Immutable after construction; safe to share across threads.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    cfg: Bm25Config,
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    doc_dates: Vec<NaiveDate>,
    postings: BTreeMap<String, Vec<Posting>>,
    avg_doc_len: f64,
    lookup: HashMap<String, u32>,
}

impl PartialEq for Bm25Index {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg
            && self.doc_ids == other.doc_ids
            && self.doc_lengths == other.doc_lengths
            && self.doc_dates == other.doc_dates
            && self.postings == other.postings
            && self.avg_doc_len.to_bits() == other.avg_doc_len.to_bits()
    }
}

fn check_id(id: &str) -> Result<(), Bm25Error> {
    if id.contains(['\t', '\n', '\r']) {
        Err(Bm25Error::InvalidId(id.to_string()))
    } else {
        Ok(())
    }
}

impl Bm25Index {
    /// Indexes posts. Documents are stored in post-id order, so the result
    /// does not depend on input order.
    pub fn build(posts: &[Post], cfg: Bm25Config) -> Result<Self, Bm25Error> {
        cfg.validate()?;
        if posts.is_empty() {
            return Err(Bm25Error::EmptyCorpus);
        }
        let mut sorted: Vec<&Post> = posts.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        for w in sorted.windows(2) {
            if w[0].id == w[1].id {
                return Err(Bm25Error::DuplicateId(w[0].id.clone()));
            }
        }
        let docs: Vec<(String, NaiveDate, TokenSeq)> = sorted
            .iter()
            .map(|p| {
                check_id(&p.id)?;
                Ok((p.id.clone(), p.date(), tokenize(&p.text)))
            })
            .collect::<Result<_, Bm25Error>>()?;
        Ok(Self::from_tokenized(cfg, docs))
    }

    fn from_tokenized(cfg: Bm25Config, docs: Vec<(String, NaiveDate, TokenSeq)>) -> Self {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_ids = Vec::with_capacity(docs.len());
        let mut doc_lengths = Vec::with_capacity(docs.len());
        let mut doc_dates = Vec::with_capacity(docs.len());
        for (i, (id, date, toks)) in docs.into_iter().enumerate() {
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in toks.iter() {
                *tf.entry(t).or_default() += 1;
            }
            for (term, n) in tf {
                postings.entry(term.to_string()).or_default().push(Posting { doc: i as u32, tf: n });
            }
            doc_ids.push(id);
            doc_lengths.push(toks.len() as u32);
            doc_dates.push(date);
        }
        Self::assemble(cfg, doc_ids, doc_lengths, doc_dates, postings)
    }

    fn assemble(
        cfg: Bm25Config,
        doc_ids: Vec<String>,
        doc_lengths: Vec<u32>,
        doc_dates: Vec<NaiveDate>,
        postings: BTreeMap<String, Vec<Posting>>,
    ) -> Self {
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_len = total as f64 / doc_lengths.len() as f64;
        let lookup = doc_ids.iter().enumerate().map(|(i, id)| (id.clone(), i as u32)).collect();
        Self { cfg, doc_ids, doc_lengths, doc_dates, postings, avg_doc_len, lookup }
    }

    pub fn config(&self) -> &Bm25Config {
        &self.cfg
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_doc_len
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn doc_length(&self, post_id: &str) -> Option<u32> {
        self.lookup.get(post_id).map(|&i| self.doc_lengths[i as usize])
    }

    pub fn doc_date(&self, post_id: &str) -> Option<NaiveDate> {
        self.lookup.get(post_id).map(|&i| self.doc_dates[i as usize])
    }

    /// Number of documents containing `term`.
    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// (post id, term frequency) pairs for `term`, in post-id order.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(term)
            .map(|ps| ps.iter().map(|p| (self.doc_ids[p.doc as usize].as_str(), p.tf)).collect())
            .unwrap_or_default()
    }

    /// Iterates indexed terms in lexical order.
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    pub fn score(&self, query: &TokenSeq, post_id: &str) -> Result<f64, Bm25Error> {
        bm25_score(self, query, post_id, &self.cfg)
    }

    /// Every in-window document with a positive score, best first, ties by id.
    pub fn rank_in_window(
        &self,
        query: &TokenSeq,
        center: NaiveDate,
        window_days: u32,
    ) -> Vec<ScoredCandidate> {
        let n = self.doc_count();
        let in_window =
            |doc: u32| (self.doc_dates[doc as usize] - center).num_days().unsigned_abs() <= window_days as u64;
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in query.iter() {
            let Some(ps) = self.postings.get(term) else { continue };
            let w_idf = idf(n, ps.len());
            for p in ps.iter().filter(|p| in_window(p.doc)) {
                let w = term_weight(w_idf, p.tf, self.doc_lengths[p.doc as usize], self.avg_doc_len, &self.cfg);
                *acc.entry(p.doc).or_insert(0.0) += w;
            }
        }
        let mut out: Vec<ScoredCandidate> = acc
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(doc, s)| ScoredCandidate { post_id: self.doc_ids[doc as usize].clone(), bm25_score: s })
            .collect();
        out.sort_by(cmp_candidates);
        out
    }

    /// Writes the versioned text format: a header carrying the parameters and
    /// counts, one `doc` line per document, then one `term` line per term.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_MAGIC} v{FORMAT_VERSION}");
        let _ = writeln!(s, "k1\t{}", self.cfg.k1);
        let _ = writeln!(s, "b\t{}", self.cfg.b);
        let _ = writeln!(s, "docs\t{}", self.doc_count());
        let _ = writeln!(s, "terms\t{}", self.term_count());
        for i in 0..self.doc_count() {
            let _ = writeln!(s, "doc\t{}\t{}\t{}", self.doc_ids[i], self.doc_dates[i], self.doc_lengths[i]);
        }
        for (term, ps) in &self.postings {
            let list: Vec<String> = ps.iter().map(|p| format!("{}:{}", p.doc, p.tf)).collect();
            let _ = writeln!(s, "term\t{term}\t{}", list.join(","));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, Bm25Error> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let fail = |line: usize, msg: &str| Bm25Error::Format { line, msg: msg.to_string() };
        let mut next = |what: &str| lines.next().ok_or_else(|| fail(0, &format!("missing {what}")));

        let (ln, magic) = next("header")?;
        if magic != format!("{FORMAT_MAGIC} v{FORMAT_VERSION}") {
            return Err(fail(ln, "unsupported header or version"));
        }
        let mut header = |key: &str| -> Result<(usize, String), Bm25Error> {
            let (ln, l) = next(key)?;
            match l.split_once('\t') {
                Some((k, v)) if k == key => Ok((ln, v.to_string())),
                _ => Err(fail(ln, &format!("expected `{key}`"))),
            }
        };
        let parse_f = |(ln, v): (usize, String)| v.parse::<f64>().map_err(|_| fail(ln, "bad number"));
        let parse_u = |(ln, v): (usize, String)| v.parse::<usize>().map_err(|_| fail(ln, "bad count"));
        let k1 = parse_f(header("k1")?)?;
        let b = parse_f(header("b")?)?;
        let n_docs = parse_u(header("docs")?)?;
        let n_terms = parse_u(header("terms")?)?;
        let cfg = Bm25Config { k1, b };
        cfg.validate()?;
        if n_docs == 0 {
            return Err(Bm25Error::EmptyCorpus);
        }

        let mut doc_ids = Vec::with_capacity(n_docs);
        let mut doc_lengths = Vec::with_capacity(n_docs);
        let mut doc_dates = Vec::with_capacity(n_docs);
        for _ in 0..n_docs {
            let (ln, l) = next("doc line")?;
            let parts: Vec<&str> = l.split('\t').collect();
            if parts.len() != 4 || parts[0] != "doc" {
                return Err(fail(ln, "expected doc line"));
            }
            let date = NaiveDate::parse_from_str(parts[2], "%Y-%m-%d").map_err(|_| fail(ln, "bad date"))?;
            let len = parts[3].parse::<u32>().map_err(|_| fail(ln, "bad length"))?;
            if doc_ids.last().is_some_and(|prev: &String| prev.as_str() >= parts[1]) {
                return Err(fail(ln, "doc ids not strictly increasing"));
            }
            doc_ids.push(parts[1].to_string());
            doc_dates.push(date);
            doc_lengths.push(len);
        }
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let (ln, l) = next("term line")?;
            let parts: Vec<&str> = l.split('\t').collect();
            if parts.len() != 3 || parts[0] != "term" || parts[1].is_empty() {
                return Err(fail(ln, "expected term line"));
            }
            let mut list = Vec::new();
            for item in parts[2].split(',') {
                let (d, tf) = item.split_once(':').ok_or_else(|| fail(ln, "bad posting"))?;
                let doc = d.parse::<u32>().map_err(|_| fail(ln, "bad posting doc"))?;
                let tf = tf.parse::<u32>().map_err(|_| fail(ln, "bad posting tf"))?;
                if doc as usize >= n_docs || tf == 0 {
                    return Err(fail(ln, "posting out of range"));
                }
                list.push(Posting { doc, tf });
            }
            if postings.insert(parts[1].to_string(), list).is_some() {
                return Err(fail(ln, "duplicate term"));
            }
        }
        if let Some((ln, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(fail(ln, "trailing content"));
        }
        Ok(Self::assemble(cfg, doc_ids, doc_lengths, doc_dates, postings))
    }

    pub fn save(&self, path: &Path) -> Result<(), Bm25Error> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Bm25Error> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

fn cmp_candidates(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.bm25_score
        .total_cmp(&a.bm25_score)
        .then_with(|| a.post_id.cmp(&b.post_id))
}

/// BM25 score of one document under explicit parameters.
pub fn bm25_score(
    index: &Bm25Index,
    query: &TokenSeq,
    post_id: &str,
    cfg: &Bm25Config,
) -> Result<f64, Bm25Error> {
    let doc = *index.lookup.get(post_id).ok_or_else(|| Bm25Error::UnknownDoc(post_id.to_string()))?;
    let dl = index.doc_lengths[doc as usize];
    let mut score = 0.0;
    for term in query.iter() {
        let Some(ps) = index.postings.get(term) else { continue };
        if let Ok(pos) = ps.binary_search_by_key(&doc, |p| p.doc) {
            score += term_weight(idf(index.doc_count(), ps.len()), ps[pos].tf, dl, index.avg_doc_len, cfg);
        }
    }
    Ok(score)
}

/// Top-`k` posts for a claim within ±`window_days` calendar days (inclusive)
/// of its debunk date. Zero-score posts never appear.
pub fn retrieve_candidates(
    index: &Bm25Index,
    claim: &Claim,
    window_days: u32,
    k: usize,
) -> Vec<ScoredCandidate> {
    let query = tokenize(&claim.text);
    let mut ranked = index.rank_in_window(&query, claim.first_debunked, window_days);
    ranked.truncate(k);
    ranked
}

/// [`retrieve_candidates`] for many claims, fanned out across claims.
pub fn retrieve_all(
    index: &Bm25Index,
    claims: &[Claim],
    window_days: u32,
    k: usize,
) -> Vec<Vec<ScoredCandidate>> {
    par::map(claims, |c| retrieve_candidates(index, c, window_days, k))
}
