//! Loading and filtering of debunked claims and social posts.
//!
//! Input files are newline-delimited JSON objects. Bad records are rejected
//! with a reason code rather than failing the whole load; only an input with
//! zero records is fatal.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, FixedOffset, NaiveDate, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{0}: input contains no records")]
    EmptyInput(String),
}

/// A fact-checked claim rated false.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub text: String,
    #[serde(rename = "date")]
    pub first_debunked: NaiveDate,
    #[serde(default)]
    pub source: String,
    pub rating: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub text: String,
    pub created_at: DateTime<FixedOffset>,
}

impl Post {
    /// Calendar date in the timestamp's own offset.
    pub fn date(&self) -> NaiveDate {
        self.created_at.date_naive()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    /// Line is not a JSON object.
    Malformed,
    MissingField,
    BadDate,
    MissingTimestamp,
    BadTimestamp,
    EmptyText,
    UrlPresent,
    Repost,
    RatingNotAllowed,
    DuplicateText,
    DuplicateId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub read_count: usize,
    pub kept_count: usize,
    pub rejected: Vec<Rejection>,
}

impl IngestReport {
    fn finish(read_count: usize, kept_count: usize, mut rejected: Vec<Rejection>) -> Self {
        rejected.sort();
        debug_assert_eq!(kept_count + rejected.len(), read_count);
        Self { read_count, kept_count, rejected }
    }
}

/// Case-insensitive default verdict allowlist.
pub fn default_rating_allowlist() -> BTreeSet<String> {
    ["false", "incorrect", "fake"].into_iter().map(String::from).collect()
}

const URL_MARKERS: [&str; 4] = ["http://", "https://", "www.", "t.co/"];

pub fn contains_url(text: &str) -> bool {
    let lower = text.to_lowercase();
    URL_MARKERS.iter().any(|m| lower.contains(m))
}

pub fn is_repost(text: &str) -> bool {
    text.trim_start().starts_with("RT @")
}

/// NFC, lowercase, whitespace collapsed. Used as the claim dedupe key.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect::<String>().to_lowercase();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses an ISO-8601 date, also accepting a full timestamp (date part kept).
pub fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .or_else(|| parse_timestamp(s).map(|t| t.date_naive()))
}

/// Parses an ISO-8601 timestamp. Values without an offset are taken as UTC;
/// a bare date means midnight UTC.
pub fn parse_timestamp(s: &str) -> Option<DateTime<FixedOffset>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t);
    }
    let utc = FixedOffset::east_opt(0)?;
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(n) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(utc.from_utc_datetime(&n));
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        let n = d.and_hms_opt(0, 0, 0)?;
        return Some(Utc.from_utc_datetime(&n).fixed_offset());
    }
    None
}

struct RawRecord {
    line_no: usize,
    fields: Option<Map<String, Value>>,
}

impl RawRecord {
    fn str_field(&self, name: &str) -> Option<&str> {
        match self.fields.as_ref()?.get(name)? {
            Value::String(s) => Some(s.as_str()),
            _ => None,
        }
    }

    /// Record id, or a line reference when the id is unusable.
    fn label(&self) -> String {
        match self.str_field("id") {
            Some(id) if !id.trim().is_empty() => id.to_string(),
            _ => format!("line:{}", self.line_no),
        }
    }
}

fn read_records(path: &Path) -> Result<Vec<RawRecord>, IngestError> {
    let io_err = |source| IngestError::Io { path: path.display().to_string(), source };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(m)) => Some(m),
            _ => None,
        };
        out.push(RawRecord { line_no: i + 1, fields });
    }
    if out.is_empty() {
        return Err(IngestError::EmptyInput(path.display().to_string()));
    }
    Ok(out)
}

fn check_claim(rec: &RawRecord, allow: &BTreeSet<String>) -> Result<Claim, RejectReason> {
    if rec.fields.is_none() {
        return Err(RejectReason::Malformed);
    }
    let id = rec.str_field("id").filter(|s| !s.trim().is_empty());
    let id = id.ok_or(RejectReason::MissingField)?;
    let text = rec.str_field("text").ok_or(RejectReason::MissingField)?;
    if text.trim().is_empty() {
        return Err(RejectReason::EmptyText);
    }
    let date = rec.str_field("date").ok_or(RejectReason::MissingField)?;
    let date = parse_date(date).ok_or(RejectReason::BadDate)?;
    let rating = rec.str_field("rating").ok_or(RejectReason::MissingField)?;
    if contains_url(text) {
        return Err(RejectReason::UrlPresent);
    }
    if !allow.contains(&rating.trim().to_lowercase()) {
        return Err(RejectReason::RatingNotAllowed);
    }
    Ok(Claim {
        id: id.to_string(),
        text: text.to_string(),
        first_debunked: date,
        source: rec.str_field("source").unwrap_or_default().to_string(),
        rating: rating.to_string(),
    })
}

fn check_post(rec: &RawRecord) -> Result<Post, RejectReason> {
    if rec.fields.is_none() {
        return Err(RejectReason::Malformed);
    }
    let id = rec.str_field("id").filter(|s| !s.trim().is_empty());
    let id = id.ok_or(RejectReason::MissingField)?;
    let text = rec.str_field("text").ok_or(RejectReason::MissingField)?;
    let created = rec.str_field("created_at").ok_or(RejectReason::MissingTimestamp)?;
    let created_at = parse_timestamp(created).ok_or(RejectReason::BadTimestamp)?;
    if text.trim().is_empty() {
        return Err(RejectReason::EmptyText);
    }
    if is_repost(text) {
        return Err(RejectReason::Repost);
    }
    if contains_url(text) {
        return Err(RejectReason::UrlPresent);
    }
    Ok(Post { id: id.to_string(), text: text.to_string(), created_at })
}

/// Keeps one winner per key (smallest by `rank`), rejecting the rest.
fn dedupe_by<T, K, R>(
    items: Vec<T>,
    key: impl Fn(&T) -> K,
    rank: impl Fn(&T) -> R,
    id: impl Fn(&T) -> String,
    reason: RejectReason,
    rejected: &mut Vec<Rejection>,
) -> Vec<T>
where
    K: Ord,
    R: Ord,
{
    let mut groups: BTreeMap<K, Vec<T>> = BTreeMap::new();
    for it in items {
        groups.entry(key(&it)).or_default().push(it);
    }
    let mut kept = Vec::with_capacity(groups.len());
    for (_, mut group) in groups {
        group.sort_by_key(|t| rank(t));
        let mut it = group.into_iter();
        kept.extend(it.next());
        rejected.extend(it.map(|t| Rejection { id: id(&t), reason }));
    }
    kept
}

/// Loads claims, applying the URL filter, the rating allowlist (matched
/// case-insensitively) and text dedupe. Kept claims are sorted by id.
pub fn ingest_claims(
    path: &Path,
    rating_allowlist: &BTreeSet<String>,
) -> Result<(Vec<Claim>, IngestReport), IngestError> {
    let allow: BTreeSet<String> =
        rating_allowlist.iter().map(|r| r.trim().to_lowercase()).collect();
    let records = read_records(path)?;
    let read_count = records.len();
    let mut rejected = Vec::new();
    let mut claims = Vec::new();
    for rec in &records {
        match check_claim(rec, &allow) {
            Ok(c) => claims.push(c),
            Err(reason) => rejected.push(Rejection { id: rec.label(), reason }),
        }
    }
    let claims = dedupe_by(
        claims,
        |c| normalize_text(&c.text),
        |c| (c.first_debunked, c.id.clone()),
        |c| c.id.clone(),
        RejectReason::DuplicateText,
        &mut rejected,
    );
    let mut claims = dedupe_by(
        claims,
        |c| c.id.clone(),
        |c| (c.first_debunked, c.text.clone()),
        |c| c.id.clone(),
        RejectReason::DuplicateId,
        &mut rejected,
    );
    claims.sort_by(|a, b| a.id.cmp(&b.id));
    let report = IngestReport::finish(read_count, claims.len(), rejected);
    Ok((claims, report))
}

/// Loads posts, dropping reposts, posts with links, and posts without a
/// usable timestamp. Kept posts are sorted by id.
pub fn ingest_posts(path: &Path) -> Result<(Vec<Post>, IngestReport), IngestError> {
    let records = read_records(path)?;
    let read_count = records.len();
    let mut rejected = Vec::new();
    let mut posts = Vec::new();
    for rec in &records {
        match check_post(rec) {
            Ok(p) => posts.push(p),
            Err(reason) => rejected.push(Rejection { id: rec.label(), reason }),
        }
    }
    let mut posts = dedupe_by(
        posts,
        |p| p.id.clone(),
        |p| (p.created_at, p.text.clone()),
        |p| p.id.clone(),
        RejectReason::DuplicateId,
        &mut rejected,
    );
    posts.sort_by(|a, b| a.id.cmp(&b.id));
    let report = IngestReport::finish(read_count, posts.len(), rejected);
    Ok((posts, report))
}

/// Writes any serializable records as newline-delimited JSON.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads newline-delimited JSON, skipping blank lines. Any bad line is an error.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> io::Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(
                io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), i + 1),
            )
        })?;
        out.push(rec);
    }
    Ok(out)
}
