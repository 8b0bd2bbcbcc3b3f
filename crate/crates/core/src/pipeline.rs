//! Stage orchestration over a working directory.
//!
//! Layout under `workdir`:
//!
//! ```text
//! manifest.json
//! ingest/   claims.jsonl posts.jsonl claims_report.json posts_report.json
//! index/    bm25.idx
//! pairs/    pairs.jsonl summary.json
//! annotate/ <condition>.jsonl
//! gen/      synthetic.jsonl report.json
//! export/   <mix>/<generator>/{train,val}.jsonl summary.json
//! eval/     report.json table.txt
//! ```
//!
//! Every stage reads only files written by earlier stages (plus the inputs
//! named in the config), so a stage can be re-run on its own.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjudication::{self, DirectionalJudgment, ModelAnnotation, PairTexts, Verdict};
use crate::eval::{self, ReportRow, UnresolvedPolicy};
use crate::gateway::{self, ChatProvider, ChatProviderSpec};
use crate::ingest::{self, read_jsonl, write_jsonl, Claim, Post};
use crate::label::{PresentationOrder, PromptStyle};
use crate::par;
use crate::prompts::{TemplateSet, TEMPLATE_VERSION};
use crate::rerank::{self, CandidatePair, EmbeddingProviderSpec};
use crate::retrieval::{self, Bm25Config, Bm25Index};
use crate::synth::{self, MixSpec, SyntheticExample, TrainRecord};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("{stage}: missing input {}", path.display())]
    MissingInput { stage: Stage, path: PathBuf },
    #[error("{stage}: provider error: {msg}")]
    Provider { stage: Stage, msg: String },
    #[error("{stage}: {msg}")]
    Data { stage: Stage, msg: String },
    #[error("{stage}: {}: {source}", path.display())]
    Io { stage: Stage, path: PathBuf, source: io::Error },
}

impl PipelineError {
    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::ConfigInvalid(_) => 2,
            Self::MissingInput { .. } => 3,
            Self::Provider { .. } => 4,
            Self::Data { .. } => 5,
            Self::Io { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Index,
    Pair,
    Annotate,
    Gen,
    Export,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Ingest, Stage::Index, Stage::Pair, Stage::Annotate, Stage::Gen, Stage::Export, Stage::Eval];

    pub fn dir(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Index => "index",
            Stage::Pair => "pairs",
            Stage::Annotate => "annotate",
            Stage::Gen => "gen",
            Stage::Export => "export",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ingest => "ingest",
            Stage::Index => "index",
            Stage::Pair => "pair",
            Stage::Annotate => "annotate",
            Stage::Gen => "gen",
            Stage::Export => "export",
            Stage::Eval => "eval",
        })
    }
}

fn default_window() -> u32 {
    14
}
fn default_top_k() -> usize {
    1000
}
fn default_per_claim() -> usize {
    1
}
fn default_draws() -> usize {
    1000
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_gen_temperature() -> f64 {
    synth::GENERATION_TEMPERATURE
}
fn default_allowlist() -> Vec<String> {
    ingest::default_rating_allowlist().into_iter().collect()
}
fn default_embedding() -> EmbeddingProviderSpec {
    EmbeddingProviderSpec::local(384)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub claims: PathBuf,
    pub posts: PathBuf,
    /// Human judgments; needed by `eval` only.
    #[serde(default)]
    pub judgments: Option<PathBuf>,
    pub workdir: PathBuf,
    /// Template directory replacing the built-in templates.
    #[serde(default)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Providers {
    #[serde(default = "default_embedding")]
    pub embedding: EmbeddingProviderSpec,
    #[serde(default)]
    pub chat: BTreeMap<String, ChatProviderSpec>,
}

impl Default for Providers {
    fn default() -> Self {
        Self { embedding: default_embedding(), chat: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderChoice {
    PostFirst,
    ClaimFirst,
    #[default]
    Both,
}

impl OrderChoice {
    pub fn orders(self) -> Vec<PresentationOrder> {
        match self {
            OrderChoice::PostFirst => vec![PresentationOrder::PostFirst],
            OrderChoice::ClaimFirst => vec![PresentationOrder::ClaimFirst],
            OrderChoice::Both => PresentationOrder::BOTH.to_vec(),
        }
    }
}

impl FromStr for OrderChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().replace('_', "-").as_str() {
            "both" => Ok(OrderChoice::Both),
            other => other
                .parse::<PresentationOrder>()
                .map(|o| match o {
                    PresentationOrder::PostFirst => OrderChoice::PostFirst,
                    PresentationOrder::ClaimFirst => OrderChoice::ClaimFirst,
                })
                .map_err(|_| format!("unknown order `{s}`")),
        }
    }
}

/// One annotation run: a chat provider under one prompt style. `train_set`
/// and `mix` describe fine-tuned models and only label the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    #[serde(default)]
    pub name: Option<String>,
    pub provider: String,
    pub style: PromptStyle,
    #[serde(default)]
    pub orders: OrderChoice,
    #[serde(default)]
    pub train_set: Option<String>,
    #[serde(default)]
    pub mix: Option<String>,
}

impl Condition {
    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{}.{}", self.provider, self.style.slug()))
    }

    fn label(&self) -> String {
        let mut s = self.style.slug().to_string();
        if let Some(t) = &self.train_set {
            s.push_str(&format!(" train={t}"));
        }
        if let Some(m) = &self.mix {
            s.push_str(&format!(" mix={m}"));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixKind {
    #[default]
    Balanced,
    Imbalanced,
    Custom,
}

impl MixKind {
    pub fn slug(self) -> &'static str {
        match self {
            MixKind::Balanced => "balanced",
            MixKind::Imbalanced => "imbalanced",
            MixKind::Custom => "custom",
        }
    }
}

impl FromStr for MixKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "balanced" => Ok(MixKind::Balanced),
            "imbalanced" => Ok(MixKind::Imbalanced),
            "custom" => Ok(MixKind::Custom),
            _ => Err(format!("unknown mix `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    #[serde(default)]
    pub kind: MixKind,
    /// Required for `custom`; keys are label keywords.
    #[serde(default)]
    pub fractions: Option<BTreeMap<crate::label::EntailmentLabel, f64>>,
    /// Output size; defaults to the generator's corpus size.
    #[serde(default)]
    pub total: Option<usize>,
}

impl MixConfig {
    pub fn spec(&self, default_total: usize) -> Result<MixSpec, PipelineError> {
        let total = self.total.unwrap_or(default_total);
        match self.kind {
            MixKind::Balanced => Ok(MixSpec::balanced(total)),
            MixKind::Imbalanced => Ok(MixSpec::imbalanced(total)),
            MixKind::Custom => {
                let fractions = self
                    .fractions
                    .clone()
                    .ok_or_else(|| PipelineError::ConfigInvalid("custom mix needs `fractions`".into()))?;
                let m = MixSpec { fractions, total };
                m.validate().map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
                Ok(m)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_draws")]
    pub n_draws: usize,
    #[serde(default = "default_window")]
    pub window_days: u32,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_per_claim")]
    pub per_claim: usize,
    #[serde(default)]
    pub bm25: Bm25Config,
    #[serde(default = "default_allowlist")]
    pub rating_allowlist: Vec<String>,
    #[serde(default)]
    pub providers: Providers,
    #[serde(default)]
    pub conditions: Vec<Condition>,
    /// Chat providers used by `gen`.
    #[serde(default)]
    pub generators: Vec<String>,
    #[serde(default)]
    pub annotation_temperature: f64,
    #[serde(default = "default_gen_temperature")]
    pub generation_temperature: f64,
    #[serde(default)]
    pub mix: MixConfig,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub unresolved: UnresolvedPolicy,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::ConfigInvalid(m));
        self.bm25.validate().map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        if self.n_draws == 0 {
            return bad("n_draws must be at least 1".into());
        }
        if self.top_k == 0 || self.per_claim == 0 {
            return bad("top_k and per_claim must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} not in (0, 1)", self.train_fraction));
        }
        for t in [self.annotation_temperature, self.generation_temperature] {
            if !(t.is_finite() && t >= 0.0) {
                return bad(format!("temperature {t} must be finite and non-negative"));
            }
        }
        self.providers.embedding.validate().map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        for (name, spec) in &self.providers.chat {
            spec.validate().map_err(|e| PipelineError::ConfigInvalid(format!("provider `{name}`: {e}")))?;
        }
        let known = |n: &str| self.providers.chat.contains_key(n);
        for c in &self.conditions {
            if !known(&c.provider) {
                return bad(format!("condition `{}` names unknown provider `{}`", c.name(), c.provider));
            }
        }
        let mut names = BTreeSet::new();
        for c in &self.conditions {
            if !names.insert(c.name()) {
                return bad(format!("duplicate condition name `{}`", c.name()));
            }
        }
        if let Some(g) = self.generators.iter().find(|g| !known(g)) {
            return bad(format!("unknown generator provider `{g}`"));
        }
        self.mix.spec(0)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub draws: Option<usize>,
    pub provider: Option<String>,
    pub style: Option<PromptStyle>,
    pub order: Option<OrderChoice>,
    pub mix: Option<MixKind>,
}

impl Overrides {
    /// Seed and draws replace config values; provider and style narrow the
    /// condition list (or define a condition when none matches both); order
    /// replaces every condition's orders; mix replaces the mix kind.
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), PipelineError> {
        if let Some(s) = self.seed {
            cfg.base_seed = s;
        }
        if let Some(d) = self.draws {
            cfg.n_draws = d;
        }
        if self.provider.is_some() || self.style.is_some() {
            let keep = |c: &Condition| {
                self.provider.as_ref().is_none_or(|p| &c.provider == p) && self.style.is_none_or(|s| c.style == s)
            };
            cfg.conditions.retain(keep);
            if let (true, Some(p), Some(s)) = (cfg.conditions.is_empty(), &self.provider, self.style) {
                cfg.conditions.push(Condition {
                    name: None,
                    provider: p.clone(),
                    style: s,
                    orders: OrderChoice::Both,
                    train_set: None,
                    mix: None,
                });
            }
            if let Some(p) = &self.provider {
                if cfg.generators.contains(p) {
                    cfg.generators = vec![p.clone()];
                }
            }
        }
        if let Some(o) = self.order {
            for c in &mut cfg.conditions {
                c.orders = o;
            }
        }
        if let Some(m) = self.mix {
            cfg.mix.kind = m;
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_sha256: String,
    pub finished_at: String,
    /// Workdir-relative path → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub template_version: u32,
    pub config_sha256: String,
    pub created_at: String,
    pub updated_at: String,
    /// Input path, relative to the config directory when possible → SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    fn new(config_sha256: &str) -> Self {
        let now = timestamp();
        Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            template_version: TEMPLATE_VERSION,
            config_sha256: config_sha256.into(),
            created_at: now.clone(),
            updated_at: now,
            inputs: BTreeMap::new(),
            stages: BTreeMap::new(),
        }
    }

    /// All recorded digests, without timestamps.
    pub fn digests(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> =
            self.inputs.iter().map(|(k, v)| (format!("input:{k}"), v.clone())).collect();
        out.insert("config".into(), self.config_sha256.clone());
        for (stage, rec) in &self.stages {
            for (k, v) in &rec.outputs {
                out.insert(format!("{stage}:{k}"), v.clone());
            }
        }
        out
    }
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Filesystem-safe form of a model or condition name.
pub fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' }).collect()
}

/// What a stage wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSummary {
    pub stage: Stage,
    pub outputs: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl fmt::Display for StageSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} output file(s)", self.stage, self.outputs.len())?;
        for n in &self.notes {
            write!(f, "\n  {n}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub claims: usize,
    pub claims_without_candidates: Vec<String>,
    pub candidates_retrieved: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub generator_model: String,
    pub mix: MixSpec,
    pub train: usize,
    pub val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub n_pairs: usize,
    pub tied_tallies: usize,
    pub n_draws: usize,
    pub base_seed: u64,
    pub distribution: BTreeMap<crate::label::EntailmentLabel, eval::ClassShare>,
    pub conditions: Vec<ReportRow>,
}

/// A loaded configuration bound to the directory its relative paths are
/// resolved against.
pub struct Pipeline {
    cfg: RunConfig,
    base: PathBuf,
    config_sha256: String,
    templates: Option<TemplateSet>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, base: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let base = base.into();
        let templates = match &cfg.paths.templates {
            Some(dir) => Some(
                TemplateSet::load_dir(&base.join(dir)).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?,
            ),
            None => None,
        };
        let config_sha256 = cfg.digest();
        Ok(Self { cfg, base, config_sha256, templates })
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn from_config_file(path: &Path, overrides: &Overrides) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        overrides.apply(&mut cfg)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(cfg, base)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn workdir(&self) -> PathBuf {
        self.base.join(&self.cfg.paths.workdir)
    }

    fn input(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    fn stage_path(&self, stage: Stage, file: &str) -> PathBuf {
        self.workdir().join(stage.dir()).join(file)
    }

    fn templates(&self) -> &TemplateSet {
        self.templates.as_ref().unwrap_or_else(|| TemplateSet::builtin())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.workdir().join(MANIFEST_FILE)
    }

    pub fn load_manifest(&self) -> Option<RunManifest> {
        let text = fs::read_to_string(self.manifest_path()).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn record(&self, stage: Stage, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<(), PipelineError> {
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| PipelineError::Io { stage, path, source }
        };
        let mut m = self
            .load_manifest()
            .filter(|m| m.config_sha256 == self.config_sha256)
            .unwrap_or_else(|| RunManifest::new(&self.config_sha256));
        for p in inputs {
            let key = p.strip_prefix(&self.base).unwrap_or(p).to_string_lossy().replace('\\', "/");
            m.inputs.insert(key, file_sha256(p).map_err(io_err(p))?);
        }
        let wd = self.workdir();
        let mut digests = BTreeMap::new();
        for p in outputs {
            let rel = p.strip_prefix(&wd).unwrap_or(p).to_string_lossy().replace('\\', "/");
            digests.insert(rel, file_sha256(p).map_err(io_err(p))?);
        }
        let now = timestamp();
        m.stages.insert(
            stage,
            StageRecord { config_sha256: self.config_sha256.clone(), finished_at: now.clone(), outputs: digests },
        );
        m.updated_at = now;
        let path = self.manifest_path();
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(io_err(&path))
    }

    fn require(&self, stage: Stage, path: &Path) -> Result<(), PipelineError> {
        if path.is_file() {
            Ok(())
        } else {
            Err(PipelineError::MissingInput { stage, path: path.to_path_buf() })
        }
    }

    fn read<T: for<'de> Deserialize<'de>>(&self, stage: Stage, path: &Path) -> Result<Vec<T>, PipelineError> {
        self.require(stage, path)?;
        read_jsonl(path).map_err(|e| match e.kind() {
            io::ErrorKind::InvalidData => PipelineError::Data { stage, msg: format!("{}: {e}", path.display()) },
            _ => PipelineError::Io { stage, path: path.to_path_buf(), source: e },
        })
    }

    fn write<T: Serialize>(&self, stage: Stage, path: &Path, records: &[T]) -> Result<(), PipelineError> {
        write_jsonl(path, records).map_err(|source| PipelineError::Io { stage, path: path.to_path_buf(), source })
    }

    fn write_json<T: Serialize>(&self, stage: Stage, path: &Path, value: &T) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
        self.write_text(stage, path, &text)
    }

    fn write_text(&self, stage: Stage, path: &Path, text: &str) -> Result<(), PipelineError> {
        let io_err = |source| PipelineError::Io { stage, path: path.to_path_buf(), source };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        fs::write(path, text).map_err(io_err)
    }

    fn chat_provider(&self, stage: Stage, name: &str, temperature: f64) -> Result<Box<dyn ChatProvider>, PipelineError> {
        let mut spec = self
            .cfg
            .providers
            .chat
            .get(name)
            .cloned()
            .ok_or_else(|| PipelineError::ConfigInvalid(format!("unknown provider `{name}`")))?
            .with_temperature(temperature);
        if let Some(s) = &spec.script {
            let p = self.input(s);
            self.require(stage, &p)?;
            spec.script = Some(p);
        }
        gateway::provider_for(name, &spec).map_err(|e| PipelineError::Provider { stage, msg: e.to_string() })
    }

    fn claims(&self, stage: Stage) -> Result<Vec<Claim>, PipelineError> {
        self.read(stage, &self.stage_path(Stage::Ingest, "claims.jsonl"))
    }

    fn posts(&self, stage: Stage) -> Result<Vec<Post>, PipelineError> {
        self.read(stage, &self.stage_path(Stage::Ingest, "posts.jsonl"))
    }

    pub fn ingest(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::Ingest;
        let claims_in = self.input(&self.cfg.paths.claims);
        let posts_in = self.input(&self.cfg.paths.posts);
        self.require(stage, &claims_in)?;
        self.require(stage, &posts_in)?;
        let data = |e: ingest::IngestError| PipelineError::Data { stage, msg: e.to_string() };
        let allow: BTreeSet<String> = self.cfg.rating_allowlist.iter().cloned().collect();
        let (claims, claims_report) = ingest::ingest_claims(&claims_in, &allow).map_err(data)?;
        let (posts, posts_report) = ingest::ingest_posts(&posts_in).map_err(data)?;
        let outputs = [
            self.stage_path(stage, "claims.jsonl"),
            self.stage_path(stage, "posts.jsonl"),
            self.stage_path(stage, "claims_report.json"),
            self.stage_path(stage, "posts_report.json"),
        ];
        self.write(stage, &outputs[0], &claims)?;
        self.write(stage, &outputs[1], &posts)?;
        self.write_json(stage, &outputs[2], &claims_report)?;
        self.write_json(stage, &outputs[3], &posts_report)?;
        self.record(stage, &[claims_in, posts_in], &outputs)?;
        Ok(StageSummary {
            stage,
            outputs: outputs.to_vec(),
            notes: vec![
                format!("claims: kept {} of {}", claims_report.kept_count, claims_report.read_count),
                format!("posts: kept {} of {}", posts_report.kept_count, posts_report.read_count),
            ],
        })
    }

    pub fn index(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::Index;
        let posts = self.posts(stage)?;
        let idx = Bm25Index::build(&posts, self.cfg.bm25).map_err(|e| PipelineError::Data { stage, msg: e.to_string() })?;
        let out = self.stage_path(stage, "bm25.idx");
        self.write_text(stage, &out, &idx.to_text())?;
        self.record(stage, &[], std::slice::from_ref(&out))?;
        Ok(StageSummary {
            stage,
            outputs: vec![out],
            notes: vec![format!("{} documents, {} terms", idx.doc_count(), idx.term_count())],
        })
    }

    pub fn pair(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::Pair;
        let idx_path = self.stage_path(Stage::Index, "bm25.idx");
        self.require(stage, &idx_path)?;
        let idx = Bm25Index::load(&idx_path).map_err(|e| PipelineError::Data { stage, msg: e.to_string() })?;
        let claims = self.claims(stage)?;
        let posts = self.posts(stage)?;
        let texts: HashMap<String, String> = posts.into_iter().map(|p| (p.id, p.text)).collect();
        let embedder = rerank::embedder_for(&self.cfg.providers.embedding)
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        let retrieved = retrieval::retrieve_all(&idx, &claims, self.cfg.window_days, self.cfg.top_k);
        let work: Vec<(&Claim, &Vec<retrieval::ScoredCandidate>)> = claims.iter().zip(&retrieved).collect();
        let reranked = par::try_map(&work, |(c, cands)| rerank::rerank(c, cands, &texts, embedder.as_ref()))
            .map_err(|e| PipelineError::Provider { stage, msg: e.to_string() })?;
        let by_claim: BTreeMap<String, Vec<CandidatePair>> =
            claims.iter().map(|c| c.id.clone()).zip(reranked).collect();
        let pairs = rerank::select_top_pairs(&by_claim, self.cfg.per_claim);
        let summary = PairSummary {
            claims: claims.len(),
            claims_without_candidates: by_claim.iter().filter(|(_, v)| v.is_empty()).map(|(k, _)| k.clone()).collect(),
            candidates_retrieved: retrieved.iter().map(Vec::len).sum(),
            pairs: pairs.len(),
        };
        let outputs = [self.stage_path(stage, "pairs.jsonl"), self.stage_path(stage, "summary.json")];
        self.write(stage, &outputs[0], &pairs)?;
        self.write_json(stage, &outputs[1], &summary)?;
        self.record(stage, &[], &outputs)?;
        Ok(StageSummary {
            stage,
            outputs: outputs.to_vec(),
            notes: vec![format!(
                "{} pairs for {} claims ({} without candidates)",
                summary.pairs,
                summary.claims,
                summary.claims_without_candidates.len()
            )],
        })
    }

    pub fn annotate(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::Annotate;
        if self.cfg.conditions.is_empty() {
            return Err(PipelineError::ConfigInvalid("no annotation conditions configured".into()));
        }
        let pairs: Vec<CandidatePair> = self.read(stage, &self.stage_path(Stage::Pair, "pairs.jsonl"))?;
        let claims: HashMap<String, String> = self.claims(stage)?.into_iter().map(|c| (c.id, c.text)).collect();
        let posts: HashMap<String, String> = self.posts(stage)?.into_iter().map(|p| (p.id, p.text)).collect();
        let ids: Vec<String> = pairs.iter().map(CandidatePair::pair_id).collect();
        let mut texts = Vec::with_capacity(pairs.len());
        for (p, id) in pairs.iter().zip(&ids) {
            let missing = || PipelineError::Data { stage, msg: format!("pair `{id}` refers to unknown texts") };
            texts.push(PairTexts {
                pair_id: id,
                post_text: posts.get(&p.post_id).ok_or_else(missing)?,
                claim_text: claims.get(&p.claim_id).ok_or_else(missing)?,
            });
        }
        let mut outputs = Vec::new();
        let mut notes = Vec::new();
        for cond in &self.cfg.conditions {
            let provider = self.chat_provider(stage, &cond.provider, self.cfg.annotation_temperature)?;
            let anns = adjudication::annotate_pairs(&texts, cond.style, &cond.orders.orders(), provider.as_ref(), self.templates())
                .map_err(|e| PipelineError::Provider { stage, msg: format!("condition `{}`: {e}", cond.name()) })?;
            let out = self.stage_path(stage, &format!("{}.jsonl", slug(&cond.name())));
            self.write(stage, &out, &anns)?;
            let flagged = anns.iter().filter(|a| a.flagged).count();
            notes.push(format!("{}: {} pairs, {} unresolved", cond.name(), anns.len(), flagged));
            outputs.push(out);
        }
        self.record(stage, &[], &outputs)?;
        Ok(StageSummary { stage, outputs, notes })
    }

    pub fn gen(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::Gen;
        if self.cfg.generators.is_empty() {
            return Err(PipelineError::ConfigInvalid("no generators configured".into()));
        }
        let claims = self.claims(stage)?;
        let providers = self
            .cfg
            .generators
            .iter()
            .map(|g| self.chat_provider(stage, g, self.cfg.generation_temperature))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&dyn ChatProvider> = providers.iter().map(|p| p.as_ref()).collect();
        let corpus = synth::build_corpus(&claims, &refs, self.templates());
        let outputs = [self.stage_path(stage, "synthetic.jsonl"), self.stage_path(stage, "report.json")];
        self.write(stage, &outputs[0], &corpus.examples)?;
        self.write_json(stage, &outputs[1], &corpus.report)?;
        self.record(stage, &[], &outputs)?;
        let r = &corpus.report;
        Ok(StageSummary {
            stage,
            outputs: outputs.to_vec(),
            notes: vec![format!(
                "planned {}, kept {}, failed {}, duplicates {}",
                r.planned,
                r.generated,
                r.failures.len(),
                r.duplicates
            )],
        })
    }

    pub fn export(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::Export;
        let corpus: Vec<SyntheticExample> = self.read(stage, &self.stage_path(Stage::Gen, "synthetic.jsonl"))?;
        let claims: HashMap<String, String> = self.claims(stage)?.into_iter().map(|c| (c.id, c.text)).collect();
        let mut by_model: BTreeMap<&str, Vec<SyntheticExample>> = BTreeMap::new();
        for e in &corpus {
            by_model.entry(&e.generator_model).or_default().push(e.clone());
        }
        let data = |e: synth::SynthError| PipelineError::Data { stage, msg: e.to_string() };
        let mix_dir = self.cfg.mix.kind.slug();
        let mut outputs = Vec::new();
        let mut summaries = Vec::new();
        for (model, examples) in by_model {
            let mix = self.cfg.mix.spec(examples.len())?;
            let sampled = synth::sample_mix(&examples, &mix, self.cfg.base_seed).map_err(data)?;
            let records = sampled
                .iter()
                .map(|e| {
                    let claim = claims.get(&e.claim_id).ok_or_else(|| PipelineError::Data {
                        stage,
                        msg: format!("synthetic example refers to unknown claim `{}`", e.claim_id),
                    })?;
                    TrainRecord::from_example(e, claim, self.templates()).map_err(data)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let (train, val) =
                synth::split_train_val(&records, self.cfg.train_fraction, self.cfg.base_seed).map_err(data)?;
            let dir = self.workdir().join(stage.dir()).join(mix_dir).join(slug(model));
            for (name, part) in [("train.jsonl", &train), ("val.jsonl", &val)] {
                let path = dir.join(name);
                synth::export_train_file(part, &path).map_err(data)?;
                outputs.push(path);
            }
            summaries.push(ExportSummary { generator_model: model.to_string(), mix, train: train.len(), val: val.len() });
        }
        let summary_path = self.workdir().join(stage.dir()).join(mix_dir).join("summary.json");
        self.write_json(stage, &summary_path, &summaries)?;
        outputs.push(summary_path);
        self.record(stage, &[], &outputs)?;
        let notes = summaries
            .iter()
            .map(|s| format!("{} ({}): train {}, val {}", s.generator_model, mix_dir, s.train, s.val))
            .collect();
        Ok(StageSummary { stage, outputs, notes })
    }

    pub fn eval(&self) -> Result<StageSummary, PipelineError> {
        let stage = Stage::Eval;
        let jpath = self
            .cfg
            .paths
            .judgments
            .as_ref()
            .map(|p| self.input(p))
            .ok_or_else(|| PipelineError::ConfigInvalid("eval needs paths.judgments".into()))?;
        if self.cfg.conditions.is_empty() {
            return Err(PipelineError::ConfigInvalid("no annotation conditions configured".into()));
        }
        let votes: Vec<DirectionalJudgment> = self.read(stage, &jpath)?;
        let data = |msg: String| PipelineError::Data { stage, msg };
        let tallies = adjudication::PairTallies::from_judgments(&votes).map_err(|e| data(e.to_string()))?;
        let real = adjudication::realize_from_tallies(&tallies, self.cfg.n_draws, self.cfg.base_seed);
        let judged: BTreeSet<&str> = real.pair_ids.iter().map(String::as_str).collect();
        let mut rows = Vec::new();
        let mut inputs = vec![jpath];
        for cond in &self.cfg.conditions {
            let path = self.stage_path(Stage::Annotate, &format!("{}.jsonl", slug(&cond.name())));
            let anns: Vec<ModelAnnotation> = self.read(stage, &path)?;
            let preds: BTreeMap<String, Verdict> = anns
                .into_iter()
                .filter(|a| judged.contains(a.pair_id.as_str()))
                .map(|a| (a.pair_id, a.final_label))
                .collect();
            let report = eval::evaluate_realizations(&real, &preds, self.cfg.unresolved)
                .map_err(|e| data(format!("condition `{}`: {e}", cond.name())))?;
            rows.push(ReportRow { model: cond.provider.clone(), condition: cond.label(), report });
            inputs.push(path);
        }
        let output = EvalOutput {
            n_pairs: real.pair_ids.len(),
            tied_tallies: tallies.tie_count(),
            n_draws: self.cfg.n_draws,
            base_seed: self.cfg.base_seed,
            distribution: eval::class_distribution(&real),
            conditions: rows,
        };
        let table = format!(
            "{}\n{}",
            eval::format_table(&output.conditions, "Prompt Style"),
            eval::format_distribution(&output.distribution)
        );
        let outputs = [self.stage_path(stage, "report.json"), self.stage_path(stage, "table.txt")];
        self.write_json(stage, &outputs[0], &output)?;
        self.write_text(stage, &outputs[1], &table)?;
        self.record(stage, &inputs[..1], &outputs)?;
        Ok(StageSummary {
            stage,
            outputs: outputs.to_vec(),
            notes: vec![format!(
                "{} judged pairs, {} tied tallies, {} draws",
                output.n_pairs, output.tied_tallies, output.n_draws
            )],
        })
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageSummary, PipelineError> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Index => self.index(),
            Stage::Pair => self.pair(),
            Stage::Annotate => self.annotate(),
            Stage::Gen => self.gen(),
            Stage::Export => self.export(),
            Stage::Eval => self.eval(),
        }
    }

    /// Every stage in order, skipping those the config leaves unused.
    pub fn run_all(&self) -> Result<Vec<StageSummary>, PipelineError> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            let skip = match stage {
                Stage::Annotate => self.cfg.conditions.is_empty(),
                Stage::Gen | Stage::Export => self.cfg.generators.is_empty(),
                Stage::Eval => self.cfg.conditions.is_empty() || self.cfg.paths.judgments.is_none(),
                _ => false,
            };
            if skip {
                log::info!("skipping {stage}: not configured");
                continue;
            }
            out.push(self.run_stage(stage)?);
        }
        Ok(out)
    }
}
