//! Synthetic post generation and fine-tuning dataset export.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::{parse_entailment, ChatProvider, GatewayError};
use crate::ingest::{normalize_text, Claim};
use crate::label::{EntailmentLabel, PresentationOrder, PromptStyle};
use crate::par;
use crate::prompts::{Message, MessageSeq, PromptError, Role, TemplateSet};

/// Sampling temperature used for generation unless configured otherwise.
pub const GENERATION_TEMPERATURE: f64 = 1.0;

/// Attempts per (claim, label, order, model) before giving up.
pub const MAX_GENERATION_ATTEMPTS: usize = 3;

/// Prompt style used for training records: the answer is the bare keyword.
pub const TRAIN_PROMPT_STYLE: PromptStyle = PromptStyle::AnnotationOnly;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("generation exhausted after {attempts} attempts for claim `{claim_id}` ({target}, {order}): {last_reason}")]
    GenerationExhausted {
        claim_id: String,
        target: EntailmentLabel,
        order: PresentationOrder,
        attempts: usize,
        last_reason: RejectedGeneration,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no examples of class {0} to sample from")]
    EmptyClass(EntailmentLabel),
    #[error("invalid mix: {0}")]
    InvalidMix(String),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("line {line}: {msg}")]
    BadRecord { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Why a generated text was discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectedGeneration {
    Empty,
    Refusal,
    StartsWithJust,
}

impl std::fmt::Display for RejectedGeneration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Empty => "empty output",
            Self::Refusal => "refusal",
            Self::StartsWithJust => "starts with \"Just\"",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub claim_id: String,
    pub generated_text: String,
    pub target_label: EntailmentLabel,
    pub order: PresentationOrder,
    pub generator_model: String,
}

const REFUSAL_OPENERS: &[&str] = &[
    "i'm sorry",
    "i am sorry",
    "sorry,",
    "i cannot",
    "i can't",
    "i can not",
    "i won't",
    "i will not",
    "i'm unable",
    "i am unable",
    "as an ai",
];

/// Heuristic: the output opens with a stock refusal phrase.
pub fn is_refusal(text: &str) -> bool {
    let t = text.trim_start().to_lowercase().replace('\u{2019}', "'");
    REFUSAL_OPENERS.iter().any(|p| t.starts_with(p))
}

fn starts_with_just(text: &str) -> bool {
    let first = text.trim_start().split(|c: char| !c.is_alphanumeric()).next().unwrap_or("");
    first.eq_ignore_ascii_case("just")
}

/// Trims the output and strips one pair of wrapping quotes.
fn clean_generation(text: &str) -> String {
    let t = text.trim();
    let unquoted = t
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .filter(|s| !s.contains('"'))
        .unwrap_or(t);
    unquoted.trim().to_string()
}

pub fn validate_generation(text: &str) -> Result<String, RejectedGeneration> {
    let t = clean_generation(text);
    if t.is_empty() {
        Err(RejectedGeneration::Empty)
    } else if is_refusal(&t) {
        Err(RejectedGeneration::Refusal)
    } else if starts_with_just(&t) {
        Err(RejectedGeneration::StartsWithJust)
    } else {
        Ok(t)
    }
}

/// One synthetic post for `claim`. Empty outputs, refusals and outputs
/// opening with "Just" are regenerated, up to [`MAX_GENERATION_ATTEMPTS`].
pub fn generate_for_claim(
    claim: &Claim,
    target: EntailmentLabel,
    order: PresentationOrder,
    provider: &dyn ChatProvider,
    templates: &TemplateSet,
) -> Result<SyntheticExample, SynthError> {
    let prompt = templates.render_generation(target, order, &claim.text)?;
    let mut last_reason = RejectedGeneration::Empty;
    for attempt in 1..=MAX_GENERATION_ATTEMPTS {
        let c = provider.complete(&prompt)?;
        match validate_generation(&c.text) {
            Ok(text) => {
                return Ok(SyntheticExample {
                    claim_id: claim.id.clone(),
                    generated_text: text,
                    target_label: target,
                    order,
                    generator_model: provider.spec().model_name.clone(),
                })
            }
            Err(reason) => {
                log::debug!("claim {} {target} {order}: attempt {attempt} rejected ({reason})", claim.id);
                last_reason = reason;
            }
        }
    }
    Err(SynthError::GenerationExhausted {
        claim_id: claim.id.clone(),
        target,
        order,
        attempts: MAX_GENERATION_ATTEMPTS,
        last_reason,
    })
}

/// One planned generation: indexes into the claim and provider lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerationTask {
    pub claim: usize,
    pub provider: usize,
    pub order: PresentationOrder,
    pub target: EntailmentLabel,
}

/// Every (claim, provider, order, label) combination, claims outermost.
pub fn plan_generations(n_claims: usize, n_providers: usize) -> Vec<GenerationTask> {
    let mut plan = Vec::with_capacity(n_claims * n_providers * 6);
    for claim in 0..n_claims {
        for provider in 0..n_providers {
            for order in PresentationOrder::BOTH {
                for target in EntailmentLabel::ALL {
                    plan.push(GenerationTask { claim, provider, order, target });
                }
            }
        }
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub claim_id: String,
    pub target_label: EntailmentLabel,
    pub order: PresentationOrder,
    pub generator_model: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub planned: usize,
    pub generated: usize,
    pub failures: Vec<GenerationFailure>,
    /// Generations dropped because the same model produced the same text
    /// (after normalization) for the same claim earlier in the plan.
    pub duplicates: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<SyntheticExample>,
    pub report: CorpusReport,
}

/// Runs the full generation plan. Items run in parallel; failures are
/// collected rather than aborting the build.
pub fn build_corpus(claims: &[Claim], providers: &[&dyn ChatProvider], templates: &TemplateSet) -> Corpus {
    let plan = plan_generations(claims.len(), providers.len());
    let results = par::map(&plan, |t| {
        generate_for_claim(&claims[t.claim], t.target, t.order, providers[t.provider], templates)
    });
    let mut seen = HashSet::new();
    let mut examples = Vec::new();
    let mut failures = Vec::new();
    let mut duplicates = 0;
    for (t, r) in plan.iter().zip(results) {
        match r {
            Ok(ex) => {
                let key = (ex.claim_id.clone(), ex.generator_model.clone(), normalize_text(&ex.generated_text));
                if seen.insert(key) {
                    examples.push(ex);
                } else {
                    duplicates += 1;
                }
            }
            Err(e) => failures.push(GenerationFailure {
                claim_id: claims[t.claim].id.clone(),
                target_label: t.target,
                order: t.order,
                generator_model: providers[t.provider].spec().model_name.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let report = CorpusReport { planned: plan.len(), generated: examples.len(), failures, duplicates };
    Corpus { examples, report }
}

/// Target class proportions and output size for [`sample_mix`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub fractions: BTreeMap<EntailmentLabel, f64>,
    pub total: usize,
}

impl MixSpec {
    pub fn new(fractions: [f64; 3], total: usize) -> Result<Self, SynthError> {
        let m = Self { fractions: EntailmentLabel::ALL.into_iter().zip(fractions).collect(), total };
        m.validate()?;
        Ok(m)
    }

    /// 1:1:1.
    pub fn balanced(total: usize) -> Self {
        Self::new([1.0 / 3.0; 3], total).expect("valid mix")
    }

    /// 50% / 35% / 15%.
    pub fn imbalanced(total: usize) -> Self {
        Self::new([0.5, 0.35, 0.15], total).expect("valid mix")
    }

    pub fn fraction(&self, l: EntailmentLabel) -> f64 {
        self.fractions.get(&l).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fs = EntailmentLabel::ALL.map(|l| self.fraction(l));
        if fs.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(SynthError::InvalidMix("fractions must be finite and non-negative".into()));
        }
        let sum: f64 = fs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::InvalidMix(format!("fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Per-class counts: floors of `fraction · total`, then the remaining
    /// units go to the largest fractional parts (ties in label order).
    pub fn allocate(&self) -> [usize; 3] {
        let exact = EntailmentLabel::ALL.map(|l| self.fraction(l) * self.total as f64);
        let mut counts = exact.map(|x| x.floor() as usize);
        let assigned: usize = counts.iter().sum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().take(self.total.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }
}

/// Resamples `corpus` to the class counts of `mix`. Classes with enough
/// examples are undersampled without replacement; smaller classes are drawn
/// with replacement. Output is grouped by label in canonical order and, within
/// a label, keeps corpus order for undersampled classes.
pub fn sample_mix(
    corpus: &[SyntheticExample],
    mix: &MixSpec,
    seed: u64,
) -> Result<Vec<SyntheticExample>, SynthError> {
    mix.validate()?;
    let counts = mix.allocate();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(mix.total);
    for label in EntailmentLabel::ALL {
        let pool: Vec<&SyntheticExample> = corpus.iter().filter(|e| e.target_label == label).collect();
        let demand = counts[label.index()];
        if pool.is_empty() {
            if mix.fraction(label) > 0.0 {
                return Err(SynthError::EmptyClass(label));
            }
            continue;
        }
        if demand <= pool.len() {
            let mut picked = index::sample(&mut rng, pool.len(), demand).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|i| pool[i].clone()));
        } else {
            out.extend((0..demand).map(|_| pool[rng.random_range(0..pool.len())].clone()));
        }
    }
    Ok(out)
}

/// Shuffles with `seed` and splits; the train part has
/// `round(train_fraction · n)` items.
pub fn split_train_val<T: Clone>(
    records: &[T],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), SynthError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SynthError::InvalidFraction(train_fraction));
    }
    let n_train = (train_fraction * records.len() as f64).round() as usize;
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = idx[..n_train].iter().map(|&i| records[i].clone()).collect();
    let val = idx[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, val))
}

/// Prompt plus the expected assistant answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainRecord {
    pub messages: MessageSeq,
    pub target_text: String,
}

#[derive(Serialize, Deserialize)]
struct TrainLine {
    messages: Vec<Message>,
}

impl TrainRecord {
    /// Annotation prompt for the synthetic post and its claim in the order
    /// it was generated for, answered with the target keyword.
    pub fn from_example(
        example: &SyntheticExample,
        claim_text: &str,
        templates: &TemplateSet,
    ) -> Result<Self, SynthError> {
        let messages =
            templates.render_annotation(TRAIN_PROMPT_STYLE, example.order, &example.generated_text, claim_text)?;
        Ok(Self { messages, target_text: example.target_label.keyword().to_string() })
    }

    pub fn label(&self) -> Option<EntailmentLabel> {
        parse_entailment(&self.target_text).ok()
    }

    fn to_line(&self) -> String {
        let msgs: Vec<Message> = self.messages.clone().with(Message::new(Role::Assistant, &self.target_text)).into();
        serde_json::to_string(&TrainLine { messages: msgs }).expect("messages serialize")
    }

    fn from_line(line: &str) -> Result<Self, String> {
        let TrainLine { mut messages } = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let last = messages.pop().ok_or("no messages")?;
        if last.role != Role::Assistant {
            return Err("final message must be the assistant target".into());
        }
        if parse_entailment(&last.content).is_err() {
            return Err(format!("target `{}` is not a label", last.content));
        }
        let messages = MessageSeq::try_from(messages)?;
        Ok(Self { messages, target_text: last.content })
    }
}

/// Writes one chat-format JSON object per line, the target as the final
/// assistant message.
pub fn export_train_file(records: &[TrainRecord], path: &Path) -> Result<(), SynthError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", r.to_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn import_train_file(path: &Path) -> Result<Vec<TrainRecord>, SynthError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| TrainRecord::from_line(l).map_err(|msg| SynthError::BadRecord { line: i + 1, msg }))
        .collect()
}
