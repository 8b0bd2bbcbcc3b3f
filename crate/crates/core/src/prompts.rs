//! Annotation and generation prompts rendered from plain-text templates.
//!
//! Template files are line oriented. Leading `#` lines are comments. A line
//! `@system`, `@user` or `@assistant` opens a message; `@exemplars` expands to
//! the worked examples, each formatted with the template's last `@user`
//! section. `{{TWEET}}` and `{{CLAIM}}` are the two slots.
//!
//! Annotation templates are written in post-first form. For claim-first
//! rendering the words TWEET and CLAIM are exchanged throughout the template
//! text and the slot contents follow, so the conditional still reads
//! "if <premise> is true".

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::label::{EntailmentLabel, PresentationOrder, PromptStyle};

pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("prompt text must not be empty")]
    EmptyText,
    #[error("template {name}: {msg}")]
    Template { name: String, msg: String },
    #[error("missing template {0}")]
    MissingTemplate(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

/// Ordered chat messages; never empty, and the first one is a system message.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Message>", into = "Vec<Message>")]
pub struct MessageSeq(Vec<Message>);

impl TryFrom<Vec<Message>> for MessageSeq {
    type Error = String;

    fn try_from(v: Vec<Message>) -> Result<Self, Self::Error> {
        match v.first() {
            Some(m) if m.role == Role::System => Ok(Self(v)),
            Some(_) => Err("first message must have role system".into()),
            None => Err("message sequence is empty".into()),
        }
    }
}

impl From<MessageSeq> for Vec<Message> {
    fn from(s: MessageSeq) -> Self {
        s.0
    }
}

impl MessageSeq {
    pub fn messages(&self) -> &[Message] {
        &self.0
    }

    pub fn system(&self) -> &str {
        &self.0[0].content
    }

    /// Content of the last user message.
    pub fn last_user(&self) -> Option<&str> {
        self.0.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str())
    }

    /// Appends a message; used to attach the expected answer for training.
    pub fn with(mut self, msg: Message) -> Self {
        self.0.push(msg);
        self
    }

    /// Human-readable form used by golden files: `@role` line, then content.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for m in &self.0 {
            let _ = writeln!(s, "@{}", m.role.as_str());
            s.push_str(&m.content);
            s.push('\n');
        }
        s
    }

    /// SHA-256 (hex) of the JSON encoding; the key for scripted responses and logs.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_string(&self.0).expect("messages serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExemplar {
    pub premise: String,
    pub hypothesis: String,
    pub rationale: String,
    pub label: EntailmentLabel,
}

/// The three worked examples used in few-shot chain-of-thought prompts.
pub fn few_shot_exemplars() -> Vec<FewShotExemplar> {
    let ex = |p: &str, h: &str, r: &str, l| FewShotExemplar {
        premise: p.into(),
        hypothesis: h.into(),
        rationale: r.into(),
        label: l,
    };
    vec![
        ex(
            "A dog is running in a field.",
            "An animal is running in a field.",
            "A dog is an animal. A dog running in a field is an animal running in a field. So the final answer is ENTAILMENT.",
            EntailmentLabel::Entailment,
        ),
        ex(
            "A man is breaking three eggs in a bowl.",
            "A girl is pouring some milk in a bowl.",
            "A man is breaking three eggs in a bowl does not imply that a girl is pouring some milk in a bowl. So the final answer is NEUTRAL.",
            EntailmentLabel::Neutral,
        ),
        ex(
            "A man is playing golf.",
            "No man is playing golf.",
            "A man is playing golf and no man is playing golf cannot be true at the same time. So the final answer is CONTRADICTION.",
            EntailmentLabel::Contradiction,
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Lit(String),
    Tweet,
    Claim,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Section {
    Message { role: Role, body: Vec<Segment> },
    Exemplars,
}

/// A parsed template file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    source: String,
    sections: Vec<Section>,
}

fn slot_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([A-Za-z_]*)\}\}").unwrap())
}

fn name_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(TWEET|CLAIM)\b").unwrap())
}

fn parse_body(name: &str, text: &str) -> Result<Vec<Segment>, PromptError> {
    let mut out = Vec::new();
    let mut last = 0;
    for cap in slot_regex().captures_iter(text) {
        let m = cap.get(0).unwrap();
        if m.start() > last {
            out.push(Segment::Lit(text[last..m.start()].to_string()));
        }
        out.push(match &cap[1] {
            "TWEET" => Segment::Tweet,
            "CLAIM" => Segment::Claim,
            other => {
                return Err(PromptError::Template {
                    name: name.into(),
                    msg: format!("unknown slot {{{{{other}}}}}"),
                })
            }
        });
        last = m.end();
    }
    if last < text.len() {
        out.push(Segment::Lit(text[last..].to_string()));
    }
    Ok(out)
}

impl Template {
    pub fn parse(name: &str, source: &str) -> Result<Self, PromptError> {
        let err = |msg: &str| PromptError::Template { name: name.into(), msg: msg.into() };
        let mut sections = Vec::new();
        let mut current: Option<(Role, Vec<&str>)> = None;
        let mut seen_directive = false;

        let flush = |cur: &mut Option<(Role, Vec<&str>)>, out: &mut Vec<Section>| -> Result<(), PromptError> {
            if let Some((role, lines)) = cur.take() {
                let text = lines.join("\n");
                let text = text.trim_end_matches('\n');
                if text.trim().is_empty() {
                    return Err(PromptError::Template { name: name.into(), msg: "empty message".into() });
                }
                out.push(Section::Message { role, body: parse_body(name, text)? });
            }
            Ok(())
        };

        for line in source.lines() {
            if !seen_directive && (line.starts_with('#') || line.trim().is_empty()) {
                continue;
            }
            let directive = match line.trim_end() {
                "@system" => Some(Some(Role::System)),
                "@user" => Some(Some(Role::User)),
                "@assistant" => Some(Some(Role::Assistant)),
                "@exemplars" => Some(None),
                _ => None,
            };
            match directive {
                Some(role) => {
                    seen_directive = true;
                    flush(&mut current, &mut sections)?;
                    match role {
                        Some(r) => current = Some((r, Vec::new())),
                        None => sections.push(Section::Exemplars),
                    }
                }
                None => match current.as_mut() {
                    Some((_, lines)) => lines.push(line),
                    None => return Err(err("content outside a message section")),
                },
            }
        }
        flush(&mut current, &mut sections)?;

        match sections.first() {
            Some(Section::Message { role: Role::System, .. }) => {}
            _ => return Err(err("first section must be @system")),
        }
        let has_exemplars = sections.iter().any(|s| matches!(s, Section::Exemplars));
        let has_user = sections.iter().any(|s| matches!(s, Section::Message { role: Role::User, .. }));
        if has_exemplars && !has_user {
            return Err(err("@exemplars requires a @user section"));
        }
        Ok(Self { name: name.into(), source: source.to_string(), sections })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn render_body(body: &[Segment], swap_names: bool, tweet: &str, claim: &str) -> String {
        let mut s = String::new();
        for seg in body {
            match seg {
                Segment::Lit(t) if swap_names => {
                    let swapped = name_regex().replace_all(t, |c: &regex::Captures| {
                        if &c[1] == "TWEET" { "CLAIM" } else { "TWEET" }
                    });
                    s.push_str(&swapped);
                }
                Segment::Lit(t) => s.push_str(t),
                Segment::Tweet => s.push_str(tweet),
                Segment::Claim => s.push_str(claim),
            }
        }
        s
    }

    /// Renders with `tweet`/`claim` filling the slots of the same name.
    /// With `swap_names`, the words TWEET and CLAIM in the template text are
    /// exchanged; slot values are inserted verbatim either way.
    pub fn render(
        &self,
        swap_names: bool,
        tweet: &str,
        claim: &str,
        exemplars: &[FewShotExemplar],
    ) -> MessageSeq {
        let user_body = self.sections.iter().rev().find_map(|s| match s {
            Section::Message { role: Role::User, body } => Some(body),
            _ => None,
        });
        let mut msgs = Vec::new();
        for sec in &self.sections {
            match sec {
                Section::Message { role, body } => {
                    msgs.push(Message::new(*role, Self::render_body(body, swap_names, tweet, claim)));
                }
                Section::Exemplars => {
                    let body = user_body.expect("validated at parse time");
                    for ex in exemplars {
                        let user = Self::render_body(body, swap_names, &ex.premise, &ex.hypothesis);
                        msgs.push(Message::new(Role::User, user));
                        msgs.push(Message::new(Role::Assistant, ex.rationale.clone()));
                    }
                }
            }
        }
        MessageSeq(msgs)
    }
}

fn annotation_file(style: PromptStyle) -> String {
    format!("annotation-{}.tmpl", style.slug())
}

fn generation_file(label: EntailmentLabel, order: PresentationOrder) -> String {
    format!("generation-{}-{}.tmpl", label.keyword().to_ascii_lowercase(), order.slug())
}

const BUILTIN: [(&str, &str); 10] = [
    ("annotation-annotation-only.tmpl", include_str!("../templates/annotation-annotation-only.tmpl")),
    ("annotation-zero-shot.tmpl", include_str!("../templates/annotation-zero-shot.tmpl")),
    ("annotation-zero-shot-cot.tmpl", include_str!("../templates/annotation-zero-shot-cot.tmpl")),
    ("annotation-few-shot-cot.tmpl", include_str!("../templates/annotation-few-shot-cot.tmpl")),
    ("generation-entailment-post-first.tmpl", include_str!("../templates/generation-entailment-post-first.tmpl")),
    ("generation-neutral-post-first.tmpl", include_str!("../templates/generation-neutral-post-first.tmpl")),
    ("generation-contradiction-post-first.tmpl", include_str!("../templates/generation-contradiction-post-first.tmpl")),
    ("generation-entailment-claim-first.tmpl", include_str!("../templates/generation-entailment-claim-first.tmpl")),
    ("generation-neutral-claim-first.tmpl", include_str!("../templates/generation-neutral-claim-first.tmpl")),
    ("generation-contradiction-claim-first.tmpl", include_str!("../templates/generation-contradiction-claim-first.tmpl")),
];

/// Every annotation and generation template, keyed by file name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

impl TemplateSet {
    pub fn builtin() -> &'static TemplateSet {
        static SET: OnceLock<TemplateSet> = OnceLock::new();
        SET.get_or_init(|| {
            Self::from_sources(BUILTIN.iter().map(|(n, s)| (n.to_string(), s.to_string())))
                .expect("built-in templates parse")
        })
    }

    fn from_sources(items: impl IntoIterator<Item = (String, String)>) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for (name, src) in items {
            templates.insert(name.clone(), Template::parse(&name, &src)?);
        }
        let set = Self { templates };
        for style in PromptStyle::ALL {
            set.get(&annotation_file(style))?;
        }
        for label in EntailmentLabel::ALL {
            for order in PresentationOrder::BOTH {
                set.get(&generation_file(label, order))?;
            }
        }
        Ok(set)
    }

    /// Loads a full set of `*.tmpl` files from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut items = Vec::new();
        for (name, _) in BUILTIN {
            items.push((name.to_string(), fs::read_to_string(dir.join(name))?));
        }
        Self::from_sources(items)
    }

    /// Writes every template as a plain-text file into `dir`.
    pub fn export_dir(&self, dir: &Path) -> Result<(), PromptError> {
        fs::create_dir_all(dir)?;
        for (name, t) in &self.templates {
            fs::write(dir.join(name), t.source())?;
        }
        Ok(())
    }

    fn get(&self, name: &str) -> Result<&Template, PromptError> {
        self.templates.get(name).ok_or_else(|| PromptError::MissingTemplate(name.to_string()))
    }

    pub fn render_annotation(
        &self,
        style: PromptStyle,
        order: PresentationOrder,
        post_text: &str,
        claim_text: &str,
    ) -> Result<MessageSeq, PromptError> {
        if post_text.trim().is_empty() || claim_text.trim().is_empty() {
            return Err(PromptError::EmptyText);
        }
        let t = self.get(&annotation_file(style))?;
        let exemplars = if style == PromptStyle::FewShotCot { few_shot_exemplars() } else { Vec::new() };
        Ok(match order {
            PresentationOrder::PostFirst => t.render(false, post_text, claim_text, &exemplars),
            PresentationOrder::ClaimFirst => t.render(true, claim_text, post_text, &exemplars),
        })
    }

    pub fn render_generation(
        &self,
        target: EntailmentLabel,
        order: PresentationOrder,
        claim_text: &str,
    ) -> Result<MessageSeq, PromptError> {
        if claim_text.trim().is_empty() {
            return Err(PromptError::EmptyText);
        }
        let t = self.get(&generation_file(target, order))?;
        Ok(t.render(false, "", claim_text, &[]))
    }
}

/// Renders an annotation prompt from the built-in templates.
pub fn render_annotation_prompt(
    style: PromptStyle,
    order: PresentationOrder,
    post_text: &str,
    claim_text: &str,
) -> Result<MessageSeq, PromptError> {
    TemplateSet::builtin().render_annotation(style, order, post_text, claim_text)
}

/// Renders a synthetic-post generation prompt from the built-in templates.
pub fn render_generation_prompt(
    target: EntailmentLabel,
    order: PresentationOrder,
    claim_text: &str,
) -> Result<MessageSeq, PromptError> {
    TemplateSet::builtin().render_generation(target, order, claim_text)
}
