//! Shared helpers for the toy fixture: scripted chat responses and a
//! scratch copy of the fixture directory.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use claim_match::gateway::ScriptEntry;
use claim_match::ingest::{read_jsonl, Claim, Post};
use claim_match::label::{EntailmentLabel, PresentationOrder, PromptStyle};
use claim_match::prompts::{render_annotation_prompt, render_generation_prompt};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn update_golden() -> bool {
    std::env::var_os("UPDATE_GOLDEN").is_some()
}

/// Copies the fixture (without any workdir) into a fresh temp directory.
pub fn scratch_fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_tree(&fixture_dir(), dir.path());
    dir
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name();
        if name == "work" {
            continue;
        }
        let src = entry.path();
        if src.is_dir() {
            copy_tree(&src, &to.join(&name));
        } else {
            fs::copy(&src, to.join(&name)).unwrap();
        }
    }
}

/// Relative path → bytes for every file under `root`, skipping `skip`.
pub fn snapshot(root: &Path, skip: &[&str]) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, skip: &[&str], out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            let rel = p.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/");
            if skip.contains(&rel.as_str()) {
                continue;
            }
            if p.is_dir() {
                walk(base, &p, skip, out);
            } else {
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, skip, &mut out);
    out
}

use EntailmentLabel::{Contradiction as C, Entailment as E, Neutral as N};

/// Pairs the toy pipeline selects, with the human majority per order.
pub const TOY_PAIRS: [(&str, &str); 8] = [
    ("c1", "p02"),
    ("c2", "p05"),
    ("c3", "p09"),
    ("c4", "p13"),
    ("c5", "p18"),
    ("c6", "p21"),
    ("c7", "p25"),
    ("c8", "p29"),
];

/// Final human labels for [`TOY_PAIRS`] (the fixture has no tied tallies).
pub const TOY_TRUTH: [EntailmentLabel; 8] = [C, E, N, E, N, E, E, E];

const UNSURE: &str = "I am not certain about this one.";

/// Scripted answer for one order: a label, or `None` for an unparsable reply.
type Answer = Option<EntailmentLabel>;

fn llm_answers(style: PromptStyle) -> [(Answer, Answer); 8] {
    let mut a = [
        (Some(C), Some(C)),
        (Some(E), Some(N)),
        (Some(N), Some(C)),
        (Some(E), Some(E)),
        (Some(C), Some(C)),
        (Some(E), Some(E)),
        (Some(N), Some(N)),
        (Some(E), Some(N)),
    ];
    match style {
        PromptStyle::AnnotationOnly => {}
        PromptStyle::ZeroShot => {
            a[4] = (Some(N), Some(C));
            a[0] = (Some(N), Some(N));
        }
        PromptStyle::ZeroShotCot => {}
        PromptStyle::FewShotCot => a[6] = (Some(E), Some(N)),
    }
    a
}

fn tuned_answers() -> [(Answer, Answer); 8] {
    [
        (Some(C), Some(C)),
        (Some(E), Some(E)),
        (Some(N), Some(N)),
        (Some(E), Some(N)),
        (Some(C), Some(N)),
        (Some(E), Some(E)),
        (Some(N), Some(N)),
        (None, Some(E)),
    ]
}

fn styled(style: PromptStyle, l: EntailmentLabel) -> String {
    let kw = l.keyword();
    match style {
        PromptStyle::AnnotationOnly => kw.to_string(),
        PromptStyle::ZeroShot => format!("{kw}. Explanation: the two statements were compared directly."),
        PromptStyle::ZeroShotCot => {
            format!("Both texts discuss the same topic, so I compare what each asserts. So the final answer is {kw}.")
        }
        PromptStyle::FewShotCot => format!("Comparing the statements step by step. So the final answer is {kw}."),
    }
}

fn texts() -> (BTreeMap<String, String>, BTreeMap<String, String>) {
    let dir = fixture_dir();
    let claims: Vec<Claim> = read_jsonl(&dir.join("claims.jsonl")).unwrap();
    let posts: Vec<Post> = read_jsonl(&dir.join("posts.jsonl")).unwrap();
    (
        claims.into_iter().map(|c| (c.id, c.text)).collect(),
        posts.into_iter().map(|p| (p.id, p.text)).collect(),
    )
}

fn push_answers(
    out: &mut Vec<ScriptEntry>,
    style: PromptStyle,
    model: Option<&str>,
    answers: [(Answer, Answer); 8],
) {
    let (claims, posts) = texts();
    for ((cid, pid), (pc, cp)) in TOY_PAIRS.iter().zip(answers) {
        for (order, ans) in [(PresentationOrder::PostFirst, pc), (PresentationOrder::ClaimFirst, cp)] {
            let h = render_annotation_prompt(style, order, &posts[*pid], &claims[*cid]).unwrap().sha256();
            let replies = match ans {
                Some(l) => vec![styled(style, l)],
                None => vec![UNSURE.to_string(), UNSURE.to_string()],
            };
            for r in replies {
                out.push(ScriptEntry { prompt_sha256: h.clone(), response_text: r, model: model.map(String::from) });
            }
        }
    }
}

/// Script for both annotation providers of the toy config.
pub fn annotator_script() -> Vec<ScriptEntry> {
    let mut out = Vec::new();
    for style in PromptStyle::ALL {
        let mut answers = llm_answers(style);
        if style == PromptStyle::ZeroShotCot {
            // first reply unparsable, the re-ask answers
            let (claims, posts) = texts();
            let (cid, pid) = TOY_PAIRS[2];
            let h = render_annotation_prompt(style, PresentationOrder::PostFirst, &posts[pid], &claims[cid])
                .unwrap()
                .sha256();
            out.push(ScriptEntry { prompt_sha256: h, response_text: UNSURE.into(), model: None });
            answers[2].0 = Some(N);
        }
        push_answers(&mut out, style, None, answers);
    }
    push_answers(&mut out, PromptStyle::AnnotationOnly, Some("toy-tuned"), tuned_answers());
    out
}

fn generated(claim: &str, label: EntailmentLabel, order: PresentationOrder) -> String {
    let c = claim.trim_end_matches('.');
    let lc = {
        let mut it = c.chars();
        match it.next() {
            Some(f) if !c.starts_with("COVID") => f.to_lowercase().chain(it).collect(),
            _ => c.to_string(),
        }
    };
    match (order, label) {
        (PresentationOrder::PostFirst, E) => format!("Everyone at work agrees and so do I: {lc}."),
        (PresentationOrder::PostFirst, N) => format!("Long family dinner tonight, somebody brought up whether {lc}."),
        (PresentationOrder::PostFirst, C) => format!("Checked the sources myself. It is not true that {lc}."),
        (PresentationOrder::ClaimFirst, E) => format!("Told you so. {c}, and now everyone sees it."),
        (PresentationOrder::ClaimFirst, N) => "Spent the afternoon reading health news with my tea.".to_string(),
        (PresentationOrder::ClaimFirst, C) => format!("People still deny it, but {lc}. Wake up."),
    }
}

/// Script for the toy generator. Includes one "Just…" reply and one refusal
/// that get regenerated, and one plan item that never succeeds.
pub fn generator_script() -> Vec<ScriptEntry> {
    let (claims, _) = texts();
    let mut out = Vec::new();
    for (cid, text) in &claims {
        for order in PresentationOrder::BOTH {
            for label in EntailmentLabel::ALL {
                let h = render_generation_prompt(label, order, text).unwrap().sha256();
                let mut replies = Vec::new();
                match (cid.as_str(), order, label) {
                    ("c1", PresentationOrder::PostFirst, E) => {
                        replies.push("Just got my shot and a magnet stuck to my arm.".to_string())
                    }
                    ("c2", PresentationOrder::ClaimFirst, C) => {
                        replies.push("I'm sorry, but I can't help with that.".to_string())
                    }
                    ("c3", PresentationOrder::PostFirst, N) => {
                        replies.extend(["", "", ""].map(String::from));
                    }
                    _ => {}
                }
                if replies.len() < 3 {
                    replies.push(generated(text, label, order));
                }
                for r in replies {
                    out.push(ScriptEntry { prompt_sha256: h.clone(), response_text: r, model: None });
                }
            }
        }
    }
    out
}

pub fn script_jsonl(entries: &[ScriptEntry]) -> String {
    entries.iter().map(|e| serde_json::to_string(e).unwrap() + "\n").collect()
}

pub const GOLDEN_POST: &str = "Got my second vaccine dose and now a spoon sticks to my arm.";
pub const GOLDEN_CLAIM: &str = "The COVID-19 vaccine makes people magnetic.";

/// Every annotation and generation prompt for a fixed post and claim, with
/// its golden file path.
pub fn rendered_goldens() -> Vec<(PathBuf, String)> {
    let dir = golden_dir();
    let mut out = Vec::new();
    for style in PromptStyle::ALL {
        for order in PresentationOrder::BOTH {
            let p = render_annotation_prompt(style, order, GOLDEN_POST, GOLDEN_CLAIM).unwrap();
            out.push((dir.join(format!("annotation/{}.{}.txt", style.slug(), order.slug())), p.to_text()));
        }
    }
    for label in EntailmentLabel::ALL {
        for order in PresentationOrder::BOTH {
            let p = render_generation_prompt(label, order, GOLDEN_CLAIM).unwrap();
            let name = label.keyword().to_lowercase();
            out.push((dir.join(format!("generation/{name}.{}.txt", order.slug())), p.to_text()));
        }
    }
    out
}
