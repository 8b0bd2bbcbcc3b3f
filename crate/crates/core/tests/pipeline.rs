mod common;

use std::fs;

use claim_match::adjudication::ModelAnnotation;
use claim_match::ingest::read_jsonl;
use claim_match::pipeline::{EvalOutput, Overrides, Pipeline, PipelineError, Stage, MANIFEST_FILE};
use claim_match::rerank::CandidatePair;
use claim_match::synth::CorpusReport;
use claim_match::EntailmentLabel;

use common::*;

#[test]
fn toy_scripts_are_current() {
    let dir = fixture_dir().join("scripts");
    for (name, entries) in [("annotator.jsonl", annotator_script()), ("generator.jsonl", generator_script())] {
        let want = script_jsonl(&entries);
        let path = dir.join(name);
        if update_golden() {
            fs::create_dir_all(&dir).unwrap();
            fs::write(&path, &want).unwrap();
        }
        let have = fs::read_to_string(&path).unwrap_or_default();
        assert!(have == want, "{name} is stale; rerun with UPDATE_GOLDEN=1");
    }
}

fn pipeline(dir: &std::path::Path, o: &Overrides) -> Pipeline {
    Pipeline::from_config_file(&dir.join("config.toml"), o).unwrap()
}

#[test]
fn toy_run_selects_expected_pairs_and_scores() {
    let dir = scratch_fixture();
    let p = pipeline(dir.path(), &Overrides::default());
    let summaries = p.run_all().unwrap();
    assert_eq!(summaries.len(), 7);
    let work = dir.path().join("work");

    let pairs: Vec<CandidatePair> = read_jsonl(&work.join("pairs/pairs.jsonl")).unwrap();
    let got: Vec<(String, String)> = pairs.iter().map(|p| (p.claim_id.clone(), p.post_id.clone())).collect();
    let want: Vec<(String, String)> = TOY_PAIRS.iter().map(|(c, p)| (c.to_string(), p.to_string())).collect();
    assert_eq!(got, want);

    let zsc: Vec<ModelAnnotation> = read_jsonl(&work.join("annotate/toy-llm.zero-shot-cot.jsonl")).unwrap();
    assert_eq!(zsc[2].completions.len(), 3, "re-ask on the unparsable reply");
    assert_eq!(zsc[2].final_label.label(), Some(EntailmentLabel::Neutral));
    let tuned: Vec<ModelAnnotation> = read_jsonl(&work.join("annotate/toy-tuned.annotation-only.jsonl")).unwrap();
    assert!(tuned[7].flagged);

    let report: EvalOutput = serde_json::from_str(&fs::read_to_string(work.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report.n_pairs, 8);
    assert_eq!(report.tied_tallies, 0);
    assert_eq!(report.n_draws, 1000);
    for row in &report.conditions {
        let r = &row.report;
        assert_eq!((r.macro_precision_std, r.macro_recall_std, r.accuracy_std), (0.0, 0.0, 0.0), "{}", row.condition);
    }
    let acc: Vec<f64> = report.conditions.iter().map(|r| r.report.accuracy_mean).collect();
    assert_eq!(acc, vec![0.75, 0.75, 0.75, 0.875, 6.0 / 7.0]);
    assert_eq!(report.conditions[4].report.excluded_pairs, 1);
    let e = report.distribution[&EntailmentLabel::Entailment];
    assert_eq!((e.mean_count, e.mean_percentage), (5.0, 62.5));
    let table = fs::read_to_string(work.join("eval/table.txt")).unwrap();
    assert!(table.contains("Prompt Style") && table.contains("few-shot-cot"));

    let gen: CorpusReport = serde_json::from_str(&fs::read_to_string(work.join("gen/report.json")).unwrap()).unwrap();
    assert_eq!(gen.planned, 48);
    assert_eq!(gen.failures.len(), 1);
    assert_eq!(gen.generated, 47);
    let train = fs::read_to_string(work.join("export/balanced/toy-generator/train.jsonl")).unwrap();
    let val = fs::read_to_string(work.join("export/balanced/toy-generator/val.jsonl")).unwrap();
    assert_eq!((train.lines().count(), val.lines().count()), (38, 9));
}

#[test]
fn toy_run_is_deterministic_and_resumable() {
    let a = scratch_fixture();
    let b = scratch_fixture();
    let pa = pipeline(a.path(), &Overrides::default());
    let pb = pipeline(b.path(), &Overrides::default());
    pa.run_all().unwrap();
    pb.run_all().unwrap();
    let sa = snapshot(&a.path().join("work"), &[MANIFEST_FILE]);
    let sb = snapshot(&b.path().join("work"), &[MANIFEST_FILE]);
    assert!(sa.len() >= 15);
    assert_eq!(sa, sb);
    assert_eq!(pa.load_manifest().unwrap().digests(), pb.load_manifest().unwrap().digests());

    // Drop downstream outputs and rebuild them stage by stage.
    for f in ["pairs/pairs.jsonl", "eval/report.json", "export/balanced/toy-generator/val.jsonl"] {
        fs::remove_file(a.path().join("work").join(f)).unwrap();
    }
    for s in [Stage::Pair, Stage::Export, Stage::Eval] {
        pa.run_stage(s).unwrap();
    }
    assert_eq!(snapshot(&a.path().join("work"), &[MANIFEST_FILE]), sb);
}

#[test]
fn stage_without_prerequisite_fails_with_missing_input() {
    let dir = scratch_fixture();
    let p = pipeline(dir.path(), &Overrides::default());
    p.ingest().unwrap();
    let err = p.pair().unwrap_err();
    assert!(matches!(err, PipelineError::MissingInput { stage: Stage::Pair, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(matches!(p.eval().unwrap_err(), PipelineError::MissingInput { .. }));
}

#[test]
fn overrides_change_the_run() {
    let dir = scratch_fixture();
    let o = Overrides { draws: Some(7), provider: Some("toy-llm".into()), ..Default::default() };
    let p = pipeline(dir.path(), &o);
    p.run_all().unwrap();
    let report: EvalOutput =
        serde_json::from_str(&fs::read_to_string(dir.path().join("work/eval/report.json")).unwrap()).unwrap();
    assert_eq!(report.n_draws, 7);
    assert_eq!(report.conditions.len(), 4);
    assert!(report.conditions.iter().all(|r| r.model == "toy-llm"));
}

#[test]
fn script_miss_is_a_provider_error() {
    let dir = scratch_fixture();
    fs::write(dir.path().join("scripts/annotator.jsonl"), "").unwrap();
    let p = pipeline(dir.path(), &Overrides::default());
    for s in [Stage::Ingest, Stage::Index, Stage::Pair] {
        p.run_stage(s).unwrap();
    }
    let err = p.annotate().unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}
