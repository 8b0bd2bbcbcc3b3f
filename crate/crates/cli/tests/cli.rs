use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy_fixture() -> tempfile::TempDir {
    fn copy(from: &Path, to: &Path) {
        fs::create_dir_all(to).unwrap();
        for e in fs::read_dir(from).unwrap() {
            let e = e.unwrap();
            if e.file_name() == "work" {
                continue;
            }
            let dst = to.join(e.file_name());
            if e.path().is_dir() {
                copy(&e.path(), &dst);
            } else {
                fs::copy(e.path(), dst).unwrap();
            }
        }
    }
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/toy");
    let dir = tempfile::tempdir().unwrap();
    copy(&src, dir.path());
    dir
}

fn cli(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_claim-match"))
        .args(args)
        .arg("--config")
        .arg(config)
        .output()
        .unwrap()
}

fn config(dir: &tempfile::TempDir) -> PathBuf {
    dir.path().join("config.toml")
}

#[test]
fn run_writes_every_stage() {
    let dir = toy_fixture();
    let out = cli(&["run", "--draws", "50"], &config(&dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let work = dir.path().join("work");
    for f in ["ingest/posts.jsonl", "index/bm25.idx", "pairs/pairs.jsonl", "gen/synthetic.jsonl", "eval/table.txt"] {
        assert!(work.join(f).is_file(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(work.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["n_draws"], 50);
    let table = fs::read_to_string(work.join("eval/table.txt")).unwrap();
    assert!(table.contains("±"));
}

#[test]
fn pair_without_index_exits_with_missing_input() {
    let dir = toy_fixture();
    assert!(cli(&["ingest"], &config(&dir)).status.success());
    let out = cli(&["pair"], &config(&dir));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn invalid_config_exits_with_config_error() {
    let dir = toy_fixture();
    let path = config(&dir);
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, format!("unknown_key = 1\n{text}")).unwrap();
    assert_eq!(cli(&["ingest"], &path).status.code(), Some(2));

    fs::write(&path, text.replace("n_draws = 1000", "n_draws = 0")).unwrap();
    assert_eq!(cli(&["eval"], &path).status.code(), Some(2));
}

#[test]
fn unreadable_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["ingest"], &dir.path().join("nope.toml")).status.code(), Some(2));
}

#[test]
fn templates_are_exported() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_claim-match"))
        .args(["templates", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(fs::read_dir(dir.path()).unwrap().count() >= 7);
}
