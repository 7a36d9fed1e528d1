use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sigforge_core::ruleval::REPORT_HEADER;
use tempfile::TempDir;

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    bench: PathBuf,
    index: PathBuf,
    rule: PathBuf,
}

fn sigforge(args: &[&str]) -> Output {
    sigforge_env(args, &[])
}

fn sigforge_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sigforge"));
    cmd.args(args).env_remove("SIGFORGE_THREADS").env_remove("RUST_LOG");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn sigforge")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn assert_ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(o));
}

/// A small benchmark, an index over its background files and one rule.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let bench = root.join("bench");
        let index = root.join("index.bin");
        let rule = root.join("family.yar");
        assert_ok(&sigforge(&[
            "synth-bench", "--out", p(&bench), "--families", "1", "--files-per-family", "8",
            "--heldout-per-family", "4", "--plants-per-family", "3", "--plant-len", "32", "--benign", "20",
            "--background", "40", "--subfamily-files", "0", "--file-size", "1024", "--seed", "3",
        ]));
        assert_ok(&sigforge(&[
            "build-index", "--train", p(&bench.join("background")), "--out", p(&index), "--k", "5000",
        ]));
        assert_ok(&sigforge(&[
            "generate", "--samples", p(&bench.join("families/family_00/train")), "--index", p(&index),
            "--out", p(&rule), "--name", "family_00",
        ]));
        Fixture { _dir: dir, root, bench, index, rule }
    })
}

fn scratch(name: &str) -> PathBuf {
    let d = fixture().root.join(name);
    fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn build_index_writes_a_loadable_index() {
    let f = fixture();
    assert!(sigforge_core::bloom_index::BloomIndex::load(&f.index).is_ok());
}

#[test]
fn build_index_rejects_empty_corpus() {
    let empty = scratch("empty-train");
    let o = sigforge(&["build-index", "--train", p(&empty), "--out", p(&empty.join("x.bin"))]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("empty corpus"), "{}", stderr(&o));
}

#[test]
fn generate_needs_two_samples() {
    let f = fixture();
    let one = scratch("one-sample");
    fs::copy(f.bench.join("families/family_00/train/000.bin"), one.join("a.bin")).unwrap();
    let o = sigforge(&["generate", "--samples", p(&one), "--index", p(&f.index), "--out", p(&one.join("r.yar"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("need ≥ 2 samples"), "{}", stderr(&o));
}

#[test]
fn generate_reports_no_rule_with_its_own_status() {
    let f = fixture();
    let blank = scratch("blank-samples");
    fs::write(blank.join("a.bin"), vec![0u8; 600]).unwrap();
    fs::write(blank.join("b.bin"), vec![0xFFu8; 600]).unwrap();
    let o = sigforge(&["generate", "--samples", p(&blank), "--index", p(&f.index), "--out", p(&blank.join("r.yar"))]);
    assert_eq!(o.status.code(), Some(3), "stderr: {}", stderr(&o));
    assert!(stderr(&o).contains("no rule produced"));
    assert!(!blank.join("r.yar").exists());
}

#[test]
fn generate_is_repeatable() {
    let f = fixture();
    let out = scratch("repeat").join("again.yar");
    let o = sigforge(&[
        "generate", "--samples", p(&f.bench.join("families/family_00/train")), "--index", p(&f.index),
        "--out", p(&out), "--name", "family_00",
    ]);
    assert_ok(&o);
    assert!(stdout(&o).contains("coverage="));
    assert_eq!(fs::read(&out).unwrap(), fs::read(&f.rule).unwrap());
}

#[test]
fn scan_lists_matching_files() {
    let f = fixture();
    let target = scratch("scan-target");
    for i in 0..2 {
        fs::copy(f.bench.join(format!("families/family_00/heldout/{i:03}.bin")), target.join(format!("hit{i}.bin")))
            .unwrap();
    }
    for i in 0..3 {
        fs::copy(f.bench.join(format!("benign/{i:05}.bin")), target.join(format!("miss{i}.bin"))).unwrap();
    }
    let o = sigforge(&["scan", "--rule", p(&f.rule), "--target", p(&target)]);
    assert_ok(&o);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(lines.iter().all(|l| l.contains("hit") && l.ends_with("\tfamily_00")));
}

#[test]
fn scan_of_empty_dir_prints_nothing() {
    let f = fixture();
    let empty = scratch("scan-empty");
    let o = sigforge(&["scan", "--rule", p(&f.rule), "--target", p(&empty)]);
    assert_ok(&o);
    assert!(stdout(&o).is_empty());
}

#[test]
fn scan_rejects_unsupported_rule() {
    let dir = scratch("bad-rule");
    let rule = dir.join("bad.yar");
    fs::write(&rule, "rule bad { strings: $a = \"text\" condition: $a }").unwrap();
    let o = sigforge(&["scan", "--rule", p(&rule), "--target", p(&dir)]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn missing_rule_file_is_an_io_error() {
    let dir = scratch("missing");
    let o = sigforge(&["scan", "--rule", p(&dir.join("absent.yar")), "--target", p(&dir)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_prints_a_report() {
    let f = fixture();
    let o = sigforge(&[
        "eval", "--rule", p(&f.rule), "--positives", p(&f.bench.join("families/family_00/heldout")),
        "--negatives", p(&f.bench.join("benign")),
    ]);
    assert_ok(&o);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(REPORT_HEADER));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "family_00");
    assert_eq!(row[1], "4");
    assert_eq!(row[2], "0");
}

#[test]
fn short_plants_are_a_usage_error() {
    let out = fixture().root.join("short-plants");
    let o = sigforge(&["synth-bench", "--out", p(&out), "--plant-len", "7"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flags_override_the_config_file() {
    let dir = scratch("config");
    let config = dir.join("sigforge.toml");
    fs::write(&config, "plant-len = 7\nfamilies = 1\nbenign = 1\nbackground = 1\nsubfamily-files = 0\n").unwrap();
    let o = sigforge(&["--config", p(&config), "synth-bench", "--out", p(&dir.join("a"))]);
    assert_eq!(o.status.code(), Some(1));
    let o = sigforge(&[
        "--config", p(&config), "synth-bench", "--out", p(&dir.join("b")), "--plant-len", "16",
        "--files-per-family", "2", "--heldout-per-family", "1",
    ]);
    assert_ok(&o);
    assert!(stdout(&o).contains("1 families, 1 benign, 1 background"));

    let bad = dir.join("bad.toml");
    fs::write(&bad, "no-such-key = 1\n").unwrap();
    let o = sigforge(&["--config", p(&bad), "synth-bench", "--out", p(&dir.join("c"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let f = fixture();
    let target = f.bench.join("families/family_00/heldout");
    let o = sigforge_env(&["scan", "--rule", p(&f.rule), "--target", p(&target)], &[("SIGFORGE_THREADS", "2")]);
    assert_ok(&o);
    assert_eq!(stdout(&o).lines().count(), 4);
    let o = sigforge_env(&["scan", "--rule", p(&f.rule), "--target", p(&target)], &[("SIGFORGE_THREADS", "lots")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(sigforge(&[]).status.code(), Some(1));
    assert_eq!(sigforge(&["frobnicate"]).status.code(), Some(1));
    let help = sigforge(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("synth-bench"));
}
