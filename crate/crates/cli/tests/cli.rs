use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[scenario]
tti_per_episode = 48
pretrain_episodes = 2
episodes = 4
seeds = [3]

[network]
hidden = [8]

[train]
batch_size = 8
"#;

fn semmac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semmac")).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn baseline_writes_identical_files_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = dir.path().join(out);
        let stdout = ok(semmac(&["baseline", "--config", cfg, "--out", o.to_str().unwrap()]));
        assert!(stdout.contains("s-aloha seed 3"));
    }
    let a = std::fs::read(dir.path().join("a/s-aloha-seed3.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/s-aloha-seed3.csv")).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("episode,protocol,goodput"));
}

#[test]
fn learned_protocol_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    ok(semmac(&[
        "run-t3npm",
        "--config",
        cfg.to_str().unwrap(),
        "--seeds",
        "1,2",
        "--out",
        out.to_str().unwrap(),
        "--svg",
    ]));
    for seed in [1, 2] {
        assert!(out.join(format!("t3npm-seed{seed}.summary.json")).exists());
        assert!(out.join(format!("t3npm-seed{seed}.goodput.svg")).exists());
    }
    let curve = ok(semmac(&["curve", out.join("t3npm-seed1.csv").to_str().unwrap()]));
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("target,resilience"));
    assert_eq!(lines.count(), 100);
}

#[test]
fn textgrad_replays_a_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/textgrad_trace.json");
    let out = dir.path().join("tg");
    let stdout = ok(semmac(&[
        "textgrad",
        "--config",
        cfg.to_str().unwrap(),
        "--fixture",
        fixture.to_str().unwrap(),
        "--eval-episodes",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("phi_1"));
    assert!(stdout.contains("(converged)"));
    let text = std::fs::read_to_string(out.join("instruction.txt")).unwrap();
    assert!(text.contains("UE"));
}

#[test]
fn rejects_bad_arguments() {
    assert!(!semmac(&["baseline", "--teacher", "oracle"]).status.success());
    assert!(!semmac(&["baseline", "--config", "/nonexistent/cfg.toml"]).status.success());
    assert!(!semmac(&["textgrad"]).status.success());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = semmac::harness::Config::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            cfg.validate().unwrap();
            n += 1;
        }
    }
    assert!(n >= 3);
}
