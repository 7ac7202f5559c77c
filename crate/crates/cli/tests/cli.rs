use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deletion-audit"))
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> (i32, String, String) {
    let o = bin().args(args).output().unwrap();
    (
        o.status.code().unwrap(),
        String::from_utf8(o.stdout).unwrap(),
        String::from_utf8(o.stderr).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const XOR: &str = r#"
controller = "xor"
definition = "control"
eps = 0.0
delta = 0.0
[params]
k = 8
"#;

const TIMING: &str = r#"
controller = "timing"
definition = "control"
eps = 5.0
delta = 0.9
fixtures = ["trigger"]
[params]
T = 4
"#;

const SAMPLED: &str = r#"
controller = "batch"
definition = "confidentiality"
eps = 1.0
delta = 0.3
fixtures = ["ticker"]
mode = "sampled"
trials = 1000
seed = 7
[params]
B = 4
w = 8
"#;

#[test]
fn xor_config_passes() {
    let d = TempDir::new().unwrap();
    let cfg = write(&d, "xor.toml", XOR);
    let out = d.path().join("r.json");
    let (code, _, err) = run(&["audit", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code, 0, "{err}");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let reports = v.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for r in reports {
        for key in ["definition", "controller", "fixture", "eps", "delta", "cond1", "cond2", "passed", "method", "trials", "seed"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
        assert_eq!(r["passed"], true);
    }
}

#[test]
fn timing_config_fails() {
    let d = TempDir::new().unwrap();
    let cfg = write(&d, "t.toml", TIMING);
    let (code, out, _) = run(&["audit", "--config", s(&cfg)]);
    assert_eq!(code, 1);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["passed"], false);
    assert_eq!(v["cond2"]["rate"], 0.0);
}

#[test]
fn bad_configs_exit_2() {
    let d = TempDir::new().unwrap();
    let malformed = write(&d, "m.toml", "controller = [");
    assert_eq!(run(&["audit", "--config", s(&malformed)]).0, 2);
    let unknown = write(&d, "u.toml", &XOR.replace("\"xor\"", "\"nope\""));
    let (code, _, err) = run(&["audit", "--config", s(&unknown)]);
    assert_eq!(code, 2);
    assert!(err.contains("nope"));
    let extra = write(&d, "x.toml", &format!("{XOR}\nbogus = 1\n"));
    assert_eq!(run(&["audit", "--config", s(&extra)]).0, 2);
    assert_eq!(run(&["audit", "--config", "/nonexistent.toml"]).0, 2);
}

#[test]
fn replay_reproduces_and_detects_tampering() {
    let d = TempDir::new().unwrap();
    let cfg = write(&d, "t.toml", TIMING);
    let report = d.path().join("r.json");
    assert_eq!(run(&["audit", "--config", s(&cfg), "--out", s(&report)]).0, 1);
    assert_eq!(run(&["replay", "--config", s(&report)]).0, 1);

    let text = std::fs::read_to_string(&report).unwrap();
    // The report's own seed comes after its embedded config.
    let at = text.rfind("\"seed\": 0").unwrap();
    let tampered = write(&d, "bad.json", &format!("{}\"seed\": 1{}", &text[..at], &text[at + 9..]));
    assert_ne!(text, std::fs::read_to_string(&tampered).unwrap());
    assert_eq!(run(&["replay", "--config", s(&tampered)]).0, 3);
}

#[test]
fn sampled_reports_are_reproducible_across_thread_counts() {
    let d = TempDir::new().unwrap();
    let cfg = write(&d, "s.toml", SAMPLED);
    let a = d.path().join("a.json");
    let b = d.path().join("b.json");
    let (code, _, err) = run(&["--jobs", "1", "audit", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(run(&["--jobs", "4", "audit", "--config", s(&cfg), "--out", s(&b)]).0, 0);
    let ta = std::fs::read_to_string(&a).unwrap();
    assert_eq!(ta, std::fs::read_to_string(&b).unwrap());
    assert!(ta.contains("\"upper_bound\""));
    assert_eq!(run(&["replay", "--config", s(&a)]).0, 0);
    // Command-line overrides land in the embedded config.
    let (code, out, _) = run(&["audit", "--config", s(&cfg), "--seed", "8", "--trials", "1200"]);
    assert_eq!(code, 0);
    assert!(out.contains("\"trials\": 1200"));
    assert!(out.contains("\"seed\": 8"));
}

#[test]
fn matrix_matches_touchstone_pattern() {
    let d = TempDir::new().unwrap();
    let (code, _, err) = run(&["matrix", "--out", s(d.path())]);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(d.path().join("matrix.csv")).unwrap();
    assert_eq!(
        csv,
        "controller,control,confidentiality,ahi\n\
         bulletin,pass,fail,pass\n\
         cloud,pass,pass,pass\n\
         batch,pass,pass,fail\n\
         directory,pass,fail,not-applicable\n"
    );
    let json = std::fs::read_to_string(d.path().join("matrix.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["cells"].as_array().unwrap().len(), 12);
}
