use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use moeshare::consolidate::consolidate;
use moeshare::engine::{dedicated_forward, RequestSpec};
use moeshare::model::{load_checkpoint, save_checkpoint, ModelId};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moeshare"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn moeshare")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_models_writes_loadable_deterministic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "one.json", r#"{"n_variants": 1}"#);
    let stdout = ok(d, &["--config", "one.json", "--out", "a", "gen-models"]);
    assert!(stdout.contains("expert params per expert: 6144"), "{stdout}");
    let mut files: Vec<_> = std::fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 2);
    for f in &files {
        let m = load_checkpoint(f).unwrap();
        assert_eq!(f.file_stem().unwrap().to_str().unwrap(), m.id.as_str());
    }
    ok(d, &["--config", "one.json", "--out", "b", "gen-models"]);
    for f in &files {
        assert_eq!(read(f), read(d.join("b").join(f.file_name().unwrap())));
    }
    ok(d, &["--config", "one.json", "--seed", "5", "--out", "c", "gen-models"]);
    assert!(d.join("c/base-5.moec").exists());
}

fn models(d: &Path) -> (PathBuf, PathBuf) {
    ok(d, &["--out", "m", "gen-models"]);
    (d.join("m/base-0-v1.moec"), d.join("m/base-0-v2.moec"))
}

#[test]
fn distances_shape_zero_and_depth_trend() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (a, b) = models(d);
    let (a, b) = (a.to_str().unwrap(), b.to_str().unwrap());
    ok(d, &["--out", "o", "distances", a, a, "--file", "same.csv"]);
    let text = String::from_utf8(read(d.join("o/same.csv"))).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 4);
    assert_eq!(lines[0].split(',').count(), 1 + 8);
    for line in &lines[1..] {
        assert!(line.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0), "{line}");
    }

    ok(d, &["--out", "o", "distances", a, b]);
    let text = String::from_utf8(read(d.join("o/distances.csv"))).unwrap();
    let means: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| {
            let v: Vec<f64> = l.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
}

#[test]
fn build_map_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (a, b) = models(d);
    let (sa, sb) = (a.to_str().unwrap(), b.to_str().unwrap());

    ok(d, &["--out", "o", "build-map", sa, sb, "--capacity", "0", "--file", "empty.json"]);
    let v: serde_json::Value = serde_json::from_slice(&read(d.join("o/empty.json"))).unwrap();
    assert_eq!(v["assignments"], serde_json::json!([]));

    let stdout = ok(d, &["--out", "o", "build-map", sa, sb]);
    assert!(stdout.contains("per-model counts [16, 16]"), "{stdout}");
    let (ma, mb) = (load_checkpoint(&a).unwrap(), load_checkpoint(&b).unwrap());
    let (_, map) = consolidate(&[&ma, &mb], 32).unwrap();
    assert_eq!(read(d.join("o/expert_map.json")), map.to_json().unwrap().into_bytes());
}

#[test]
fn infer_with_empty_map_matches_dedicated() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (a, b) = models(d);
    std::fs::create_dir(d.join("store")).unwrap();
    std::fs::copy(&a, d.join("store/a.moec")).unwrap();
    std::fs::copy(&b, d.join("store/b.moec")).unwrap();
    ok(d, &["--out", "o", "build-map", a.to_str().unwrap(), b.to_str().unwrap(), "--capacity", "0"]);
    let args = ["--out", "o", "infer", "--map", "o/expert_map.json", "--store", "store", "--target", "base-0-v2"];
    let shared = ok(d, &[&args[..], &["--prompt", "4,8,15,16", "-n", "6"]].concat());
    let alone = ok(d, &[&args[..], &["--prompt", "4,8,15,16", "-n", "6", "--dedicated"]].concat());
    let tokens = |s: &str| s.lines().find(|l| l.starts_with("tokens:")).unwrap().to_string();
    assert_eq!(tokens(&shared), tokens(&alone));
    assert!(shared.contains("hits 0 misses 80"), "{shared}");

    let req = RequestSpec {
        target: ModelId::from("base-0-v2"),
        prompt: vec![4, 8, 15, 16],
        max_new_tokens: 6,
        eos_token: u32::MAX,
    };
    let want = dedicated_forward(&load_checkpoint(&b).unwrap(), &req).unwrap();
    let want: Vec<String> = want.tokens.iter().map(u32::to_string).collect();
    assert_eq!(tokens(&shared), format!("tokens: {}", want.join(" ")));
    assert!(d.join("o/infer_trace.csv").exists() && d.join("o/infer_summary.csv").exists());
}

#[test]
fn compare_identical_models_match_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (a, _) = models(d);
    std::fs::create_dir(d.join("store")).unwrap();
    let mut m = load_checkpoint(&a).unwrap();
    save_checkpoint(&m, &d.join("store/a.moec")).unwrap();
    m.id = ModelId::from("copy");
    save_checkpoint(&m, &d.join("store/b.moec")).unwrap();
    write(d, "c.json", r#"{"compare": {"variant_counts": [2], "n_prompts": 4, "max_new_tokens": 5}}"#);
    ok(d, &["--config", "c.json", "--out", "o", "compare", "--store", "store"]);
    let text = String::from_utf8(read(d.join("o/compare.csv"))).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[2].parse::<f64>().unwrap(), 1.0, "{r}");
    }
}

#[test]
fn compare_synthetic_orders_methods() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "c.json", r#"{"compare": {"n_prompts": 20, "n_bases": 2}}"#);
    ok(d, &["--config", "c.json", "--out", "o", "compare"]);
    let text = String::from_utf8(read(d.join("o/compare.csv"))).unwrap();
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 6);
    for pair in rows.chunks(2) {
        assert_eq!((pair[0][1].as_str(), pair[1][1].as_str()), ("proposed", "average"));
        let (p, a): (f64, f64) = (pair[0][2].parse().unwrap(), pair[1][2].parse().unwrap());
        assert!(p >= a, "{pair:?}");
    }
}

#[test]
fn calibrate_reports_hit_probability() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(d, &["--out", "o", "calibrate"]);
    assert!(stdout.starts_with("hit_prob "), "{stdout}");
    let v: serde_json::Value = serde_json::from_slice(&read(d.join("o/calibration.json"))).unwrap();
    let h = v["hit_prob"].as_f64().unwrap();
    assert!((h - 0.87).abs() <= 0.02, "{h}");
}

#[test]
fn sweep_default_grid_ridge_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--out", "o", "sweep"]);
    let v: serde_json::Value = serde_json::from_slice(&read(d.join("o/ridges.json"))).unwrap();
    let ridge = |k: &str| v[k].as_f64().unwrap();
    assert!((ridge("proposed") - 0.06).abs() <= 0.01 + 1e-9);
    assert!((ridge("single_baseline") - 0.06).abs() <= 0.01 + 1e-9);
    assert!((ridge("mig_split") - 0.04).abs() <= 0.01 + 1e-9);
    assert!(ridge("mig_split") < ridge("proposed"));
    let csv = String::from_utf8(read(d.join("o/sweep.csv"))).unwrap();
    // 4 strategies x 9 rates x 5 seeds, plus 36 mean rows and a header.
    assert_eq!(csv.lines().count(), 180 + 36 + 1);
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "3", "--out", "a", "simulate"]);
    ok(d, &["--seed", "3", "--out", "b", "simulate"]);
    ok(d, &["--seed", "4", "--out", "c", "simulate"]);
    for f in ["simulate.csv", "simulate.json", "events_proposed.csv", "events_mig_split.csv"] {
        assert_eq!(read(d.join("a").join(f)), read(d.join("b").join(f)), "{f}");
    }
    assert_ne!(read(d.join("a/events_proposed.csv")), read(d.join("c/events_proposed.csv")));
}

#[test]
fn simulate_functional_mode() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        d,
        "f.json",
        r#"{"service": "functional", "strategies": ["proposed", "mig_split"], "workload": {"rates_per_s": [0.05, 0.05], "duration_s": 400}}"#,
    );
    let stdout = ok(d, &["--config", "f.json", "--out", "o", "simulate"]);
    assert!(stdout.contains("proposed:") && stdout.contains("mig_split:"), "{stdout}");
    let text = String::from_utf8(read(d.join("o/events_proposed.csv"))).unwrap();
    assert!(text.contains("base-0-v1") && text.contains("base-0-v2"));

    write(d, "g.json", r#"{"service": "functional", "workload": {"rates_per_s": [0.05]}}"#);
    assert_eq!(run(d, &["--config", "g.json", "simulate"]).status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "unknown.json", r#"{"sweeep": {}}"#);
    write(d, "broken.json", "{");
    write(d, "invalid.json", r#"{"capacity": 1000}"#);
    for cfg in ["unknown.json", "broken.json", "invalid.json", "absent.json"] {
        assert_eq!(run(d, &["--config", cfg, "calibrate"]).status.code(), Some(2), "{cfg}");
    }
    assert_eq!(run(d, &["no-such-command"]).status.code(), Some(2));

    let (a, _) = models(d);
    let a = a.to_str().unwrap();
    assert_eq!(run(d, &["distances", a, "missing.moec"]).status.code(), Some(3));
    write(d, "junk.moec", "not a checkpoint");
    assert_eq!(run(d, &["distances", a, "junk.moec"]).status.code(), Some(4));

    std::fs::create_dir(d.join("store")).unwrap();
    std::fs::copy(a, d.join("store/a.moec")).unwrap();
    ok(d, &["--out", "o", "build-map", a, a, "--capacity", "0"]);
    let infer = |target: &str| {
        run(d, &["--out", "o", "infer", "--map", "o/expert_map.json", "--store", "store", "--target", target, "--prompt", "1"])
    };
    assert_eq!(infer("nobody").status.code(), Some(4));
    assert!(infer("base-0-v1").status.success());
    let stale = run(d, &["--out", "o", "infer", "--map", "o/none.json", "--store", "store", "--target", "base-0-v1", "--prompt", "1"]);
    assert_eq!(stale.status.code(), Some(3));
}
