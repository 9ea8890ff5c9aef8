use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn dopra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dopra"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_decode_happy_path() {
    let out = dopra(&[
        "decode",
        "--toy-seed",
        "1",
        "--strategy",
        "dopra",
        "--max-new",
        "32",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert_eq!(v["strategy"], "dopra");
    assert_eq!(v["tokens"].as_array().unwrap().len(), 32);
    assert!(v["log"].as_array().is_some_and(|l| !l.is_empty()));
}

#[test]
fn decode_is_idempotent() {
    let args = [
        "decode",
        "--toy-seed",
        "2",
        "--max-new",
        "12",
        "--nbeam",
        "3",
    ];
    let a = dopra(&args);
    let b = dopra(&args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn invalid_settings_exit_1() {
    let out = dopra(&["decode", "--toy-seed", "1", "--r", "15", "--l", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(dopra(&["decode", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(dopra(&["decode"]).status.code(), Some(1));
}

#[test]
fn missing_input_exits_2() {
    let out = dopra(&["decode", "--trace", "/nonexistent/trace.dprt"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dopra(&["pope", "--records", "/nonexistent/pope.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_defaults() {
    for sub in [
        "decode", "inspect", "gen", "sweep", "chair", "pope", "heatmap",
    ] {
        let out = dopra(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8_lossy(&out.stdout);
        for needle in [
            "alpha=1", "beta=5", "r=15", "sigma=50", "n_can=5", "layer=12", "k=16",
        ] {
            assert!(text.contains(needle), "{sub} help lacks {needle}");
        }
    }
}

#[test]
fn chair_fixture_scores() {
    let out = dopra(&[
        "chair",
        "--records",
        path(&fixture("captions.jsonl")),
        "--lexicon",
        path(&fixture("objects.txt")),
        "--pope",
        path(&fixture("pope.jsonl")),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert!((v["c_s"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!((v["c_i"].as_f64().unwrap() - 0.6).abs() < 1e-12);
    assert!(v["table"].as_str().unwrap().contains("C_S"));
    let again = dopra(&[
        "chair",
        "--records",
        path(&fixture("captions.jsonl")),
        "--lexicon",
        path(&fixture("objects.txt")),
        "--pope",
        path(&fixture("pope.jsonl")),
    ]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn pope_fixture_scores() {
    let out = dopra(&["pope", "--records", path(&fixture("pope.jsonl"))]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert!((v["mean_f1"].as_f64().unwrap() - 0.65).abs() < 1e-12);
}

#[test]
fn gen_inspect_and_replay_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("small.dprt");
    let out = dopra(&[
        "gen",
        "--scenario",
        path(&fixture("scenario_small.json")),
        "--out",
        path(&trace),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(json(&out)["steps"], 12);
    assert_eq!(
        std::fs::read(&trace).unwrap(),
        std::fs::read(fixture("golden.dprt")).unwrap()
    );

    let out = dopra(&["inspect", "--trace", path(&trace), "--k", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let lines: Vec<Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 12);
    assert!(lines.iter().any(|l| l["active"] == true));

    let out = dopra(&[
        "decode",
        "--trace",
        path(&trace),
        "--layer",
        "1",
        "--k",
        "3",
        "--r",
        "2",
        "--ncan",
        "3",
        "--nbeam",
        "2",
        "--max-new",
        "6",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(json(&out)["tokens"].as_array().unwrap().len(), 6);

    let out = dopra(&[
        "decode",
        "--trace",
        path(&trace),
        "--layer",
        "0",
        "--max-new",
        "6",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn recorded_trace_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("rec.dprt");
    let live = dopra(&[
        "decode",
        "--toy-seed",
        "4",
        "--max-new",
        "10",
        "--record",
        path(&trace),
    ]);
    assert_eq!(
        live.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&live.stderr)
    );
    let replay = dopra(&["decode", "--trace", path(&trace), "--max-new", "10"]);
    assert_eq!(
        replay.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&replay.stderr)
    );
    assert_eq!(live.stdout, replay.stdout);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("decode.toml");
    std::fs::write(&cfg, "strategy = \"greedy\"\nmax_new_tokens = 5\n").unwrap();
    let out = dopra(&["decode", "--toy-seed", "1", "--config", path(&cfg)]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert_eq!(v["strategy"], "greedy");
    assert_eq!(v["tokens"].as_array().unwrap().len(), 5);
    let out = dopra(&[
        "decode",
        "--toy-seed",
        "1",
        "--config",
        path(&cfg),
        "--max-new",
        "7",
    ]);
    assert_eq!(json(&out)["tokens"].as_array().unwrap().len(), 7);
}

#[test]
fn sweep_and_heatmap_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"{"strengths":[0.9],"ks":[4],"rs":[3],"seeds":2}"#).unwrap();
    let out = dopra(&["sweep", "--grid", path(&grid)]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("strength,k,r,l,seeds,trigger_rate,hit_rate,mean_delay"));
    assert_eq!(csv.lines().count(), 2);

    let q = dir.path().join("q.csv");
    let x = dir.path().join("x.csv");
    std::fs::write(&q, "1,0\n0,1\n").unwrap();
    std::fs::write(&x, "1,0\n0,1\n2,2\n0,0\n").unwrap();
    let pgm = dir.path().join("map.pgm");
    let out = dopra(&[
        "heatmap",
        "--query",
        path(&q),
        "--visual",
        path(&x),
        "--grid",
        "2x2",
        "--topk",
        "2",
        "--out",
        path(&pgm),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert_eq!(v["top"][0]["index"], 2);
    let bytes = std::fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
    assert_eq!(&bytes[bytes.len() - 4..], &[128, 128, 255, 0]);
}
