//! End-to-end runs of the binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axial_style::Rng;

const BIN: &str = env!("CARGO_BIN_EXE_axial-style");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ppm(dir: &Path, name: &str, w: usize, h: usize, seed: u64) -> String {
    let mut rng = Rng::new(seed);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend((0..w * h * 3).map(|_| rng.below(256) as u8));
    let path = dir.join(name);
    fs::write(&path, bytes).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &PathBuf) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn stylize_writes_frames_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let c0 = ppm(tmp.path(), "a.ppm", 24, 16, 1);
    let c1 = ppm(tmp.path(), "b.ppm", 24, 16, 2);
    let st = ppm(tmp.path(), "s.ppm", 24, 16, 3);
    let out = tmp.path().join("out");
    let r = run(&["stylize", &c0, &c1, "--style", &st, "--out", &s(&out), "--variant", "b"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["stylized_000.ppm", "stylized_001.ppm"] {
        let bytes = fs::read(out.join(f)).unwrap();
        assert!(bytes.starts_with(b"P6\n24 16\n255\n"));
        assert_eq!(bytes.len(), b"P6\n24 16\n255\n".len() + 24 * 16 * 3);
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["schema"], 1);
    for key in ["D_C", "D_S", "gram_texture_diff", "color_diff"] {
        assert!(m[key].as_f64().unwrap() >= 0.0, "{key}");
    }
    assert!(m["dit_flops"].as_u64().unwrap() > 0);
    assert_eq!(m["config"]["variant"], "VariantB");
}

#[test]
fn stylize_input_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let c0 = ppm(tmp.path(), "a.ppm", 16, 16, 1);
    let odd = ppm(tmp.path(), "odd.ppm", 12, 16, 2);
    let big = ppm(tmp.path(), "big.ppm", 24, 16, 3);
    let out = s(&tmp.path().join("o"));
    // a single frame cannot be split into video and image halves
    assert_eq!(code(&run(&["stylize", &c0, "--style", &c0, "--out", &out])), 2);
    assert_eq!(code(&run(&["stylize", &c0, "--style", &c0, "--out", &out, "--unimodal"])), 0);
    assert_eq!(code(&run(&["stylize", &odd, &odd, "--style", &odd, "--out", &out])), 2);
    assert_eq!(code(&run(&["stylize", &c0, &big, "--style", &c0, "--out", &out])), 2);
    assert_eq!(code(&run(&["stylize", &c0, &c0, "--style", &big, "--out", &out])), 2);
    let missing = s(&tmp.path().join("missing.ppm"));
    assert_eq!(code(&run(&["stylize", &c0, &missing, "--style", &c0, "--out", &out])), 2);
    fs::write(tmp.path().join("junk.ppm"), b"P3\n1 1\n255\n0 0 0").unwrap();
    let junk = s(&tmp.path().join("junk.ppm"));
    assert_eq!(code(&run(&["stylize", &c0, &junk, "--style", &c0, "--out", &out])), 2);
    assert_eq!(code(&run(&["stylize", &c0, &c0, "--style", &c0, "--out", &out, "--variant", "c"])), 2);
    assert_eq!(code(&run(&["stylize", &c0, &c0, "--style", &c0, "--out", &out, "--heads", "3"])), 2);
}

#[test]
fn stylize_reloads_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let train = tmp.path().join("train");
    let r = run(&["traincheck", "--steps", "2", "--out", &s(&train)]);
    // two steps cannot halve the loss, so the check itself fails
    assert_eq!(code(&r), 1, "{}", String::from_utf8_lossy(&r.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(train.join("traincheck.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], false);
    assert_eq!(summary["encoder_unchanged"], true);
    assert_eq!(fs::read_to_string(train.join("loss_curve.csv")).unwrap().lines().count(), 3);

    let c0 = ppm(tmp.path(), "a.ppm", 16, 16, 1);
    let ck = s(&train.join("checkpoint.udit"));
    let out = s(&tmp.path().join("o"));
    assert_eq!(code(&run(&["stylize", &c0, &c0, "--style", &c0, "--checkpoint", &ck, "--out", &out])), 0);
    fs::write(tmp.path().join("bad.udit"), b"UDIT").unwrap();
    let bad = s(&tmp.path().join("bad.udit"));
    assert_eq!(code(&run(&["stylize", &c0, &c0, "--style", &c0, "--checkpoint", &bad, "--out", &out])), 2);
}

#[test]
fn bench_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let r = run(&["bench", "--grid", "8,16x8", "--paper-row", "--out", &s(&out)]);
    assert_eq!(code(&r), 0);
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert!(stdout.contains("paper: 4.29G / 0.27G"));
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let dit: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("dit_cost.json")).unwrap()).unwrap();
    let total = dit["total_flops"].as_u64().unwrap();
    let without = dit["total_flops_without_interaction"].as_u64().unwrap();
    assert_eq!(total - without, dit["interaction_closed_form"].as_u64().unwrap());
    let bench: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("bench.json")).unwrap()).unwrap();
    assert!(bench.is_array() || bench.is_object());

    assert_eq!(code(&run(&["bench", "--grid", "8x"])), 2);
    assert_eq!(code(&run(&["bench", "--embed-dim", "10", "--heads", "3"])), 2);
}

#[test]
fn verify_runs_cheap_suites() {
    let r = run(&["verify", "losses", "flops", "interaction"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stdout));
    let stdout = String::from_utf8_lossy(&r.stdout);
    for suite in ["losses: PASS", "flops: PASS", "interaction: PASS"] {
        assert!(stdout.contains(suite), "{stdout}");
    }
    assert_eq!(code(&run(&["verify", "nonsense"])), 2);
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["stylize"])), 2);
}
