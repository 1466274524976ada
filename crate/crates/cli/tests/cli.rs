use std::path::Path;
use std::process::{Command, Output};

fn painter(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_painter"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("run painter");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = painter(dir, args);
    assert!(
        out.status.success(),
        "painter {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn dataset_train_infer_eval_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["dataset", "synth", "--n", "6", "--size", "48", "--seed", "2", "--out", "src"]);
    let built = ok(d, &["dataset", "build", "--src", "src", "--seed", "4", "--stub-clients", "--out", "shard"]);
    assert!(built.contains("total 6"), "{built}");
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("shard/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["total"], 6);
    assert!(ok(d, &["dataset", "stats", "shard"]).contains("records"));

    ok(d, &["init", "--preset", "toy", "--seed", "1", "--out", "ck0"]);
    ok(d, &["train", "--data", "shard", "--init", "ck0", "--steps", "2", "--batch", "2", "--out", "ck1"]);
    let log = std::fs::read_to_string(d.join("ck1/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "diff", "atal", "total"] {
            assert!(v.get(key).is_some(), "missing {key} in {line}");
        }
    }
    assert!(d.join("ck1/config.json").exists());

    ok(d, &["dataset", "synth", "--bench", "--n", "3", "--size", "48", "--out", "bench"]);
    ok(
        d,
        &[
            "infer", "--ckpt", "ck1", "--image", "bench/images/syn0000.png", "--mask", "bench/masks/syn0000_eval.png",
            "--prompt", "a red ball", "--steps", "2", "--out", "out.png",
        ],
    );
    assert!(d.join("out.png").exists());

    let table = ok(d, &["eval", "--bench", "bench", "--ckpt", "ck1", "--steps", "2", "--seed", "5", "--stub-clients", "--out", "rep/metrics.json"]);
    assert!(table.contains("Gdino Acc"), "{table}");
    let a = std::fs::read_to_string(d.join("rep/metrics.json")).unwrap();
    ok(d, &["--sequential", "eval", "--bench", "bench", "--ckpt", "ck1", "--steps", "2", "--seed", "5", "--stub-clients", "--out", "rep/again.json"]);
    let b = std::fs::read_to_string(d.join("rep/again.json")).unwrap();
    assert_eq!(a, b, "metrics must not depend on scheduling");
}

#[test]
fn mask_gen_writes_superset_and_rejects_unknown_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["dataset", "synth", "--n", "1", "--size", "32", "--out", "src"]);
    let seg = "src/masks/syn0000_seg.png";
    let msg = ok(d, &["mask", "gen", "--seg", seg, "--kind", "box", "--seed", "3", "--out", "m.png"]);
    assert!(msg.starts_with("box mask"), "{msg}");
    let seg_m = painter_core::raster::BinaryMask::load_png(&d.join(seg)).unwrap();
    let m = painter_core::raster::BinaryMask::load_png(&d.join("m.png")).unwrap();
    assert!(m.contains(&seg_m));

    let bad = painter(d, &["mask", "gen", "--seg", seg, "--kind", "star", "--out", "x.png"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("star"));
}

#[test]
fn sd15_init_reports_missing_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let out = painter(tmp.path(), &["init", "--preset", "sd15-adapter", "--out", "ck"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model not loaded"));
}

#[test]
fn train_rejects_missing_data() {
    let tmp = tempfile::tempdir().unwrap();
    let out = painter(tmp.path(), &["train", "--data", "nowhere", "--out", "ck"]);
    assert!(!out.status.success());
}

#[test]
fn stub_clients_require_opt_in() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["dataset", "synth", "--n", "2", "--size", "32", "--out", "src"]);
    let out = painter(d, &["dataset", "build", "--src", "src", "--out", "shard"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--stub-clients"));
    assert!(!d.join("shard").exists());
}
