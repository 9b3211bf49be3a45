//! End-to-end command tests: exit codes, output schemas, and byte-identical
//! reruns (the command-level half of the determinism criterion).

use std::path::Path;
use std::process::{Command, Output};

fn aesth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aesth"))
        .args(args)
        .env("AESTH_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn synth_small(dir: &Path, count: usize, seed: u64) {
    let out = aesth(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--min-size",
        "24",
        "--max-size",
        "56",
    ]);
    assert!(out.status.success(), "synth failed: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d1 = tmp.path().join("a");
    let d2 = tmp.path().join("b");
    synth_small(&d1, 12, 5);
    synth_small(&d2, 12, 5);
    let m1 = std::fs::read(d1.join("manifest.jsonl")).unwrap();
    let m2 = std::fs::read(d2.join("manifest.jsonl")).unwrap();
    assert_eq!(m1, m2);
    let s1 = std::fs::read(d1.join("generation-stats.json")).unwrap();
    let s2 = std::fs::read(d2.join("generation-stats.json")).unwrap();
    assert_eq!(s1, s2);
    // one of the images, byte for byte
    let i1 = std::fs::read(d1.join("images/rec_00003.ppm")).unwrap();
    let i2 = std::fs::read(d2.join("images/rec_00003.ppm")).unwrap();
    assert_eq!(i1, i2);
    assert_eq!(
        std::fs::read_dir(d1.join("images")).unwrap().count(),
        12,
        "one image per record"
    );
}

#[test]
fn synth_unwritable_path_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    // a file where a directory must go -> IO failure
    let out = aesth(&[
        "synth",
        "--out",
        blocker.join("sub").to_str().unwrap(),
        "--count",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_key_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"synth.count": 4, "synth.wibble": 1}"#).unwrap();
    let out = aesth(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth.wibble"));
}

#[test]
fn config_file_supplies_values_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"synth.count": 3, "seed": 9, "out": "{}", "synth.min-size": 24, "synth.max-size": 40}}"#,
            tmp.path().join("from-file").display()
        ),
    )
    .unwrap();
    // out comes from the file; count overridden by the flag
    let out = aesth(&["synth", "--config", cfg.to_str().unwrap(), "--count", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(tmp.path().join("from-file/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
}

fn train_small(data: &Path, run: &Path, seed: u64, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--manifest",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch-size",
        "16",
        "--canvas",
        "64",
        "--eval-every",
        "0",
    ];
    let seed_s = seed.to_string();
    args.push("--seed");
    args.push(&seed_s);
    args.extend_from_slice(extra);
    aesth(&args)
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, 32, 7);
    let manifest = data.join("manifest.jsonl");

    let run = tmp.path().join("run");
    let out = train_small(&manifest, &run, 3, &[]);
    assert!(out.status.success(), "train: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    // header + one line per epoch, variant recorded in the header
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().next().unwrap().contains("\"variant\":\"pad_roi_theme\""));

    // eval: exactly the 12 metric keys plus the two counts
    let csv = tmp.path().join("per_record.csv");
    let out = aesth(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "eval: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(stdout_str(&out).trim()).unwrap();
    let obj = report.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(|s| s.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        vec![
            "chi2",
            "cosine",
            "emd_r1",
            "emd_r2",
            "euc",
            "js",
            "kl",
            "mse_mean",
            "plcc_mean",
            "plcc_std",
            "records",
            "srcc_mean",
            "srcc_std",
            "views_per_record",
        ]
    );
    assert_eq!(obj["records"], 32);
    // CSV rows = record count (+ header)
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(csv_text.lines().count(), 1 + 32);

    // eval reruns byte-identically
    let again = aesth(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    let third = aesth(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(again.stdout, third.stdout);

    // predict on one of the dataset images
    let image = data.join("images/rec_00000.ppm");
    let out = aesth(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--theme",
        "2",
    ]);
    assert!(out.status.success(), "predict: {}", String::from_utf8_lossy(&out.stderr));
    let pred: serde_json::Value = serde_json::from_str(stdout_str(&out).trim()).unwrap();
    let probs: Vec<f64> = pred["probs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(probs.len(), 10);
    let total: f64 = probs.iter().sum();
    assert!((total - 1.0).abs() <= 1e-9);
    // deterministic rerun
    let rerun = aesth(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--theme",
        "2",
    ]);
    assert_eq!(out.stdout, rerun.stdout);
    // theme changes the output under the theme-aware checkpoint
    let other = aesth(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--theme",
        "3",
    ]);
    assert_ne!(out.stdout, other.stdout);
}

#[test]
fn train_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, 24, 13);
    let manifest = data.join("manifest.jsonl");
    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    assert!(train_small(&manifest, &r1, 5, &[]).status.success());
    assert!(train_small(&manifest, &r2, 5, &[]).status.success());
    assert_eq!(
        std::fs::read(r1.join("train_log.jsonl")).unwrap(),
        std::fs::read(r2.join("train_log.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(r1.join("checkpoint.bin")).unwrap(),
        std::fs::read(r2.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn theme_blind_checkpoint_ignores_theme_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, 24, 17);
    let manifest = data.join("manifest.jsonl");
    let run = tmp.path().join("run");
    assert!(train_small(&manifest, &run, 4, &["--variant", "pad_roi"]).status.success());
    let ckpt = run.join("checkpoint.bin");
    let image = data.join("images/rec_00001.ppm");
    let a = aesth(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--theme",
        "0",
    ]);
    let b = aesth(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--theme",
        "3",
    ]);
    assert!(a.status.success() && b.status.success());
    let pa: serde_json::Value = serde_json::from_str(stdout_str(&a).trim()).unwrap();
    let pb: serde_json::Value = serde_json::from_str(stdout_str(&b).trim()).unwrap();
    assert_eq!(pa["probs"], pb["probs"], "pad_roi predictions must be theme-blind");
}

#[test]
fn eval_variant_mismatch_exits_4_and_canvas_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, 20, 23);
    let manifest = data.join("manifest.jsonl");
    let run = tmp.path().join("run");
    assert!(train_small(&manifest, &run, 2, &[]).status.success());
    let ckpt = run.join("checkpoint.bin");

    let out = aesth(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--variant",
        "resize",
    ]);
    assert_eq!(out.status.code(), Some(4));

    // canvas override is legal for the padded variants
    let out = aesth(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--canvas",
        "96",
    ]);
    assert!(out.status.success());

    // ... and rejected for resize-family checkpoints
    let run2 = tmp.path().join("run2");
    assert!(train_small(&manifest, &run2, 2, &["--variant", "resize"]).status.success());
    let out = aesth(&[
        "eval",
        "--checkpoint",
        run2.join("checkpoint.bin").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--canvas",
        "96",
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn predict_oversized_image_exits_5_and_canvas_override_recovers() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, 20, 29);
    let manifest = data.join("manifest.jsonl");
    let run = tmp.path().join("run");
    assert!(train_small(&manifest, &run, 6, &[]).status.success());
    let ckpt = run.join("checkpoint.bin");

    // an image larger than the 64-pixel training canvas
    let big = tmp.path().join("big");
    synth_small(&big, 1, 31);
    let big_dir = tmp.path().join("bigger");
    let out = aesth(&[
        "synth",
        "--out",
        big_dir.to_str().unwrap(),
        "--count",
        "1",
        "--seed",
        "31",
        "--min-size",
        "80",
        "--max-size",
        "90",
    ]);
    assert!(out.status.success());
    let image = big_dir.join("images/rec_00000.ppm");

    let out = aesth(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("--canvas"),
        "error must suggest --canvas"
    );

    let out = aesth(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--canvas",
        "128",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_numeric_abort_exits_3_with_partial_log() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, 24, 37);
    let run = tmp.path().join("run");
    let out = train_small(&data.join("manifest.jsonl"), &run, 1, &["--lr", "1e150"]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    // the log file survives with at least the header
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert!(log.lines().next().unwrap().contains("\"config\""));
}

#[test]
fn verify_scoped_run_passes_and_mutation_is_caught() {
    let out = aesth(&["verify", "--scope", "metrics"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout_str(&out);
    assert!(text.lines().filter(|l| l.starts_with("PASS ")).count() >= 5);
    assert!(!text.contains("FAIL"));

    let out = aesth(&["verify", "--scope", "roi", "--mutate", "roi-bin-overreach"]);
    assert_eq!(out.status.code(), Some(1), "mutated pooling must fail verification");
    assert!(stdout_str(&out).contains("FAIL roi/isolation-bit-identical"));
}

#[test]
fn verify_full_suite_lists_at_least_20_properties() {
    let out = aesth(&["verify"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout_str(&out);
    let passes = text.lines().filter(|l| l.starts_with("PASS ")).count();
    assert!(passes >= 20, "only {passes} properties listed");
    assert!(text.contains("0 failed"));
}

#[test]
fn ablate_writes_report_with_five_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth_small(&data, 40, 41);
    let out_dir = tmp.path().join("ablate");
    let out = aesth(&[
        "ablate",
        "--manifest",
        data.join("manifest.jsonl").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--epochs",
        "1",
        "--seeds",
        "1",
        "--canvas",
        "64",
        "--quiet",
    ]);
    assert!(out.status.success(), "ablate: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("ablation.json")).unwrap())
            .unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    for row in rows {
        let m = row["mean"].as_object().unwrap();
        for key in ["srcc_mean", "srcc_std", "emd_r1", "kl"] {
            assert!(m.contains_key(key), "missing column {key}");
        }
    }
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert!(csv.starts_with("variant,seed,srcc_mean,srcc_std,emd_r1,kl"));
    // stdout mirrors the JSON report and reruns byte-identically
    let rerun = aesth(&[
        "ablate",
        "--manifest",
        data.join("manifest.jsonl").to_str().unwrap(),
        "--out",
        tmp.path().join("ablate2").to_str().unwrap(),
        "--epochs",
        "1",
        "--seeds",
        "1",
        "--canvas",
        "64",
        "--quiet",
    ]);
    assert_eq!(out.stdout, rerun.stdout);
}
