use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use xmodseg::fsio;

const TINY: &str = r#"
image_size = 16
steps = 6
checkpoint_every = 3
eval_every = 3
samples_per_layer = 8

[architecture.generator]
base_width = 4

[architecture.discriminator]
base_width = 4

[architecture.segmenter]
base_width = 2

[architecture.heads]
hidden = 8
out = 8
"#;

fn xmodseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmodseg"))
        .args(args)
        .env("XMODSEG_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json_result(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().expect("json line");
    serde_json::from_str(line).expect("valid json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    let out = xmodseg(&[
        "synth-data", "--out", s(dir), "--size", "32", "--n-train-a", "6", "--n-train-b", "6", "--n-test-b", "3",
        "--seed", "3",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

struct Run {
    _tmp: TempDir,
    data: PathBuf,
    run: PathBuf,
    config: PathBuf,
}

fn trained() -> Run {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let config = tmp.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let run = tmp.path().join("run");
    let out = xmodseg(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    Run { _tmp: tmp, data, run, config }
}

fn log_steps(path: &Path) -> Vec<u64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect()
}

fn stems(dir: &Path, ext: &str) -> Vec<String> {
    xmodseg::dataset::list_stems(dir, ext).unwrap().into_keys().collect()
}

#[test]
fn synth_reports_counts_and_held_out_split() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("d");
    let out = xmodseg(&[
        "--json", "synth-data", "--out", s(&out_dir), "--size", "32", "--n-train-a", "16", "--n-train-b", "16",
        "--n-test-b", "8", "--seed", "7",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = json_result(&out);
    assert_eq!(v["ok"], true);
    assert_eq!(v["result"]["domain_a"], 16);
    assert_eq!(v["result"]["domain_b"], 24);
    assert_eq!(v["result"]["domain_b_eval"], 8);
    assert!(out_dir.join("provenance.json").is_file());
}

#[test]
fn synth_usage_and_overwrite_errors() {
    assert_eq!(code(&xmodseg(&["synth-data"])), 1);
    assert_eq!(code(&xmodseg(&["synth-data", "--out", "x", "--gap", "sideways"])), 1);

    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("keep.txt"), "mine").unwrap();
    let out = xmodseg(&["synth-data", "--out", s(tmp.path()), "--size", "32", "--n-train-a", "2", "--n-train-b", "2", "--n-test-b", "1"]);
    assert_eq!(code(&out), 1);
    assert!(tmp.path().join("keep.txt").is_file());
    let out = xmodseg(&[
        "synth-data", "--out", s(tmp.path()), "--size", "32", "--n-train-a", "2", "--n-train-b", "2", "--n-test-b", "1",
        "--force",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn help_and_unknown_commands() {
    assert_eq!(code(&xmodseg(&["--help"])), 0);
    assert_eq!(code(&xmodseg(&["frobnicate"])), 1);
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let out = xmodseg(&[
        "train", "--data", s(&data), "--out", s(&tmp.path().join("r")), "--set", "weights.lamda1=10",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("weights.lamda1"), "{}", stderr(&out));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "lamda1 = 10\n").unwrap();
    let out = xmodseg(&["train", "--config", s(&bad), "--data", s(&data), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("lamda1"), "{}", stderr(&out));
}

#[test]
fn training_writes_logs_checkpoints_and_resolved_config() {
    let r = trained();
    assert_eq!(log_steps(&r.run.join("losses.jsonl")), (1..=6).collect::<Vec<_>>());
    assert_eq!(log_steps(&r.run.join("eval.jsonl")), [3, 6]);
    let line: Value = serde_json::from_str(fs::read_to_string(r.run.join("losses.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    let terms = line["losses"].as_object().unwrap();
    let mut names: Vec<&str> = terms.keys().map(String::as_str).collect();
    names.sort_unstable();
    assert_eq!(names, ["ac", "adv", "idt", "pct", "seg"]);
    for step in [3, 6] {
        assert!(r.run.join(format!("checkpoints/step_{step:06}/manifest.json")).is_file());
    }
    assert_eq!(fs::read_to_string(r.run.join("checkpoints/latest")).unwrap().trim(), "step_000006");

    // The echoed config has every default spelled out and reproduces the run.
    let resolved = fs::read_to_string(r.run.join("config.resolved.toml")).unwrap();
    for key in ["temperature", "beta1", "combine", "pct_off", "eps_relative"] {
        assert!(resolved.contains(key), "{key} missing");
    }
    let again = r.run.with_file_name("again");
    let out = xmodseg(&["train", "--config", s(&r.run.join("config.resolved.toml")), "--data", s(&r.data), "--out", s(&again)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read_to_string(r.run.join("losses.jsonl")).unwrap(),
        fs::read_to_string(again.join("losses.jsonl")).unwrap()
    );
}

#[test]
fn resume_continues_the_loss_log() {
    let r = trained();
    let full = fs::read_to_string(r.run.join("losses.jsonl")).unwrap();
    let ck = r.run.join("checkpoints/step_000003");
    let out = xmodseg(&[
        "train", "--config", s(&r.config), "--data", s(&r.data), "--out", s(&r.run), "--resume", s(&ck),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(r.run.join("losses.jsonl")).unwrap(), full);

    // A changed config needs --force; a changed architecture is refused.
    let other = r.run.with_file_name("other");
    let out = xmodseg(&[
        "train", "--config", s(&r.config), "--data", s(&r.data), "--out", s(&other), "--resume", s(&ck),
        "--set", "steps=8",
    ]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    let out = xmodseg(&[
        "train", "--config", s(&r.config), "--data", s(&r.data), "--out", s(&other), "--resume", s(&ck),
        "--set", "steps=8", "--force",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(log_steps(&other.join("losses.jsonl")), [4, 5, 6, 7, 8]);
    let out = xmodseg(&[
        "train", "--config", s(&r.config), "--data", s(&r.data), "--out", s(&other), "--resume", s(&ck),
        "--set", "architecture.generator.base_width=8", "--force",
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn ablation_flags_zero_weights() {
    let r = trained();
    let out_dir = r.run.with_file_name("ablated");
    let out = xmodseg(&[
        "train", "--config", s(&r.config), "--data", s(&r.data), "--out", s(&out_dir), "--no-pct", "--no-mind",
        "--set", "steps=2", "--set", "eval_every=0",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resolved = xmodseg::config::load(&out_dir.join("config.resolved.toml")).unwrap();
    assert!(resolved.ablation.pct_off && resolved.ablation.mind_off && !resolved.ablation.cc_off);
    for l in fs::read_to_string(out_dir.join("losses.jsonl")).unwrap().lines() {
        let v: Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["update_norms"]["heads"], 0.0);
    }
}

#[test]
fn segment_adapt_and_eval() {
    let r = trained();
    let input = r.data.join("domainB/images");
    let labels = r.data.join("domainB/labels");
    let seg = r.run.with_file_name("seg");
    let out = xmodseg(&["segment", "--ckpt", s(&r.run), "--input", s(&input), "--output", s(&seg), "--png"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stems(&seg, fsio::MASK_EXT), stems(&input, fsio::IMAGE_EXT));
    let first = stems(&input, fsio::IMAGE_EXT).remove(0);
    let mask = fsio::load_mask(&seg.join(format!("{first}.msk"))).unwrap();
    let img = fsio::load_image(&input.join(format!("{first}.img"))).unwrap();
    assert_eq!((mask.height, mask.width), (img.height, img.width));
    assert!(seg.join(format!("{first}.png")).is_file());

    let adapted = r.run.with_file_name("adapted");
    let a_in = r.data.join("domainA/images");
    let out = xmodseg(&["adapt", "--ckpt", s(&r.run.join("checkpoints/step_000003")), "--input", s(&a_in), "--output", s(&adapted)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stems(&adapted, fsio::IMAGE_EXT), stems(&a_in, fsio::IMAGE_EXT));
    for stem in stems(&a_in, fsio::IMAGE_EXT) {
        let a = fsio::load_image(&adapted.join(format!("{stem}.img"))).unwrap();
        let b = fsio::load_image(&a_in.join(format!("{stem}.img"))).unwrap();
        assert_eq!((a.height, a.width), (b.height, b.width));
    }

    // Scoring the held-out predictions: only stems with a reference take part.
    let held_out = r.run.with_file_name("held_out");
    fs::create_dir_all(&held_out).unwrap();
    for stem in stems(&labels, fsio::MASK_EXT) {
        fs::copy(seg.join(format!("{stem}.msk")), held_out.join(format!("{stem}.msk"))).unwrap();
    }
    let report = r.run.with_file_name("report");
    let out = xmodseg(&["--json", "eval", "--pred", s(&held_out), "--gt", s(&labels), "--report", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(json_result(&out)["result"]["cases"].as_array().unwrap().len(), 3);

    // Unmatched stems are listed.
    let out = xmodseg(&["eval", "--pred", s(&seg), "--gt", s(&labels), "--report", s(&report)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("prediction only"), "{}", stderr(&out));
}

#[test]
fn inference_errors() {
    let r = trained();
    let empty = r.run.with_file_name("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = xmodseg(&["segment", "--ckpt", s(&r.run), "--input", s(&empty), "--output", s(&r.run.with_file_name("o"))]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));

    // A checkpoint whose weights do not match its recorded architecture.
    let ck = r.run.join("checkpoints/step_000006");
    let manifest = ck.join("manifest.json");
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    v["architecture"]["generator"]["base_width"] = 8.into();
    fs::write(&manifest, v.to_string()).unwrap();
    let out = xmodseg(&[
        "segment", "--ckpt", s(&ck), "--input", s(&r.data.join("domainB/images")), "--output", s(&r.run.with_file_name("o")),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn eval_of_identical_directories_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let labels = data.join("domainA/labels");
    let report = tmp.path().join("report");
    let out = xmodseg(&["--json", "eval", "--pred", s(&labels), "--gt", s(&labels), "--report", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = json_result(&out);
    for case in v["result"]["cases"].as_array().unwrap() {
        assert_eq!(case["dsc"], 1.0);
        assert_eq!(case["asd_mm"], 0.0);
    }
    let text = fs::read_to_string(report.join("report.txt")).unwrap();
    for row in xmodseg::core::metrics::ROW_LABELS {
        assert!(text.contains(row), "{row}");
    }
    let csv = fs::read_to_string(report.join("cases.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn gradcheck_gate() {
    let out = xmodseg(&["gradcheck", "--loss", "all"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(code(&xmodseg(&["gradcheck", "--loss", "cc", "--corrupt-gradient"])), 2);
    assert_eq!(code(&xmodseg(&["gradcheck", "--loss", "dice", "--tol", "0"])), 2);
    assert_eq!(code(&xmodseg(&["gradcheck", "--tol", "-1"])), 1);
    assert_eq!(code(&xmodseg(&["gradcheck", "--loss", "bogus"])), 1);
}

#[test]
fn png_import() {
    let tmp = TempDir::new().unwrap();
    let src = tmp.path().join("png");
    fs::create_dir_all(&src).unwrap();
    fsio::write_png_preview(&src.join("slice_01.png"), 9, 8, &[0.25; 72], 0.0, 1.0).unwrap();
    let out_dir = tmp.path().join("img");
    let out = xmodseg(&["import-png", "--input", s(&src), "--output", s(&out_dir), "--spacing", "0.65"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let img = fsio::load_image(&out_dir.join("slice_01.img")).unwrap();
    assert_eq!((img.height, img.width, img.spacing), (8, 9, [0.65, 0.65]));

    let out = xmodseg(&["import-png", "--input", s(&tmp.path().join("missing")), "--output", s(&out_dir)]);
    assert_eq!(code(&out), 1);
    let out = xmodseg(&["import-png", "--input", s(&src), "--output", s(&out_dir), "--spacing", "0"]);
    assert_eq!(code(&out), 1);
}
