//! End-to-end acceptance gates. Runs as a plain binary (no libtest harness)
//! so every criterion prints exactly one line, pass or fail:
//!
//! ```text
//! [PASS] 1 gradient audit: ...
//! ```
//!
//! Criterion 8 is reported but never fails the run. Pass criterion numbers
//! as arguments to run a subset, e.g. `cargo test --test acceptance -- 2 3`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rand::Rng;
use serde_json::Value;
use tempfile::TempDir;

use xmodseg::core::anatomy::{mind_descriptor, MindParams, Neighborhood};
use xmodseg::core::autograd::Tape;
use xmodseg::core::losses::{self, AdversarialVariant};
use xmodseg::core::metrics::{self, BinaryMask};
use xmodseg::core::networks::{
    ArchitectureConfig, DiscriminatorConfig, GeneratorConfig, HeadsConfig, ModelBundle, SegmenterConfig,
};
use xmodseg::core::train::{self, Batch, TrainConfig};
use xmodseg::core::{rng, Tensor};
use xmodseg::{dataset, fsio};

// Pinned tolerances and budgets.
const GRAD_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 60.0;
const ADV_TOL: f64 = 1e-9;
const NCE_TOL: f64 = 1e-6;
const DICE_TOL: f64 = 1e-9;
const IDT_TOL: f64 = 1e-12;
const MIND_IMAGES: u64 = 100;
const MIND_TOL: f64 = 1e-5;
const MIND_SECONDS: f64 = 60.0;
const ASD_PAIRS: u64 = 200;
const ASD_TOL: f64 = 1e-9;
const ASD_SECONDS: f64 = 120.0;
const DETERMINISM_STEPS: u64 = 200;
const RESUME_AT: u64 = 100;
const DETERMINISM_SECONDS: f64 = 15.0 * 60.0;
const BENCH_SEED: u64 = 0;
const BENCH_STEPS: u64 = 2000;
const BENCH_DSC: f64 = 0.80;
const BENCH_SECONDS: f64 = 2.0 * 3600.0;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_STEPS: u64 = 800;

/// Reduced widths used for the training runs on a single CPU core; the loss
/// weights and every other setting stay at their defaults.
const BENCH_CONFIG: &str = r#"
image_size = 64
eval_every = 0
samples_per_layer = 64

[architecture.generator]
base_width = 16

[architecture.discriminator]
base_width = 16

[architecture.segmenter]
base_width = 8

[architecture.heads]
hidden = 64
out = 64
"#;

enum Verdict {
    Pass,
    Fail,
    Info,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn gate(ok: bool, detail: String) -> Outcome {
    Outcome {
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

struct Workspace {
    tmp: TempDir,
    data: Option<PathBuf>,
}

impl Workspace {
    fn path(&self) -> &Path {
        self.tmp.path()
    }

    /// The 64x64 gamma-texture phantom, 200/200/50, generated once.
    fn data(&mut self) -> Result<PathBuf> {
        if let Some(d) = &self.data {
            return Ok(d.clone());
        }
        let dir = self.path().join("phantom");
        let seed = BENCH_SEED.to_string();
        let out = cli(&[
            "synth-data", "--out", s(&dir), "--size", "64", "--n-train-a", "200", "--n-train-b", "200",
            "--n-test-b", "50", "--gap", "gamma-texture", "--seed", &seed,
        ])?;
        ensure!(out.status.success(), "synth-data failed: {}", stderr(&out));
        self.data = Some(dir.clone());
        Ok(dir)
    }

    fn config(&self, name: &str, extra: &str) -> Result<PathBuf> {
        let path = self.path().join(format!("{name}.toml"));
        fs::write(&path, format!("{extra}\n{BENCH_CONFIG}"))?;
        Ok(path)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn cli(args: &[&str]) -> Result<Output> {
    Command::new(env!("CARGO_BIN_EXE_xmodseg"))
        .args(args)
        .env("XMODSEG_LOG", "warn")
        .output()
        .context("running xmodseg")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json_result(out: &Output) -> Result<Value> {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().context("no output")?;
    let v: Value = serde_json::from_str(line)?;
    if v["ok"] != true {
        bail!("command failed: {}", v["error"]);
    }
    Ok(v["result"].clone())
}

fn train(config: &Path, data: &Path, out: &Path, extra: &[&str]) -> Result<Value> {
    let mut args = vec!["--json", "train", "--config", s(config), "--data", s(data), "--out", s(out)];
    args.extend_from_slice(extra);
    let out = cli(&args)?;
    json_result(&out).with_context(|| stderr(&out))
}

fn criterion_1() -> Result<Outcome> {
    let t0 = Instant::now();
    let tol = GRAD_TOL.to_string();
    let out = cli(&["--json", "gradcheck", "--loss", "all", "--tol", &tol])?;
    let secs = t0.elapsed().as_secs_f64();
    let v: Value = serde_json::from_str(String::from_utf8_lossy(&out.stdout).lines().last().context("no output")?)?;
    let audits = v["result"]["audits"].as_array().cloned().unwrap_or_default();
    let names: Vec<&str> = audits.iter().filter_map(|a| a["name"].as_str()).collect();
    let worst = audits.iter().filter_map(|a| a["max_rel_error"].as_f64()).fold(0.0, f64::max);
    let required = ["adv_d/log", "adv_g/log", "idt", "dice", "nce", "pct", "mind", "cc", "ac"];
    let covered = required.iter().all(|r| names.contains(r));
    Ok(gate(
        out.status.success() && covered && worst < GRAD_TOL && secs < GRAD_SECONDS,
        format!("{} audits, max rel err {worst:.2e} (< {GRAD_TOL:e}), {secs:.1}s (< {GRAD_SECONDS}s)", names.len()),
    ))
}

fn criterion_2() -> Result<Outcome> {
    let mut t = Tape::<f64>::inference();
    let half = t.constant(Tensor::zeros(&[1, 1, 6, 6]));
    let d = losses::adv_loss_d(&mut t, half, half, AdversarialVariant::Log);
    let adv_err = (t.value(d).item() - 2.0 * std::f64::consts::LN_2).abs();

    let mut nce_err = 0.0f64;
    for n in [1usize, 8, 255] {
        let v = Tensor::from_fn(&[1, 16], |i| (i as f64 * 0.37).sin());
        let a = t.constant(v.clone());
        let p = t.constant(v.clone());
        let neg = t.constant(Tensor::from_fn(&[n, 16], |i| v.data()[i % 16]));
        let l = losses::nce_term(&mut t, a, p, neg, 0.07);
        nce_err = nce_err.max((t.value(l).item() - ((n + 1) as f64).ln()).abs());
    }

    let mut dice_err = 0.0f64;
    for k in [1usize, 7, 40] {
        let prob = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        let mask = Tensor::from_fn(&[1, 1, 8, 8], |i| if i < k { 1.0 } else { 0.0 });
        dice_err = dice_err.max((losses::dice_value(&prob, &mask) - k as f64 / (k as f64 + 1.0)).abs());
    }

    let x = t.constant(Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.11).cos()));
    let shifted = t.add_const(x, 0.1);
    let idt = losses::mse(&mut t, shifted, x);
    let idt_err = (t.value(idt).item() - 0.01).abs();

    Ok(gate(
        adv_err < ADV_TOL && nce_err < NCE_TOL && dice_err < DICE_TOL && idt_err < IDT_TOL,
        format!(
            "adv {adv_err:.1e} (< {ADV_TOL:e}), nce {nce_err:.1e} (< {NCE_TOL:e}), dice {dice_err:.1e} (< {DICE_TOL:e}), idt {idt_err:.1e} (< {IDT_TOL:e})"
        ),
    ))
}

fn criterion_3() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut maxima_exact = true;
    for seed in 0..MIND_IMAGES {
        let mut r = rng::derive(seed, 0x3);
        let img = Tensor::<f64>::from_fn(&[1, 1, 32, 32], |_| r.random_range(0.0..1.0));
        for nb in [Neighborhood::Four, Neighborhood::Eight] {
            let p = MindParams { neighborhood: nb, ..MindParams::default() };
            let base = mind_descriptor(&img, &p)?;
            maxima_exact &= base.pixel_maxima().iter().all(|&m| m == 1.0);
            for a in [0.5, 2.0] {
                for b in [-10.0, 10.0] {
                    let f = mind_descriptor(&img.map(|x| a * x + b), &p)?;
                    maxima_exact &= f.pixel_maxima().iter().all(|&m| m == 1.0);
                    worst = worst.max(f.values.max_abs_diff(&base.values));
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok(gate(
        maxima_exact && worst < MIND_TOL && secs < MIND_SECONDS,
        format!(
            "{MIND_IMAGES} images, maxima exactly 1: {maxima_exact}, affine drift {worst:.1e} (< {MIND_TOL:e}), {secs:.1}s (< {MIND_SECONDS}s)"
        ),
    ))
}

/// Foreground pixels with a background 4-neighbour (outside is background).
fn edge(mask: &[bool], h: usize, w: usize) -> Vec<(f64, f64)> {
    let at = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask[r as usize * w + c as usize];
    let mut out = Vec::new();
    for r in 0..h as isize {
        for c in 0..w as isize {
            if at(r, c) && !(at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1)) {
                out.push((r as f64, c as f64));
            }
        }
    }
    out
}

fn brute_asd(p: &[bool], g: &[bool], h: usize, w: usize, sp: [f64; 2]) -> f64 {
    let (ep, eg) = (edge(p, h, w), edge(g, h, w));
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> f64 {
        from.iter()
            .map(|a| to.iter().map(|b| ((a.0 - b.0) * sp[0]).hypot((a.1 - b.1) * sp[1])).fold(f64::INFINITY, f64::min))
            .sum()
    };
    (directed(&ep, &eg) + directed(&eg, &ep)) / (ep.len() + eg.len()) as f64
}

/// I.i.d. foreground at a random density, never empty.
fn random_mask(r: &mut impl Rng, len: usize) -> Vec<bool> {
    let density = r.random_range(0.02..0.7);
    let mut m: Vec<bool> = (0..len).map(|_| r.random_bool(density)).collect();
    m[r.random_range(0..len)] = true;
    m
}

fn criterion_4() -> Result<Outcome> {
    let t0 = Instant::now();
    let (h, w) = (32, 32);
    let mut worst = 0.0f64;
    for seed in 0..ASD_PAIRS {
        let mut r = rng::derive(seed, 0x4);
        let sp = [r.random_range(0.3..3.0), r.random_range(0.3..3.0)];
        let (p, g) = (random_mask(&mut r, h * w), random_mask(&mut r, h * w));
        let fast = metrics::asd(&BinaryMask::new(h, w, p.clone())?, &BinaryMask::new(h, w, g.clone())?, sp)?
            .context("non-empty masks have an ASD")?;
        worst = worst.max((fast - brute_asd(&p, &g, h, w, sp)).abs());
    }

    let square = |r0: usize, c0: usize, side: usize| {
        BinaryMask::new(8, 8, (0..64).map(|i| (r0..r0 + side).contains(&(i / 8)) && (c0..c0 + side).contains(&(i % 8))).collect())
    };
    let a = square(0, 0, 4)?;
    let dsc_cases = [
        (metrics::dsc(&a, &a)?, 1.0),
        (metrics::dsc(&a, &square(4, 4, 4)?)?, 0.0),
        (metrics::dsc(&a, &square(2, 0, 4)?)?, 0.5),
        (metrics::dsc(&a, &square(0, 0, 2)?)?, 2.0 * 4.0 / 20.0),
    ];
    let dsc_exact = dsc_cases.iter().all(|(got, want)| got == want);
    let secs = t0.elapsed().as_secs_f64();
    Ok(gate(
        worst < ASD_TOL && dsc_exact && secs < ASD_SECONDS,
        format!(
            "{ASD_PAIRS} pairs, max |fast - brute| {worst:.1e} mm (< {ASD_TOL:e}), DSC hand cases exact: {dsc_exact}, {secs:.1}s (< {ASD_SECONDS}s)"
        ),
    ))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(String::from).collect())
}

fn criterion_5(ws: &mut Workspace) -> Result<Outcome> {
    let data = ws.data()?;
    let t0 = Instant::now();
    let extra = format!("steps = {DETERMINISM_STEPS}\ncheckpoint_every = {RESUME_AT}\nseed = 5");
    let config = ws.config("determinism", &extra)?;
    let (a, b, c) = (ws.path().join("det_a"), ws.path().join("det_b"), ws.path().join("det_c"));
    train(&config, &data, &a, &[])?;
    train(&config, &data, &b, &[])?;
    let ck = a.join(format!("checkpoints/step_{RESUME_AT:06}"));
    train(&config, &data, &c, &["--resume", s(&ck)])?;
    let secs = t0.elapsed().as_secs_f64();

    let (la, lb, lc) = (read_lines(&a.join("losses.jsonl"))?, read_lines(&b.join("losses.jsonl"))?, read_lines(&c.join("losses.jsonl"))?);
    let identical = la.len() == DETERMINISM_STEPS as usize && la == lb;
    let resumed = lc.as_slice() == &la[RESUME_AT as usize..];
    let params_equal = fs::read(a.join(format!("checkpoints/step_{DETERMINISM_STEPS:06}/params.bin")))?
        == fs::read(c.join(format!("checkpoints/step_{DETERMINISM_STEPS:06}/params.bin")))?;
    Ok(gate(
        identical && resumed && params_equal && secs < DETERMINISM_SECONDS,
        format!(
            "two {DETERMINISM_STEPS}-step runs identical: {identical}; resume at {RESUME_AT} reproduces {}..{}: {resumed} (final weights equal: {params_equal}); {secs:.0}s (< {DETERMINISM_SECONDS}s)",
            RESUME_AT + 1,
            DETERMINISM_STEPS
        ),
    ))
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        image_size: 16,
        samples_per_layer: 8,
        architecture: ArchitectureConfig {
            generator: GeneratorConfig { base_width: 4, ..Default::default() },
            discriminator: DiscriminatorConfig { base_width: 4, ..Default::default() },
            segmenter: SegmenterConfig { base_width: 2, ..Default::default() },
            heads: HeadsConfig { hidden: 8, out: 8, ..Default::default() },
        },
        ..Default::default()
    }
}

fn norm(grads: &[Option<Vec<f64>>]) -> f64 {
    grads.iter().flatten().flatten().fold(0.0, |acc, g| acc + g * g).sqrt()
}

fn criterion_6() -> Result<Outcome> {
    let cfg = toy_config();
    let bundle = ModelBundle::<f64>::init(&cfg.architecture, 0)?;
    let mut r = rng::derive(6, 0);
    let shape = [1, 1, 16, 16];
    let batch = Batch {
        image_a: Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0)),
        mask_a: Tensor::from_fn(&shape, |i| if (4..12).contains(&(i / 16)) && (4..12).contains(&(i % 16)) { 1.0 } else { 0.0 }),
        image_b: Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0)),
    };

    let mut t = Tape::new();
    let pass = train::generator_pass(&mut t, &bundle, &batch, &cfg)?;
    let d = train::discriminator_loss(&mut t, &bundle, pass.image_b, pass.adapted, cfg.adversarial)?;
    let g = t.backward(d);
    let d_on_g = norm(&g.for_store(&bundle.generator.params));
    let d_on_d = norm(&g.for_store(&bundle.discriminator.params));

    let mut t = Tape::new();
    t.freeze(&bundle.discriminator.params);
    let pass = train::generator_pass(&mut t, &bundle, &batch, &cfg)?;
    let graph = train::generator_terms(&mut t, &bundle, &pass, &cfg, &cfg.effective_weights(), &mut r)?;
    let g = t.backward(graph.terms.seg);
    let seg_on_g = norm(&g.for_store(&bundle.generator.params));

    Ok(gate(
        d_on_g == 0.0 && d_on_d > 0.0 && seg_on_g > 0.0,
        format!("16x16 toy: |dL_D/dG| = {d_on_g:e} (D itself {d_on_d:.2e}), |dL_seg/dG| = {seg_on_g:.2e} (> 0)"),
    ))
}

/// Training view of the phantom: domain A with labels and only the unlabeled
/// domain-B images. The held-out domain-B images and every domain-B label
/// stay outside it.
fn label_free_view(data: &Path, dest: &Path) -> Result<(PathBuf, usize)> {
    if dest.is_dir() {
        let held = dataset::list_stems(&data.join("domainB/labels"), fsio::MASK_EXT)?.len();
        return Ok((dest.to_path_buf(), held));
    }
    let manifest = dataset::scan_dataset(data)?;
    for sub in ["domainA/images", "domainA/labels", "domainB/images"] {
        fs::create_dir_all(dest.join(sub))?;
    }
    for (img, msk) in manifest.train_a() {
        fs::copy(img, dest.join("domainA/images").join(img.file_name().unwrap()))?;
        fs::copy(msk, dest.join("domainA/labels").join(msk.file_name().unwrap()))?;
    }
    for img in manifest.train_b() {
        fs::copy(img, dest.join("domainB/images").join(img.file_name().unwrap()))?;
    }
    Ok((dest.to_path_buf(), manifest.eval_b().count()))
}

fn criterion_7(ws: &mut Workspace) -> Result<Outcome> {
    let data = ws.data()?;
    let (train_view, held_out) = label_free_view(&data, &ws.path().join("label_free"))?;
    let view = dataset::scan_dataset(&train_view)?;
    ensure!(view.eval_b().count() == 0, "training view must hold no domain-B labels");

    let t0 = Instant::now();
    let config = ws.config("bench", &format!("steps = {BENCH_STEPS}\ncheckpoint_every = 0\nseed = {BENCH_SEED}"))?;
    let run = ws.path().join("bench_run");
    train(&config, &train_view, &run, &[])?;

    let inputs = ws.path().join("held_out_images");
    fs::create_dir_all(&inputs)?;
    for (img, _) in dataset::scan_dataset(&data)?.eval_b() {
        fs::copy(img, inputs.join(img.file_name().unwrap()))?;
    }
    let pred = ws.path().join("bench_pred");
    let out = cli(&["segment", "--ckpt", s(&run), "--input", s(&inputs), "--output", s(&pred)])?;
    ensure!(out.status.success(), "segment failed: {}", stderr(&out));
    let report_dir = ws.path().join("bench_report");
    let out = cli(&["--json", "eval", "--pred", s(&pred), "--gt", s(&data.join("domainB/labels")), "--report", s(&report_dir)])?;
    let report = json_result(&out).with_context(|| stderr(&out))?;
    let secs = t0.elapsed().as_secs_f64();
    let cases = report["cases"].as_array().map_or(0, Vec::len);
    let dsc = report["dsc"]["mean"].as_f64().context("dsc mean")?;
    let asd = report["asd"]["mean"].as_f64().unwrap_or(f64::NAN);
    Ok(gate(
        cases == held_out && held_out == 50 && dsc >= BENCH_DSC && secs < BENCH_SECONDS,
        format!(
            "{BENCH_STEPS} steps, no domain-B labels in training, {cases} held-out cases: mean DSC {dsc:.3} (>= {BENCH_DSC}), mean ASD {asd:.2} mm, {secs:.0}s (< {BENCH_SECONDS}s)"
        ),
    ))
}

fn criterion_8(ws: &mut Workspace) -> Result<Outcome> {
    let data = ws.data()?;
    let (train_view, _) = label_free_view(&data, &ws.path().join("label_free"))?;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in ABLATION_SEEDS {
        let config = ws.config(
            &format!("ablation_{seed}"),
            &format!("steps = {ABLATION_STEPS}\ncheckpoint_every = 0\nseed = {seed}"),
        )?;
        let mut dsc = [0.0; 2];
        for (k, flags) in [&[][..], &["--no-mind", "--no-cc"][..]].iter().enumerate() {
            let run = ws.path().join(format!("ablation_{seed}_{k}"));
            train(&config, &train_view, &run, flags)?;
            dsc[k] = heldout_dsc(&run, &data, ws.path())?;
        }
        if dsc[0] >= dsc[1] {
            wins += 1;
        }
        rows.push(format!("seed {seed}: +MIND+CC {:.3} vs -MIND-CC {:.3}", dsc[0], dsc[1]));
    }
    Ok(Outcome {
        verdict: Verdict::Info,
        detail: format!(
            "{ABLATION_STEPS} steps per run; +MIND+CC >= -MIND-CC in {wins}/3 seeds ({}); ordering {}",
            rows.join("; "),
            if wins >= 2 { "holds" } else { "does not hold" }
        ),
    })
}

fn heldout_dsc(run: &Path, data: &Path, scratch: &Path) -> Result<f64> {
    let inputs = scratch.join("held_out_images");
    if !inputs.is_dir() {
        fs::create_dir_all(&inputs)?;
        for (img, _) in dataset::scan_dataset(data)?.eval_b() {
            fs::copy(img, inputs.join(img.file_name().unwrap()))?;
        }
    }
    let pred = run.join("pred");
    let out = cli(&["segment", "--ckpt", s(run), "--input", s(&inputs), "--output", s(&pred)])?;
    ensure!(out.status.success(), "segment failed: {}", stderr(&out));
    let out = cli(&["--json", "eval", "--pred", s(&pred), "--gt", s(&data.join("domainB/labels")), "--report", s(&run.join("report"))])?;
    let report = json_result(&out).with_context(|| stderr(&out))?;
    report["dsc"]["mean"].as_f64().context("dsc mean")
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut ws = Workspace {
        tmp: TempDir::new().expect("temp dir"),
        data: None,
    };
    type Check = fn(&mut Workspace) -> Result<Outcome>;
    let criteria: [(u32, &str, Check); 8] = [
        (1, "gradient audit", |_| criterion_1()),
        (2, "analytic loss oracles", |_| criterion_2()),
        (3, "MIND properties", |_| criterion_3()),
        (4, "metric oracle equivalence", |_| criterion_4()),
        (5, "determinism and resume", criterion_5),
        (6, "gradient-flow contracts", |_| criterion_6()),
        (7, "phantom benchmark", criterion_7),
        (8, "ablation direction (reported)", criterion_8),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted(n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = check(&mut ws).unwrap_or_else(|e| gate(false, format!("error: {e:#}")));
        let tag = match outcome.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Info => "INFO",
        };
        println!("[{tag}] {n} {name}: {} [{:.1}s]", outcome.detail, t0.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
