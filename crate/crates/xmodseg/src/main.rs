use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use xmodseg::core::gradcheck::{self, CheckOptions, LossKind};
use xmodseg::core::phantom::{Gap, PhantomSpec, RenderParams};
use xmodseg::inference::Mode;
use xmodseg::{checkpoint, config, dataset, evaluate, fsio, inference, synth, trainer, Error};

/// Environment variable holding the log filter (e.g. `debug`).
const LOG_ENV: &str = "XMODSEG_LOG";

#[derive(Parser)]
#[command(name = "xmodseg", version, about = "Label-free cross-modality segmentation")]
struct Cli {
    /// Print a JSON outcome on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality phantom dataset.
    SynthData(SynthArgs),
    /// Train the networks on a dataset tree.
    Train(TrainArgs),
    /// Translate source-modality images with the generator.
    Adapt(InferArgs),
    /// Segment target-modality images with the segmenter.
    Segment(InferArgs),
    /// Score predicted masks against references.
    Eval(EvalArgs),
    /// Finite-difference audit of the loss gradients.
    Gradcheck(GradcheckArgs),
    /// Convert 8/16-bit grayscale PNGs to the native image format.
    ImportPng(ImportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_train_a: usize,
    #[arg(long, default_value_t = 200)]
    n_train_b: usize,
    #[arg(long, default_value_t = 50)]
    n_test_b: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// gamma-texture, bias-field or invert-contrast.
    #[arg(long, default_value = "gamma-texture")]
    gap: Gap,
    /// Add streak artifacts to the target modality.
    #[arg(long)]
    streaks: bool,
    /// Render without noise or blur.
    #[arg(long)]
    noiseless: bool,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory or previous run directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Resume even when the config hash differs.
    #[arg(long)]
    force: bool,
    /// Override a config value, e.g. `--set weights.pct=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    no_pct: bool,
    #[arg(long)]
    no_mind: bool,
    #[arg(long)]
    no_cc: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also write PNG previews.
    #[arg(long)]
    png: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Directory for report.json, report.txt and cases.csv.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// adv, idt, dice, nce, pct, mind, cc, ac or all.
    #[arg(long, default_value = "all", value_parser = parse_loss)]
    loss: LossSelection,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: perturb the analytic gradients.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

#[derive(Args)]
struct ImportArgs {
    /// A PNG file or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Pixel spacing in mm (rows and columns).
    #[arg(long, default_value_t = 1.0)]
    spacing: f32,
}

#[derive(Clone)]
struct LossSelection(Vec<LossKind>);

fn parse_loss(s: &str) -> Result<LossSelection, String> {
    if s == "all" {
        return Ok(LossSelection(LossKind::ALL.to_vec()));
    }
    LossKind::parse(s)
        .map(|k| LossSelection(vec![k]))
        .ok_or_else(|| format!("unknown loss `{s}`"))
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.exit_code() as u8,
            error: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = error.downcast_ref::<Error>().map_or(2, |e| e.exit_code() as u8);
        Failure { code, error }
    }
}

type Outcome = Result<serde_json::Value, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let json_out = cli.json;
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Adapt(a) => infer(a, Mode::Adapt),
        Command::Segment(a) => infer(a, Mode::Segment),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::ImportPng(a) => import_png(a),
    };
    match result {
        Ok(v) => {
            if json_out {
                println!("{}", json!({"ok": true, "exit_code": 0, "result": v}));
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            if json_out {
                println!("{}", json!({"ok": false, "exit_code": f.code, "error": format!("{:#}", f.error)}));
            }
            ExitCode::from(f.code)
        }
    }
}

fn synth_data(a: SynthArgs) -> Outcome {
    let spec = PhantomSpec {
        image_size: a.size,
        n_train_a: a.n_train_a,
        n_train_b: a.n_train_b,
        n_test_b: a.n_test_b,
        seed: a.seed,
        gap: a.gap,
        artifact_streaks: a.streaks,
        render: if a.noiseless { RenderParams::noiseless() } else { RenderParams::default() },
    };
    let manifest = synth::generate_dataset(&spec, &a.out, a.force)?;
    let (na, nb) = manifest.counts();
    let (nb_train, nb_eval) = (manifest.train_b().count(), manifest.eval_b().count());
    println!(
        "wrote {}: domain A {na} labeled, domain B {nb} ({nb_train} unlabeled, {nb_eval} held out), {}x{}, gap {}",
        a.out.display(),
        spec.image_size,
        spec.image_size,
        spec.gap.name()
    );
    Ok(json!({"out": a.out, "domain_a": na, "domain_b": nb, "domain_b_eval": nb_eval}))
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg = config::resolve(a.config.as_deref(), &a.overrides)?;
    cfg.ablation.pct_off |= a.no_pct;
    cfg.ablation.mind_off |= a.no_mind;
    cfg.ablation.cc_off |= a.no_cc;
    let manifest = dataset::scan_dataset(&a.data)?;
    let started = Instant::now();
    let opts = trainer::RunOptions {
        resume: a.resume,
        force: a.force,
    };
    let summary = trainer::train(&cfg, &manifest, &a.out, &opts)?;
    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "trained to step {} in {elapsed:.1}s; checkpoint {}",
        summary.final_step,
        summary.checkpoint.display()
    );
    if let Some(r) = &summary.eval {
        print!("{}", r.to_table());
    }
    Ok(json!({
        "steps": summary.final_step,
        "checkpoint": summary.checkpoint,
        "seconds": elapsed,
        "last": summary.last,
        "eval": summary.eval,
    }))
}

fn infer(a: InferArgs, mode: Mode) -> Outcome {
    let dir = trainer::resolve_checkpoint(&a.ckpt)?;
    let ck = checkpoint::load(&dir, false)?;
    let size = ck.manifest.config.image_size;
    let written = inference::run_directory(&ck.bundle, size, mode, &a.input, &a.output, a.png)?;
    println!("wrote {} files to {}", written.len(), a.output.display());
    Ok(json!({"written": written.len(), "output": a.output}))
}

fn eval(a: EvalArgs) -> Outcome {
    let report = evaluate::evaluate_dirs(&a.pred, &a.gt)?;
    evaluate::write_report(&report, &a.report)
        .with_context(|| format!("writing report to {}", a.report.display()))?;
    print!("{}", report.to_table());
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

fn import_png(a: ImportArgs) -> Outcome {
    if !(a.spacing.is_finite() && a.spacing > 0.0) {
        return Err(Error::Invalid("--spacing must be positive".into()).into());
    }
    let written = fsio::import_png_dir(&a.input, &a.output, [a.spacing; 2])?;
    println!("converted {} images into {}", written.len(), a.output.display());
    Ok(json!({"written": written.len(), "output": a.output}))
}

fn run_gradcheck(a: GradcheckArgs) -> Outcome {
    if !(a.tol >= 0.0) {
        return Err(Error::Invalid("--tol must be non-negative".into()).into());
    }
    let opts = CheckOptions {
        corrupt: a.corrupt_gradient,
        ..CheckOptions::default()
    };
    let started = Instant::now();
    let reports = gradcheck::audit_losses(&a.loss.0, a.seed, opts);
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passes(a.tol);
        println!(
            "{:<24} max rel err {:.3e} over {:>5} entries  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.name.clone());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    println!("{} audits in {secs:.1}s, tolerance {:e}", reports.len(), a.tol);
    if failed.is_empty() {
        Ok(json!({
            "audits": reports.iter().map(|r| json!({"name": r.name, "max_rel_error": r.max_rel_error})).collect::<Vec<_>>(),
            "seconds": secs,
        }))
    } else {
        Err(Failure {
            code: 2,
            error: anyhow::anyhow!("gradient check failed for {}", failed.join(", ")),
        })
    }
}
