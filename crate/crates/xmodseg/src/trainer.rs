//! The training loop: data loading, logging, checkpoints, resume and
//! periodic held-out evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use xmodseg_core::losses::TermValues;
use xmodseg_core::metrics::EvalReport;
use xmodseg_core::networks::ModelBundle;
use xmodseg_core::sample::{self, ImageSample, MaskSample};
use xmodseg_core::train::{self, AnatomyParts, Batch, Domain, OptimizerState, StepRecord, TrainConfig, UpdateNorms};
use xmodseg_core::Tensor;

use crate::checkpoint;
use crate::config;
use crate::dataset::DatasetManifest;
use crate::error::{Error, IoContext, Result};
use crate::evaluate;
use crate::fsio;
use crate::inference;

pub const LOSS_LOG: &str = "losses.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const EVAL_LOG: &str = "eval.jsonl";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const CHECKPOINTS: &str = "checkpoints";
pub const LATEST: &str = "latest";

/// One line of the loss log. Wall-clock timing goes to a separate log so
/// this one is reproducible bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub lr: f64,
    pub d_loss: f64,
    /// The five weighted terms of the generator objective.
    pub losses: TermValues,
    pub ac_parts: AnatomyParts,
    pub total: f64,
    pub update_norms: UpdateNorms,
}

impl From<&StepRecord> for LogLine {
    fn from(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            lr: r.lr,
            d_loss: r.d_loss,
            losses: r.terms,
            ac_parts: r.ac_parts,
            total: r.total,
            update_norms: r.update_norms,
        }
    }
}

/// Preprocessed training and held-out data.
pub struct TrainData {
    pub a_images: Vec<Tensor<f32>>,
    pub a_masks: Vec<Tensor<f32>>,
    pub b_images: Vec<Tensor<f32>>,
    /// Labeled target cases at native resolution, for evaluation only.
    pub eval: Vec<(ImageSample, MaskSample)>,
}

impl TrainData {
    pub fn load(manifest: &DatasetManifest, size: usize) -> Result<Self> {
        let mut data = TrainData {
            a_images: Vec::new(),
            a_masks: Vec::new(),
            b_images: Vec::new(),
            eval: Vec::new(),
        };
        for (img, msk) in manifest.train_a() {
            let image = fsio::load_image(img)?;
            let mask = fsio::load_mask(msk)?;
            if (image.height, image.width) != (mask.height, mask.width) {
                return Err(Error::Invalid(format!("`{}`: image and mask shapes differ", image.id)));
            }
            data.a_images.push(sample::resize_normalize(&image, size)?.to_tensor());
            data.a_masks.push(sample::resize_mask(&mask, size)?.to_tensor());
        }
        for img in manifest.train_b() {
            data.b_images.push(sample::resize_normalize(&fsio::load_image(img)?, size)?.to_tensor());
        }
        for (img, msk) in manifest.eval_b() {
            data.eval.push((fsio::load_image(img)?, fsio::load_mask(msk)?));
        }
        if data.a_images.is_empty() || data.b_images.is_empty() {
            return Err(Error::Invalid(
                "training needs labeled domain-A images and unlabeled domain-B images".into(),
            ));
        }
        Ok(data)
    }

    /// The batch of 0-based step `step`; a pure function of seed and step.
    pub fn batch(&self, config: &TrainConfig, step: u64) -> Result<Batch<f32>> {
        let n = config.batch_size as u64;
        let (mut ia, mut ma, mut ib) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..n {
            let k = step * n + j;
            let a = train::sample_index(config.seed, Domain::A, k, self.a_images.len());
            let b = train::sample_index(config.seed, Domain::B, k, self.b_images.len());
            ia.push(self.a_images[a].clone());
            ma.push(self.a_masks[a].clone());
            ib.push(self.b_images[b].clone());
        }
        let cat = |v: Vec<Tensor<f32>>| -> Result<Tensor<f32>> {
            let parts: Vec<Tensor<f32>> = v.into_iter().map(|t| t.select0(0)).collect();
            Ok(Tensor::stack0(&parts)?)
        };
        Ok(Batch {
            image_a: cat(ia)?,
            mask_a: cat(ma)?,
            image_b: cat(ib)?,
        })
    }
}

/// Segments the held-out cases with the current segmenter.
pub fn evaluate_heldout(bundle: &ModelBundle<f32>, data: &TrainData, size: usize) -> Result<Option<EvalReport>> {
    if data.eval.is_empty() {
        return Ok(None);
    }
    let cases = data
        .eval
        .iter()
        .map(|(img, gt)| evaluate::score(&inference::segment_image(bundle, img, size)?, gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(EvalReport::aggregate(cases)?))
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoint directory, or a run directory whose latest checkpoint is used.
    pub resume: Option<PathBuf>,
    /// Resume even if the config hash differs from the checkpoint's.
    pub force: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub final_step: u64,
    pub checkpoint: PathBuf,
    pub last: Option<LogLine>,
    pub eval: Option<EvalReport>,
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join(CHECKPOINTS).join(format!("step_{step:06}"))
}

/// Resolves a run directory to its latest checkpoint.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(checkpoint::MANIFEST).is_file() {
        return Ok(path.to_path_buf());
    }
    let latest = path.join(CHECKPOINTS).join(LATEST);
    if latest.is_file() {
        let name = fs::read_to_string(&latest).at(&latest)?;
        return Ok(path.join(CHECKPOINTS).join(name.trim()));
    }
    Err(Error::Invalid(format!("{} is neither a checkpoint nor a run directory", path.display())))
}

fn save_checkpoint(out: &Path, bundle: &ModelBundle<f32>, optim: &OptimizerState<f32>, config: &TrainConfig, step: u64) -> Result<PathBuf> {
    let dir = checkpoint_dir(out, step);
    checkpoint::save(&dir, bundle, optim, config, step)?;
    let name = dir.file_name().expect("named").to_string_lossy().into_owned();
    fsio::write_atomic(&out.join(CHECKPOINTS).join(LATEST), name.as_bytes())?;
    Ok(dir)
}

/// Keeps the log lines of steps `<= step`; later lines belong to a run
/// being replaced by the resumed one.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.is_file() {
        return Ok(());
    }
    let text = fs::read_to_string(path).at(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::format(path, e))?;
        if v["step"].as_u64().is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fsio::write_atomic(path, kept.as_bytes())
}

fn append_line(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).at(path)?;
    let line = serde_json::to_string(value).expect("log line serializes");
    writeln!(f, "{line}").at(path)
}

fn write_eval_snapshot(out: &Path, step: u64, report: &EvalReport) -> Result<()> {
    evaluate::write_report(report, &out.join("eval").join(format!("step_{step:06}")))?;
    let asd = report.asd.map(|s| s.mean);
    append_line(
        &out.join(EVAL_LOG),
        &serde_json::json!({
            "step": step,
            "dsc_mean": report.dsc.mean,
            "dsc_median": report.dsc.median,
            "asd_mean": asd,
            "cases": report.cases.len(),
        }),
    )
}

/// Trains from scratch or from `opts.resume` up to `config.steps`.
pub fn train(config: &TrainConfig, manifest: &DatasetManifest, out: &Path, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(out).at(out)?;
    fsio::write_atomic(&out.join(RESOLVED_CONFIG), config::to_toml(config).as_bytes())?;

    let (mut bundle, mut optim, start) = match &opts.resume {
        Some(path) => {
            let dir = resolve_checkpoint(path)?;
            let ck = checkpoint::load(&dir, true)?;
            let hash = config::config_hash(config);
            if ck.manifest.config_hash != hash {
                if !opts.force {
                    return Err(Error::Invalid(format!(
                        "config hash {hash} differs from checkpoint {} ({}); pass --force to resume anyway",
                        dir.display(),
                        ck.manifest.config_hash
                    )));
                }
                if ck.manifest.architecture != config.architecture {
                    return Err(Error::Checkpoint {
                        path: dir,
                        message: "architecture differs from the config".into(),
                    });
                }
                log::warn!("resuming with a config that differs from the checkpoint's");
            }
            log::info!("resuming from {} at step {}", dir.display(), ck.manifest.step);
            (ck.bundle, ck.optim.expect("requested"), ck.manifest.step)
        }
        None => {
            let bundle = ModelBundle::<f32>::init(&config.architecture, config.seed)?;
            let optim = OptimizerState::new(&bundle);
            (bundle, optim, 0)
        }
    };
    let log_path = out.join(LOSS_LOG);
    let timing_path = out.join(TIMING_LOG);
    if start == 0 {
        for p in [&log_path, &timing_path, &out.join(EVAL_LOG)] {
            if p.exists() {
                fs::remove_file(p).at(p)?;
            }
        }
    } else {
        truncate_log(&log_path, start)?;
        truncate_log(&timing_path, start)?;
        truncate_log(&out.join(EVAL_LOG), start)?;
    }

    let data = TrainData::load(manifest, config.image_size)?;
    log::info!(
        "training on {} source and {} target images ({} held-out cases), steps {}..{}",
        data.a_images.len(),
        data.b_images.len(),
        data.eval.len(),
        start + 1,
        config.steps
    );

    let mut last = None;
    let mut eval = None;
    let mut checkpoint = None;
    for step in start..config.steps {
        let t0 = Instant::now();
        let batch = data.batch(config, step)?;
        let record = train::train_step(&mut bundle, &mut optim, &batch, config, step)?;
        let line = LogLine::from(&record);
        append_line(&log_path, &line)?;
        append_line(
            &timing_path,
            &serde_json::json!({"step": record.step, "seconds": t0.elapsed().as_secs_f64()}),
        )?;
        let done = record.step;
        if done % 100 == 0 || done == config.steps {
            log::info!(
                "step {done}: d {:.4} adv {:.4} idt {:.4} seg {:.4} pct {:.4} ac {:.4}",
                line.d_loss,
                line.losses.adv,
                line.losses.idt,
                line.losses.seg,
                line.losses.pct,
                line.losses.ac
            );
        }
        let is_final = done == config.steps;
        if config.eval_every > 0 && done % config.eval_every == 0 || is_final {
            if let Some(report) = evaluate_heldout(&bundle, &data, config.image_size)? {
                log::info!("step {done}: held-out mean DSC {:.4}", report.dsc.mean);
                write_eval_snapshot(out, done, &report)?;
                eval = Some(report);
            }
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 || is_final {
            checkpoint = Some(save_checkpoint(out, &bundle, &optim, config, done)?);
        }
        last = Some(line);
    }
    let checkpoint = match checkpoint {
        Some(c) => c,
        None => save_checkpoint(out, &bundle, &optim, config, start)?,
    };
    Ok(RunSummary {
        final_step: config.steps.max(start),
        checkpoint,
        last,
        eval,
    })
}
