//! One optimization step of the joint objective, and the inference paths.
//!
//! Each step first updates the discriminator on real target images against
//! detached adapted images, then updates the generator, segmenter and
//! projection heads together on the weighted sum of the five terms, with
//! the freshly updated discriminator held fixed.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::anatomy::{self, MindParams};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{self, AdversarialVariant, LossTerms, LossWeights, PctPlan, TermValues};
use crate::networks::{ArchitectureConfig, ModelBundle};
use crate::optim::{scheduled_lr, AdamConfig, AdamState};
use crate::rng::{self, stream};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Ablation switches; each only zeroes its weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub pct_off: bool,
    pub mind_off: bool,
    pub cc_off: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
    pub steps: u64,
    /// Checkpoint cadence in steps (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
    /// Held-out evaluation cadence in steps (0 disables).
    pub eval_every: u64,
    /// Contrastive locations drawn per tapped layer.
    pub samples_per_layer: usize,
    pub adversarial: AdversarialVariant,
    pub weights: LossWeights,
    pub mind: MindParams,
    pub optimizer: AdamConfig,
    pub ablation: Ablation,
    pub architecture: ArchitectureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            batch_size: 1,
            steps: 20_000,
            checkpoint_every: 1_000,
            eval_every: 1_000,
            samples_per_layer: 256,
            adversarial: AdversarialVariant::Log,
            weights: LossWeights::default(),
            mind: MindParams::default(),
            optimizer: AdamConfig::default(),
            ablation: Ablation::default(),
            architecture: ArchitectureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("training needs at least one step".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.image_size < crate::sample::MIN_SIDE {
            return Err(Error::InvalidArgument(alloc::format!(
                "image size {} is below {}",
                self.image_size,
                crate::sample::MIN_SIDE
            )));
        }
        if self.samples_per_layer < 2 {
            return Err(Error::InvalidArgument(
                "the contrastive loss needs at least 2 locations per layer".into(),
            ));
        }
        let w = &self.weights;
        let all = [w.adv, w.idt, w.seg, w.pct, w.ac, w.cc, w.mind];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        if !(w.temperature > 0.0 && w.temperature.is_finite()) {
            return Err(Error::InvalidArgument("the NCE temperature must be positive".into()));
        }
        self.mind.validate()?;
        self.optimizer.validate()?;
        self.architecture.validate()
    }

    /// Weights after applying the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablation.pct_off {
            w.pct = 0.0;
        }
        if self.ablation.mind_off {
            w.mind = 0.0;
        }
        if self.ablation.cc_off {
            w.cc = 0.0;
        }
        w
    }

    pub fn pct_plan(&self) -> PctPlan {
        PctPlan {
            taps: self.architecture.heads.taps.clone(),
            samples_per_layer: self.samples_per_layer,
            temperature: self.weights.temperature,
        }
    }
}

/// One mini-batch: labeled source images and unlabeled target images, each
/// `[n, 1, h, w]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub image_a: Tensor<T>,
    pub mask_a: Tensor<T>,
    pub image_b: Tensor<T>,
}

/// Adam state for the four parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub generator: AdamState<T>,
    pub discriminator: AdamState<T>,
    pub segmenter: AdamState<T>,
    pub heads: AdamState<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(bundle: &ModelBundle<T>) -> Self {
        Self {
            generator: AdamState::new(&bundle.generator.params),
            discriminator: AdamState::new(&bundle.discriminator.params),
            segmenter: AdamState::new(&bundle.segmenter.params),
            heads: AdamState::new(&bundle.heads.params),
        }
    }

    pub fn groups(&self) -> [(&'static str, &AdamState<T>); 4] {
        [
            ("generator", &self.generator),
            ("discriminator", &self.discriminator),
            ("segmenter", &self.segmenter),
            ("heads", &self.heads),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut AdamState<T>); 4] {
        [
            ("generator", &mut self.generator),
            ("discriminator", &mut self.discriminator),
            ("segmenter", &mut self.segmenter),
            ("heads", &mut self.heads),
        ]
    }
}

/// Norm of the parameter update applied to each group in one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateNorms {
    pub generator: f64,
    pub discriminator: f64,
    pub segmenter: f64,
    pub heads: f64,
}

/// The anatomy-constraint term split into its parts (unweighted).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnatomyParts {
    pub cc: f64,
    pub mind: f64,
}

/// Outcome of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    pub d_loss: f64,
    pub terms: TermValues,
    pub ac_parts: AnatomyParts,
    pub total: f64,
    pub update_norms: UpdateNorms,
}

/// Discriminator objective on real target images and detached adapted
/// images; nothing upstream of `adapted` receives gradient.
pub fn discriminator_loss<T: Real>(
    tape: &mut Tape<T>,
    bundle: &ModelBundle<T>,
    real_b: Var,
    adapted: Var,
    variant: AdversarialVariant,
) -> Result<Var> {
    let fake = tape.detach(adapted);
    let lr = bundle.discriminator.forward(tape, real_b)?;
    let lf = bundle.discriminator.forward(tape, fake)?;
    Ok(losses::adv_loss_d(tape, lr, lf, variant))
}

/// Inputs and generator outputs recorded on the joint-update tape.
#[derive(Clone, Debug)]
pub struct GeneratorPass {
    pub image_a: Var,
    pub mask_a: Var,
    pub image_b: Var,
    pub adapted: Var,
    pub taps: Vec<Var>,
}

/// Records `G(image_a)` with the contrastive taps on `tape`.
pub fn generator_pass<T: Real>(
    tape: &mut Tape<T>,
    bundle: &ModelBundle<T>,
    batch: &Batch<T>,
    config: &TrainConfig,
) -> Result<GeneratorPass> {
    let image_a = tape.constant(batch.image_a.clone());
    let mask_a = tape.constant(batch.mask_a.clone());
    let image_b = tape.constant(batch.image_b.clone());
    let (adapted, taps) = bundle
        .generator
        .forward_with_taps(tape, image_a, &config.architecture.heads.taps)?;
    Ok(GeneratorPass {
        image_a,
        mask_a,
        image_b,
        adapted,
        taps,
    })
}

/// Handles of the generator-side graph of one step.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorGraph {
    pub adapted: Var,
    pub terms: LossTerms,
    pub cc: Var,
    pub mind: Var,
}

/// Builds the five terms for the generator/segmenter/heads update on top
/// of `pass`. The discriminator should be frozen on `tape` by the caller.
pub fn generator_terms<T: Real>(
    tape: &mut Tape<T>,
    bundle: &ModelBundle<T>,
    pass: &GeneratorPass,
    config: &TrainConfig,
    weights: &LossWeights,
    rng: &mut impl rand::Rng,
) -> Result<GeneratorGraph> {
    let plan = config.pct_plan();
    let adapted = pass.adapted;
    let logits = bundle.discriminator.forward(tape, adapted)?;
    let adv = losses::adv_loss_g(tape, logits, config.adversarial);
    let (idt, _) = losses::identity_loss(tape, &bundle.generator, pass.image_b)?;
    let prob = bundle.segmenter.forward(tape, adapted)?;
    let seg = losses::dice_seg_loss(tape, prob, pass.mask_a);
    let pct = losses::pct_loss(tape, &bundle.generator, &bundle.heads, &pass.taps, adapted, &plan, rng)?;
    let ac = anatomy::anatomy_loss(tape, adapted, pass.image_a, weights.cc, weights.mind, &config.mind);
    Ok(GeneratorGraph {
        adapted,
        terms: LossTerms {
            adv,
            idt,
            seg,
            pct,
            ac: ac.total,
        },
        cc: ac.cc,
        mind: ac.mind,
    })
}

fn finite(term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term })
    }
}

/// Runs the 0-based step `step`: discriminator update, then the joint update.
pub fn train_step<T: Real>(
    bundle: &mut ModelBundle<T>,
    optim: &mut OptimizerState<T>,
    batch: &Batch<T>,
    config: &TrainConfig,
    step: u64,
) -> Result<StepRecord> {
    let weights = config.effective_weights();
    let lr = scheduled_lr(config.optimizer.lr, step, config.steps);
    let mut rng = rng::derive(config.seed, stream::TRAIN_STEP | step);

    // The joint-update tape starts with G(I_A); the discriminator is frozen
    // on it and read only after its own update below.
    let mut tape = Tape::new();
    tape.freeze(&bundle.discriminator.params);
    let pass = generator_pass(&mut tape, bundle, batch, config)?;

    // (i) discriminator, on a separate tape with the adapted images as constants.
    let (d_loss, d_norm) = {
        let mut dt = Tape::new();
        let real = dt.constant(batch.image_b.clone());
        let fake = dt.constant(tape.value(pass.adapted).clone());
        let loss = discriminator_loss(&mut dt, bundle, real, fake, config.adversarial)?;
        let value = finite("adv_d", dt.value(loss).item().f64())?;
        let grads = dt.backward(loss);
        let g = grads.for_store(&bundle.discriminator.params);
        let norm = optim
            .discriminator
            .step(&mut bundle.discriminator.params, &g, &config.optimizer, lr);
        (value, norm)
    };

    // (ii) generator, segmenter and heads against the updated discriminator.
    let graph = generator_terms(&mut tape, bundle, &pass, config, &weights, &mut rng)?;
    let (total, terms) = losses::total_loss(&mut tape, &graph.terms, &weights)?;
    let total_value = finite("total", tape.value(total).item().f64())?;
    let ac_parts = AnatomyParts {
        cc: tape.value(graph.cc).item().f64(),
        mind: tape.value(graph.mind).item().f64(),
    };
    let grads = tape.backward(total);
    let cfg = &config.optimizer;
    let gg = grads.for_store(&bundle.generator.params);
    let gm = grads.for_store(&bundle.segmenter.params);
    let gh = grads.for_store(&bundle.heads.params);
    drop(grads);
    drop(tape);
    let g_norm = optim.generator.step(&mut bundle.generator.params, &gg, cfg, lr);
    let m_norm = optim.segmenter.step(&mut bundle.segmenter.params, &gm, cfg, lr);
    let h_norm = optim.heads.step(&mut bundle.heads.params, &gh, cfg, lr);

    Ok(StepRecord {
        step: step + 1,
        lr,
        d_loss,
        terms,
        ac_parts,
        total: total_value,
        update_norms: UpdateNorms {
            generator: g_norm.f64(),
            discriminator: d_norm.f64(),
            segmenter: m_norm.f64(),
            heads: h_norm.f64(),
        },
    })
}

/// Domain tags for data ordering streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    A = 0,
    B = 1,
}

/// Index of the `k`-th sample drawn from a domain of `n` samples: the draw
/// order is a fresh seeded permutation for each pass over the data.
pub fn sample_index(seed: u64, domain: Domain, k: u64, n: usize) -> usize {
    let epoch = k / n as u64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::derive(seed, stream::DATA_ORDER | ((domain as u64) << 40) | epoch);
    order.shuffle(&mut rng);
    order[(k % n as u64) as usize]
}

/// Source images translated to the target modality.
pub fn adapt<T: Real>(bundle: &ModelBundle<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    warn_if_padded(images, crate::networks::Generator::<T>::SIZE_MULTIPLE, "generator");
    let mut tape = Tape::inference();
    let x = tape.constant(images.clone());
    let y = bundle.generator.forward(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

/// Segmenter probabilities on target-modality images (no generator).
pub fn segment<T: Real>(bundle: &ModelBundle<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    warn_if_padded(images, crate::networks::Segmenter::<T>::SIZE_MULTIPLE, "segmenter");
    let mut tape = Tape::inference();
    let x = tape.constant(images.clone());
    let y = bundle.segmenter.forward(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

fn warn_if_padded<T: Real>(images: &Tensor<T>, multiple: usize, net: &str) {
    let shape = images.shape();
    if shape.len() == 4 && (shape[2] % multiple != 0 || shape[3] % multiple != 0) {
        log::warn!(
            "{}x{} input is not a multiple of {multiple}; the {net} pads and crops it",
            shape[2],
            shape[3]
        );
    }
}
