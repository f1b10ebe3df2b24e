//! Training objectives on the autograd tape.
//!
//! Every loss reduces with a mean so the unit default weights of the total
//! objective stay meaningful across resolutions.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::networks::{Generator, ProjectionHeads};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Smoothing constant of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

/// Probabilistic reading of discriminator logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialVariant {
    /// Binary cross-entropy on `sigmoid(logits)`; non-saturating generator.
    #[default]
    Log,
    /// Least-squares targets 1 (real) and 0 (fake).
    LeastSquares,
}

/// Weights of the total objective and its anatomy-constraint sub-terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub adv: f64,
    pub idt: f64,
    pub seg: f64,
    pub pct: f64,
    pub ac: f64,
    pub cc: f64,
    pub mind: f64,
    /// NCE temperature.
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            idt: 1.0,
            seg: 1.0,
            pct: 1.0,
            ac: 1.0,
            cc: 1.0,
            mind: 1.0,
            temperature: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adv, self.idt, self.seg, self.pct, self.ac, self.cc, self.mind];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// `-mean log D(real) - mean log(1 - D(fake))` for the log variant, where
/// `D = sigmoid(logits)`; the least-squares variant uses
/// `mean (real - 1)^2 + mean fake^2`.
///
/// `logits_fake` must not carry generator gradients; detach it first.
pub fn adv_loss_d<T: Real>(tape: &mut Tape<T>, logits_real: Var, logits_fake: Var, variant: AdversarialVariant) -> Var {
    match variant {
        AdversarialVariant::Log => {
            let nr = tape.neg(logits_real);
            let lr = tape.softplus(nr);
            let lr = tape.mean(lr);
            let lf = tape.softplus(logits_fake);
            let lf = tape.mean(lf);
            tape.add(lr, lf)
        }
        AdversarialVariant::LeastSquares => {
            let r = tape.add_const(logits_real, -T::one());
            let r = tape.square(r);
            let r = tape.mean(r);
            let f = tape.square(logits_fake);
            let f = tape.mean(f);
            tape.add(r, f)
        }
    }
}

/// Non-saturating generator loss `-mean log D(fake)` (log variant) or
/// `mean (fake - 1)^2` (least squares).
pub fn adv_loss_g<T: Real>(tape: &mut Tape<T>, logits_fake: Var, variant: AdversarialVariant) -> Var {
    match variant {
        AdversarialVariant::Log => {
            let n = tape.neg(logits_fake);
            let l = tape.softplus(n);
            tape.mean(l)
        }
        AdversarialVariant::LeastSquares => {
            let f = tape.add_const(logits_fake, -T::one());
            let f = tape.square(f);
            tape.mean(f)
        }
    }
}

/// Mean squared difference.
pub fn mse<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let d = tape.square(d);
    tape.mean(d)
}

/// Identity loss: mean squared difference between `G(image_b)` and
/// `image_b`. Returns the loss and the generator output.
pub fn identity_loss<T: Real>(tape: &mut Tape<T>, generator: &Generator<T>, image_b: Var) -> Result<(Var, Var)> {
    let out = generator.forward(tape, image_b)?;
    Ok((mse(tape, out, image_b), out))
}

/// Soft Dice loss `1 - (2 sum(p s) + eps) / (sum p + sum s + eps)`,
/// averaged over batch items.
pub fn dice_seg_loss<T: Real>(tape: &mut Tape<T>, prob: Var, mask: Var) -> Var {
    dice_seg_loss_eps(tape, prob, mask, T::of(DICE_SMOOTH))
}

/// [`dice_seg_loss`] with an explicit smoothing constant.
pub fn dice_seg_loss_eps<T: Real>(tape: &mut Tape<T>, prob: Var, mask: Var, eps: T) -> Var {
    assert_eq!(tape.shape(prob), tape.shape(mask), "dice operands differ in shape");
    let n = tape.shape(prob)[0];
    let mut terms = Vec::with_capacity(n);
    for item in 0..n {
        let (p, s) = if n == 1 {
            (prob, mask)
        } else {
            (tape.select_item(prob, item), tape.select_item(mask, item))
        };
        let inter = tape.mul(p, s);
        let inter = tape.sum(inter);
        let num = tape.mul_const(inter, T::of(2.0));
        let num = tape.add_const(num, eps);
        let sp = tape.sum(p);
        let ss = tape.sum(s);
        let den = tape.add(sp, ss);
        let den = tape.add_const(den, eps);
        let ratio = tape.div(num, den);
        let neg = tape.neg(ratio);
        terms.push((T::one() / T::of(n as f64), tape.add_const(neg, T::one())));
    }
    tape.weighted_sum(&terms)
}

/// One contrastive term: `-log(e^{a.p/t} / (e^{a.p/t} + sum_n e^{a.n/t}))`
/// for `anchor`, `positive` of shape `[1, d]` and `negatives` `[n, d]`.
pub fn nce_term<T: Real>(tape: &mut Tape<T>, anchor: Var, positive: Var, negatives: Var, temperature: f64) -> Var {
    let d = tape.shape(anchor)[1];
    assert_eq!(tape.shape(positive), [1, d], "positive must be [1, d]");
    let n = tape.shape(negatives)[0];
    assert!(n >= 1, "at least one negative is required");
    assert_eq!(tape.shape(negatives)[1], d, "negatives must be [n, d]");
    let p4 = tape.reshape(positive, &[1, 1, 1, d]);
    let n4 = tape.reshape(negatives, &[1, n, 1, d]);
    let keys = tape.concat_channels(&[p4, n4]);
    let keys = tape.reshape(keys, &[n + 1, d]);
    let logits = tape.matmul(anchor, keys, false, true);
    let logits = tape.mul_const(logits, T::of(1.0 / temperature));
    tape.softmax_cross_entropy(logits, &[0])
}

/// Patch contrastive loss from projected features.
///
/// Each pair holds `[s_l, d]` projections of the adapted image (anchors)
/// and of the source image (positives on the diagonal, the other rows as
/// negatives) for one tapped layer. The result is the mean of the NCE term
/// over every (layer, location).
pub fn patch_nce_from_projections<T: Real>(tape: &mut Tape<T>, pairs: &[(Var, Var)], temperature: f64) -> Var {
    let total: usize = pairs.iter().map(|&(q, _)| tape.shape(q)[0]).sum();
    let mut terms = Vec::with_capacity(pairs.len());
    for &(q, k) in pairs {
        let s = tape.shape(q)[0];
        assert_eq!(tape.shape(q), tape.shape(k), "anchor/key projections differ in shape");
        let logits = tape.matmul(q, k, false, true);
        let logits = tape.mul_const(logits, T::of(1.0 / temperature));
        let targets: Vec<usize> = (0..s).collect();
        let ce = tape.softmax_cross_entropy(logits, &targets);
        terms.push((T::of(s as f64 / total as f64), ce));
    }
    tape.weighted_sum(&terms)
}

/// Sampling plan of the patch contrastive loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PctPlan {
    pub taps: Vec<usize>,
    pub samples_per_layer: usize,
    pub temperature: f64,
}

/// Draws up to `samples` distinct flattened locations of an `h x w` map.
/// Returns the locations and whether the request had to be capped.
pub fn sample_locations(rng: &mut impl Rng, h: usize, w: usize, samples: usize) -> (Vec<usize>, bool) {
    let capacity = h * w;
    let take = samples.min(capacity);
    let mut locs = rand::seq::index::sample(rng, capacity, take).into_vec();
    locs.sort_unstable();
    (locs, samples > capacity)
}

/// Patch contrastive loss between `source` (already encoded: `source_taps`
/// come from the same generator pass that produced `adapted`) and the
/// generator's re-encoding of `adapted`.
///
/// Locations are drawn once per layer and shared by both images; negatives
/// are the other sampled locations of the source image.
pub fn pct_loss<T: Real>(
    tape: &mut Tape<T>,
    generator: &Generator<T>,
    heads: &ProjectionHeads<T>,
    source_taps: &[Var],
    adapted: Var,
    plan: &PctPlan,
    rng: &mut impl Rng,
) -> Result<Var> {
    if source_taps.len() != plan.taps.len() {
        return Err(Error::InvalidArgument("one source feature map per tap is required".into()));
    }
    let adapted_taps = generator.encode(tape, adapted, &plan.taps)?;
    let n = tape.shape(adapted)[0];
    let mut locations = Vec::with_capacity(plan.taps.len());
    for (layer, &fm) in source_taps.iter().enumerate() {
        let (h, w) = (tape.shape(fm)[2], tape.shape(fm)[3]);
        let (locs, capped) = sample_locations(rng, h, w, plan.samples_per_layer);
        if capped {
            log::warn!(
                "tap {} offers {} locations, fewer than the {} requested; sampling all of them",
                plan.taps[layer],
                h * w,
                plan.samples_per_layer
            );
        }
        if locs.len() < 2 {
            return Err(Error::InvalidArgument(alloc::format!(
                "tap {} yields {} location(s); the contrastive loss needs at least 2 for negatives",
                plan.taps[layer],
                locs.len()
            )));
        }
        locations.push(locs);
    }
    let mut per_item = Vec::with_capacity(n);
    for item in 0..n {
        let mut pairs = Vec::with_capacity(plan.taps.len());
        for layer in 0..plan.taps.len() {
            let q = heads.project(tape, layer, adapted_taps[layer], item, &locations[layer])?;
            let k = heads.project(tape, layer, source_taps[layer], item, &locations[layer])?;
            pairs.push((q, k));
        }
        let l = patch_nce_from_projections(tape, &pairs, plan.temperature);
        per_item.push((T::one() / T::of(n as f64), l));
    }
    Ok(tape.weighted_sum(&per_item))
}

/// Graph handles of the five objective terms of one generator step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub adv: Var,
    pub idt: Var,
    pub seg: Var,
    pub pct: Var,
    pub ac: Var,
}

/// Scalar values of the five terms, in logging order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub adv: f64,
    pub idt: f64,
    pub seg: f64,
    pub pct: f64,
    pub ac: f64,
}

impl TermValues {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.adv * self.adv + w.idt * self.idt + w.seg * self.seg + w.pct * self.pct + w.ac * self.ac
    }
}

/// Weighted combination of the five terms. Terms with zero weight are
/// reported but left out of the graph, so nothing upstream of them receives
/// gradient.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, TermValues)> {
    let named = [
        ("adv", terms.adv, weights.adv),
        ("idt", terms.idt, weights.idt),
        ("seg", terms.seg, weights.seg),
        ("pct", terms.pct, weights.pct),
        ("ac", terms.ac, weights.ac),
    ];
    let mut values = [0.0f64; 5];
    let mut parts = Vec::new();
    for (slot, &(name, v, w)) in values.iter_mut().zip(&named) {
        let x = tape.value(v).item();
        if !x.is_finite() {
            return Err(Error::NonFinite { term: name });
        }
        *slot = x.f64();
        if w > 0.0 {
            parts.push((T::of(w), v));
        }
    }
    let total = tape.weighted_sum(&parts);
    let values = TermValues {
        adv: values[0],
        idt: values[1],
        seg: values[2],
        pct: values[3],
        ac: values[4],
    };
    Ok((total, values))
}

/// Value-only soft Dice loss for a probability map and a binary mask.
pub fn dice_value<T: Real>(prob: &Tensor<T>, mask: &Tensor<T>) -> T {
    let mut tape = Tape::inference();
    let p = tape.constant(prob.clone());
    let m = tape.constant(mask.clone());
    let l = dice_seg_loss(&mut tape, p, m);
    tape.value(l).item()
}
