//! Anatomy constraints: the modality-independent neighborhood descriptor
//! (MIND), Pearson correlation, and their weighted combination.
//!
//! For every pixel `x` and neighborhood offset `r`, `K_x[r]` is the sum of
//! squared differences between the 3x3 patch at `x` and the patch at
//! `x + r` (replicated borders). `V_x = mean_r K_x[r] + eps`, and the
//! descriptor is `F_x[r] = exp(-K_x[r] / V_x) / Z_x` with `Z_x` chosen so
//! that `max_r F_x[r] = 1`. Dividing by `V_x` makes `F` invariant to affine
//! intensity changes `a I + b`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Pearson denominators below this are treated as constant images.
const CC_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Neighborhood {
    /// `(±1, 0), (0, ±1)`.
    #[default]
    Four,
    /// The four axial offsets plus the four diagonals.
    Eight,
}

impl Neighborhood {
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Neighborhood::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Neighborhood::Eight => &[(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MindParams {
    /// Patch radius; 1 gives 3x3 patches.
    pub radius: usize,
    pub neighborhood: Neighborhood,
    /// Variance floor relative to the image's mean local variance.
    pub eps_relative: f64,
    /// Absolute variance floor.
    pub eps_absolute: f64,
}

impl Default for MindParams {
    fn default() -> Self {
        Self {
            radius: 1,
            neighborhood: Neighborhood::Four,
            eps_relative: 1e-8,
            eps_absolute: 1e-12,
        }
    }
}

impl MindParams {
    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(Error::InvalidArgument("MIND patch radius must be at least 1".into()));
        }
        if self.eps_relative < 0.0 || self.eps_absolute <= 0.0 {
            return Err(Error::InvalidArgument("MIND variance floors must be non-negative (absolute > 0)".into()));
        }
        Ok(())
    }

    /// Smallest accepted image side.
    pub fn min_side(&self) -> usize {
        2 * self.radius + 3
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        self.validate()?;
        match *shape {
            [_, 1, h, w] if h >= self.min_side() && w >= self.min_side() => Ok(()),
            [_, 1, _, _] => Err(Error::InvalidShape {
                context: "mind_descriptor",
                shape: shape.to_vec(),
                reason: "image smaller than 2 * radius + 3",
            }),
            _ => Err(Error::InvalidShape {
                context: "mind_descriptor",
                shape: shape.to_vec(),
                reason: "expected [batch, 1, height, width]",
            }),
        }
    }
}

/// Per-pixel descriptor, `[batch, |R|, height, width]`, values in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MindField<T> {
    pub values: Tensor<T>,
}

impl<T: Real> MindField<T> {
    pub fn offsets(&self) -> usize {
        self.values.shape()[1]
    }

    /// Maximum over offsets at every pixel, `[batch, height, width]` flattened.
    pub fn pixel_maxima(&self) -> Vec<T> {
        let (n, r, h, w) = self.values.dims4().expect("rank 4");
        let hw = h * w;
        let v = self.values.data();
        let mut out = Vec::with_capacity(n * hw);
        for b in 0..n {
            for p in 0..hw {
                let m = (0..r).map(|k| v[(b * r + k) * hw + p]).fold(T::neg_infinity(), T::max);
                out.push(m);
            }
        }
        out
    }
}

/// MIND descriptor of a `[batch, 1, h, w]` image on the tape. Panics on
/// images smaller than [`MindParams::min_side`]; use [`mind_descriptor`]
/// for a checked entry point.
pub fn mind_descriptor_var<T: Real>(tape: &mut Tape<T>, image: Var, params: &MindParams) -> Var {
    let (h, w) = (tape.shape(image)[2], tape.shape(image)[3]);
    let offsets = params.neighborhood.offsets();
    let rad = params.radius as isize;
    let reach = offsets.iter().map(|&(dy, dx)| dy.abs().max(dx.abs())).max().unwrap_or(1);
    let pad = (rad + reach) as usize;
    let padded = tape.pad2d(image, (pad, pad, pad, pad), PadMode::Replicate);

    // Shifted views of the image, keyed by displacement.
    let mut views: BTreeMap<(isize, isize), Var> = BTreeMap::new();
    let mut view = |tape: &mut Tape<T>, dy: isize, dx: isize| -> Var {
        *views.entry((dy, dx)).or_insert_with(|| {
            let top = (pad as isize + dy) as usize;
            let left = (pad as isize + dx) as usize;
            tape.crop(padded, top, left, h, w)
        })
    };

    let mut distances = Vec::with_capacity(offsets.len());
    for &(dy, dx) in offsets {
        let mut k: Option<Var> = None;
        for py in -rad..=rad {
            for px in -rad..=rad {
                let a = view(tape, py, px);
                let b = view(tape, py + dy, px + dx);
                let d = tape.sub(a, b);
                let d = tape.square(d);
                k = Some(match k {
                    None => d,
                    Some(acc) => tape.add(acc, d),
                });
            }
        }
        distances.push(k.expect("non-empty patch"));
    }

    let mut total = distances[0];
    for &k in &distances[1..] {
        total = tape.add(total, k);
    }
    let local_var = tape.mul_const(total, T::of(1.0 / offsets.len() as f64));
    // eps = rel * mean(V) + abs, per batch item.
    let mean_v = tape.global_avg_pool(local_var);
    let mean_v = tape.expand_spatial(mean_v, h, w);
    let eps = tape.mul_const(mean_v, T::of(params.eps_relative));
    let eps = tape.add_const(eps, T::of(params.eps_absolute));
    let variance = tape.add(local_var, eps);

    let mut kmin = distances[0];
    for &k in &distances[1..] {
        kmin = tape.minimum(kmin, k);
    }
    let mut fields = Vec::with_capacity(distances.len());
    for &k in &distances {
        let shifted = tape.sub(k, kmin);
        let ratio = tape.div(shifted, variance);
        let neg = tape.neg(ratio);
        fields.push(tape.exp(neg));
    }
    tape.concat_channels(&fields)
}

/// Checked, graph-free MIND descriptor.
pub fn mind_descriptor<T: Real>(image: &Tensor<T>, params: &MindParams) -> Result<MindField<T>> {
    params.check_image(image.shape())?;
    let mut tape = Tape::inference();
    let x = tape.constant(image.clone());
    let f = mind_descriptor_var(&mut tape, x, params);
    Ok(MindField {
        values: tape.value(f).clone(),
    })
}

/// Mean absolute difference between the descriptor fields of two images.
pub fn mind_loss_var<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, params: &MindParams) -> Var {
    assert_eq!(tape.shape(a), tape.shape(b), "mind_loss operands differ in shape");
    let fa = mind_descriptor_var(tape, a, params);
    let fb = mind_descriptor_var(tape, b, params);
    let d = tape.sub(fa, fb);
    let d = tape.abs(d);
    tape.mean(d)
}

fn check_pair(context: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            context,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

/// Graph-free [`mind_loss_var`].
pub fn mind_loss<T: Real>(a: &Tensor<T>, b: &Tensor<T>, params: &MindParams) -> Result<T> {
    check_pair("mind_loss", a.shape(), b.shape())?;
    params.check_image(a.shape())?;
    let mut tape = Tape::inference();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = mind_loss_var(&mut tape, x, y, params);
    Ok(tape.value(l).item())
}

/// Pearson correlation of two single images (`[1, c, h, w]`).
fn pearson_item<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    let ma = tape.mean(a);
    let ma = tape.neg(ma);
    let ca = tape.add_scalar(a, ma);
    let mb = tape.mean(b);
    let mb = tape.neg(mb);
    let cb = tape.add_scalar(b, mb);
    let cov = tape.mul(ca, cb);
    let cov = tape.mean(cov);
    let va = tape.square(ca);
    let va = tape.mean(va);
    let vb = tape.square(cb);
    let vb = tape.mean(vb);
    let (va_v, vb_v) = (tape.value(va).item().f64(), tape.value(vb).item().f64());
    if va_v * vb_v <= CC_EPS {
        log::warn!("correlation of a (near-)constant image; the coefficient is 0 by convention");
    }
    let vv = tape.mul(va, vb);
    let vv = tape.add_const(vv, T::of(CC_EPS));
    let den = tape.sqrt(vv);
    tape.div(cov, den)
}

/// Pearson correlation over all pixels, averaged over batch items.
pub fn cc_var<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Var {
    assert_eq!(tape.shape(a), tape.shape(b), "cc operands differ in shape");
    let n = tape.shape(a)[0];
    if n == 1 {
        return pearson_item(tape, a, b);
    }
    let mut terms = Vec::with_capacity(n);
    for item in 0..n {
        let ai = tape.select_item(a, item);
        let bi = tape.select_item(b, item);
        terms.push((T::one() / T::of(n as f64), pearson_item(tape, ai, bi)));
    }
    tape.weighted_sum(&terms)
}

/// Graph-free [`cc_var`].
pub fn cc<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    check_pair("cc", a.shape(), b.shape())?;
    a.dims4()?;
    let mut tape = Tape::inference();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = cc_var(&mut tape, x, y);
    Ok(tape.value(c).item())
}

/// Handles of the anatomy-constraint loss and its two parts.
#[derive(Clone, Copy, Debug)]
pub struct AnatomyTerms {
    /// `1 - cc(adapted, source)`.
    pub cc: Var,
    /// Mean absolute MIND difference.
    pub mind: Var,
    /// `w_cc * cc + w_mind * mind`, with zero-weight parts left out of the graph.
    pub total: Var,
}

/// `w_cc (1 - cc(adapted, source)) + w_mind |F(adapted) - F(source)|_1`.
///
/// The correlation enters as `1 - cc` so that minimizing drives the
/// adapted image towards positive correlation with its source.
pub fn anatomy_loss<T: Real>(
    tape: &mut Tape<T>,
    adapted: Var,
    source: Var,
    cc_weight: f64,
    mind_weight: f64,
    params: &MindParams,
) -> AnatomyTerms {
    let c = cc_var(tape, adapted, source);
    let c = tape.neg(c);
    let cc_term = tape.add_const(c, T::one());
    let mind_term = mind_loss_var(tape, adapted, source, params);
    let mut parts = Vec::with_capacity(2);
    if cc_weight > 0.0 {
        parts.push((T::of(cc_weight), cc_term));
    }
    if mind_weight > 0.0 {
        parts.push((T::of(mind_weight), mind_term));
    }
    let total = tape.weighted_sum(&parts);
    AnatomyTerms {
        cc: cc_term,
        mind: mind_term,
        total,
    }
}

/// Graph-free [`anatomy_loss`] value.
pub fn anatomy_loss_value<T: Real>(
    adapted: &Tensor<T>,
    source: &Tensor<T>,
    cc_weight: f64,
    mind_weight: f64,
    params: &MindParams,
) -> Result<T> {
    check_pair("anatomy_loss", adapted.shape(), source.shape())?;
    params.check_image(adapted.shape())?;
    let mut tape = Tape::inference();
    let (x, y) = (tape.constant(adapted.clone()), tape.constant(source.clone()));
    let t = anatomy_loss(&mut tape, x, y, cc_weight, mind_weight, params);
    Ok(tape.value(t.total).item())
}
