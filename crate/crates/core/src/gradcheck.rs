//! Central finite-difference audits of autodiff gradients.
//!
//! [`check`] evaluates a scalar function twice per input element at `x ± h`
//! and compares the quotient against [`Tape::backward`]. The per-element
//! error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`;
//! the floor keeps entries that are numerically zero from dominating.
//! [`audit_losses`] runs the audit over every training objective on tiny
//! double-precision instances.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::anatomy::{self, MindParams};
use crate::autograd::{Tape, Var};
use crate::losses::{self, AdversarialVariant};
use crate::nn::{Linear, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const MAGNITUDE_FLOOR: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of one audited function.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Options for [`check`].
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub floor: f64,
    /// Test hook: perturbs the analytic gradient so the audit must fail.
    pub corrupt: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            floor: MAGNITUDE_FLOOR,
            corrupt: false,
        }
    }
}

/// Audits `f` at `inputs`. `f` builds a one-element loss from leaf handles.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F, opts: CheckOptions) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss);

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let numel = inputs[k].numel();
        let analytic: Vec<f64> = match grads.wrt(v) {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; numel],
        };
        for i in 0..numel {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + opts.step;
            let plus = eval(&probe);
            probe[k].data_mut()[i] = orig - opts.step;
            let minus = eval(&probe);
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let mut a = analytic[i];
            if opts.corrupt && checked == 0 {
                a += 1e-2 * (1.0 + a.abs());
            }
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            if err.is_nan() {
                worst = f64::INFINITY;
            } else if err > worst {
                worst = err;
            }
            checked += 1;
        }
    }
    GradReport {
        name: name.into(),
        max_rel_error: worst,
        checked,
    }
}

/// Loss families that [`audit_losses`] can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Adv,
    Idt,
    Dice,
    Nce,
    Pct,
    Mind,
    Cc,
    Ac,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Adv,
        LossKind::Idt,
        LossKind::Dice,
        LossKind::Nce,
        LossKind::Pct,
        LossKind::Mind,
        LossKind::Cc,
        LossKind::Ac,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Adv => "adv",
            LossKind::Idt => "idt",
            LossKind::Dice => "dice",
            LossKind::Nce => "nce",
            LossKind::Pct => "pct",
            LossKind::Mind => "mind",
            LossKind::Cc => "cc",
            LossKind::Ac => "ac",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

fn gaussian(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Runs the finite-difference audit for one loss family on tiny
/// double-precision instances (at most 8x8 images).
pub fn audit(kind: LossKind, seed: u64, opts: CheckOptions) -> Vec<GradReport> {
    let mut r = rng::derive(seed, kind as u64);
    let img = [1usize, 1, 8, 8];
    match kind {
        LossKind::Adv => {
            let real = gaussian(&[1, 1, 4, 4], 1.5, &mut r);
            let fake = gaussian(&[1, 1, 4, 4], 1.5, &mut r);
            let mut out = Vec::new();
            for variant in [AdversarialVariant::Log, AdversarialVariant::LeastSquares] {
                let tag = match variant {
                    AdversarialVariant::Log => "log",
                    AdversarialVariant::LeastSquares => "lsq",
                };
                out.push(check(
                    &alloc::format!("adv_d/{tag}"),
                    &[real.clone(), fake.clone()],
                    |t, v| losses::adv_loss_d(t, v[0], v[1], variant),
                    opts,
                ));
                out.push(check(
                    &alloc::format!("adv_g/{tag}"),
                    &[fake.clone()],
                    |t, v| losses::adv_loss_g(t, v[0], variant),
                    opts,
                ));
            }
            out
        }
        LossKind::Idt => {
            let out = uniform(&img, -1.0, 1.0, &mut r);
            let target = uniform(&img, -1.0, 1.0, &mut r);
            alloc::vec![check(
                "idt",
                &[out, target],
                |t, v| losses::mse(t, v[0], v[1]),
                opts
            )]
        }
        LossKind::Dice => {
            let prob = uniform(&img, 0.05, 0.95, &mut r);
            let mask = Tensor::from_fn(&img, |i| if (i * 7 + 3) % 5 < 2 { 1.0 } else { 0.0 });
            alloc::vec![check(
                "dice",
                &[prob],
                move |t, v| {
                    let m = t.constant(mask.clone());
                    losses::dice_seg_loss(t, v[0], m)
                },
                opts
            )]
        }
        LossKind::Nce => {
            let anchor = gaussian(&[1, 6], 1.0, &mut r);
            let positive = gaussian(&[1, 6], 1.0, &mut r);
            let negatives = gaussian(&[5, 6], 1.0, &mut r);
            // Unit vectors keep the logits in the regime the loss sees.
            let unit = |t: &Tensor<f64>| {
                let cols = t.shape()[1];
                let mut u = t.clone();
                for row in u.data_mut().chunks_mut(cols) {
                    let n = row.iter().map(|v| v * v).sum::<f64>();
                    let n = num_traits::Float::sqrt(n);
                    row.iter_mut().for_each(|v| *v /= n);
                }
                u
            };
            alloc::vec![check(
                "nce",
                &[unit(&anchor), unit(&positive), unit(&negatives)],
                |t, v| losses::nce_term(t, v[0], v[1], v[2], 0.5),
                opts
            )]
        }
        LossKind::Pct => {
            // Two tapped maps, projection heads as free leaves.
            let f0 = gaussian(&[1, 3, 4, 4], 1.0, &mut r);
            let f1 = gaussian(&[1, 4, 2, 2], 1.0, &mut r);
            let g0 = gaussian(&[1, 3, 4, 4], 1.0, &mut r);
            let g1 = gaussian(&[1, 4, 2, 2], 1.0, &mut r);
            let mut store = ParamStore::<f64>::new(99);
            let h0a = Linear::new(&mut store, &mut r, "h0.a", 3, 5, crate::nn::Init::Normal(0.5));
            let h0b = Linear::new(&mut store, &mut r, "h0.b", 5, 5, crate::nn::Init::Normal(0.5));
            let h1a = Linear::new(&mut store, &mut r, "h1.a", 4, 5, crate::nn::Init::Normal(0.5));
            let h1b = Linear::new(&mut store, &mut r, "h1.b", 5, 5, crate::nn::Init::Normal(0.5));
            for i in 0..store.len() {
                if store.name(i).ends_with(".bias") {
                    let b = gaussian(store.tensor(i).shape(), 0.1, &mut r);
                    *store.tensor_mut(i) = b;
                }
            }
            let params: Vec<Tensor<f64>> = (0..store.len()).map(|i| store.tensor(i).clone()).collect();
            let locations = [alloc::vec![0usize, 5, 10, 15], alloc::vec![0usize, 1, 3]];
            let mut inputs = alloc::vec![f0, f1, g0, g1];
            inputs.extend(params);
            let layers = [(h0a, h0b), (h1a, h1b)];
            alloc::vec![check(
                "pct",
                &inputs,
                move |t, v| {
                    let heads_of = |layer: usize| {
                        let (a, b) = &layers[layer];
                        let ix = |id: crate::nn::ParamId| v[4 + id.index()];
                        (ix(a.weight), ix(a.bias), ix(b.weight), ix(b.bias))
                    };
                    let mut terms = Vec::new();
                    for layer in 0..2 {
                        let (wa, ba, wb, bb) = heads_of(layer);
                        let project = |t: &mut Tape<f64>, fmap: Var| {
                            let rows = t.gather_locations(fmap, 0, &locations[layer]);
                            let h = t.matmul(rows, wa, false, false);
                            let h = t.add_row_bias(h, ba);
                            let h = t.relu(h);
                            let h = t.matmul(h, wb, false, false);
                            let h = t.add_row_bias(h, bb);
                            t.l2_normalize_rows(h)
                        };
                        let k = project(t, v[layer]);
                        let q = project(t, v[2 + layer]);
                        terms.push((q, k));
                    }
                    losses::patch_nce_from_projections(t, &terms, 0.07)
                },
                opts
            )]
        }
        LossKind::Mind => {
            let a = uniform(&img, -1.0, 1.0, &mut r);
            let b = uniform(&img, -1.0, 1.0, &mut r);
            let params = MindParams::default();
            alloc::vec![check(
                "mind",
                &[a, b],
                move |t, v| anatomy::mind_loss_var(t, v[0], v[1], &params),
                opts
            )]
        }
        LossKind::Cc => {
            let a = uniform(&img, -1.0, 1.0, &mut r);
            let b = uniform(&img, -1.0, 1.0, &mut r);
            alloc::vec![check(
                "cc",
                &[a, b],
                |t, v| {
                    let c = anatomy::cc_var(t, v[0], v[1]);
                    let neg = t.neg(c);
                    t.add_const(neg, 1.0)
                },
                opts
            )]
        }
        LossKind::Ac => {
            let a = uniform(&img, -1.0, 1.0, &mut r);
            let b = uniform(&img, -1.0, 1.0, &mut r);
            let params = MindParams::default();
            alloc::vec![check(
                "ac",
                &[a, b],
                move |t, v| anatomy::anatomy_loss(t, v[0], v[1], 1.0, 1.0, &params).total,
                opts
            )]
        }
    }
}

/// [`audit`] over several loss families.
pub fn audit_losses(kinds: &[LossKind], seed: u64, opts: CheckOptions) -> Vec<GradReport> {
    kinds.iter().flat_map(|&k| audit(k, seed, opts)).collect()
}
