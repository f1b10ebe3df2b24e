//! Synthetic two-modality phantom.
//!
//! Anatomy is a label map with a body ellipse (1), a star-shaped organ (2)
//! strictly inside it, and up to three thin vessels (3) inside the organ.
//! Domain A renders tissues through a fixed lookup table; domain B applies
//! one of several modality gaps on top of the same rendering. Every sample
//! draws from its own random stream, and the two domains use disjoint
//! streams, so no anatomy is shared between them.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::sample::{ImageSample, MaskSample};

pub const BACKGROUND: u8 = 0;
pub const BODY: u8 = 1;
pub const ORGAN: u8 = 2;
pub const VESSEL: u8 = 3;

/// Tissue intensities in `[0, 1]`, indexed by label.
pub const LUT: [f64; 4] = [0.0, 0.35, 0.6, 0.9];
/// Bounds on the organ's share of the image area.
pub const ORGAN_FRACTION: (f64, f64) = (0.05, 0.35);
/// Bounds on the gamma exponent of the gamma-texture gap.
pub const GAMMA_RANGE: (f64, f64) = (0.6, 1.6);
/// Largest relative amplitude of the bias-field gap.
pub const MAX_BIAS_AMPLITUDE: f64 = 0.3;
pub const MIN_IMAGE_SIZE: usize = 32;

const MAX_ATTEMPTS: usize = 200;
const SPECKLE_SIGMA: f64 = 0.12;

/// Appearance difference between the two modalities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gap {
    /// Monotone gamma remap plus multiplicative speckle.
    #[default]
    GammaTexture,
    /// Smooth multiplicative intensity inhomogeneity.
    BiasField,
    /// Global inversion `1 - x`.
    InvertContrast,
}

impl Gap {
    pub fn name(self) -> &'static str {
        match self {
            Gap::GammaTexture => "gamma-texture",
            Gap::BiasField => "bias-field",
            Gap::InvertContrast => "invert-contrast",
        }
    }
}

impl core::str::FromStr for Gap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Gap::GammaTexture, Gap::BiasField, Gap::InvertContrast]
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(alloc::format!(
                    "unknown gap `{s}`; expected gamma-texture, bias-field or invert-contrast"
                ))
            })
    }
}

/// Acquisition degradations shared by both domains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderParams {
    /// Gaussian noise std as a fraction of the `[0, 1]` intensity range.
    pub noise_sigma: f64,
    /// 3x3 binomial blur of the tissue map.
    pub blur: bool,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.02,
            blur: true,
        }
    }
}

impl RenderParams {
    /// Ideal acquisition: no noise, no blur.
    pub fn noiseless() -> Self {
        Self {
            noise_sigma: 0.0,
            blur: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub n_train_a: usize,
    pub n_train_b: usize,
    pub n_test_b: usize,
    pub seed: u64,
    pub gap: Gap,
    pub artifact_streaks: bool,
    pub render: RenderParams,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_train_a: 200,
            n_train_b: 200,
            n_test_b: 50,
            seed: 0,
            gap: Gap::GammaTexture,
            artifact_streaks: false,
            render: RenderParams::default(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::InvalidArgument(alloc::format!(
                "phantom image size {} is below {MIN_IMAGE_SIZE}",
                self.image_size
            )));
        }
        if self.n_train_a == 0 || self.n_train_b == 0 || self.n_test_b == 0 {
            return Err(Error::InvalidArgument("phantom sample counts must be at least 1".into()));
        }
        if !(self.render.noise_sigma >= 0.0 && self.render.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Square tissue label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Anatomy {
    pub size: usize,
    pub labels: Vec<u8>,
}

impl Anatomy {
    /// Segmentation target: organ including its vessels.
    pub fn organ_mask(&self) -> Vec<u8> {
        self.labels.iter().map(|&l| u8::from(l == ORGAN || l == VESSEL)).collect()
    }

    pub fn organ_fraction(&self) -> f64 {
        self.organ_mask().iter().filter(|&&v| v == 1).count() as f64 / self.labels.len() as f64
    }

    pub fn vessel_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l == VESSEL).count()
    }
}

/// Whether the foreground of a binary map is one 4-connected component with
/// no holes (the background is one 4-connected component touching the border).
pub fn is_simply_connected(mask: &[u8], size: usize) -> bool {
    let fg = mask.iter().filter(|&&v| v != 0).count();
    if fg == 0 {
        return false;
    }
    let start = mask.iter().position(|&v| v != 0).expect("non-empty");
    let reached_fg = flood(size, &[start], |i| mask[i] != 0);
    if reached_fg != fg {
        return false;
    }
    // Background seeded from every border pixel, treating the outside as one region.
    let border: Vec<usize> = (0..size * size)
        .filter(|&i| {
            let (r, c) = (i / size, i % size);
            (r == 0 || c == 0 || r == size - 1 || c == size - 1) && mask[i] == 0
        })
        .collect();
    let bg = mask.len() - fg;
    flood(size, &border, |i| mask[i] == 0) == bg
}

fn flood(size: usize, seeds: &[usize], inside: impl Fn(usize) -> bool) -> usize {
    let mut seen = alloc::vec![false; size * size];
    let mut stack: Vec<usize> = Vec::new();
    for &s in seeds {
        if inside(s) && !seen[s] {
            seen[s] = true;
            stack.push(s);
        }
    }
    let mut count = 0;
    while let Some(i) = stack.pop() {
        count += 1;
        let (r, c) = (i / size, i % size);
        let mut visit = |j: usize| {
            if !seen[j] && inside(j) {
                seen[j] = true;
                stack.push(j);
            }
        };
        if r > 0 {
            visit(i - size);
        }
        if r + 1 < size {
            visit(i + size);
        }
        if c > 0 {
            visit(i - 1);
        }
        if c + 1 < size {
            visit(i + 1);
        }
    }
    count
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws a label map satisfying the nesting and connectivity constraints,
/// resampling up to a bounded number of times.
pub fn sample_anatomy(rng: &mut impl Rng, size: usize) -> Result<Anatomy> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::Phantom(alloc::format!("image size {size} is below {MIN_IMAGE_SIZE}")));
    }
    for _ in 0..MAX_ATTEMPTS {
        if let Some(a) = try_anatomy(rng, size) {
            return Ok(a);
        }
    }
    Err(Error::Phantom(alloc::format!(
        "no valid anatomy after {MAX_ATTEMPTS} attempts at size {size}"
    )))
}

fn try_anatomy(rng: &mut impl Rng, size: usize) -> Option<Anatomy> {
    let s = size as f64;
    let mid = (s - 1.0) / 2.0;
    let (cy, cx) = (mid + uniform(rng, -0.03, 0.03) * s, mid + uniform(rng, -0.03, 0.03) * s);
    let (ay, ax) = (uniform(rng, 0.34, 0.42) * s, uniform(rng, 0.34, 0.42) * s);
    let theta = uniform(rng, 0.0, PI);
    let (st, ct) = theta.sin_cos();

    let mut labels = alloc::vec![BACKGROUND; size * size];
    for r in 0..size {
        for c in 0..size {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            let u = ct * dx + st * dy;
            let v = -st * dx + ct * dy;
            if (u / ax).powi(2) + (v / ay).powi(2) <= 1.0 {
                labels[r * size + c] = BODY;
            }
        }
    }
    // The body must not touch the image border.
    let touches = (0..size).any(|i| {
        labels[i] != 0 || labels[(size - 1) * size + i] != 0 || labels[i * size] != 0 || labels[i * size + size - 1] != 0
    });
    if touches {
        return None;
    }

    // Star-shaped organ: r(phi) = r0 (1 + sum_k a_k cos(k phi + p_k)).
    let r0 = uniform(rng, 0.15, 0.22) * s;
    let harmonics: Vec<(f64, f64, f64)> = (2..=4)
        .map(|k| (k as f64, uniform(rng, -0.04, 0.04), uniform(rng, 0.0, 2.0 * PI)))
        .collect();
    let rho = uniform(rng, 0.0, 0.35).sqrt();
    let phi = uniform(rng, 0.0, 2.0 * PI);
    let (oy, ox) = {
        let (u, v) = (rho * phi.cos() * ax, rho * phi.sin() * ay);
        (cy + st * u + ct * v, cx + ct * u - st * v)
    };
    let radius = |angle: f64| r0 * (1.0 + harmonics.iter().map(|&(k, a, p)| a * (k * angle + p).cos()).sum::<f64>());
    for r in 0..size {
        for c in 0..size {
            let (dy, dx) = (r as f64 - oy, c as f64 - ox);
            if (dy * dy + dx * dx).sqrt() <= radius(dy.atan2(dx)) {
                let l = &mut labels[r * size + c];
                if *l != BODY {
                    return None;
                }
                *l = ORGAN;
            }
        }
    }
    // Strictly inside: every 4-neighbour of an organ pixel is body or organ.
    for i in 0..size * size {
        if labels[i] == ORGAN && neighbours4(i, size).any(|j| labels[j] == BACKGROUND) {
            return None;
        }
    }
    let anatomy = Anatomy { size, labels };
    let frac = anatomy.organ_fraction();
    if !(ORGAN_FRACTION.0..=ORGAN_FRACTION.1).contains(&frac) || !is_simply_connected(&anatomy.organ_mask(), size) {
        return None;
    }
    let mut anatomy = anatomy;
    let vessels = rng.random_range(0..=3);
    for _ in 0..vessels {
        draw_vessel(rng, &mut anatomy, (oy, ox), r0);
    }
    Some(anatomy)
}

fn neighbours4(i: usize, size: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / size, i % size);
    [
        (r > 0).then(|| i - size),
        (r + 1 < size).then(|| i + size),
        (c > 0).then(|| i - 1),
        (c + 1 < size).then(|| i + 1),
    ]
    .into_iter()
    .flatten()
}

/// Quadratic Bezier through the organ; only pixels whose 4-neighbours are
/// all organ tissue are relabelled, so vessels never reach the organ edge.
fn draw_vessel(rng: &mut impl Rng, anatomy: &mut Anatomy, centre: (f64, f64), r0: f64) {
    let size = anatomy.size;
    let mut point = |scale: f64| {
        let a = uniform(rng, 0.0, 2.0 * PI);
        let d = uniform(rng, 0.0, scale) * r0;
        (centre.0 + d * a.sin(), centre.1 + d * a.cos())
    };
    let (p0, p1, p2) = (point(0.8), point(0.5), point(0.8));
    let steps = (4.0 * r0) as usize + 8;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let (a, b, c) = ((1.0 - t) * (1.0 - t), 2.0 * t * (1.0 - t), t * t);
        let y = a * p0.0 + b * p1.0 + c * p2.0;
        let x = a * p0.1 + b * p1.1 + c * p2.1;
        let (r, col) = (y.round(), x.round());
        if r < 0.0 || col < 0.0 || r >= size as f64 || col >= size as f64 {
            continue;
        }
        let i = r as usize * size + col as usize;
        let interior = |j: usize| anatomy.labels[j] == ORGAN || anatomy.labels[j] == VESSEL;
        if interior(i) && neighbours4(i, size).all(interior) {
            anatomy.labels[i] = VESSEL;
        }
    }
}

fn blur3(img: &[f64], size: usize) -> Vec<f64> {
    let clamp = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = alloc::vec![0.0; src.len()];
        for r in 0..size {
            for c in 0..size {
                let at = |d: isize| {
                    if horizontal {
                        src[r * size + clamp(c as isize + d)]
                    } else {
                        src[clamp(r as isize + d) * size + c]
                    }
                };
                out[r * size + c] = 0.25 * at(-1) + 0.5 * at(0) + 0.25 * at(1);
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Tissue lookup followed by the optional blur, in `[0, 1]`.
fn base_rendering(anatomy: &Anatomy, params: &RenderParams) -> Vec<f64> {
    let img: Vec<f64> = anatomy.labels.iter().map(|&l| LUT[l as usize]).collect();
    if params.blur {
        blur3(&img, anatomy.size)
    } else {
        img
    }
}

fn finish(img: Vec<f64>, params: &RenderParams, rng: &mut impl Rng) -> Vec<f32> {
    let noise = Normal::new(0.0, params.noise_sigma).expect("valid sigma");
    img.into_iter()
        .map(|v| {
            let v = if params.noise_sigma > 0.0 { v + noise.sample(rng) } else { v };
            (2.0 * v.clamp(0.0, 1.0) - 1.0) as f32
        })
        .collect()
}

fn image(id: &str, anatomy: &Anatomy, pixels: Vec<f32>) -> ImageSample {
    ImageSample {
        id: id.into(),
        height: anatomy.size,
        width: anatomy.size,
        spacing: [1.0, 1.0],
        pixels,
    }
}

/// Source-modality rendering, normalized to `[-1, 1]`.
pub fn render_domain_a(anatomy: &Anatomy, params: &RenderParams, rng: &mut impl Rng, id: &str) -> ImageSample {
    let img = base_rendering(anatomy, params);
    image(id, anatomy, finish(img, params, rng))
}

/// Target-modality rendering: the source rendering composed with `gap`,
/// optionally with streak artifacts.
pub fn render_domain_b(
    anatomy: &Anatomy,
    params: &RenderParams,
    gap: Gap,
    streaks: bool,
    rng: &mut impl Rng,
    id: &str,
) -> ImageSample {
    let size = anatomy.size;
    let mut img = base_rendering(anatomy, params);
    match gap {
        Gap::GammaTexture => {
            let gamma = uniform(rng, GAMMA_RANGE.0, GAMMA_RANGE.1);
            for v in img.iter_mut() {
                let speckle: f64 = StandardNormal.sample(rng);
                *v = v.max(0.0).powf(gamma) * (1.0 + SPECKLE_SIGMA * speckle);
            }
        }
        Gap::BiasField => {
            let amplitude = uniform(rng, 0.5 * MAX_BIAS_AMPLITUDE, MAX_BIAS_AMPLITUDE);
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| (uniform(rng, 0.0, 2.0 * PI), uniform(rng, 0.5, 1.5), uniform(rng, 0.0, 2.0 * PI)))
                .collect();
            let field: Vec<f64> = (0..size * size)
                .map(|i| {
                    let (y, x) = ((i / size) as f64 / size as f64, (i % size) as f64 / size as f64);
                    waves
                        .iter()
                        .map(|&(dir, freq, phase)| (2.0 * PI * freq * (x * dir.cos() + y * dir.sin()) + phase).sin())
                        .sum::<f64>()
                        / 3.0
                })
                .collect();
            for (v, f) in img.iter_mut().zip(field) {
                *v *= 1.0 + amplitude * f;
            }
        }
        Gap::InvertContrast => {
            for v in img.iter_mut() {
                *v = 1.0 - *v;
            }
        }
    }
    if streaks {
        add_streaks(&mut img, size, rng);
    }
    image(id, anatomy, finish(img, params, rng))
}

/// Thin bright/dark lines radiating through the field of view.
fn add_streaks(img: &mut [f64], size: usize, rng: &mut impl Rng) {
    let count = rng.random_range(2..=5);
    let s = size as f64;
    let (py, px) = (uniform(rng, 0.35, 0.65) * s, uniform(rng, 0.35, 0.65) * s);
    for _ in 0..count {
        let angle = uniform(rng, 0.0, PI);
        let amp = uniform(rng, -0.2, 0.2);
        let (sa, ca) = angle.sin_cos();
        for r in 0..size {
            for c in 0..size {
                let d = (r as f64 - py) * ca - (c as f64 - px) * sa;
                img[r * size + c] += amp * (-d * d).exp();
            }
        }
    }
}

/// Which split a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    TrainA,
    TrainB,
    TestB,
}

impl Split {
    pub fn stream(self) -> u64 {
        match self {
            Split::TrainA => stream::PHANTOM_A,
            Split::TrainB => stream::PHANTOM_B_TRAIN,
            Split::TestB => stream::PHANTOM_B_TEST,
        }
    }

    pub fn stem(self, index: usize) -> String {
        match self {
            Split::TrainA => alloc::format!("a_{index:05}"),
            Split::TrainB => alloc::format!("b_train_{index:05}"),
            Split::TestB => alloc::format!("b_test_{index:05}"),
        }
    }
}

/// One generated sample with its binary organ mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: ImageSample,
    pub mask: MaskSample,
    pub anatomy: Anatomy,
}

/// Generates sample `index` of `split`, from its own random stream.
pub fn generate_sample(spec: &PhantomSpec, split: Split, index: usize) -> Result<PhantomSample> {
    let mut rng = rng::derive(spec.seed, split.stream() | index as u64);
    let anatomy = sample_anatomy(&mut rng, spec.image_size)?;
    let id = split.stem(index);
    let image = match split {
        Split::TrainA => render_domain_a(&anatomy, &spec.render, &mut rng, &id),
        _ => render_domain_b(&anatomy, &spec.render, spec.gap, spec.artifact_streaks, &mut rng, &id),
    };
    let mask = MaskSample {
        id,
        height: anatomy.size,
        width: anatomy.size,
        spacing: [1.0, 1.0],
        labels: anatomy.organ_mask(),
    };
    Ok(PhantomSample { image, mask, anatomy })
}
