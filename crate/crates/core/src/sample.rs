//! In-memory image and mask samples and the resize/normalize preprocessing.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;
/// Lower and upper percentiles of the intensity window.
pub const WINDOW_PERCENTILES: (f64, f64) = (0.01, 0.99);

/// Single-channel 2D image with physical pixel size in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// `(row, column)` pixel size in mm.
    pub spacing: [f32; 2],
    /// Row-major intensities.
    pub pixels: Vec<f32>,
}

/// Binary label map paired with an image (`0` background, `1` organ).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub spacing: [f32; 2],
    pub labels: Vec<u8>,
}

fn check_geometry(what: &str, height: usize, width: usize, spacing: [f32; 2], len: usize) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::InvalidArgument(alloc::format!(
            "{what} is {height}x{width}; both sides must be at least {MIN_SIDE}"
        )));
    }
    if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "{what} spacing {spacing:?} must be finite and positive"
        )));
    }
    if len != height * width {
        return Err(Error::InvalidArgument(alloc::format!(
            "{what} holds {len} values for a {height}x{width} grid"
        )));
    }
    Ok(())
}

impl ImageSample {
    pub fn new(id: impl Into<String>, height: usize, width: usize, spacing: [f32; 2], pixels: Vec<f32>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            height,
            width,
            spacing,
            pixels,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry("image", self.height, self.width, self.spacing, self.pixels.len())?;
        if let Some(i) = self.pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "image pixel {i} is not finite ({})",
                self.pixels[i]
            )));
        }
        Ok(())
    }

    /// `[1, 1, h, w]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 1, self.height, self.width], |i| T::of(self.pixels[i] as f64))
    }
}

impl MaskSample {
    pub fn new(id: impl Into<String>, height: usize, width: usize, spacing: [f32; 2], labels: Vec<u8>) -> Result<Self> {
        let s = Self {
            id: id.into(),
            height,
            width,
            spacing,
            labels,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry("mask", self.height, self.width, self.spacing, self.labels.len())?;
        if let Some(&bad) = self.labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(alloc::format!(
                "mask label {bad} found; only 0 and 1 are allowed"
            )));
        }
        Ok(())
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == 1).collect()
    }

    /// `[1, 1, h, w]` tensor of 0/1 values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, 1, self.height, self.width], |i| T::of(self.labels[i] as f64))
    }
}

/// Nearest-rank percentile (`q` in `[0, 1]`) of a sorted slice.
fn percentile_sorted(sorted: &[f32], q: f64) -> f32 {
    let idx = libm_round(q * (sorted.len() - 1) as f64) as usize;
    sorted[idx]
}

fn libm_round(x: f64) -> f64 {
    num_traits::Float::round(x)
}

/// `[p1, p99]` intensity window of an image.
pub fn intensity_window(pixels: &[f32]) -> (f32, f32) {
    let mut sorted = pixels.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    (
        percentile_sorted(&sorted, WINDOW_PERCENTILES.0),
        percentile_sorted(&sorted, WINDOW_PERCENTILES.1),
    )
}

/// Bilinear resampling with half-pixel centres and clamped borders.
pub fn resize_bilinear(pixels: &[f32], height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (height, width) == (out_h, out_w) {
        return pixels.to_vec();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = axis(height, out_h);
    let cols = axis(width, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let at = |r: usize, c: usize| pixels[r * width + c] as f64;
            let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
            let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
            out.push((top * (1.0 - fr) + bottom * fr) as f32);
        }
    }
    out
}

/// Nearest-neighbour resampling of a label map (same grid as
/// [`resize_bilinear`]).
pub fn resize_nearest(labels: &[u8], height: usize, width: usize, out_h: usize, out_w: usize) -> Vec<u8> {
    if (height, width) == (out_h, out_w) {
        return labels.to_vec();
    }
    let pick = |o: usize, n_in: usize, n_out: usize| {
        let src = (o as f64 + 0.5) * n_in as f64 / n_out as f64;
        (src as usize).min(n_in - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let sr = pick(r, height, out_h);
        for c in 0..out_w {
            out.push(labels[sr * width + pick(c, width, out_w)]);
        }
    }
    out
}

/// Resizes to `target x target` and maps the `[p1, p99]` window linearly
/// onto `[-1, 1]`, clamping outside it. Spacing scales with the resize
/// factor. A constant image (empty window) becomes all zeros.
pub fn resize_normalize(sample: &ImageSample, target: usize) -> Result<ImageSample> {
    if target < MIN_SIDE {
        return Err(Error::InvalidArgument(alloc::format!(
            "target size {target} is below the minimum of {MIN_SIDE}"
        )));
    }
    sample.validate()?;
    let resized = resize_bilinear(&sample.pixels, sample.height, sample.width, target, target);
    let spacing = [
        (sample.spacing[0] as f64 * sample.height as f64 / target as f64) as f32,
        (sample.spacing[1] as f64 * sample.width as f64 / target as f64) as f32,
    ];
    let (lo, hi) = intensity_window(&resized);
    let pixels = if lo == hi {
        log::warn!("image `{}` is constant; normalizing to zeros", sample.id);
        alloc::vec![0.0; target * target]
    } else if lo == -1.0 && hi == 1.0 {
        // Already normalized: the map is the identity.
        resized
    } else {
        let (lo, hi) = (lo as f64, hi as f64);
        resized
            .iter()
            .map(|&v| ((2.0 * (v as f64 - lo) / (hi - lo)) - 1.0).clamp(-1.0, 1.0) as f32)
            .collect()
    };
    Ok(ImageSample {
        id: sample.id.clone(),
        height: target,
        width: target,
        spacing,
        pixels,
    })
}

/// Nearest-neighbour resize of a mask to `target x target`.
pub fn resize_mask(mask: &MaskSample, target: usize) -> Result<MaskSample> {
    mask.validate()?;
    let labels = resize_nearest(&mask.labels, mask.height, mask.width, target, target);
    MaskSample::new(
        mask.id.clone(),
        target,
        target,
        [
            (mask.spacing[0] as f64 * mask.height as f64 / target as f64) as f32,
            (mask.spacing[1] as f64 * mask.width as f64 / target as f64) as f32,
        ],
        labels,
    )
}
