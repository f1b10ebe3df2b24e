//! Directory-level adaptation and segmentation with a trained checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use xmodseg_core::metrics::BinaryMask;
use xmodseg_core::networks::ModelBundle;
use xmodseg_core::sample::{self, ImageSample, MaskSample};
use xmodseg_core::{train, Tensor};

use crate::dataset::list_stems;
use crate::error::{Error, IoContext, Result};
use crate::fsio::{self, IMAGE_EXT, MASK_EXT};

pub const THRESHOLD: f32 = 0.5;

/// All images in `dir`, sorted by stem. An empty directory is an error.
pub fn load_inputs(dir: &Path) -> Result<Vec<ImageSample>> {
    if !dir.is_dir() {
        return Err(Error::Invalid(format!("input directory {} does not exist", dir.display())));
    }
    let stems = list_stems(dir, IMAGE_EXT)?;
    if stems.is_empty() {
        return Err(Error::Invalid(format!("no .{IMAGE_EXT} images in {}", dir.display())));
    }
    stems.values().map(|p| fsio::load_image(p)).collect()
}

/// Normalized `[1, 1, size, size]` network input.
pub fn prepare(image: &ImageSample, size: usize) -> Result<Tensor<f32>> {
    Ok(sample::resize_normalize(image, size)?.to_tensor())
}

fn back_to_native(out: &Tensor<f32>, size: usize, image: &ImageSample) -> Vec<f32> {
    sample::resize_bilinear(out.data(), size, size, image.height, image.width)
}

/// Organ probabilities at the image's native resolution.
pub fn segment_probabilities(bundle: &ModelBundle<f32>, image: &ImageSample, size: usize) -> Result<Vec<f32>> {
    let prob = train::segment(bundle, &prepare(image, size)?)?;
    Ok(back_to_native(&prob, size, image))
}

pub fn segment_image(bundle: &ModelBundle<f32>, image: &ImageSample, size: usize) -> Result<MaskSample> {
    let prob = segment_probabilities(bundle, image, size)?;
    let mask = BinaryMask::from_probabilities(image.height, image.width, &prob, THRESHOLD)?;
    let labels = mask.data.iter().map(|&b| b as u8).collect();
    Ok(MaskSample::new(image.id.clone(), image.height, image.width, image.spacing, labels)?)
}

/// Image translated to the target modality, at native resolution in `[-1, 1]`.
pub fn adapt_image(bundle: &ModelBundle<f32>, image: &ImageSample, size: usize) -> Result<ImageSample> {
    let out = train::adapt(bundle, &prepare(image, size)?)?;
    let pixels = back_to_native(&out, size, image);
    Ok(ImageSample::new(image.id.clone(), image.height, image.width, image.spacing, pixels)?)
}

/// Which network to run over a directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Adapt,
    Segment,
}

/// Runs `mode` on every image of `input` and writes one output per image
/// (same stem) into `output`. Returns the written paths.
pub fn run_directory(
    bundle: &ModelBundle<f32>,
    size: usize,
    mode: Mode,
    input: &Path,
    output: &Path,
    previews: bool,
) -> Result<Vec<PathBuf>> {
    let images = load_inputs(input)?;
    fs::create_dir_all(output).at(output)?;
    let mut written = Vec::with_capacity(images.len());
    for image in &images {
        let path = match mode {
            Mode::Adapt => {
                let out = adapt_image(bundle, image, size)?;
                let path = output.join(format!("{}.{IMAGE_EXT}", image.id));
                fsio::save_image(&out, &path)?;
                if previews {
                    let png = output.join(format!("{}.png", image.id));
                    fsio::write_png_preview(&png, out.width, out.height, &out.pixels, -1.0, 1.0)?;
                }
                path
            }
            Mode::Segment => {
                let out = segment_image(bundle, image, size)?;
                let path = output.join(format!("{}.{MASK_EXT}", image.id));
                fsio::save_mask(&out, &path)?;
                if previews {
                    let png = output.join(format!("{}.png", image.id));
                    let values: Vec<f32> = out.labels.iter().map(|&l| l as f32).collect();
                    fsio::write_png_preview(&png, out.width, out.height, &values, 0.0, 1.0)?;
                }
                path
            }
        };
        log::debug!("wrote {}", path.display());
        written.push(path);
    }
    Ok(written)
}
