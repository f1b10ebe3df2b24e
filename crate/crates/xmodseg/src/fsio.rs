//! Reading and writing samples in the `ACS1`/`ACM1` formats, and PNG import.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use xmodseg_core::codec;
use xmodseg_core::sample::{ImageSample, MaskSample};

use crate::error::{Error, IoContext, Result};

pub const IMAGE_EXT: &str = "img";
pub const MASK_EXT: &str = "msk";

/// File stem used as the sample id.
pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn save_image(sample: &ImageSample, path: &Path) -> Result<()> {
    let bytes = codec::encode_image(sample).map_err(|e| Error::format(path, e))?;
    write_atomic(path, &bytes)
}

pub fn load_image(path: &Path) -> Result<ImageSample> {
    let bytes = fs::read(path).at(path)?;
    codec::decode_image(&bytes, &stem(path)).map_err(|e| Error::format(path, e))
}

pub fn save_mask(mask: &MaskSample, path: &Path) -> Result<()> {
    let bytes = codec::encode_mask(mask).map_err(|e| Error::format(path, e))?;
    write_atomic(path, &bytes)
}

pub fn load_mask(path: &Path) -> Result<MaskSample> {
    let bytes = fs::read(path).at(path)?;
    codec::decode_mask(&bytes, &stem(path)).map_err(|e| Error::format(path, e))
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

/// Converts an 8- or 16-bit grayscale PNG to an image sample with the given
/// spacing. Intensities are scaled to `[0, 1]`.
pub fn import_png(path: &Path, spacing: [f32; 2]) -> Result<ImageSample> {
    let file = fs::File::open(path).at(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(path, format!("expected grayscale, found {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels: Vec<f32> = match info.bit_depth {
        png::BitDepth::Eight => buf[..w * h].iter().map(|&v| v as f32 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..2 * w * h]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
            .collect(),
        other => return Err(Error::format(path, format!("unsupported bit depth {other:?}"))),
    };
    ImageSample::new(stem(path), h, w, spacing, pixels).map_err(|e| Error::format(path, e))
}

/// Converts every `.png` in `input` (a file or a directory) to `.img` files
/// in `output`. Returns the written paths, sorted by stem.
pub fn import_png_dir(input: &Path, output: &Path, spacing: [f32; 2]) -> Result<Vec<PathBuf>> {
    let sources: Vec<PathBuf> = if input.is_dir() {
        crate::dataset::list_stems(input, "png")?.into_values().collect()
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(Error::Invalid(format!("{} does not exist", input.display())));
    };
    if sources.is_empty() {
        return Err(Error::Invalid(format!("no .png files in {}", input.display())));
    }
    fs::create_dir_all(output).at(output)?;
    let mut written = Vec::with_capacity(sources.len());
    for src in sources {
        let sample = import_png(&src, spacing)?;
        let dest = output.join(format!("{}.{IMAGE_EXT}", sample.id));
        save_image(&sample, &dest)?;
        written.push(dest);
    }
    Ok(written)
}

/// 8-bit grayscale preview of `[-1, 1]` intensities or `{0, 1}` labels.
pub fn write_png_preview(path: &Path, width: usize, height: usize, values: &[f32], lo: f32, hi: f32) -> Result<()> {
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = fs::File::create(path).at(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| Error::format(path, e))?;
    w.write_image_data(&bytes).map_err(|e| Error::format(path, e))
}
