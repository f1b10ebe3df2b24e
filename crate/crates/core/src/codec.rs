//! Byte codecs for the on-disk sample formats and parameter archives.
//!
//! All integers and reals are little-endian. Images (`ACS1`) and masks
//! (`ACM1`) share a 20-byte header: magic, `u32` height, `u32` width, `f32`
//! row spacing, `f32` column spacing; then the row-major payload (`f32` per
//! pixel or `u8` per label).
//!
//! Parameter archives (`ACP1`) hold named groups of named `f32` tensors:
//! `u32` group count, then per group a string and `u32` tensor count, then
//! per tensor a string, `u32` rank, `u32` dims and the payload. Strings are
//! a `u32` byte length plus UTF-8 bytes.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::sample::{ImageSample, MaskSample};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: [u8; 4] = *b"ACS1";
pub const MASK_MAGIC: [u8; 4] = *b"ACM1";
pub const ARCHIVE_MAGIC: [u8; 4] = *b"ACP1";
pub const HEADER_LEN: usize = 20;

/// Named groups of named tensors.
pub type Archive = Vec<(String, Vec<(String, Tensor<f32>)>)>;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(alloc::format!(
                "truncated {what}: needs {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(alloc::format!("{what} is not UTF-8")))
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(alloc::format!(
                "{} trailing bytes after the {what}",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn header(out: &mut Vec<u8>, magic: [u8; 4], height: usize, width: usize, spacing: [f32; 2]) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&spacing[0].to_le_bytes());
    out.extend_from_slice(&spacing[1].to_le_bytes());
}

fn read_header(r: &mut Reader<'_>, magic: [u8; 4]) -> Result<(usize, usize, [f32; 2])> {
    let found = r.take(4, "magic")?;
    if found != magic {
        return Err(Error::Format(alloc::format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(&magic)
        )));
    }
    let h = r.u32("header")? as usize;
    let w = r.u32("header")? as usize;
    let spacing = [r.f32("header")?, r.f32("header")?];
    Ok((h, w, spacing))
}

pub fn encode_image(sample: &ImageSample) -> Result<Vec<u8>> {
    sample.validate()?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * sample.pixels.len());
    header(&mut out, IMAGE_MAGIC, sample.height, sample.width, sample.spacing);
    for v in &sample.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes an `ACS1` image; `id` is attached to the result.
pub fn decode_image(bytes: &[u8], id: &str) -> Result<ImageSample> {
    let mut r = Reader { bytes, pos: 0 };
    let (h, w, spacing) = read_header(&mut r, IMAGE_MAGIC)?;
    let n = h.checked_mul(w).ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let payload = r.take(n.saturating_mul(4), "pixel payload")?;
    r.finish("pixel payload")?;
    let pixels: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(alloc::format!("pixel {i} is not finite ({})", pixels[i])));
    }
    ImageSample::new(id, h, w, spacing, pixels).map_err(|e| Error::Format(alloc::format!("{e}")))
}

pub fn encode_mask(mask: &MaskSample) -> Result<Vec<u8>> {
    mask.validate()?;
    let mut out = Vec::with_capacity(HEADER_LEN + mask.labels.len());
    header(&mut out, MASK_MAGIC, mask.height, mask.width, mask.spacing);
    out.extend_from_slice(&mask.labels);
    Ok(out)
}

/// Decodes an `ACM1` mask; labels above 1 are rejected.
pub fn decode_mask(bytes: &[u8], id: &str) -> Result<MaskSample> {
    let mut r = Reader { bytes, pos: 0 };
    let (h, w, spacing) = read_header(&mut r, MASK_MAGIC)?;
    let n = h.checked_mul(w).ok_or_else(|| Error::Format("mask dimensions overflow".into()))?;
    let labels = r.take(n, "label payload")?.to_vec();
    r.finish("label payload")?;
    MaskSample::new(id, h, w, spacing, labels).map_err(|e| Error::Format(alloc::format!("{e}")))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_archive(groups: &[(&str, Vec<(&str, &Tensor<f32>)>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&ARCHIVE_MAGIC);
    out.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for (group, tensors) in groups {
        put_str(&mut out, group);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_archive(bytes: &[u8]) -> Result<Archive> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != ARCHIVE_MAGIC {
        return Err(Error::Format("not a parameter archive (bad magic)".into()));
    }
    let groups = r.u32("group count")?;
    let mut out = Vec::new();
    for _ in 0..groups {
        let group = r.string("group name")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            if rank > 8 {
                return Err(Error::Format(alloc::format!("tensor `{name}` has implausible rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32("tensor shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Format(alloc::format!("tensor `{name}` is too large")))?;
            let payload = r.take(n.saturating_mul(4), "tensor payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        out.push((group, tensors));
    }
    r.finish("archive")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn ramp() -> ImageSample {
        ImageSample::new("r", 8, 8, [0.65, 0.65], (0..64).map(|i| i as f32 / 63.0).collect()).unwrap()
    }

    #[test]
    fn image_round_trip_with_spacing() {
        let img = ramp();
        let bytes = encode_image(&img).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 64 * 4);
        assert_eq!(&bytes[..4], b"ACS1");
        let back = decode_image(&bytes, "r").unwrap();
        assert_eq!(back, img);
        assert_eq!(back.spacing, [0.65, 0.65]);
    }

    #[test]
    fn mask_round_trips() {
        let zeros = MaskSample::new("z", 16, 16, [1.0, 1.0], vec![0; 256]).unwrap();
        assert_eq!(decode_mask(&encode_mask(&zeros).unwrap(), "z").unwrap(), zeros);
        let mut labels = vec![0u8; 256];
        for i in [3, 77, 200] {
            labels[i] = 1;
        }
        let three = MaskSample::new("t", 16, 16, [1.0, 1.0], labels).unwrap();
        let back = decode_mask(&encode_mask(&three).unwrap(), "t").unwrap();
        let fg: Vec<usize> = back.labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(i, _)| i).collect();
        assert_eq!(fg, [3, 77, 200]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = encode_image(&ramp()).unwrap();
        assert!(matches!(decode_mask(&bytes, "r"), Err(Error::Format(_))));
        assert!(matches!(decode_image(&bytes[..bytes.len() - 1], "r"), Err(Error::Format(_))));
        assert!(matches!(decode_image(&bytes[..10], "r"), Err(Error::Format(_))));
        bytes.push(0);
        assert!(decode_image(&bytes, "r").is_err());
        bytes.pop();
        bytes[0] = b'X';
        assert!(matches!(decode_image(&bytes, "r"), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_non_finite_pixels_and_large_labels() {
        let mut bytes = encode_image(&ramp()).unwrap();
        bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(decode_image(&bytes, "r").is_err());
        let m = MaskSample::new("m", 8, 8, [1.0, 1.0], vec![0; 64]).unwrap();
        let mut bytes = encode_mask(&m).unwrap();
        bytes[HEADER_LEN + 5] = 7;
        assert!(decode_mask(&bytes, "m").is_err());
    }

    #[test]
    fn archive_round_trip_and_truncation() {
        let a = Tensor::from_fn(&[2, 3, 1, 1], |i| i as f32 - 2.5);
        let b = Tensor::scalar(7.0f32);
        let bytes = encode_archive(&[("g", vec![("w", &a), ("b", &b)]), ("h", vec![])]);
        let back = decode_archive(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "g");
        assert_eq!(back[0].1[0], ("w".into(), a));
        assert_eq!(back[0].1[1], ("b".into(), b));
        assert!(back[1].1.is_empty());
        assert!(decode_archive(&bytes[..bytes.len() - 2]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn image_payload_is_bit_exact(
            h in 8usize..20,
            w in 8usize..20,
            sy in 0.01f32..10.0,
            sx in 0.01f32..10.0,
            seed in any::<u32>(),
        ) {
            let pixels: Vec<f32> = (0..h * w)
                .map(|i| f32::from_bits((seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503)) & 0x3fff_ffff))
                .collect();
            let img = ImageSample::new("p", h, w, [sy, sx], pixels).unwrap();
            let back = decode_image(&encode_image(&img).unwrap(), "p").unwrap();
            prop_assert!(back.pixels.iter().zip(&img.pixels).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.spacing, img.spacing);
        }

        #[test]
        fn mask_payload_is_exact(h in 8usize..20, w in 8usize..20, labels in prop::collection::vec(0u8..=1, 400)) {
            let m = MaskSample::new("m", h, w, [1.0, 2.0], labels[..h * w].to_vec()).unwrap();
            prop_assert_eq!(decode_mask(&encode_mask(&m).unwrap(), "m").unwrap(), m);
        }
    }
}
