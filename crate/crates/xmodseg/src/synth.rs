//! Writes a phantom dataset tree.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use xmodseg_core::phantom::{self, PhantomSpec, Split};

use crate::dataset::{self, DatasetManifest, DOMAIN_A, DOMAIN_B};
use crate::error::{Error, IoContext, Result};
use crate::fsio;

#[derive(Serialize)]
struct Provenance<'a> {
    generator: &'static str,
    version: &'static str,
    format_version: u32,
    seed: u64,
    spec: &'a PhantomSpec,
    counts: Counts,
}

#[derive(Serialize)]
struct Counts {
    domain_a: usize,
    domain_b_train: usize,
    domain_b_test: usize,
}

fn is_non_empty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Generates the dataset into `out_dir`. Everything is written to a sibling
/// staging directory first, so a failure leaves nothing behind.
pub fn generate_dataset(spec: &PhantomSpec, out_dir: &Path, force: bool) -> Result<DatasetManifest> {
    spec.validate()?;
    if out_dir.is_file() {
        return Err(Error::Invalid(format!("{} is a file", out_dir.display())));
    }
    if is_non_empty_dir(out_dir) && !force {
        return Err(Error::Invalid(format!(
            "output directory {} is not empty (use --force to replace it)",
            out_dir.display()
        )));
    }
    let staging = staging_path(out_dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).at(&staging)?;
    }
    match write_tree(spec, &staging) {
        Ok(()) => {}
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    }
    if out_dir.exists() {
        fs::remove_dir_all(out_dir).at(out_dir)?;
    }
    fs::rename(&staging, out_dir).at(out_dir)?;
    dataset::scan_dataset(out_dir)
}

fn staging_path(out_dir: &Path) -> PathBuf {
    let mut name = out_dir.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "dataset".into());
    name.push(".partial");
    out_dir.with_file_name(name)
}

fn write_tree(spec: &PhantomSpec, root: &Path) -> Result<()> {
    for d in [DOMAIN_A, DOMAIN_B] {
        for sub in ["images", "labels"] {
            let p = root.join(d).join(sub);
            fs::create_dir_all(&p).at(&p)?;
        }
    }
    let splits = [
        (Split::TrainA, spec.n_train_a, DOMAIN_A, true),
        (Split::TrainB, spec.n_train_b, DOMAIN_B, false),
        (Split::TestB, spec.n_test_b, DOMAIN_B, true),
    ];
    for (split, n, domain, with_mask) in splits {
        for i in 0..n {
            let s = phantom::generate_sample(spec, split, i)?;
            let stem = split.stem(i);
            fsio::save_image(&s.image, &root.join(domain).join("images").join(format!("{stem}.{}", fsio::IMAGE_EXT)))?;
            if with_mask {
                fsio::save_mask(&s.mask, &root.join(domain).join("labels").join(format!("{stem}.{}", fsio::MASK_EXT)))?;
            }
        }
    }
    let provenance = Provenance {
        generator: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        format_version: dataset::MANIFEST_VERSION,
        seed: spec.seed,
        spec,
        counts: Counts {
            domain_a: spec.n_train_a,
            domain_b_train: spec.n_train_b,
            domain_b_test: spec.n_test_b,
        },
    };
    let path = root.join("provenance.json");
    let json = serde_json::to_string_pretty(&provenance).expect("provenance serializes");
    fs::write(&path, json + "\n").at(&path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use xmodseg_core::phantom::Gap;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            image_size: 32,
            n_train_a: 3,
            n_train_b: 2,
            n_test_b: 2,
            seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn counts_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let m = generate_dataset(&small(7), &out, false).unwrap();
        assert_eq!(m.counts(), (3, 4));
        assert_eq!(m.train_b().count(), 2);
        assert_eq!(m.eval_b().count(), 2);
        assert!(out.join("provenance.json").is_file());
        assert!(!staging_path(&out).exists());
    }

    #[test]
    fn deterministic_tree() {
        let dir = tempfile::tempdir().unwrap();
        let (x, y) = (dir.path().join("x"), dir.path().join("y"));
        generate_dataset(&small(7), &x, false).unwrap();
        generate_dataset(&small(7), &y, false).unwrap();
        for e in scan_entries(&x) {
            let rel = e.strip_prefix(&x).unwrap();
            assert_eq!(fs::read(&e).unwrap(), fs::read(y.join(rel)).unwrap(), "{}", rel.display());
        }
    }

    fn scan_entries(root: &Path) -> Vec<PathBuf> {
        let m = dataset::scan_dataset(root).unwrap();
        m.domain_a
            .entries
            .iter()
            .chain(&m.domain_b.entries)
            .flat_map(|e| std::iter::once(e.image.clone()).chain(e.mask.clone()))
            .collect()
    }

    #[test]
    fn non_empty_out_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("keep.txt"), "x").unwrap();
        let err = generate_dataset(&small(1), dir.path(), false).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(dir.path().join("keep.txt").exists());
        generate_dataset(&small(1), dir.path(), true).unwrap();
        assert!(!dir.path().join("keep.txt").exists());
    }

    #[test]
    fn gap_recorded_in_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            gap: Gap::InvertContrast,
            ..small(3)
        };
        generate_dataset(&spec, &dir.path().join("d"), false).unwrap();
        let text = fs::read_to_string(dir.path().join("d/provenance.json")).unwrap();
        assert!(text.contains("invert-contrast"), "{text}");
    }

    #[test]
    fn invalid_spec_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let spec = PhantomSpec {
            image_size: 16,
            ..small(0)
        };
        assert!(generate_dataset(&spec, &out, false).is_err());
        assert!(!out.exists());
        assert!(!staging_path(&out).exists());
    }
}
