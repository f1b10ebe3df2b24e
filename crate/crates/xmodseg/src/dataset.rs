//! Dataset trees: `domain{A,B}/{images,labels}/<stem>.{img,msk}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::fsio::{self, IMAGE_EXT, MASK_EXT};

pub const MANIFEST_VERSION: u32 = 1;
pub const DOMAIN_A: &str = "domainA";
pub const DOMAIN_B: &str = "domainB";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainEntries {
    pub entries: Vec<Entry>,
    /// True for domain B: its masks are only read by evaluation.
    pub masks_evaluation_only: bool,
}

impl DomainEntries {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub root: PathBuf,
    pub domain_a: DomainEntries,
    pub domain_b: DomainEntries,
}

impl DatasetManifest {
    pub fn counts(&self) -> (usize, usize) {
        (self.domain_a.len(), self.domain_b.len())
    }

    /// Labeled source samples for training.
    pub fn train_a(&self) -> impl Iterator<Item = (&Path, &Path)> {
        self.domain_a
            .entries
            .iter()
            .filter_map(|e| e.mask.as_deref().map(|m| (e.image.as_path(), m)))
    }

    /// Target images usable for training: those without a mask. Labeled
    /// target cases are held out.
    pub fn train_b(&self) -> impl Iterator<Item = &Path> {
        self.domain_b
            .entries
            .iter()
            .filter(|e| e.mask.is_none())
            .map(|e| e.image.as_path())
    }

    /// Held-out labeled target cases.
    pub fn eval_b(&self) -> impl Iterator<Item = (&Path, &Path)> {
        self.domain_b
            .entries
            .iter()
            .filter_map(|e| e.mask.as_deref().map(|m| (e.image.as_path(), m)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Files in `dir` with extension `ext`, keyed by stem.
pub fn list_stems(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let path = entry.at(dir)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            out.insert(fsio::stem(&path), path);
        }
    }
    Ok(out)
}

fn scan_domain(root: &Path, name: &str, masks_required: bool) -> Result<DomainEntries> {
    let images_dir = root.join(name).join("images");
    let labels_dir = root.join(name).join("labels");
    if !images_dir.is_dir() {
        return Err(Error::Invalid(format!("missing directory {}", images_dir.display())));
    }
    let images = list_stems(&images_dir, IMAGE_EXT)?;
    if images.is_empty() {
        return Err(Error::Invalid(format!("{name} has no images in {}", images_dir.display())));
    }
    let mut masks = if labels_dir.is_dir() {
        list_stems(&labels_dir, MASK_EXT)?
    } else if masks_required {
        return Err(Error::Invalid(format!("missing directory {}", labels_dir.display())));
    } else {
        BTreeMap::new()
    };
    let mut entries = Vec::with_capacity(images.len());
    for (id, image) in images {
        let mask = masks.remove(&id);
        if masks_required && mask.is_none() {
            return Err(Error::Invalid(format!("{name} image `{id}` has no mask")));
        }
        entries.push(Entry { id, image, mask });
    }
    if let Some(orphan) = masks.keys().next() {
        return Err(Error::Invalid(format!("{name} mask `{orphan}` has no image")));
    }
    Ok(DomainEntries {
        entries,
        masks_evaluation_only: !masks_required,
    })
}

/// Scans a dataset tree. Entries are sorted by id.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    Ok(DatasetManifest {
        format_version: MANIFEST_VERSION,
        root: root.to_path_buf(),
        domain_a: scan_domain(root, DOMAIN_A, true)?,
        domain_b: scan_domain(root, DOMAIN_B, false)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use xmodseg_core::sample::{ImageSample, MaskSample};

    fn write_tree(root: &Path, a: usize, b: usize, b_labeled: usize, skip_mask: Option<usize>) {
        for d in [DOMAIN_A, DOMAIN_B] {
            fs::create_dir_all(root.join(d).join("images")).unwrap();
            fs::create_dir_all(root.join(d).join("labels")).unwrap();
        }
        let img = |id: &str| ImageSample::new(id, 8, 8, [1.0, 1.0], vec![0.5; 64]).unwrap();
        let msk = |id: &str| MaskSample::new(id, 8, 8, [1.0, 1.0], vec![0; 64]).unwrap();
        for i in 0..a {
            let id = format!("a_{i:05}");
            fsio::save_image(&img(&id), &root.join("domainA/images").join(format!("{id}.img"))).unwrap();
            if skip_mask != Some(i) {
                fsio::save_mask(&msk(&id), &root.join("domainA/labels").join(format!("{id}.msk"))).unwrap();
            }
        }
        for i in 0..b {
            let id = format!("b_{i:05}");
            fsio::save_image(&img(&id), &root.join("domainB/images").join(format!("{id}.img"))).unwrap();
            if i < b_labeled {
                fsio::save_mask(&msk(&id), &root.join("domainB/labels").join(format!("{id}.msk"))).unwrap();
            }
        }
    }

    #[test]
    fn well_formed_tree_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 4, 4, 0, None);
        let m = scan_dataset(dir.path()).unwrap();
        assert_eq!(m.counts(), (4, 4));
        let ids: Vec<_> = m.domain_a.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a_00000", "a_00001", "a_00002", "a_00003"]);
        assert_eq!(m, scan_dataset(dir.path()).unwrap());
    }

    #[test]
    fn missing_mask_names_stem() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 4, 4, 0, Some(2));
        let err = scan_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("a_00002"), "{err}");
    }

    #[test]
    fn labeled_target_cases_are_held_out() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 2, 5, 2, None);
        let m = scan_dataset(dir.path()).unwrap();
        assert!(m.domain_b.masks_evaluation_only);
        assert_eq!(m.train_b().count(), 3);
        assert_eq!(m.eval_b().count(), 2);
        assert_eq!(m.train_a().count(), 2);
    }

    #[test]
    fn empty_domain_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 2, 0, 0, None);
        assert!(matches!(scan_dataset(dir.path()), Err(Error::Invalid(_))));
    }
}
