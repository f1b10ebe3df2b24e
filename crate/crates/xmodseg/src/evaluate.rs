//! Pairs predicted and reference masks by stem and scores them.

use std::fs;
use std::path::Path;

use xmodseg_core::metrics::{self, BinaryMask, EvalReport};
use xmodseg_core::sample::MaskSample;

use crate::dataset::list_stems;
use crate::error::{Error, IoContext, Result};
use crate::fsio::{self, MASK_EXT};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const CASES_CSV: &str = "cases.csv";

/// Scores one case; distances use the reference mask's spacing.
pub fn score(pred: &MaskSample, gt: &MaskSample) -> Result<metrics::CaseResult> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Invalid(format!(
            "case `{}`: prediction is {}x{} but reference is {}x{}",
            gt.id, pred.height, pred.width, gt.height, gt.width
        )));
    }
    let spacing = [gt.spacing[0] as f64, gt.spacing[1] as f64];
    Ok(metrics::evaluate_case(
        &gt.id,
        &BinaryMask::from_sample(pred),
        &BinaryMask::from_sample(gt),
        spacing,
    )?)
}

pub fn evaluate_dirs(pred: &Path, gt: &Path) -> Result<EvalReport> {
    for d in [pred, gt] {
        if !d.is_dir() {
            return Err(Error::Invalid(format!("{} is not a directory", d.display())));
        }
    }
    let p = list_stems(pred, MASK_EXT)?;
    let g = list_stems(gt, MASK_EXT)?;
    let mut unmatched: Vec<String> = p.keys().filter(|k| !g.contains_key(*k)).map(|k| format!("{k} (prediction only)")).collect();
    unmatched.extend(g.keys().filter(|k| !p.contains_key(*k)).map(|k| format!("{k} (reference only)")));
    if !unmatched.is_empty() {
        return Err(Error::Invalid(format!("unmatched stems: {}", unmatched.join(", "))));
    }
    if g.is_empty() {
        return Err(Error::Invalid(format!("no .{MASK_EXT} masks in {}", gt.display())));
    }
    let cases = g
        .iter()
        .map(|(stem, gpath)| score(&fsio::load_mask(&p[stem])?, &fsio::load_mask(gpath)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::aggregate(cases)?)
}

/// Writes the JSON report, text table and per-case CSV into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fsio::write_atomic(&dir.join(REPORT_JSON), (json + "\n").as_bytes())?;
    fsio::write_atomic(&dir.join(REPORT_TXT), report.to_table().as_bytes())?;
    fsio::write_atomic(&dir.join(CASES_CSV), report.to_csv().as_bytes())
}
