//! Overlap and surface-distance metrics, and their aggregation.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::MaskSample;

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                context: "binary mask",
                shape: alloc::vec![height, width, data.len()],
                reason: "data length differs from height * width",
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn from_sample(mask: &MaskSample) -> Self {
        Self {
            height: mask.height,
            width: mask.width,
            data: mask.foreground(),
        }
    }

    /// Foreground where `prob >= threshold`.
    pub fn from_probabilities(height: usize, width: usize, prob: &[f32], threshold: f32) -> Result<Self> {
        Self::new(height, width, prob.iter().map(|&p| p >= threshold).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    fn at(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width && self.data[r as usize * self.width + c as usize]
    }
}

fn check_same(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::ShapeMismatch {
            context: "mask comparison",
            left: alloc::vec![a.height, a.width],
            right: alloc::vec![b.height, b.width],
        });
    }
    Ok(())
}

/// Dice similarity `2|P ∩ G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same(pred, gt)?;
    let inter = pred.data.iter().zip(&gt.data).filter(|(p, g)| **p && **g).count();
    let total = pred.count() + gt.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Foreground pixels with at least one background 4-neighbour; outside the
/// image counts as background. `(row, col)` in row-major order.
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..mask.height {
        for c in 0..mask.width {
            let (ri, ci) = (r as isize, c as isize);
            if mask.at(ri, ci) && !(mask.at(ri - 1, ci) && mask.at(ri + 1, ci) && mask.at(ri, ci - 1) && mask.at(ri, ci + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance transform to the `true` pixels of
/// `feature`, with anisotropic spacing, by two passes of the lower
/// envelope of parabolas.
pub fn squared_distance_transform(feature: &[bool], height: usize, width: usize, spacing: [f64; 2]) -> Vec<f64> {
    let mut f: Vec<f64> = feature.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for c in 0..width {
        line.clear();
        line.extend((0..height).map(|r| f[r * width + c]));
        envelope_1d(&line, spacing[0], &mut out);
        for r in 0..height {
            f[r * width + c] = out[r];
        }
    }
    for r in 0..height {
        line.clear();
        line.extend_from_slice(&f[r * width..(r + 1) * width]);
        envelope_1d(&line, spacing[1], &mut out);
        f[r * width..(r + 1) * width].copy_from_slice(&out);
    }
    f
}

/// `out[q] = min_p (s (q - p))^2 + f[p]`.
fn envelope_1d(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let pos = |p: usize| p as f64 * s;
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in (0..n).filter(|&q| f[q].is_finite()) {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let x = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if x <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Sum of nearest-boundary distances from `from` to the boundary of `to`.
fn directed_sum(from: &[(usize, usize)], to: &BinaryMask, spacing: [f64; 2]) -> f64 {
    let mut border = alloc::vec![false; to.data.len()];
    for (r, c) in boundary_pixels(to) {
        border[r * to.width + c] = true;
    }
    let dt = squared_distance_transform(&border, to.height, to.width, spacing);
    from.iter().map(|&(r, c)| dt[r * to.width + c].sqrt()).sum()
}

/// Average symmetric surface distance in millimetres: nearest-boundary
/// distances are pooled over both directions and averaged. `None` when
/// either mask is empty.
pub fn asd(pred: &BinaryMask, gt: &BinaryMask, spacing: [f64; 2]) -> Result<Option<f64>> {
    check_same(pred, gt)?;
    if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("spacing {spacing:?} must be positive")));
    }
    if pred.is_empty() || gt.is_empty() {
        log::warn!("surface distance undefined for an empty mask");
        return Ok(None);
    }
    let (bp, bg) = (boundary_pixels(pred), boundary_pixels(gt));
    let forward = directed_sum(&bp, gt, spacing);
    let backward = directed_sum(&bg, pred, spacing);
    Ok(Some((forward + backward) / (bp.len() + bg.len()) as f64))
}

/// Metrics of one evaluated case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub dsc: f64,
    /// Missing when either mask is empty.
    pub asd_mm: Option<f64>,
}

pub fn evaluate_case(id: &str, pred: &BinaryMask, gt: &BinaryMask, spacing: [f64; 2]) -> Result<CaseResult> {
    Ok(CaseResult {
        id: id.into(),
        dsc: dsc(pred, gt)?,
        asd_mm: asd(pred, gt, spacing)?,
    })
}

/// Median, mean and population standard deviation of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mut sorted = values.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        let m = sorted.len();
        let median = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
        };
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            median,
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

/// Aggregated evaluation over many cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseResult>,
    pub dsc: Summary,
    /// Absent when no case has a defined surface distance.
    pub asd: Option<Summary>,
    /// Cases whose surface distance is undefined.
    pub asd_missing: usize,
    /// Always `"population"`.
    pub std_kind: String,
}

pub const ROW_LABELS: [&str; 4] = ["Median DSC", "Mean(Std) DSC", "Median ASD", "Mean(Std) ASD"];

impl EvalReport {
    pub fn aggregate(cases: Vec<CaseResult>) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("cannot aggregate zero cases".into()));
        }
        if let Some(bad) = cases
            .iter()
            .find(|c| !c.dsc.is_finite() || c.asd_mm.is_some_and(|a| !a.is_finite() || a < 0.0))
        {
            return Err(Error::InvalidArgument(alloc::format!("case `{}` has a non-finite metric", bad.id)));
        }
        let dscs: Vec<f64> = cases.iter().map(|c| c.dsc).collect();
        let asds: Vec<f64> = cases.iter().filter_map(|c| c.asd_mm).collect();
        Ok(Self {
            dsc: Summary::of(&dscs).expect("non-empty"),
            asd: Summary::of(&asds),
            asd_missing: cases.len() - asds.len(),
            std_kind: "population".into(),
            cases,
        })
    }

    /// `(label, value)` rows of the summary table.
    pub fn rows(&self) -> [(&'static str, String); 4] {
        let na = || String::from("n/a");
        [
            (ROW_LABELS[0], alloc::format!("{:.3}", self.dsc.median)),
            (ROW_LABELS[1], alloc::format!("{:.3}({:.3})", self.dsc.mean, self.dsc.std)),
            (ROW_LABELS[2], self.asd.map_or_else(na, |a| alloc::format!("{:.3}", a.median))),
            (
                ROW_LABELS[3],
                self.asd.map_or_else(na, |a| alloc::format!("{:.3}({:.3})", a.mean, a.std)),
            ),
        ]
    }

    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (label, value) in rows {
            let _ = writeln!(out, "{label:<width$}  {value}");
        }
        let _ = writeln!(
            out,
            "{:<width$}  {} ({} without ASD)",
            "Cases",
            self.cases.len(),
            self.asd_missing
        );
        out
    }

    /// Per-case CSV with header `id,dsc,asd_mm` (empty field for missing ASD).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dsc,asd_mm\n");
        for c in &self.cases {
            let asd = c.asd_mm.map(|a| alloc::format!("{a}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", c.id, c.dsc, asd);
        }
        out
    }
}
