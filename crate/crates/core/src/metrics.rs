//! Overlap and tree-completeness metrics for binary predictions.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Branch;
use crate::volume::Mask;

/// Fraction of a branch region that must be predicted for the branch to count as detected.
pub const BRANCH_DETECTION_THRESHOLD: f64 = 0.8;

fn check(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("metrics", format!("{:?} vs {:?}", pred.dims(), gt.dims())));
    }
    Ok(())
}

fn counts(pred: &Mask, gt: &Mask) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &y) in pred.data().iter().zip(gt.data()) {
        match (p != 0, y != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

/// `|pred & gt| / |pred | gt|`; two empty masks score 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    check(pred, gt)?;
    let (tp, fp, fn_) = counts(pred, gt);
    let union = tp + fp + fn_;
    Ok(if union == 0 { 1.0 } else { tp as f64 / union as f64 })
}

pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    check(pred, gt)?;
    let (tp, fp, fn_) = counts(pred, gt);
    let den = 2 * tp + fp + fn_;
    Ok(if den == 0 { 1.0 } else { 2.0 * tp as f64 / den as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Precision {
    pub value: f64,
    /// Set when the prediction is empty; `value` is then 0.
    pub empty_prediction: bool,
}

pub fn precision(pred: &Mask, gt: &Mask) -> Result<Precision> {
    check(pred, gt)?;
    let (tp, fp, _) = counts(pred, gt);
    Ok(if tp + fp == 0 {
        Precision {
            value: 0.0,
            empty_prediction: true,
        }
    } else {
        Precision {
            value: tp as f64 / (tp + fp) as f64,
            empty_prediction: false,
        }
    })
}

/// Missed ground-truth volume over ground-truth volume; 0 for an empty ground truth.
pub fn amr(pred: &Mask, gt: &Mask) -> Result<f64> {
    check(pred, gt)?;
    let (tp, _, fn_) = counts(pred, gt);
    Ok(if tp + fn_ == 0 { 0.0 } else { fn_ as f64 / (tp + fn_) as f64 })
}

/// Covered ground-truth volume over ground-truth volume (`1 - amr`).
pub fn detected_fraction(pred: &Mask, gt: &Mask) -> Result<f64> {
    check(pred, gt)?;
    let (tp, _, fn_) = counts(pred, gt);
    Ok(if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 })
}

/// Centerline voxels inside `pred` over all centerline voxels.
pub fn dlr(pred: &Mask, branches: &[Branch]) -> Result<f64> {
    let mut total = 0usize;
    let mut hit = 0usize;
    for b in branches {
        for &p in &b.centerline {
            if !pred.contains(p) {
                return Err(Error::invalid("dlr", format!("centerline voxel {p:?} outside {:?}", pred.dims())));
            }
            total += 1;
            hit += usize::from(pred.get(p) != 0);
        }
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// Ground-truth voxels grouped by the branch owning their nearest
/// centerline voxel (squared Euclidean distance; ties go to the lower branch id).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPartition {
    /// Branch ids in ascending order.
    pub ids: Vec<usize>,
    /// Voxel coordinates per entry of `ids`.
    pub regions: Vec<Vec<[usize; 3]>>,
}

impl BranchPartition {
    pub fn new(gt: &Mask, branches: &[Branch]) -> Self {
        let mut order: Vec<&Branch> = branches.iter().collect();
        order.sort_by_key(|b| b.id);
        let ids: Vec<usize> = order.iter().map(|b| b.id).collect();
        let centre: Vec<([i64; 3], usize)> = order
            .iter()
            .enumerate()
            .flat_map(|(slot, b)| b.centerline.iter().map(move |p| (p.map(|v| v as i64), slot)))
            .collect();
        let mut regions = vec![Vec::new(); ids.len()];
        if centre.is_empty() {
            return BranchPartition { ids, regions };
        }
        for p in gt.foreground() {
            let q = p.map(|v| v as i64);
            let mut best = (i64::MAX, usize::MAX);
            for &(c, slot) in &centre {
                let d = (0..3).map(|a| (q[a] - c[a]).pow(2)).sum::<i64>();
                if (d, slot) < best {
                    best = (d, slot);
                }
            }
            regions[best.1].push(p);
        }
        BranchPartition { ids, regions }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchDetail {
    pub branch_id: usize,
    pub detected: bool,
    /// Fraction of the branch's centerline voxels inside the prediction.
    pub centerline_coverage: f64,
    /// Predicted fraction of the branch region.
    pub branch_iou: f64,
    pub region_voxels: usize,
}

/// Per-branch detection; branches whose region is empty are reported but not counted.
pub fn branch_details(pred: &Mask, gt: &Mask, branches: &[Branch]) -> Result<Vec<BranchDetail>> {
    check(pred, gt)?;
    let part = BranchPartition::new(gt, branches);
    let mut out = Vec::with_capacity(part.ids.len());
    for (id, region) in part.ids.iter().zip(&part.regions) {
        let branch = branches.iter().find(|b| b.id == *id).expect("partition ids come from branches");
        let inside = region.iter().filter(|&&p| pred.get(p) != 0).count();
        let frac = if region.is_empty() { 0.0 } else { inside as f64 / region.len() as f64 };
        let cov = if branch.centerline.is_empty() {
            0.0
        } else {
            branch.centerline.iter().filter(|&&p| pred.get(p) != 0).count() as f64 / branch.centerline.len() as f64
        };
        out.push(BranchDetail {
            branch_id: *id,
            detected: !region.is_empty() && frac > BRANCH_DETECTION_THRESHOLD,
            centerline_coverage: cov,
            branch_iou: frac,
            region_voxels: region.len(),
        });
    }
    Ok(out)
}

/// Detected branches over branches with a non-empty region.
pub fn dbr(pred: &Mask, gt: &Mask, branches: &[Branch]) -> Result<f64> {
    Ok(dbr_from(&branch_details(pred, gt, branches)?))
}

fn dbr_from(details: &[BranchDetail]) -> f64 {
    let counted = details.iter().filter(|d| d.region_voxels > 0).count();
    let hit = details.iter().filter(|d| d.detected).count();
    if counted == 0 {
        1.0
    } else {
        hit as f64 / counted as f64
    }
}

/// Accuracy restricted to `points`; `None` when there are none.
pub fn border_accuracy(pred: &Mask, gt: &Mask, points: &[[usize; 3]]) -> Result<Option<f64>> {
    check(pred, gt)?;
    if points.is_empty() {
        return Ok(None);
    }
    let ok = points.iter().filter(|&&p| pred.get(p) == gt.get(p)).count();
    Ok(Some(ok as f64 / points.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    pub iou: f64,
    pub precision: f64,
    pub precision_empty: bool,
    pub dlr: f64,
    pub dbr: f64,
    pub amr: f64,
    pub dice: f64,
    pub detected_branches: usize,
    pub total_branches: usize,
    pub detected_length: usize,
    pub total_length: usize,
    pub missed_volume: usize,
    pub gt_volume: usize,
    pub branches: Vec<BranchDetail>,
}

pub fn evaluate(case_id: impl Into<String>, pred: &Mask, gt: &Mask, branches: &[Branch]) -> Result<MetricsReport> {
    check(pred, gt)?;
    let (tp, _, fn_) = counts(pred, gt);
    let details = branch_details(pred, gt, branches)?;
    let p = precision(pred, gt)?;
    let total_length: usize = branches.iter().map(|b| b.centerline.len()).sum();
    let detected_length = branches
        .iter()
        .flat_map(|b| &b.centerline)
        .filter(|&&c| pred.get(c) != 0)
        .count();
    Ok(MetricsReport {
        case_id: case_id.into(),
        iou: iou(pred, gt)?,
        precision: p.value,
        precision_empty: p.empty_prediction,
        dlr: dlr(pred, branches)?,
        dbr: dbr_from(&details),
        amr: amr(pred, gt)?,
        dice: dice(pred, gt)?,
        detected_branches: details.iter().filter(|d| d.detected).count(),
        total_branches: details.iter().filter(|d| d.region_voxels > 0).count(),
        detected_length,
        total_length,
        missed_volume: fn_,
        gt_volume: tp + fn_,
        branches: details,
    })
}

pub const CSV_HEADER: &str = "case_id,iou,precision,dlr,dbr,amr";

pub fn to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6},{:.6}", r.case_id, r.iou, r.precision, r.dlr, r.dbr, r.amr);
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.json` under `dir`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[MetricsReport]) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, to_csv(reports)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(reports)?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(dims: [usize; 3], lo: [usize; 3], size: usize) -> Mask {
        let mut m = Mask::zeros(dims);
        for i in 0..size {
            for j in 0..size {
                for k in 0..size {
                    m.set([lo[0] + i, lo[1] + j, lo[2] + k], 1);
                }
            }
        }
        m
    }

    #[test]
    fn overlapping_cubes() {
        let a = cube([4, 4, 4], [0, 0, 0], 2);
        let b = cube([4, 4, 4], [1, 0, 0], 2);
        assert!((iou(&a, &b).unwrap() - 4.0 / 12.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &cube([4, 4, 4], [2, 2, 2], 2)).unwrap(), 0.0);
    }

    #[test]
    fn empty_prediction_precision_is_flagged() {
        let gt = cube([4, 4, 4], [0, 0, 0], 2);
        let p = precision(&Mask::zeros([4, 4, 4]), &gt).unwrap();
        assert!(p.empty_prediction);
        assert_eq!(p.value, 0.0);
        assert_eq!(amr(&Mask::zeros([4, 4, 4]), &gt).unwrap(), 1.0);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let gt = cube([4, 4, 4], [0, 0, 0], 2);
        let r = evaluate("case_000", &gt, &gt, &[]).unwrap();
        let csv = to_csv(&[r.clone(), r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("case_000,1.000000,1.000000,"));
    }
}
