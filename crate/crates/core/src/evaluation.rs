//! Cityscapes-style instance AP: greedy matching per class and overlap,
//! pooled over images, plus PSNR curves and branch gain tables.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::distortions::{DistortionKind, DistortionSpec};
use crate::error::{Error, Result};
use crate::scenes::{Decibels, InstanceAnnotation, Mask};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn overlaps() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub fn instance_iou(a: &Mask, b: &Mask) -> Result<f64> {
    let inter = a.intersection(b)?;
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// One predicted instance. Same JSON shape as a ground-truth annotation
/// with `score` in place of `instance_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_id: u32,
    pub score: f64,
    pub mask: Mask,
}

/// Per-image prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub id: String,
    pub predictions: Vec<Prediction>,
}

/// A prediction reduced to what matching needs.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub image: usize,
    pub score: f64,
    pub area: usize,
    /// IoU with each GT of the same image and class, in GT order.
    pub ious: Vec<f64>,
}

/// Score desc, mask size desc, then input order.
pub fn ranking(cands: &[Candidate]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&cands[a], &cands[b]);
        cb.score
            .total_cmp(&ca.score)
            .then(cb.area.cmp(&ca.area))
            .then(a.cmp(&b))
    });
    order
}

/// TP flags in ranked order. Each prediction takes the highest-IoU unmatched
/// GT of its image with IoU >= `threshold`; ties go to the lower GT index.
pub fn greedy_matches(cands: &[Candidate], gts_per_image: &[usize], threshold: f64) -> Vec<bool> {
    let mut taken: Vec<Vec<bool>> = gts_per_image.iter().map(|&n| vec![false; n]).collect();
    ranking(cands)
        .into_iter()
        .map(|i| {
            let c = &cands[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in c.ious.iter().enumerate() {
                if taken[c.image][g] || iou < threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[c.image][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated AP under the monotone precision envelope.
pub fn ap_from_ranked(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Single-class, single-image AP.
pub fn average_precision(preds: &[(f64, Mask)], gts: &[Mask], threshold: f64) -> Result<f64> {
    let cands = preds
        .iter()
        .map(|(score, m)| {
            Ok(Candidate {
                image: 0,
                score: *score,
                area: m.area(),
                ious: gts.iter().map(|g| instance_iou(m, g)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ap_from_ranked(&greedy_matches(&cands, &[gts.len()], threshold), gts.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: u32,
    pub gt_instances: usize,
    pub predictions: usize,
    /// AP at each overlap; `None` when the class has no ground truth.
    pub ap_per_overlap: Option<Vec<f64>>,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overlaps: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes with at least one GT instance (0 if none).
    pub map: f64,
    pub images: usize,
    pub gt_instances: usize,
    pub predictions: usize,
    #[serde(default)]
    pub mean_psnr: Option<Decibels>,
}

/// Per-class AP pooled over all images (one PR curve per class and
/// overlap), averaged over the overlaps; mAP over classes present in GT.
pub fn map_cityscapes(
    preds: &BTreeMap<String, Vec<Prediction>>,
    gts: &BTreeMap<String, Vec<InstanceAnnotation>>,
    classes: usize,
) -> Result<EvalReport> {
    map_cityscapes_at(preds, gts, classes, &overlaps())
}

/// As [`map_cityscapes`] on a custom overlap grid.
pub fn map_cityscapes_at(
    preds: &BTreeMap<String, Vec<Prediction>>,
    gts: &BTreeMap<String, Vec<InstanceAnnotation>>,
    classes: usize,
    overlaps: &[f64],
) -> Result<EvalReport> {
    if let Some(unknown) = preds.keys().find(|k| !gts.contains_key(*k)) {
        return Err(Error::UnknownImage(unknown.clone()));
    }
    if overlaps.is_empty() || overlaps.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::InvalidArgument(format!("overlaps must be a nonempty list in [0, 1], got {overlaps:?}")));
    }
    let ovl = overlaps.to_vec();
    let empty = Vec::new();
    let mut class_reports = Vec::with_capacity(classes);
    for class in 0..classes as u32 {
        let mut cands = Vec::new();
        let mut gts_per_image = Vec::with_capacity(gts.len());
        for (image, (id, anns)) in gts.iter().enumerate() {
            let gt_masks: Vec<&Mask> = anns.iter().filter(|a| a.class_id == class).map(|a| &a.mask).collect();
            gts_per_image.push(gt_masks.len());
            for p in preds.get(id).unwrap_or(&empty).iter().filter(|p| p.class_id == class) {
                cands.push(Candidate {
                    image,
                    score: p.score,
                    area: p.mask.area(),
                    ious: gt_masks.iter().map(|g| instance_iou(&p.mask, g)).collect::<Result<_>>()?,
                });
            }
        }
        let n_gt: usize = gts_per_image.iter().sum();
        let ap_per_overlap = (n_gt > 0).then(|| {
            ovl.iter()
                .map(|&t| ap_from_ranked(&greedy_matches(&cands, &gts_per_image, t), n_gt))
                .collect::<Vec<_>>()
        });
        let ap = ap_per_overlap.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64);
        class_reports.push(ClassReport {
            class_id: class,
            gt_instances: n_gt,
            predictions: cands.len(),
            ap_per_overlap,
            ap,
        });
    }
    let present: Vec<f64> = class_reports.iter().filter_map(|c| c.ap).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalReport {
        overlaps: ovl,
        map,
        images: gts.len(),
        gt_instances: class_reports.iter().map(|c| c.gt_instances).sum(),
        predictions: preds.values().map(Vec::len).sum(),
        classes: class_reports,
        mean_psnr: None,
    })
}

// ---------------------------------------------------------------- curves and gains

/// A point on a distortion grid. `Ord` uses the total order on levels.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GridCell {
    pub kind: DistortionKind,
    pub level: f64,
}

impl From<DistortionSpec> for GridCell {
    fn from(s: DistortionSpec) -> Self {
        Self {
            kind: s.kind,
            level: s.level,
        }
    }
}

impl PartialEq for GridCell {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for GridCell {}
impl PartialOrd for GridCell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for GridCell {
    fn cmp(&self, other: &Self) -> Ordering {
        self.kind.cmp(&other.kind).then(self.level.total_cmp(&other.level))
    }
}

pub type MapGrid = BTreeMap<GridCell, f64>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    /// Distortion kind name, or `pristine`.
    pub kind: String,
    pub level: Option<f64>,
    pub psnr: f64,
    pub map: f64,
}

fn fmt_psnr(p: f64) -> String {
    if p.is_infinite() && p > 0.0 {
        "inf".into()
    } else {
        format!("{p:.4}")
    }
}

/// Rows `(kind, level, mean PSNR, mAP)`, sorted ascending by PSNR within
/// each kind. `None` keys the pristine evaluation.
pub fn map_over_psnr(reports: &[(Option<DistortionSpec>, &EvalReport)]) -> Result<Vec<CurveRow>> {
    let mut rows = reports
        .iter()
        .map(|(spec, r)| {
            let label = spec.map_or_else(|| "pristine".to_owned(), |s| s.to_string());
            let psnr = match (spec, r.mean_psnr) {
                (_, Some(Decibels(p))) => p,
                (None, None) => f64::INFINITY,
                (Some(_), None) => return Err(Error::MissingPsnr(label)),
            };
            Ok(CurveRow {
                kind: spec.map_or_else(|| "pristine".to_owned(), |s| s.kind.name().to_owned()),
                level: spec.map(|s| s.level),
                psnr,
                map: r.map,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.kind.cmp(&b.kind).then(a.psnr.total_cmp(&b.psnr)));
    Ok(rows)
}

pub fn write_curve_csv(rows: &[CurveRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(["kind", "level", "psnr", "map"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.kind.clone(),
            r.level.map(|l| l.to_string()).unwrap_or_default(),
            fmt_psnr(r.psnr),
            format!("{:.6}", r.map),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub kind: DistortionKind,
    pub oracle_gain: f64,
    pub proposed_gain: f64,
    /// `oracle_gain - proposed_gain`.
    pub difference: f64,
}

/// Per kind, the mean over levels of oracle and proposed mAP gains over the
/// baseline.
pub fn gain_table(baseline: &MapGrid, oracle: &MapGrid, proposed: &MapGrid) -> Result<Vec<GainRow>> {
    let all: BTreeSet<GridCell> = baseline.keys().chain(oracle.keys()).chain(proposed.keys()).copied().collect();
    let mut missing = Vec::new();
    for cell in &all {
        for (name, grid) in [("baseline", baseline), ("oracle", oracle), ("proposed", proposed)] {
            if !grid.contains_key(cell) {
                missing.push(format!("{name}:{}:{}", cell.kind, cell.level));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::GridMismatch(missing));
    }
    let mut rows = Vec::new();
    for kind in DistortionKind::ALL {
        let cells: Vec<&GridCell> = all.iter().filter(|c| c.kind == kind).collect();
        if cells.is_empty() {
            continue;
        }
        let n = cells.len() as f64;
        let oracle_gain = cells.iter().map(|c| oracle[*c] - baseline[*c]).sum::<f64>() / n;
        let proposed_gain = cells.iter().map(|c| proposed[*c] - baseline[*c]).sum::<f64>() / n;
        rows.push(GainRow {
            kind,
            oracle_gain,
            proposed_gain,
            difference: oracle_gain - proposed_gain,
        });
    }
    Ok(rows)
}

pub fn write_gain_csv(rows: &[GainRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(["kind", "oracle_gain", "proposed_gain", "difference"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.kind.name().to_owned(),
            format!("{:.6}", r.oracle_gain),
            format!("{:.6}", r.proposed_gain),
            format!("{:.6}", r.difference),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
