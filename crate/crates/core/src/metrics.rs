//! Grounding accuracy at IoU thresholds, mean IoU and detection
//! precision/recall, with CSV export.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::geometry::{aabb_iou, rotated_iou_3d, Box3D};

pub const THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub scene_id: String,
    pub pred: Box3D,
    pub gt: Box3D,
    /// Rotated 3D IoU.
    pub iou: f64,
    pub aabb_iou: f64,
}

impl EvalRecord {
    pub fn new(scene_id: impl Into<String>, pred: Box3D, gt: Box3D) -> Self {
        Self {
            scene_id: scene_id.into(),
            iou: rotated_iou_3d(&pred, &gt),
            aabb_iou: aabb_iou(&pred, &gt).clamp(0.0, 1.0),
            pred,
            gt,
        }
    }
}

/// Fraction of records with `iou >= thr`.
pub fn accuracy_at(records: &[EvalRecord], thr: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("accuracy_at"));
    }
    Ok(records.iter().filter(|r| r.iou >= thr).count() as f64 / records.len() as f64)
}

pub fn mean_iou(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("mean_iou"));
    }
    Ok(records.iter().map(|r| r.iou).sum::<f64>() / records.len() as f64)
}

/// Running accumulator producing the same summary as the batch functions.
#[derive(Clone, Debug, Default)]
pub struct StreamingEval {
    n: usize,
    mean: f64,
    hits: [usize; 2],
}

impl StreamingEval {
    pub fn push(&mut self, iou: f64) {
        self.n += 1;
        self.mean += (iou - self.mean) / self.n as f64;
        for (h, t) in self.hits.iter_mut().zip(THRESHOLDS) {
            *h += (iou >= t) as usize;
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn mean_iou(&self) -> Result<f64> {
        if self.n == 0 {
            return Err(Error::Empty("mean_iou"));
        }
        Ok(self.mean)
    }

    pub fn accuracy(&self) -> Result<[f64; 2]> {
        if self.n == 0 {
            return Err(Error::Empty("accuracy_at"));
        }
        Ok(self.hits.map(|h| h as f64 / self.n as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub matched: usize,
    pub predicted: usize,
    pub ground_truth: usize,
    /// No predictions at all: precision is undefined and reported as 0.
    pub precision_undefined: bool,
}

/// Greedy one-to-one matching by descending IoU among pairs at or above `thr`.
/// Ties go to the lower prediction index, then the lower ground-truth index.
pub fn greedy_match(pred: &[Box3D], gt: &[Box3D], thr: f64) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let iou = rotated_iou_3d(p, g);
            if iou >= thr && iou > 0.0 {
                pairs.push((iou, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Precision and recall aggregated over scenes.
pub fn detection_pr(pred: &[Vec<Box3D>], gt: &[Vec<Box3D>], thr: f64) -> Result<PrecisionRecall> {
    if pred.len() != gt.len() {
        return Err(invalid("detection_pr", format!("{} prediction scenes for {} ground-truth scenes", pred.len(), gt.len())));
    }
    if let Some(b) = pred.iter().chain(gt).flatten().find(|b| !b.is_valid()) {
        return Err(invalid("detection_pr", format!("invalid box {b:?}")));
    }
    let matched: usize = pred.iter().zip(gt).map(|(p, g)| greedy_match(p, g, thr).len()).sum();
    let predicted: usize = pred.iter().map(Vec::len).sum();
    let ground_truth: usize = gt.iter().map(Vec::len).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(PrecisionRecall {
        precision: ratio(matched, predicted),
        recall: ratio(matched, ground_truth),
        matched,
        predicted,
        ground_truth,
        precision_undefined: predicted == 0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub acc_025: f64,
    pub acc_05: f64,
    pub miou: f64,
    pub aabb_miou: f64,
    pub n_samples: usize,
    /// Detection precision/recall at 0.25 and 0.5 when candidate sets are scored.
    pub detection: Option<[PrecisionRecall; 2]>,
    /// Mean wall-clock seconds per scene, when measured.
    pub latency: Option<f64>,
}

impl EvalSummary {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        Ok(Self {
            acc_025: accuracy_at(records, THRESHOLDS[0])?,
            acc_05: accuracy_at(records, THRESHOLDS[1])?,
            miou: mean_iou(records)?,
            aabb_miou: records.iter().map(|r| r.aabb_iou).sum::<f64>() / records.len() as f64,
            n_samples: records.len(),
            detection: None,
            latency: None,
        })
    }

    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("acc@0.25".to_string(), self.acc_025),
            ("acc@0.5".to_string(), self.acc_05),
            ("miou".to_string(), self.miou),
            ("aabb_miou".to_string(), self.aabb_miou),
            ("n_samples".to_string(), self.n_samples as f64),
        ];
        if let Some(d) = &self.detection {
            for (pr, t) in d.iter().zip(THRESHOLDS) {
                rows.push((format!("precision@{t}"), pr.precision));
                rows.push((format!("recall@{t}"), pr.recall));
            }
        }
        if let Some(l) = self.latency {
            rows.push(("latency_s".to_string(), l));
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

/// `metric,value` rows of a summary file.
pub fn parse_summary_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let (k, v) = line
            .split_once(',')
            .ok_or_else(|| invalid("parse_summary_csv", format!("line {}: expected metric,value", i + 1)))?;
        let v = v
            .parse()
            .map_err(|_| invalid("parse_summary_csv", format!("line {}: bad value {v:?}", i + 1)))?;
        out.push((k.to_string(), v));
    }
    Ok(out)
}

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from("scene_id,iou,success@0.25,success@0.5,aabb_iou\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.scene_id,
            r.iou,
            (r.iou >= THRESHOLDS[0]) as u8,
            (r.iou >= THRESHOLDS[1]) as u8,
            r.aabb_iou
        );
    }
    s
}

pub fn write_records_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    Ok(std::fs::write(path, records_csv(records))?)
}

/// Per-scene `(scene_id, iou, aabb_iou)` from a records file.
pub fn parse_records_csv(text: &str) -> Result<Vec<(String, f64, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || invalid("parse_records_csv", format!("line {}: {line:?}", i + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        let iou: f64 = f[1].parse().map_err(|_| bad())?;
        let aabb: f64 = f[4].parse().map_err(|_| bad())?;
        out.push((f[0].to_string(), iou, aabb));
    }
    Ok(out)
}
