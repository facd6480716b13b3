//! Removal quality: reconstruction error against the known clean
//! background, and precision/recall/f-score of an external text detector
//! run on the outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::datagen::{load_sample, read_manifest, Split};
use crate::error::{Error, Result};
use crate::geometry::{Mask, RegionSet};
use crate::inference::{remove_text, RemovalRequest, TextRemover};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Axis-aligned box `(x1, y1)–(x2, y2)` with an optional detector score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: Option<f64>,
}

impl DetBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> std::result::Result<Self, String> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err("coordinates must be finite".into());
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(format!("degenerate box ({x1},{y1},{x2},{y2}): need x2 > x1 and y2 > y1"));
        }
        Ok(DetBox {
            x1,
            y1,
            x2,
            y2,
            score: None,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

pub fn iou(a: &DetBox, b: &DetBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Number of one-to-one matches with IoU ≥ `threshold`, taking candidate
/// pairs greedily in descending IoU order (ties by gt index, then det
/// index).
pub fn greedy_matches(gt: &[DetBox], det: &[DetBox], threshold: f64) -> usize {
    let mut pairs: Vec<(f64, usize, usize)> = gt
        .iter()
        .enumerate()
        .flat_map(|(i, g)| det.iter().enumerate().map(move |(j, d)| (iou(g, d), i, j)))
        .filter(|&(v, _, _)| v >= threshold)
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut det_used = vec![false; det.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !gt_used[i] && !det_used[j] {
            gt_used[i] = true;
            det_used[j] = true;
            tp += 1;
        }
    }
    tp
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub n_gt: usize,
    pub n_det: usize,
}

impl MatchCounts {
    pub fn of(gt: &[DetBox], det: &[DetBox], threshold: f64) -> Self {
        MatchCounts {
            true_positives: greedy_matches(gt, det, threshold),
            n_gt: gt.len(),
            n_det: det.len(),
        }
    }

    fn merged(self, o: MatchCounts) -> Self {
        MatchCounts {
            true_positives: self.true_positives + o.true_positives,
            n_gt: self.n_gt + o.n_gt,
            n_det: self.n_det + o.n_det,
        }
    }

    pub fn prf(&self) -> Prf {
        let tp = self.true_positives as f64;
        let precision = match (self.n_det, self.n_gt) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (d, _) => tp / d as f64,
        };
        let recall = if self.n_gt == 0 { 1.0 } else { tp / self.n_gt as f64 };
        Prf::new(precision, recall)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let s = precision + recall;
        Prf {
            precision,
            recall,
            f_score: if s > 0.0 { 2.0 * precision * recall / s } else { 0.0 },
        }
    }
}

/// Boxes per image id.
pub type DetectionSet = BTreeMap<String, Vec<DetBox>>;

/// Pooled precision/recall/f-score over all images. Both sets must cover
/// the same image ids.
pub fn detection_prf(gt: &DetectionSet, det: &DetectionSet, threshold: f64) -> Result<Prf> {
    Ok(pooled_counts(gt, det, threshold)?.prf())
}

pub fn pooled_counts(gt: &DetectionSet, det: &DetectionSet, threshold: f64) -> Result<MatchCounts> {
    if let Some(id) = gt.keys().find(|k| !det.contains_key(*k)).or_else(|| det.keys().find(|k| !gt.contains_key(*k))) {
        return Err(Error::Config(format!("image `{id}` is not present in both detection sets")));
    }
    Ok(gt
        .iter()
        .map(|(id, g)| MatchCounts::of(g, &det[id], threshold))
        .fold(MatchCounts::default(), MatchCounts::merged))
}

/// Parses `x1,y1,x2,y2[,score]` lines; blank lines and `#` comments are
/// skipped.
pub fn parse_detections(text: &str, path: &Path) -> Result<Vec<DetBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let fields = line
            .split(',')
            .map(|f| f.trim().parse::<f64>().map_err(|_| err(format!("`{}` is not a number", f.trim()))))
            .collect::<Result<Vec<f64>>>()?;
        if fields.len() != 4 && fields.len() != 5 {
            return Err(err(format!("expected 4 or 5 fields, found {}", fields.len())));
        }
        let mut b = DetBox::new(fields[0], fields[1], fields[2], fields[3]).map_err(err)?;
        b.score = fields.get(4).copied();
        out.push(b);
    }
    Ok(out)
}

pub fn detection_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.txt"))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path)
}

/// Ground-truth boxes: the bounding box of every annotated region.
pub fn region_boxes(regions: &RegionSet) -> Vec<DetBox> {
    regions
        .regions()
        .iter()
        .filter_map(|r| {
            let (x0, y0, x1, y1) = r.bounds();
            DetBox::new(x0, y0, x1, y1).ok()
        })
        .collect()
}

/// Reconstruction error on the 0–1 scale, split by mask. A missing value
/// means the corresponding pixel set is empty; `psnr_masked` is `+∞` for
/// a perfect match.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub masked_l1: Option<f64>,
    pub unmasked_l1: Option<f64>,
    pub psnr_masked: Option<f64>,
}

/// Raw sums behind [`RegionMetrics`], so images can be pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorSums {
    pub masked_abs: f64,
    pub masked_sq: f64,
    pub masked_values: usize,
    pub unmasked_abs: f64,
    pub unmasked_values: usize,
}

impl ErrorSums {
    pub fn of(output: &RgbImage, target: &RgbImage, mask: &Mask) -> Result<Self> {
        if output.dimensions() != target.dimensions() || (mask.width(), mask.height()) != output.dimensions() {
            return Err(Error::shape(
                format!("{:?} for output, target and mask", output.dimensions()),
                format!("{:?}, {:?}, {:?}", output.dimensions(), target.dimensions(), (mask.width(), mask.height())),
            ));
        }
        let mut s = ErrorSums::default();
        for (x, y, p) in output.enumerate_pixels() {
            let q = target.get_pixel(x, y);
            for c in 0..3 {
                let d = (p[c] as f64 - q[c] as f64) / 255.0;
                if mask.get(x, y) {
                    s.masked_abs += d.abs();
                    s.masked_sq += d * d;
                    s.masked_values += 1;
                } else {
                    s.unmasked_abs += d.abs();
                    s.unmasked_values += 1;
                }
            }
        }
        Ok(s)
    }

    fn merged(self, o: ErrorSums) -> Self {
        ErrorSums {
            masked_abs: self.masked_abs + o.masked_abs,
            masked_sq: self.masked_sq + o.masked_sq,
            masked_values: self.masked_values + o.masked_values,
            unmasked_abs: self.unmasked_abs + o.unmasked_abs,
            unmasked_values: self.unmasked_values + o.unmasked_values,
        }
    }

    pub fn metrics(&self) -> RegionMetrics {
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        RegionMetrics {
            masked_l1: mean(self.masked_abs, self.masked_values),
            unmasked_l1: mean(self.unmasked_abs, self.unmasked_values),
            psnr_masked: mean(self.masked_sq, self.masked_values).map(|mse| {
                if mse == 0.0 {
                    f64::INFINITY
                } else {
                    10.0 * (1.0 / mse).log10()
                }
            }),
        }
    }
}

pub fn region_metrics(output: &RgbImage, target: &RgbImage, mask: &Mask) -> Result<RegionMetrics> {
    Ok(ErrorSums::of(output, target, mask)?.metrics())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub metrics: RegionMetrics,
    pub counts: Option<MatchCounts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub masked_l1: Option<f64>,
    pub unmasked_l1: Option<f64>,
    pub psnr_masked: Option<f64>,
    pub detection: Option<Prf>,
    pub n_images: usize,
    pub rows: Vec<EvalRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(v) if v == f64::INFINITY => "inf".into(),
        Some(v) => format!("{v:.6}"),
    }
}

impl EvalReport {
    /// One row per image plus a final `AGGREGATE` row. Detection columns
    /// are empty when no detections were supplied.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,masked_l1,unmasked_l1,psnr_masked,precision,recall,f_score,tp,n_gt,n_det\n");
        let det_cols = |c: Option<MatchCounts>| match c {
            None => ",,,,,".to_string(),
            Some(c) => {
                let p = c.prf();
                format!(
                    "{:.6},{:.6},{:.6},{},{},{}",
                    p.precision, p.recall, p.f_score, c.true_positives, c.n_gt, c.n_det
                )
            }
        };
        for r in &self.rows {
            let m = r.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.id,
                fmt_opt(m.masked_l1),
                fmt_opt(m.unmasked_l1),
                fmt_opt(m.psnr_masked),
                det_cols(r.counts)
            );
        }
        let pooled = self
            .rows
            .iter()
            .map(|r| r.counts)
            .try_fold(MatchCounts::default(), |acc, c| c.map(|c| acc.merged(c)));
        let _ = writeln!(
            out,
            "AGGREGATE,{},{},{},{}",
            fmt_opt(self.masked_l1),
            fmt_opt(self.unmasked_l1),
            fmt_opt(self.psnr_masked),
            det_cols(pooled.filter(|_| self.detection.is_some()))
        );
        out
    }

    pub fn aggregate_line(&self) -> String {
        self.to_csv().lines().last().unwrap_or_default().to_string()
    }
}

/// Runs `remover` on every sample of the split (all regions, composite
/// mode) and scores the output against the clean background. With
/// `detections`, each `{id}.txt` in that directory holds the detector's
/// boxes for the corresponding output and is scored against the region
/// bounding boxes.
pub fn evaluate_model(
    corpus_dir: &Path,
    split: Split,
    remover: &impl TextRemover,
    detections: Option<&Path>,
    iou_threshold: f64,
) -> Result<EvalReport> {
    let manifest = read_manifest(corpus_dir)?;
    let ids: Vec<&String> = manifest.ids.iter().filter(|id| split.contains(id)).collect();
    if ids.is_empty() {
        return Err(Error::Config(format!("split {split:?} of {} is empty", corpus_dir.display())));
    }
    let mut rows = Vec::with_capacity(ids.len());
    let mut pooled = ErrorSums::default();
    let mut counts = MatchCounts::default();
    for id in ids {
        let sample = load_sample(corpus_dir, id)?;
        let mask = sample.regions.rasterize();
        let out = remove_text(&RemovalRequest::new(sample.text_image.clone(), sample.regions.clone()), remover)?;
        let sums = ErrorSums::of(&out, &sample.background_image, &mask)?;
        pooled = pooled.merged(sums);
        let c = match detections {
            Some(dir) => {
                let det = read_detections(&detection_path(dir, id))?;
                let c = MatchCounts::of(&region_boxes(&sample.regions), &det, iou_threshold);
                counts = counts.merged(c);
                Some(c)
            }
            None => None,
        };
        rows.push(EvalRow {
            id: id.clone(),
            metrics: sums.metrics(),
            counts: c,
        });
    }
    let m = pooled.metrics();
    Ok(EvalReport {
        masked_l1: m.masked_l1,
        unmasked_l1: m.unmasked_l1,
        psnr_masked: m.psnr_masked,
        detection: detections.map(|_| counts.prf()),
        n_images: rows.len(),
        rows,
    })
}
