//! Free-response ROC: sensitivity at fixed average false positives per image.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::detect::{iou, BBox, Detection};
use crate::error::{Error, Result};

pub const DEFAULT_RATES: [f64; 5] = [0.5, 1.0, 2.0, 3.0, 4.0];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub image_id: String,
    pub gt_boxes: Vec<BBox>,
    pub detections: Vec<Detection>,
}

/// Detection indices by descending score; earlier index first on ties.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching. Returns one TP flag per detection, in input order.
///
/// Detections are visited by descending score; each takes the unmatched gt
/// with the highest IoU (lowest index on ties) if that IoU is `>= iou_thresh`.
pub fn match_detections(case: &EvalCase, iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; case.gt_boxes.len()];
    let mut tp = vec![false; case.detections.len()];
    for i in score_order(&case.detections) {
        let d = &case.detections[i].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in case.gt_boxes.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(d, gt);
            if v >= iou_thresh && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp[i] = true;
        }
    }
    tp
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fps_per_image: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    /// One point per distinct positive score, by descending threshold.
    pub points: Vec<OperatingPoint>,
    pub n_images: usize,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub rates: Vec<f64>,
    pub sensitivities: Vec<f64>,
}

impl FrocCurve {
    /// Best sensitivity among operating points at or below `rate` FPs/image.
    pub fn sensitivity_at(&self, rate: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fps_per_image <= rate)
            .map(|p| p.sensitivity)
            .fold(0.0, f64::max)
    }

    pub fn report(&self, rates: &[f64]) -> SensitivityReport {
        SensitivityReport { rates: rates.to_vec(), sensitivities: rates.iter().map(|&r| self.sensitivity_at(r)).collect() }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fps_per_image,sensitivity\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.fps_per_image, p.sensitivity);
        }
        s
    }
}

/// Sweeps the score threshold over every distinct positive detection score.
/// Zero-score detections never count as emitted.
pub fn froc(cases: &[EvalCase], iou_thresh: f64) -> Result<FrocCurve> {
    if cases.is_empty() {
        return Err(Error::Empty("evaluation images"));
    }
    let n_gt: usize = cases.iter().map(|c| c.gt_boxes.len()).sum();
    if n_gt == 0 {
        return Err(Error::Empty("ground-truth boxes"));
    }
    // greedy matching is prefix-stable in score order, so one pass per image
    // gives the TP flags for every threshold
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for c in cases {
        let flags = match_detections(c, iou_thresh);
        scored.extend(c.detections.iter().zip(flags).filter(|(d, _)| d.score > 0.0).map(|(d, tp)| (d.score, tp)));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_images = cases.len() as f64;
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(OperatingPoint { threshold: s, fps_per_image: fp as f64 / n_images, sensitivity: tp as f64 / n_gt as f64 });
    }
    Ok(FrocCurve { points, n_images: cases.len(), n_gt })
}

fn fmt_rate(r: f64) -> String {
    if r.fract() == 0.0 {
        format!("{r:.0}")
    } else {
        format!("{r}")
    }
}

/// Table with one row per method and one column per FP rate, in percent.
pub fn report_table(rates: &[f64], rows: &[(String, SensitivityReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).chain(std::iter::once("FPs per image".len())).max().unwrap_or(0);
    let mut s = format!("{:<name_w$}", "FPs per image");
    for &r in rates {
        let _ = write!(s, " {:>7}", fmt_rate(r));
    }
    s.push('\n');
    for (name, rep) in rows {
        let _ = write!(s, "{name:<name_w$}");
        for v in &rep.sensitivities {
            let _ = write!(s, " {:>7.2}", v * 100.0);
        }
        s.push('\n');
    }
    s
}

/// Parses ground truth: `image_id x1 y1 x2 y2` per box, or a bare
/// `image_id` for an image without lesions.
pub fn parse_ground_truth(text: &str) -> Result<BTreeMap<String, Vec<BBox>>> {
    let mut out: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.len() {
            0 => continue,
            _ if toks[0].starts_with('#') => continue,
            1 => {
                out.entry(toks[0].to_string()).or_default();
            }
            5 => {
                let v = parse_nums(&toks[1..], n)?;
                out.entry(toks[0].to_string()).or_default().push(BBox::new(v[0], v[1], v[2], v[3])?);
            }
            _ => return Err(Error::Parse(format!("gt line {}: expected `image_id x1 y1 x2 y2`", n + 1))),
        }
    }
    Ok(out)
}

/// Parses `image_id score x1 y1 x2 y2` lines.
pub fn parse_detections(text: &str) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() || toks[0].starts_with('#') {
            continue;
        }
        if toks.len() != 6 {
            return Err(Error::Parse(format!("detection line {}: expected `image_id score x1 y1 x2 y2`", n + 1)));
        }
        let v = parse_nums(&toks[1..], n)?;
        if !(0.0..=1.0).contains(&v[0]) {
            return Err(Error::Parse(format!("detection line {}: score {} outside [0, 1]", n + 1, v[0])));
        }
        let bbox = BBox::new(v[1], v[2], v[3], v[4])?;
        out.entry(toks[0].to_string()).or_default().push(Detection { bbox, score: v[0] });
    }
    Ok(out)
}

fn parse_nums(toks: &[&str], line: usize) -> Result<Vec<f64>> {
    toks.iter()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("line {}: bad number {t:?}", line + 1))))
        .collect()
}

pub fn format_detections(image_id: &str, dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = d.bbox;
        let _ = writeln!(s, "{image_id} {} {} {} {} {}", d.score, b.x1, b.y1, b.x2, b.y2);
    }
    s
}

/// Joins ground truth and detections by image id; every id seen in either
/// input is one image.
pub fn build_cases(gt: BTreeMap<String, Vec<BBox>>, mut dets: BTreeMap<String, Vec<Detection>>) -> Vec<EvalCase> {
    let mut cases: Vec<EvalCase> = gt
        .into_iter()
        .map(|(id, gt_boxes)| {
            let detections = dets.remove(&id).unwrap_or_default();
            EvalCase { image_id: id, gt_boxes, detections }
        })
        .collect();
    cases.extend(dets.into_iter().map(|(id, detections)| EvalCase { image_id: id, gt_boxes: Vec::new(), detections }));
    cases
}
