//! Detection, position and combined training losses.

use super::{Forward, LossWeights, PositionLabel};
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::detect::{encode, iou, BBox};
use crate::error::{Error, Result};

/// Per-anchor training target for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    /// 1 positive, 0 negative, -1 ignored.
    pub labels: Vec<i8>,
    /// Regression target of each positive anchor (zero elsewhere).
    pub deltas: Vec<[f64; 4]>,
}

impl AnchorTargets {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn num_negative(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 0).count()
    }
}

/// IoU-based assignment: positive if the best overlap is at least `pos_iou`,
/// negative below `neg_iou`, ignored otherwise. Ties go to the earlier box.
/// Positive targets are the encoded deltas divided by `delta_std`.
pub fn assign_anchors(anchors: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64, delta_std: [f64; 4]) -> AnchorTargets {
    let mut labels = Vec::with_capacity(anchors.len());
    let mut deltas = Vec::with_capacity(anchors.len());
    for a in anchors {
        let mut best = (0.0, usize::MAX);
        for (j, g) in gts.iter().enumerate() {
            let o = iou(a, g);
            if o > best.0 {
                best = (o, j);
            }
        }
        if best.1 != usize::MAX && best.0 >= pos_iou {
            labels.push(1);
            let d = encode(a, &gts[best.1]);
            deltas.push([0, 1, 2, 3].map(|j| d[j] / delta_std[j]));
        } else {
            labels.push(if best.0 < neg_iou { 0 } else { -1 });
            deltas.push([0.0; 4]);
        }
    }
    AnchorTargets { labels, deltas }
}

#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    pub total: Var,
    pub objectness: Var,
    pub regression: Var,
}

/// Objectness BCE averaged over positive anchors, plus the same averaged over
/// negative anchors, plus `lambda_reg` times smooth-L1 on deltas averaged over
/// positive anchors. Counts are pooled over the batch; an empty set
/// contributes nothing.
///
/// `cls[l]` is `[N, A, H, W]`, `reg[l]` is `[N, 4A, H, W]` and `targets[n]`
/// lists image `n`'s anchors in (level, ratio, y, x) order.
pub fn detection_loss<T: Real>(
    tape: &mut Tape<T>,
    cls: &[Var],
    reg: &[Var],
    targets: &[AnchorTargets],
    lambda_reg: f64,
) -> Result<DetectionLoss> {
    if cls.is_empty() || cls.len() != reg.len() {
        return Err(Error::Empty("anchors"));
    }
    let n_pos: usize = targets.iter().map(AnchorTargets::num_positive).sum();
    let n_neg: usize = targets.iter().map(AnchorTargets::num_negative).sum();
    let w_pos = T::c(1.0 / n_pos.max(1) as f64);
    let w_neg = T::c(1.0 / n_neg.max(1) as f64);
    let mut obj_terms = Vec::new();
    let mut reg_terms = Vec::new();
    let mut offset = 0;
    for (&c, &r) in cls.iter().zip(reg) {
        let [n, a, h, w] = tape.value(c).dims4();
        let hw = h * w;
        if tape.value(r).shape() != [n, 4 * a, h, w] {
            return Err(Error::ShapeMismatch(format!("regression {:?} for objectness {:?}", tape.value(r).shape(), [n, a, h, w])));
        }
        if targets.len() != n {
            return Err(Error::ShapeMismatch(format!("{} target sets for batch {n}", targets.len())));
        }
        let per_image = a * hw;
        let mut ot = vec![T::c(0.0); n * per_image];
        let mut ow = vec![T::c(0.0); n * per_image];
        let mut rt = vec![T::c(0.0); n * 4 * per_image];
        let mut rw = vec![T::c(0.0); n * 4 * per_image];
        for (img, t) in targets.iter().enumerate() {
            if t.labels.len() < offset + per_image {
                return Err(Error::ShapeMismatch(format!("{} anchor targets, head has more", t.labels.len())));
            }
            for i in 0..per_image {
                let label = t.labels[offset + i];
                if label < 0 {
                    continue;
                }
                ot[img * per_image + i] = T::c(label as f64);
                ow[img * per_image + i] = if label == 1 { w_pos } else { w_neg };
                if label == 1 {
                    let (ai, pos) = (i / hw, i % hw);
                    for j in 0..4 {
                        let k = img * 4 * per_image + (ai * 4 + j) * hw + pos;
                        rt[k] = T::c(t.deltas[offset + i][j]);
                        rw[k] = w_pos;
                    }
                }
            }
        }
        obj_terms.push(tape.bce_with_logits(c, &ot, &ow)?);
        reg_terms.push(tape.smooth_l1(r, &rt, &rw)?);
        offset += per_image;
    }
    if let Some(t) = targets.iter().find(|t| t.labels.len() != offset) {
        return Err(Error::ShapeMismatch(format!("{} anchor targets for {offset} anchors", t.labels.len())));
    }
    let obj_sum = sum_all(tape, &obj_terms)?;
    let reg_sum = sum_all(tape, &reg_terms)?;
    let objectness = obj_sum;
    let regression = reg_sum;
    let weighted = tape.scale(regression, T::c(lambda_reg));
    let total = tape.add(objectness, weighted)?;
    Ok(DetectionLoss { total, objectness, regression })
}

fn sum_all<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Batch-mean cross-entropy of the zone logits plus batch-mean squared error
/// of the continuous position.
pub fn position_loss<T: Real>(tape: &mut Tape<T>, logits: Var, regress: Var, labels: &[PositionLabel]) -> Result<Var> {
    let n = labels.len();
    let shape = tape.value(logits).shape().to_vec();
    if shape != [n, 3] {
        return Err(Error::ShapeMismatch(format!("zone logits {shape:?} for {n} labels")));
    }
    if tape.value(regress).shape() != [n, 1] {
        return Err(Error::ShapeMismatch(format!("position output {:?} for {n} labels", tape.value(regress).shape())));
    }
    let onehot = Tensor::from_fn(&[n, 3], |i| T::c(if labels[i / 3].zone.index() == i % 3 { 1.0 } else { 0.0 }));
    let p = Tensor::from_fn(&[n, 1], |i| T::c(labels[i].p));
    let ce = tape.softmax_cross_entropy(logits, &onehot)?;
    let se = tape.mse(regress, &p)?;
    tape.add(ce, se)
}

#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub total: Var,
    pub detection: DetectionLoss,
    pub position: Option<Var>,
}

/// `detection + lambda_pos * position`; the position term is present only
/// when the model has a position head.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    out: &Forward,
    targets: &[AnchorTargets],
    positions: &[PositionLabel],
    weights: &LossWeights,
) -> Result<TotalLoss> {
    let detection = detection_loss(tape, &out.cls, &out.reg, targets, weights.lambda_reg)?;
    let (total, position) = match out.position {
        Some((logits, regress)) => {
            let pos = position_loss(tape, logits, regress, positions)?;
            let scaled = tape.scale(pos, T::c(weights.lambda_pos));
            (tape.add(detection.total, scaled)?, Some(pos))
        }
        None => (detection.total, None),
    };
    Ok(TotalLoss { total, detection, position })
}
