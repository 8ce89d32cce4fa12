//! Box geometry, anchors, delta coding and greedy NMS.

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates; `x2 >= x1`, `y2 >= y1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x2 >= x1 && y2 >= y1) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid box ({x1}, {y1}, {x2}, {y2})")));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { x1: cx - w / 2.0, y1: cy - h / 2.0, x2: cx + w / 2.0, y2: cy + h / 2.0 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { x1: self.x1 * s, y1: self.y1 * s, x2: self.x2 * s, y2: self.y2 * s }
    }

    /// Mirror across the vertical centre line of an image `width` pixels wide.
    pub fn flip_horizontal(&self, width: f64) -> Self {
        Self { x1: width - self.x2, y1: self.y1, x2: width - self.x1, y2: self.y2 }
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Anchor shapes. Pyramid level `l` uses `scales[l]` with every aspect ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub scales: Vec<f64>,
    /// height / width; anchors keep the area `scale^2`.
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorSet {
    fn default() -> Self {
        Self { scales: vec![16.0, 32.0, 64.0, 128.0, 256.0], aspect_ratios: vec![0.5, 1.0, 2.0] }
    }
}

impl AnchorSet {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.aspect_ratios.is_empty() {
            return Err(Error::Config("anchor scales and ratios must be non-empty".into()));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) || self.scales[0] <= 0.0 {
            return Err(Error::Config(format!("anchor scales must be positive and strictly increasing: {:?}", self.scales)));
        }
        if self.aspect_ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config("aspect ratios must be positive".into()));
        }
        Ok(())
    }

    pub fn per_position(&self) -> usize {
        self.aspect_ratios.len()
    }

    /// (width, height) of the anchor for `scale` and ratio `r = h / w`.
    pub fn shape(scale: f64, r: f64) -> (f64, f64) {
        (scale / r.sqrt(), scale * r.sqrt())
    }
}

/// Anchors for every level, ordered (level, ratio, y, x) to line up with an
/// `[A, H, W]` head layout.
pub fn generate_anchors(feature_shapes: &[(usize, usize)], set: &AnchorSet, strides: &[usize]) -> Result<Vec<BBox>> {
    set.validate()?;
    if feature_shapes.len() != strides.len() || feature_shapes.len() > set.scales.len() {
        return Err(Error::InvalidArgument(format!(
            "{} levels, {} strides, {} scales",
            feature_shapes.len(),
            strides.len(),
            set.scales.len()
        )));
    }
    let mut out = Vec::new();
    for (l, (&(h, w), &stride)) in feature_shapes.iter().zip(strides).enumerate() {
        for &r in &set.aspect_ratios {
            let (aw, ah) = AnchorSet::shape(set.scales[l], r);
            for y in 0..h {
                for x in 0..w {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    out.push(BBox::from_center(cx, cy, aw, ah));
                }
            }
        }
    }
    Ok(out)
}

/// Cap on log-size deltas so that `exp` cannot overflow.
pub const MAX_LOG_SIZE_DELTA: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// (dx, dy, dw, dh) of `gt` relative to `anchor`.
pub fn encode(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [(gx - ax) / aw, (gy - ay) / ah, (gt.width() / aw).ln(), (gt.height() / ah).ln()]
}

/// Inverse of [`encode`], without clamping.
pub fn decode(anchor: &BBox, d: [f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SIZE_DELTA).exp();
    let h = ah * d[3].min(MAX_LOG_SIZE_DELTA).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Decodes every anchor and clamps the result to a `width x height` image.
pub fn decode_boxes(anchors: &[BBox], deltas: &[[f64; 4]], width: f64, height: f64) -> Result<Vec<BBox>> {
    if anchors.len() != deltas.len() {
        return Err(Error::ShapeMismatch(format!("{} anchors vs {} deltas", anchors.len(), deltas.len())));
    }
    Ok(anchors.iter().zip(deltas).map(|(a, &d)| decode(a, d).clamp_to(width, height)).collect())
}

/// Greedy NMS: highest score first (earlier input wins ties); a box survives
/// if its IoU with every kept box is at most `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn anchor_closed_forms() {
        let set = AnchorSet { scales: vec![16.0], aspect_ratios: vec![1.0] };
        let a = generate_anchors(&[(1, 1)], &set, &[16]).unwrap();
        assert_eq!(a, vec![b(0.0, 0.0, 16.0, 16.0)]);

        let set = AnchorSet { scales: vec![16.0], ..Default::default() };
        assert_eq!(generate_anchors(&[(2, 2)], &set, &[16]).unwrap().len(), 12);

        let (w, h) = AnchorSet::shape(32.0, 0.5);
        assert!((w * h - 1024.0).abs() < 1e-9);
        assert!((h / w - 0.5).abs() < 1e-12);

        let set = AnchorSet { scales: vec![16.0, 8.0], ..Default::default() };
        assert!(set.validate().is_err());
        assert_eq!(AnchorSet::default().scales, vec![16.0, 32.0, 64.0, 128.0, 256.0]);
    }

    #[test]
    fn iou_cases() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
        let p = b(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn decode_cases() {
        let a = b(10.0, 20.0, 30.0, 60.0);
        assert_eq!(decode(&a, [0.0; 4]), a);
        let d = decode(&a, [0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((d.width() - 40.0).abs() < 1e-12);
        assert_eq!(d.center(), a.center());
        let c = decode_boxes(&[a], &[[10.0, 0.0, 0.0, 0.0]], 100.0, 100.0).unwrap();
        assert_eq!(c[0].x2, 100.0);
    }

    #[test]
    fn nms_cases() {
        let d = Detection { bbox: b(0.0, 0.0, 4.0, 4.0), score: 0.9 };
        assert_eq!(nms(&[d], 0.5), vec![d]);
        let e = Detection { score: 0.8, ..d };
        assert_eq!(nms(&[e, d], 0.5), vec![d]);
        // equal scores: earlier input survives
        let f = Detection { bbox: b(0.5, 0.0, 4.5, 4.0), score: 0.9 };
        assert_eq!(nms(&[f, d], 0.5), vec![f]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BBox> {
            (0.0f64..50.0, 0.0f64..50.0, 0.5f64..30.0, 0.5f64..30.0).prop_map(|(x, y, w, h)| b(x, y, x + w, y + h))
        }

        proptest! {
            #[test]
            fn iou_symmetric_bounded(a in arb_box(), c in arb_box()) {
                let v = iou(&a, &c);
                prop_assert_eq!(v, iou(&c, &a));
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            }

            #[test]
            fn encode_decode_roundtrip(a in arb_box(), g in arb_box()) {
                let r = decode(&a, encode(&a, &g));
                prop_assert!((r.x1 - g.x1).abs() < 1e-9 && (r.y1 - g.y1).abs() < 1e-9);
                prop_assert!((r.x2 - g.x2).abs() < 1e-9 && (r.y2 - g.y2).abs() < 1e-9);
            }

            #[test]
            fn nms_subset_separated_idempotent(boxes in proptest::collection::vec((arb_box(), 0.0f64..1.0), 0..30), t in 0.1f64..0.9) {
                let dets: Vec<_> = boxes.iter().map(|&(bbox, score)| Detection { bbox, score }).collect();
                let kept = nms(&dets, t);
                for (i, k) in kept.iter().enumerate() {
                    prop_assert!(dets.contains(k));
                    for o in &kept[i + 1..] {
                        prop_assert!(iou(&k.bbox, &o.bbox) <= t);
                    }
                }
                prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
                prop_assert_eq!(nms(&kept, t), kept);
            }
        }
    }
}
