//! Library kernels checked against slow, obviously-correct re-implementations.
//! Each check panics on mismatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvpnet::autodiff::{ParamStore, Tape, Tensor};
use mvpnet::detect::{iou, nms, BBox, Detection};
use mvpnet::froc::{froc, match_detections, EvalCase};
use mvpnet::model::fusion::{AttentionFusion, Fusion, FusionInit};
use mvpnet::model::loss::{detection_loss, position_loss, AnchorTargets};
use mvpnet::model::{BodyZone, InitScheme, PositionLabel};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn assert_close(got: &[f64], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(rel(*g, *w) < tol, "{what}[{i}]: {g} vs {w}");
    }
}

fn conv_oracle(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * c + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oi * c + ci) * kh + ky) * kw + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn conv2d_matches_nested_loops() {
    let mut r = rng(1);
    for trial in 0..60 {
        let (n, c, o) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let k = [1, 3, 5][r.gen_range(0..3)];
        let (h, w) = (r.gen_range(k..k + 6), r.gen_range(k..k + 6));
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..k / 2 + 1);
        let x = randn(&mut r, n * c * h * w);
        let wt = randn(&mut r, o * c * k * k);
        let b = randn(&mut r, o);
        let mut t = Tape::<f64>::new();
        let xv = t.leaf(Tensor::new(vec![n, c, h, w], x.clone()).unwrap());
        let wv = t.leaf(Tensor::new(vec![o, c, k, k], wt.clone()).unwrap());
        let bv = t.leaf(Tensor::new(vec![o], b.clone()).unwrap());
        let y = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = conv_oracle(&x, [n, c, h, w], &wt, [o, c, k, k], &b, stride, pad);
        assert_close(t.value(y).data(), &want, 1e-10, &format!("conv trial {trial}"));
    }
}

pub fn max_pool_matches_nested_loops() {
    let mut r = rng(2);
    for trial in 0..60 {
        let (n, c) = (r.gen_range(1..3), r.gen_range(1..4));
        let k = r.gen_range(1..4);
        let stride = r.gen_range(1..3);
        let (h, w) = (r.gen_range(k..k + 6), r.gen_range(k..k + 6));
        let x = randn(&mut r, n * c * h * w);
        let mut t = Tape::<f64>::new();
        let xv = t.leaf(Tensor::new(vec![n, c, h, w], x.clone()).unwrap());
        let y = t.max_pool2d(xv, k, stride).unwrap();
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let mut want = Vec::new();
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            m = m.max(x[(p * h + oy * stride + ky) * w + ox * stride + kx]);
                        }
                    }
                    want.push(m);
                }
            }
        }
        assert_close(t.value(y).data(), &want, 1e-10, &format!("pool trial {trial}"));

        let ga = t.global_avg_pool(xv).unwrap();
        let gm = t.global_max_pool(xv).unwrap();
        let hw = h * w;
        let avg: Vec<f64> = x.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let max: Vec<f64> = x.chunks(hw).map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        assert_close(t.value(ga).data(), &avg, 1e-10, "global avg");
        assert_close(t.value(gm).data(), &max, 1e-10, "global max");
    }
}

pub fn linear_matches_nested_loops() {
    let mut r = rng(3);
    for trial in 0..60 {
        let (n, din, dout) = (r.gen_range(1..5), r.gen_range(1..9), r.gen_range(1..9));
        let x = randn(&mut r, n * din);
        let w = randn(&mut r, dout * din);
        let b = randn(&mut r, dout);
        let mut t = Tape::<f64>::new();
        let xv = t.leaf(Tensor::new(vec![n, din], x.clone()).unwrap());
        let wv = t.leaf(Tensor::new(vec![dout, din], w.clone()).unwrap());
        let bv = t.leaf(Tensor::new(vec![dout], b.clone()).unwrap());
        let y = t.linear(xv, wv, Some(bv)).unwrap();
        let mut want = Vec::new();
        for i in 0..n {
            for o in 0..dout {
                want.push(b[o] + (0..din).map(|j| x[i * din + j] * w[o * din + j]).sum::<f64>());
            }
        }
        assert_close(t.value(y).data(), &want, 1e-10, &format!("linear trial {trial}"));
    }
}

fn random_box(r: &mut ChaCha8Rng, extent: f64) -> BBox {
    let (x, y) = (r.gen_range(0.0..extent), r.gen_range(0.0..extent));
    BBox::new(x, y, x + r.gen_range(1.0..extent / 3.0), y + r.gen_range(1.0..extent / 3.0)).unwrap()
}

fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    // repeatedly take the best remaining box and drop everything it overlaps
    let mut rest: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
    let mut kept = Vec::new();
    while !rest.is_empty() {
        let mut best = 0;
        for i in 1..rest.len() {
            let (a, b) = (&rest[i], &rest[best]);
            if a.1.score > b.1.score || (a.1.score == b.1.score && a.0 < b.0) {
                best = i;
            }
        }
        let top = rest.remove(best).1;
        rest.retain(|(_, d)| iou(&d.bbox, &top.bbox) <= thr);
        kept.push(top);
    }
    kept
}

pub fn nms_matches_brute_force() {
    let mut r = rng(4);
    for trial in 0..50 {
        let n = r.gen_range(0..40);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection { bbox: random_box(&mut r, 40.0), score: (r.gen_range(0..10) as f64) / 10.0 })
            .collect();
        let thr = r.gen_range(0.1..0.9);
        assert_eq!(nms(&dets, thr), nms_oracle(&dets, thr), "trial {trial}");
    }
}

fn random_case(r: &mut ChaCha8Rng, id: usize) -> EvalCase {
    let n_gt = r.gen_range(0..4);
    let gt_boxes: Vec<BBox> = (0..n_gt).map(|_| random_box(r, 30.0)).collect();
    let mut detections = Vec::new();
    for _ in 0..r.gen_range(0..8) {
        // half the detections are jittered copies of a gt box
        let bbox = if !gt_boxes.is_empty() && r.gen_bool(0.5) {
            let g = gt_boxes[r.gen_range(0..gt_boxes.len())];
            let j = r.gen_range(-2.0..2.0);
            BBox::new(g.x1 + j, g.y1, g.x2 + j, g.y2 + r.gen_range(0.0..2.0)).unwrap()
        } else {
            random_box(r, 30.0)
        };
        detections.push(Detection { bbox, score: (r.gen_range(0..8) as f64) / 8.0 });
    }
    EvalCase { image_id: format!("img{id}"), gt_boxes, detections }
}

fn greedy_oracle(case: &EvalCase, thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..case.detections.len()).collect();
    // insertion sort by score, stable
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && case.detections[order[j]].score > case.detections[order[j - 1]].score {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut used = vec![false; case.gt_boxes.len()];
    let mut tp = vec![false; case.detections.len()];
    for &d in &order {
        let mut cand: Vec<(f64, usize)> = (0..case.gt_boxes.len())
            .filter(|&g| !used[g])
            .map(|g| (iou(&case.detections[d].bbox, &case.gt_boxes[g]), g))
            .filter(|&(v, _)| v >= thr)
            .collect();
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if let Some(&(_, g)) = cand.first() {
            used[g] = true;
            tp[d] = true;
        }
    }
    tp
}

pub fn matching_matches_exhaustive_greedy() {
    let mut r = rng(5);
    for trial in 0..200 {
        let case = random_case(&mut r, trial);
        let thr = [0.3, 0.5, 0.7][trial % 3];
        assert_eq!(match_detections(&case, thr), greedy_oracle(&case, thr), "trial {trial}");
    }
}

pub fn froc_matches_threshold_sweep() {
    let mut r = rng(6);
    let mut checked = 0;
    while checked < 100 {
        let cases: Vec<EvalCase> = (0..r.gen_range(1..6)).map(|i| random_case(&mut r, i)).collect();
        let n_gt: usize = cases.iter().map(|c| c.gt_boxes.len()).sum();
        if n_gt == 0 {
            assert!(froc(&cases, 0.5).is_err());
            continue;
        }
        checked += 1;
        let curve = froc(&cases, 0.5).unwrap();
        let mut thresholds: Vec<f64> =
            cases.iter().flat_map(|c| c.detections.iter().map(|d| d.score)).filter(|&s| s > 0.0).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        assert_eq!(curve.points.len(), thresholds.len());
        for (p, &t) in curve.points.iter().zip(&thresholds) {
            // rerun matching from scratch with only the detections at or above t
            let (mut tp, mut fp) = (0, 0);
            for c in &cases {
                let kept: Vec<Detection> = c.detections.iter().copied().filter(|d| d.score >= t).collect();
                let sub = EvalCase { detections: kept, ..c.clone() };
                for m in greedy_oracle(&sub, 0.5) {
                    if m {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            assert_eq!(p.threshold, t);
            assert_eq!(p.sensitivity, tp as f64 / n_gt as f64);
            assert_eq!(p.fps_per_image, fp as f64 / cases.len() as f64);
        }
        for rate in [0.5, 1.0, 2.0, 4.0] {
            let want = thresholds
                .iter()
                .zip(&curve.points)
                .filter(|(_, p)| p.fps_per_image <= rate)
                .map(|(_, p)| p.sensitivity)
                .fold(0.0, f64::max);
            assert_eq!(curve.sensitivity_at(rate), want);
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn attention_setup(seed: u64, channels: usize, scheme: InitScheme) -> (ParamStore<f64>, AttentionFusion) {
    let mut store = ParamStore::new();
    let init = FusionInit { channels, reduction: 2, scheme };
    let f = AttentionFusion::new(&init, &mut store, &mut rng(seed));
    (store, f)
}

/// Channel weights `sigmoid(W2 relu(W1 (avg + max) + b1) + b2)`, one image at a time.
fn attention_oracle(store: &ParamStore<f64>, f: &AttentionFusion, x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let (w1, b1, w2, b2) = (store.get(f.w1), store.get(f.b1), store.get(f.w2), store.get(f.b2));
    let hidden = b1.len();
    let mut out = Vec::new();
    for i in 0..n {
        let pooled: Vec<f64> = (0..c)
            .map(|ch| {
                let p = &x[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                p.iter().sum::<f64>() / hw as f64 + p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let h: Vec<f64> = (0..hidden)
            .map(|j| (b1.data()[j] + (0..c).map(|k| w1.data()[j * c + k] * pooled[k]).sum::<f64>()).max(0.0))
            .collect();
        for ch in 0..c {
            out.push(sigmoid(b2.data()[ch] + (0..hidden).map(|j| w2.data()[ch * hidden + j] * h[j]).sum::<f64>()));
        }
    }
    out
}

pub fn attention_matches_scalar_oracle() {
    let mut r = rng(7);
    for trial in 0..30 {
        let (n, per_view, views) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let c = per_view * views;
        let (h, w) = (r.gen_range(1..6), r.gen_range(1..6));
        let (store, fusion) = attention_setup(trial, c, InitScheme::Random);
        let parts: Vec<Vec<f64>> = (0..views).map(|_| randn(&mut r, n * per_view * h * w)).collect();
        let mut t = Tape::<f64>::new();
        let vars: Vec<_> = parts.iter().map(|p| t.leaf(Tensor::new(vec![n, per_view, h, w], p.clone()).unwrap())).collect();
        let fused = fusion.fuse_level(&mut t, &store, &vars).unwrap();
        let cat = if views == 1 { vars[0] } else { t.concat(&vars, 1).unwrap() };
        let x = t.value(cat).data().to_vec();
        let weights = attention_oracle(&store, &fusion, &x, n, c, h * w);
        let want: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * weights[i / (h * w)]).collect();
        assert_close(t.value(fused).data(), &want, 1e-10, &format!("attention trial {trial}"));
        let wv = fusion.weights(&mut t, &store, cat).unwrap();
        assert_close(t.value(wv).data(), &weights, 1e-10, "attention weights");
        assert!(t.value(wv).data().iter().all(|&a| a > 0.0 && a < 1.0));
    }
}

pub fn zero_theta_gives_half_weights() {
    let (store, fusion) = attention_setup(0, 6, InitScheme::Zero);
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new(vec![2, 6, 3, 3], randn(&mut rng(8), 108)).unwrap());
    let w = fusion.weights(&mut t, &store, x).unwrap();
    assert!(t.value(w).data().iter().all(|&a| a == 0.5));
}

pub fn attention_weights_ignore_pixel_order() {
    let mut r = rng(9);
    for trial in 0..20 {
        let (c, h, w) = (4, r.gen_range(2..7), r.gen_range(2..7));
        let hw = h * w;
        let (store, fusion) = attention_setup(100 + trial, c, InitScheme::Random);
        let x = randn(&mut r, c * hw);
        let mut perm: Vec<usize> = (0..hw).collect();
        for i in (1..hw).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let xp: Vec<f64> = (0..c * hw).map(|i| x[(i / hw) * hw + perm[i % hw]]).collect();
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::new(vec![1, c, h, w], x).unwrap());
        let b = t.leaf(Tensor::new(vec![1, c, h, w], xp).unwrap());
        let wa = fusion.weights(&mut t, &store, a).unwrap();
        let wb = fusion.weights(&mut t, &store, b).unwrap();
        assert_eq!(t.value(wa).data(), t.value(wb).data(), "trial {trial}");
    }
}

fn position_oracle(logits: &[f64], reg: &[f64], labels: &[PositionLabel]) -> f64 {
    let n = labels.len();
    let mut ce = 0.0;
    let mut se = 0.0;
    for (i, l) in labels.iter().enumerate() {
        let z = &logits[3 * i..3 * i + 3];
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        ce += lse - z[l.zone.index()];
        se += (reg[i] - l.p).powi(2);
    }
    ce / n as f64 + se / n as f64
}

fn eval_position(logits: &[f64], reg: &[f64], labels: &[PositionLabel]) -> f64 {
    let n = labels.len();
    let mut t = Tape::<f64>::new();
    let lv = t.leaf(Tensor::new(vec![n, 3], logits.to_vec()).unwrap());
    let rv = t.leaf(Tensor::new(vec![n, 1], reg.to_vec()).unwrap());
    let l = position_loss(&mut t, lv, rv, labels).unwrap();
    t.value(l).item()
}

pub fn position_loss_matches_scalar_oracle() {
    let mut r = rng(10);
    for trial in 0..100 {
        let n = r.gen_range(1..8);
        let logits: Vec<f64> = (0..3 * n).map(|_| r.gen_range(-5.0..5.0)).collect();
        let reg = randn(&mut r, n);
        let labels: Vec<PositionLabel> =
            (0..n).map(|_| PositionLabel::from_index(r.gen_range(0..3), r.gen_range(0.0..=1.0)).unwrap()).collect();
        let got = eval_position(&logits, &reg, &labels);
        let want = position_oracle(&logits, &reg, &labels);
        assert!(rel(got, want) < 1e-10, "trial {trial}: {got} vs {want}");
    }
}

pub fn position_loss_limits() {
    let labels = [
        PositionLabel::new(BodyZone::Chest, 0.1).unwrap(),
        PositionLabel::new(BodyZone::Abdomen, 0.5).unwrap(),
        PositionLabel::new(BodyZone::Pelvis, 0.9).unwrap(),
    ];
    let reg = [0.1, 0.5, 0.9];
    let mut perfect = vec![-1e4; 9];
    for (i, l) in labels.iter().enumerate() {
        perfect[3 * i + l.zone.index()] = 1e4;
    }
    assert_eq!(eval_position(&perfect, &reg, &labels), 0.0);
    let uniform = eval_position(&[0.0; 9], &reg, &labels);
    assert!((uniform - 3f64.ln()).abs() < 1e-9, "{uniform}");
}

pub fn detection_loss_matches_per_anchor_oracle() {
    let mut r = rng(11);
    let bce = |z: f64, y: f64| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    let sl1 = |d: f64| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
    for trial in 0..30 {
        let n = r.gen_range(1..3);
        let a = r.gen_range(1..3);
        let levels: Vec<(usize, usize)> = (0..r.gen_range(1..3)).map(|_| (r.gen_range(1..4), r.gen_range(1..4))).collect();
        let per_image: usize = levels.iter().map(|(h, w)| a * h * w).sum();
        let targets: Vec<AnchorTargets> = (0..n)
            .map(|_| {
                let labels: Vec<i8> = (0..per_image).map(|_| r.gen_range(-1..=1)).collect();
                let deltas = labels.iter().map(|&l| if l == 1 { [0.0; 4].map(|_: f64| r.gen_range(-2.0..2.0)) } else { [0.0; 4] }).collect();
                AnchorTargets { labels, deltas }
            })
            .collect();
        let lambda = r.gen_range(0.5..2.0);
        let mut t = Tape::<f64>::new();
        let mut cls = Vec::new();
        let mut reg = Vec::new();
        let mut raw = Vec::new();
        for &(h, w) in &levels {
            let c = randn(&mut r, n * a * h * w).iter().map(|v| v * 4.0).collect::<Vec<_>>();
            let g = randn(&mut r, n * 4 * a * h * w).iter().map(|v| v * 3.0).collect::<Vec<_>>();
            cls.push(t.leaf(Tensor::new(vec![n, a, h, w], c.clone()).unwrap()));
            reg.push(t.leaf(Tensor::new(vec![n, 4 * a, h, w], g.clone()).unwrap()));
            raw.push((h, w, c, g));
        }
        let loss = detection_loss(&mut t, &cls, &reg, &targets, lambda).unwrap();

        let (mut pos_obj, mut neg_obj, mut reg_sum, mut n_pos, mut n_neg) = (0.0, 0.0, 0.0, 0, 0);
        for (img, tg) in targets.iter().enumerate() {
            let mut k = 0;
            for (h, w, c, g) in &raw {
                let hw = h * w;
                for ai in 0..a {
                    for p in 0..hw {
                        let z = c[(img * a + ai) * hw + p];
                        match tg.labels[k] {
                            1 => {
                                n_pos += 1;
                                pos_obj += bce(z, 1.0);
                                for j in 0..4 {
                                    reg_sum += sl1(g[(img * 4 * a + ai * 4 + j) * hw + p] - tg.deltas[k][j]);
                                }
                            }
                            0 => {
                                n_neg += 1;
                                neg_obj += bce(z, 0.0);
                            }
                            _ => {}
                        }
                        k += 1;
                    }
                }
            }
        }
        let obj = pos_obj / n_pos.max(1) as f64 + neg_obj / n_neg.max(1) as f64;
        let regl = reg_sum / n_pos.max(1) as f64;
        assert!(rel(t.value(loss.objectness).item(), obj) < 1e-10, "trial {trial} objectness");
        assert!(rel(t.value(loss.regression).item(), regl) < 1e-10, "trial {trial} regression");
        assert!(rel(t.value(loss.total).item(), obj + lambda * regl) < 1e-10, "trial {trial} total");
    }
}
