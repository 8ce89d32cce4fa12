use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{assign_anchors, total_loss, AnchorTargets};
use super::{LossWeights, MvpModel, PositionLabel};
use crate::autodiff::{Real, Sgd, SgdConfig, Tape, Tensor};
use crate::detect::BBox;
use crate::error::{Error, Result};

/// One training image: every view is `[1, n_ctx, H, W]`.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub views: Vec<Tensor<T>>,
    pub boxes: Vec<BBox>,
    pub position: PositionLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub loss: LossWeights,
    pub flip_prob: f64,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 13, batch_size: 4, sgd: SgdConfig::default(), loss: LossWeights::default(), flip_prob: 0.5, clip_norm: Some(10.0), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub detection: f64,
    pub position: f64,
}

/// Mirrors every `[N, C, H, W]` plane left to right.
pub fn flip_tensor<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let [_, _, _, w] = t.dims4();
    let src = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    })
}

struct Prepared<T> {
    views: [Vec<Tensor<T>>; 2],
    targets: [AnchorTargets; 2],
}

/// Loss of one sample with no parameter update.
pub fn sample_loss<T: Real>(model: &MvpModel<T>, sample: &TrainSample<T>, weights: &LossWeights) -> Result<f64> {
    let [_, _, h, w] = sample.views.first().ok_or(Error::Empty("views"))?.dims4();
    let anchors = model.anchors(h, w)?;
    let cfg = model.config();
    let targets = assign_anchors(&anchors, &sample.boxes, cfg.pos_iou, cfg.neg_iou, cfg.delta_std);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &sample.views)?;
    let loss = total_loss(&mut tape, &out, &[targets], &[sample.position], weights)?;
    Ok(tape.value(loss.total).item().f64())
}

/// Minibatch SGD with random horizontal flips. Each sample is its own graph;
/// batch gradients are the mean of per-sample gradients.
pub fn train<T: Real>(model: &mut MvpModel<T>, data: &[TrainSample<T>], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let first = data.first().ok_or(Error::Empty("training set"))?;
    let [_, _, h, w] = first.views.first().ok_or(Error::Empty("views"))?.dims4();
    let anchors = model.anchors(h, w)?;
    let (pos_iou, neg_iou, std) = (model.config().pos_iou, model.config().neg_iou, model.config().delta_std);
    let prepared: Vec<Prepared<T>> = data
        .iter()
        .map(|s| {
            if s.views.iter().any(|v| v.dims4()[2..] != [h, w]) {
                return Err(Error::ShapeMismatch("training images must share one size".into()));
            }
            let flipped: Vec<BBox> = s.boxes.iter().map(|b| b.flip_horizontal(w as f64)).collect();
            Ok(Prepared {
                views: [s.views.clone(), s.views.iter().map(flip_tensor).collect()],
                targets: [
                    assign_anchors(&anchors, &s.boxes, pos_iou, neg_iou, std),
                    assign_anchors(&anchors, &flipped, pos_iou, neg_iou, std),
                ],
            })
        })
        .collect::<Result<_>>()?;

    let mut sgd = Sgd::new(cfg.sgd.clone(), model.params());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let (mut sum, mut sum_det, mut sum_pos) = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor<T>>> = None;
            for &i in batch {
                let flip = usize::from(rng.gen_bool(cfg.flip_prob));
                let p = &prepared[i];
                let mut tape = Tape::new();
                // overflow inside the graph surfaces as a non-finite tensor
                let overflow = |e| match e {
                    Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::INFINITY },
                    e => e,
                };
                let out = model.forward(&mut tape, &p.views[flip]).map_err(overflow)?;
                let loss = total_loss(&mut tape, &out, std::slice::from_ref(&p.targets[flip]), &[data[i].position], &cfg.loss)
                    .map_err(overflow)?;
                let value = tape.value(loss.total).item().f64();
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, loss: value });
                }
                sum += value;
                sum_det += tape.value(loss.detection.total).item().f64();
                sum_pos += loss.position.map_or(0.0, |v| tape.value(v).item().f64());
                let grads = tape.backward(loss.total)?.for_store(model.params());
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = T::c(1.0 / batch.len() as f64);
            grads.iter_mut().for_each(|g| g.scale_assign(inv));
            if let Some(max) = cfg.clip_norm {
                let norm = grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt();
                if norm > max {
                    let s = T::c(max / norm);
                    grads.iter_mut().for_each(|g| g.scale_assign(s));
                }
            }
            sgd.step(model.params_mut(), &grads, epoch);
            if model.params().iter().any(|(_, _, t)| !t.all_finite()) {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
        }
        let n = data.len() as f64;
        log.push(EpochLog { epoch, lr: cfg.sgd.lr_at(epoch), loss: sum / n, detection: sum_det / n, position: sum_pos / n });
    }
    Ok(log)
}
