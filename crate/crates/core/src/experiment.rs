//! The view/fusion/position ablation on phantom data.

use std::collections::BTreeMap;

use crate::autodiff::Real;
use crate::config::RunConfig;
use crate::dataset::{labelled_samples, phantom_samples, split_slice_id, LabelledSlice, LabelledVolume, SliceSelection};
use crate::detect::Detection;
use crate::error::Result;
use crate::froc::{format_detections, froc, EvalCase, FrocCurve};
use crate::model::{save_checkpoint, EpochLog, InitScheme, ModelConfig, MvpModel, PredictConfig, TrainConfig};
use crate::phantom::PhantomVolume;
use crate::windowing::{default_views, single_view, ViewSet};

/// One row of the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub name: &'static str,
    pub multi_view: bool,
    pub fusion: &'static str,
    pub position: bool,
}

/// Rows in order of increasing capability.
pub const ABLATIONS: [Ablation; 4] = [
    Ablation { name: "single-view", multi_view: false, fusion: "concat", position: false },
    Ablation { name: "multi-view", multi_view: true, fusion: "concat", position: false },
    Ablation { name: "multi-view+attention", multi_view: true, fusion: "cbam", position: false },
    Ablation { name: "multi-view+attention+position", multi_view: true, fusion: "cbam", position: true },
];

impl Ablation {
    pub fn views(&self) -> ViewSet {
        if self.multi_view {
            default_views()
        } else {
            single_view()
        }
    }

    /// `base` with this row's view count, fusion and position switch.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            n_views: self.views().len(),
            fusion: self.fusion.to_string(),
            position: self.position,
            ..base.clone()
        }
    }

    /// `base` with this row's views and model switches.
    pub fn run_config(&self, base: &RunConfig) -> RunConfig {
        RunConfig { views: self.views(), model: self.model_config(&base.model), ..base.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub log: Vec<EpochLog>,
    pub curve: FrocCurve,
    pub detections: BTreeMap<String, Vec<Detection>>,
}

/// Runs the trained model on every slice and scores the detections.
pub fn evaluate<T: Real>(
    model: &MvpModel<T>,
    slices: &[LabelledSlice<T>],
    predict: &PredictConfig,
    iou: f64,
) -> Result<(FrocCurve, BTreeMap<String, Vec<Detection>>)> {
    let mut cases = Vec::with_capacity(slices.len());
    let mut dets = BTreeMap::new();
    for s in slices {
        let d = model.predict(&s.sample.views, predict)?;
        cases.push(EvalCase { image_id: s.id.clone(), gt_boxes: s.sample.boxes.clone(), detections: d.clone() });
        dets.insert(s.id.clone(), d);
    }
    Ok((froc(&cases, iou)?, dets))
}

/// Trains a fresh model on `train` and evaluates it on `test`.
pub fn train_and_evaluate<T: Real>(
    model_config: ModelConfig,
    train_config: &TrainConfig,
    predict: &PredictConfig,
    iou: f64,
    train: &[LabelledSlice<T>],
    test: &[LabelledSlice<T>],
) -> Result<(MvpModel<T>, RunResult)> {
    let mut model = MvpModel::new(model_config, InitScheme::Random, train_config.seed)?;
    let samples: Vec<_> = train.iter().map(|s| s.sample.clone()).collect();
    let log = crate::model::train(&mut model, &samples, train_config)?;
    let (curve, detections) = evaluate(&model, test, predict, iou)?;
    Ok((model, RunResult { log, curve, detections }))
}

/// Renders the train and test splits for one ablation row.
pub fn ablation_data<T: Real>(
    ablation: &Ablation,
    train: &[PhantomVolume],
    test: &[PhantomVolume],
    selection: SliceSelection,
    n_ctx: usize,
) -> Result<(Vec<LabelledSlice<T>>, Vec<LabelledSlice<T>>)> {
    let views = ablation.views();
    Ok((phantom_samples(train, selection, &views, n_ctx)?, phantom_samples(test, selection, &views, n_ctx)?))
}

/// Files written by [`train_on_volumes`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub log: Vec<EpochLog>,
    /// Test-split detections and ground truth in original pixel space.
    pub detections: String,
    pub ground_truth: String,
    pub curve: Option<FrocCurve>,
}

/// Trains on the leading `cfg.train_volumes` volumes, saves the checkpoint
/// to `checkpoint` and scores the remaining volumes.
pub fn train_on_volumes<T: Real>(
    cfg: &RunConfig,
    volumes: &[LabelledVolume],
    checkpoint: &std::path::Path,
) -> Result<TrainOutputs> {
    let split = cfg.train_volumes.min(volumes.len());
    let (train, test) = volumes.split_at(split);
    let n_ctx = cfg.model.n_ctx;
    let train_set = labelled_samples::<T>(train, cfg.train_slices, &cfg.views, n_ctx)?;
    if train_set.is_empty() {
        return Err(crate::error::Error::Empty("training slices"));
    }
    let test_set = labelled_samples::<T>(test, cfg.test_slices, &cfg.views, n_ctx)?;
    let mut model = MvpModel::<T>::new(cfg.model.clone(), InitScheme::Random, cfg.seed)?;
    let samples: Vec<_> = train_set.into_iter().map(|s| s.sample).collect();
    let log = crate::model::train(&mut model, &samples, &cfg.train_config())?;
    save_checkpoint(&model, checkpoint)?;

    let scale_of: BTreeMap<&str, f64> = test.iter().map(|v| (v.id.as_str(), v.scale)).collect();
    let (mut detections, mut ground_truth) = (String::new(), String::new());
    let mut cases = Vec::with_capacity(test_set.len());
    for s in &test_set {
        let (vol, _) = split_slice_id(&s.id)?;
        let inv = 1.0 / scale_of.get(vol).copied().unwrap_or(1.0);
        let dets: Vec<Detection> = model
            .predict(&s.sample.views, &cfg.predict)?
            .into_iter()
            .map(|d| Detection { bbox: d.bbox.scaled(inv), score: d.score })
            .collect();
        let gts: Vec<_> = s.sample.boxes.iter().map(|b| b.scaled(inv)).collect();
        detections += &format_detections(&s.id, &dets);
        if gts.is_empty() {
            ground_truth += &format!("{}\n", s.id);
        }
        for b in &gts {
            ground_truth += &format!("{} {} {} {} {}\n", s.id, b.x1, b.y1, b.x2, b.y2);
        }
        cases.push(EvalCase { image_id: s.id.clone(), gt_boxes: gts, detections: dets });
    }
    let curve = if cases.iter().any(|c| !c.gt_boxes.is_empty()) { Some(froc(&cases, cfg.iou)?) } else { None };
    Ok(TrainOutputs { log, detections, ground_truth, curve })
}

pub fn format_log(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,loss,detection,position\n");
    for e in log {
        s += &format!("{},{},{},{},{}\n", e.epoch, e.lr, e.loss, e.detection, e.position);
    }
    s
}
