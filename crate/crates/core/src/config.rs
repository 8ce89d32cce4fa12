//! Flat `key = value` run configuration shared by the `train` command and
//! the ablation experiment. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::SgdConfig;
use crate::dataset::SliceSelection;
use crate::error::{Error, Result};
use crate::froc::DEFAULT_RATES;
use crate::model::fusion::FusionRegistry;
use crate::model::{LossWeights, ModelConfig, PredictConfig, TrainConfig};
use crate::windowing::{default_views, single_view, ViewSet};

/// Numeric precision of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub views: ViewSet,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub precision: Precision,
    /// Target slice spacing and long image side after ingest.
    pub z_spacing_mm: f64,
    pub image_size: usize,
    pub train_slices: SliceSelection,
    pub test_slices: SliceSelection,
    /// Leading volumes (by id) used for training; the rest are the test split.
    pub train_volumes: usize,
    pub iou: f64,
    pub rates: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.anchors.scales = vec![12.0, 16.0];
        model.anchors.aspect_ratios = vec![1.0];
        let train = TrainConfig {
            batch_size: 2,
            sgd: SgdConfig { learning_rate: 0.003, ..SgdConfig::default() },
            loss: LossWeights { lambda_pos: 1.0, lambda_reg: 2.0 },
            ..TrainConfig::default()
        };
        Self {
            seed: 0,
            views: default_views(),
            model,
            train,
            predict: PredictConfig::default(),
            precision: Precision::F32,
            z_spacing_mm: 2.0,
            image_size: 64,
            train_slices: SliceSelection::Lesion,
            test_slices: SliceSelection::Key,
            train_volumes: 60,
            iou: 0.5,
            rates: DEFAULT_RATES.to_vec(),
        }
    }
}

fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<V: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s)).collect()
}

fn join<V: std::fmt::Display>(xs: &[V]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// `single`, `multi`, or an explicit `level:width,...` list.
pub fn parse_views(v: &str) -> Result<ViewSet> {
    match v.trim() {
        "single" => Ok(single_view()),
        "multi" => Ok(default_views()),
        other => ViewSet::parse_list(other).map_err(|e| Error::Config(format!("views: {e}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "views" => {
                self.views = parse_views(v)?;
                self.model.n_views = self.views.len();
            }
            "n_views" => return Err(Error::Config("n_views follows from `views`".into())),
            "epochs" => self.train.epochs = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "learning_rate" => self.train.sgd.learning_rate = num(key, v)?,
            "momentum" => self.train.sgd.momentum = num(key, v)?,
            "decay_epochs" => self.train.sgd.decay_epochs = list(key, v)?,
            "decay_factor" => self.train.sgd.decay_factor = num(key, v)?,
            "clip_norm" => self.train.clip_norm = if v == "off" { None } else { Some(num(key, v)?) },
            "flip_prob" => self.train.flip_prob = num(key, v)?,
            "lambda_pos" => self.train.loss.lambda_pos = num(key, v)?,
            "lambda_reg" => self.train.loss.lambda_reg = num(key, v)?,
            "score_threshold" => self.predict.score_threshold = num(key, v)?,
            "nms_iou" => self.predict.nms_iou = num(key, v)?,
            "pre_nms_top_k" => self.predict.pre_nms_top_k = num(key, v)?,
            "max_detections" => self.predict.max_detections = num(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision must be f32 or f64, got {v:?}"))),
                }
            }
            "z_spacing_mm" => self.z_spacing_mm = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "train_slices" => self.train_slices = v.parse()?,
            "test_slices" => self.test_slices = v.parse()?,
            "train_volumes" => self.train_volumes = num(key, v)?,
            "iou" => self.iou = num(key, v)?,
            "rates" => self.rates = list(key, v)?,
            _ => {
                if !self.model.set(key, v)? {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let registry = FusionRegistry::<f32>::default();
        if !registry.contains(&self.model.fusion) {
            return Err(Error::Config(format!(
                "unknown fusion strategy {:?}; known: {}",
                self.model.fusion,
                registry.names().join(", ")
            )));
        }
        if self.model.n_views != self.views.len() {
            return Err(Error::Config(format!("{} views but n_views = {}", self.views.len(), self.model.n_views)));
        }
        if !(self.z_spacing_mm > 0.0) || self.image_size == 0 {
            return Err(Error::Config("z_spacing_mm and image_size must be positive".into()));
        }
        if !(self.iou > 0.0 && self.iou <= 1.0) {
            return Err(Error::Config(format!("iou must lie in (0, 1], got {}", self.iou)));
        }
        if self.rates.is_empty() || self.rates.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config("rates must be a non-empty list of positive values".into()));
        }
        if !(0.0..=1.0).contains(&self.predict.score_threshold) || !(0.0..=1.0).contains(&self.predict.nms_iou) {
            return Err(Error::Config("score_threshold and nms_iou must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Every key with its effective value; [`Self::parse`] reads it back.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let p = &self.predict;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("views", self.views.to_string());
        for (k, v) in self.model.to_pairs() {
            if k != "n_views" {
                kv(k, v);
            }
        }
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", t.sgd.learning_rate.to_string());
        kv("momentum", t.sgd.momentum.to_string());
        kv("decay_epochs", join(&t.sgd.decay_epochs));
        kv("decay_factor", t.sgd.decay_factor.to_string());
        kv("clip_norm", t.clip_norm.map_or("off".into(), |c| c.to_string()));
        kv("flip_prob", t.flip_prob.to_string());
        kv("lambda_pos", t.loss.lambda_pos.to_string());
        kv("lambda_reg", t.loss.lambda_reg.to_string());
        kv("score_threshold", p.score_threshold.to_string());
        kv("nms_iou", p.nms_iou.to_string());
        kv("pre_nms_top_k", p.pre_nms_top_k.to_string());
        kv("max_detections", p.max_detections.to_string());
        kv("precision", if self.precision == Precision::F32 { "f32" } else { "f64" }.into());
        kv("z_spacing_mm", self.z_spacing_mm.to_string());
        kv("image_size", self.image_size.to_string());
        kv("train_slices", self.train_slices.to_string());
        kv("test_slices", self.test_slices.to_string());
        kv("train_volumes", self.train_volumes.to_string());
        kv("iou", self.iou.to_string());
        kv("rates", join(&self.rates));
        s
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.train.loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("views", "single").unwrap();
        c.set("fusion", "concat").unwrap();
        c.set("clip_norm", "off").unwrap();
        c.set("rates", "0.5,1,8").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn unknown_and_bad_keys_are_errors() {
        assert!(matches!(RunConfig::parse("no_such_key = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("epochs = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("n_ctx = 4"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("fusion = bogus"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = RunConfig::parse("# header\n\nepochs = 3 # short run\nviews = multi\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.n_views, 3);
    }
}
