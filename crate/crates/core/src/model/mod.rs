//! Multi-pathway detector: a shared-weight FPN-style backbone per window
//! view, per-level fusion of the views, a position head on the coarsest
//! fused level and a single-stage anchor head.

pub mod check;
mod checkpoint;
mod config;
pub mod fusion;
mod init;
pub mod loss;
mod position;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{BackboneConfig, InitScheme, LossWeights, ModelConfig};
pub use position::{BodyZone, PositionLabel, THIRDS};
pub use train::{flip_tensor, sample_loss, train, EpochLog, TrainConfig, TrainSample};

use crate::autodiff::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::detect::{decode, generate_anchors, nms, BBox, Detection};
use crate::error::{Error, Result};
use fusion::{Fusion, FusionInit, FusionRegistry};
use init::{conv_param, linear_param};

/// Prior probability used to initialise the objectness bias.
const OBJECTNESS_PRIOR: f64 = 0.01;

struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn apply<T: Real>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn apply<T: Real>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.linear(x, w, Some(b))
    }
}

/// conv3x3 -> ReLU -> global average pool -> fully connected.
struct PoolingSubnet {
    conv: Conv,
    fc: Linear,
}

impl PoolingSubnet {
    fn apply<T: Real>(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.conv.apply(tape, params, x)?;
        let h = tape.relu(h);
        let h = tape.global_avg_pool(h)?;
        self.fc.apply(tape, params, h)
    }
}

struct PositionHead {
    /// zone classifier
    phi: PoolingSubnet,
    /// continuous z regressor
    psi: PoolingSubnet,
}

/// Graph nodes produced by one forward pass.
pub struct Forward {
    /// Per view, pyramid levels finest first.
    pub per_view: Vec<Vec<Var>>,
    pub fused: Vec<Var>,
    /// Objectness logits per level, `[N, A, H, W]`.
    pub cls: Vec<Var>,
    /// Box deltas per level, `[N, 4A, H, W]`.
    pub reg: Vec<Var>,
    /// Zone logits `[N, 3]` and continuous position `[N, 1]`.
    pub position: Option<(Var, Var)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.5, pre_nms_top_k: 300, max_detections: 50 }
    }
}

pub struct MvpModel<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    stages: Vec<Conv>,
    laterals: Vec<Conv>,
    fusion: Box<dyn Fusion<T>>,
    head: Conv,
    cls: Conv,
    reg: Conv,
    position: Option<PositionHead>,
}

impl<T: Real> MvpModel<T> {
    pub fn new(config: ModelConfig, scheme: InitScheme, seed: u64) -> Result<Self> {
        Self::with_registry(config, scheme, seed, &FusionRegistry::default())
    }

    pub fn with_registry(config: ModelConfig, scheme: InitScheme, seed: u64, registry: &FusionRegistry<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let bb = &config.backbone;

        let mut stages = Vec::new();
        let mut cin = config.n_ctx;
        for (i, &(c, s)) in bb.stages.iter().enumerate() {
            let (w, b) = conv_param(&mut params, &format!("backbone.stage{i}"), cin, c, 3, scheme, &mut rng);
            stages.push(Conv { w, b, stride: s, pad: 1 });
            cin = c;
        }
        let first = bb.stages.len() - bb.pyramid_levels;
        let laterals = (first..bb.stages.len())
            .map(|i| {
                let (w, b) = conv_param(&mut params, &format!("backbone.lateral{i}"), bb.stages[i].0, bb.pyramid_channels, 1, scheme, &mut rng);
                Conv { w, b, stride: 1, pad: 0 }
            })
            .collect();

        let fused = config.fused_channels();
        let init = FusionInit { channels: fused, reduction: config.reduction, scheme };
        let fusion = registry.build(&config.fusion, &init, &mut params, &mut rng)?;

        let (w, b) = conv_param(&mut params, "head.conv", fused, config.head_channels, 3, scheme, &mut rng);
        let head = Conv { w, b, stride: 1, pad: 1 };
        let a = config.anchors.per_position();
        let (w, b) = conv_param(&mut params, "head.cls", config.head_channels, a, 1, scheme, &mut rng);
        if scheme == InitScheme::Random {
            let bias = -((1.0 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR).ln();
            *params.get_mut(b) = Tensor::full(&[a], T::c(bias));
        }
        let cls = Conv { w, b, stride: 1, pad: 0 };
        let (w, b) = conv_param(&mut params, "head.reg", config.head_channels, 4 * a, 1, scheme, &mut rng);
        let reg = Conv { w, b, stride: 1, pad: 0 };

        let position = config.position.then(|| {
            let pc = config.position_channels;
            let mut subnet = |name: &str, out: usize| {
                let (w, b) = conv_param(&mut params, &format!("{name}.conv"), fused, pc, 3, scheme, &mut rng);
                let (fw, fb) = linear_param(&mut params, &format!("{name}.fc"), pc, out, scheme, &mut rng);
                PoolingSubnet { conv: Conv { w, b, stride: 1, pad: 1 }, fc: Linear { w: fw, b: fb } }
            };
            let phi = subnet("position.phi", 3);
            let psi = subnet("position.psi", 1);
            PositionHead { phi, psi }
        });

        Ok(Self { config, params, stages, laterals, fusion, head, cls, reg, position })
    }

    /// Rebuilds a model around stored parameters; names and shapes must match.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, InitScheme::Zero, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Parse(format!("expected {} parameters, found {}", model.params.len(), params.len())));
        }
        for ((_, n1, t1), (_, n2, t2)) in model.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Parse(format!("parameter {n2} {:?} does not match {n1} {:?}", t2.shape(), t1.shape())));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn fusion_name(&self) -> &'static str {
        self.fusion.name()
    }

    /// Shared backbone on one view `[N, n_ctx, H, W]`; pyramid finest first.
    pub fn forward_backbone(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        self.backbone_with(tape, &self.params, x)
    }

    fn backbone_with(&self, tape: &mut Tape<T>, params: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.n_ctx {
            return Err(Error::ShapeMismatch(format!("view {:?} needs {} channels", shape, self.config.n_ctx)));
        }
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for s in &self.stages {
            h = s.apply(tape, params, h)?;
            h = tape.relu(h);
            feats.push(h);
        }
        let first = self.stages.len() - self.laterals.len();
        let mut pyramid: Vec<Var> = Vec::with_capacity(self.laterals.len());
        for (li, lat) in self.laterals.iter().enumerate().rev() {
            let l = lat.apply(tape, params, feats[first + li])?;
            let p = match pyramid.last() {
                None => l,
                Some(&coarser) => {
                    let up = tape.upsample_nearest(coarser, self.stages[first + li + 1].stride)?;
                    tape.add(l, up)?
                }
            };
            pyramid.push(p);
        }
        pyramid.reverse();
        Ok(pyramid)
    }

    /// Fuses per-view pyramids level by level with the configured strategy.
    pub fn fuse(&self, tape: &mut Tape<T>, per_view: &[Vec<Var>]) -> Result<Vec<Var>> {
        self.fuse_with(tape, &self.params, per_view)
    }

    fn fuse_with(&self, tape: &mut Tape<T>, params: &ParamStore<T>, per_view: &[Vec<Var>]) -> Result<Vec<Var>> {
        let levels = per_view.first().ok_or(Error::Empty("views"))?.len();
        (0..levels)
            .map(|l| {
                let views: Vec<Var> = per_view.iter().map(|p| p[l]).collect();
                self.fusion.fuse_level(tape, params, &views)
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape<T>, views: &[Tensor<T>]) -> Result<Forward> {
        self.forward_with(tape, &self.params, views)
    }

    /// Forward pass with a substitute parameter store of the same layout,
    /// as needed for finite-difference checks.
    pub fn forward_with(&self, tape: &mut Tape<T>, params: &ParamStore<T>, views: &[Tensor<T>]) -> Result<Forward> {
        if views.len() != self.config.n_views {
            return Err(Error::ShapeMismatch(format!("model has {} views, got {}", self.config.n_views, views.len())));
        }
        let per_view = views
            .iter()
            .map(|v| {
                let x = tape.constant(v.clone());
                self.backbone_with(tape, params, x)
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = self.fuse_with(tape, params, &per_view)?;
        let mut cls = Vec::with_capacity(fused.len());
        let mut reg = Vec::with_capacity(fused.len());
        for &f in &fused {
            let h = self.head.apply(tape, params, f)?;
            let h = tape.relu(h);
            cls.push(self.cls.apply(tape, params, h)?);
            reg.push(self.reg.apply(tape, params, h)?);
        }
        let position = match &self.position {
            Some(head) => {
                let top = *fused.last().expect("at least one level");
                Some((head.phi.apply(tape, params, top)?, head.psi.apply(tape, params, top)?))
            }
            None => None,
        };
        Ok(Forward { per_view, fused, cls, reg, position })
    }

    /// Spatial size of every pyramid level for an `h x w` input.
    pub fn level_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let (mut ch, mut cw) = (h, w);
        for s in &self.stages {
            ch = (ch - 1) / s.stride + 1;
            cw = (cw - 1) / s.stride + 1;
            dims.push((ch, cw));
        }
        dims[self.stages.len() - self.laterals.len()..].to_vec()
    }

    pub fn anchors(&self, h: usize, w: usize) -> Result<Vec<BBox>> {
        let shapes = self.level_shapes(h, w);
        generate_anchors(&shapes, &self.config.anchors, &self.config.backbone.level_strides())
    }

    /// Scored, decoded, NMS-filtered boxes for a single image.
    pub fn predict(&self, views: &[Tensor<T>], cfg: &PredictConfig) -> Result<Vec<Detection>> {
        let [n, _, h, w] = views.first().ok_or(Error::Empty("views"))?.dims4();
        if n != 1 {
            return Err(Error::InvalidArgument("predict takes one image".into()));
        }
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, views)?;
        let anchors = self.anchors(h, w)?;
        let a = self.config.anchors.per_position();
        let mut cands = Vec::new();
        let mut offset = 0;
        for (&c, &r) in out.cls.iter().zip(&out.reg) {
            let logits = tape.value(c).data();
            let deltas = tape.value(r).data();
            let hw = logits.len() / a;
            for (i, &z) in logits.iter().enumerate() {
                let score = 1.0 / (1.0 + (-z.f64()).exp());
                if score < cfg.score_threshold {
                    continue;
                }
                let (ai, pos) = (i / hw, i % hw);
                let std = self.config.delta_std;
                let d = [0, 1, 2, 3].map(|j| deltas[(ai * 4 + j) * hw + pos].f64() * std[j]);
                let bbox = decode(&anchors[offset + i], d).clamp_to(w as f64, h as f64);
                if bbox.area() > 0.0 {
                    cands.push(Detection { bbox, score });
                }
            }
            offset += logits.len();
        }
        cands.sort_by(|x, y| y.score.total_cmp(&x.score));
        cands.truncate(cfg.pre_nms_top_k);
        let mut kept = nms(&cands, cfg.nms_iou);
        kept.truncate(cfg.max_detections);
        Ok(kept)
    }
}
