use crate::detect::AnchorSet;
use crate::error::{Error, Result};

/// Toy stand-in for the per-pathway FPN backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// (output channels, stride) of each 3x3 conv stage.
    pub stages: Vec<(usize, usize)>,
    pub pyramid_channels: usize,
    /// Pyramid is built from the last `pyramid_levels` stages.
    pub pyramid_levels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { stages: vec![(8, 2), (16, 2), (32, 2)], pyramid_channels: 32, pyramid_levels: 2 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.stages.iter().any(|&(c, s)| c == 0 || s == 0) {
            return Err(Error::Config("stage channels and strides must be positive".into()));
        }
        if self.pyramid_levels == 0 || self.pyramid_levels > self.stages.len() {
            return Err(Error::Config(format!(
                "pyramid_levels must be in 1..={}, got {}",
                self.stages.len(),
                self.pyramid_levels
            )));
        }
        if self.pyramid_channels == 0 {
            return Err(Error::Config("pyramid_channels must be positive".into()));
        }
        Ok(())
    }

    /// Cumulative stride of each pyramid level, finest first.
    pub fn level_strides(&self) -> Vec<usize> {
        let cumulative: Vec<usize> = self
            .stages
            .iter()
            .scan(1, |acc, &(_, s)| {
                *acc *= s;
                Some(*acc)
            })
            .collect();
        cumulative[self.stages.len() - self.pyramid_levels..].to_vec()
    }
}

/// Multi-task loss weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_pos: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_pos: 1.0, lambda_reg: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pos >= 0.0) || !(self.lambda_reg >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// He-normal convolutions, Xavier-normal linear layers, zero biases.
    Random,
    /// Every parameter zero.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Slices per input slab.
    pub n_ctx: usize,
    /// Number of window pathways.
    pub n_views: usize,
    /// Registered fusion strategy name.
    pub fusion: String,
    /// Bottleneck reduction ratio of the attention MLP.
    pub reduction: usize,
    /// Attach the position head and its loss.
    pub position: bool,
    pub head_channels: usize,
    pub position_channels: usize,
    pub anchors: AnchorSet,
    /// Positive / negative IoU thresholds for anchor assignment.
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Regression targets are box deltas divided by these.
    pub delta_std: [f64; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            n_ctx: 3,
            n_views: 3,
            fusion: "cbam".into(),
            reduction: 4,
            position: true,
            head_channels: 32,
            position_channels: 32,
            anchors: AnchorSet::default(),
            pos_iou: 0.5,
            neg_iou: 0.3,
            delta_std: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.anchors.validate()?;
        if self.n_ctx % 2 == 0 {
            return Err(Error::Config(format!("n_ctx must be odd, got {}", self.n_ctx)));
        }
        if self.n_views == 0 {
            return Err(Error::Config("need at least one view".into()));
        }
        if self.reduction == 0 || self.head_channels == 0 || self.position_channels == 0 {
            return Err(Error::Config("reduction and head widths must be positive".into()));
        }
        if self.anchors.scales.len() < self.backbone.pyramid_levels {
            return Err(Error::Config(format!(
                "{} anchor scales for {} pyramid levels",
                self.anchors.scales.len(),
                self.backbone.pyramid_levels
            )));
        }
        if self.delta_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("delta_std entries must be positive".into()));
        }
        if !(self.neg_iou <= self.pos_iou) {
            return Err(Error::Config("neg_iou must not exceed pos_iou".into()));
        }
        Ok(())
    }

    /// Channels of a fused pyramid level.
    pub fn fused_channels(&self) -> usize {
        self.n_views * self.backbone.pyramid_channels
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<V: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
    v.split(',').map(|s| parse_num(key, s)).collect()
}

pub(crate) fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn join<V: std::fmt::Display>(xs: &[V]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "stages",
        "pyramid_channels",
        "pyramid_levels",
        "n_ctx",
        "n_views",
        "fusion",
        "reduction",
        "position",
        "head_channels",
        "position_channels",
        "anchor_scales",
        "anchor_ratios",
        "pos_iou",
        "neg_iou",
        "delta_std",
    ];

    /// `key = value` pairs in [`Self::KEYS`] order; [`Self::set`] reads them back.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let stages: Vec<String> = self.backbone.stages.iter().map(|(c, s)| format!("{c}/{s}")).collect();
        vec![
            ("stages", stages.join(",")),
            ("pyramid_channels", self.backbone.pyramid_channels.to_string()),
            ("pyramid_levels", self.backbone.pyramid_levels.to_string()),
            ("n_ctx", self.n_ctx.to_string()),
            ("n_views", self.n_views.to_string()),
            ("fusion", self.fusion.clone()),
            ("reduction", self.reduction.to_string()),
            ("position", if self.position { "on" } else { "off" }.to_string()),
            ("head_channels", self.head_channels.to_string()),
            ("position_channels", self.position_channels.to_string()),
            ("anchor_scales", join(&self.anchors.scales)),
            ("anchor_ratios", join(&self.anchors.aspect_ratios)),
            ("pos_iou", self.pos_iou.to_string()),
            ("neg_iou", self.neg_iou.to_string()),
            ("delta_std", join(&self.delta_std)),
        ]
    }

    /// Sets one key; returns `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "stages" => {
                self.backbone.stages = value
                    .split(',')
                    .map(|s| {
                        let (c, st) = s
                            .split_once('/')
                            .ok_or_else(|| Error::Config(format!("stages: expected channels/stride, got {s:?}")))?;
                        Ok((parse_num(key, c)?, parse_num(key, st)?))
                    })
                    .collect::<Result<_>>()?
            }
            "pyramid_channels" => self.backbone.pyramid_channels = parse_num(key, value)?,
            "pyramid_levels" => self.backbone.pyramid_levels = parse_num(key, value)?,
            "n_ctx" => self.n_ctx = parse_num(key, value)?,
            "n_views" => self.n_views = parse_num(key, value)?,
            "fusion" => self.fusion = value.trim().to_string(),
            "reduction" => self.reduction = parse_num(key, value)?,
            "position" => self.position = parse_switch(key, value)?,
            "head_channels" => self.head_channels = parse_num(key, value)?,
            "position_channels" => self.position_channels = parse_num(key, value)?,
            "anchor_scales" => self.anchors.scales = parse_list(key, value)?,
            "anchor_ratios" => self.anchors.aspect_ratios = parse_list(key, value)?,
            "pos_iou" => self.pos_iou = parse_num(key, value)?,
            "neg_iou" => self.neg_iou = parse_num(key, value)?,
            "delta_std" => {
                self.delta_std = parse_list::<f64>(key, value)?
                    .try_into()
                    .map_err(|_| Error::Config("delta_std: expected four values".into()))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}
