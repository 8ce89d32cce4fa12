//! Gradient checks of the fusion block and of the complete training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fusion::{AttentionFusion, Fusion, FusionInit};
use super::loss::{assign_anchors, total_loss};
use super::{BackboneConfig, InitScheme, LossWeights, ModelConfig, MvpModel, PositionLabel};
use crate::autodiff::suite::{probe, randn, SuiteEntry, MODEL_TOLERANCE, OP_TOLERANCE};
use crate::autodiff::{gradient_check, GradCheckOptions, ParamStore, Tape};
use crate::detect::{AnchorSet, BBox};
use crate::error::Result;

/// A model small enough to check every parameter coordinate quickly.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { stages: vec![(4, 2), (6, 2)], pyramid_channels: 4, pyramid_levels: 2 },
        n_ctx: 3,
        n_views: 3,
        fusion: "cbam".into(),
        reduction: 4,
        position: true,
        head_channels: 4,
        position_channels: 4,
        anchors: AnchorSet { scales: vec![4.0, 8.0], aspect_ratios: vec![0.5, 1.0, 2.0] },
        pos_iou: 0.5,
        neg_iou: 0.3,
        delta_std: [0.1, 0.1, 0.2, 0.2],
    }
}

fn attention_entry(seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let init = FusionInit { channels: 9, reduction: 3, scheme: InitScheme::Random };
    let fusion = AttentionFusion::new(&init, &mut store, &mut rng);
    let views: Vec<_> = (0..3).map(|i| store.add(format!("view{i}"), randn(&mut rng, &[2, 3, 4, 4]))).collect();
    let target = randn(&mut rng, &[2, 9, 4, 4]);
    let report = gradient_check(
        &store,
        |t, s| {
            let v: Vec<_> = views.iter().map(|&id| t.param(s, id)).collect();
            let y = fusion.fuse_level(t, s, &v)?;
            probe(t, y, &target)
        },
        GradCheckOptions { seed, ..Default::default() },
    )?;
    Ok(SuiteEntry { name: "attention_fusion".into(), report, tolerance: OP_TOLERANCE })
}

fn model_entry(seed: u64) -> Result<SuiteEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MvpModel::<f64>::new(tiny_config(), InitScheme::Random, seed)?;
    let (h, w) = (16, 16);
    let views: Vec<_> = (0..3).map(|_| randn(&mut rng, &[1, 3, h, w])).collect();
    let gt: Vec<BBox> = (0..2)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
            let (bw, bh) = (rng.gen_range(3.0..6.0), rng.gen_range(3.0..6.0));
            BBox::new(x, y, x + bw, y + bh)
        })
        .collect::<Result<_>>()?;
    let anchors = model.anchors(h, w)?;
    let targets = assign_anchors(&anchors, &gt, 0.5, 0.3, [0.1, 0.1, 0.2, 0.2]);
    let label = PositionLabel::from_continuous(rng.gen_range(0.0..1.0))?;
    let weights = LossWeights::default();
    let report = gradient_check(
        model.params(),
        |t: &mut Tape<f64>, s| {
            let out = model.forward_with(t, s, &views)?;
            Ok(total_loss(t, &out, std::slice::from_ref(&targets), &[label], &weights)?.total)
        },
        GradCheckOptions { seed, ..Default::default() },
    )?;
    Ok(SuiteEntry { name: "mvp_model total loss".into(), report, tolerance: MODEL_TOLERANCE })
}

/// Attention block at the per-op tolerance and the full model loss at the
/// whole-model tolerance.
pub fn model_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    Ok(vec![attention_entry(seed)?, model_entry(seed)?])
}
