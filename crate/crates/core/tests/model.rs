use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvpnet::autodiff::{SgdConfig, Tape, Tensor};
use mvpnet::detect::BBox;
use mvpnet::model::check::tiny_config;
use mvpnet::model::loss::{assign_anchors, total_loss};
use mvpnet::model::{
    flip_tensor, read_checkpoint, train, write_checkpoint, BodyZone, InitScheme, LossWeights, ModelConfig, MvpModel,
    PositionLabel, PredictConfig, TrainConfig, TrainSample,
};
use mvpnet::Error;

fn views(seed: u64, n_views: usize) -> Vec<Tensor<f64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n_views).map(|_| Tensor::from_fn(&[1, 3, 16, 16], |_| r.gen_range(-1.0..1.0))).collect()
}

fn samples(n: usize) -> Vec<TrainSample<f64>> {
    (0..n)
        .map(|i| {
            let x = 3.0 + i as f64;
            TrainSample {
                views: views(i as u64, 3),
                boxes: vec![BBox::new(x, 4.0, x + 6.0, 10.0).unwrap()],
                position: PositionLabel::from_index(i % 3, (i % 3) as f64 / 3.0 + 0.1).unwrap(),
            }
        })
        .collect()
}

fn quick_train(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        sgd: SgdConfig { learning_rate: lr, ..SgdConfig::default() },
        seed: 5,
        ..TrainConfig::default()
    }
}

fn ckpt_bytes(m: &MvpModel<f64>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(m, &mut buf).unwrap();
    buf
}

#[test]
fn backbone_is_shared_across_views() {
    let one = MvpModel::<f64>::new(ModelConfig { n_views: 1, fusion: "concat".into(), ..tiny_config() }, InitScheme::Random, 3).unwrap();
    let three = MvpModel::<f64>::new(ModelConfig { fusion: "concat".into(), ..tiny_config() }, InitScheme::Random, 3).unwrap();
    let backbone = |m: &MvpModel<f64>| m.params().iter().filter(|(_, n, _)| n.starts_with("backbone")).map(|(_, _, t)| t.len()).sum::<usize>();
    assert!(backbone(&one) > 0);
    assert_eq!(backbone(&one), backbone(&three));

    let v = views(1, 1);
    let same = vec![v[0].clone(), v[0].clone(), v[0].clone()];
    let mut t = Tape::new();
    let out = three.forward(&mut t, &same).unwrap();
    for level in 0..out.per_view[0].len() {
        let a = t.value(out.per_view[0][level]).data().to_vec();
        for view in &out.per_view[1..] {
            assert_eq!(t.value(view[level]).data(), &a[..]);
        }
    }
}

#[test]
fn fusion_is_chosen_by_name() {
    for name in ["concat", "cbam"] {
        let m = MvpModel::<f64>::new(ModelConfig { fusion: name.into(), ..tiny_config() }, InitScheme::Random, 0).unwrap();
        assert_eq!(m.fusion_name(), name);
    }
    let err = MvpModel::<f64>::new(ModelConfig { fusion: "gated".into(), ..tiny_config() }, InitScheme::Random, 0);
    assert!(err.is_err());
}

#[test]
fn output_shapes() {
    let m = MvpModel::<f64>::new(tiny_config(), InitScheme::Random, 0).unwrap();
    let mut t = Tape::new();
    let out = m.forward(&mut t, &views(0, 3)).unwrap();
    let shapes = m.level_shapes(16, 16);
    let a = tiny_config().anchors.aspect_ratios.len();
    for (l, &(h, w)) in shapes.iter().enumerate() {
        assert_eq!(t.value(out.cls[l]).shape(), [1, a, h, w]);
        assert_eq!(t.value(out.reg[l]).shape(), [1, 4 * a, h, w]);
    }
    let (logits, p) = out.position.unwrap();
    assert_eq!(t.value(logits).shape(), [1, 3]);
    assert_eq!(t.value(p).shape(), [1, 1]);
    assert_eq!(m.anchors(16, 16).unwrap().len(), shapes.iter().map(|(h, w)| h * w * a).sum::<usize>());

    let wrong = views(0, 2);
    assert!(m.forward(&mut Tape::new(), &wrong).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let m = MvpModel::<f64>::new(tiny_config(), InitScheme::Random, 9).unwrap();
    let bytes = ckpt_bytes(&m);
    let back: MvpModel<f64> = read_checkpoint(&bytes[..]).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(ckpt_bytes(&back), bytes);
    let v = views(2, 3);
    let cfg = PredictConfig { score_threshold: 0.0, ..PredictConfig::default() };
    assert_eq!(m.predict(&v, &cfg).unwrap(), back.predict(&v, &cfg).unwrap());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(read_checkpoint::<f64, _>(&bad[..]).is_err());
    assert!(read_checkpoint::<f64, _>(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let mut m = MvpModel::<f64>::new(tiny_config(), InitScheme::Random, 4).unwrap();
    let before = ckpt_bytes(&m);
    let log = train(&mut m, &samples(4), &quick_train(2, 0.0)).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(ckpt_bytes(&m), before);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let run = || {
        let mut m = MvpModel::<f64>::new(tiny_config(), InitScheme::Random, 4).unwrap();
        let log = train(&mut m, &samples(4), &quick_train(6, 0.01)).unwrap();
        (ckpt_bytes(&m), log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la.last().unwrap().loss < la[0].loss, "{la:?}");
}

#[test]
fn divergence_is_reported() {
    let mut m = MvpModel::<f64>::new(tiny_config(), InitScheme::Random, 4).unwrap();
    let cfg = TrainConfig { clip_norm: None, ..quick_train(3, 1e12) };
    match train(&mut m, &samples(4), &cfg) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn zero_init_output_commutes_with_flip() {
    let m = MvpModel::<f64>::new(tiny_config(), InitScheme::Zero, 0).unwrap();
    let v = views(3, 3);
    let flipped: Vec<_> = v.iter().map(flip_tensor).collect();
    let mut t = Tape::new();
    let a = m.forward(&mut t, &v).unwrap();
    let b = m.forward(&mut t, &flipped).unwrap();
    for (ca, cb) in a.cls.iter().zip(&b.cls) {
        assert_eq!(&flip_tensor(t.value(*ca)), t.value(*cb));
    }
}

#[test]
fn total_loss_is_detection_plus_weighted_position() {
    let m = MvpModel::<f64>::new(tiny_config(), InitScheme::Random, 2).unwrap();
    let cfg = tiny_config();
    let gts = [BBox::new(2.0, 2.0, 8.0, 9.0).unwrap()];
    let targets = assign_anchors(&m.anchors(16, 16).unwrap(), &gts, cfg.pos_iou, cfg.neg_iou, cfg.delta_std);
    let labels = [PositionLabel::new(BodyZone::Abdomen, 0.5).unwrap()];
    let mut values = Vec::new();
    for lambda_pos in [0.0, 1.0, 2.5] {
        let mut t = Tape::new();
        let out = m.forward(&mut t, &views(5, 3)).unwrap();
        let weights = LossWeights { lambda_pos, lambda_reg: 1.0 };
        let l = total_loss(&mut t, &out, std::slice::from_ref(&targets), &labels, &weights).unwrap();
        let det = t.value(l.detection.total).item();
        let pos = t.value(l.position.unwrap()).item();
        assert!((t.value(l.total).item() - (det + lambda_pos * pos)).abs() < 1e-12);
        values.push((det, pos));
    }
    assert!(values.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn position_head_is_optional() {
    let m = MvpModel::<f64>::new(ModelConfig { position: false, ..tiny_config() }, InitScheme::Random, 0).unwrap();
    let mut t = Tape::new();
    let out = m.forward(&mut t, &views(0, 3)).unwrap();
    assert!(out.position.is_none());
    assert!(m.params().iter().all(|(_, n, _)| !n.starts_with("position")));
}
