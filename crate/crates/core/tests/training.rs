use occface::checkpoint::Checkpoint;
use occface::data::{synthesize_sample, SceneParams};
use occface::evalsuite::{evaluate, MetricConfig};
use occface::layout::LandmarkLayout;
use occface::model::{Model, ModelConfig};
use occface::training::{prepare, train, TrainConfig, Trainer};

fn setup(epochs: usize) -> (Trainer, Vec<occface::data::AnnotatedSample>) {
    let mut mc = ModelConfig::default();
    mc.backbone.stacks = 1;
    mc.backbone.channels = 8;
    mc.backbone.crop_h = 16;
    mc.backbone.crop_w = 16;
    mc.visibility.proj_channels = 4;
    let scene = SceneParams {
        image_size: 32,
        ..SceneParams::default()
    };
    let samples = (0..24).map(|s| synthesize_sample(s, &scene).unwrap()).collect();
    let cfg = TrainConfig {
        epochs,
        batch_size: 8,
        lr: 0.005,
        ..TrainConfig::default()
    };
    let model = Model::new(&mc, &LandmarkLayout::bundled()).unwrap();
    (Trainer::new(model, cfg).unwrap(), samples)
}

#[test]
fn losses_fall_and_stay_finite() {
    let (mut t, samples) = setup(12);
    let data = prepare(&samples, &t.model, &t.cfg.targets).unwrap();
    train(&mut t, &data, None).unwrap();
    assert_eq!(t.log.len(), 12);
    for l in &t.log {
        assert!([l.l_hm, l.l_pt, l.l_edge, l.l_vis, l.l_syn, l.total].iter().all(|v| v.is_finite()));
    }
    let first = t.log.first().unwrap();
    let last = t.log.last().unwrap();
    assert!(last.l_hm < first.l_hm, "{} -> {}", first.l_hm, last.l_hm);
    assert!(last.l_pt < first.l_pt, "{} -> {}", first.l_pt, last.l_pt);
    // Warm start covers the first three of twelve epochs.
    assert!(t.log[..3].iter().all(|l| l.l_vis == 0.0 && l.l_syn == 0.0));
    assert!(t.log[3..].iter().all(|l| l.l_vis > 0.0));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (mut t, samples) = setup(2);
    let data = prepare(&samples, &t.model, &t.cfg.targets).unwrap();
    train(&mut t, &data, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    t.to_checkpoint().unwrap().save(&path).unwrap();
    let back = Model::from_checkpoint(&Checkpoint::load(&path).unwrap(), Some(&LandmarkLayout::bundled())).unwrap();
    let a = t.model.predict_samples(&samples[..5], 2).unwrap();
    let b = back.predict_samples(&samples[..5], 4).unwrap();
    assert_eq!(a, b);
    let ra = evaluate(&t.model, &samples, &MetricConfig::default()).unwrap();
    let rb = evaluate(&back, &samples, &MetricConfig::default()).unwrap();
    assert_eq!(ra.metrics, rb.metrics);
}
