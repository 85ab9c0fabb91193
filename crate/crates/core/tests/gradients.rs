use occface::data::{synthesize_sample, SceneParams};
use occface::layout::LandmarkLayout;
use occface::model::{Model, ModelConfig};
use occface::training::gradcheck::{check_term, LossTerm};
use occface::training::{assemble_batch, prepare, TrainConfig};

fn micro() -> ModelConfig {
    let mut mc = ModelConfig::default();
    mc.backbone.stacks = 1;
    mc.backbone.channels = 8;
    mc.backbone.crop_h = 16;
    mc.backbone.crop_w = 16;
    mc.visibility.proj_channels = 4;
    mc.temperature = 0.5;
    mc
}

#[test]
fn every_loss_term_matches_finite_differences() {
    let mut model = Model::new(&micro(), &LandmarkLayout::bundled()).unwrap();
    let scene = SceneParams {
        image_size: 40,
        ..SceneParams::default()
    };
    let samples: Vec<_> = (0..2).map(|s| synthesize_sample(s + 3, &scene).unwrap()).collect();
    let cfg = TrainConfig::default();
    let data = prepare(&samples, &model, &cfg.targets).unwrap();
    let batch = assemble_batch(&data, &[0, 1], &[Some(9), None], &model, &cfg).unwrap();
    for (k, term) in LossTerm::ALL.into_iter().enumerate() {
        let probes = check_term(&mut model, &batch, &cfg, term, 10, 1e-6, k as u64).unwrap();
        for p in probes {
            assert!(p.rel_error() < 1e-3, "{term:?} {p:?}");
        }
    }
}
