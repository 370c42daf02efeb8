use capsule_core::dataset::ClassSet;
use capsule_core::gradcheck::{check_gradients, GradCheckConfig};
use capsule_core::nn::{
    param_count, Backbone, BackboneConfig, DenseNetConfig, EnsembleModel, Fusion, Mode, ModelConfig, ResNetConfig,
    Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn classes(k: usize) -> ClassSet {
    ClassSet::new((0..k).map(|i| format!("class{i}"))).unwrap()
}

fn random_batch(n: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(n, 3, side, side, (0..n * 3 * side * side).map(|_| rng.sample(StandardNormal)).collect())
}

// Reference counts of the torchvision models with a 1000-way head.
#[test]
fn full_layouts_match_reference_parameter_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dense = Backbone::new(BackboneConfig::Densenet(DenseNetConfig::densenet121(1000)), &mut rng).unwrap();
    assert_eq!(param_count(&dense), 7_978_856);
    drop(dense);
    let res = Backbone::new(BackboneConfig::Resnet(ResNetConfig::resnet50(1000)), &mut rng).unwrap();
    assert_eq!(param_count(&res), 25_557_032);
}

#[test]
fn densenet121_channel_trace() {
    let cfg = DenseNetConfig::densenet121(10);
    assert_eq!(cfg.channel_trace(), vec![64, 256, 128, 512, 256, 1024, 512, 1024]);
    assert_eq!(cfg.feature_dim(), 1024);
    assert_eq!(ResNetConfig::resnet50(10).feature_dim(), 2048);
}

fn gradient_check(fusion: Fusion, joint: bool, seed: u64) {
    let cfg = ModelConfig { fusion, init_seed: seed, ..ModelConfig::tiny(3) };
    let mut model = EnsembleModel::new(&cfg, classes(3)).unwrap();
    let x = random_batch(4, 16, seed + 1);
    let check = GradCheckConfig { samples: 25, seed: seed + 2, ..Default::default() };
    let report = check_gradients(&mut model, &x, &[0, 2, 1, 2], joint, &check).unwrap();
    assert_eq!(report.checked.len(), 25);
    assert!(report.skipped.len() <= 5, "{} kinked entries", report.skipped.len());
    for s in &report.checked {
        assert!(s.rel_error < 1e-3, "{}[{}]: analytic {} numeric {}", s.name, s.index, s.analytic, s.numeric);
    }
}

#[test]
fn gradients_with_logit_fusion() {
    gradient_check(Fusion::MeanLogit, true, 11);
}

#[test]
fn gradients_with_independent_backbone_losses() {
    gradient_check(Fusion::MeanProb, false, 21);
}

#[test]
fn eval_mode_is_batch_independent() {
    let mut model = EnsembleModel::new(&ModelConfig::tiny(4), classes(4)).unwrap();
    let x = random_batch(3, 20, 5);
    model.forward(&x, Mode::Train).unwrap();
    let full = model.forward(&x, Mode::Eval).unwrap();
    let one = model.forward(&Tensor::from_vec(1, 3, 20, 20, x.sample(1).to_vec()), Mode::Eval).unwrap();
    assert_eq!(full.probs.row(1), one.probs.row(0));
    assert_eq!(full.features.row(1), one.features.row(0));
}
