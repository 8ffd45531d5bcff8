use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcmp_core::autograd::Fault;
use rcmp_core::model::{Model, ModelConfig, StemConfig};
use rcmp_core::train::{
    adam_step, cross_entropy, gradient_check, train, AdamState, GradCheckOptions, LabeledSet, TrainConfig,
};
use rcmp_core::Tensor;

#[test]
fn cross_entropy_of_equal_logits_is_ln_classes() {
    let logits = Tensor::full(&[4, 6], 0.7f64).unwrap();
    let l = cross_entropy(&logits, &[0, 1, 2, 5]).unwrap();
    assert!((l - 6f64.ln()).abs() < 1e-12);
    assert!((l - 1.791759).abs() < 1e-6);
}

#[test]
fn cross_entropy_saturates() {
    let mut data = vec![0.0f64; 6];
    data[2] = 30.0;
    let l = cross_entropy(&Tensor::new(&[1, 6], data).unwrap(), &[2]).unwrap();
    assert!((0.0..1e-9).contains(&l));
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let raw: Vec<f64> = (0..24).map(|_| rng.random_range(-5.0..5.0)).collect();
    let labels = [3usize, 0, 5, 1];
    let want: f64 = raw
        .chunks(6)
        .zip(&labels)
        .map(|(row, &y)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[y])
        .sum::<f64>()
        / 4.0;
    let got32 = cross_entropy(&Tensor::new(&[4, 6], raw.iter().map(|&v| v as f32).collect()).unwrap(), &labels).unwrap();
    assert!((got32 as f64 - want).abs() < 1e-6);
    assert!(cross_entropy(&Tensor::new(&[4, 6], raw).unwrap(), &[0, 0, 0, 6]).is_err());
}

fn single(name: &str, value: f32) -> BTreeMap<String, Tensor<f32>> {
    BTreeMap::from([(name.to_string(), Tensor::full(&[1], value).unwrap())])
}

#[test]
fn adam_first_step_is_minus_lr_sign() {
    let cfg = TrainConfig::default();
    for g in [1.0f32, -3.0, 1e-3] {
        let mut p = single("w", 0.0);
        let mut st = AdamState::default();
        adam_step(&mut p, &single("w", g), &mut st, &cfg).unwrap();
        let w = p["w"].data()[0] as f64;
        assert!((w + 0.001 * (g as f64).signum()).abs() < 1e-8, "{w}");
        assert_eq!(st.t, 1);
    }
    let mut p = single("w", 0.5);
    adam_step(&mut p, &single("w", 0.0), &mut AdamState::default(), &cfg).unwrap();
    assert_eq!(p["w"].data()[0], 0.5);
}

#[test]
fn adam_three_steps_match_unrolled_recurrence() {
    let cfg = TrainConfig::default();
    let (lr, b1, b2, eps) = (0.001f64, 0.9f64, 0.999f64, 1e-8f64);
    let g = 0.3f64;
    let mut p = single("w", 0.2);
    let mut st = AdamState::default();
    let (mut w, mut m, mut v) = (0.2f64, 0.0f64, 0.0f64);
    for t in 1..=3 {
        adam_step(&mut p, &single("w", g as f32), &mut st, &cfg).unwrap();
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w -= lr * mh / (vh.sqrt() + eps);
    }
    // The parameter is stored in f32; compare at that precision.
    assert!((p["w"].data()[0] as f64 - w).abs() < 1e-7, "{} vs {w}", p["w"].data()[0]);
    assert!((p["w"].data()[0] as f64 - (w as f32) as f64).abs() < 1e-9);
    assert_eq!(st.t, 3);
}

#[test]
fn adam_rejects_shape_mismatch() {
    let mut p = single("w", 0.0);
    let g = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]).unwrap())]);
    assert!(adam_step(&mut p, &g, &mut AdamState::default(), &TrainConfig::default()).is_err());
}

fn synthetic_set(seed: u64, n: usize) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::from_fn(&[n, 3, 64, 64], |_| rng.random_range(-1.0..1.0)).unwrap();
    LabeledSet::new(images, (0..n).map(|i| i % 6).collect()).unwrap()
}

#[test]
fn desk_model_memorises_eight_images() {
    let set = synthetic_set(1, 8);
    let model = Model::build(ModelConfig::resnet_desk(6), 0).unwrap();
    let cfg = TrainConfig { batch_size: 8, epochs: 50, ..TrainConfig::default() };
    let (_, hist) = train(&model, &set, None, &cfg, None, |_| {}).unwrap();
    assert_eq!(hist.epochs.len(), 50);
    let last = hist.epochs.last().unwrap().train_loss;
    assert!(last < 0.05, "final loss {last}");
}

#[test]
fn training_is_deterministic_and_epochs_zero_is_identity() {
    let set = synthetic_set(2, 20);
    let val = synthetic_set(3, 6);
    let model = Model::build(ModelConfig::resnet_desk(6), 4).unwrap();
    let cfg = TrainConfig { batch_size: 8, epochs: 2, seed: 9, ..TrainConfig::default() };
    let a = train(&model, &set, Some(&val), &cfg, None, |_| {}).unwrap();
    let b = train(&model, &set, Some(&val), &cfg, None, |_| {}).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.1.epochs.len(), 2);
    assert!(a.1.epochs.iter().all(|r| r.val_accuracy.is_some()));
    let (same, hist) = train(&model, &set, None, &TrainConfig { epochs: 0, ..cfg }, None, |_| {}).unwrap();
    assert_eq!(same, model);
    assert!(hist.epochs.is_empty());
}

/// Small residual network with every layer kind: stem, projection shortcut, both pools, classifier.
fn small_net(seed: u64) -> Model {
    let cfg = ModelConfig {
        input_size: 12,
        in_channels: 3,
        stem: StemConfig { kernel: 3, stride: 1, channels: 4 },
        block_counts: vec![1, 1],
        stage_channels: vec![4, 8],
        num_classes: 6,
    };
    Model::build(cfg, seed).unwrap()
}

fn small_batch(seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[2, 3, 12, 12], |_| rng.random_range(-1.0..1.0)).unwrap()
}

#[test]
fn gradient_check_passes_on_random_small_networks() {
    for seed in 0..3 {
        let model = small_net(seed);
        let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
        let report = gradient_check(&model, &small_batch(seed + 10), &[1, 4], &opts).unwrap();
        assert!(report.checked >= 200);
        for kind in ["conv", "bn", "linear"] {
            assert!(report.per_kind.contains_key(kind), "{kind} not covered");
        }
        assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn gradient_check_catches_mutated_conv_gradient() {
    let model = small_net(0);
    let opts = GradCheckOptions { fault: Some(Fault::ConvWeightGradScaled), ..GradCheckOptions::default() };
    let bad = gradient_check(&model, &small_batch(10), &[1, 4], &opts).unwrap();
    assert!(bad.per_kind["conv"] > 1e-2, "{bad:?}");
}

#[test]
fn gradient_check_passes_on_zero_input() {
    // At initialisation every BN shift is 0, so a zero batch puts every ReLU
    // exactly on its kink. Move the affine parameters off it, as one
    // optimiser step would.
    let mut model = small_net(1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".beta") || name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
    }
    let zeros = Tensor::zeros(&[2, 3, 12, 12]).unwrap();
    let z = gradient_check(&model, &zeros, &[0, 5], &GradCheckOptions::default()).unwrap();
    assert!(z.checked >= 200);
    assert!(z.max_rel_error <= 1e-4, "{z:?}");
}
