use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rcmp_core::model::{Model, ModelConfig, StemConfig};
use rcmp_core::ops::BN_EPS;
use rcmp_core::quant::{
    calibrate, dequantize, fold_batchnorm, quantize_model, quantize_tensor, ActivationSites, FoldedModel, QuantMode,
    QuantParams, INPUT_SITE,
};
use rcmp_core::Tensor;

fn random_batch(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor<f32> {
    Tensor::from_fn(&[n, 3, size, size], |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Checks the round-trip bound for every value inside `[min, max]`.
fn assert_round_trip(values: &[f32]) {
    let (min, max) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let x = Tensor::new(&[values.len()], values.to_vec()).unwrap();
    let (q, p) = quantize_tensor(&x, min, max, 8).unwrap();
    p.validate().unwrap();
    let back = dequantize(&q, &p);
    for (&v, &r) in values.iter().zip(back.data()) {
        let err = (v as f64 - r as f64).abs();
        assert!(err <= p.scale as f64 / 2.0 + 1e-6, "{v} -> {r} (scale {})", p.scale);
    }
}

#[test]
fn round_trip_on_thousand_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let values: Vec<f32> = (0..1000).map(|_| rng.random_range(-3.0..5.0)).collect();
    assert_round_trip(&values);
}

#[test]
fn round_trip_per_distribution_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let uniform: Vec<f32> = (0..100_000).map(|_| rng.random_range(-2.5..7.0)).collect();
    let normal = Normal::new(0.3f32, 1.7).unwrap();
    let gauss: Vec<f32> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
    let constant = vec![-1.25f32; 100_000];
    for family in [&uniform, &gauss, &constant] {
        assert_round_trip(family);
    }
    let x = Tensor::new(&[4], vec![-1.25f32; 4]).unwrap();
    let (q, p) = quantize_tensor(&x, -1.25, -1.25, 8).unwrap();
    assert_eq!((p.scale, p.zero_point), (1.0, p.qmin));
    assert!(q.data().iter().all(|&v| v as i32 == p.qmin));
    assert_eq!(dequantize(&q, &p).data(), x.data());
}

#[test]
fn quantize_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a: f32 = rng.random_range(-10.0..0.0);
        let b: f32 = rng.random_range(0.01..10.0);
        let p = QuantParams::from_range(a, b, 8).unwrap();
        let mut sweep: Vec<f32> = (0..20_000).map(|_| rng.random_range(2.0 * a..2.0 * b)).collect();
        sweep.sort_by(f32::total_cmp);
        let q: Vec<i32> = sweep.iter().map(|&v| p.quantize(v)).collect();
        assert!(q.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(p.quantize(0.0), p.zero_point);
        assert_eq!(p.dequantize(p.zero_point), 0.0);
    }
}

#[test]
fn identity_range_recovers_integers() {
    let x = Tensor::new(&[256], (0..256).map(|v| v as f32).collect()).unwrap();
    let (q, p) = quantize_tensor(&x, 0.0, 255.0, 8).unwrap();
    assert_eq!((p.scale, p.zero_point, p.quant_range()), (1.0, 0, 256));
    assert_eq!(dequantize(&q, &p), x);
}

fn small_net(seed: u64) -> Model {
    let cfg = ModelConfig {
        input_size: 16,
        in_channels: 3,
        stem: StemConfig { kernel: 3, stride: 1, channels: 8 },
        block_counts: vec![1, 1],
        stage_channels: vec![8, 16],
        num_classes: 6,
    };
    with_random_bn_stats(Model::build(cfg, seed).unwrap(), seed)
}

/// Replaces the identity batch-norm statistics of a fresh model.
fn with_random_bn_stats(mut model: Model, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in model.buffers.iter_mut() {
        let var = name.ends_with("running_var");
        t.data_mut().iter_mut().for_each(|v| *v = if var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.2..0.2) });
    }
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".gamma") || name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
    }
    model
}

#[test]
fn calibration_is_exact_and_a_monoid() {
    let model = small_net(1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batches: Vec<Tensor<f32>> = (0..10).map(|_| random_batch(&mut rng, 3, 16)).collect();

    let one = calibrate(&model, &batches[..1]).unwrap();
    let r = one.sites[INPUT_SITE];
    let lo = batches[0].data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = batches[0].data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    assert_eq!((r.min, r.max), (lo, hi));

    let pair = calibrate(&model, &batches[..2]).unwrap();
    assert_eq!(pair, one.merge(&calibrate(&model, &batches[1..2]).unwrap()));

    // Replay oracle: one pass over every image at once.
    let all = calibrate(&model, &batches).unwrap();
    let mut joined = Vec::new();
    for b in &batches {
        joined.extend_from_slice(b.data());
    }
    let joined = Tensor::new(&[30, 3, 16, 16], joined).unwrap();
    let replay = calibrate(&model, std::slice::from_ref(&joined)).unwrap();
    assert_eq!(all.batches, 10);
    assert_eq!(all.sites, replay.sites);
    for (site, r) in &all.sites {
        assert!(r.min <= r.max, "{site}");
    }
    let logits = model.forward(&joined).unwrap();
    let fc = all.sites["fc"];
    let lmin = logits.data().iter().copied().fold(f32::INFINITY, f32::min);
    let lmax = logits.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    assert!((fc.min - lmin).abs() < 1e-4 && (fc.max - lmax).abs() < 1e-4);
    assert!(calibrate(&model, &[]).is_err());
}

#[test]
fn identity_batchnorm_fold() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Tensor::from_fn(&[4, 3, 3, 3], |_| rng.random_range(-0.2..0.2)).unwrap();
    let ones = Tensor::full(&[4], 1.0).unwrap();
    let zeros = Tensor::zeros(&[4]).unwrap();
    let (fw, fb) = fold_batchnorm(&w, &ones, &zeros, &zeros, &ones, 0.0).unwrap();
    assert_eq!((fw.data(), fb.data()), (w.data(), zeros.data()));
    let (fw, fb) = fold_batchnorm(&w, &ones, &zeros, &zeros, &ones, BN_EPS).unwrap();
    for (a, b) in fw.data().iter().zip(w.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
    assert!(fb.data().iter().all(|&b| b == 0.0));
    assert!(fold_batchnorm(&w, &ones, &zeros, &zeros, &Tensor::full(&[3], 1.0).unwrap(), BN_EPS).is_err());
}

#[test]
fn folded_forward_matches_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for model in [small_net(2), with_random_bn_stats(Model::build(ModelConfig::resnet_desk(6), 3).unwrap(), 3)] {
        let size = model.config.input_size;
        let x = random_batch(&mut rng, 2, size);
        let want = model.forward(&x).unwrap();
        let got = FoldedModel::fold(&model).unwrap().forward(&x, None).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-4, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_input_is_bit_identical_across_modes() {
    let model = small_net(3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let stats = calibrate(&model, &[random_batch(&mut rng, 4, 16)]).unwrap();
    for sites in [ActivationSites::All, ActivationSites::Boundary] {
        let q = quantize_model(&model, &stats, sites).unwrap();
        let zeros = Tensor::zeros(&[2, 3, 16, 16]).unwrap();
        let a = q.forward(&zeros, QuantMode::Simulated).unwrap();
        let b = q.forward(&zeros, QuantMode::Integer).unwrap();
        assert_eq!(a.data(), b.data(), "{sites:?}");
    }
}

#[test]
fn integer_mode_tracks_simulated_mode() {
    let model = with_random_bn_stats(Model::build(ModelConfig::resnet_desk(6), 4).unwrap(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let calib: Vec<Tensor<f32>> = (0..2).map(|_| random_batch(&mut rng, 16, 64)).collect();
    let stats = calibrate(&model, &calib).unwrap();
    let inputs = random_batch(&mut rng, 40, 64);
    for sites in [ActivationSites::All, ActivationSites::Boundary] {
        let q = quantize_model(&model, &stats, sites).unwrap();
        let step = q.activations["fc"].scale;
        let sim = q.forward(&inputs, QuantMode::Simulated).unwrap();
        let int = q.forward(&inputs, QuantMode::Integer).unwrap();
        let gap = sim.data().iter().zip(int.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(gap <= 2.0 * step, "{sites:?}: gap {gap} vs step {step}");
    }
}

#[test]
fn pruned_zeros_stay_zero_and_blob_shrinks() {
    let model = small_net(5);
    let (pruned, _, _) = rcmp_core::prune::apply_prune(&model, &Default::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let stats = calibrate(&pruned, &[random_batch(&mut rng, 4, 16)]).unwrap();
    let q = quantize_model(&pruned, &stats, ActivationSites::All).unwrap();
    let f32_bytes: usize = q.weights.values().map(|w| w.data.len() * 4).sum();
    assert_eq!(q.weight_bytes() * 4, f32_bytes);
    // fc has no batch norm, so its pruned zeros map straight onto the zero point.
    let fc = &q.weights["fc"];
    let zeros = pruned.params["fc.weight"].data().iter().filter(|&&v| v == 0.0).count();
    let at_zp = fc.data.data().iter().filter(|&&v| v as i32 == fc.params.zero_point).count();
    assert!(at_zp >= zeros && zeros > 0);
    assert!(q.activations.contains_key(INPUT_SITE));
    let mut short = stats.clone();
    short.sites.remove("fc");
    assert!(quantize_model(&pruned, &short, ActivationSites::All).is_err());
}
