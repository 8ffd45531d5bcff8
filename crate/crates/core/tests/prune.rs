use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcmp_core::model::{Model, ModelConfig, StemConfig};
use rcmp_core::prune::{
    apply_prune, compute_threshold, quantile, sparsity_report, PruneConfig, PruneScope, PruneTargets, Thresholds,
};
use rcmp_core::train::{masked_finetune, LabeledSet, TrainConfig};
use rcmp_core::Tensor;

fn small_cfg(in_channels: usize, stem: usize, kernel: usize) -> ModelConfig {
    ModelConfig {
        input_size: 12,
        in_channels,
        stem: StemConfig { kernel, stride: 1, channels: stem },
        block_counts: vec![1, 1],
        stage_channels: vec![4, 8],
        num_classes: 3,
    }
}

fn only(name: &str) -> PruneConfig {
    PruneConfig { targets: PruneTargets::Names(vec![name.into()]), ..PruneConfig::default() }
}

/// Full-sort quantile with linear interpolation.
fn sorted_quantile(values: &[f32], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[test]
fn four_weight_example_keeps_the_two_largest() {
    let mut model = Model::build(small_cfg(1, 1, 2), 0).unwrap();
    model.params.insert("conv1.weight".into(), Tensor::new(&[1, 1, 2, 2], vec![0.1, -0.5, 0.2, 0.9]).unwrap());
    let cfg = PruneConfig { retain_quantile: 0.5, ..only("conv1.weight") };
    let Thresholds::Global(tau) = compute_threshold(&model, &cfg).unwrap() else { panic!("global scope") };
    assert!((tau - 0.35).abs() < 1e-7);
    let (pruned, mask, _) = apply_prune(&model, &cfg).unwrap();
    assert_eq!(pruned.params["conv1.weight"].data(), &[0.0, -0.5, 0.0, 0.9]);
    assert_eq!(mask.masks["conv1.weight"].data(), &[0, 1, 0, 1]);
    let row = sparsity_report(&pruned, Some(&mask)).unwrap().per_layer.into_iter().find(|r| r.name == "conv1").unwrap();
    assert_eq!((row.total, row.nonzero), (4, 2));
}

#[test]
fn quantile_edge_cases() {
    let mut v = [0.3f32, 0.1, 0.2];
    assert_eq!(quantile(&mut v, 0.0).unwrap(), 0.1);
    assert_eq!(quantile(&mut v, 1.0).unwrap(), 0.3);
    assert!(quantile(&mut [], 0.5).is_err());
    assert!(PruneConfig { retain_quantile: 1.0, ..PruneConfig::default() }.validate().is_err());
    assert!(PruneConfig { retain_quantile: -0.1, ..PruneConfig::default() }.validate().is_err());
    let model = Model::build(small_cfg(3, 4, 3), 0).unwrap();
    assert!(compute_threshold(&model, &PruneConfig { targets: PruneTargets::Names(vec![]), ..PruneConfig::default() }).is_err());
}

#[test]
fn uniform_weights_keep_a_third() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let values: Vec<f32> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mags: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    let tau = quantile(&mut mags.clone(), 0.67).unwrap();
    assert!((tau as f64 - sorted_quantile(&mags, 0.67)).abs() < 1e-6);
    let kept = values.iter().filter(|v| v.abs() >= tau).count() as f64 / 1e4;
    assert!((kept - 0.33).abs() <= 0.01, "{kept}");
}

#[test]
fn mask_matches_sort_and_cut_oracle() {
    let model = Model::build(small_cfg(3, 4, 3), 7).unwrap();
    let targets = ["conv1.weight", "fc.weight"];
    let cfg = PruneConfig { retain_quantile: 0.6, targets: PruneTargets::Names(targets.map(String::from).to_vec()), ..PruneConfig::default() };
    let (pruned, mask, _) = apply_prune(&model, &cfg).unwrap();
    let all: Vec<f32> = targets.iter().flat_map(|n| model.params[*n].data().iter().map(|v| v.abs())).collect();
    let tau = sorted_quantile(&all, 0.6) as f32;
    for name in targets {
        let want: Vec<u8> = model.params[name].data().iter().map(|v| (v.abs() >= tau) as u8).collect();
        assert_eq!(mask.masks[name].data(), want.as_slice(), "{name}");
        for (&m, (&a, &b)) in want.iter().zip(pruned.params[name].data().iter().zip(model.params[name].data())) {
            assert_eq!(a, if m == 1 { b } else { 0.0 });
        }
    }
    for (name, t) in &model.params {
        if !targets.contains(&name.as_str()) {
            assert_eq!(&pruned.params[name], t, "{name} touched");
        }
    }

    let per_layer = PruneConfig { scope: PruneScope::PerLayer, ..cfg };
    let (_, mask, _) = apply_prune(&model, &per_layer).unwrap();
    for name in targets {
        let mags: Vec<f32> = model.params[name].data().iter().map(|v| v.abs()).collect();
        let tau = sorted_quantile(&mags, 0.6) as f32;
        let want: Vec<u8> = mags.iter().map(|&m| (m >= tau) as u8).collect();
        assert_eq!(mask.masks[name].data(), want.as_slice(), "{name}");
    }
}

#[test]
fn full_network_default_prune_ratio() {
    let model = Model::build(ModelConfig::resnet18_full(6), 0).unwrap();
    let (pruned, mask, report) = apply_prune(&model, &PruneConfig::default()).unwrap();
    // Independent scan: every zero in a conv or linear weight is a pruned parameter.
    let total: u64 = pruned.params.values().map(|t| t.len() as u64).sum();
    let zeros: u64 = pruned
        .params
        .iter()
        .filter(|(n, _)| n.ends_with(".weight") && pruned.params[*n].shape().len() != 1)
        .map(|(_, t)| t.data().iter().filter(|&&v| v == 0.0).count() as u64)
        .sum();
    assert_eq!(total, 11_179_590);
    assert_eq!(report.total, total);
    assert_eq!(report.nonzero, total - zeros);
    assert_eq!(mask.pruned_count(), zeros);
    assert!((report.reduction_percent - 66.92).abs() <= 0.5, "{}", report.reduction_percent);
    let rel = (report.nonzero as f64 - 3_697_762.0).abs() / 3_697_762.0;
    assert!(rel <= 0.005, "nonzero {} ({:.3}%)", report.nonzero, rel * 100.0);
    assert_eq!(report.per_layer.iter().map(|r| r.nonzero).sum::<u64>(), report.nonzero);
}

#[test]
fn monotone_in_quantile_and_scale_equivariant() {
    let model = Model::build(ModelConfig::resnet_desk(6), 2).unwrap();
    let mut last = u64::MAX;
    for q in [0.0, 0.2, 0.5, 0.67, 0.9, 0.99] {
        let (_, _, r) = apply_prune(&model, &PruneConfig { retain_quantile: q, ..PruneConfig::default() }).unwrap();
        assert!(r.nonzero <= last, "q={q}");
        last = r.nonzero;
    }
    let (_, base, _) = apply_prune(&model, &PruneConfig::default()).unwrap();
    let mut scaled = model.clone();
    for name in base.masks.keys() {
        scaled.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v *= 4.0);
    }
    let (_, again, _) = apply_prune(&scaled, &PruneConfig::default()).unwrap();
    assert_eq!(base.masks, again.masks);
}

#[test]
fn zero_quantile_is_a_no_op() {
    let model = Model::build(ModelConfig::resnet_desk(6), 3).unwrap();
    let (pruned, mask, report) = apply_prune(&model, &PruneConfig { retain_quantile: 0.0, ..PruneConfig::default() }).unwrap();
    assert_eq!(pruned, model);
    assert_eq!(mask.pruned_count(), 0);
    assert_eq!(report.reduction_percent, 0.0);
    let fresh = sparsity_report(&model, None).unwrap();
    assert_eq!((fresh.nonzero, fresh.reduction_percent), (fresh.total, 0.0));
}

#[test]
fn report_rejects_nonzero_under_mask() {
    let model = Model::build(small_cfg(3, 4, 3), 1).unwrap();
    let (mut pruned, mask, _) = apply_prune(&model, &PruneConfig::default()).unwrap();
    let w = pruned.params.get_mut("fc.weight").unwrap();
    let i = mask.masks["fc.weight"].data().iter().position(|&m| m == 0).unwrap();
    w.data_mut()[i] = 0.5;
    assert!(sparsity_report(&pruned, Some(&mask)).is_err());
}

#[test]
fn masked_finetune_preserves_zeros() {
    let model = Model::build(small_cfg(3, 4, 3), 5).unwrap();
    let (pruned, mask, _) = apply_prune(&model, &PruneConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let images = Tensor::from_fn(&[12, 3, 12, 12], |_| rng.random_range(-1.0..1.0)).unwrap();
    let set = LabeledSet::new(images, (0..12).map(|i| i % 3).collect()).unwrap();
    let cfg = TrainConfig { batch_size: 4, epochs: 3, learning_rate: 0.01, ..TrainConfig::default() };
    let (tuned, hist) = masked_finetune(&pruned, &mask, &set, None, &cfg, |_| {}).unwrap();
    assert_eq!(hist.epochs.len(), 3);
    let mut moved = false;
    for (name, m) in &mask.masks {
        for ((&k, &v), &before) in m.data().iter().zip(tuned.params[name].data()).zip(pruned.params[name].data()) {
            if k == 0 {
                assert_eq!(v, 0.0, "{name}");
            } else {
                moved |= v != before;
            }
        }
    }
    assert!(moved, "unmasked weights never changed");
    sparsity_report(&tuned, tuned.masks.as_ref()).unwrap();

    let (same, _) = masked_finetune(&pruned, &mask, &set, None, &TrainConfig { epochs: 0, ..cfg }, |_| {}).unwrap();
    assert_eq!(same, pruned);
}
