mod common;

use std::collections::BTreeSet;

use fcos::lacd::{
    diagnose_collapse, extract_features, guard_stages, lacd_stage, probe_profile, train_probe, FeatureMatrix,
    FeatureReduction, LacdConfig, ProbeConfig, ProbeProfile,
};
use fcos::data::{GenConfig, SignalDataset, Split};
use fcos::metrics::{count_params_flops, pruning_rate};
use fcos::model::{build_model, ArchSpec, LayerKind};
use fcos::tensor::Tensor;
use fcos::train::TrainConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `per_class` points around each of `classes` centers spaced `sep` apart.
fn blobs(classes: usize, per_class: usize, dim: usize, sep: f64, seed: u64) -> (FeatureMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..classes * per_class {
        let c = i % classes;
        for j in 0..dim {
            let center = if j == c % dim { sep * (1 + c / dim) as f64 } else { 0.0 };
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(center + z);
        }
        labels.push(c);
    }
    (
        FeatureMatrix {
            rows: labels.len(),
            dim,
            data,
        },
        labels,
    )
}

fn dataset(per_cell: usize, seed: u64) -> SignalDataset {
    common::small_dataset(GenConfig::default().classes, vec![4.0, 12.0], per_cell, seed)
}

fn probe_cfg(epochs: usize) -> ProbeConfig {
    ProbeConfig {
        lr: 0.01,
        batch: 64,
        epochs,
        reduction: FeatureReduction::GlobalAvgPool,
    }
}

#[test]
fn separable_blobs_are_probed_perfectly() {
    let (tr, ytr) = blobs(2, 200, 2, 12.0, 1);
    let (te, yte) = blobs(2, 100, 2, 12.0, 2);
    let (_, acc) = train_probe(&tr, &ytr, &te, &yte, 2, 0, &probe_cfg(10)).unwrap();
    assert_eq!(acc, 1.0);
    let (tr, ytr) = blobs(4, 200, 8, 12.0, 3);
    let (te, yte) = blobs(4, 100, 8, 12.0, 4);
    let (_, acc) = train_probe(&tr, &ytr, &te, &yte, 4, 0, &probe_cfg(10)).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let (tr, _) = blobs(4, 500, 8, 3.0, 3);
    let (te, _) = blobs(4, 500, 8, 3.0, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ytr: Vec<usize> = (0..tr.rows).map(|_| rng.gen_range(0..4)).collect();
    let yte: Vec<usize> = (0..te.rows).map(|_| rng.gen_range(0..4)).collect();
    let (_, acc) = train_probe(&tr, &ytr, &te, &yte, 4, 0, &probe_cfg(10)).unwrap();
    assert!((acc - 0.25).abs() <= 0.05, "{acc}");
}

#[test]
fn duplicated_features_leave_accuracy_unchanged() {
    let dup = |f: &FeatureMatrix| FeatureMatrix {
        rows: f.rows,
        dim: 2 * f.dim,
        data: (0..f.rows).flat_map(|i| [f.row(i), f.row(i)].concat()).collect(),
    };
    for seed in 0..3 {
        let (tr, ytr) = blobs(4, 300, 6, 1.5, 10 + seed);
        let (te, yte) = blobs(4, 300, 6, 1.5, 20 + seed);
        let cfg = probe_cfg(20);
        let (_, a) = train_probe(&tr, &ytr, &te, &yte, 4, seed, &cfg).unwrap();
        let (_, b) = train_probe(&dup(&tr), &ytr, &dup(&te), &yte, 4, seed, &cfg).unwrap();
        assert!(a > 0.4 && a < 0.99, "{a}");
        assert!((a - b).abs() <= 0.01, "seed {seed}: {a} vs {b}");
    }
}

#[test]
fn pre_head_features_reproduce_logits() {
    let ds = dataset(10, 0);
    for spec in [ArchSpec::plain(4, 2), ArchSpec::residual(4, 2)] {
        let model = build_model(&spec).unwrap();
        let last = model.units().last().unwrap().output;
        let f = extract_features(&model, last, &ds, Split::Test, FeatureReduction::GlobalAvgPool).unwrap();

        // the same probe point on an f64 copy of the model
        let wide = model.cast::<f64>();
        let idx = ds.indices(Split::Test);
        let (x, _) = ds.batch(&idx);
        let x = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v as f64).collect()).unwrap();
        let (logits, acts) = wide.forward_capture(&x, &[last]).unwrap();
        let a = &acts[0];
        let pooled: Vec<f64> = a.data.chunks(a.length).map(|r| r.iter().sum::<f64>() / a.length as f64).collect();
        for (p, q) in pooled.iter().zip(&f.data) {
            assert!((p - q).abs() <= 1e-4 * p.abs().max(1.0), "{p} vs {q}");
        }

        let head = wide.node(wide.output_node());
        let (w, b) = (head.param("weight").data(), head.param("bias").data());
        let k = model.classes();
        for i in 0..f.rows {
            for c in 0..k {
                let z = b[c] + (0..f.dim).map(|j| w[c * f.dim + j] * pooled[i * f.dim + j]).sum::<f64>();
                let got = logits.data()[i * k + c];
                assert!((z - got).abs() <= 1e-6, "{z} vs {got}");
            }
        }
    }
}

#[test]
fn pooled_features_have_one_column_per_channel_and_repeat() {
    let ds = dataset(5, 0);
    let model = build_model(&ArchSpec::residual(4, 1)).unwrap();
    for u in model.units() {
        let f = extract_features(&model, u.output, &ds, Split::Val, FeatureReduction::GlobalAvgPool).unwrap();
        let channels = [16, 32, 64][u.stage];
        assert_eq!(f.dim, channels);
        assert_eq!(f.rows, ds.indices(Split::Val).len());
        let again = extract_features(&model, u.output, &ds, Split::Val, FeatureReduction::GlobalAvgPool).unwrap();
        assert_eq!(f, again);
    }
}

#[test]
fn identity_residual_block_is_flagged() {
    let ds = dataset(40, 7);
    let mut model = build_model(&ArchSpec::residual(4, 3)).unwrap();
    // zero the last BN of unit 2 so the block reduces to relu(x) = x
    let bn = *model
        .unit(2)
        .unwrap()
        .nodes
        .iter()
        .rev()
        .find(|&&id| matches!(model.node(id).kind, LayerKind::BatchNorm { .. }))
        .unwrap();
    let ch = model.node(bn).param("gamma").len();
    *model.node_mut(bn).param_mut("gamma") = Tensor::zeros(vec![ch]);
    *model.node_mut(bn).param_mut("beta") = Tensor::zeros(vec![ch]);
    // full-batch probes, so identical features give identical probes
    let cfg = ProbeConfig {
        lr: 0.05,
        batch: usize::MAX,
        epochs: 100,
        reduction: FeatureReduction::GlobalAvgPool,
    };
    let profile = probe_profile(&model, &ds, &cfg, 0).unwrap();
    assert_eq!(profile.acc[0], profile.acc[1]);
    let d = diagnose_collapse(&profile, 0.005).unwrap();
    assert!(d.flagged.contains(&2), "{profile:?}");
    let removed = guard_stages(&model, &profile, &d.flagged);
    assert!(removed.contains(&2));
    let pruned = model.remove_layers(&removed).unwrap();
    assert!(pruned.unit(2).is_none());
    assert!(pruned.param_count() < model.param_count());
}

#[test]
fn probing_leaves_model_untouched() {
    let ds = dataset(10, 1);
    let model = build_model(&ArchSpec::plain(4, 4)).unwrap();
    let before = model.checksum();
    let p = probe_profile(&model, &ds, &ProbeConfig::default(), 9).unwrap();
    assert_eq!(model.checksum(), before);
    assert_eq!(p.units, vec![1, 2, 3, 4]);
    assert!(p.acc0.is_some());
}

#[test]
fn empty_diagnosis_removes_nothing() {
    let ds = dataset(10, 2);
    let model = build_model(&ArchSpec::plain(4, 5)).unwrap();
    let cfg = LacdConfig {
        beta: 1e-12,
        warm_epochs: 1,
        ..LacdConfig::default()
    };
    let train = TrainConfig {
        epochs: 1,
        batch: 32,
        ..TrainConfig::default()
    };
    let stage = lacd_stage(&model, &ds, &cfg, &train).unwrap();
    if stage.diagnosis.flagged.is_empty() {
        assert!(stage.removed.is_empty());
        let (p0, f0) = count_params_flops(&model, 128).unwrap();
        let (p1, f1) = count_params_flops(&stage.model, 128).unwrap();
        assert_eq!(pruning_rate(p0, p1), 0.0);
        assert_eq!(pruning_rate(f0, f1), 0.0);
    }
    // a synthetic profile with large steps flags nothing
    let p = ProbeProfile::from_accuracies(Some(0.25), &[0.4, 0.6, 0.8, 0.9]);
    let d = diagnose_collapse(&p, 0.005).unwrap();
    assert!(d.flagged.is_empty());
    assert!(guard_stages(&model, &p, &d.flagged).is_empty());
}

#[test]
fn guard_keeps_one_unit_per_stage() {
    let model = build_model(&ArchSpec::plain(4, 0)).unwrap();
    let p = ProbeProfile::from_accuracies(None, &[0.5; 4]);
    let all: BTreeSet<usize> = (1..=4).collect();
    let kept = guard_stages(&model, &p, &all);
    assert_eq!(kept.len(), 3);
}

fn accuracies() -> impl Strategy<Value = (Option<f64>, Vec<f64>)> {
    (
        prop::option::of(0.0f64..1.0),
        prop::collection::vec(prop_oneof![0.0f64..1.0, Just(0.5)], 2..8),
    )
}

proptest! {
    #[test]
    fn flagged_sets_grow_with_beta((acc0, acc) in accuracies(), b1 in 1e-4f64..0.5, b2 in 1e-4f64..0.5) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let p = ProbeProfile::from_accuracies(acc0, &acc);
        let small = diagnose_collapse(&p, lo).unwrap().flagged;
        let large = diagnose_collapse(&p, hi).unwrap().flagged;
        prop_assert!(small.is_subset(&large));
    }

    #[test]
    fn diagnosis_is_a_pure_threshold((acc0, acc) in accuracies(), beta in 1e-4f64..0.5) {
        let p = ProbeProfile::from_accuracies(acc0, &acc);
        let copy = p.clone();
        let d = diagnose_collapse(&p, beta).unwrap();
        prop_assert_eq!(&p, &copy);
        prop_assert_eq!(&d, &diagnose_collapse(&p, beta).unwrap());
        let mut prev = acc0;
        let mut want = BTreeSet::new();
        for (i, &a) in acc.iter().enumerate() {
            if let Some(q) = prev {
                if (a - q).abs() <= beta {
                    want.insert(i + 1);
                }
            }
            prev = Some(a);
        }
        prop_assert_eq!(d.flagged, want);
    }
}
