mod common;

use std::collections::BTreeSet;

use common::{kept, plain_counts};
use fcos::baselines::{
    check_stages, l1_channel_prune, probe_layer_prune, random_layer_prune, random_units, smallest_gain_units, top_k,
};
use fcos::data::GenConfig;
use fcos::lacd::{ProbeConfig, ProbeProfile};
use fcos::metrics::count_params_flops;
use fcos::model::{build_model, ArchSpec};
use fcos::tensor::Tensor;
use fcos::FcosError;
use proptest::prelude::*;

#[test]
fn l1_keeps_largest_norm_channels() {
    assert_eq!(top_k(&[5.0, 1.0, 3.0, 2.0], 2), vec![0, 2]);
    let model = build_model(&ArchSpec::plain(4, 7)).unwrap();
    let pruned = l1_channel_prune(&model, 0.25).unwrap();
    let first = model.conv_ids()[0];
    let w = model.node(first).param("weight");
    let (c_out, per) = (w.shape()[0], w.shape()[1] * w.shape()[2]);
    let mut norms: Vec<(f64, usize)> = (0..c_out)
        .map(|o| (w.data()[o * per..(o + 1) * per].iter().map(|v| v.abs() as f64).sum(), o))
        .collect();
    norms.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut want: Vec<usize> = norms[..4].iter().map(|n| n.1).collect();
    want.sort_unstable();
    let got = pruned.node(first).param("weight");
    assert_eq!(got.shape(), &[4, 2, 8]);
    for (k, &o) in want.iter().enumerate() {
        assert_eq!(&got.data()[k * per..(k + 1) * per], &w.data()[o * per..(o + 1) * per]);
    }
}

#[test]
fn l1_ratio_one_is_identity() {
    for spec in [ArchSpec::plain(4, 1), ArchSpec::residual(4, 1)] {
        let model = build_model(&spec).unwrap();
        assert_eq!(l1_channel_prune(&model, 1.0).unwrap(), model);
    }
}

#[test]
fn l1_counts_match_closed_form() {
    let model = build_model(&ArchSpec::plain(4, 2)).unwrap();
    for tenths in 1..=10 {
        let pruned = l1_channel_prune(&model, tenths as f64 / 10.0).unwrap();
        let widths: Vec<usize> = [16, 32, 64, 64].iter().map(|&w| kept(w, tenths)).collect();
        assert_eq!(
            count_params_flops(&pruned, 128).unwrap(),
            plain_counts(&widths, 8, 4, 128, true)
        );
        let x = Tensor::filled(vec![2, 2, 128], 0.5f32);
        assert!(pruned.forward(&x).unwrap().all_finite());
    }
}

#[test]
fn random_units_are_uniform() {
    let model = build_model(&ArchSpec::residual(4, 0)).unwrap();
    let mut hits = [0usize; 7];
    for seed in 0..1000 {
        let s = random_units(&model, 1, seed).unwrap();
        assert_eq!(s.len(), 1);
        hits[*s.iter().next().unwrap()] += 1;
    }
    assert_eq!(hits[0], 0);
    for (u, &h) in hits.iter().enumerate().skip(1) {
        let f = h as f64 / 1000.0;
        assert!((f - 1.0 / 6.0).abs() <= 0.05, "unit {u}: {f}");
    }
}

#[test]
fn random_layer_prune_edge_cases() {
    let model = build_model(&ArchSpec::residual(4, 0)).unwrap();
    assert_eq!(random_layer_prune(&model, 0, 3).unwrap(), model);
    assert_eq!(random_units(&model, 2, 11).unwrap(), random_units(&model, 2, 11).unwrap());
    assert_eq!(
        random_layer_prune(&model, 2, 11).unwrap(),
        random_layer_prune(&model, 2, 11).unwrap()
    );
    assert!(matches!(random_units(&model, 7, 0), Err(FcosError::Config(_))));
}

#[test]
fn all_units_trip_the_stage_guard() {
    let model = build_model(&ArchSpec::plain(4, 0)).unwrap();
    let all: BTreeSet<usize> = (1..=4).collect();
    assert!(matches!(check_stages(&model, &all), Err(FcosError::Config(_))));
    assert!(check_stages(&model, &BTreeSet::from([1, 2, 3])).is_ok());

    let ds = common::small_dataset(GenConfig::default().classes, vec![10.0], 10, 0);
    let probe = ProbeConfig {
        epochs: 1,
        ..ProbeConfig::default()
    };
    let r = probe_layer_prune(&model, &ds, 4, &probe, 0);
    assert!(matches!(r, Err(FcosError::Config(_))));
    let (pruned, profile, ids) = probe_layer_prune(&model, &ds, 1, &probe, 0).unwrap();
    assert_eq!(ids, smallest_gain_units(&profile, 1).unwrap());
    assert_eq!(pruned.units().len(), 3);
}

proptest! {
    #[test]
    fn smallest_gain_sets_nest(
        acc0 in prop::option::of(0.0f64..1.0),
        acc in prop::collection::vec(prop_oneof![0.0f64..1.0, Just(0.5)], 3..8),
    ) {
        let p = ProbeProfile::from_accuracies(acc0, &acc);
        let gains: Vec<(f64, usize)> = p
            .units
            .iter()
            .zip(p.gains())
            .filter_map(|(&u, g)| g.map(|g| (g, u)))
            .collect();
        let one = smallest_gain_units(&p, 1).unwrap();
        let two = smallest_gain_units(&p, 2).unwrap();
        prop_assert!(one.is_subset(&two));
        let next = *two.difference(&one).next().unwrap();
        let first = *one.iter().next().unwrap();
        // no remaining candidate is strictly smaller than the second pick
        let g = |u: usize| gains.iter().find(|x| x.1 == u).unwrap().0;
        for &(gv, u) in &gains {
            if u != first && u != next {
                prop_assert!(gv > g(next) || (gv == g(next) && u > next));
            }
        }
    }
}
