use std::collections::BTreeMap;

use fcos::container::RecordData;
use fcos::data::gen::{rrc_taps, ROLL_OFF, SAMPLES_PER_SYMBOL, SPAN};
use fcos::data::{
    cell_split_counts, generate_dataset, ingest_external, split_dataset, GenConfig, Modulation, SignalDataset, Split,
};
use fcos::tensor::Tensor;
use fcos::FcosError;

fn cfg(classes: Vec<Modulation>, snr: Vec<f64>, per_cell: usize, length: usize) -> GenConfig {
    GenConfig {
        classes,
        snr_db: snr,
        per_cell,
        length,
        ..GenConfig::default()
    }
}

fn iq(ds: &SignalDataset, n: usize) -> (&[f32], &[f32]) {
    let l = ds.length();
    let row = &ds.samples.data()[n * 2 * l..(n + 1) * 2 * l];
    row.split_at(l)
}

#[test]
fn bpsk_matched_filter_recovers_real_antipodal_symbols() {
    let mut c = cfg(vec![Modulation::Bpsk], vec![0.0], 5, 256);
    c.noise = false;
    c.impairments = false;
    let ds = generate_dataset(&c).unwrap();
    let h = rrc_taps(ROLL_OFF, SAMPLES_PER_SYMBOL, SPAN);
    let half = h.len() / 2;
    // peak distortion of the truncated raised-cosine (tx * rx) response
    let g: Vec<f64> = (0..2 * h.len() - 1)
        .map(|n| (0..h.len()).filter(|&j| n >= j && n - j < h.len()).map(|j| h[j] * h[n - j]).sum())
        .collect();
    let peak = h.len() - 1;
    let d = (1..=peak / SAMPLES_PER_SYMBOL)
        .map(|k| g[peak - k * SAMPLES_PER_SYMBOL].abs() + g[peak + k * SAMPLES_PER_SYMBOL].abs())
        .sum::<f64>()
        / g[peak];
    assert!(d < 0.2, "{d}");
    for n in 0..ds.len() {
        let (i, q) = iq(&ds, n);
        assert!(q.iter().all(|&v| v == 0.0));
        let centers: Vec<f64> = (half..ds.length() - half)
            .step_by(SAMPLES_PER_SYMBOL)
            .map(|t| (0..h.len()).map(|j| h[j] * i[t + j - half] as f64).sum())
            .collect();
        assert!(centers.len() > 20);
        let (lo, hi) = centers
            .iter()
            .fold((f64::MAX, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
        assert!(hi / lo <= (1.0 + d) / (1.0 - d) + 1e-9, "sample {n}: {lo}..{hi}, distortion {d}");
        assert!(centers.iter().any(|&v| v > 0.0) && centers.iter().any(|&v| v < 0.0));
    }
}

#[test]
fn empirical_snr_matches_tag() {
    let snr = vec![0.0, 6.0, 12.0, 18.0];
    let noisy_cfg = cfg(vec![Modulation::Qpsk, Modulation::Gfsk], snr.clone(), 500, 128);
    let clean_cfg = GenConfig {
        noise: false,
        ..noisy_cfg.clone()
    };
    let noisy = generate_dataset(&noisy_cfg).unwrap();
    let clean = generate_dataset(&clean_cfg).unwrap();
    let mut acc: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for (k, (a, b)) in noisy.samples.data().iter().zip(clean.samples.data()).enumerate() {
        let n = k / (2 * noisy.length());
        let e = acc.entry(noisy.snr_db[n].to_bits()).or_default();
        e.0 += (*b as f64).powi(2);
        e.1 += (*a as f64 - *b as f64).powi(2);
    }
    for (bits, (sig, noise)) in acc {
        let tag = f64::from_bits(bits);
        let got = 10.0 * (sig / noise).log10();
        assert!((got - tag).abs() <= 0.5, "tag {tag} dB, measured {got:.3} dB");
    }
}

#[test]
fn clean_signals_have_unit_power() {
    let mut c = cfg(Modulation::ALL.to_vec(), vec![0.0], 5, 128);
    c.noise = false;
    let ds = generate_dataset(&c).unwrap();
    for n in 0..ds.len() {
        let (i, q) = iq(&ds, n);
        let p = i.iter().chain(q).map(|&v| (v as f64).powi(2)).sum::<f64>() / ds.length() as f64;
        assert!((p - 1.0).abs() <= 1e-5, "sample {n}: power {p}");
    }
}

#[test]
fn generation_is_seeded() {
    let c = cfg(vec![Modulation::Bpsk, Modulation::Qam16], vec![0.0, 10.0], 10, 64);
    let a = generate_dataset(&c).unwrap();
    let b = generate_dataset(&c).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.fingerprint(), b.fingerprint());
    let other = generate_dataset(&GenConfig { seed: 1, ..c }).unwrap();
    assert_ne!(a.samples, other.samples);
    assert_ne!(a.fingerprint(), other.fingerprint());
}

#[test]
fn classes_and_cells_are_balanced() {
    let ds = generate_dataset(&GenConfig {
        per_cell: 7,
        ..GenConfig::default()
    })
    .unwrap();
    let mut per_class = vec![0usize; ds.classes()];
    ds.labels.iter().for_each(|&l| per_class[l] += 1);
    let (lo, hi) = (per_class.iter().min().unwrap(), per_class.iter().max().unwrap());
    assert_eq!(lo, hi);
    assert_eq!(ds.cells().len(), 4 * 10);
    assert!(ds.cells().values().all(|v| v.len() == 7));
}

#[test]
fn splits_are_disjoint_cover_and_follow_cell_counts() {
    for per_cell in [10, 11, 13] {
        let ds = generate_dataset(&cfg(vec![Modulation::Bpsk, Modulation::Qpsk], vec![0.0, 4.0, 8.0], per_cell, 64))
            .unwrap();
        let s = split_dataset(&ds);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        let (tr, va, te) = cell_split_counts(per_cell);
        for idx in ds.cells().values() {
            let count = |v: &Vec<usize>| idx.iter().filter(|i| v.binary_search(i).is_ok()).count();
            assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (tr, va, te));
        }
    }
    assert_eq!(cell_split_counts(10), (6, 2, 2));
    assert_eq!(cell_split_counts(11), (7, 2, 2));
}

#[test]
fn export_ingest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&cfg(vec![Modulation::Ask4, Modulation::Psk8], vec![2.0], 10, 64)).unwrap();
    let path = dir.path().join("ds.fcos");
    ds.export(&path).unwrap();
    let back = ingest_external(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.fingerprint(), ds.fingerprint());
}

#[test]
fn label_count_mismatch_is_malformed() {
    let ds = generate_dataset(&cfg(vec![Modulation::Bpsk, Modulation::Qpsk], vec![0.0], 10, 64)).unwrap();
    let mut c = ds.to_container();
    let labels = c.records.iter_mut().find(|r| r.name == "labels").unwrap();
    if let RecordData::I64(v) = &mut labels.data {
        v.pop();
    }
    labels.dims = vec![ds.len() - 1];
    assert!(matches!(SignalDataset::from_container(&c), Err(FcosError::Malformed(_))));
}

#[test]
fn missing_class_is_degenerate() {
    let ds = generate_dataset(&cfg(vec![Modulation::Bpsk, Modulation::Qpsk], vec![0.0], 10, 64)).unwrap();
    let keep: Vec<usize> = (0..ds.len()).filter(|&n| ds.labels[n] == 0).collect();
    let sub = subsample(&ds, &keep);
    assert!(matches!(
        SignalDataset::from_container(&sub.to_container()),
        Err(FcosError::DegenerateData(_))
    ));
}

fn subsample(ds: &SignalDataset, keep: &[usize]) -> SignalDataset {
    let (x, labels) = ds.batch(keep);
    SignalDataset {
        samples: Tensor::new(x.shape().to_vec(), x.data().to_vec()).unwrap(),
        labels,
        snr_db: keep.iter().map(|&n| ds.snr_db[n]).collect(),
        split: vec![Split::Train; keep.len()],
        seed: ds.seed,
        class_names: ds.class_names.clone(),
    }
}

#[test]
fn converted_subsample_keeps_per_class_counts() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&cfg(
        vec![Modulation::Bpsk, Modulation::Qam16, Modulation::Gfsk],
        vec![0.0, 8.0],
        20,
        64,
    ))
    .unwrap();
    // first 7 of every cell, written without split markers
    let keep: Vec<usize> = ds.cells().values().flat_map(|v| v[..7].to_vec()).collect();
    let sub = subsample(&ds, &keep);
    let mut c = sub.to_container();
    c.records.retain(|r| r.name != "split");
    let path = dir.path().join("sub.fcos");
    c.write(&path).unwrap();
    let back = ingest_external(&path).unwrap();
    let count = |d: &SignalDataset| {
        let mut m = BTreeMap::new();
        d.labels.iter().for_each(|&l| *m.entry(l).or_insert(0) += 1);
        m
    };
    assert_eq!(count(&back), count(&sub));
    assert_eq!(count(&back).values().copied().collect::<Vec<_>>(), vec![14, 14, 14]);
    assert_eq!(back.indices(Split::Test).len(), 3 * 2 * cell_split_counts(7).2);
}
