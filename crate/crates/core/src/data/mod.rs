//! Synthetic I/Q modulation datasets, their 6:2:2 split and on-disk form.

pub mod gen;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Container, Record, RecordData};
use crate::error::{FcosError, Result};
use crate::model::hex;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modulation {
    Bpsk,
    Qpsk,
    Psk8,
    Qam16,
    Ask4,
    Gfsk,
}

impl Modulation {
    pub const ALL: [Modulation; 6] = [
        Modulation::Bpsk,
        Modulation::Qpsk,
        Modulation::Psk8,
        Modulation::Qam16,
        Modulation::Ask4,
        Modulation::Gfsk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "BPSK",
            Modulation::Qpsk => "QPSK",
            Modulation::Psk8 => "8PSK",
            Modulation::Qam16 => "16QAM",
            Modulation::Ask4 => "4ASK",
            Modulation::Gfsk => "GFSK",
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = FcosError;

    fn from_str(s: &str) -> Result<Self> {
        Modulation::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| FcosError::Config(format!("unknown modulation '{s}'")))
    }
}

impl Serialize for Modulation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Modulation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(FcosError::Malformed(format!("split tag {t} out of range"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

fn default_true() -> bool {
    true
}

/// Generation parameters. `noise` and `impairments` exist for tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub classes: Vec<Modulation>,
    pub snr_db: Vec<f64>,
    pub per_cell: usize,
    pub length: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub noise: bool,
    /// Random carrier phase and symbol timing offset.
    #[serde(default = "default_true")]
    pub impairments: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: vec![
                Modulation::Bpsk,
                Modulation::Qpsk,
                Modulation::Qam16,
                Modulation::Gfsk,
            ],
            snr_db: (0..10).map(|k| 2.0 * k as f64).collect(),
            per_cell: 200,
            length: 128,
            seed: 0,
            noise: true,
            impairments: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(FcosError::Config("dataset.classes is empty".into()));
        }
        if self.snr_db.is_empty() {
            return Err(FcosError::Config("dataset.snr_db is empty".into()));
        }
        if self.per_cell < 5 {
            return Err(FcosError::Config(format!(
                "dataset.per_cell must be at least 5, got {}",
                self.per_cell
            )));
        }
        if self.length < 64 {
            return Err(FcosError::Config(format!(
                "dataset.length must be at least 64, got {}",
                self.length
            )));
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(FcosError::Config("dataset.classes has duplicates".into()));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(FcosError::Config("dataset.snr_db must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalDataset {
    /// `[N, 2, L]`, I row then Q row.
    pub samples: Tensor<f32>,
    pub labels: Vec<usize>,
    pub snr_db: Vec<f64>,
    pub split: Vec<Split>,
    pub seed: u64,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cell_seed(seed: u64, class: usize, snr: usize) -> u64 {
    mix(mix(seed, class as u64 + 1), snr as u64 + 0x1000)
}

/// Per-cell (train, val, test) counts: val = test = floor(n/5), rest train.
pub fn cell_split_counts(n: usize) -> (usize, usize, usize) {
    let v = n / 5;
    (n - 2 * v, v, v)
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<SignalDataset> {
    cfg.validate()?;
    let l = cfg.length;
    let cells: Vec<(usize, usize)> = (0..cfg.classes.len())
        .flat_map(|c| (0..cfg.snr_db.len()).map(move |s| (c, s)))
        .collect();
    let blocks: Vec<Vec<f32>> = cells
        .par_iter()
        .map(|&(c, s)| {
            let base = cell_seed(cfg.seed, c, s);
            let mut out = Vec::with_capacity(cfg.per_cell * 2 * l);
            for k in 0..cfg.per_cell {
                let mut sig_rng = ChaCha8Rng::seed_from_u64(mix(base, 2 * k as u64));
                let (mut i, mut q) = gen::baseband(cfg.classes[c], l, cfg.impairments, &mut sig_rng);
                gen::normalize_power(&mut i, &mut q);
                if cfg.noise {
                    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(base, 2 * k as u64 + 1));
                    gen::add_awgn(&mut i, &mut q, cfg.snr_db[s], &mut noise_rng);
                }
                out.extend(i.iter().map(|&v| v as f32));
                out.extend(q.iter().map(|&v| v as f32));
            }
            out
        })
        .collect();
    let n = cells.len() * cfg.per_cell;
    let mut labels = Vec::with_capacity(n);
    let mut snr = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    let (tr, va, _) = cell_split_counts(cfg.per_cell);
    for &(c, s) in &cells {
        for k in 0..cfg.per_cell {
            labels.push(c);
            snr.push(cfg.snr_db[s]);
            split.push(if k < tr {
                Split::Train
            } else if k < tr + va {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    let samples = Tensor::new(vec![n, 2, l], blocks.concat())?;
    Ok(SignalDataset {
        samples,
        labels,
        snr_db: snr,
        split,
        seed: cfg.seed,
        class_names: cfg.classes.iter().map(|m| m.name().to_string()).collect(),
    })
}

/// Partitions every (class, SNR) cell 6:2:2 in sample order: the first
/// samples go to train, the next to val, the last to test.
pub fn split_dataset(ds: &SignalDataset) -> SplitIndices {
    let mut out = SplitIndices::default();
    for idx in ds.cells().values() {
        let (tr, va, _) = cell_split_counts(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            if k < tr {
                out.train.push(i);
            } else if k < tr + va {
                out.val.push(i);
            } else {
                out.test.push(i);
            }
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    out
}

impl SignalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn length(&self) -> usize {
        self.samples.shape()[2]
    }

    /// Sample indices of every (class, SNR) cell, keyed by (class, SNR bits).
    pub fn cells(&self) -> BTreeMap<(usize, u64), Vec<usize>> {
        let mut m: BTreeMap<(usize, u64), Vec<usize>> = BTreeMap::new();
        for i in 0..self.len() {
            m.entry((self.labels[i], self.snr_db[i].to_bits()))
                .or_default()
                .push(i);
        }
        m
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Input batch `[idx.len(), 2, L]` and its labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.samples.gather_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn to_container(&self) -> Container {
        let n = self.len();
        Container {
            descriptor: serde_json::json!({
                "kind": "dataset",
                "seed": self.seed,
                "class_names": self.class_names,
            }),
            records: vec![
                Record {
                    name: "samples".into(),
                    dims: self.samples.shape().to_vec(),
                    data: RecordData::F32(self.samples.data().to_vec()),
                },
                Record {
                    name: "labels".into(),
                    dims: vec![n],
                    data: RecordData::I64(self.labels.iter().map(|&l| l as i64).collect()),
                },
                Record {
                    name: "snr".into(),
                    dims: vec![n],
                    data: RecordData::F64(self.snr_db.clone()),
                },
                Record {
                    name: "split".into(),
                    dims: vec![n],
                    data: RecordData::U8(self.split.iter().map(|s| s.tag()).collect()),
                },
            ],
        }
    }

    /// SHA-256 of the encoded container, as hex.
    pub fn fingerprint(&self) -> String {
        hex(&Sha256::digest(self.to_container().encode()))
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let d = &c.descriptor;
        if d.get("kind").and_then(|k| k.as_str()) != Some("dataset") {
            return Err(FcosError::Malformed("descriptor kind is not 'dataset'".into()));
        }
        let seed = d.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let class_names: Vec<String> = d
            .get("class_names")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| FcosError::Malformed("descriptor lacks class_names".into()))?;

        let s = c.record("samples")?;
        let RecordData::F32(samples) = &s.data else {
            return Err(FcosError::Malformed("samples must be f32".into()));
        };
        if s.dims.len() != 3 || s.dims[1] != 2 {
            return Err(FcosError::Malformed(format!(
                "samples must be [N, 2, L], got {:?}",
                s.dims
            )));
        }
        let n = s.dims[0];
        let RecordData::I64(labels) = &c.record("labels")?.data else {
            return Err(FcosError::Malformed("labels must be i64".into()));
        };
        let RecordData::F64(snr) = &c.record("snr")?.data else {
            return Err(FcosError::Malformed("snr must be f64".into()));
        };
        for (name, len) in [("labels", labels.len()), ("snr", snr.len())] {
            if len != n {
                return Err(FcosError::Malformed(format!(
                    "{name} has {len} entries for {n} samples"
                )));
            }
        }
        let k = class_names.len() as i64;
        if let Some(bad) = labels.iter().find(|&&l| l < 0 || l >= k) {
            return Err(FcosError::Malformed(format!("label {bad} outside [0, {k})")));
        }
        if samples.iter().any(|v| !v.is_finite()) || snr.iter().any(|v| !v.is_finite()) {
            return Err(FcosError::Malformed("non-finite sample or snr value".into()));
        }
        let split = match c.records.iter().find(|r| r.name == "split") {
            Some(Record {
                data: RecordData::U8(v),
                ..
            }) if v.len() == n => v.iter().map(|&t| Split::from_tag(t)).collect::<Result<Vec<_>>>()?,
            Some(_) => return Err(FcosError::Malformed("split must be u8 with one entry per sample".into())),
            None => vec![Split::Train; n],
        };
        let mut ds = SignalDataset {
            samples: Tensor::new(s.dims.clone(), samples.clone())?,
            labels: labels.iter().map(|&l| l as usize).collect(),
            snr_db: snr.clone(),
            split,
            seed,
            class_names,
        };
        ds.check_balance()?;
        let rule = split_dataset(&ds);
        let has_split = c.records.iter().any(|r| r.name == "split");
        if has_split {
            if ds.indices(Split::Train) != rule.train
                || ds.indices(Split::Val) != rule.val
                || ds.indices(Split::Test) != rule.test
            {
                return Err(FcosError::Malformed(
                    "split markers do not follow the per-cell 6:2:2 rule".into(),
                ));
            }
        } else {
            ds.apply_split(&rule);
        }
        Ok(ds)
    }

    fn apply_split(&mut self, s: &SplitIndices) {
        for (idx, tag) in [(&s.train, Split::Train), (&s.val, Split::Val), (&s.test, Split::Test)] {
            for &i in idx {
                self.split[i] = tag;
            }
        }
    }

    /// Every class present, every cell the same size.
    fn check_balance(&self) -> Result<()> {
        let cells = self.cells();
        let classes: std::collections::BTreeSet<usize> = cells.keys().map(|k| k.0).collect();
        if classes.len() != self.classes() {
            return Err(FcosError::DegenerateData(format!(
                "{} of {} classes have samples",
                classes.len(),
                self.classes()
            )));
        }
        let sizes: std::collections::BTreeSet<usize> = cells.values().map(|v| v.len()).collect();
        if sizes.len() > 1 {
            return Err(FcosError::DegenerateData(format!(
                "unequal (class, snr) cell sizes {sizes:?}"
            )));
        }
        Ok(())
    }
}

/// Loads a dataset container and enforces the dataset invariants.
pub fn ingest_external(path: &Path) -> Result<SignalDataset> {
    SignalDataset::from_container(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            classes: vec![Modulation::Bpsk, Modulation::Qam16],
            snr_db: vec![0.0, 10.0],
            per_cell: 10,
            length: 64,
            ..GenConfig::default()
        }
    }

    #[test]
    fn split_counts_follow_rounding_rule() {
        assert_eq!(cell_split_counts(10), (6, 2, 2));
        assert_eq!(cell_split_counts(11), (7, 2, 2));
        assert_eq!(cell_split_counts(5), (3, 1, 1));
    }

    #[test]
    fn empty_classes_or_grid_is_config_error() {
        let mut c = small();
        c.classes.clear();
        assert!(matches!(generate_dataset(&c), Err(FcosError::Config(_))));
        let mut c = small();
        c.snr_db.clear();
        assert!(matches!(generate_dataset(&c), Err(FcosError::Config(_))));
    }

    #[test]
    fn generated_markers_match_split_rule() {
        let ds = generate_dataset(&small()).unwrap();
        let s = split_dataset(&ds);
        assert_eq!(ds.indices(Split::Train), s.train);
        assert_eq!(ds.indices(Split::Test), s.test);
        assert_eq!(s.train.len(), 24);
    }

    #[test]
    fn modulation_names_round_trip() {
        for m in Modulation::ALL {
            assert_eq!(m.name().parse::<Modulation>().unwrap(), m);
        }
        assert!("OOK".parse::<Modulation>().is_err());
    }
}
