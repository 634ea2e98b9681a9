//! Layer Collapse Diagnosis: linear probes on unit outputs, flagging of
//! units that add no probe accuracy, and their removal.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SignalDataset, Split};
use crate::error::{FcosError, Result};
use crate::metrics::{count_params_flops, evaluate, CurvePoint, PruneReport};
use crate::model::{ModelGraph, NodeId};
use crate::tensor::kernels::argmax;
use crate::train::{fit, TrainConfig};

const EXTRACT_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureReduction {
    /// Mean over the temporal axis; one feature per channel.
    GlobalAvgPool,
    Flatten,
}

/// Row-major `[rows, dim]` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Features of several probe points for the samples `idx`, from one shared
/// forward pass per batch.
pub fn extract_many(
    model: &ModelGraph<f32>,
    points: &[NodeId],
    ds: &SignalDataset,
    idx: &[usize],
    reduction: FeatureReduction,
) -> Result<Vec<FeatureMatrix>> {
    let mut out: Vec<FeatureMatrix> = points
        .iter()
        .map(|_| FeatureMatrix {
            rows: 0,
            dim: 0,
            data: Vec::new(),
        })
        .collect();
    for chunk in idx.chunks(EXTRACT_BATCH) {
        let (x, _) = ds.batch(chunk);
        let (_, acts) = model.forward_capture(&x, points)?;
        for (m, a) in out.iter_mut().zip(acts) {
            let (dim, rows): (usize, Vec<f64>) = match reduction {
                FeatureReduction::GlobalAvgPool => (
                    a.channels,
                    a.data
                        .chunks(a.length)
                        .map(|r| r.iter().map(|&v| v as f64).sum::<f64>() / a.length as f64)
                        .collect(),
                ),
                FeatureReduction::Flatten => {
                    (a.channels * a.length, a.data.iter().map(|&v| v as f64).collect())
                }
            };
            m.dim = dim;
            m.rows += a.batch;
            m.data.extend(rows);
        }
    }
    Ok(out)
}

/// Reduced activations at `point` for every sample of `split`.
pub fn extract_features(
    model: &ModelGraph<f32>,
    point: NodeId,
    ds: &SignalDataset,
    split: Split,
    reduction: FeatureReduction,
) -> Result<FeatureMatrix> {
    let idx = ds.indices(split);
    Ok(extract_many(model, &[point], ds, &idx, reduction)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub reduction: FeatureReduction,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.001,
            batch: 128,
            epochs: 5,
            reduction: FeatureReduction::GlobalAvgPool,
        }
    }
}

/// Linear softmax classifier over standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub dim: usize,
    pub classes: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[classes, dim]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    fn logits_into(&self, x: &[f64], z: &mut [f64], buf: &mut [f64]) {
        for (j, b) in buf.iter_mut().enumerate() {
            *b = (x[j] - self.mean[j]) * self.scale[j];
        }
        for (k, zk) in z.iter_mut().enumerate() {
            let w = &self.weight[k * self.dim..(k + 1) * self.dim];
            *zk = self.bias[k] + w.iter().zip(buf.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn predict(&self, f: &FeatureMatrix) -> Vec<usize> {
        let mut z = vec![0.0; self.classes];
        let mut buf = vec![0.0; self.dim];
        (0..f.rows)
            .map(|i| {
                self.logits_into(f.row(i), &mut z, &mut buf);
                argmax(&z)
            })
            .collect()
    }

    pub fn accuracy(&self, f: &FeatureMatrix, labels: &[usize]) -> f64 {
        let hits = self.predict(f).iter().zip(labels).filter(|(p, t)| p == t).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Trains a zero-initialized linear softmax probe with Adam on
/// (`train`, `train_labels`) and reports its accuracy on (`test`, `test_labels`).
pub fn train_probe(
    train: &FeatureMatrix,
    train_labels: &[usize],
    test: &FeatureMatrix,
    test_labels: &[usize],
    classes: usize,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, f64)> {
    if train.rows != train_labels.len() || test.rows != test_labels.len() || train.dim != test.dim {
        return Err(FcosError::Usage("probe features and labels are misaligned".into()));
    }
    let distinct: BTreeSet<usize> = train_labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(FcosError::DegenerateData(format!(
            "probe needs at least two classes, found {}",
            distinct.len()
        )));
    }
    if let Some(&bad) = train_labels.iter().chain(test_labels).find(|&&l| l >= classes) {
        return Err(FcosError::Usage(format!("label {bad} outside [0, {classes})")));
    }
    let (n, d) = (train.rows, train.dim);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(train.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, &v), &m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|&s| {
            let sd = (s / n as f64).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    let mut probe = LinearProbe {
        dim: d,
        classes,
        mean,
        scale,
        weight: vec![0.0; classes * d],
        bias: vec![0.0; classes],
    };

    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let np = classes * d + classes;
    let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
    let mut step = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut z = vec![0.0; classes];
    let mut x = vec![0.0; d];
    let mut g = vec![0.0; np];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            g.iter_mut().for_each(|v| *v = 0.0);
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                probe.logits_into(train.row(i), &mut z, &mut x);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = z.iter().map(|v| (v - max).exp()).sum();
                for k in 0..classes {
                    let p = (z[k] - max).exp() / s;
                    let dz = (p - (k == train_labels[i]) as u8 as f64) * inv;
                    for (gw, &xv) in g[k * d..(k + 1) * d].iter_mut().zip(&x) {
                        *gw += dz * xv;
                    }
                    g[classes * d + k] += dz;
                }
            }
            step += 1;
            let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
            for j in 0..np {
                m1[j] = b1 * m1[j] + (1.0 - b1) * g[j];
                m2[j] = b2 * m2[j] + (1.0 - b2) * g[j] * g[j];
                let delta = cfg.lr * (m1[j] / c1) / ((m2[j] / c2).sqrt() + eps);
                if j < classes * d {
                    probe.weight[j] -= delta;
                } else {
                    probe.bias[j - classes * d] -= delta;
                }
            }
        }
    }
    let acc = probe.accuracy(test, test_labels);
    Ok((probe, acc))
}

/// Probe accuracies along the removable units of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeProfile {
    /// Accuracy of the probe on the pooled raw input, when measured.
    pub acc0: Option<f64>,
    /// Unit ids, ascending; the probe point is each unit's output.
    pub units: Vec<usize>,
    pub acc: Vec<f64>,
    pub seeds: Vec<u64>,
    pub reduction: FeatureReduction,
}

impl ProbeProfile {
    /// Synthetic profile over units `1..=acc.len()`.
    pub fn from_accuracies(acc0: Option<f64>, acc: &[f64]) -> Self {
        ProbeProfile {
            acc0,
            units: (1..=acc.len()).collect(),
            acc: acc.to_vec(),
            seeds: vec![0; acc.len()],
            reduction: FeatureReduction::GlobalAvgPool,
        }
    }

    /// `Acc_i - Acc_{i-1}` per unit; `None` for the first unit without `acc0`.
    pub fn gains(&self) -> Vec<Option<f64>> {
        (0..self.acc.len())
            .map(|i| match i {
                0 => self.acc0.map(|a0| self.acc[0] - a0),
                _ => Some(self.acc[i] - self.acc[i - 1]),
            })
            .collect()
    }

    pub fn write_csv(&self, diagnosis: Option<&CollapseDiagnosis>, path: &Path) -> Result<()> {
        let mut s = String::from("point,unit,accuracy,delta,flagged\n");
        if let Some(a0) = self.acc0 {
            s.push_str(&format!("0,,{a0},,false\n"));
        }
        for (i, (&u, g)) in self.units.iter().zip(self.gains()).enumerate() {
            let flagged = diagnosis.is_some_and(|d| d.flagged.contains(&u));
            let delta = g.map(|v| v.abs().to_string()).unwrap_or_default();
            s.push_str(&format!("{},{u},{},{delta},{flagged}\n", i + 1, self.acc[i]));
        }
        fs::write(path, s).map_err(|e| FcosError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseDiagnosis {
    pub beta: f64,
    /// Unit ids with `|Acc_i - Acc_{i-1}| <= beta`.
    pub flagged: BTreeSet<usize>,
    /// `|Acc_i - Acc_{i-1}|` per unit, where defined.
    pub deltas: BTreeMap<usize, f64>,
}

/// Flags every unit whose probe accuracy moved by at most `beta` from its
/// predecessor's measured accuracy.
pub fn diagnose_collapse(profile: &ProbeProfile, beta: f64) -> Result<CollapseDiagnosis> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(FcosError::Config(format!("beta must be positive, got {beta}")));
    }
    let defined = profile.acc.len() + profile.acc0.is_some() as usize;
    if defined < 2 {
        return Err(FcosError::Usage("diagnosis needs at least two probe points".into()));
    }
    let mut flagged = BTreeSet::new();
    let mut deltas = BTreeMap::new();
    for (&u, g) in profile.units.iter().zip(profile.gains()) {
        if let Some(g) = g {
            let d = g.abs();
            deltas.insert(u, d);
            if d <= beta {
                flagged.insert(u);
            }
        }
    }
    Ok(CollapseDiagnosis {
        beta,
        flagged,
        deltas,
    })
}

fn probe_seed(seed: u64, unit: usize) -> u64 {
    seed ^ (unit as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F)
}

/// Probes the pooled raw input and every unit output of a model; the model
/// is never modified.
pub fn probe_profile(
    model: &ModelGraph<f32>,
    ds: &SignalDataset,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeProfile> {
    let input = model.nodes()[0].id;
    let mut points = vec![input];
    let units: Vec<usize> = model.units().iter().map(|u| u.id).collect();
    points.extend(model.units().iter().map(|u| u.output));
    let train_idx = ds.indices(Split::Train);
    let test_idx = ds.indices(Split::Test);
    let train = extract_many(model, &points, ds, &train_idx, cfg.reduction)?;
    let test = extract_many(model, &points, ds, &test_idx, cfg.reduction)?;
    let ytr: Vec<usize> = train_idx.iter().map(|&i| ds.labels[i]).collect();
    let yte: Vec<usize> = test_idx.iter().map(|&i| ds.labels[i]).collect();
    let ids: Vec<usize> = std::iter::once(0).chain(units.iter().copied()).collect();
    let accs: Vec<(u64, f64)> = ids
        .par_iter()
        .enumerate()
        .map(|(p, &u)| {
            let s = probe_seed(seed, u);
            let (_, acc) = train_probe(&train[p], &ytr, &test[p], &yte, ds.classes(), s, cfg)?;
            Ok((s, acc))
        })
        .collect::<Result<_>>()?;
    Ok(ProbeProfile {
        acc0: Some(accs[0].1),
        units,
        acc: accs[1..].iter().map(|a| a.1).collect(),
        seeds: accs[1..].iter().map(|a| a.0).collect(),
        reduction: cfg.reduction,
    })
}

/// Drops units from `remove` until no stage would be left without units,
/// keeping the highest-gain unit of any stage that was fully selected.
pub fn guard_stages(model: &ModelGraph<f32>, profile: &ProbeProfile, remove: &BTreeSet<usize>) -> BTreeSet<usize> {
    let gains: BTreeMap<usize, f64> = profile
        .units
        .iter()
        .zip(profile.gains())
        .map(|(&u, g)| (u, g.unwrap_or(f64::INFINITY)))
        .collect();
    let mut out = remove.clone();
    for (stage, units) in model.stages() {
        if !units.is_empty() && units.iter().all(|u| remove.contains(u)) {
            // highest gain, lower id on ties
            let keep = units
                .iter()
                .copied()
                .fold(None::<usize>, |best, u| match best {
                    Some(b) if gains.get(&b) >= gains.get(&u) => Some(b),
                    _ => Some(u),
                })
                .expect("stage is nonempty");
            warn!("all units of stage {stage} were flagged; keeping unit {keep}");
            out.remove(&keep);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LacdConfig {
    pub beta: f64,
    pub warm_epochs: usize,
    pub final_epochs: usize,
    pub probe: ProbeConfig,
}

impl Default for LacdConfig {
    fn default() -> Self {
        LacdConfig {
            beta: 0.005,
            warm_epochs: 20,
            final_epochs: 80,
            probe: ProbeConfig::default(),
        }
    }
}

/// Result of the warm fine-tune, probing, diagnosis and removal steps.
#[derive(Debug, Clone)]
pub struct LacdStage {
    pub model: ModelGraph<f32>,
    pub profile: ProbeProfile,
    pub diagnosis: CollapseDiagnosis,
    pub removed: BTreeSet<usize>,
    pub curve: Vec<CurvePoint>,
}

/// Warm fine-tune, freeze, probe every unit, diagnose and remove the
/// flagged units. The final fine-tune is left to the caller.
pub fn lacd_stage(
    model: &ModelGraph<f32>,
    ds: &SignalDataset,
    cfg: &LacdConfig,
    train: &TrainConfig,
) -> Result<LacdStage> {
    if !(cfg.beta > 0.0 && cfg.beta.is_finite()) {
        return Err(FcosError::Config(format!("fcos.beta must be positive, got {}", cfg.beta)));
    }
    let mut warm = model.clone();
    let outcome = fit(
        &mut warm,
        ds,
        &TrainConfig {
            epochs: cfg.warm_epochs,
            ..*train
        },
        "lacd-warm",
    )?;
    warm.set_frozen(true);
    let before = warm.checksum();
    let profile = probe_profile(&warm, ds, &cfg.probe, train.seed)?;
    if warm.checksum() != before {
        return Err(FcosError::Usage("probing modified the model".into()));
    }
    warm.set_frozen(false);
    let diagnosis = diagnose_collapse(&profile, cfg.beta)?;
    let removed = guard_stages(&warm, &profile, &diagnosis.flagged);
    info!(
        "probe accuracies {:?} (acc0 {:?}); removing units {removed:?}",
        profile.acc, profile.acc0
    );
    let pruned = if removed.is_empty() {
        warm
    } else {
        warm.remove_layers(&removed)?
    };
    Ok(LacdStage {
        model: pruned,
        profile,
        diagnosis,
        removed,
        curve: outcome.curve,
    })
}

#[derive(Debug, Clone)]
pub struct LacdOutcome {
    pub model: ModelGraph<f32>,
    pub profile: ProbeProfile,
    pub diagnosis: CollapseDiagnosis,
    pub removed: BTreeSet<usize>,
    pub report: PruneReport,
    pub curve: Vec<CurvePoint>,
}

/// The full second stage: [`lacd_stage`] followed by the final fine-tune.
pub fn run_lacd(
    model: &ModelGraph<f32>,
    ds: &SignalDataset,
    cfg: &LacdConfig,
    train: &TrainConfig,
) -> Result<LacdOutcome> {
    let len = ds.length();
    let (p0, f0) = count_params_flops(model, len)?;
    let before = evaluate(model, ds, Split::Test)?;
    let stage = lacd_stage(model, ds, cfg, train)?;
    let mut out = stage.model;
    let fin = fit(
        &mut out,
        ds,
        &TrainConfig {
            epochs: cfg.final_epochs,
            ..*train
        },
        "final",
    )?;
    let after = evaluate(&out, ds, Split::Test)?;
    let (p1, f1) = count_params_flops(&out, len)?;
    let mut curve = stage.curve;
    curve.extend(fin.curve);
    Ok(LacdOutcome {
        model: out,
        profile: stage.profile,
        diagnosis: stage.diagnosis,
        removed: stage.removed,
        report: PruneReport {
            method: "LaCD".into(),
            pruning_type: "Layer".into(),
            stage: "lacd".into(),
            original_params: p0,
            pruned_params: p1,
            original_flops: f0,
            pruned_flops: f1,
            original_acc: before.accuracy,
            acc: after.accuracy,
            per_snr: after.per_snr,
        },
        curve,
    })
}
