//! Comparison pruners: L1-norm channel pruning, random layer removal and
//! probe-gain layer removal.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SignalDataset;
use crate::error::{FcosError, Result};
use crate::fusion::{apply_input_reduction, apply_output_reduction, dim_vectors, surviving_channels, Reduction};
use crate::lacd::{probe_profile, ProbeConfig, ProbeProfile};
use crate::model::ModelGraph;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    L1Channel,
    RandomLayer,
    ProbeLayer,
}

impl BaselineMethod {
    pub fn label(self) -> &'static str {
        match self {
            BaselineMethod::L1Channel => "L1-norm",
            BaselineMethod::RandomLayer => "Random",
            BaselineMethod::ProbeLayer => "LCP",
        }
    }

    pub fn pruning_type(self) -> &'static str {
        match self {
            BaselineMethod::L1Channel => "Channel",
            _ => "Layer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Budget of `l1-channel`.
    #[serde(default)]
    pub keep_ratio: Option<f64>,
    /// Budget of the layer methods: number of units to remove.
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.method, self.keep_ratio, self.count) {
            (BaselineMethod::L1Channel, Some(r), None) if r > 0.0 && r <= 1.0 => Ok(()),
            (BaselineMethod::L1Channel, Some(r), None) => Err(FcosError::Config(format!(
                "baseline.keep_ratio must lie in (0, 1], got {r}"
            ))),
            (BaselineMethod::L1Channel, _, _) => Err(FcosError::Config(
                "baseline l1-channel takes keep_ratio and no count".into(),
            )),
            (_, None, Some(c)) if c > 0 => Ok(()),
            (_, None, Some(_)) => Err(FcosError::Config("baseline.count must be positive".into())),
            (m, _, _) => Err(FcosError::Config(format!(
                "baseline {} takes count and no keep_ratio",
                m.label()
            ))),
        }
    }
}

/// Keeps the `max(1, floor(c * keep_ratio))` output channels of each
/// prunable dimension with the largest L1 norm (summed over producers
/// sharing the dimension); consumers keep the matching input slices.
pub fn l1_channel_prune<T: Scalar>(model: &ModelGraph<T>, keep_ratio: f64) -> Result<ModelGraph<T>> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(FcosError::Config(format!(
            "keep ratio must lie in (0, 1], got {keep_ratio}"
        )));
    }
    model.validate()?;
    let mut work = model.clone();
    for dim in model.channel_dims().iter().filter(|d| d.prunable) {
        let norms: Vec<f64> = dim_vectors(model, &dim.producers)
            .iter()
            .map(|v| v.iter().map(|x| x.abs()).sum())
            .collect();
        let keep = top_k(&norms, surviving_channels(dim.size, keep_ratio));
        let r = Reduction::selection(&keep);
        apply_output_reduction(&mut work, dim, &r);
        for &c in &dim.consumers {
            apply_input_reduction(&mut work, c, &r);
        }
    }
    work.validate()?;
    Ok(work)
}

/// Indices of the `k` largest scores in ascending index order; equal
/// scores prefer the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k.min(scores.len())].to_vec();
    keep.sort_unstable();
    keep
}

/// Unit ids chosen uniformly at random, deterministically per seed.
pub fn random_units<T: Scalar>(model: &ModelGraph<T>, count: usize, seed: u64) -> Result<BTreeSet<usize>> {
    let units: Vec<usize> = model.units().iter().map(|u| u.id).collect();
    if count > units.len() {
        return Err(FcosError::Config(format!(
            "cannot remove {count} of {} removable units",
            units.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, units.len(), count)
        .into_iter()
        .map(|i| units[i])
        .collect())
}

pub fn random_layer_prune<T: Scalar>(model: &ModelGraph<T>, count: usize, seed: u64) -> Result<ModelGraph<T>> {
    let ids = random_units(model, count, seed)?;
    if ids.is_empty() {
        return Ok(model.clone());
    }
    model.remove_layers(&ids)
}

/// The `count` units with the smallest probe gain `Acc_i - Acc_{i-1}`;
/// ties go to the lower unit id. Units without a measured predecessor are
/// not candidates.
pub fn smallest_gain_units(profile: &ProbeProfile, count: usize) -> Result<BTreeSet<usize>> {
    let mut cand: Vec<(f64, usize)> = profile
        .units
        .iter()
        .zip(profile.gains())
        .filter_map(|(&u, g)| g.map(|g| (g, u)))
        .collect();
    if count > cand.len() {
        return Err(FcosError::Config(format!(
            "cannot remove {count} units; only {} have a probe gain",
            cand.len()
        )));
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(cand[..count].iter().map(|&(_, u)| u).collect())
}

/// Rejects a removal set that would leave some stage without units.
pub fn check_stages<T: Scalar>(model: &ModelGraph<T>, ids: &BTreeSet<usize>) -> Result<()> {
    for (stage, units) in model.stages() {
        if units.iter().all(|u| ids.contains(u)) {
            return Err(FcosError::Config(format!(
                "removing units {ids:?} would empty stage {stage}"
            )));
        }
    }
    Ok(())
}

/// Probes every unit and removes the `count` with the smallest gain.
pub fn probe_layer_prune(
    model: &ModelGraph<f32>,
    ds: &SignalDataset,
    count: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<(ModelGraph<f32>, ProbeProfile, BTreeSet<usize>)> {
    let profile = probe_profile(model, ds, probe, seed)?;
    let ids = smallest_gain_units(&profile, count)?;
    check_stages(model, &ids)?;
    let pruned = model.remove_layers(&ids)?;
    Ok((pruned, profile, ids))
}
