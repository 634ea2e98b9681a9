use std::collections::BTreeSet;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::fuse::{reduce_axis, Reduction, Scheme};
use super::linkage::{average_linkage_cluster, ClusterAssignment, Merge};
use super::similarity::{channel_vectors, distance_matrix, Axis, Metric};
use crate::container::Container;
use crate::error::{FcosError, Result};
use crate::model::{ChannelDim, LayerKind, ModelGraph, NodeId, Side};
use crate::tensor::Scalar;

pub const RUNNING_VAR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionOrder {
    OutputFirst,
    InputFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    /// Consumers merge their input slices with the producer's clusters.
    ProducerTied,
    /// Consumers cluster their own input slices.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Fraction of channels that survive in each dimension.
    pub keep_ratio: f64,
    pub metric: Metric,
    pub scheme: Scheme,
    pub order: FusionOrder,
    pub input_mode: InputMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            keep_ratio: 0.5,
            metric: Metric::Cosine,
            scheme: Scheme::Mean,
            order: FusionOrder::OutputFirst,
            input_mode: InputMode::ProducerTied,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(FcosError::Config(format!(
                "keep ratio must lie in (0, 1], got {}",
                self.keep_ratio
            )));
        }
        Ok(())
    }
}

/// Surviving channel count `max(1, floor(c * ratio))`.
///
/// A relative slack of 1e-9 absorbs binary rounding of products such as
/// `100 * 0.29`.
pub fn surviving_channels(c: usize, ratio: f64) -> usize {
    let x = c as f64 * ratio;
    ((x + x.abs() * 1e-9).floor() as usize).clamp(1, c.max(1))
}

/// One recorded clustering decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub producers: Vec<NodeId>,
    pub side: Side,
    /// Set for independently clustered consumer inputs.
    pub consumer: Option<NodeId>,
    pub metric: Metric,
    pub keep_ratio: f64,
    pub original: usize,
    pub kept: usize,
    pub assignment: Vec<usize>,
    pub merges: Vec<Merge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub config: FusionConfig,
    pub entries: Vec<PlanEntry>,
}

impl PrunePlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut desc = serde_json::to_value(self).expect("plan serializes");
        desc["kind"] = serde_json::Value::String("prune-plan".into());
        Container {
            descriptor: desc,
            records: vec![],
        }
        .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        serde_json::from_value(c.descriptor)
            .map_err(|e| FcosError::Malformed(format!("prune plan: {e}")))
    }
}

/// Per-channel concatenation of every producer's output slice.
pub(crate) fn dim_vectors<T: Scalar>(model: &ModelGraph<T>, producers: &[NodeId]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for &p in producers {
        let vecs = channel_vectors(model.node(p).param("weight"), Axis::Out)
            .expect("conv weights are rank 3");
        if out.is_empty() {
            out = vecs;
        } else {
            for (o, v) in out.iter_mut().zip(vecs) {
                o.extend(v);
            }
        }
    }
    out
}

/// Shrinks the output side of every producer and companion of `dim`.
pub(crate) fn apply_output_reduction<T: Scalar>(
    model: &mut ModelGraph<T>,
    dim: &ChannelDim,
    r: &Reduction,
) {
    let n = r.len();
    for &p in &dim.producers {
        let node = model.node_mut(p);
        let w = reduce_axis(node.param("weight"), 0, r);
        *node.param_mut("weight") = w;
        if let Some(b) = node.params.get("bias") {
            let nb = reduce_axis(b, 0, r);
            node.params.insert("bias".into(), nb);
        }
        if let LayerKind::Conv1d { c_out, .. } = &mut node.kind {
            *c_out = n;
        }
    }
    for &c in &dim.companions {
        let node = model.node_mut(c);
        for p in ["gamma", "beta", "running_mean", "running_var"] {
            let mut t = reduce_axis(node.param(p), 0, r);
            if p == "running_var" {
                let floor = T::from_f64(RUNNING_VAR_FLOOR);
                for v in t.data_mut() {
                    if *v < floor {
                        *v = floor;
                    }
                }
            }
            *node.param_mut(p) = t;
        }
        if let LayerKind::BatchNorm { channels, .. } = &mut node.kind {
            *channels = n;
        }
    }
}

/// Shrinks the input side of one consumer (conv or dense).
pub(crate) fn apply_input_reduction<T: Scalar>(model: &mut ModelGraph<T>, consumer: NodeId, r: &Reduction) {
    let n = r.len();
    let node = model.node_mut(consumer);
    let w = reduce_axis(node.param("weight"), 1, r);
    *node.param_mut("weight") = w;
    match &mut node.kind {
        LayerKind::Conv1d { c_in, .. } => *c_in = n,
        LayerKind::Dense { d_in, .. } => *d_in = n,
        other => panic!("{} cannot consume channels", other.tag()),
    }
}

struct Pruner<'a> {
    cfg: &'a FusionConfig,
    entries: Vec<PlanEntry>,
}

impl Pruner<'_> {
    fn cluster_outputs<T: Scalar>(&mut self, work: &mut ModelGraph<T>, dim: &ChannelDim) -> Reduction {
        let vectors = dim_vectors(work, &dim.producers);
        let n = surviving_channels(dim.size, self.cfg.keep_ratio);
        let assignment = if n == dim.size {
            ClusterAssignment::identity(n)
        } else {
            average_linkage_cluster(&distance_matrix(&vectors, self.cfg.metric), n)
                .expect("1 <= n <= size")
        };
        let r = Reduction::fusion(&assignment, &vectors, self.cfg.scheme);
        apply_output_reduction(work, dim, &r);
        self.entries.push(PlanEntry {
            producers: dim.producers.clone(),
            side: Side::Out,
            consumer: None,
            metric: self.cfg.metric,
            keep_ratio: self.cfg.keep_ratio,
            original: dim.size,
            kept: n,
            assignment: assignment.members,
            merges: assignment.merges,
        });
        r
    }

    fn reduce_input<T: Scalar>(
        &mut self,
        work: &mut ModelGraph<T>,
        consumer: NodeId,
        dim: &ChannelDim,
        producer_reduction: &Reduction,
    ) {
        let is_dense = matches!(work.node(consumer).kind, LayerKind::Dense { .. });
        if self.cfg.input_mode == InputMode::ProducerTied || is_dense {
            apply_input_reduction(work, consumer, &producer_reduction.summed());
            return;
        }
        let n = producer_reduction.len();
        let vectors = channel_vectors(work.node(consumer).param("weight"), Axis::In)
            .expect("conv weights are rank 3");
        let assignment = if n == vectors.len() {
            ClusterAssignment::identity(n)
        } else {
            average_linkage_cluster(&distance_matrix(&vectors, self.cfg.metric), n)
                .expect("1 <= n <= size")
        };
        let r = Reduction::fusion(&assignment, &vectors, self.cfg.scheme);
        apply_input_reduction(work, consumer, &r);
        self.entries.push(PlanEntry {
            producers: dim.producers.clone(),
            side: Side::In,
            consumer: Some(consumer),
            metric: self.cfg.metric,
            keep_ratio: self.cfg.keep_ratio,
            original: dim.size,
            kept: n,
            assignment: assignment.members,
            merges: assignment.merges,
        });
    }
}

/// Similarity-clustered channel fusion over every prunable dimension.
pub fn prune_model_channels<T: Scalar>(
    model: &ModelGraph<T>,
    cfg: &FusionConfig,
) -> Result<(ModelGraph<T>, PrunePlan)> {
    cfg.validate()?;
    model.validate()?;
    let dims = model.channel_dims();
    let mut work = model.clone();
    let mut pruner = Pruner {
        cfg,
        entries: Vec::new(),
    };
    let prunable: Vec<&ChannelDim> = dims.iter().filter(|d| d.prunable).collect();
    if prunable.is_empty() {
        warn!("model has no prunable conv channels; returning it unchanged");
        return Ok((
            work,
            PrunePlan {
                config: *cfg,
                entries: vec![],
            },
        ));
    }
    match cfg.order {
        FusionOrder::OutputFirst => {
            let reductions: Vec<Reduction> = prunable
                .iter()
                .map(|d| pruner.cluster_outputs(&mut work, d))
                .collect();
            for (d, r) in prunable.iter().zip(&reductions) {
                for &c in &d.consumers {
                    pruner.reduce_input(&mut work, c, d, r);
                }
            }
        }
        FusionOrder::InputFirst => {
            let mut done: Vec<(usize, Reduction)> = Vec::new();
            let mut reduced: BTreeSet<NodeId> = BTreeSet::new();
            for (di, d) in dims.iter().enumerate() {
                if !d.prunable {
                    continue;
                }
                for &p in &d.producers {
                    let src = dims
                        .iter()
                        .position(|x| x.consumers.contains(&p))
                        .expect("every conv reads a dimension");
                    if let Some((_, r)) = done.iter().find(|(i, _)| *i == src) {
                        let r = r.clone();
                        pruner.reduce_input(&mut work, p, &dims[src], &r);
                        reduced.insert(p);
                    }
                }
                let r = pruner.cluster_outputs(&mut work, d);
                done.push((di, r));
            }
            for (di, r) in &done {
                for &c in &dims[*di].consumers {
                    if !reduced.contains(&c) {
                        pruner.reduce_input(&mut work, c, &dims[*di], r);
                    }
                }
            }
        }
    }
    work.validate()?;
    Ok((
        work,
        PrunePlan {
            config: *cfg,
            entries: pruner.entries,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surviving_count_rules() {
        assert_eq!(surviving_channels(64, 0.25), 16);
        assert_eq!(surviving_channels(64, 0.001), 1);
        assert_eq!(surviving_channels(100, 0.29), 29);
        assert_eq!(surviving_channels(7, 1.0), 7);
    }

    #[test]
    fn rejects_bad_keep_ratio() {
        for r in [0.0, -0.1, 1.5, f64::NAN] {
            let cfg = FusionConfig {
                keep_ratio: r,
                ..Default::default()
            };
            assert!(cfg.validate().is_err());
        }
    }
}
