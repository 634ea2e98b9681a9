//! Model checkpoints on top of the shared container format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchSpec, CoupledGroup, LayerKind, LayerNode, ModelGraph, NodeId, Unit};
use crate::container::{Container, Record, RecordData};
use crate::error::{FcosError, Result};
use crate::tensor::{DType, Tensor};

/// Provenance stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub stage: String,
    pub epochs_run: usize,
    pub seed: u64,
    pub dataset_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct NodeDesc {
    id: NodeId,
    kind: LayerKind,
    inputs: Vec<NodeId>,
    frozen: bool,
    params: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelDesc {
    kind: String,
    dtype: DType,
    arch: ArchSpec,
    nodes: Vec<NodeDesc>,
    groups: Vec<CoupledGroup>,
    units: Vec<Unit>,
    next_id: NodeId,
    meta: TrainingMeta,
}

pub fn to_container(model: &ModelGraph<f32>, meta: &TrainingMeta) -> Container {
    let mut records = Vec::new();
    let nodes = model
        .nodes
        .iter()
        .map(|n| {
            for (k, t) in &n.params {
                records.push(Record {
                    name: format!("{}.{k}", n.id),
                    dims: t.shape().to_vec(),
                    data: RecordData::F32(t.data().to_vec()),
                });
            }
            NodeDesc {
                id: n.id,
                kind: n.kind.clone(),
                inputs: n.inputs.clone(),
                frozen: n.frozen,
                params: n.params.keys().cloned().collect(),
            }
        })
        .collect();
    let desc = ModelDesc {
        kind: "model".into(),
        dtype: DType::F32,
        arch: model.arch.clone(),
        nodes,
        groups: model.groups.clone(),
        units: model.units.clone(),
        next_id: model.next_id,
        meta: meta.clone(),
    };
    Container {
        descriptor: serde_json::to_value(desc).expect("descriptor serializes"),
        records,
    }
}

pub fn from_container(c: &Container) -> Result<(ModelGraph<f32>, TrainingMeta)> {
    let desc: ModelDesc = serde_json::from_value(c.descriptor.clone())
        .map_err(|e| FcosError::Malformed(format!("model descriptor: {e}")))?;
    if desc.kind != "model" {
        return Err(FcosError::Malformed(format!(
            "container holds a '{}', not a model",
            desc.kind
        )));
    }
    let mut nodes = Vec::with_capacity(desc.nodes.len());
    for nd in desc.nodes {
        let mut params = BTreeMap::new();
        for p in nd.params {
            let rec = c.record(&format!("{}.{p}", nd.id))?;
            let RecordData::F32(data) = &rec.data else {
                return Err(FcosError::Malformed(format!("{}.{p} is not f32", nd.id)));
            };
            params.insert(p, Tensor::new(rec.dims.clone(), data.clone())?);
        }
        nodes.push(LayerNode {
            id: nd.id,
            kind: nd.kind,
            inputs: nd.inputs,
            params,
            frozen: nd.frozen,
        });
    }
    let model = ModelGraph {
        arch: desc.arch,
        nodes,
        groups: desc.groups,
        units: desc.units,
        next_id: desc.next_id,
    };
    model.validate()?;
    Ok((model, desc.meta))
}

pub fn save_checkpoint(model: &ModelGraph<f32>, meta: &TrainingMeta, path: &Path) -> Result<()> {
    to_container(model, meta).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph<f32>, TrainingMeta)> {
    from_container(&Container::read(path)?)
}
