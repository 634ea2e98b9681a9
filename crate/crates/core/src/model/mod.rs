//! Editable layer DAG for the two reference architectures.

mod arch;
pub mod checkpoint;
mod dims;
mod edit;
mod exec;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FcosError, Result};
use crate::tensor::optim::ParamMut;
use crate::tensor::{Scalar, Tensor};

pub use arch::{build_model, ArchName, ArchSpec};
pub use dims::ChannelDim;
pub use exec::{Activation, TrainSession};

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv1d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    MaxPool {
        window: usize,
    },
    GlobalAvgPool,
    Dense {
        d_in: usize,
        d_out: usize,
        bias: bool,
    },
    Add,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv1d { .. } => "conv",
            LayerKind::BatchNorm { .. } => "bn",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::GlobalAvgPool => "gap",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Add => "add",
        }
    }
}

/// Parameters that are state rather than trainable weights.
pub fn is_buffer(param: &str) -> bool {
    param == "running_mean" || param == "running_var"
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode<T: Scalar = f32> {
    pub id: NodeId,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    pub params: BTreeMap<String, Tensor<T>>,
    pub frozen: bool,
}

impl<T: Scalar> LayerNode<T> {
    pub fn name(&self) -> String {
        format!("{}{}", self.kind.tag(), self.id)
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("{} has no parameter {name}", self.name()))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let label = self.name();
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("{label} has no parameter {name}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    In,
    Out,
}

/// Layer sides that must share one channel count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoupledGroup {
    pub members: Vec<(NodeId, Side)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitKind {
    ConvLayer,
    ResidualBlock,
}

/// A removable unit; its output is also a probe point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    pub id: usize,
    pub kind: UnitKind,
    pub stage: usize,
    pub nodes: Vec<NodeId>,
    pub output: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T: Scalar = f32> {
    pub(crate) arch: ArchSpec,
    pub(crate) nodes: Vec<LayerNode<T>>,
    pub(crate) groups: Vec<CoupledGroup>,
    pub(crate) units: Vec<Unit>,
    pub(crate) next_id: NodeId,
}

/// Shape information computed by the validator for each node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeShape {
    pub channels: usize,
    pub length: usize,
    pub flat: bool,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn nodes(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    pub fn groups(&self) -> &[CoupledGroup] {
        &self.groups
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn input_shape(&self) -> [usize; 2] {
        [self.arch.input_channels, self.arch.input_length]
    }

    pub fn unit(&self, id: usize) -> Option<&Unit> {
        self.units.iter().find(|u| u.id == id)
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn node(&self, id: NodeId) -> &LayerNode<T> {
        &self.nodes[self.index_of(id).unwrap_or_else(|| panic!("no node {id}"))]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut LayerNode<T> {
        let idx = self.index_of(id).unwrap_or_else(|| panic!("no node {id}"));
        &mut self.nodes[idx]
    }

    /// Nodes that list `id` among their inputs.
    pub fn successors(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.inputs.contains(&id))
            .map(|n| n.id)
            .collect()
    }

    pub fn output_node(&self) -> NodeId {
        self.nodes.last().expect("graph has nodes").id
    }

    pub fn conv_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Conv1d { .. }))
            .map(|n| n.id)
            .collect()
    }

    /// Stage ids that contain at least one removable unit, with their unit ids.
    pub fn stages(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for u in &self.units {
            m.entry(u.stage).or_default().push(u.id);
        }
        m
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.params.iter())
            .filter(|(k, _)| !is_buffer(k))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        for n in &mut self.nodes {
            n.frozen = frozen;
        }
    }

    /// Mutable handles to every parameter with its trainability.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for n in &mut self.nodes {
            let prefix = n.id;
            let frozen = n.frozen;
            for (k, t) in n.params.iter_mut() {
                let trainable = !frozen && !is_buffer(k);
                out.push(ParamMut {
                    name: format!("{prefix}.{k}"),
                    tensor: t,
                    trainable,
                });
            }
        }
        out
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            for t in n.params.values_mut() {
                t.clear_grad();
            }
        }
    }

    /// SHA-256 over the structure and every parameter's bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.nodes {
            h.update(n.id.to_le_bytes());
            h.update(serde_json::to_vec(&n.kind).expect("kind serializes"));
            for i in &n.inputs {
                h.update(i.to_le_bytes());
            }
            for (k, t) in &n.params {
                h.update(k.as_bytes());
                for v in t.data() {
                    h.update(v.as_f64().to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            arch: self.arch.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| LayerNode {
                    id: n.id,
                    kind: n.kind.clone(),
                    inputs: n.inputs.clone(),
                    params: n.params.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
                    frozen: n.frozen,
                })
                .collect(),
            groups: self.groups.clone(),
            units: self.units.clone(),
            next_id: self.next_id,
        }
    }

    /// Assembles a graph from explicit nodes (in topological order) and
    /// validates it. `arch` supplies the input shape and class count.
    pub fn from_parts(
        arch: ArchSpec,
        nodes: Vec<LayerNode<T>>,
        groups: Vec<CoupledGroup>,
        units: Vec<Unit>,
    ) -> Result<Self> {
        let next_id = nodes.iter().map(|n| n.id + 1).max().unwrap_or(0);
        let g = ModelGraph {
            arch,
            nodes,
            groups,
            units,
            next_id,
        };
        g.validate()?;
        Ok(g)
    }

    /// Checks every structural invariant and returns per-node shapes for
    /// the declared input length.
    pub fn validate(&self) -> Result<HashMap<NodeId, NodeShape>> {
        self.shapes_for_length(self.arch.input_length)
    }

    pub fn shapes_for_length(&self, input_length: usize) -> Result<HashMap<NodeId, NodeShape>> {
        let mut shapes: HashMap<NodeId, NodeShape> = HashMap::new();
        if self.nodes.is_empty() {
            return Err(FcosError::shape("graph", "no nodes"));
        }
        for (pos, n) in self.nodes.iter().enumerate() {
            let name = n.name();
            if shapes.contains_key(&n.id) {
                return Err(FcosError::shape(name, "duplicate node id"));
            }
            let ins: Vec<NodeShape> = n
                .inputs
                .iter()
                .map(|i| {
                    shapes.get(i).copied().ok_or_else(|| {
                        FcosError::shape(&name, format!("input {i} is not an earlier node"))
                    })
                })
                .collect::<Result<_>>()?;
            let arity = match n.kind {
                LayerKind::Input { .. } => 0,
                LayerKind::Add => 2,
                _ => 1,
            };
            if ins.len() != arity {
                return Err(FcosError::shape(
                    name,
                    format!("expects {arity} inputs, has {}", ins.len()),
                ));
            }
            if matches!(n.kind, LayerKind::Input { .. }) && pos != 0 {
                return Err(FcosError::shape(name, "input node must come first"));
            }
            let expect_param = |p: &str, shape: &[usize]| -> Result<()> {
                match n.params.get(p) {
                    Some(t) if t.shape() == shape => Ok(()),
                    Some(t) => Err(FcosError::shape(
                        &name,
                        format!("param {p} has shape {:?}, expected {shape:?}", t.shape()),
                    )),
                    None => Err(FcosError::shape(&name, format!("missing param {p}"))),
                }
            };
            let need_spatial = |s: &NodeShape| -> Result<()> {
                if s.flat {
                    Err(FcosError::shape(&name, "expects a [C, L] input, got a flat one"))
                } else {
                    Ok(())
                }
            };
            let out = match &n.kind {
                LayerKind::Input { channels } => {
                    if *channels != self.arch.input_channels {
                        return Err(FcosError::shape(name, "input channels differ from arch"));
                    }
                    NodeShape {
                        channels: *channels,
                        length: input_length,
                        flat: false,
                    }
                }
                LayerKind::Conv1d {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    pad_left,
                    pad_right,
                    bias,
                } => {
                    need_spatial(&ins[0])?;
                    if ins[0].channels != *c_in {
                        return Err(FcosError::shape(
                            name,
                            format!("c_in {c_in} but producer has {} channels", ins[0].channels),
                        ));
                    }
                    if *c_in == 0 || *c_out == 0 || *kernel == 0 || *stride == 0 {
                        return Err(FcosError::shape(name, "zero-sized convolution"));
                    }
                    expect_param("weight", &[*c_out, *c_in, *kernel])?;
                    if *bias {
                        expect_param("bias", &[*c_out])?;
                    }
                    let l = crate::tensor::kernels::conv_out_len(
                        ins[0].length,
                        *kernel,
                        *stride,
                        *pad_left,
                        *pad_right,
                    );
                    if l == 0 {
                        return Err(FcosError::shape(name, "output length is zero"));
                    }
                    NodeShape {
                        channels: *c_out,
                        length: l,
                        flat: false,
                    }
                }
                LayerKind::BatchNorm { channels, .. } => {
                    need_spatial(&ins[0])?;
                    if ins[0].channels != *channels {
                        return Err(FcosError::shape(
                            name,
                            format!("{channels} channels but input has {}", ins[0].channels),
                        ));
                    }
                    for p in ["gamma", "beta", "running_mean", "running_var"] {
                        expect_param(p, &[*channels])?;
                    }
                    ins[0]
                }
                LayerKind::Relu => ins[0],
                LayerKind::MaxPool { window } => {
                    need_spatial(&ins[0])?;
                    if *window == 0 || ins[0].length < *window {
                        return Err(FcosError::shape(name, "pool window exceeds input length"));
                    }
                    NodeShape {
                        length: ins[0].length / window,
                        ..ins[0]
                    }
                }
                LayerKind::GlobalAvgPool => {
                    need_spatial(&ins[0])?;
                    NodeShape {
                        channels: ins[0].channels,
                        length: 1,
                        flat: true,
                    }
                }
                LayerKind::Dense { d_in, d_out, bias } => {
                    if !ins[0].flat {
                        return Err(FcosError::shape(name, "dense expects a pooled input"));
                    }
                    if ins[0].channels != *d_in {
                        return Err(FcosError::shape(
                            name,
                            format!("d_in {d_in} but producer has {}", ins[0].channels),
                        ));
                    }
                    expect_param("weight", &[*d_out, *d_in])?;
                    if *bias {
                        expect_param("bias", &[*d_out])?;
                    }
                    NodeShape {
                        channels: *d_out,
                        length: 1,
                        flat: true,
                    }
                }
                LayerKind::Add => {
                    if ins[0] != ins[1] {
                        return Err(FcosError::shape(
                            name,
                            format!("residual inputs disagree: {:?} vs {:?}", ins[0], ins[1]),
                        ));
                    }
                    ins[0]
                }
            };
            shapes.insert(n.id, out);
        }
        let last = self.nodes.last().expect("nonempty");
        match last.kind {
            LayerKind::Dense { d_out, .. } if d_out == self.arch.classes => {}
            _ => {
                return Err(FcosError::shape(
                    last.name(),
                    format!("graph must end in a dense layer with {} outputs", self.arch.classes),
                ))
            }
        }
        for n in &self.nodes[..self.nodes.len() - 1] {
            if self.successors(n.id).is_empty() {
                return Err(FcosError::shape(n.name(), "dangling node"));
            }
        }
        for g in &self.groups {
            let mut count = None;
            for &(id, side) in &g.members {
                let idx = self.index_of(id).ok_or_else(|| {
                    FcosError::shape(format!("group member {id}"), "node does not exist")
                })?;
                let c = side_channels(&self.nodes[idx].kind, side).ok_or_else(|| {
                    FcosError::shape(self.nodes[idx].name(), "group member has no channel side")
                })?;
                match count {
                    None => count = Some(c),
                    Some(prev) if prev != c => {
                        return Err(FcosError::shape(
                            self.nodes[idx].name(),
                            format!("coupled group disagrees: {c} vs {prev}"),
                        ))
                    }
                    _ => {}
                }
            }
        }
        for u in &self.units {
            for id in &u.nodes {
                if self.index_of(*id).is_none() {
                    return Err(FcosError::shape(format!("unit {}", u.id), "stale node reference"));
                }
            }
        }
        Ok(shapes)
    }
}

pub(crate) fn side_channels(kind: &LayerKind, side: Side) -> Option<usize> {
    match (kind, side) {
        (LayerKind::Conv1d { c_in, .. }, Side::In) => Some(*c_in),
        (LayerKind::Conv1d { c_out, .. }, Side::Out) => Some(*c_out),
        (LayerKind::Dense { d_in, .. }, Side::In) => Some(*d_in),
        (LayerKind::Dense { d_out, .. }, Side::Out) => Some(*d_out),
        (LayerKind::BatchNorm { channels, .. }, _) => Some(*channels),
        _ => None,
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
