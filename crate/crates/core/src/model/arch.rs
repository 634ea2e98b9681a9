use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CoupledGroup, LayerKind, LayerNode, ModelGraph, NodeId, Side, Unit, UnitKind};
use crate::error::{FcosError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchName {
    PlainCnn1d,
    ResidualCnn1d,
}

impl FromStr for ArchName {
    type Err = FcosError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain-cnn1d" => Ok(ArchName::PlainCnn1d),
            "residual-cnn1d" => Ok(ArchName::ResidualCnn1d),
            other => Err(FcosError::Config(format!(
                "unknown architecture '{other}' (expected plain-cnn1d or residual-cnn1d)"
            ))),
        }
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchName::PlainCnn1d => "plain-cnn1d",
            ArchName::ResidualCnn1d => "residual-cnn1d",
        })
    }
}

/// Architecture name plus width/depth knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: ArchName,
    pub input_channels: usize,
    pub input_length: usize,
    pub classes: usize,
    /// Plain: one entry per conv layer. Residual: one entry per stage.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Residual only.
    pub blocks_per_stage: usize,
    /// Plain only: insert batchnorm after each conv.
    pub batchnorm: bool,
    pub seed: u64,
}

impl ArchSpec {
    /// Four conv+batchnorm layers.
    pub fn plain(classes: usize, seed: u64) -> Self {
        ArchSpec {
            name: ArchName::PlainCnn1d,
            input_channels: 2,
            input_length: 128,
            classes,
            widths: vec![16, 32, 64, 64],
            kernel: 8,
            blocks_per_stage: 0,
            batchnorm: true,
            seed,
        }
    }

    /// Three stages of two residual blocks.
    pub fn residual(classes: usize, seed: u64) -> Self {
        ArchSpec {
            name: ArchName::ResidualCnn1d,
            input_channels: 2,
            input_length: 128,
            classes,
            widths: vec![16, 32, 64],
            kernel: 3,
            blocks_per_stage: 2,
            batchnorm: true,
            seed,
        }
    }

    pub fn default_for(name: ArchName, classes: usize, seed: u64) -> Self {
        match name {
            ArchName::PlainCnn1d => Self::plain(classes, seed),
            ArchName::ResidualCnn1d => Self::residual(classes, seed),
        }
    }
}

struct Builder {
    nodes: Vec<LayerNode<f32>>,
    rng: ChaCha8Rng,
    next: NodeId,
}

impl Builder {
    fn push(&mut self, kind: LayerKind, inputs: Vec<NodeId>) -> NodeId {
        let id = self.next;
        self.next += 1;
        let mut params = BTreeMap::new();
        match &kind {
            LayerKind::Conv1d {
                c_in,
                c_out,
                kernel,
                bias,
                ..
            } => {
                let fan_in = c_in * kernel;
                params.insert(
                    "weight".to_string(),
                    self.kaiming(vec![*c_out, *c_in, *kernel], fan_in),
                );
                if *bias {
                    params.insert("bias".to_string(), Tensor::zeros(vec![*c_out]));
                }
            }
            LayerKind::Dense { d_in, d_out, bias } => {
                params.insert("weight".to_string(), self.kaiming(vec![*d_out, *d_in], *d_in));
                if *bias {
                    params.insert("bias".to_string(), Tensor::zeros(vec![*d_out]));
                }
            }
            LayerKind::BatchNorm { channels, .. } => {
                params.insert("gamma".to_string(), Tensor::filled(vec![*channels], 1.0));
                params.insert("beta".to_string(), Tensor::zeros(vec![*channels]));
                params.insert("running_mean".to_string(), Tensor::zeros(vec![*channels]));
                params.insert("running_var".to_string(), Tensor::filled(vec![*channels], 1.0));
            }
            _ => {}
        }
        self.nodes.push(LayerNode {
            id,
            kind,
            inputs,
            params,
            frozen: false,
        });
        id
    }

    /// Kaiming-uniform with fan-in scaling for ReLU networks.
    fn kaiming(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<f32> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.gen_range(-bound..bound) as f32)
            .collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    fn conv(&mut self, input: NodeId, c_in: usize, c_out: usize, k: usize, bias: bool) -> NodeId {
        let pad_left = (k - 1) / 2;
        self.push(
            LayerKind::Conv1d {
                c_in,
                c_out,
                kernel: k,
                stride: 1,
                pad_left,
                pad_right: k - 1 - pad_left,
                bias,
            },
            vec![input],
        )
    }

    fn bn(&mut self, input: NodeId, channels: usize) -> NodeId {
        self.push(
            LayerKind::BatchNorm {
                channels,
                eps: 1e-5,
                momentum: 0.1,
            },
            vec![input],
        )
    }
}

/// Builds a freshly initialized reference model.
pub fn build_model(spec: &ArchSpec) -> Result<ModelGraph<f32>> {
    if spec.widths.is_empty() || spec.widths.contains(&0) {
        return Err(FcosError::Config("widths must be nonempty and positive".into()));
    }
    if spec.kernel == 0 || spec.classes < 2 || spec.input_channels == 0 {
        return Err(FcosError::Config(
            "kernel, class count and input channels must be positive (classes >= 2)".into(),
        ));
    }
    let mut b = Builder {
        nodes: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        next: 0,
    };
    let input = b.push(
        LayerKind::Input {
            channels: spec.input_channels,
        },
        vec![],
    );
    let mut groups = Vec::new();
    let mut units = Vec::new();
    let mut c_prev = spec.input_channels;
    let mut cur = input;
    let mut open_group = None;
    match spec.name {
        ArchName::PlainCnn1d => {
            for (i, &w) in spec.widths.iter().enumerate() {
                let conv = b.conv(cur, c_prev, w, spec.kernel, true);
                let mut nodes = vec![conv];
                let mut x = conv;
                if spec.batchnorm {
                    x = b.bn(x, w);
                    nodes.push(x);
                }
                x = b.push(LayerKind::Relu, vec![x]);
                nodes.push(x);
                x = b.push(LayerKind::MaxPool { window: 2 }, vec![x]);
                nodes.push(x);
                units.push(Unit {
                    id: i + 1,
                    kind: UnitKind::ConvLayer,
                    stage: 0,
                    nodes,
                    output: x,
                });
                cur = x;
                c_prev = w;
            }
        }
        ArchName::ResidualCnn1d => {
            if spec.blocks_per_stage == 0 {
                return Err(FcosError::Config("residual model needs blocks_per_stage >= 1".into()));
            }
            let mut prev_consumers: Vec<(NodeId, Side)> = Vec::new();
            for (s, &w) in spec.widths.iter().enumerate() {
                let mut x = cur;
                if s > 0 {
                    x = b.push(LayerKind::MaxPool { window: 2 }, vec![x]);
                }
                let trans = b.conv(x, c_prev, w, spec.kernel, false);
                if s > 0 {
                    prev_consumers.push((trans, Side::In));
                    groups.push(CoupledGroup {
                        members: std::mem::take(&mut prev_consumers),
                    });
                }
                let mut members = vec![(trans, Side::Out)];
                x = b.bn(trans, w);
                x = b.push(LayerKind::Relu, vec![x]);
                for _ in 0..spec.blocks_per_stage {
                    let c1 = b.conv(x, w, w, spec.kernel, false);
                    let n1 = b.bn(c1, w);
                    let r1 = b.push(LayerKind::Relu, vec![n1]);
                    let c2 = b.conv(r1, w, w, spec.kernel, false);
                    let n2 = b.bn(c2, w);
                    let add = b.push(LayerKind::Add, vec![n2, x]);
                    let out = b.push(LayerKind::Relu, vec![add]);
                    members.push((c1, Side::In));
                    members.push((c2, Side::Out));
                    units.push(Unit {
                        id: units.len() + 1,
                        kind: UnitKind::ResidualBlock,
                        stage: s,
                        nodes: vec![c1, n1, r1, c2, n2, add, out],
                        output: out,
                    });
                    x = out;
                }
                prev_consumers = members;
                cur = x;
                c_prev = w;
            }
            open_group = Some(prev_consumers);
        }
    }
    let gap = b.push(LayerKind::GlobalAvgPool, vec![cur]);
    let head = b.push(
        LayerKind::Dense {
            d_in: c_prev,
            d_out: spec.classes,
            bias: true,
        },
        vec![gap],
    );
    // The last stage's group is closed by the classifier head.
    if let Some(mut members) = open_group {
        members.push((head, Side::In));
        groups.push(CoupledGroup { members });
    }
    let graph = ModelGraph {
        arch: spec.clone(),
        nodes: b.nodes,
        groups,
        units,
        next_id: b.next,
    };
    graph.validate()?;
    Ok(graph)
}
