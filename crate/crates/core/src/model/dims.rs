use super::{LayerKind, ModelGraph, NodeId};
use crate::tensor::Scalar;

/// One channel dimension flowing through the graph: the convs that write it,
/// the batchnorms that normalize it, and the convs/dense layers that read it.
/// Residual adds join the dimensions of their inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelDim {
    pub producers: Vec<NodeId>,
    pub companions: Vec<NodeId>,
    pub consumers: Vec<NodeId>,
    pub size: usize,
    /// False for the raw input dimension.
    pub prunable: bool,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

impl<T: Scalar> ModelGraph<T> {
    /// Channel dimensions in topological order of their first producer.
    pub fn channel_dims(&self) -> Vec<ChannelDim> {
        let mut parent: Vec<usize> = Vec::new();
        let mut dim_of: Vec<Option<usize>> = vec![None; self.nodes.len()];
        let mut input_dim = None;
        for (i, n) in self.nodes.iter().enumerate() {
            let in_dim = |k: usize| -> Option<usize> {
                let src = self.index_of(n.inputs[k]).expect("validated input");
                dim_of[src]
            };
            dim_of[i] = match n.kind {
                LayerKind::Input { .. } | LayerKind::Conv1d { .. } => {
                    parent.push(parent.len());
                    if matches!(n.kind, LayerKind::Input { .. }) {
                        input_dim = Some(parent.len() - 1);
                    }
                    Some(parent.len() - 1)
                }
                LayerKind::Dense { .. } => None,
                LayerKind::Add => {
                    let a = in_dim(0).expect("add input carries channels");
                    let b = in_dim(1).expect("add input carries channels");
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    let (lo, hi) = (ra.min(rb), ra.max(rb));
                    parent[hi] = lo;
                    Some(lo)
                }
                _ => in_dim(0),
            };
        }
        let roots: Vec<Option<usize>> = dim_of
            .iter()
            .map(|d| d.map(|d| find(&mut parent, d)))
            .collect();
        let input_root = input_dim.map(|d| find(&mut parent, d));
        let mut order: Vec<usize> = Vec::new();
        let mut dims: Vec<ChannelDim> = Vec::new();
        let slot = |root: usize, order: &mut Vec<usize>, dims: &mut Vec<ChannelDim>| -> usize {
            if let Some(p) = order.iter().position(|&r| r == root) {
                p
            } else {
                order.push(root);
                dims.push(ChannelDim {
                    producers: vec![],
                    companions: vec![],
                    consumers: vec![],
                    size: 0,
                    prunable: Some(root) != input_root,
                });
                dims.len() - 1
            }
        };
        for (i, n) in self.nodes.iter().enumerate() {
            match n.kind {
                LayerKind::Input { channels } => {
                    let s = slot(roots[i].expect("input dim"), &mut order, &mut dims);
                    dims[s].size = channels;
                }
                LayerKind::Conv1d { c_out, .. } => {
                    let s = slot(roots[i].expect("conv dim"), &mut order, &mut dims);
                    dims[s].producers.push(n.id);
                    dims[s].size = c_out;
                }
                _ => {}
            }
            let reads = match n.kind {
                LayerKind::Conv1d { .. } | LayerKind::Dense { .. } => Some(false),
                LayerKind::BatchNorm { .. } => Some(true),
                _ => None,
            };
            if let Some(is_companion) = reads {
                let src = self.index_of(n.inputs[0]).expect("validated input");
                let s = slot(roots[src].expect("reads a channel dim"), &mut order, &mut dims);
                if is_companion {
                    dims[s].companions.push(n.id);
                } else {
                    dims[s].consumers.push(n.id);
                }
            }
        }
        dims
    }
}
