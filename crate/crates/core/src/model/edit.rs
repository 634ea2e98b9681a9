use std::collections::BTreeSet;

use super::{LayerKind, ModelGraph, NodeId, UnitKind};
use crate::error::{FcosError, Result};
use crate::fusion::{
    apply_input_reduction, average_linkage_cluster, dim_vectors, distance_matrix, Metric,
    Reduction,
};
use crate::tensor::Scalar;

impl<T: Scalar> ModelGraph<T> {
    /// Returns a copy with the given removable units taken out.
    ///
    /// Residual blocks fall back to their identity shortcut. A plain conv
    /// layer is spliced out; when its input is narrower than its output, the
    /// consumer's input slices are merged along clusters of the removed
    /// layer's output channels. Widening splices are rejected.
    pub fn remove_layers(&self, ids: &BTreeSet<usize>) -> Result<ModelGraph<T>> {
        for &id in ids {
            if self.unit(id).is_none() {
                return Err(FcosError::Unremovable {
                    id,
                    reason: "no removable unit with this id".into(),
                });
            }
        }
        let mut work = self.clone();
        for &id in ids {
            work.remove_unit(id)?;
        }
        work.validate()?;
        Ok(work)
    }

    fn remove_unit(&mut self, id: usize) -> Result<()> {
        let unit = self.unit(id).expect("checked by caller").clone();
        let inside = |n: &NodeId| unit.nodes.contains(n);
        let source = match unit.kind {
            UnitKind::ResidualBlock => {
                let add = unit
                    .nodes
                    .iter()
                    .copied()
                    .find(|&n| matches!(self.node(n).kind, LayerKind::Add))
                    .ok_or_else(|| FcosError::Unremovable {
                        id,
                        reason: "residual block without an add".into(),
                    })?;
                self.node(add)
                    .inputs
                    .iter()
                    .copied()
                    .find(|n| !inside(n))
                    .ok_or_else(|| FcosError::Unremovable {
                        id,
                        reason: "residual block without a shortcut".into(),
                    })?
            }
            UnitKind::ConvLayer => {
                let conv = unit.nodes[0];
                let (c_in, c_out) = match self.node(conv).kind {
                    LayerKind::Conv1d { c_in, c_out, .. } => (c_in, c_out),
                    _ => {
                        return Err(FcosError::Unremovable {
                            id,
                            reason: "unit does not start with a conv".into(),
                        })
                    }
                };
                let dims = self.channel_dims();
                let dim = dims
                    .iter()
                    .find(|d| d.producers.contains(&conv))
                    .expect("conv produces a dimension");
                if dim.producers.len() > 1 {
                    return Err(FcosError::Unremovable {
                        id,
                        reason: "output channels are coupled to other layers".into(),
                    });
                }
                if dim.companions.iter().any(|c| !inside(c)) {
                    return Err(FcosError::Unremovable {
                        id,
                        reason: "output normalized outside the unit".into(),
                    });
                }
                if c_in > c_out {
                    return Err(FcosError::Unremovable {
                        id,
                        reason: format!("splicing {c_in} channels into a {c_out}-channel consumer"),
                    });
                }
                if c_in < c_out {
                    let vectors = dim_vectors(self, &[conv]);
                    let assignment =
                        average_linkage_cluster(&distance_matrix(&vectors, Metric::Cosine), c_in)?;
                    let r = Reduction::fusion(&assignment, &vectors, crate::fusion::Scheme::Mean)
                        .summed();
                    for &c in &dim.consumers {
                        apply_input_reduction(self, c, &r);
                    }
                }
                self.node(conv).inputs[0]
            }
        };
        for node in &mut self.nodes {
            if inside(&node.id) {
                continue;
            }
            for i in &mut node.inputs {
                if *i == unit.output {
                    *i = source;
                }
            }
        }
        self.nodes.retain(|n| !unit.nodes.contains(&n.id));
        for g in &mut self.groups {
            g.members.retain(|(n, _)| !unit.nodes.contains(n));
        }
        self.groups.retain(|g| g.members.len() > 1);
        self.units.retain(|u| u.id != id);
        Ok(())
    }
}
