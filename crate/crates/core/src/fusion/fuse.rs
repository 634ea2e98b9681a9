use log::warn;
use serde::{Deserialize, Serialize};

use super::linkage::ClusterAssignment;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Mean,
    L1Weighted,
}

/// Convex fusion weights for the members of one cluster. Returns `true` as
/// the second value when an all-zero cluster fell back to the mean.
pub fn member_weights(vectors: &[&[f64]], scheme: Scheme) -> (Vec<f64>, bool) {
    let k = vectors.len();
    let mean = vec![1.0 / k as f64; k];
    match scheme {
        Scheme::Mean => (mean, false),
        Scheme::L1Weighted => {
            let scores: Vec<f64> = vectors
                .iter()
                .map(|v| v.iter().map(|x| x.abs()).sum())
                .collect();
            let total: f64 = scores.iter().sum();
            if total == 0.0 {
                warn!("cluster of {k} channels has zero L1 mass; fusing by mean");
                (mean, true)
            } else {
                (scores.iter().map(|s| s / total).collect(), false)
            }
        }
    }
}

/// `sum_j alpha_j * x_j`, evaluated as `x_0 + sum_j alpha_j * (x_j - x_0)` so
/// a cluster of identical members fuses to that member exactly.
pub fn convex_combine(members: &[&[f64]], alpha: &[f64]) -> Vec<f64> {
    let anchor = members[0];
    let mut out = anchor.to_vec();
    for (m, &a) in members.iter().zip(alpha).skip(1) {
        for ((o, &x), &x0) in out.iter_mut().zip(m.iter()).zip(anchor) {
            *o += a * (x - x0);
        }
    }
    // The anchor's own weight is folded in implicitly: sum(alpha) == 1.
    out
}

/// Fuses member slices cluster by cluster (one output slice per cluster).
pub fn fuse_cluster_weights(
    slices: &[Vec<f64>],
    assignment: &ClusterAssignment,
    scheme: Scheme,
) -> Vec<Vec<f64>> {
    assignment
        .clusters()
        .iter()
        .map(|cluster| {
            let members: Vec<&[f64]> = cluster.iter().map(|&j| slices[j].as_slice()).collect();
            let (alpha, _) = member_weights(&members, scheme);
            convex_combine(&members, &alpha)
        })
        .collect()
}

/// How one channel dimension shrinks: each new channel is a weighted
/// combination of old channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub groups: Vec<Vec<(usize, f64)>>,
}

impl Reduction {
    /// Convex fusion groups from a cluster assignment and per-channel vectors.
    pub fn fusion(assignment: &ClusterAssignment, vectors: &[Vec<f64>], scheme: Scheme) -> Self {
        let groups = assignment
            .clusters()
            .into_iter()
            .map(|cluster| {
                let members: Vec<&[f64]> =
                    cluster.iter().map(|&j| vectors[j].as_slice()).collect();
                let (alpha, _) = member_weights(&members, scheme);
                cluster.into_iter().zip(alpha).collect()
            })
            .collect();
        Reduction { groups }
    }

    /// Keeps the listed channels unchanged.
    pub fn selection(keep: &[usize]) -> Self {
        Reduction {
            groups: keep.iter().map(|&j| vec![(j, 1.0)]).collect(),
        }
    }

    /// The same grouping with every coefficient set to one.
    pub fn summed(&self) -> Self {
        Reduction {
            groups: self
                .groups
                .iter()
                .map(|g| g.iter().map(|&(j, _)| (j, 1.0)).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    fn combine(&self, slices: &[Vec<f64>], g: usize) -> Vec<f64> {
        let group = &self.groups[g];
        let members: Vec<&[f64]> = group.iter().map(|&(j, _)| slices[j].as_slice()).collect();
        let coef: Vec<f64> = group.iter().map(|&(_, c)| c).collect();
        let total: f64 = coef.iter().sum();
        if (total - 1.0).abs() < 1e-12 {
            convex_combine(&members, &coef)
        } else {
            let mut out = vec![0.0; members[0].len()];
            for (m, c) in members.iter().zip(&coef) {
                for (o, &x) in out.iter_mut().zip(m.iter()) {
                    *o += c * x;
                }
            }
            out
        }
    }
}

fn slices_along<T: Scalar>(t: &Tensor<T>, axis: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let outer: usize = s[..axis].iter().product();
    let n = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let d = t.data();
    (0..n)
        .map(|j| {
            let mut v = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                let base = (o * n + j) * inner;
                v.extend(d[base..base + inner].iter().map(|x| x.as_f64()));
            }
            v
        })
        .collect()
}

fn assemble<T: Scalar>(shape: &[usize], axis: usize, slices: &[Vec<f64>]) -> Tensor<T> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = slices.len();
    let mut data = vec![T::zero(); outer * n * inner];
    for (j, s) in slices.iter().enumerate() {
        for o in 0..outer {
            let base = (o * n + j) * inner;
            for (d, &v) in data[base..base + inner]
                .iter_mut()
                .zip(&s[o * inner..(o + 1) * inner])
            {
                *d = T::from_f64(v);
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = n;
    Tensor::new(new_shape, data).expect("assembled shape is consistent")
}

/// Applies `r` along `axis` of `t`.
pub fn reduce_axis<T: Scalar>(t: &Tensor<T>, axis: usize, r: &Reduction) -> Tensor<T> {
    let slices = slices_along(t, axis);
    let fused: Vec<Vec<f64>> = (0..r.len()).map(|g| r.combine(&slices, g)).collect();
    assemble(t.shape(), axis, &fused)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assign(members: Vec<usize>, n: usize) -> ClusterAssignment {
        ClusterAssignment {
            members,
            n,
            merges: vec![],
        }
    }

    #[test]
    fn mean_fusion() {
        let out = fuse_cluster_weights(&[vec![1.0, 2.0], vec![3.0, 4.0]], &assign(vec![0, 0], 1), Scheme::Mean);
        assert_eq!(out, vec![vec![2.0, 3.0]]);
    }

    #[test]
    fn l1_weighted_fusion() {
        let v = [vec![1.0, 1.0], vec![3.0, 3.0]];
        let (alpha, _) = member_weights(&[&v[0], &v[1]], Scheme::L1Weighted);
        assert_eq!(alpha, vec![0.25, 0.75]);
        let out = fuse_cluster_weights(&v, &assign(vec![0, 0], 1), Scheme::L1Weighted);
        assert_eq!(out, vec![vec![2.5, 2.5]]);
    }

    #[test]
    fn zero_mass_falls_back_to_mean() {
        let v = [vec![0.0, 0.0], vec![0.0, 0.0]];
        let (alpha, fell_back) = member_weights(&[&v[0], &v[1]], Scheme::L1Weighted);
        assert!(fell_back);
        assert_eq!(alpha, vec![0.5, 0.5]);
    }

    #[test]
    fn identical_members_fuse_exactly() {
        let x = vec![0.1, -0.7, 1e-3, 3.3];
        let v = vec![x.clone(), x.clone(), x.clone()];
        for scheme in [Scheme::Mean, Scheme::L1Weighted] {
            let out = fuse_cluster_weights(&v, &assign(vec![0, 0, 0], 1), scheme);
            assert_eq!(out[0], x);
        }
    }

    #[test]
    fn reduce_conv_input_axis_by_sum() {
        // weight [1, 3, 1] = [[1], [2], [4]]; channels 0 and 2 summed.
        let w = Tensor::<f64>::new(vec![1, 3, 1], vec![1.0, 2.0, 4.0]).unwrap();
        let r = Reduction {
            groups: vec![vec![(0, 1.0), (2, 1.0)], vec![(1, 1.0)]],
        };
        let out = reduce_axis(&w, 1, &r);
        assert_eq!(out.shape(), &[1, 2, 1]);
        assert_eq!(out.data(), &[5.0, 2.0]);
    }
}
