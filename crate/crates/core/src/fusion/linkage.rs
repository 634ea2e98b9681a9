use serde::{Deserialize, Serialize};

use super::similarity::DistanceMatrix;
use crate::error::{FcosError, Result};

/// One agglomeration step. Cluster ids are the smallest channel index in the
/// cluster, so the merged cluster keeps id `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// Partition of channel indices into `n` clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id in `[0, n)` for each channel; clusters are numbered by
    /// their smallest member.
    pub members: Vec<usize>,
    pub n: usize,
    pub merges: Vec<Merge>,
}

impl ClusterAssignment {
    /// Every channel in its own cluster.
    pub fn identity(m: usize) -> Self {
        ClusterAssignment {
            members: (0..m).collect(),
            n: m,
            merges: Vec::new(),
        }
    }

    /// Channel indices of each cluster, ascending.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n];
        for (ch, &c) in self.members.iter().enumerate() {
            out[c].push(ch);
        }
        out
    }
}

/// Agglomerative clustering with average linkage down to `n` clusters.
///
/// Among pairs at the minimum linkage distance the pair with the
/// lexicographically smallest `(lower id, higher id)` merges first.
pub fn average_linkage_cluster(d: &DistanceMatrix, n: usize) -> Result<ClusterAssignment> {
    let m = d.size();
    if n == 0 || n > m {
        return Err(FcosError::Config(format!(
            "cluster count {n} must lie in [1, {m}]"
        )));
    }
    // sums[a][b]: total pairwise distance between clusters a and b.
    let mut sums: Vec<f64> = d.as_slice().to_vec();
    let mut sizes = vec![1usize; m];
    let mut active: Vec<bool> = vec![true; m];
    let mut label: Vec<usize> = (0..m).collect();
    let mut merges = Vec::with_capacity(m - n);
    for _ in 0..m - n {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..m {
            if !active[a] {
                continue;
            }
            for b in a + 1..m {
                if !active[b] {
                    continue;
                }
                let link = sums[a * m + b] / (sizes[a] * sizes[b]) as f64;
                if best.is_none_or(|(_, _, bd)| link < bd) {
                    best = Some((a, b, link));
                }
            }
        }
        let (a, b, dist) = best.expect("at least two active clusters");
        for c in 0..m {
            if active[c] && c != a && c != b {
                let s = sums[a * m + c] + sums[b * m + c];
                sums[a * m + c] = s;
                sums[c * m + a] = s;
            }
        }
        sizes[a] += sizes[b];
        active[b] = false;
        for l in label.iter_mut() {
            if *l == b {
                *l = a;
            }
        }
        merges.push(Merge { a, b, distance: dist });
    }
    let ids: Vec<usize> = (0..m).filter(|&c| active[c]).collect();
    let members = label
        .iter()
        .map(|l| ids.binary_search(l).expect("label is an active cluster"))
        .collect();
    Ok(ClusterAssignment { members, n, merges })
}
