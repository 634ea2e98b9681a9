//! Stage one: channel similarity, average-linkage clustering and
//! intra-cluster weight fusion.

mod fuse;
mod linkage;
mod prune;
mod similarity;

pub use fuse::{convex_combine, fuse_cluster_weights, member_weights, reduce_axis, Reduction, Scheme};
pub use linkage::{average_linkage_cluster, ClusterAssignment, Merge};
pub use prune::{
    prune_model_channels, surviving_channels, FusionConfig, FusionOrder, InputMode, PlanEntry,
    PrunePlan, RUNNING_VAR_FLOOR,
};
pub(crate) use prune::{apply_input_reduction, apply_output_reduction, dim_vectors};
pub use similarity::{
    channel_similarity_matrix, channel_vectors, cosine_similarity, distance_matrix,
    euclidean_similarity, Axis, DistanceMatrix, Metric,
};
