mod common;

use common::{oracle_average_linkage, random_distance_case};
use fcos::fusion::{average_linkage_cluster, DistanceMatrix, Metric};

#[test]
fn average_linkage_matches_brute_force_oracle() {
    for seed in 0..200 {
        let (m, d) = random_distance_case(seed);
        let dm = DistanceMatrix::from_square(m, d.clone(), Metric::Cosine).unwrap();
        for n in 1..=m {
            let got = average_linkage_cluster(&dm, n).unwrap();
            assert_eq!(got.members, oracle_average_linkage(&d, m, n), "seed {seed}, m {m}, n {n}");
        }
    }
}

#[test]
fn merge_trace_has_nondecreasing_distances_under_average_linkage() {
    // average linkage is reducible, so merge heights never drop
    for seed in (1..200).step_by(2) {
        let (m, d) = random_distance_case(seed);
        let dm = DistanceMatrix::from_square(m, d, Metric::Cosine).unwrap();
        let a = average_linkage_cluster(&dm, 1).unwrap();
        for w in a.merges.windows(2) {
            assert!(w[1].distance >= w[0].distance - 1e-12, "seed {seed}: {:?}", a.merges);
        }
    }
}
