use serde::{Deserialize, Serialize};

use crate::error::{FcosError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    /// Slices `weight[j, :, :]`, one per output channel.
    Out,
    /// Slices `weight[:, j, :]`, one per input channel.
    In,
}

/// Symmetric channel distance matrix, `D = 1 - similarity`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    size: usize,
    data: Vec<f64>,
    metric: Metric,
}

impl DistanceMatrix {
    /// Builds from a full square matrix; checks symmetry and the zero diagonal.
    pub fn from_square(size: usize, data: Vec<f64>, metric: Metric) -> Result<Self> {
        if data.len() != size * size {
            return Err(FcosError::Config(format!(
                "distance matrix needs {} entries, got {}",
                size * size,
                data.len()
            )));
        }
        for i in 0..size {
            if data[i * size + i] != 0.0 {
                return Err(FcosError::Config(format!("nonzero diagonal at {i}")));
            }
            for j in 0..i {
                let (a, b) = (data[i * size + j], data[j * size + i]);
                if a != b || !a.is_finite() || a < 0.0 {
                    return Err(FcosError::Config(format!(
                        "entry ({i}, {j}) must be finite, nonnegative and symmetric"
                    )));
                }
            }
        }
        Ok(DistanceMatrix { size, data, metric })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Flattened channel slices of a `[c_out, c_in, k]` weight along `axis`.
pub fn channel_vectors<T: Scalar>(weight: &Tensor<T>, axis: Axis) -> Result<Vec<Vec<f64>>> {
    let s = weight.shape();
    if s.len() != 3 {
        return Err(FcosError::shape(
            "channel_vectors",
            format!("expected a rank-3 conv weight, got {s:?}"),
        ));
    }
    let (c_out, c_in, k) = (s[0], s[1], s[2]);
    let w = weight.data();
    Ok(match axis {
        Axis::Out => (0..c_out)
            .map(|o| w[o * c_in * k..(o + 1) * c_in * k].iter().map(|v| v.as_f64()).collect())
            .collect(),
        Axis::In => (0..c_in)
            .map(|i| {
                (0..c_out)
                    .flat_map(|o| w[(o * c_in + i) * k..(o * c_in + i + 1) * k].iter())
                    .map(|v| v.as_f64())
                    .collect()
            })
            .collect(),
    })
}

/// Cosine similarity; two zero vectors count as identical, a zero and a
/// nonzero vector as orthogonal.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
    }
}

/// `1 / (1 + ||a - b||_2)`.
pub fn euclidean_similarity(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    1.0 / (1.0 + d)
}

pub fn distance_matrix(vectors: &[Vec<f64>], metric: Metric) -> DistanceMatrix {
    let m = vectors.len();
    let mut data = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..i {
            let sim = match metric {
                Metric::Cosine => cosine_similarity(&vectors[i], &vectors[j]),
                Metric::Euclidean => euclidean_similarity(&vectors[i], &vectors[j]),
            };
            let d = (1.0 - sim).max(0.0);
            data[i * m + j] = d;
            data[j * m + i] = d;
        }
    }
    DistanceMatrix {
        size: m,
        data,
        metric,
    }
}

/// Pairwise channel distances of one layer's weight along `axis`.
pub fn channel_similarity_matrix<T: Scalar>(
    weight: &Tensor<T>,
    axis: Axis,
    metric: Metric,
) -> Result<DistanceMatrix> {
    Ok(distance_matrix(&channel_vectors(weight, axis)?, metric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_channels_have_zero_distance() {
        let d = distance_matrix(&[vec![1.0, 2.0], vec![1.0, 2.0]], Metric::Cosine);
        assert_eq!(d.get(0, 1), 0.0);
    }

    #[test]
    fn orthogonal_channels_have_unit_distance() {
        let d = distance_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]], Metric::Cosine);
        assert_eq!(d.get(0, 1), 1.0);
    }

    #[test]
    fn euclidean_three_four_five() {
        assert_eq!(euclidean_similarity(&[0.0, 0.0], &[3.0, 4.0]), 1.0 / 6.0);
        let d = distance_matrix(&[vec![0.0, 0.0], vec![3.0, 4.0]], Metric::Euclidean);
        assert!((d.get(1, 0) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn zero_vectors_never_divide_by_zero() {
        let z = vec![0.0, 0.0];
        assert_eq!(cosine_similarity(&z, &z), 1.0);
        assert_eq!(cosine_similarity(&z, &[1.0, 0.0]), 0.0);
        let d = distance_matrix(&[z.clone(), z, vec![0.0, 3.0]], Metric::Cosine);
        assert_eq!(d.get(0, 1), 0.0);
        assert_eq!(d.get(0, 2), 1.0);
    }

    #[test]
    fn input_axis_slices() {
        // weight[o][i][k]: o in 0..2, i in 0..3, k in 0..2
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let w = Tensor::new(vec![2, 3, 2], data).unwrap();
        let ins = channel_vectors(&w, Axis::In).unwrap();
        assert_eq!(ins.len(), 3);
        assert_eq!(ins[1], vec![2.0, 3.0, 8.0, 9.0]);
        let outs = channel_vectors(&w, Axis::Out).unwrap();
        assert_eq!(outs[1], vec![6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn from_square_rejects_asymmetry() {
        assert!(DistanceMatrix::from_square(2, vec![0.0, 0.3, 0.4, 0.0], Metric::Cosine).is_err());
        assert!(DistanceMatrix::from_square(2, vec![0.0, 0.3, 0.3, 0.0], Metric::Cosine).is_ok());
    }
}
