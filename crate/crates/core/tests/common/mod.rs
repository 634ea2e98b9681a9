//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use fcos::data::{generate_dataset, GenConfig, Modulation, SignalDataset};
use fcos::model::{ArchSpec, LayerKind, LayerNode, ModelGraph, NodeId, TrainSession};
use fcos::tensor::kernels::softmax_cross_entropy;
use fcos::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- gradients

pub const GRAD_KINDS: [&str; 8] = [
    "conv1d",
    "dense",
    "batchnorm",
    "relu",
    "maxpool",
    "global-avg-pool",
    "add",
    "softmax-cross-entropy",
];

const B: usize = 3;
const C: usize = 2;
const L: usize = 8;
const K: usize = 3;

struct Net {
    rng: ChaCha8Rng,
    nodes: Vec<LayerNode<f64>>,
}

impl Net {
    fn rand(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn push(&mut self, kind: LayerKind, inputs: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len() as NodeId;
        let mut params = BTreeMap::new();
        match &kind {
            LayerKind::Conv1d {
                c_in,
                c_out,
                kernel,
                bias,
                ..
            } => {
                params.insert("weight".into(), self.rand(vec![*c_out, *c_in, *kernel], -1.0, 1.0));
                if *bias {
                    params.insert("bias".into(), self.rand(vec![*c_out], -0.5, 0.5));
                }
            }
            LayerKind::Dense { d_in, d_out, bias } => {
                params.insert("weight".into(), self.rand(vec![*d_out, *d_in], -1.0, 1.0));
                if *bias {
                    params.insert("bias".into(), self.rand(vec![*d_out], -0.5, 0.5));
                }
            }
            LayerKind::BatchNorm { channels, .. } => {
                params.insert("gamma".into(), self.rand(vec![*channels], 0.5, 1.5));
                params.insert("beta".into(), self.rand(vec![*channels], -0.5, 0.5));
                params.insert("running_mean".into(), Tensor::zeros(vec![*channels]));
                params.insert("running_var".into(), Tensor::filled(vec![*channels], 1.0));
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

    fn conv(&mut self, input: NodeId, c_in: usize, c_out: usize, seed: u64) -> NodeId {
        // alternate geometries: odd seeds use a strided, asymmetric pad
        let (kernel, stride, pad_left, pad_right) = if seed.is_multiple_of(2) { (3, 1, 1, 1) } else { (4, 2, 1, 2) };
        self.push(
            LayerKind::Conv1d {
                c_in,
                c_out,
                kernel,
                stride,
                pad_left,
                pad_right,
                bias: true,
            },
            vec![input],
        )
    }

    fn head(&mut self, input: NodeId, channels: usize) -> NodeId {
        let gap = self.push(LayerKind::GlobalAvgPool, vec![input]);
        self.push(
            LayerKind::Dense {
                d_in: channels,
                d_out: K,
                bias: true,
            },
            vec![gap],
        )
    }
}

/// A small fp64 network exercising one layer kind, its input and labels.
pub fn grad_case(kind: &str, seed: u64) -> (ModelGraph<f64>, Tensor<f64>, Vec<usize>) {
    let mut net = Net {
        rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(kind.len() as u64)),
        nodes: Vec::new(),
    };
    let x = net.rand(vec![B, C, L], -1.0, 1.0);
    let y: Vec<usize> = (0..B).map(|_| net.rng.gen_range(0..K)).collect();
    let input = net.push(LayerKind::Input { channels: C }, vec![]);
    match kind {
        "conv1d" => {
            let c = net.conv(input, C, 3, seed);
            net.head(c, 3);
        }
        "dense" => {
            let gap = net.push(LayerKind::GlobalAvgPool, vec![input]);
            let d = net.push(
                LayerKind::Dense {
                    d_in: C,
                    d_out: 4,
                    bias: true,
                },
                vec![gap],
            );
            net.push(
                LayerKind::Dense {
                    d_in: 4,
                    d_out: K,
                    bias: seed.is_multiple_of(2),
                },
                vec![d],
            );
        }
        "batchnorm" => {
            let c = net.conv(input, C, 3, seed);
            let bn = net.push(
                LayerKind::BatchNorm {
                    channels: 3,
                    eps: 1e-5,
                    momentum: 0.1,
                },
                vec![c],
            );
            net.head(bn, 3);
        }
        "relu" => {
            let c = net.conv(input, C, 3, seed);
            let r = net.push(LayerKind::Relu, vec![c]);
            net.head(r, 3);
        }
        "maxpool" => {
            let c = net.conv(input, C, 3, seed);
            let p = net.push(LayerKind::MaxPool { window: 2 }, vec![c]);
            net.head(p, 3);
        }
        "global-avg-pool" | "softmax-cross-entropy" => {
            net.head(input, C);
        }
        "add" => {
            let c = net.push(
                LayerKind::Conv1d {
                    c_in: C,
                    c_out: C,
                    kernel: 3,
                    stride: 1,
                    pad_left: 1,
                    pad_right: 1,
                    bias: true,
                },
                vec![input],
            );
            let a = net.push(LayerKind::Add, vec![c, input]);
            net.head(a, C);
        }
        other => panic!("unknown layer kind {other}"),
    }
    let mut arch = ArchSpec::plain(K, seed);
    arch.input_channels = C;
    arch.input_length = L;
    let model = ModelGraph::from_parts(arch, net.nodes, vec![], vec![]).unwrap();
    (model, x, y)
}

fn loss(model: &mut ModelGraph<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    let logits = TrainSession::new().forward(model, x).unwrap();
    softmax_cross_entropy(logits.data(), y, K).0
}

/// Norm-wise relative error. Gradients that are exactly zero (a bias
/// feeding batchnorm) leave only rounding noise in the numeric estimate,
/// so norms below 1e-6 are compared in absolute terms.
fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-6)
}

/// Largest relative error between backprop and central differences
/// (h = 1e-5) over every trainable tensor and the input.
pub fn max_grad_error(mut model: ModelGraph<f64>, x: &Tensor<f64>, y: &[usize]) -> f64 {
    const H: f64 = 1e-5;
    let mut session = TrainSession::new();
    let logits = session.forward(&mut model, x).unwrap();
    let (_, dlogits) = softmax_cross_entropy(logits.data(), y, K);
    let dx = session
        .backward(&mut model, &Tensor::new(logits.shape().to_vec(), dlogits).unwrap())
        .unwrap();

    let mut worst: f64 = 0.0;
    let mut xp = x.clone();
    let mut num = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + H;
        let up = loss(&mut model.clone(), &xp, y);
        xp.data_mut()[i] = orig - H;
        let down = loss(&mut model.clone(), &xp, y);
        xp.data_mut()[i] = orig;
        num[i] = (up - down) / (2.0 * H);
    }
    worst = worst.max(rel_error(dx.data(), &num));

    let targets: Vec<(NodeId, String)> = model
        .nodes()
        .iter()
        .flat_map(|n| {
            n.params
                .keys()
                .filter(|k| !fcos::model::is_buffer(k))
                .map(move |k| (n.id, k.clone()))
        })
        .collect();
    for (id, name) in targets {
        let analytic = model.node(id).param(&name).grad().expect("grad populated").to_vec();
        let mut num = vec![0.0; analytic.len()];
        for (i, slot) in num.iter_mut().enumerate() {
            let mut m = model.clone();
            let orig = m.node(id).param(&name).data()[i];
            m.node_mut(id).param_mut(&name).data_mut()[i] = orig + H;
            let up = loss(&mut m.clone(), x, y);
            m.node_mut(id).param_mut(&name).data_mut()[i] = orig - H;
            let down = loss(&mut m, x, y);
            *slot = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_error(&analytic, &num));
    }
    worst
}

/// Central-difference check of the loss itself with respect to the logits.
pub fn softmax_ce_logit_error(seed: u64) -> f64 {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits: Vec<f64> = (0..B * K).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let y: Vec<usize> = (0..B).map(|_| rng.gen_range(0..K)).collect();
    let (_, g) = softmax_cross_entropy(&logits, &y, K);
    let mut num = vec![0.0; logits.len()];
    for i in 0..logits.len() {
        let mut p = logits.clone();
        p[i] += H;
        let up = softmax_cross_entropy(&p, &y, K).0;
        p[i] -= 2.0 * H;
        let down = softmax_cross_entropy(&p, &y, K).0;
        num[i] = (up - down) / (2.0 * H);
    }
    rel_error(&g, &num)
}

// ------------------------------------------------------------------ linkage

/// Brute-force average linkage: recomputes every cluster-pair mean from
/// the raw matrix at each step. Clusters are named by their smallest
/// member; among equal distances the smallest (lower, higher) name pair
/// merges. Returns the cluster index of each channel, clusters numbered
/// by smallest member.
pub fn oracle_average_linkage(d: &[f64], m: usize, n: usize) -> Vec<usize> {
    let mut clusters: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
    while clusters.len() > n {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in 0..clusters.len() {
                if i == j {
                    continue;
                }
                let (a, b) = (&clusters[i], &clusters[j]);
                let name = (a[0].min(b[0]), a[0].max(b[0]));
                if name.0 != a[0] {
                    continue;
                }
                let mut total = 0.0;
                for &p in a {
                    for &q in b {
                        total += d[p * m + q];
                    }
                }
                let mean = total / (a.len() * b.len()) as f64;
                let better = match best {
                    None => true,
                    Some((bd, bn, _, _)) => mean < bd || (mean == bd && name < bn),
                };
                if better {
                    best = Some((mean, name, i, j));
                }
            }
        }
        let (_, _, i, j) = best.unwrap();
        let moved = clusters[j].clone();
        clusters[i].extend(moved);
        clusters[i].sort_unstable();
        clusters.remove(j);
    }
    clusters.sort_by_key(|c| c[0]);
    let mut out = vec![0; m];
    for (ci, c) in clusters.iter().enumerate() {
        for &ch in c {
            out[ch] = ci;
        }
    }
    out
}

/// A random symmetric zero-diagonal matrix with `m <= 10`. Even seeds draw
/// entries from a quarter grid so exact ties are common.
pub fn random_distance_case(seed: u64) -> (usize, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.gen_range(2..=10);
    let mut d = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let v = if seed.is_multiple_of(2) {
                rng.gen_range(0..=4) as f64 / 4.0
            } else {
                rng.gen_range(0.0..2.0)
            };
            d[i * m + j] = v;
            d[j * m + i] = v;
        }
    }
    (m, d)
}

// -------------------------------------------------------- closed-form counts

/// Params and FLOPs of the plain model, summed layer by layer from the
/// architecture description.
pub fn plain_counts(widths: &[usize], k: usize, classes: usize, length: usize, bn: bool) -> (u64, u64) {
    let (mut params, mut flops) = (0usize, 0usize);
    let (mut c, mut l) = (2usize, length);
    for &w in widths {
        params += c * w * k + w;
        flops += 2 * c * w * k * l;
        if bn {
            params += 2 * w;
            flops += 2 * w * l;
        }
        flops += w * l; // relu
        flops += w * l; // maxpool reads its input
        l /= 2;
        c = w;
    }
    flops += c * l; // global average pool
    params += c * classes + classes;
    flops += 2 * c * classes;
    (params as u64, flops as u64)
}

/// Params and FLOPs of the residual model with per-stage widths `outer`
/// (shared by each stage's trunk) and `inner` (the first conv of each
/// block, one entry per block in order).
pub fn residual_counts(outer: &[usize], inner: &[usize], blocks: usize, k: usize, classes: usize, length: usize) -> (u64, u64) {
    let (mut params, mut flops) = (0usize, 0usize);
    let (mut c, mut l) = (2usize, length);
    let mut inner = inner.iter();
    for (s, &w) in outer.iter().enumerate() {
        if s > 0 {
            flops += c * l;
            l /= 2;
        }
        params += c * w * k + 2 * w;
        flops += 2 * c * w * k * l + 2 * w * l + w * l;
        for _ in 0..blocks {
            let v = *inner.next().unwrap();
            params += w * v * k + 2 * v + v * w * k + 2 * w;
            flops += 2 * w * v * k * l + 2 * v * l + v * l; // conv, bn, relu
            flops += 2 * v * w * k * l + 2 * w * l; // conv, bn
            flops += w * l + w * l; // add, relu
        }
        c = w;
    }
    flops += c * l;
    params += c * classes + classes;
    flops += 2 * c * classes;
    (params as u64, flops as u64)
}

/// `max(1, floor(w * tenths / 10))` in exact integer arithmetic.
pub fn kept(w: usize, tenths: usize) -> usize {
    (w * tenths / 10).max(1)
}

// --------------------------------------------------------------------- data

pub fn small_dataset(classes: Vec<Modulation>, snr_db: Vec<f64>, per_cell: usize, seed: u64) -> SignalDataset {
    generate_dataset(&GenConfig {
        classes,
        snr_db,
        per_cell,
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}
