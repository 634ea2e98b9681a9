use super::{LayerKind, ModelGraph, NodeId};
use crate::error::{FcosError, Result};
use crate::tensor::kernels::{self, BnCache, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// A node output laid out `[batch, channels, length]` (`length == 1` once flat).
#[derive(Debug, Clone, PartialEq)]
pub struct Activation<T> {
    pub data: Vec<T>,
    pub batch: usize,
    pub channels: usize,
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Eval,
    Train,
}

enum Cache<T> {
    None,
    Conv { col: Vec<T>, geom: ConvGeom },
    Bn(BnCache<T>),
    Pool(Vec<u32>),
}

struct Pass<T> {
    acts: Vec<Option<Activation<T>>>,
    caches: Vec<Cache<T>>,
    bn_stats: Vec<(usize, Vec<T>, Vec<T>)>,
}

/// Recorded forward state between a training forward and its backward.
struct Tape<T> {
    node_ids: Vec<NodeId>,
    acts: Vec<Option<Activation<T>>>,
    caches: Vec<Cache<T>>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> ModelGraph<T> {
    fn run(&self, x: &Tensor<T>, mode: Mode, keep: &dyn Fn(usize) -> bool) -> Result<Pass<T>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.arch.input_channels {
            return Err(FcosError::shape(
                "input0",
                format!(
                    "batch shape {shape:?} does not match [B, {}, L]",
                    self.arch.input_channels
                ),
            ));
        }
        let batch = shape[0];
        let n = self.nodes.len();
        let mut acts: Vec<Option<Activation<T>>> = (0..n).map(|_| None).collect();
        let mut caches: Vec<Cache<T>> = (0..n).map(|_| Cache::None).collect();
        let mut bn_stats = Vec::new();
        // Number of pending consumers per node; outputs are dropped when no
        // longer needed unless `keep` asks for them.
        let mut pending: Vec<usize> = vec![0; n];
        let idx: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .map(|node| {
                node.inputs
                    .iter()
                    .map(|i| self.index_of(*i).expect("validated"))
                    .collect()
            })
            .collect();
        for ins in &idx {
            for &i in ins {
                pending[i] += 1;
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let name = || node.name();
            let input = |k: usize| -> Result<&Activation<T>> {
                acts[idx[i][k]]
                    .as_ref()
                    .ok_or_else(|| FcosError::Usage(format!("{} input not computed", name())))
            };
            let out = match &node.kind {
                LayerKind::Input { .. } => Activation {
                    data: x.data().to_vec(),
                    batch,
                    channels: shape[1],
                    length: shape[2],
                },
                LayerKind::Conv1d {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    pad_left,
                    pad_right,
                    ..
                } => {
                    let a = input(0)?;
                    if a.channels != *c_in {
                        return Err(FcosError::shape(
                            name(),
                            format!("expects {c_in} channels, got {}", a.channels),
                        ));
                    }
                    let geom = ConvGeom {
                        batch,
                        c_in: *c_in,
                        c_out: *c_out,
                        l_in: a.length,
                        kernel: *kernel,
                        stride: *stride,
                        pad_left: *pad_left,
                        pad_right: *pad_right,
                    };
                    let l_out = geom.l_out();
                    if l_out == 0 {
                        return Err(FcosError::shape(name(), "input shorter than kernel"));
                    }
                    let bias = node.params.get("bias").map(|b| b.data());
                    let (y, col) =
                        kernels::conv1d_forward(&a.data, node.param("weight").data(), bias, &geom);
                    if mode == Mode::Train {
                        caches[i] = Cache::Conv { col, geom };
                    }
                    Activation {
                        data: y,
                        batch,
                        channels: *c_out,
                        length: l_out,
                    }
                }
                LayerKind::BatchNorm { channels, eps, .. } => {
                    let a = input(0)?;
                    if a.channels != *channels {
                        return Err(FcosError::shape(name(), "channel count mismatch"));
                    }
                    let gamma = node.param("gamma").data();
                    let beta = node.param("beta").data();
                    let eps = T::from_f64(*eps);
                    let data = match mode {
                        Mode::Train => {
                            let (y, cache, mean, var) = kernels::batchnorm_train(
                                &a.data, gamma, beta, batch, a.channels, a.length, eps,
                            );
                            caches[i] = Cache::Bn(cache);
                            bn_stats.push((i, mean, var));
                            y
                        }
                        Mode::Eval => kernels::batchnorm_eval(
                            &a.data,
                            gamma,
                            beta,
                            node.param("running_mean").data(),
                            node.param("running_var").data(),
                            batch,
                            a.channels,
                            a.length,
                            eps,
                        ),
                    };
                    Activation { data, ..*a }
                }
                LayerKind::Relu => {
                    let a = input(0)?;
                    Activation {
                        data: kernels::relu_forward(&a.data),
                        ..*a
                    }
                }
                LayerKind::MaxPool { window } => {
                    let a = input(0)?;
                    if a.length < *window {
                        return Err(FcosError::shape(name(), "input shorter than pool window"));
                    }
                    let (y, arg) =
                        kernels::maxpool_forward(&a.data, a.batch * a.channels, a.length, *window);
                    if mode == Mode::Train {
                        caches[i] = Cache::Pool(arg);
                    }
                    Activation {
                        data: y,
                        length: a.length / window,
                        ..*a
                    }
                }
                LayerKind::GlobalAvgPool => {
                    let a = input(0)?;
                    Activation {
                        data: kernels::gap_forward(&a.data, a.batch * a.channels, a.length),
                        length: 1,
                        ..*a
                    }
                }
                LayerKind::Dense { d_in, d_out, .. } => {
                    let a = input(0)?;
                    if a.channels * a.length != *d_in {
                        return Err(FcosError::shape(
                            name(),
                            format!("expects {d_in} features, got {}", a.channels * a.length),
                        ));
                    }
                    let bias = node.params.get("bias").map(|b| b.data());
                    Activation {
                        data: kernels::dense_forward(
                            &a.data,
                            node.param("weight").data(),
                            bias,
                            batch,
                            *d_in,
                            *d_out,
                        ),
                        batch,
                        channels: *d_out,
                        length: 1,
                    }
                }
                LayerKind::Add => {
                    let (a, b) = (input(0)?, input(1)?);
                    if (a.channels, a.length) != (b.channels, b.length) {
                        return Err(FcosError::shape(
                            name(),
                            format!(
                                "residual operands [{}, {}] vs [{}, {}]",
                                a.channels, a.length, b.channels, b.length
                            ),
                        ));
                    }
                    Activation {
                        data: kernels::add_forward(&a.data, &b.data),
                        ..*a
                    }
                }
            };
            if !out.data.iter().all(|v| v.is_finite()) {
                return Err(FcosError::NumericFailure {
                    layer: format!("{} (index {i})", node.name()),
                    stage: "forward",
                });
            }
            acts[i] = Some(out);
            for &j in &idx[i] {
                pending[j] -= 1;
                if pending[j] == 0 && !keep(j) {
                    acts[j] = None;
                }
            }
        }
        Ok(Pass {
            acts,
            caches,
            bn_stats,
        })
    }

    /// Inference forward using running batchnorm statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let last = self.nodes.len() - 1;
        let mut pass = self.run(x, Mode::Eval, &|_| false)?;
        let out = pass.acts[last].take().expect("output computed");
        Tensor::new(vec![out.batch, out.channels], out.data)
    }

    /// Inference forward that also returns the outputs of `points`.
    pub fn forward_capture(
        &self,
        x: &Tensor<T>,
        points: &[NodeId],
    ) -> Result<(Tensor<T>, Vec<Activation<T>>)> {
        let wanted: Vec<usize> = points
            .iter()
            .map(|p| {
                self.index_of(*p)
                    .ok_or_else(|| FcosError::Usage(format!("probe point {p} is not in the graph")))
            })
            .collect::<Result<_>>()?;
        let last = self.nodes.len() - 1;
        let mut pass = self.run(x, Mode::Eval, &|j| wanted.contains(&j))?;
        let feats = wanted
            .iter()
            .map(|&j| pass.acts[j].clone().expect("kept"))
            .collect();
        let out = pass.acts[last].take().expect("output computed");
        Ok((Tensor::new(vec![out.batch, out.channels], out.data)?, feats))
    }
}

/// Training-mode executor: a forward records a tape, a backward consumes it.
pub struct TrainSession<T: Scalar> {
    tape: Option<Tape<T>>,
}

impl<T: Scalar> Default for TrainSession<T> {
    fn default() -> Self {
        TrainSession { tape: None }
    }
}

impl<T: Scalar> TrainSession<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Batch-statistics forward; updates batchnorm running statistics.
    pub fn forward(&mut self, model: &mut ModelGraph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pass = model.run(x, Mode::Train, &|_| true)?;
        for (i, mean, var) in &pass.bn_stats {
            let node = &mut model.nodes[*i];
            let momentum = match node.kind {
                LayerKind::BatchNorm { momentum, .. } => T::from_f64(momentum),
                _ => unreachable!("bn stats only come from batchnorm nodes"),
            };
            let keep = T::one() - momentum;
            for (r, &m) in node.param_mut("running_mean").data_mut().iter_mut().zip(mean) {
                *r = keep * *r + momentum * m;
            }
            for (r, &v) in node.param_mut("running_var").data_mut().iter_mut().zip(var) {
                *r = keep * *r + momentum * v;
            }
        }
        let last = pass.acts.len() - 1;
        let out = pass.acts[last].as_ref().expect("output computed");
        let logits = Tensor::new(vec![out.batch, out.channels], out.data.clone())?;
        self.tape = Some(Tape {
            node_ids: model.nodes.iter().map(|n| n.id).collect(),
            acts: pass.acts,
            caches: pass.caches,
            input_shape: x.shape().to_vec(),
        });
        Ok(logits)
    }

    /// Backpropagates `dlogits`, accumulating gradients into every
    /// non-frozen parameter, and returns the gradient w.r.t. the input batch.
    pub fn backward(&mut self, model: &mut ModelGraph<T>, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| FcosError::Usage("backward called without a training forward".into()))?;
        let ids: Vec<NodeId> = model.nodes.iter().map(|n| n.id).collect();
        if ids != tape.node_ids {
            return Err(FcosError::Usage(
                "graph structure changed between forward and backward".into(),
            ));
        }
        let n = model.nodes.len();
        let out = tape.acts[n - 1].as_ref().expect("output recorded");
        if dlogits.len() != out.data.len() {
            return Err(FcosError::shape(
                model.nodes[n - 1].name(),
                format!("dlogits has {} values, logits {}", dlogits.len(), out.data.len()),
            ));
        }
        let idx: Vec<Vec<usize>> = model
            .nodes
            .iter()
            .map(|node| {
                node.inputs
                    .iter()
                    .map(|i| model.index_of(*i).expect("validated"))
                    .collect()
            })
            .collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[n - 1] = Some(dlogits.data().to_vec());
        let add_into = |grads: &mut Vec<Option<Vec<T>>>, j: usize, g: Vec<T>| match &mut grads[j] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &v)| *b += v),
            slot @ None => *slot = Some(g),
        };
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &mut model.nodes[i];
            let frozen = node.frozen;
            let act_in = |k: usize| tape.acts[idx[i][k]].as_ref().expect("recorded");
            match &node.kind {
                LayerKind::Input { .. } => {
                    grads[i] = Some(g);
                }
                LayerKind::Conv1d { .. } => {
                    let Cache::Conv { col, geom } = &tape.caches[i] else {
                        unreachable!("conv cache recorded")
                    };
                    let (dx, dw, db) =
                        kernels::conv1d_backward(&g, col, node.param("weight").data(), geom, true);
                    if !frozen {
                        node.param_mut("weight").accumulate_grad(&dw);
                        if let Some(b) = node.params.get_mut("bias") {
                            b.accumulate_grad(&db);
                        }
                    }
                    add_into(&mut grads, idx[i][0], dx.expect("requested"));
                }
                LayerKind::BatchNorm { channels, .. } => {
                    let Cache::Bn(cache) = &tape.caches[i] else {
                        unreachable!("bn cache recorded")
                    };
                    let a = act_in(0);
                    let (dx, dgamma, dbeta) = kernels::batchnorm_backward(
                        &g,
                        cache,
                        node.param("gamma").data(),
                        a.batch,
                        *channels,
                        a.length,
                    );
                    if !frozen {
                        node.param_mut("gamma").accumulate_grad(&dgamma);
                        node.param_mut("beta").accumulate_grad(&dbeta);
                    }
                    add_into(&mut grads, idx[i][0], dx);
                }
                LayerKind::Relu => {
                    let y = tape.acts[i].as_ref().expect("recorded");
                    add_into(&mut grads, idx[i][0], kernels::relu_backward(&g, &y.data));
                }
                LayerKind::MaxPool { .. } => {
                    let Cache::Pool(arg) = &tape.caches[i] else {
                        unreachable!("pool cache recorded")
                    };
                    let len = act_in(0).data.len();
                    add_into(&mut grads, idx[i][0], kernels::maxpool_backward(&g, arg, len));
                }
                LayerKind::GlobalAvgPool => {
                    let a = act_in(0);
                    let dx = kernels::gap_backward(&g, a.batch * a.channels, a.length);
                    add_into(&mut grads, idx[i][0], dx);
                }
                LayerKind::Dense { d_in, d_out, .. } => {
                    let a = act_in(0);
                    let (dx, dw, db) = kernels::dense_backward(
                        &g,
                        &a.data,
                        node.param("weight").data(),
                        a.batch,
                        *d_in,
                        *d_out,
                    );
                    if !frozen {
                        node.param_mut("weight").accumulate_grad(&dw);
                        if let Some(b) = node.params.get_mut("bias") {
                            b.accumulate_grad(&db);
                        }
                    }
                    add_into(&mut grads, idx[i][0], dx);
                }
                LayerKind::Add => {
                    add_into(&mut grads, idx[i][1], g.clone());
                    add_into(&mut grads, idx[i][0], g);
                }
            }
        }
        for node in &model.nodes {
            for (k, t) in &node.params {
                if let Some(g) = t.grad() {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(FcosError::NumericFailure {
                            layer: format!("{}.{k}", node.name()),
                            stage: "backward",
                        });
                    }
                }
            }
        }
        let dx = grads[0].take().unwrap_or_else(|| {
            vec![T::zero(); tape.input_shape.iter().product()]
        });
        Tensor::new(tape.input_shape, dx)
    }
}
