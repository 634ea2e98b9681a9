//! Forward and backward kernels over flat row-major buffers.
//!
//! Activations are laid out `[batch, channels, length]`. Every reduction runs
//! in a fixed sequential order so results do not depend on worker count.

use super::Scalar;

/// Geometry of a 1D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub l_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    pub fn l_out(&self) -> usize {
        conv_out_len(self.l_in, self.kernel, self.stride, self.pad_left, self.pad_right)
    }
}

pub fn conv_out_len(l_in: usize, kernel: usize, stride: usize, pad_l: usize, pad_r: usize) -> usize {
    let padded = l_in + pad_l + pad_r;
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

/// Unfolds `x` into a `[c_in*kernel, batch*l_out]` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let l_out = g.l_out();
    let n = g.batch * l_out;
    let mut col = vec![T::zero(); g.c_in * g.kernel * n];
    for ci in 0..g.c_in {
        for kk in 0..g.kernel {
            let row = &mut col[(ci * g.kernel + kk) * n..(ci * g.kernel + kk + 1) * n];
            for b in 0..g.batch {
                let src = &x[(b * g.c_in + ci) * g.l_in..(b * g.c_in + ci + 1) * g.l_in];
                let dst = &mut row[b * l_out..(b + 1) * l_out];
                for (t, d) in dst.iter_mut().enumerate() {
                    let pos = (t * g.stride + kk) as isize - g.pad_left as isize;
                    if pos >= 0 && (pos as usize) < g.l_in {
                        *d = src[pos as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<T: Scalar>(dcol: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l_out = g.l_out();
    let n = g.batch * l_out;
    for ci in 0..g.c_in {
        for kk in 0..g.kernel {
            let row = &dcol[(ci * g.kernel + kk) * n..(ci * g.kernel + kk + 1) * n];
            for b in 0..g.batch {
                let dst = &mut dx[(b * g.c_in + ci) * g.l_in..(b * g.c_in + ci + 1) * g.l_in];
                let src = &row[b * l_out..(b + 1) * l_out];
                for (t, &v) in src.iter().enumerate() {
                    let pos = (t * g.stride + kk) as isize - g.pad_left as isize;
                    if pos >= 0 && (pos as usize) < g.l_in {
                        dst[pos as usize] += v;
                    }
                }
            }
        }
    }
}

/// Returns `(y, col)`; `col` is kept for the backward pass.
pub fn conv1d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let l_out = g.l_out();
    let n = g.batch * l_out;
    let ck = g.c_in * g.kernel;
    let col = im2col(x, g);
    let mut out = vec![T::zero(); g.c_out * n];
    T::gemm(
        g.c_out, ck, n, T::one(), weight, ck as isize, 1, &col, n as isize, 1, T::zero(), &mut out,
        n as isize, 1,
    );
    let mut y = vec![T::zero(); g.batch * g.c_out * l_out];
    for co in 0..g.c_out {
        let bv = bias.map_or(T::zero(), |b| b[co]);
        for b in 0..g.batch {
            let src = &out[co * n + b * l_out..co * n + (b + 1) * l_out];
            let dst = &mut y[(b * g.c_out + co) * l_out..(b * g.c_out + co + 1) * l_out];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    (y, col)
}

/// Gradients of a convolution: `(dx, dweight, dbias)`.
pub fn conv1d_backward<T: Scalar>(
    dy: &[T],
    col: &[T],
    weight: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let l_out = g.l_out();
    let n = g.batch * l_out;
    let ck = g.c_in * g.kernel;
    let mut dmat = vec![T::zero(); g.c_out * n];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let src = &dy[(b * g.c_out + co) * l_out..(b * g.c_out + co + 1) * l_out];
            dmat[co * n + b * l_out..co * n + (b + 1) * l_out].copy_from_slice(src);
        }
    }
    let mut dbias = vec![T::zero(); g.c_out];
    for (co, db) in dbias.iter_mut().enumerate() {
        let mut acc = T::zero();
        for &v in &dmat[co * n..(co + 1) * n] {
            acc += v;
        }
        *db = acc;
    }
    let mut dw = vec![T::zero(); g.c_out * ck];
    T::gemm(
        g.c_out, n, ck, T::one(), &dmat, n as isize, 1, col, 1, n as isize, T::zero(), &mut dw,
        ck as isize, 1,
    );
    let dx = need_dx.then(|| {
        let mut dcol = vec![T::zero(); ck * n];
        T::gemm(
            ck, g.c_out, n, T::one(), weight, 1, ck as isize, &dmat, n as isize, 1, T::zero(),
            &mut dcol, n as isize, 1,
        );
        let mut dx = vec![T::zero(); g.batch * g.c_in * g.l_in];
        col2im_add(&dcol, g, &mut dx);
        dx
    });
    (dx, dw, dbias)
}

/// `y[b, o] = sum_i x[b, i] * w[o, i] + bias[o]`.
pub fn dense_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); batch * d_out];
    if let Some(b) = bias {
        for row in y.chunks_mut(d_out) {
            row.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        batch, d_in, d_out, T::one(), x, d_in as isize, 1, weight, 1, d_in as isize, beta, &mut y,
        d_out as isize, 1,
    );
    y
}

/// Gradients of a dense layer: `(dx, dweight, dbias)`.
pub fn dense_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    weight: &[T],
    batch: usize,
    d_in: usize,
    d_out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); d_out * d_in];
    T::gemm(
        d_out, batch, d_in, T::one(), dy, 1, d_out as isize, x, d_in as isize, 1, T::zero(),
        &mut dw, d_in as isize, 1,
    );
    let mut db = vec![T::zero(); d_out];
    for row in dy.chunks(d_out) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let mut dx = vec![T::zero(); batch * d_in];
    T::gemm(
        batch, d_out, d_in, T::one(), dy, d_out as isize, 1, weight, d_in as isize, 1, T::zero(),
        &mut dx, d_in as isize, 1,
    );
    (dx, dw, db)
}

/// Per-channel statistics cached by a training-mode batchnorm pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Batch-statistics normalization. Returns `(y, cache, batch_mean, batch_var_unbiased)`.
#[allow(clippy::type_complexity)]
pub fn batchnorm_train<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    len: usize,
    eps: T,
) -> (Vec<T>, BnCache<T>, Vec<T>, Vec<T>) {
    let count = batch * len;
    let cnt = T::from_f64(count as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut s = T::zero();
        for b in 0..batch {
            for &v in &x[(b * channels + c) * len..(b * channels + c + 1) * len] {
                s += v;
            }
        }
        let m = s / cnt;
        let mut q = T::zero();
        for b in 0..batch {
            for &v in &x[(b * channels + c) * len..(b * channels + c + 1) * len] {
                q += (v - m) * (v - m);
            }
        }
        mean[c] = m;
        var[c] = q / cnt;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            for t in 0..len {
                let h = (x[off + t] - mean[c]) * inv_std[c];
                x_hat[off + t] = h;
                y[off + t] = gamma[c] * h + beta[c];
            }
        }
    }
    let unbiased = if count > 1 {
        var.iter()
            .map(|&v| v * cnt / T::from_f64((count - 1) as f64))
            .collect()
    } else {
        var.clone()
    };
    (y, BnCache { x_hat, inv_std }, mean, unbiased)
}

pub fn batchnorm_eval<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    batch: usize,
    channels: usize,
    len: usize,
    eps: T,
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for c in 0..channels {
        let scale = gamma[c] / (var[c] + eps).sqrt();
        let shift = beta[c] - mean[c] * scale;
        for b in 0..batch {
            let off = (b * channels + c) * len;
            for t in 0..len {
                y[off + t] = x[off + t] * scale + shift;
            }
        }
    }
    y
}

/// Gradients of training-mode batchnorm: `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    cache: &BnCache<T>,
    gamma: &[T],
    batch: usize,
    channels: usize,
    len: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cnt = T::from_f64((batch * len) as f64);
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    let mut dx = vec![T::zero(); dy.len()];
    for c in 0..channels {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for b in 0..batch {
            let off = (b * channels + c) * len;
            for t in 0..len {
                sum_dy += dy[off + t];
                sum_dy_xh += dy[off + t] * cache.x_hat[off + t];
            }
        }
        dgamma[c] = sum_dy_xh;
        dbeta[c] = sum_dy;
        let k = gamma[c] * cache.inv_std[c] / cnt;
        for b in 0..batch {
            let off = (b * channels + c) * len;
            for t in 0..len {
                dx[off + t] = k * (cnt * dy[off + t] - sum_dy - cache.x_hat[off + t] * sum_dy_xh);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Uses the forward output as the mask.
pub fn relu_backward<T: Scalar>(dy: &[T], y: &[T]) -> Vec<T> {
    dy.iter()
        .zip(y)
        .map(|(&d, &o)| if o > T::zero() { d } else { T::zero() })
        .collect()
}

/// Non-overlapping max pooling; returns `(y, argmax)` with argmax as input offsets.
pub fn maxpool_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    l_in: usize,
    window: usize,
) -> (Vec<T>, Vec<u32>) {
    let l_out = l_in / window;
    let mut y = Vec::with_capacity(rows * l_out);
    let mut arg = Vec::with_capacity(rows * l_out);
    for r in 0..rows {
        let src = &x[r * l_in..(r + 1) * l_in];
        for t in 0..l_out {
            let mut best = t * window;
            for j in t * window + 1..(t + 1) * window {
                if src[j] > src[best] {
                    best = j;
                }
            }
            y.push(src[best]);
            arg.push((r * l_in + best) as u32);
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Scalar>(dy: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&d, &a) in dy.iter().zip(arg) {
        dx[a as usize] += d;
    }
    dx
}

/// Mean over the last axis: `[rows, len] -> [rows]`.
pub fn gap_forward<T: Scalar>(x: &[T], rows: usize, len: usize) -> Vec<T> {
    let inv = T::one() / T::from_f64(len as f64);
    (0..rows)
        .map(|r| {
            let mut s = T::zero();
            for &v in &x[r * len..(r + 1) * len] {
                s += v;
            }
            s * inv
        })
        .collect()
}

pub fn gap_backward<T: Scalar>(dy: &[T], rows: usize, len: usize) -> Vec<T> {
    let inv = T::one() / T::from_f64(len as f64);
    let mut dx = Vec::with_capacity(rows * len);
    for &d in dy.iter().take(rows) {
        dx.extend(std::iter::repeat_n(d * inv, len));
    }
    dx
}

pub fn add_forward<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// Mean softmax cross-entropy over the batch. Returns `(loss, dlogits)`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    classes: usize,
) -> (T, Vec<T>) {
    let batch = labels.len();
    let inv_b = T::one() / T::from_f64(batch as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &v in row {
            z += (v - max).exp();
        }
        let log_z = z.ln() + max;
        loss += log_z - row[label];
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (k, gk) in g.iter_mut().enumerate() {
            let p = (row[k] - log_z).exp();
            let target = if k == label { T::one() } else { T::zero() };
            *gk = (p - target) * inv_b;
        }
    }
    (loss * inv_b, grad)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
