use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Modulation;

pub const SAMPLES_PER_SYMBOL: usize = 8;
pub const ROLL_OFF: f64 = 0.35;
/// Filter span in symbols.
pub const SPAN: usize = 8;
const GFSK_BT: f64 = 0.35;
const GFSK_INDEX: f64 = 0.5;

/// Unit-energy root-raised-cosine taps, `span * sps + 1` long.
pub fn rrc_taps(beta: f64, sps: usize, span: usize) -> Vec<f64> {
    let n = span * sps;
    let half = n as f64 / 2.0;
    let mut h: Vec<f64> = (0..=n)
        .map(|i| {
            let t = (i as f64 - half) / sps as f64;
            if t.abs() < 1e-12 {
                1.0 - beta + 4.0 * beta / PI
            } else if ((4.0 * beta * t).abs() - 1.0).abs() < 1e-9 {
                let a = PI / (4.0 * beta);
                beta / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos())
            } else {
                let num = (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
                num / (PI * t * (1.0 - (4.0 * beta * t).powi(2)))
            }
        })
        .collect();
    let energy: f64 = h.iter().map(|v| v * v).sum();
    let s = energy.sqrt();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

fn gaussian_taps(bt: f64, sps: usize, span: usize) -> Vec<f64> {
    let n = span * sps;
    let half = n as f64 / 2.0;
    let sigma = (2f64.ln()).sqrt() / (2.0 * PI * bt);
    let mut h: Vec<f64> = (0..=n)
        .map(|i| {
            let t = (i as f64 - half) / sps as f64;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

fn symbol(m: Modulation, rng: &mut ChaCha8Rng) -> (f64, f64) {
    match m {
        Modulation::Bpsk => (if rng.gen::<bool>() { 1.0 } else { -1.0 }, 0.0),
        Modulation::Qpsk | Modulation::Psk8 => {
            let order = if m == Modulation::Qpsk { 4 } else { 8 };
            let k = rng.gen_range(0..order) as f64;
            let offset = if m == Modulation::Qpsk { PI / 4.0 } else { 0.0 };
            let phi = 2.0 * PI * k / order as f64 + offset;
            (phi.cos(), phi.sin())
        }
        Modulation::Qam16 => {
            let lv = [-3.0, -1.0, 1.0, 3.0];
            (lv[rng.gen_range(0..4)], lv[rng.gen_range(0..4)])
        }
        Modulation::Ask4 => ([-3.0, -1.0, 1.0, 3.0][rng.gen_range(0..4)], 0.0),
        Modulation::Gfsk => (if rng.gen::<bool>() { 1.0 } else { -1.0 }, 0.0),
    }
}

fn filter(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len() + h.len() - 1];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (j, &hj) in h.iter().enumerate() {
            y[i + j] += xi * hj;
        }
    }
    y
}

/// Clean baseband waveform of `length` complex samples, before power
/// normalization. Symbol centers sit on multiples of the symbol period
/// when `impairments` is off.
pub fn baseband(m: Modulation, length: usize, impairments: bool, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let sps = SAMPLES_PER_SYMBOL;
    let n_sym = length / sps + 2 * SPAN + 2;
    let syms: Vec<(f64, f64)> = (0..n_sym).map(|_| symbol(m, rng)).collect();
    let timing = if impairments { rng.gen_range(0..sps) } else { 0 };
    let phase = if impairments { rng.gen_range(0.0..2.0 * PI) } else { 0.0 };
    let start = SPAN * sps + timing;

    let (i, q) = if m == Modulation::Gfsk {
        let mut nrz = vec![0.0; n_sym * sps];
        for (k, s) in syms.iter().enumerate() {
            nrz[k * sps..(k + 1) * sps].iter_mut().for_each(|v| *v = s.0);
        }
        let freq = filter(&nrz, &gaussian_taps(GFSK_BT, sps, 4));
        let mut acc = 0.0;
        let mut i = Vec::with_capacity(freq.len());
        let mut q = Vec::with_capacity(freq.len());
        for f in freq {
            acc += PI * GFSK_INDEX * f / sps as f64;
            i.push(acc.cos());
            q.push(acc.sin());
        }
        (i, q)
    } else {
        let h = rrc_taps(ROLL_OFF, sps, SPAN);
        let mut ui = vec![0.0; n_sym * sps];
        let mut uq = vec![0.0; n_sym * sps];
        for (k, s) in syms.iter().enumerate() {
            ui[k * sps] = s.0;
            uq[k * sps] = s.1;
        }
        (filter(&ui, &h), filter(&uq, &h))
    };

    let (c, s) = (phase.cos(), phase.sin());
    let mut out_i = Vec::with_capacity(length);
    let mut out_q = Vec::with_capacity(length);
    for n in start..start + length {
        out_i.push(i[n] * c - q[n] * s);
        out_q.push(i[n] * s + q[n] * c);
    }
    (out_i, out_q)
}

/// Scales to unit average power; an all-zero waveform is left as is.
pub fn normalize_power(i: &mut [f64], q: &mut [f64]) {
    let p: f64 = i.iter().zip(q.iter()).map(|(a, b)| a * a + b * b).sum::<f64>() / i.len() as f64;
    if p > 0.0 {
        let s = p.sqrt();
        i.iter_mut().chain(q.iter_mut()).for_each(|v| *v /= s);
    }
}

/// Adds complex white Gaussian noise of total power `10^(-snr/10)`.
pub fn add_awgn(i: &mut [f64], q: &mut [f64], snr_db: f64, rng: &mut ChaCha8Rng) {
    let sigma = (10f64.powf(-snr_db / 10.0) / 2.0).sqrt();
    for (a, b) in i.iter_mut().zip(q.iter_mut()) {
        let ni: f64 = StandardNormal.sample(rng);
        let nq: f64 = StandardNormal.sample(rng);
        *a += sigma * ni;
        *b += sigma * nq;
    }
}
