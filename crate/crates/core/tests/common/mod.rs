#![allow(dead_code)]

use iwin::attention::Msa;
use iwin::layers::{LayerNorm, Linear, LN_EPS};
use iwin::params::ParamStore;
use iwin::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.values_mut(id) {
            *v = rng.random_range(-scale..scale);
        }
    }
}

pub fn linear(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(l.weight);
    let (fin, fout) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(x.len() / fin * fout);
    for row in x.chunks(fin) {
        for o in 0..fout {
            let mut acc = l.bias.map_or(0.0, |b| store.value(b).data()[o]);
            for (i, xi) in row.iter().enumerate() {
                acc += xi * w.at(&[i, o]);
            }
            out.push(acc);
        }
    }
    out
}

pub fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &[f64], c: usize) -> Vec<f64> {
    let (g, b) = (store.value(ln.gamma).data(), store.value(ln.beta).data());
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            out.push((row[j] - mean) / (var + LN_EPS).sqrt() * g[j] + b[j]);
        }
    }
    out
}

/// Per-head softmax self-attention over one group of tokens, as loops.
pub fn naive_msa(store: &ParamStore, msa: &Msa, x: &[f64], pos: Option<&Tensor>, valid: &[bool]) -> Vec<f64> {
    naive_attend(store, msa, x, x, pos, pos, valid, valid)
}

fn add_pos(x: &[f64], pos: Option<&Tensor>) -> Vec<f64> {
    match pos {
        Some(p) => x.iter().zip(p.data()).map(|(a, b)| a + b).collect(),
        None => x.to_vec(),
    }
}

/// Queries `xq` attending to `xkv` within one group.
#[allow(clippy::too_many_arguments)]
pub fn naive_attend(
    store: &ParamStore,
    msa: &Msa,
    xq: &[f64],
    xkv: &[f64],
    q_pos: Option<&Tensor>,
    k_pos: Option<&Tensor>,
    q_valid: &[bool],
    k_valid: &[bool],
) -> Vec<f64> {
    let c = msa.dim;
    let (lq, lk) = (xq.len() / c, xkv.len() / c);
    let q = linear(store, &msa.q, &add_pos(xq, q_pos));
    let k = linear(store, &msa.k, &add_pos(xkv, k_pos));
    let v = linear(store, &msa.v, xkv);
    let d = c / msa.heads;
    let mut mixed = vec![0.0; lq * c];
    for h in 0..msa.heads {
        for i in 0..lq {
            if !q_valid[i] {
                continue;
            }
            let scores: Vec<f64> = (0..lk)
                .map(|j| {
                    if !k_valid[j] {
                        return f64::NEG_INFINITY;
                    }
                    (0..d).map(|e| q[i * c + h * d + e] * k[j * c + h * d + e]).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = weights.iter().sum();
            for j in 0..lk {
                for e in 0..d {
                    mixed[i * c + h * d + e] += weights[j] / z * v[j * c + h * d + e];
                }
            }
        }
    }
    let mut out = linear(store, &msa.out, &mixed);
    for i in 0..lq {
        if !q_valid[i] {
            out[i * c..(i + 1) * c].fill(0.0);
        }
    }
    out
}

pub fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= tol, "element {i}: {g} vs {w}");
    }
}
