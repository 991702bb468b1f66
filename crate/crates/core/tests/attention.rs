use std::sync::Arc;

use iwin::attention::{
    complexity, formula_flops, g_msa, grid_encoding, w_msa, window_encoding, AttentionConfig, AttentionKind, IwinBlock, Msa,
    OffsetMode,
};
use iwin::params::{param_grad_check, Group, ParamStore, Session};
use iwin::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{assert_close, layer_norm, linear, naive_msa, randomize};

fn msa_fixture(dim: usize, heads: usize, seed: u64) -> (ParamStore, Msa) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let msa = Msa::new(&mut store, "m", dim, heads, Group::Transformer, &mut rng);
    randomize(&mut store, seed + 1, 0.5);
    (store, msa)
}

#[test]
fn window_attention_matches_the_loop_oracle() {
    let (c, size, groups) = (8, 3, 4);
    let (store, msa) = msa_fixture(c, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_fn([groups, size * size, c], |_| rng.random_range(-1.0..1.0));
    let valid: Vec<bool> = (0..groups * size * size).map(|i| i % 7 != 3).collect();

    let mut s = Session::inference(&store);
    let xv = s.constant(x.clone());
    let out = w_msa(&mut s, xv, Some(Arc::from(valid.clone())), size, &msa).unwrap();
    let got = s.value(out).data().to_vec();

    let pos = window_encoding(size, c).unwrap();
    let l = size * size;
    let want: Vec<f64> = (0..groups)
        .flat_map(|g| {
            naive_msa(
                &store,
                &msa,
                &x.data()[g * l * c..(g + 1) * l * c],
                Some(&pos),
                &valid[g * l..(g + 1) * l],
            )
        })
        .collect();
    assert_close(&got, &want, 1e-12);
}

#[test]
fn singleton_windows_reduce_to_value_and_output_projections() {
    let c = 8;
    let (store, msa) = msa_fixture(c, 4, 5);
    let x = Tensor::from_fn([6, 1, c], |i| (i as f64 * 0.37).sin());
    let mut s = Session::inference(&store);
    let xv = s.constant(x.clone());
    let out = w_msa(&mut s, xv, None, 1, &msa).unwrap();
    let want = linear(&store, &msa.out, &linear(&store, &msa.v, x.data()));
    assert_close(s.value(out).data(), &want, 1e-12);
}

#[test]
fn zero_queries_average_the_values() {
    let c = 8;
    let (mut store, msa) = msa_fixture(c, 4, 6);
    store.set(msa.q.weight, Tensor::zeros([c, c])).unwrap();
    store.set(msa.q.bias.unwrap(), Tensor::zeros([c])).unwrap();
    let l = 4;
    let x = Tensor::from_fn([1, l, c], |i| (i as f64 * 0.91).cos());
    let mut s = Session::inference(&store);
    let xv = s.constant(x.clone());
    let out = w_msa(&mut s, xv, None, 2, &msa).unwrap();
    let v = linear(&store, &msa.v, x.data());
    let mean: Vec<f64> = (0..c).map(|j| (0..l).map(|i| v[i * c + j]).sum::<f64>() / l as f64).collect();
    let want = linear(&store, &msa.out, &mean.repeat(l));
    assert_close(s.value(out).data(), &want, 1e-12);
}

#[test]
fn global_attention_over_one_window_equals_window_attention() {
    let (c, size) = (8, 4);
    let (store, msa) = msa_fixture(c, 4, 7);
    assert_eq!(window_encoding(size, c).unwrap(), grid_encoding(size, size, c).unwrap());
    let x = Tensor::from_fn([1, size * size, c], |i| (i as f64 * 0.13).sin());
    let mut s = Session::inference(&store);
    let xv = s.constant(x);
    let a = g_msa(&mut s, xv, (size, size), &msa).unwrap();
    let b = w_msa(&mut s, xv, None, size, &msa).unwrap();
    assert_eq!(s.value(a), s.value(b));
}

fn block_fixture(c: usize, scales: Vec<usize>, mode: OffsetMode, seed: u64) -> (ParamStore, IwinBlock) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AttentionConfig::new(c, scales).unwrap();
    let block = IwinBlock::new(&mut store, "b", &cfg, mode, &mut rng).unwrap();
    (store, block)
}

fn run_block(store: &ParamStore, block: &IwinBlock, x: &Tensor) -> Tensor {
    let mut s = Session::inference(store);
    let xv = s.constant(x.clone());
    let out = block.forward(&mut s, xv).unwrap();
    s.value(out).clone()
}

#[test]
fn zero_weight_block_is_the_identity() {
    let (mut store, block) = block_fixture(8, vec![2, 4], OffsetMode::Learned, 1);
    store.zero_all();
    let x = Tensor::from_fn([2, 8, 8, 8], |i| (i as f64 * 0.7).sin());
    assert_eq!(run_block(&store, &block, &x), x);
}

/// Regular-window block written directly from per-window loops.
fn regular_block_oracle(store: &ParamStore, block: &IwinBlock, x: &Tensor) -> Vec<f64> {
    let &[b, h, w, c] = x.shape() else { unreachable!() };
    let n = block.branches.len();
    let mut cat = vec![0.0; b * h * w * n * c];
    for (bi, br) in block.branches.iter().enumerate() {
        let s = br.size;
        let pos = window_encoding(s, c).unwrap();
        for img in 0..b {
            for wy in 0..h.div_ceil(s) {
                for wx in 0..w.div_ceil(s) {
                    let mut tokens = Vec::new();
                    let mut valid = Vec::new();
                    for dy in 0..s {
                        for dx in 0..s {
                            let (y, xx) = (wy * s + dy, wx * s + dx);
                            if y < h && xx < w {
                                tokens.extend_from_slice(&x.data()[((img * h + y) * w + xx) * c..][..c]);
                                valid.push(true);
                            } else {
                                tokens.extend(std::iter::repeat_n(0.0, c));
                                valid.push(false);
                            }
                        }
                    }
                    let normed = layer_norm(store, &br.norm, &tokens, c);
                    let att = naive_msa(store, &br.msa, &normed, Some(&pos), &valid);
                    for (slot, ok) in valid.iter().enumerate() {
                        if *ok {
                            let (y, xx) = (wy * s + slot / s, wx * s + slot % s);
                            let t = (img * h + y) * w + xx;
                            cat[t * n * c + bi * c..][..c].copy_from_slice(&att[slot * c..][..c]);
                        }
                    }
                }
            }
        }
    }
    let merged = linear(store, &block.merge, &cat);
    let y: Vec<f64> = x.data().iter().zip(&merged).map(|(a, m)| a + m).collect();
    let n2 = layer_norm(store, &block.norm2, &y, c);
    let hidden: Vec<f64> = linear(store, &block.ffn.fc1, &n2).into_iter().map(|v| v.max(0.0)).collect();
    let f = linear(store, &block.ffn.fc2, &hidden);
    y.iter().zip(&f).map(|(a, b)| a + b).collect()
}

#[test]
fn zero_offsets_match_a_regular_window_block() {
    for (h, w) in [(8, 8), (6, 7)] {
        let (mut learned_store, learned) = block_fixture(8, vec![2, 3], OffsetMode::Learned, 9);
        let (mut regular_store, regular) = block_fixture(8, vec![2, 3], OffsetMode::Regular, 9);
        randomize(&mut learned_store, 10, 0.4);
        randomize(&mut regular_store, 10, 0.4);
        for store in [&mut learned_store, &mut regular_store] {
            for br in &learned.branches {
                store.set(br.offset.weight, Tensor::zeros([3, 3, 8, 2])).unwrap();
                store.set(br.offset.bias, Tensor::zeros([2])).unwrap();
            }
        }
        let x = Tensor::from_fn([2, h, w, 8], |i| (i as f64 * 0.29).sin());
        let a = run_block(&learned_store, &learned, &x);
        let b = run_block(&regular_store, &regular, &x);
        assert_eq!(a, b, "{h}×{w}");
        assert_close(a.data(), &regular_block_oracle(&regular_store, &regular, &x), 1e-12);
    }
}

#[test]
fn regular_blocks_commute_with_window_aligned_shifts() {
    let (mut store, block) = block_fixture(8, vec![2], OffsetMode::Regular, 12);
    randomize(&mut store, 13, 0.4);
    let (h, w, c, shift) = (8, 8, 8, 2);
    let x = Tensor::from_fn([1, h, w, c], |i| (i as f64 * 0.53).cos());
    let shifted = Tensor::from_fn([1, h, w, c], |i| {
        let (y, xx, ch) = (i / (w * c), i / c % w, i % c);
        if y < shift || xx < shift {
            0.0
        } else {
            x.at(&[0, y - shift, xx - shift, ch])
        }
    });
    let a = run_block(&store, &block, &x);
    let b = run_block(&store, &block, &shifted);
    for y in 0..h - shift {
        for xx in 0..w - shift {
            for ch in 0..c {
                let (p, q) = (a.at(&[0, y, xx, ch]), b.at(&[0, y + shift, xx + shift, ch]));
                assert!((p - q).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    let (mut store, block) = block_fixture(4, vec![2, 4], OffsetMode::Learned, 14);
    randomize(&mut store, 15, 0.3);
    for br in &block.branches {
        let mut rng = ChaCha8Rng::seed_from_u64(br.size as u64);
        let wt = Tensor::from_fn([3, 3, 4, 2], |_| rng.random_range(-0.15..0.15));
        store.set(br.offset.weight, wt).unwrap();
        store
            .set(br.offset.bias, Tensor::new([2], vec![0.31, -0.27]).unwrap())
            .unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let input = store.add(
        "input",
        Tensor::from_fn([1, 8, 8, 4], |_| rng.random_range(-1.0..1.0)),
        Group::Transformer,
        false,
    );
    let weights = Tensor::from_fn([1, 8, 8, 4], |i| 0.5 + 0.01 * (i % 13) as f64);
    let mut ids = vec![input, block.merge.weight, block.ffn.fc1.weight];
    for br in &block.branches {
        ids.extend([
            br.offset.weight,
            br.offset.bias,
            br.msa.q.weight,
            br.msa.v.weight,
            br.norm.gamma,
        ]);
    }
    let err = param_grad_check(
        &mut store,
        &ids,
        |s| {
            let x = s.p(input);
            let y = block.forward(s, x)?;
            let w = s.constant(weights.clone());
            let p = s.mul(y, w)?;
            Ok(s.sum(p))
        },
        1e-6,
        24,
    )
    .unwrap();
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn complexity_hand_values() {
    assert_eq!(formula_flops(AttentionKind::Global, 8, 8, 4, 0), 36864);
    assert_eq!(formula_flops(AttentionKind::Window, 8, 8, 4, 2), 6144);
    assert_eq!(
        formula_flops(AttentionKind::Window, 8, 8, 4, 8),
        formula_flops(AttentionKind::Global, 8, 8, 4, 0)
    );
}

fn fit_exponent(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

#[test]
fn measured_cost_scales_as_the_formula_predicts() {
    // each point doubles H·W
    let sweep = [(8usize, 8usize), (8, 16), (16, 16), (16, 32)];
    let spread = |ratios: &[f64]| {
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / ratios.len() as f64;
        var.sqrt() / mean
    };
    for kind in [AttentionKind::Global, AttentionKind::Window] {
        let reports: Vec<_> = sweep.iter().map(|&(h, w)| complexity(kind, h, w, 8, 4).unwrap()).collect();
        let ratios: Vec<f64> = reports
            .iter()
            .map(|r| r.measured_macs as f64 / r.formula_flops as f64)
            .collect();
        assert!(spread(&ratios) < 0.1, "{kind:?} ratios {ratios:?}");
        let attention: Vec<(f64, f64)> = reports
            .iter()
            .map(|r| ((r.h * r.w) as f64, r.attention_macs as f64))
            .collect();
        let total: Vec<(f64, f64)> = reports.iter().map(|r| ((r.h * r.w) as f64, r.measured_macs as f64)).collect();
        match kind {
            AttentionKind::Global => {
                let e = fit_exponent(&attention);
                assert!(e >= 1.8, "global attention exponent {e}");
                for pair in reports.windows(2) {
                    assert_eq!(pair[1].attention_macs, 4 * pair[0].attention_macs);
                }
            }
            AttentionKind::Window => {
                let e = fit_exponent(&total);
                assert!((e - 1.0).abs() <= 0.02, "window exponent {e}");
                for pair in reports.windows(2) {
                    assert_eq!(pair[1].formula_flops, 2 * pair[0].formula_flops);
                }
            }
        }
    }
}

#[test]
fn padded_windows_cost_more_than_the_formula() {
    let r = complexity(AttentionKind::Window, 9, 11, 8, 2).unwrap();
    assert!(r.measured_macs > r.formula_flops);
    assert!(complexity(AttentionKind::Window, 8, 8, 8, 0).is_err());
}
