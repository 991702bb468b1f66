//! One PASS/FAIL line per acceptance criterion.

use std::io::Write;
use std::time::{Duration, Instant};

use iwin::agglomerate::{agglomerate, norm_window};
use iwin::attention::{complexity, formula_flops, AttentionConfig, AttentionKind, IwinBlock, OffsetMode};
use iwin::harness::config::RunConfig;
use iwin::harness::eval::{evaluate, Setting};
use iwin::harness::train::{self, Split};
use iwin::harness::viz::{stem_to_image, viz_windows};
use iwin::matching::{
    giou_xyxy, hungarian, set_loss, set_loss_graph, CostMatrix, GroundTruthInstance, HoiPrediction, LossWeights,
};
use iwin::model::{Decoder, DecoderKind, HeadOutputs, Heads, Model, ModelConfig, Stem};
use iwin::params::{param_grad_check, Group, ParamStore, Session};
use iwin::sampler::{bilinear_gather, bilinear_sample, taps, SamplePoint};
use iwin::windowing::{gather, gather_windows, partition, OffsetField, WindowGeometry};
use iwin::{FeatureMap, Graph, Tensor};
use numcore::{grad_check_many, GradCheckOptions};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::randomize;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> Outcome {
    if ok {
        Ok(msg.into())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64, range: f64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(-range..range))
}

fn contract(e: iwin::Error) -> numcore::Error {
    numcore::Error::Contract(e.to_string())
}

fn zero_offset_equivalence() -> Outcome {
    let start = Instant::now();
    for (h, w, s) in [(8, 8, 2), (8, 8, 3), (5, 7, 2), (6, 6, 4)] {
        let mut r = rng((h * w * s) as u64);
        let z = FeatureMap::from_fn(4, h, w, |_, _, _| r.random_range(-1.0..1.0));
        let irregular = partition(&z, Some(&OffsetField::zeros(h, w)), s).map_err(|e| e.to_string())?;
        let regular = partition(&z, None, s).map_err(|e| e.to_string())?;
        if irregular != regular || gather_windows(&z, &irregular).ok() != gather_windows(&z, &regular).ok() {
            return Err(format!("partition differs on {h}×{w}, S={s}"));
        }
        // cells copied straight out of the map, zeros past the edge
        let mut want = Vec::new();
        for wy in 0..h.div_ceil(s) {
            for wx in 0..w.div_ceil(s) {
                for dy in 0..s {
                    for dx in 0..s {
                        let (y, x) = (wy * s + dy, wx * s + dx);
                        if y < h && x < w {
                            want.extend_from_slice(z.token(y, x));
                        } else {
                            want.extend([0.0; 4]);
                        }
                    }
                }
            }
        }
        let geom = WindowGeometry::new(h, w, s).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let zv = g.constant(z.to_batch());
        let off = g.constant(Tensor::zeros([1, h, w, 2]));
        let got = gather(&mut g, zv, Some(off), &geom).map_err(|e| e.to_string())?;
        if g.value(got).data() != &want[..] {
            return Err(format!("gather differs on {h}×{w}, S={s}"));
        }
    }
    for (h, w) in [(8, 8), (6, 7)] {
        let mut outs = Vec::new();
        for mode in [OffsetMode::Learned, OffsetMode::Regular] {
            let mut store = ParamStore::new();
            let cfg = AttentionConfig::new(8, vec![2, 3]).map_err(|e| e.to_string())?;
            let block = IwinBlock::new(&mut store, "b", &cfg, mode, &mut rng(9)).map_err(|e| e.to_string())?;
            randomize(&mut store, 10, 0.4);
            for br in &block.branches {
                store.set(br.offset.weight, Tensor::zeros([3, 3, 8, 2])).unwrap();
                store.set(br.offset.bias, Tensor::zeros([2])).unwrap();
            }
            let mut s = Session::inference(&store);
            let x = s.constant(Tensor::from_fn([2, h, w, 8], |i| (i as f64 * 0.29).sin()));
            let y = block.forward(&mut s, x).map_err(|e| e.to_string())?;
            outs.push(s.value(y).clone());
        }
        if outs[0] != outs[1] {
            return Err(format!("iwin block differs on {h}×{w}"));
        }
    }
    for (h, w) in [(4, 4), (8, 8), (5, 7)] {
        let mut g = Graph::new();
        let z = g.constant(random(&[2, h, w, 3], (h * w) as u64, 1.0));
        let proj = g.constant(random(&[6, 12], 9, 0.5));
        let off = g.constant(Tensor::zeros([2, h, w, 2]));
        let a = agglomerate(&mut g, z, Some(off), proj).map_err(|e| e.to_string())?;
        let b = norm_window(&mut g, z, proj).map_err(|e| e.to_string())?;
        if g.value(a) != g.value(b) {
            return Err(format!("agglomeration differs on {h}×{w}"));
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < Duration::from_secs(10),
        format!("bit-exact on all cases in {:.2}s", elapsed.as_secs_f64()),
    )
}

fn bilinear_correctness() -> Outcome {
    let mut r = rng(21);
    let (mut unity, mut linear) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let (x, y) = (r.random_range(0.0..6.0), r.random_range(0.0..4.0));
        let total: f64 = taps(x, y, 5, 7).map(|(_, w)| w).sum();
        unity = unity.max((total - 1.0).abs());
        let (a, b, c) = (
            r.random_range(-3.0..3.0),
            r.random_range(-3.0..3.0),
            r.random_range(-3.0..3.0),
        );
        let z = FeatureMap::from_fn(1, 5, 7, |_, qy, qx| a * qx as f64 + b * qy as f64 + c);
        let v = bilinear_sample(&z, SamplePoint { x, y })[0];
        linear = linear.max((v - (a * x + b * y + c)).abs());
    }
    let z = random(&[2, 3, 4, 2], 22, 1.0);
    // every coordinate at least 0.05 from an integer
    let pts = Tensor::from_fn([8, 2], |_| {
        let base = r.random_range(-1..4) as f64;
        base + r.random_range(0.05..0.95)
    });
    let weights = random(&[8, 2], 23, 1.0);
    let grad = grad_check_many(
        |g: &mut Graph, v| {
            let s = bilinear_gather(g, v[0], v[1]).map_err(contract)?;
            let w = g.constant(weights.clone());
            let p = g.mul(s, w)?;
            Ok(g.sum(p))
        },
        &[z, pts],
        &GradCheckOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    check(
        unity <= 1e-12 && linear <= 1e-10 && grad <= 1e-5,
        format!("unity {unity:.1e}, linear {linear:.1e}, gradient {grad:.1e}"),
    )
}

fn fit_exponent(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn complexity_formulas() -> Outcome {
    let g = formula_flops(AttentionKind::Global, 8, 8, 4, 0);
    let w = formula_flops(AttentionKind::Window, 8, 8, 4, 2);
    let sweep = [(8usize, 8usize), (8, 16), (16, 16), (16, 32)];
    let fit = |kind, attention: bool| -> Result<f64, String> {
        let pts = sweep
            .iter()
            .map(|&(h, w)| {
                let r = complexity(kind, h, w, 8, 4).map_err(|e| e.to_string())?;
                Ok((
                    (h * w) as f64,
                    if attention { r.attention_macs } else { r.measured_macs } as f64,
                ))
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(fit_exponent(&pts))
    };
    let (eg, ew) = (fit(AttentionKind::Global, true)?, fit(AttentionKind::Window, false)?);
    check(
        g == 36864 && w == 6144 && eg >= 1.8 && (ew - 1.0).abs() <= 0.02,
        format!("global {g}, window {w}, global attention exponent {eg:.3}, window exponent {ew:.3}"),
    )
}

fn stage_bookkeeping() -> Outcome {
    let model = Model::new(ModelConfig::iwin_s(), 0).map_err(|e| e.to_string())?;
    let mut s = Session::inference(&model.store);
    let x = s.constant(random(&[1, 3, 64, 64], 1, 1.0));
    let f = model.forward(&mut s, x).map_err(|e| e.to_string())?;
    let plans = model.cfg.plans().map_err(|e| e.to_string())?;
    let dims: Vec<usize> = std::iter::once(plans[0].input_dim)
        .chain(plans.iter().map(|p| p.output_dim))
        .collect();
    let ok = f.encoded.stage_tokens == [(16, 16), (8, 8), (4, 4), (2, 2)]
        && dims == [32, 64, 128, 256]
        && s.shape(f.stem) == [1, 16, 16, 32]
        && s.shape(f.encoded.tokens) == [1, 4, 256];
    check(ok, format!("tokens {:?}, dims {dims:?}", f.encoded.stage_tokens))
}

fn random_box(r: &mut impl Rng) -> [f64; 4] {
    [
        r.random_range(0.2..0.8),
        r.random_range(0.2..0.8),
        r.random_range(0.05..0.4),
        r.random_range(0.05..0.4),
    ]
}

fn random_gt(r: &mut impl Rng) -> GroundTruthInstance {
    GroundTruthInstance {
        human_box: random_box(r),
        object_box: random_box(r),
        object_class: r.random_range(0..5),
        interaction_class: r.random_range(0..4),
    }
}

fn random_pred(r: &mut impl Rng) -> HoiPrediction {
    let mut logits = |k: usize| (0..k).map(|_| r.random_range(-3.0..3.0)).collect::<Vec<f64>>();
    let (h, o, i) = (logits(2), logits(6), logits(5));
    HoiPrediction {
        human_box: random_box(r),
        object_box: random_box(r),
        human_logits: h,
        object_logits: o,
        interaction_logits: i,
    }
}

/// Sum of `cost(p_g, g)` accumulated from the last ground truth backwards.
fn folded(cost: &CostMatrix, picks: &[usize]) -> f64 {
    picks.iter().enumerate().rev().fold(0.0, |acc, (g, &p)| cost.at(p, g) + acc)
}

fn brute_force(cost: &CostMatrix, gt: usize, used: &mut Vec<bool>) -> f64 {
    if gt == cost.ground_truths {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for p in 0..cost.predictions {
        if !used[p] {
            used[p] = true;
            best = best.min(cost.at(p, gt) + brute_force(cost, gt + 1, used));
            used[p] = false;
        }
    }
    best
}

fn matching_optimality() -> Outcome {
    let mut r = rng(31);
    let mut mismatches = 0;
    for _ in 0..500 {
        let m = r.random_range(1..=6);
        let n = r.random_range(m..=7);
        let cost = CostMatrix::from_fn(n, m, |_, _| r.random_range(0.0..10.0)).map_err(|e| e.to_string())?;
        let a = hungarian(&cost).map_err(|e| e.to_string())?;
        if folded(&cost, &a.gt_to_pred) != brute_force(&cost, 0, &mut vec![false; n]) {
            mismatches += 1;
        }
    }
    let w = LossWeights::default();
    let mut drift = 0.0f64;
    for _ in 0..200 {
        let preds: Vec<_> = (0..6).map(|_| random_pred(&mut r)).collect();
        let mut gts: Vec<_> = (0..r.random_range(0..=5)).map(|_| random_gt(&mut r)).collect();
        let base = set_loss(&preds, &gts, &w).map_err(|e| e.to_string())?;
        gts.shuffle(&mut r);
        drift = drift.max((set_loss(&preds, &gts, &w).map_err(|e| e.to_string())? - base).abs());
    }
    check(
        mismatches == 0 && drift <= 1e-12,
        format!("{mismatches} of 500 differ from brute force, permutation drift {drift:.1e}"),
    )
}

fn giou_values() -> Outcome {
    let a = [0.0, 0.0, 1.0, 1.0];
    let same = giou_xyxy(a, a);
    let corner = giou_xyxy(a, [1.0, 1.0, 2.0, 2.0]);
    let inner = giou_xyxy([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 2.0, 2.0]);
    check(
        same == 1.0 && (corner + 0.5).abs() <= 1e-12 && (inner - 0.25).abs() <= 1e-12,
        format!("{same}, {corner}, {inner}"),
    )
}

fn weighted_sum(s: &mut Session, vars: &[iwin::Var]) -> iwin::Result<iwin::Var> {
    let mut terms = Vec::new();
    for (k, &v) in vars.iter().enumerate() {
        let shape = s.shape(v).to_vec();
        let w = s.constant(Tensor::from_fn(shape, |i| ((i + 3 * k) as f64 * 0.7).sin()));
        let p = s.mul(v, w)?;
        terms.push(s.sum(p));
    }
    Ok(s.add_n(&terms)?)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut errors = Vec::new();
    let fail = |e: iwin::Error| e.to_string();

    let mut store = ParamStore::new();
    let stem = Stem::new(&mut store, 4, &mut rng(1));
    let input = store.add("input", random(&[1, 16, 16, 3], 2, 1.0), Group::Backbone, false);
    let ids = [
        input,
        stem.conv1.weight,
        stem.conv2.weight,
        stem.conv3.bias,
        stem.lateral4.weight,
        stem.lateral8.weight,
    ];
    let e = param_grad_check(
        &mut store,
        &ids,
        |s| {
            let x = s.p(input);
            let y = stem.forward(s, x)?;
            weighted_sum(s, &[y])
        },
        1e-6,
        32,
    )
    .map_err(fail)?;
    errors.push(("stem", e));

    let mut store = ParamStore::new();
    let cfg = AttentionConfig::new(4, vec![2, 4]).map_err(fail)?;
    let block = IwinBlock::new(&mut store, "b", &cfg, OffsetMode::Learned, &mut rng(3)).map_err(fail)?;
    randomize(&mut store, 4, 0.3);
    for br in &block.branches {
        store
            .set(br.offset.weight, random(&[3, 3, 4, 2], br.size as u64, 0.15))
            .unwrap();
        store
            .set(br.offset.bias, Tensor::new([2], vec![0.31, -0.27]).unwrap())
            .unwrap();
    }
    let input = store.add("input", random(&[1, 8, 8, 4], 5, 1.0), Group::Transformer, false);
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
    let e = param_grad_check(
        &mut store,
        &ids,
        |s| {
            let x = s.p(input);
            let y = block.forward(s, x)?;
            weighted_sum(s, &[y])
        },
        1e-6,
        24,
    )
    .map_err(fail)?;
    errors.push(("iwin_block", e));

    let off = Tensor::from_fn([1, 4, 4, 2], |i| 0.15 + 0.07 * (i % 6) as f64);
    let weights = random(&[1, 2, 2, 4], 9, 1.0);
    let e = grad_check_many(
        |g: &mut Graph, v| {
            let out = agglomerate(g, v[0], Some(v[1]), v[2]).map_err(contract)?;
            let w = g.constant(weights.clone());
            let p = g.mul(out, w)?;
            Ok(g.sum(p))
        },
        &[random(&[1, 4, 4, 2], 7, 1.0), off, random(&[4, 8], 8, 1.0)],
        &GradCheckOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    errors.push(("agglomerate", e));

    for kind in [DecoderKind::Stacked { depth: 2 }, DecoderKind::Mlp] {
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, kind, 6, 3, 8, 16, &mut rng(11)).map_err(fail)?;
        randomize(&mut store, 12, 0.4);
        let memory = store.add("memory", random(&[2, 4, 6], 13, 1.0), Group::Transformer, false);
        let ids: Vec<_> = store.ids().collect();
        let e = param_grad_check(
            &mut store,
            &ids,
            |s| {
                let m = s.p(memory);
                let y = dec.forward(s, m, (2, 2))?;
                weighted_sum(s, &[y])
            },
            1e-6,
            8,
        )
        .map_err(fail)?;
        errors.push((
            if kind == DecoderKind::Mlp {
                "decode (mlp)"
            } else {
                "decode (stacked)"
            },
            e,
        ));
    }

    let mut store = ParamStore::new();
    let heads = Heads::new(&mut store, 8, 3, 4, &mut rng(14));
    randomize(&mut store, 15, 0.6);
    let input = store.add("decoded", random(&[3, 8], 16, 1.0), Group::Transformer, false);
    let ids: Vec<_> = store.ids().collect();
    let e = param_grad_check(
        &mut store,
        &ids,
        |s| {
            let x = s.p(input);
            let o = heads.forward(s, x)?;
            weighted_sum(
                s,
                &[
                    o.human_box,
                    o.object_box,
                    o.human_logits,
                    o.object_logits,
                    o.interaction_logits,
                ],
            )
        },
        1e-6,
        16,
    )
    .map_err(fail)?;
    errors.push(("heads", e));

    let mut r = rng(17);
    let preds: Vec<_> = (0..4).map(|_| random_pred(&mut r)).collect();
    let gts = vec![(0..2).map(|_| random_gt(&mut r)).collect::<Vec<_>>()];
    let rows = |f: &dyn Fn(&HoiPrediction) -> Vec<f64>| {
        let data: Vec<f64> = preds.iter().flat_map(f).collect();
        Tensor::new([4, data.len() / 4], data).unwrap()
    };
    let tensors = [
        rows(&|p| p.human_box.to_vec()),
        rows(&|p| p.object_box.to_vec()),
        rows(&|p| p.human_logits.clone()),
        rows(&|p| p.object_logits.clone()),
        rows(&|p| p.interaction_logits.clone()),
    ];
    let w = LossWeights::default();
    let e = grad_check_many(
        |g: &mut Graph, v| {
            let o = HeadOutputs {
                human_box: v[0],
                object_box: v[1],
                human_logits: v[2],
                object_logits: v[3],
                interaction_logits: v[4],
            };
            Ok(set_loss_graph(g, &o, 4, &gts, &w).map_err(contract)?.0)
        },
        &tensors,
        &GradCheckOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    errors.push(("set_loss", e));

    let elapsed = start.elapsed();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(
        worst <= 1e-4 && elapsed < Duration::from_secs(300),
        format!("{} in {:.1}s", detail.join(", "), elapsed.as_secs_f64()),
    )
}

fn evaluator_protocol() -> Outcome {
    const H: [f64; 4] = [0.3, 0.4, 0.2, 0.3];
    const O: [f64; 4] = [0.6, 0.5, 0.2, 0.2];
    let far = [0.9, 0.9, 0.05, 0.05];
    let shift = |b: [f64; 4]| [b[0] + 0.6 * b[2], b[1], b[2], b[3]];
    let pred = |h, o, obj: usize, int: usize, score: f64| HoiPrediction {
        human_box: h,
        object_box: o,
        human_logits: vec![score, 0.0],
        object_logits: (0..4).map(|i| if i == obj { score } else { 0.0 }).collect(),
        interaction_logits: (0..5).map(|i| if i == int { score } else { 0.0 }).collect(),
    };
    let gts = vec![vec![GroundTruthInstance {
        human_box: H,
        object_box: O,
        object_class: 1,
        interaction_class: 2,
    }]];
    let map = |p: Vec<HoiPrediction>| evaluate(&[p], &gts, Setting::Default, None).map_full;
    let cases = [
        (map(vec![pred(H, O, 1, 2, 6.0)]), 1.0),
        (map(vec![pred(H, O, 1, 2, 8.0), pred(far, O, 1, 2, 4.0)]), 1.0),
        (map(vec![pred(H, O, 1, 2, 4.0), pred(far, O, 1, 2, 8.0)]), 0.5),
        (map(vec![pred(shift(H), shift(O), 1, 2, 6.0)]), 0.0),
        (map(vec![pred(H, shift(O), 1, 2, 6.0)]), 0.0),
        (map(vec![pred(shift(H), O, 1, 2, 6.0)]), 0.0),
        (map(vec![pred(H, O, 1, 3, 6.0)]), 0.0),
    ];
    let got: Vec<f64> = cases.iter().map(|c| c.0).collect();
    check(cases.iter().all(|(g, w)| g == w), format!("AP {got:?}"))
}

fn visualization() -> Outcome {
    let model = Model::new(ModelConfig::iwin_s(), 0).map_err(|e| e.to_string())?;
    let image = random(&[3, 64, 64], 41, 1.0);
    let t = viz_windows(&model, &image).map_err(|e| e.to_string())?;
    let mut exact = t.max_displacement == 0.0 && t.tokens.len() == 4;
    for tok in &t.tokens {
        let (r, c) = tok.grid;
        let mut want: Vec<(u64, u64)> = (0..64)
            .map(|i| {
                (
                    stem_to_image((8 * c + i % 8) as f64).to_bits(),
                    stem_to_image((8 * r + i / 8) as f64).to_bits(),
                )
            })
            .collect();
        let mut got: Vec<(u64, u64)> = tok.ancestors.iter().map(|&(x, y)| (x.to_bits(), y.to_bits())).collect();
        want.sort_unstable();
        got.sort_unstable();
        exact &= got == want;
    }
    let counts: Vec<usize> = t.tokens.iter().map(|t| t.ancestors.len()).collect();
    check(
        exact && counts.iter().all(|&n| n == 64),
        format!("ancestors per token {counts:?}, regular grids {exact}"),
    )
}

/// The criterion-8 run: Iwin-S at desk scale on 200 + 50 scenes.
fn learning_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.decoder_ffn = 512;
    cfg.train.lr_backbone = cfg.train.lr;
    cfg.train.milestones = vec![67, 120, 160];
    cfg.train.target_map = Some(0.85);
    cfg
}

struct Run {
    map: f64,
    epochs: usize,
    elapsed: Duration,
}

fn run(cfg: &RunConfig) -> Result<Run, String> {
    let split = Split::from_config(cfg).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = train::train(cfg, &split, None, |log| {
        if let Some(m) = log.map_full {
            eprintln!("  epoch {:3}  loss {:.4}  mAP {m:.4}", log.epoch, log.loss);
        }
    })
    .map_err(|e| e.to_string())?;
    Ok(Run {
        map: out.best_map,
        epochs: out.history.len(),
        elapsed: start.elapsed(),
    })
}

fn end_to_end_learning() -> Outcome {
    let learned_cfg = learning_config();
    let mut regular_cfg = learned_cfg.clone();
    regular_cfg.model.offsets = OffsetMode::Regular;
    let learned = run(&learned_cfg)?;
    let regular = run(&regular_cfg)?;
    let ok = learned.map >= 0.85 && learned.elapsed <= Duration::from_secs(1800) && regular.map <= learned.map + 0.02;
    check(
        ok,
        format!(
            "learned mAP {:.4} after {} epochs in {:.0}s, regular mAP {:.4}",
            learned.map,
            learned.epochs,
            learned.elapsed.as_secs_f64(),
            regular.map
        ),
    )
}

/// Epoch budget of each of the nine decoder-ablation runs.
const ABLATION_EPOCHS: usize = 40;

fn decoder_ablation() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let mut maps = Vec::new();
        for kind in [
            DecoderKind::Stacked { depth: 6 },
            DecoderKind::Stacked { depth: 2 },
            DecoderKind::Mlp,
        ] {
            let mut cfg = learning_config();
            cfg.model.decoder = kind;
            cfg.train.seed = seed;
            cfg.train.milestones = cfg
                .train
                .milestones
                .iter()
                .map(|m| m * ABLATION_EPOCHS / cfg.train.epochs)
                .collect();
            cfg.train.epochs = ABLATION_EPOCHS;
            cfg.train.target_map = None;
            maps.push(run(&cfg)?.map);
        }
        wins += (maps[0] >= maps[1] && maps[1] >= maps[2]) as usize;
        rows.push(format!("seed {seed}: {:.3}/{:.3}/{:.3}", maps[0], maps[1], maps[2]));
    }
    check(wins >= 2, format!("order held for {wins} of 3 seeds ({})", rows.join("; ")))
}

/// Writes past the test harness's output capture so results show on success.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").and_then(|_| out.flush()).expect("stdout");
}

/// Training-run criteria; reported but not asserted.
const TRAINING: [usize; 2] = [8, 11];

#[test]
fn acceptance() {
    let criteria: [Criterion; 11] = [
        ("zero-offset equivalence", zero_offset_equivalence),
        ("bilinear correctness", bilinear_correctness),
        ("complexity formulas", complexity_formulas),
        ("stage bookkeeping", stage_bookkeeping),
        ("matching optimality", matching_optimality),
        ("GIoU values", giou_values),
        ("gradient suite", gradient_suite),
        ("end-to-end learning", end_to_end_learning),
        ("evaluator protocol", evaluator_protocol),
        ("visualization", visualization),
        ("decoder ablation ordering", decoder_ablation),
    ];
    let quick = std::env::var_os("IWIN_ACCEPTANCE_QUICK").is_some();
    report("");
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        if quick && TRAINING.contains(&(i + 1)) {
            report(&format!("criterion {:2} SKIP: {name}", i + 1));
            continue;
        }
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        report(&format!("criterion {:2} {tag}: {name}: {detail}", i + 1));
        if tag == "FAIL" {
            failed.push(i + 1);
        }
    }
    report(&format!("failed criteria: {failed:?}"));
    assert!(failed.iter().all(|c| TRAINING.contains(c)), "failed criteria {failed:?}");
}
