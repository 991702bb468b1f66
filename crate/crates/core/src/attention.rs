//! Window and global multi-head self-attention, the Iwin attention block,
//! and the attention complexity accountant.

use std::f64::consts::TAU;
use std::sync::Arc;

use numcore::{kernels, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{tile_rows, Conv, Ffn, LayerNorm, Linear};
use crate::params::{Group, ParamStore, Session};
use crate::windowing::{self, WindowGeometry};
use crate::{contract, Result};

/// Heads used for a `dim`-channel attention: 8 from 64 channels up, else 4.
pub fn heads_for(dim: usize) -> usize {
    if dim >= 64 {
        8
    } else {
        4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub scale_set: Vec<usize>,
}

impl AttentionConfig {
    pub fn new(dim: usize, scale_set: Vec<usize>) -> Result<Self> {
        let cfg = Self {
            dim,
            num_heads: heads_for(dim),
            ffn_hidden: 4 * dim,
            scale_set,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return Err(contract(format!(
                "{} channels do not split into {} heads",
                self.dim, self.num_heads
            )));
        }
        if self.scale_set.is_empty() || self.scale_set.contains(&0) {
            return Err(contract(format!("invalid window scale set {:?}", self.scale_set)));
        }
        Ok(())
    }
}

/// Fixed sinusoidal encoding of 2-D positions `(y, x)` given in `[0, 1]`.
/// The first half of the channels encodes `y`, the second `x`; each half
/// alternates sine and cosine over geometrically spaced frequencies.
pub fn sine_encoding(coords: &[(f64, f64)], dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(4) {
        return Err(contract(format!("sine encoding needs a multiple of 4 channels, got {dim}")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(coords.len() * dim);
    for &(y, x) in coords {
        for v in [y, x] {
            for i in 0..half {
                let freq = 10_000f64.powf((2 * (i / 2)) as f64 / half as f64);
                let a = v * TAU / freq;
                data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
    }
    Ok(Tensor::from_parts([coords.len(), dim], data))
}

/// Encoding of slot positions inside an `S × S` window, `[S², dim]`.
pub fn window_encoding(size: usize, dim: usize) -> Result<Tensor> {
    let s = size as f64;
    let coords: Vec<_> = (0..size * size)
        .map(|n| (((n / size) as f64 + 0.5) / s, ((n % size) as f64 + 0.5) / s))
        .collect();
    sine_encoding(&coords, dim)
}

/// Encoding of the cells of an `H × W` grid in row-major order, `[H·W, dim]`.
pub fn grid_encoding(h: usize, w: usize, dim: usize) -> Result<Tensor> {
    let coords: Vec<_> = (0..h * w)
        .map(|i| (((i / w) as f64 + 0.5) / h as f64, ((i % w) as f64 + 0.5) / w as f64))
        .collect();
    sine_encoding(&coords, dim)
}

/// Multi-head attention with separate query, key, value and output
/// projections. Position encodings are added to the query and key inputs
/// only.
#[derive(Clone, Debug)]
pub struct Msa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl Msa {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, group: Group, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, group, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, group, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, group, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, group, rng),
            dim,
            heads,
        }
    }

    /// `xq: [G, Lq, C]` attends to `xkv: [G, Lk, C]` group by group.
    /// Encodings are `[Lq, C]` / `[Lk, C]` and shared across groups. Masks
    /// have one flag per row; rows of invalid queries are zero.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &self,
        s: &mut Session,
        xq: Var,
        xkv: Var,
        q_pos: Option<&Tensor>,
        k_pos: Option<&Tensor>,
        key_valid: Option<Arc<[bool]>>,
        query_valid: Option<Arc<[bool]>>,
    ) -> Result<Var> {
        let (&[gq, lq, c], &[gk, lk, ck]) = (s.shape(xq), s.shape(xkv)) else {
            return Err(contract(format!(
                "attention inputs must be [G,L,C], got {:?} and {:?}",
                s.shape(xq),
                s.shape(xkv)
            )));
        };
        if gq != gk || c != ck || c != self.dim {
            return Err(contract(format!(
                "attention of dim {} over {:?} and {:?}",
                self.dim,
                s.shape(xq),
                s.shape(xkv)
            )));
        }
        let with_pos = |s: &mut Session, x: Var, pos: Option<&Tensor>, len: usize| -> Result<Var> {
            let rows = s.reshape(x, [gq * len, c])?;
            match pos {
                None => Ok(rows),
                Some(p) => {
                    if p.shape() != [len, c] {
                        return Err(contract(format!("position encoding {:?} for {len}×{c} rows", p.shape())));
                    }
                    let p = s.constant(tile_rows(p, gq));
                    Ok(s.add(rows, p)?)
                }
            }
        };
        let q_in = with_pos(s, xq, q_pos, lq)?;
        let k_in = with_pos(s, xkv, k_pos, lk)?;
        let v_in = s.reshape(xkv, [gq * lk, c])?;
        let q = self.q.forward(s, q_in)?;
        let k = self.k.forward(s, k_in)?;
        let v = self.v.forward(s, v_in)?;
        let q = s.reshape(q, [gq, lq, c])?;
        let k = s.reshape(k, [gq, lk, c])?;
        let v = s.reshape(v, [gq, lk, c])?;
        let a = s.attention(q, k, v, self.heads, key_valid, query_valid.clone())?;
        let a = s.reshape(a, [gq * lq, c])?;
        let mut o = self.out.forward(s, a)?;
        if let Some(m) = query_valid {
            let keep: Arc<[Option<usize>]> = m.iter().enumerate().map(|(i, &v)| v.then_some(i)).collect();
            o = s.index_rows(o, keep)?;
        }
        Ok(s.reshape(o, [gq, lq, c])?)
    }
}

/// Window attention over `windows: [num_windows, S², C]`; `valid` flags
/// real (unpadded) slots. Queries and keys carry window-local sine
/// encodings of the regular anchor grid.
pub fn w_msa(s: &mut Session, windows: Var, valid: Option<Arc<[bool]>>, size: usize, msa: &Msa) -> Result<Var> {
    let pos = window_encoding(size, msa.dim)?;
    msa.attend(s, windows, windows, Some(&pos), Some(&pos), valid.clone(), valid)
}

/// Global attention over `tokens: [B, H·W, C]` laid out on an `H × W` grid.
pub fn g_msa(s: &mut Session, tokens: Var, grid: (usize, usize), msa: &Msa) -> Result<Var> {
    let pos = grid_encoding(grid.0, grid.1, msa.dim)?;
    msa.attend(s, tokens, tokens, Some(&pos), Some(&pos), None, None)
}

/// Whether a block's windows follow learned offsets or stay regular.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffsetMode {
    Learned,
    /// Offset predictors are kept at zero and frozen.
    Regular,
}

/// One window scale of an Iwin block.
#[derive(Clone, Debug)]
pub struct ScaleBranch {
    pub size: usize,
    pub offset: Conv,
    pub norm: LayerNorm,
    pub msa: Msa,
}

/// Multi-scale irregular-window attention, 1×1 merge, residual, then a
/// pre-normalised FFN with a second residual.
#[derive(Clone, Debug)]
pub struct IwinBlock {
    pub cfg: AttentionConfig,
    pub branches: Vec<ScaleBranch>,
    pub merge: Linear,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
    pub offsets: OffsetMode,
}

impl IwinBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        offsets: OffsetMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.dim;
        let g = Group::Transformer;
        let branches = cfg
            .scale_set
            .iter()
            .map(|&size| {
                let offset = Conv::zeros(store, &format!("{name}.s{size}.offset"), 3, c, 2, g);
                if offsets == OffsetMode::Regular {
                    store.set_trainable(offset.weight, false);
                    store.set_trainable(offset.bias, false);
                }
                ScaleBranch {
                    size,
                    offset,
                    norm: LayerNorm::new(store, &format!("{name}.s{size}.norm"), c, g),
                    msa: Msa::new(store, &format!("{name}.s{size}.msa"), c, cfg.num_heads, g, rng),
                }
            })
            .collect::<Vec<_>>();
        Ok(Self {
            cfg: cfg.clone(),
            merge: Linear::new(store, &format!("{name}.merge"), branches.len() * c, c, g, rng),
            branches,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c, g),
            ffn: Ffn::new(store, &format!("{name}.ffn"), c, cfg.ffn_hidden, g, rng),
            offsets,
        })
    }

    /// `x: [B, H, W, C]` → same shape.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let &[b, h, w, c] = s.shape(x) else {
            return Err(contract(format!("block input must be [B,H,W,C], got {:?}", s.shape(x))));
        };
        if c != self.cfg.dim {
            return Err(contract(format!("block of dim {} got {c} channels", self.cfg.dim)));
        }
        let mut maps = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let geom = WindowGeometry::new(h, w, br.size)?;
            let offsets = match self.offsets {
                OffsetMode::Learned => {
                    let (wt, bias) = (s.p(br.offset.weight), s.p(br.offset.bias));
                    Some(windowing::predict_offsets(s, x, wt, bias)?)
                }
                OffsetMode::Regular => None,
            };
            let win = windowing::gather(s, x, offsets, &geom)?;
            let win = br.norm.forward(s, win)?;
            let valid = geom.valid_mask(b);
            let att = w_msa(s, win, Some(valid), br.size, &br.msa)?;
            maps.push(windowing::scatter(s, att, &geom, b)?);
        }
        let cat = if maps.len() == 1 { maps[0] } else { s.concat_last(&maps)? };
        let merged = self.merge.forward(s, cat)?;
        let y = s.add(x, merged)?;
        let n = self.norm2.forward(s, y)?;
        let f = self.ffn.forward(s, n)?;
        Ok(s.add(y, f)?)
    }
}

/// Pre-normalised global attention block with FFN, over `[B, T, C]`.
#[derive(Clone, Debug)]
pub struct GlobalBlock {
    pub norm1: LayerNorm,
    pub msa: Msa,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl GlobalBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let g = Group::Transformer;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, g),
            msa: Msa::new(store, &format!("{name}.msa"), dim, heads_for(dim), g, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, g),
            ffn: Ffn::new(store, &format!("{name}.ffn"), dim, 4 * dim, g, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, grid: (usize, usize)) -> Result<Var> {
        let n = self.norm1.forward(s, x)?;
        let a = g_msa(s, n, grid, &self.msa)?;
        let y = s.add(x, a)?;
        let n = self.norm2.forward(s, y)?;
        let f = self.ffn.forward(s, n)?;
        Ok(s.add(y, f)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Global,
    Window,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ComplexityReport {
    pub kind: AttentionKind,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub sw: usize,
    /// `4HWC² + 2(HW)²C` for global, `4HWC² + 2S²HWC` for window attention.
    pub formula_flops: u64,
    /// Multiply-accumulates counted in a reference forward pass.
    pub measured_macs: u64,
    /// The part of `measured_macs` spent in the attention products.
    pub attention_macs: u64,
}

pub fn formula_flops(kind: AttentionKind, h: usize, w: usize, c: usize, sw: usize) -> u64 {
    let (hw, c, sw) = (h as u64 * w as u64, c as u64, sw as u64);
    let proj = 4 * hw * c * c;
    match kind {
        AttentionKind::Global => proj + 2 * hw * hw * c,
        AttentionKind::Window => proj + 2 * sw * sw * hw * c,
    }
}

/// Evaluates the formula and measures one seeded forward pass of the
/// corresponding attention over an `H × W × C` map (projections plus the
/// two attention products; biases and normalisation excluded).
pub fn complexity(kind: AttentionKind, h: usize, w: usize, c: usize, sw: usize) -> Result<ComplexityReport> {
    if h == 0 || w == 0 || c == 0 || (kind == AttentionKind::Window && sw == 0) {
        return Err(contract("complexity arguments must be positive"));
    }
    let heads = if c.is_multiple_of(heads_for(c)) { heads_for(c) } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let msa = Msa::new(&mut store, "ref", c, heads, Group::Transformer, &mut rng);
    let x = Tensor::from_fn([1, h, w, c], |_| rng.random_range(-1.0..1.0));
    let mut s = Session::inference(&store);
    let xv = s.constant(x);
    kernels::reset_macs();
    match kind {
        AttentionKind::Global => {
            let t = s.reshape(xv, [1, h * w, c])?;
            msa.attend(&mut s, t, t, None, None, None, None)?;
        }
        AttentionKind::Window => {
            let geom = WindowGeometry::new(h, w, sw)?;
            let win = windowing::gather(&mut s, xv, None, &geom)?;
            msa.attend(
                &mut s,
                win,
                win,
                None,
                None,
                Some(geom.valid_mask(1)),
                Some(geom.valid_mask(1)),
            )?;
        }
    }
    let m = kernels::macs();
    Ok(ComplexityReport {
        kind,
        h,
        w,
        c,
        sw,
        formula_flops: formula_flops(kind, h, w, c, sw),
        measured_macs: m.total(),
        attention_macs: m.attention,
    })
}
