//! Token agglomeration: every 2×2 irregular window is concatenated to `4C`
//! channels and projected to `2C`, quartering the token count.

use numcore::{Graph, Var};
use rand::Rng;

use crate::attention::OffsetMode;
use crate::layers::Conv;
use crate::params::{init, Group, ParamId, ParamStore, Session};
use crate::windowing::{self, WindowGeometry};
use crate::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StagePlan {
    /// 1-based stage index.
    pub stage: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// `(rows, columns)` of tokens entering the stage.
    pub tokens_in: (usize, usize),
    pub tokens_out: (usize, usize),
}

impl StagePlan {
    pub fn count_in(&self) -> usize {
        self.tokens_in.0 * self.tokens_in.1
    }

    pub fn count_out(&self) -> usize {
        self.tokens_out.0 * self.tokens_out.1
    }
}

/// The three agglomerative stages for an `h × w` image and stem width `d_c`.
pub fn plan_stages(h: usize, w: usize, d_c: usize) -> Result<Vec<StagePlan>> {
    if h == 0 || w == 0 || !h.is_multiple_of(4) || !w.is_multiple_of(4) {
        return Err(contract(format!("image extents {h}×{w} must be positive multiples of 4")));
    }
    if d_c == 0 {
        return Err(contract("stem width must be positive"));
    }
    let mut tokens = (h / 4, w / 4);
    let mut dim = d_c;
    let mut plans = Vec::with_capacity(3);
    for stage in 1..=3 {
        let out = (tokens.0.div_ceil(2), tokens.1.div_ceil(2));
        plans.push(StagePlan {
            stage,
            input_dim: dim,
            output_dim: 2 * dim,
            tokens_in: tokens,
            tokens_out: out,
        });
        tokens = out;
        dim *= 2;
    }
    Ok(plans)
}

/// `z: [B, H, W, C]` → `[B, ⌈H/2⌉, ⌈W/2⌉, 2C]`. Output cell `(r, c)` fuses
/// the samples anchored at rows `{2r, 2r+1}` × columns `{2c, 2c+1}`,
/// concatenated row-major over the anchors, through `w: [2C, 4C]`.
/// `offsets: [B, H, W, 2]` displace the anchors; `None` is the regular
/// (norm-window) case.
pub fn agglomerate(g: &mut Graph, z: Var, offsets: Option<Var>, w: Var) -> Result<Var> {
    let &[b, h, wd, c] = g.shape(z) else {
        return Err(contract(format!("map must be [B,H,W,C], got {:?}", g.shape(z))));
    };
    if g.shape(w) != [2 * c, 4 * c] {
        return Err(contract(format!(
            "projection must be [{}, {}], got {:?}",
            2 * c,
            4 * c,
            g.shape(w)
        )));
    }
    let geom = WindowGeometry::new(h, wd, 2)?;
    let win = windowing::gather(g, z, offsets, &geom)?;
    let rows = g.reshape(win, [b * geom.num_windows(), 4 * c])?;
    let out = g.matmul_nt(rows, w)?;
    Ok(g.reshape(out, [b, geom.windows_y(), geom.windows_x(), 2 * c])?)
}

/// Regular 2×2 fusion of neighbouring tokens.
pub fn norm_window(g: &mut Graph, z: Var, w: Var) -> Result<Var> {
    agglomerate(g, z, None, w)
}

/// Parameters of one agglomeration: its own zero-initialised offset
/// predictor and the `2C × 4C` projection.
#[derive(Clone, Debug)]
pub struct Agglomerator {
    pub dim: usize,
    pub offset: Conv,
    pub proj: ParamId,
    pub offsets: OffsetMode,
}

impl Agglomerator {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, offsets: OffsetMode, rng: &mut impl Rng) -> Self {
        let g = Group::Transformer;
        let offset = Conv::zeros(store, &format!("{name}.offset"), 3, dim, 2, g);
        if offsets == OffsetMode::Regular {
            store.set_trainable(offset.weight, false);
            store.set_trainable(offset.bias, false);
        }
        let proj = store.add(
            format!("{name}.proj"),
            init::xavier(&[2 * dim, 4 * dim], 4 * dim, 2 * dim, rng),
            g,
            true,
        );
        Self {
            dim,
            offset,
            proj,
            offsets,
        }
    }

    /// Returns the agglomerated map and, for learned offsets, the offset
    /// field that was used.
    pub fn forward(&self, s: &mut Session, z: Var) -> Result<(Var, Option<Var>)> {
        let offsets = match self.offsets {
            OffsetMode::Learned => Some(self.offset.forward(s, z)?),
            OffsetMode::Regular => None,
        };
        let w = s.p(self.proj);
        Ok((agglomerate(s, z, offsets, w)?, offsets))
    }
}
