//! The end-to-end network: convolutional stem with a two-level merge,
//! agglomerative encoder with global blocks, query decoder and HOI heads.

use std::sync::Arc;

use numcore::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agglomerate::{plan_stages, Agglomerator, StagePlan};
use crate::attention::{grid_encoding, heads_for, AttentionConfig, GlobalBlock, IwinBlock, Msa, OffsetMode};
use crate::layers::{Conv, Ffn, LayerNorm, Linear};
use crate::matching::HoiPrediction;
use crate::params::{init, Group, ParamId, ParamStore, Session};
use crate::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// `depth` layers of self-attention, cross-attention and FFN.
    Stacked { depth: usize },
    /// Per-query two-layer perceptron over the query and the mean memory.
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    /// Blocks in stages 1–3, then global blocks.
    pub blocks: [usize; 4],
    pub d_c: usize,
    pub num_queries: usize,
    pub query_dim: usize,
    pub decoder: DecoderKind,
    pub decoder_ffn: usize,
    pub scale_sets: [Vec<usize>; 3],
    pub num_object_classes: usize,
    pub num_interaction_classes: usize,
    pub offsets: OffsetMode,
}

impl ModelConfig {
    /// Small variant: one block per stage and one global block.
    pub fn iwin_s() -> Self {
        Self {
            image_size: (64, 64),
            blocks: [1, 1, 1, 1],
            d_c: 32,
            num_queries: 10,
            query_dim: 256,
            decoder: DecoderKind::Stacked { depth: 6 },
            decoder_ffn: 1024,
            scale_sets: [vec![5, 7], vec![5, 7], vec![3, 5]],
            num_object_classes: 8,
            num_interaction_classes: 4,
            offsets: OffsetMode::Learned,
        }
    }

    /// Base variant: blocks {1, 1, 3, 2} at stem width 64.
    pub fn iwin_b() -> Self {
        Self {
            blocks: [1, 1, 3, 2],
            d_c: 64,
            ..Self::iwin_s()
        }
    }

    pub fn plans(&self) -> Result<Vec<StagePlan>> {
        plan_stages(self.image_size.0, self.image_size.1, self.d_c)
    }

    /// Channels of the encoder output.
    pub fn encoder_dim(&self) -> usize {
        self.d_c * 8
    }

    pub fn validate(&self) -> Result<()> {
        self.plans()?;
        if let DecoderKind::Stacked { depth } = self.decoder {
            if ![2, 4, 6].contains(&depth) {
                return Err(contract(format!("decoder depth must be 2, 4 or 6, got {depth}")));
            }
        }
        if self.num_queries == 0 || self.num_object_classes == 0 || self.num_interaction_classes == 0 {
            return Err(contract("query and class counts must be positive"));
        }
        if !self.query_dim.is_multiple_of(heads_for(self.query_dim)) || !self.query_dim.is_multiple_of(4) {
            return Err(contract(format!("query dimension {} is not head-divisible", self.query_dim)));
        }
        for (i, set) in self.scale_sets.iter().enumerate() {
            AttentionConfig::new(self.d_c << i, set.clone())?;
        }
        for dim in [self.d_c, self.encoder_dim()] {
            if dim % 4 != 0 {
                return Err(contract(format!("width {dim} does not support sine encodings")));
            }
        }
        Ok(())
    }
}

/// Three strided convolutions (strides 2, 4, 8) whose stride-4 and
/// upsampled stride-8 maps are merged through 1×1 lateral projections.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv1: Conv,
    pub conv2: Conv,
    pub conv3: Conv,
    pub lateral4: Linear,
    pub lateral8: Linear,
}

impl Stem {
    pub fn new(store: &mut ParamStore, d_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Backbone;
        Self {
            conv1: Conv::new(store, "stem.conv1", 3, 3, d_c, 2, g, rng),
            conv2: Conv::new(store, "stem.conv2", 3, d_c, d_c, 2, g, rng),
            conv3: Conv::new(store, "stem.conv3", 3, d_c, d_c, 2, g, rng),
            lateral4: Linear::new(store, "stem.lateral4", d_c, d_c, g, rng),
            lateral8: Linear::new(store, "stem.lateral8", d_c, d_c, g, rng),
        }
    }

    /// `x: [B, H, W, 3]` → `[B, H/4, W/4, D_c]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let &[b, h, w, 3] = s.shape(x) else {
            return Err(contract(format!("stem input must be [B,H,W,3], got {:?}", s.shape(x))));
        };
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(contract(format!("image extents {h}×{w} must be positive multiples of 4")));
        }
        let f2 = self.conv1.forward(s, x)?;
        let f2 = s.relu(f2);
        let f4 = self.conv2.forward(s, f2)?;
        let f4 = s.relu(f4);
        let f8 = self.conv3.forward(s, f4)?;
        let f8 = s.relu(f8);
        let l4 = self.lateral4.forward(s, f4)?;
        let l8 = self.lateral8.forward(s, f8)?;
        let mut up = s.upsample_nearest(l8, 2)?;
        let (h4, w4) = (h / 4, w / 4);
        if s.shape(up)[1] != h4 || s.shape(up)[2] != w4 {
            up = crop(s, up, b, h4, w4)?;
        }
        Ok(s.add(l4, up)?)
    }
}

/// Keeps the top-left `h × w` cells of `x: [B, H', W', C]`.
fn crop(s: &mut Session, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
    let &[_, hh, ww, c] = s.shape(x) else { unreachable!() };
    let idx: Arc<[Option<usize>]> = (0..b * h * w)
        .map(|i| {
            let (bi, r) = (i / (h * w), i % (h * w));
            Some((bi * hh + r / w) * ww + r % w)
        })
        .collect();
    let flat = s.reshape(x, [b * hh * ww, c])?;
    let rows = s.index_rows(flat, idx)?;
    Ok(s.reshape(rows, [b, h, w, c])?)
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub plan: StagePlan,
    pub blocks: Vec<IwinBlock>,
    pub agglomerator: Agglomerator,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Stage>,
    pub global: Vec<GlobalBlock>,
}

/// Encoder result and per-stage bookkeeping.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B, T_enc, C_enc]`.
    pub tokens: Var,
    /// Grid of the final tokens.
    pub grid: (usize, usize),
    /// Token grid entering each stage, then the final grid.
    pub stage_tokens: Vec<(usize, usize)>,
    /// Offset field used by each agglomeration (`None` when regular).
    pub agglomeration_offsets: Vec<Option<Var>>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let plans = cfg.plans()?;
        let mut stages = Vec::with_capacity(3);
        for (i, plan) in plans.into_iter().enumerate() {
            let acfg = AttentionConfig::new(plan.input_dim, cfg.scale_sets[i].clone())?;
            let blocks = (0..cfg.blocks[i])
                .map(|j| IwinBlock::new(store, &format!("stage{}.block{j}", i + 1), &acfg, cfg.offsets, rng))
                .collect::<Result<Vec<_>>>()?;
            let agglomerator = Agglomerator::new(
                store,
                &format!("stage{}.agglomerate", i + 1),
                plan.input_dim,
                cfg.offsets,
                rng,
            );
            stages.push(Stage {
                plan,
                blocks,
                agglomerator,
            });
        }
        let global = (0..cfg.blocks[3])
            .map(|j| GlobalBlock::new(store, &format!("global.block{j}"), cfg.encoder_dim(), rng))
            .collect();
        Ok(Self { stages, global })
    }

    /// `z: [B, H/4, W/4, D_c]` → tokens `[B, T_enc, 8·D_c]`.
    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Encoded> {
        let mut x = z;
        let mut stage_tokens = Vec::new();
        let mut agglomeration_offsets = Vec::new();
        for st in &self.stages {
            let &[_, h, w, c] = s.shape(x) else { unreachable!() };
            if (h, w) != st.plan.tokens_in || c != st.plan.input_dim {
                return Err(contract(format!(
                    "stage {} expects {:?}×{}, got {h}×{w}×{c}",
                    st.plan.stage, st.plan.tokens_in, st.plan.input_dim
                )));
            }
            stage_tokens.push((h, w));
            for blk in &st.blocks {
                x = blk.forward(s, x)?;
            }
            let (y, off) = st.agglomerator.forward(s, x)?;
            agglomeration_offsets.push(off);
            x = y;
        }
        let &[b, h, w, c] = s.shape(x) else { unreachable!() };
        stage_tokens.push((h, w));
        let mut t = s.reshape(x, [b, h * w, c])?;
        for blk in &self.global {
            t = blk.forward(s, t, (h, w))?;
        }
        Ok(Encoded {
            tokens: t,
            grid: (h, w),
            stage_tokens,
            agglomeration_offsets,
        })
    }
}

/// Pre-normalised decoder layer.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: Msa,
    pub norm2: LayerNorm,
    pub cross_attn: Msa,
    pub norm3: LayerNorm,
    pub ffn: Ffn,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        let (g, heads) = (Group::Transformer, heads_for(dim));
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, g),
            self_attn: Msa::new(store, &format!("{name}.self_attn"), dim, heads, g, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, g),
            cross_attn: Msa::new(store, &format!("{name}.cross_attn"), dim, heads, g, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim, g),
            ffn: Ffn::new(store, &format!("{name}.ffn"), dim, ffn, g, rng),
        }
    }

    /// `x: [B, N, D]`, `memory: [B, T, D]`, `mem_pos: [T, D]`.
    pub fn forward(&self, s: &mut Session, x: Var, memory: Var, mem_pos: &Tensor) -> Result<Var> {
        let n = self.norm1.forward(s, x)?;
        let a = self.self_attn.attend(s, n, n, None, None, None, None)?;
        let x = s.add(x, a)?;
        let n = self.norm2.forward(s, x)?;
        let a = self.cross_attn.attend(s, n, memory, None, Some(mem_pos), None, None)?;
        let x = s.add(x, a)?;
        let n = self.norm3.forward(s, x)?;
        let f = self.ffn.forward(s, n)?;
        Ok(s.add(x, f)?)
    }
}

#[derive(Clone, Debug)]
pub enum DecoderBody {
    Stacked(Vec<DecoderLayer>),
    Mlp { fc1: Linear, fc2: Linear },
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Bridge from the encoder width to the query width, when they differ.
    pub memory_proj: Option<Linear>,
    pub memory_norm: LayerNorm,
    /// Learned `[N, D]` query embeddings.
    pub queries: ParamId,
    pub body: DecoderBody,
    pub dim: usize,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        kind: DecoderKind,
        memory_dim: usize,
        num_queries: usize,
        dim: usize,
        ffn: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let g = Group::Transformer;
        let memory_proj = (memory_dim != dim).then(|| Linear::new(store, "decoder.memory_proj", memory_dim, dim, g, rng));
        let memory_norm = LayerNorm::new(store, "decoder.memory_norm", dim, g);
        let queries = store.add("decoder.queries", init::normal(&[num_queries, dim], 0.02, rng), g, false);
        let body = match kind {
            DecoderKind::Stacked { depth } if depth >= 1 => DecoderBody::Stacked(
                (0..depth)
                    .map(|i| DecoderLayer::new(store, &format!("decoder.layer{i}"), dim, ffn, rng))
                    .collect(),
            ),
            DecoderKind::Stacked { .. } => return Err(contract("decoder depth must be at least 1")),
            DecoderKind::Mlp => DecoderBody::Mlp {
                fc1: Linear::relu_input(store, "decoder.mlp.fc1", 2 * dim, dim, g, rng),
                fc2: Linear::new(store, "decoder.mlp.fc2", dim, dim, g, rng),
            },
        };
        Ok(Self {
            memory_proj,
            memory_norm,
            queries,
            body,
            dim,
        })
    }

    /// `memory: [B, T, C_enc]` on a `grid` → decoded queries `[B, N, D]`.
    pub fn forward(&self, s: &mut Session, memory: Var, grid: (usize, usize)) -> Result<Var> {
        let &[b, t, _] = s.shape(memory) else {
            return Err(contract(format!("memory must be [B,T,C], got {:?}", s.shape(memory))));
        };
        if grid.0 * grid.1 != t {
            return Err(contract(format!("memory of {t} tokens on a {grid:?} grid")));
        }
        let mut mem = memory;
        if let Some(p) = &self.memory_proj {
            mem = p.forward(s, mem)?;
        }
        let mem = self.memory_norm.forward(s, mem)?;
        let q = s.p(self.queries);
        let n = s.shape(q)[0];
        let tiled: Arc<[Option<usize>]> = (0..b * n).map(|i| Some(i % n)).collect();
        let q = s.index_rows(q, tiled)?;
        let mut x = s.reshape(q, [b, n, self.dim])?;
        match &self.body {
            DecoderBody::Stacked(layers) => {
                let pos = grid_encoding(grid.0, grid.1, self.dim)?;
                for l in layers {
                    x = l.forward(s, x, mem, &pos)?;
                }
                Ok(x)
            }
            DecoderBody::Mlp { fc1, fc2 } => {
                let pooled = s.mean_axis(mem, 1)?;
                let per_query: Arc<[Option<usize>]> = (0..b * n).map(|i| Some(i / n)).collect();
                let pooled = s.index_rows(pooled, per_query)?;
                let pooled = s.reshape(pooled, [b, n, self.dim])?;
                let cat = s.concat_last(&[x, pooled])?;
                let h = fc1.forward(s, cat)?;
                let h = s.relu(h);
                fc2.forward(s, h)
            }
        }
    }
}

/// Three-layer box regressor with a sigmoid, giving `(cx, cy, w, h)`.
#[derive(Clone, Debug)]
pub struct BoxHead {
    pub layers: [Linear; 3],
}

impl BoxHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Transformer;
        Self {
            layers: [
                Linear::relu_input(store, &format!("{name}.0"), dim, dim, g, rng),
                Linear::relu_input(store, &format!("{name}.1"), dim, dim, g, rng),
                Linear::new(store, &format!("{name}.2"), dim, 4, g, rng),
            ],
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(s, x)?;
        let h = s.relu(h);
        let h = self.layers[1].forward(s, h)?;
        let h = s.relu(h);
        let h = self.layers[2].forward(s, h)?;
        Ok(s.sigmoid(h))
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    /// Normalises the decoded queries shared by all heads.
    pub norm: LayerNorm,
    pub human_box: BoxHead,
    pub object_box: BoxHead,
    pub human: Linear,
    pub object: Linear,
    pub interaction: Linear,
}

/// Per-query outputs as graph nodes, rows ordered image-major.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub human_box: Var,
    pub object_box: Var,
    pub human_logits: Var,
    pub object_logits: Var,
    pub interaction_logits: Var,
}

impl Heads {
    pub fn new(store: &mut ParamStore, dim: usize, num_obj: usize, num_int: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Transformer;
        Self {
            norm: LayerNorm::new(store, "head.norm", dim, g),
            human_box: BoxHead::new(store, "head.human_box", dim, rng),
            object_box: BoxHead::new(store, "head.object_box", dim, rng),
            human: Linear::new(store, "head.human", dim, 2, g, rng),
            object: Linear::new(store, "head.object", dim, num_obj + 1, g, rng),
            interaction: Linear::new(store, "head.interaction", dim, num_int + 1, g, rng),
        }
    }

    /// `decoded: [R, D]` → head outputs with `R` rows each.
    pub fn forward(&self, s: &mut Session, decoded: Var) -> Result<HeadOutputs> {
        let decoded = self.norm.forward(s, decoded)?;
        Ok(HeadOutputs {
            human_box: self.human_box.forward(s, decoded)?,
            object_box: self.object_box.forward(s, decoded)?,
            human_logits: self.human.forward(s, decoded)?,
            object_logits: self.object.forward(s, decoded)?,
            interaction_logits: self.interaction.forward(s, decoded)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub stem: Stem,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub heads: Heads,
}

/// Result of a forward pass over a batch.
#[derive(Clone, Debug)]
pub struct Forward {
    pub batch: usize,
    pub outputs: HeadOutputs,
    pub encoded: Encoded,
    /// Stem output `[B, H/4, W/4, D_c]`.
    pub stem: Var,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = Stem::new(&mut store, cfg.d_c, &mut rng);
        let encoder = Encoder::new(&mut store, &cfg, &mut rng)?;
        let decoder = Decoder::new(
            &mut store,
            cfg.decoder,
            cfg.encoder_dim(),
            cfg.num_queries,
            cfg.query_dim,
            cfg.decoder_ffn,
            &mut rng,
        )?;
        let heads = Heads::new(
            &mut store,
            cfg.query_dim,
            cfg.num_object_classes,
            cfg.num_interaction_classes,
            &mut rng,
        );
        Ok(Self {
            cfg,
            store,
            stem,
            encoder,
            decoder,
            heads,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// `images: [B, 3, H, W]`.
    pub fn forward(&self, s: &mut Session, images: Var) -> Result<Forward> {
        let &[b, 3, h, w] = s.shape(images) else {
            return Err(contract(format!("images must be [B,3,H,W], got {:?}", s.shape(images))));
        };
        if (h, w) != self.cfg.image_size {
            return Err(contract(format!(
                "model expects {:?} images, got {h}×{w}",
                self.cfg.image_size
            )));
        }
        let x = s.permute(images, &[0, 2, 3, 1])?;
        let stem = self.stem.forward(s, x)?;
        let encoded = self.encoder.forward(s, stem)?;
        let decoded = self.decoder.forward(s, encoded.tokens, encoded.grid)?;
        let rows = s.reshape(decoded, [b * self.cfg.num_queries, self.cfg.query_dim])?;
        let outputs = self.heads.forward(s, rows)?;
        Ok(Forward {
            batch: b,
            outputs,
            encoded,
            stem,
        })
    }

    /// Per-image predictions read from a finished forward pass.
    pub fn predictions(&self, s: &Session, f: &Forward) -> Vec<Vec<HoiPrediction>> {
        read_predictions(&s.graph, &f.outputs, f.batch, self.cfg.num_queries)
    }

    /// Inference over a batch of `[3, H, W]` images.
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<Vec<HoiPrediction>>> {
        let mut s = Session::inference(&self.store);
        let x = s.constant(stack(images)?);
        let f = self.forward(&mut s, x)?;
        Ok(self.predictions(&s, &f))
    }
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| contract("cannot stack an empty list"))?;
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(contract(format!("cannot stack {:?} with {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::from_parts(shape, data))
}

/// Per-image predictions from head outputs of `batch · n` rows.
pub fn read_predictions(g: &Graph, o: &HeadOutputs, batch: usize, n: usize) -> Vec<Vec<HoiPrediction>> {
    let rows = |v: Var| {
        let t = g.value(v);
        let w = t.shape()[1];
        (t.data().to_vec(), w)
    };
    let (hb, _) = rows(o.human_box);
    let (ob, _) = rows(o.object_box);
    let (hl, hw) = rows(o.human_logits);
    let (ol, ow) = rows(o.object_logits);
    let (il, iw) = rows(o.interaction_logits);
    let four = |d: &[f64], r: usize| -> [f64; 4] { d[4 * r..4 * r + 4].try_into().unwrap() };
    (0..batch)
        .map(|b| {
            (0..n)
                .map(|q| {
                    let r = b * n + q;
                    HoiPrediction {
                        human_box: four(&hb, r),
                        object_box: four(&ob, r),
                        human_logits: hl[r * hw..(r + 1) * hw].to_vec(),
                        object_logits: ol[r * ow..(r + 1) * ow].to_vec(),
                        interaction_logits: il[r * iw..(r + 1) * iw].to_vec(),
                    }
                })
                .collect()
        })
        .collect()
}
