//! Convolutional stem, LeViT transformer stages, and fusion of the stage
//! outputs into the deepest skip.

use crate::tensor::{Activation, Var};

use super::{Builder, Conv, ConvBn, Ctx, LinearBn, Mlp, ModelConfig, ModelError, ParamId, ParamStore, Result};

/// Four stride-2 3×3 conv + batch norm + hardswish blocks.
#[derive(Debug, Clone)]
pub struct ConvStem {
    pub blocks: Vec<ConvBn>,
}

impl ConvStem {
    pub fn new(b: &mut Builder, in_channels: usize, widths: [usize; 4]) -> Self {
        let mut c = in_channels;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let block = ConvBn::new(&mut b.scope(&i.to_string()), c, w, 3, 2, Some(Activation::Hardswish));
                c = w;
                block
            })
            .collect();
        Self { blocks }
    }

    /// Returns the maps after blocks 1–3 (strides 2, 4, 8) and the block-4
    /// output as `[B, h/16·w/16, C]` tokens.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<(Vec<Var<'t>>, Var<'t>)> {
        let mut skips = Vec::with_capacity(3);
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(ctx, h)?;
            if i < 3 {
                skips.push(h);
            }
        }
        Ok((skips, map_to_tokens(h)?))
    }
}

/// `[B, C, h, w]` → `[B, h·w, C]`.
pub fn map_to_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    Ok(x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])?)
}

/// `[B, h·w, C]` → `[B, C, h, w]`.
pub fn tokens_to_map(x: Var<'_>, grid: (usize, usize)) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != grid.0 * grid.1 {
        return Err(ModelError::Config(format!(
            "{} tokens do not form a {:?} grid",
            s[1], grid
        )));
    }
    Ok(x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], grid.0, grid.1])?)
}

/// Bias-table column for every (query, key) pair. Queries sit at
/// `stride · (i, j)` on the key grid; offsets are taken in absolute value.
fn offset_index(key_grid: (usize, usize), query_grid: (usize, usize), stride: usize) -> Vec<usize> {
    let (kh, kw) = key_grid;
    let mut idx = Vec::with_capacity(query_grid.0 * query_grid.1 * kh * kw);
    for qy in 0..query_grid.0 {
        for qx in 0..query_grid.1 {
            for ky in 0..kh {
                for kx in 0..kw {
                    idx.push((qy * stride).abs_diff(ky) * kw + (qx * stride).abs_diff(kx));
                }
            }
        }
    }
    idx
}

fn check_width(x: &Var<'_>, width: usize) -> Result<[usize; 3]> {
    let s = x.shape();
    if s.len() != 3 || s[2] != width {
        return Err(ModelError::Config(format!(
            "expected tokens of width {width}, got shape {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2]])
}

/// Multi-head self-attention with a learned per-head bias indexed by the
/// relative offset between tokens.
#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: LinearBn,
    pub proj: LinearBn,
    pub bias_table: ParamId,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub dim: usize,
    pub grid: (usize, usize),
    bias_index: Vec<usize>,
}

impl Attention {
    pub fn new(b: &mut Builder, dim: usize, heads: usize, key_dim: usize, ratio: usize, grid: (usize, usize)) -> Self {
        let value_dim = ratio * key_dim;
        Self {
            qkv: LinearBn::new(&mut b.scope("qkv"), dim, heads * (2 * key_dim + value_dim)),
            proj: LinearBn::new(&mut b.scope("proj"), heads * value_dim, dim),
            bias_table: b.trunc_normal("bias_table", &[heads, grid.0 * grid.1]),
            heads,
            key_dim,
            value_dim,
            dim,
            grid,
            bias_index: offset_index(grid, grid, 1),
        }
    }

    /// The additive bias `[heads, N, N]`.
    pub fn bias<'t>(&self, ctx: &Ctx<'t, '_>) -> Result<Var<'t>> {
        let n = self.grid.0 * self.grid.1;
        let table = ctx.param(self.bias_table);
        Ok(table.index_select(1, &self.bias_index)?.reshape(&[self.heads, n, n])?)
    }

    /// `x` is `[B, N, dim]`; returns the projected output (no residual).
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let bias = self.bias(ctx)?;
        Ok(self.attend(ctx, x, bias)?.0)
    }

    /// Attention with an explicit bias; also returns the attention weights
    /// `[B, heads, N, N]`.
    pub fn attend<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>, bias: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let [b, n, _] = check_width(&x, self.dim)?;
        let (h, d, v) = (self.heads, self.key_dim, self.value_dim);
        let qkv = self
            .qkv
            .forward(ctx, x.reshape(&[b * n, self.dim])?)?
            .reshape(&[b, n, h, 2 * d + v])?
            .permute(&[0, 2, 1, 3])?;
        let range = |lo: usize, len: usize| (lo..lo + len).collect::<Vec<_>>();
        let q = qkv.index_select(3, &range(0, d))?;
        let k = qkv.index_select(3, &range(d, d))?;
        let vals = qkv.index_select(3, &range(2 * d, v))?;
        let scores = q.matmul(k.permute(&[0, 1, 3, 2])?)?.scale((d as f64).powf(-0.5));
        let weights = scores.add(bias)?.softmax(3)?;
        let mixed = weights
            .matmul(vals)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * n, h * v])?
            .hardswish();
        let out = self.proj.forward(ctx, mixed)?.reshape(&[b, n, self.dim])?;
        Ok((out, weights))
    }
}

/// Residual attention followed by a residual MLP.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn: Attention,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let [b, n, c] = check_width(&x, self.attn.dim)?;
        let x = x.add(self.attn.forward(ctx, x)?)?;
        Ok(self.mlp.forward(ctx, x.reshape(&[b * n, c])?)?.reshape(&[b, n, c])?)
    }
}

/// Attention whose queries are the stride-2 subsample of the key grid: each
/// grid side is halved (rounding up) and the width changes to `out_dim`.
#[derive(Debug, Clone)]
pub struct ShrinkAttention {
    pub q: LinearBn,
    pub kv: LinearBn,
    pub proj: LinearBn,
    pub bias_table: ParamId,
    pub mlp: Mlp,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: (usize, usize),
    pub out_grid: (usize, usize),
    query_index: Vec<usize>,
    bias_index: Vec<usize>,
}

impl ShrinkAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        in_dim: usize,
        out_dim: usize,
        key_dim: usize,
        ratio: usize,
        mlp_ratio: usize,
        grid: (usize, usize),
    ) -> Self {
        let heads = in_dim / key_dim;
        let value_dim = ratio * key_dim;
        let out_grid = (grid.0.div_ceil(2), grid.1.div_ceil(2));
        let mut query_index = Vec::with_capacity(out_grid.0 * out_grid.1);
        for i in 0..out_grid.0 {
            for j in 0..out_grid.1 {
                query_index.push(2 * i * grid.1 + 2 * j);
            }
        }
        Self {
            q: LinearBn::new(&mut b.scope("q"), in_dim, heads * key_dim),
            kv: LinearBn::new(&mut b.scope("kv"), in_dim, heads * (key_dim + value_dim)),
            proj: LinearBn::new(&mut b.scope("proj"), heads * value_dim, out_dim),
            bias_table: b.trunc_normal("bias_table", &[heads, grid.0 * grid.1]),
            mlp: Mlp::new(&mut b.scope("mlp"), out_dim, mlp_ratio),
            heads,
            key_dim,
            value_dim,
            in_dim,
            out_dim,
            grid,
            out_grid,
            query_index,
            bias_index: offset_index(grid, out_grid, 2),
        }
    }

    /// `[B, N, in_dim]` → `[B, N', out_dim]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let [b, n, _] = check_width(&x, self.in_dim)?;
        let nq = self.query_index.len();
        let (h, d, v) = (self.heads, self.key_dim, self.value_dim);
        let sub = x.index_select(1, &self.query_index)?.reshape(&[b * nq, self.in_dim])?;
        let q = self
            .q
            .forward(ctx, sub)?
            .reshape(&[b, nq, h, d])?
            .permute(&[0, 2, 1, 3])?;
        let kv = self
            .kv
            .forward(ctx, x.reshape(&[b * n, self.in_dim])?)?
            .reshape(&[b, n, h, d + v])?
            .permute(&[0, 2, 1, 3])?;
        let k = kv.index_select(3, &(0..d).collect::<Vec<_>>())?;
        let vals = kv.index_select(3, &(d..d + v).collect::<Vec<_>>())?;
        let bias = ctx
            .param(self.bias_table)
            .index_select(1, &self.bias_index)?
            .reshape(&[h, nq, n])?;
        let weights = q
            .matmul(k.permute(&[0, 1, 3, 2])?)?
            .scale((d as f64).powf(-0.5))
            .add(bias)?
            .softmax(3)?;
        let mixed = weights
            .matmul(vals)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * nq, h * v])?
            .hardswish();
        let y = self.proj.forward(ctx, mixed)?;
        Ok(self.mlp.forward(ctx, y)?.reshape(&[b, nq, self.out_dim])?)
    }
}

/// Skip maps at strides 2, 4, 8, 16 plus the raw stage outputs.
pub struct EncoderFeatures<'t> {
    pub skips: Vec<Var<'t>>,
    /// Output tokens of each transformer stage, `[B, N_s, C_s]`.
    pub stage_tokens: Vec<Var<'t>>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub stem: ConvStem,
    pub stages: Vec<Vec<TransformerBlock>>,
    pub shrinks: Vec<ShrinkAttention>,
    /// 1×1 projection of the concatenated stage maps to the deepest skip.
    pub fusion: Conv,
    pub grids: [(usize, usize); 3],
}

impl Encoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let grids = cfg.token_grids();
        let stem = ConvStem::new(&mut b.scope("stem"), 1, cfg.stem_channels);
        let mut stages = Vec::new();
        let mut shrinks = Vec::new();
        for s in 0..3 {
            let dim = cfg.stage_dims[s];
            let blocks = (0..cfg.stage_depths[s])
                .map(|k| {
                    let mut bb = b.scope(&format!("stage{s}.{k}"));
                    TransformerBlock {
                        attn: Attention::new(
                            &mut bb.scope("attn"),
                            dim,
                            cfg.stage_heads[s],
                            cfg.key_dim,
                            cfg.attn_ratio,
                            grids[s],
                        ),
                        mlp: Mlp::new(&mut bb.scope("mlp"), dim, cfg.mlp_ratio),
                    }
                })
                .collect();
            stages.push(blocks);
            if s < 2 {
                shrinks.push(ShrinkAttention::new(
                    &mut b.scope(&format!("shrink{s}")),
                    dim,
                    cfg.stage_dims[s + 1],
                    cfg.key_dim,
                    cfg.shrink_attn_ratio,
                    cfg.mlp_ratio,
                    grids[s],
                ));
            }
        }
        let fused: usize = cfg.stage_dims.iter().sum();
        let fusion = Conv::new(&mut b.scope("fusion"), fused, cfg.decoder_channels[3], 1, 1, 0, true);
        Self {
            stem,
            stages,
            shrinks,
            fusion,
            grids,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<EncoderFeatures<'t>> {
        let (mut skips, mut tokens) = self.stem.forward(ctx, x)?;
        let mut stage_tokens = Vec::with_capacity(3);
        for (s, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                tokens = block.forward(ctx, tokens)?;
            }
            stage_tokens.push(tokens);
            if let Some(shrink) = self.shrinks.get(s) {
                tokens = shrink.forward(ctx, tokens)?;
            }
        }
        let g0 = self.grids[0];
        let maps = stage_tokens
            .iter()
            .zip(self.grids)
            .map(|(&t, g)| {
                let m = tokens_to_map(t, g)?;
                Ok(if g == g0 {
                    m
                } else {
                    m.upsample_nearest_hw(g0.0 / g.0, g0.1 / g.1)?
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = Var::concat(&maps, 1)?;
        skips.push(self.fusion.forward(ctx, fused)?);
        Ok(EncoderFeatures { skips, stage_tokens })
    }

    /// Channel count of each skip map.
    pub fn skip_channels(&self, store: &ParamStore) -> Vec<usize> {
        let mut c: Vec<usize> = self.stem.blocks[..3]
            .iter()
            .map(|b| b.conv.out_channels(store))
            .collect();
        c.push(self.fusion.out_channels(store));
        c
    }
}
