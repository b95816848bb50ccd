//! Nested (UNet++) and plain U-Net decoders over four skip levels.
//!
//! Row `i` of the grid runs at stride `2^(i+1)`. In the nested decoder node
//! `y[i][j]` is `H(skip_i)` for `j = 0` and otherwise
//! `H(concat(y[i][0], …, y[i][j−1], U(y[i+1][j−1])))`.

use crate::tensor::Var;

use super::{Builder, Ctx, DecoderKind, DoubleConv, ModelError, Result, UpConv};

/// The evaluated nodes, indexed `nodes[i][j]`, in evaluation order.
pub struct DecoderGrid<'t> {
    pub nodes: Vec<Vec<Var<'t>>>,
    pub order: Vec<(usize, usize)>,
    pub output: Var<'t>,
}

impl DecoderGrid<'_> {
    pub fn node_count(&self) -> usize {
        self.order.len()
    }
}

fn check_skips(skips: &[Var<'_>], depth: usize) -> Result<()> {
    if skips.len() != depth {
        return Err(ModelError::Config(format!(
            "decoder expects {depth} skips, got {}",
            skips.len()
        )));
    }
    Ok(())
}

fn same_resolution(a: &Var<'_>, b: &Var<'_>, at: (usize, usize)) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[2..] != sb[2..] {
        return Err(ModelError::Config(format!(
            "resolution mismatch at node ({}, {}): {:?} vs {:?}",
            at.0,
            at.1,
            &sa[2..],
            &sb[2..]
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct NestedDecoder {
    pub depth: usize,
    pub channels: Vec<usize>,
    /// `h[i][j]` builds node `y[i][j]`.
    pub h: Vec<Vec<DoubleConv>>,
    /// `u[i][j − 1]` lifts `y[i+1][j−1]` into row `i`.
    pub u: Vec<Vec<UpConv>>,
}

impl NestedDecoder {
    /// `skip_channels[i]` is the width of the encoder map feeding row `i`.
    pub fn new(b: &mut Builder, skip_channels: &[usize], channels: &[usize]) -> Self {
        let depth = channels.len();
        let mut h = Vec::with_capacity(depth);
        let mut u = Vec::with_capacity(depth);
        for i in 0..depth {
            let mut row_h = Vec::new();
            let mut row_u = Vec::new();
            for j in 0..depth - i {
                let mut nb = b.scope(&format!("node{i}{j}"));
                if j == 0 {
                    row_h.push(DoubleConv::new(&mut nb.scope("h"), skip_channels[i], channels[i]));
                } else {
                    row_u.push(UpConv::new(&mut nb.scope("up"), channels[i + 1], channels[i]));
                    row_h.push(DoubleConv::new(&mut nb.scope("h"), (j + 1) * channels[i], channels[i]));
                }
            }
            h.push(row_h);
            u.push(row_u);
        }
        Self {
            depth,
            channels: channels.to_vec(),
            h,
            u,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, skips: &[Var<'t>]) -> Result<DecoderGrid<'t>> {
        check_skips(skips, self.depth)?;
        let mut nodes: Vec<Vec<Var<'t>>> = vec![Vec::new(); self.depth];
        let mut order = Vec::new();
        for j in 0..self.depth {
            for i in 0..self.depth - j {
                let y = if j == 0 {
                    self.h[i][0].forward(ctx, skips[i])?
                } else {
                    let up = self.u[i][j - 1].forward(ctx, nodes[i + 1][j - 1])?;
                    same_resolution(&nodes[i][0], &up, (i, j))?;
                    let mut parts = nodes[i].clone();
                    parts.push(up);
                    self.h[i][j].forward(ctx, Var::concat(&parts, 1)?)?
                };
                nodes[i].push(y);
                order.push((i, j));
            }
        }
        let output = nodes[0][self.depth - 1];
        Ok(DecoderGrid { nodes, order, output })
    }
}

/// Encoder-decoder with one skip per level: row `i` holds `H(skip_i)` and,
/// above the bottom row, `H(concat(H(skip_i), U(row i+1)))`.
#[derive(Debug, Clone)]
pub struct PlainDecoder {
    pub depth: usize,
    pub channels: Vec<usize>,
    pub skip_h: Vec<DoubleConv>,
    pub up: Vec<UpConv>,
    pub merge_h: Vec<DoubleConv>,
}

impl PlainDecoder {
    pub fn new(b: &mut Builder, skip_channels: &[usize], channels: &[usize]) -> Self {
        let depth = channels.len();
        let mut skip_h = Vec::new();
        let mut up = Vec::new();
        let mut merge_h = Vec::new();
        for i in 0..depth {
            let mut nb = b.scope(&format!("level{i}"));
            skip_h.push(DoubleConv::new(&mut nb.scope("skip"), skip_channels[i], channels[i]));
            if i + 1 < depth {
                up.push(UpConv::new(&mut nb.scope("up"), channels[i + 1], channels[i]));
                merge_h.push(DoubleConv::new(&mut nb.scope("merge"), 2 * channels[i], channels[i]));
            }
        }
        Self {
            depth,
            channels: channels.to_vec(),
            skip_h,
            up,
            merge_h,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, skips: &[Var<'t>]) -> Result<DecoderGrid<'t>> {
        check_skips(skips, self.depth)?;
        let mut nodes: Vec<Vec<Var<'t>>> = vec![Vec::new(); self.depth];
        let mut order = Vec::new();
        for i in 0..self.depth {
            nodes[i].push(self.skip_h[i].forward(ctx, skips[i])?);
            order.push((i, 0));
        }
        let mut below = nodes[self.depth - 1][0];
        for i in (0..self.depth - 1).rev() {
            let up = self.up[i].forward(ctx, below)?;
            same_resolution(&nodes[i][0], &up, (i, 1))?;
            below = self.merge_h[i].forward(ctx, Var::concat(&[nodes[i][0], up], 1)?)?;
            nodes[i].push(below);
            order.push((i, 1));
        }
        Ok(DecoderGrid {
            nodes,
            order,
            output: below,
        })
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    Nested(NestedDecoder),
    Plain(PlainDecoder),
}

impl Decoder {
    pub fn new(b: &mut Builder, kind: DecoderKind, skip_channels: &[usize], channels: &[usize]) -> Self {
        match kind {
            DecoderKind::UNetPlusPlus => Decoder::Nested(NestedDecoder::new(b, skip_channels, channels)),
            DecoderKind::UNet => Decoder::Plain(PlainDecoder::new(b, skip_channels, channels)),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, skips: &[Var<'t>]) -> Result<DecoderGrid<'t>> {
        match self {
            Decoder::Nested(d) => d.forward(ctx, skips),
            Decoder::Plain(d) => d.forward(ctx, skips),
        }
    }
}
