use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Encoder variant; widths, heads and depths follow the published LeViT
/// configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "levit128s")]
    Levit128s,
    #[serde(rename = "levit192")]
    Levit192,
    #[serde(rename = "levit384")]
    Levit384,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Levit128s, Variant::Levit192, Variant::Levit384];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Levit128s => "levit128s",
            Variant::Levit192 => "levit192",
            Variant::Levit384 => "levit384",
        }
    }

    /// Per-head query/key width.
    pub fn key_dim(self) -> usize {
        match self {
            Variant::Levit128s => 16,
            Variant::Levit192 | Variant::Levit384 => 32,
        }
    }

    /// `(dims, heads, depths)` for the three transformer stages.
    pub fn stages(self) -> ([usize; 3], [usize; 3], [usize; 3]) {
        match self {
            Variant::Levit128s => ([128, 256, 384], [4, 6, 8], [2, 3, 4]),
            Variant::Levit192 => ([192, 288, 384], [3, 5, 6], [4, 4, 4]),
            Variant::Levit384 => ([384, 512, 768], [6, 9, 12], [4, 4, 4]),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown encoder {s:?} (levit128s | levit192 | levit384)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecoderKind {
    #[serde(rename = "unet")]
    UNet,
    #[serde(rename = "unetpp")]
    UNetPlusPlus,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 2] = [DecoderKind::UNet, DecoderKind::UNetPlusPlus];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::UNet => "unet",
            DecoderKind::UNetPlusPlus => "unetpp",
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DecoderKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown decoder {s:?} (unet | unetpp)"))
    }
}

/// Everything that determines the model's parameter shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stage_dims: [usize; 3],
    pub stage_heads: [usize; 3],
    pub stage_depths: [usize; 3],
    /// Per-head query/key width; values are `attn_ratio` times wider
    /// (`shrink_attn_ratio` in the resolution-halving blocks).
    pub key_dim: usize,
    pub attn_ratio: usize,
    pub shrink_attn_ratio: usize,
    /// Widths of the four stride-2 stem convolutions; the last equals
    /// `stage_dims[0]`.
    pub stem_channels: [usize; 4],
    pub mlp_ratio: usize,
    pub decoder: DecoderKind,
    pub decoder_depth: usize,
    /// Node width per decoder row (strides 2, 4, 8, 16).
    pub decoder_channels: Vec<usize>,
    pub num_classes: usize,
    /// `(height, width)`.
    pub input_size: (usize, usize),
}

impl ModelConfig {
    pub fn new(variant: Variant, decoder: DecoderKind, input_size: (usize, usize)) -> Self {
        let (stage_dims, stage_heads, stage_depths) = variant.stages();
        let d = stage_dims[0];
        Self {
            variant,
            stage_dims,
            stage_heads,
            stage_depths,
            key_dim: variant.key_dim(),
            attn_ratio: 2,
            shrink_attn_ratio: 4,
            stem_channels: [d / 8, d / 4, d / 2, d],
            mlp_ratio: 2,
            decoder,
            decoder_depth: 4,
            decoder_channels: vec![32, 64, 128, 256],
            num_classes: 3,
            input_size,
        }
    }

    /// Token grid `(rows, cols)` seen by each transformer stage.
    pub fn token_grids(&self) -> [(usize, usize); 3] {
        let g1 = (self.input_size.0 / 16, self.input_size.1 / 16);
        let half = |(h, w): (usize, usize)| (h.div_ceil(2), w.div_ceil(2));
        let g2 = half(g1);
        [g1, g2, half(g2)]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.stage_dims.windows(2).any(|w| w[0] > w[1]) {
            return fail(format!("stage_dims {:?} must be nondecreasing", self.stage_dims));
        }
        if self.stage_dims.contains(&0) || self.stage_heads.contains(&0) || self.stage_depths.contains(&0) {
            return fail("stage widths, heads and depths must be positive".into());
        }
        if self.key_dim == 0 || self.attn_ratio == 0 || self.shrink_attn_ratio == 0 || self.mlp_ratio == 0 {
            return fail("key_dim and attention/MLP ratios must be positive".into());
        }
        if !self.stage_dims[1].is_multiple_of(self.key_dim) || !self.stage_dims[0].is_multiple_of(self.key_dim) {
            return fail(format!(
                "shrink blocks use width / key_dim heads: {:?} must be multiples of {}",
                &self.stage_dims[..2],
                self.key_dim
            ));
        }
        if self.stem_channels.contains(&0) || self.stem_channels[3] != self.stage_dims[0] {
            return fail(format!(
                "stem_channels {:?} must be positive and end at stage width {}",
                self.stem_channels, self.stage_dims[0]
            ));
        }
        if self.decoder_depth != 4 {
            return fail(format!(
                "decoder_depth {} unsupported: the encoder ladder provides exactly 4 skip levels",
                self.decoder_depth
            ));
        }
        if self.decoder_channels.len() != self.decoder_depth || self.decoder_channels.contains(&0) {
            return fail(format!(
                "decoder_channels {:?} must list {} positive widths",
                self.decoder_channels, self.decoder_depth
            ));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        let m = 1usize << (self.decoder_depth + 1);
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return fail(format!(
                "input size {h}x{w} must be divisible by 2^(L+1) = {m} (L = {})",
                self.decoder_depth
            ));
        }
        let grids = self.token_grids();
        for g in &grids[1..] {
            if !grids[0].0.is_multiple_of(g.0) || !grids[0].1.is_multiple_of(g.1) {
                return fail(format!(
                    "input size {h}x{w}: token grid {:?} does not upsample evenly to {:?}",
                    g, grids[0]
                ));
            }
        }
        Ok(())
    }
}
