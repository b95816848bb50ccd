use crate::tensor::{Tape, Tensor, Var};

use super::{
    Builder, Ctx, Decoder, DecoderGrid, Encoder, Init, Mode, ModelConfig, ModelError, ParamStore, Result, UpConv,
};

/// A built segmentation network: architecture plus its parameters.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// ×2 nearest upsampling and a 1×1 conv to the class channels.
    pub head: UpConv,
}

pub struct ModelOutput<'t> {
    pub logits: Var<'t>,
    pub probs: Var<'t>,
    pub skips: Vec<Var<'t>>,
    pub grid: DecoderGrid<'t>,
}

impl SegModel {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let mut b = Builder::new(&mut store, &mut init);
        let encoder = Encoder::new(&mut b.scope("encoder"), &config);
        let skip_channels = {
            let mut c = config.stem_channels[..3].to_vec();
            c.push(config.decoder_channels[3]);
            c
        };
        let decoder = Decoder::new(
            &mut b.scope("decoder"),
            config.decoder,
            &skip_channels,
            &config.decoder_channels,
        );
        let head = UpConv::new(&mut b.scope("head"), config.decoder_channels[0], config.num_classes);
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            head,
        })
    }

    /// `x` is `[B, 1, h, w]` at the configured input size.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<ModelOutput<'t>> {
        let s = x.shape();
        let (h, w) = self.config.input_size;
        if s.len() != 4 || s[1] != 1 || (s[2], s[3]) != (h, w) {
            return Err(ModelError::Config(format!(
                "expected input [B, 1, {h}, {w}], got {s:?}"
            )));
        }
        let features = self.encoder.forward(ctx, x)?;
        let grid = self.decoder.forward(ctx, &features.skips)?;
        let logits = self.head.forward(ctx, grid.output)?;
        let probs = logits.sigmoid();
        Ok(ModelOutput {
            logits,
            probs,
            skips: features.skips,
            grid,
        })
    }

    /// Eval-mode probabilities `[B, classes, h, w]` for a batch of images.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, Mode::Eval);
        let out = self.forward(&ctx, tape.constant(images.clone()))?;
        let probs = out.probs.value();
        Ok((*probs).clone())
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }
}
