//! Finite-difference spot checks of the full training loss with respect to
//! individual model parameters.

use std::sync::Arc;

use crate::model::{Ctx, Mode, ParamId, SegModel};
use crate::tensor::{relative_error, Tape, Tensor};

use super::{composite_loss, TrainConfig, TrainError};

/// One checked parameter entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub name: String,
    pub elem: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

fn loss_of(
    model: &SegModel,
    images: &Tensor,
    targets: &Arc<Tensor>,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<f64, TrainError> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, mode);
    let out = model.forward(&ctx, tape.constant(images.clone()))?;
    let v = composite_loss(out.probs, targets, cfg)?.total.value().data()[0];
    Ok(v)
}

/// Per-parameter gradients indexed like the store; `None` where the pass
/// didn't reach a parameter.
pub type ParamGrads = Vec<Option<Vec<f64>>>;

/// Loss and its gradient for every trainable parameter the pass reached.
pub fn loss_gradients(
    model: &SegModel,
    images: &Tensor,
    targets: &Arc<Tensor>,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<(f64, ParamGrads), TrainError> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, mode);
    let out = model.forward(&ctx, tape.constant(images.clone()))?;
    let loss = composite_loss(out.probs, targets, cfg)?.total;
    let value = loss.value().data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, super::Adam::collect(&model.store, &grads)))
}

/// Compares backprop against central differences (step `h`) for the
/// largest-magnitude gradient entry of each named parameter.
///
/// Use [`Mode::Eval`] for tight tolerances. In training mode, batch norm over
/// a handful of values (deep stages see one token per image on small inputs)
/// curves the loss so sharply that a 1e-5 step is no longer in the linear
/// regime, even though the analytic gradient is right.
pub fn probe_gradients(
    model: &SegModel,
    images: &Tensor,
    targets: &Tensor,
    cfg: &TrainConfig,
    params: &[ParamId],
    h: f64,
    mode: Mode,
) -> Result<Vec<ProbeResult>, TrainError> {
    let targets = Arc::new(targets.clone());
    let (_, grads) = loss_gradients(model, images, &targets, cfg, mode)?;
    let mut work = model.clone();
    let mut out = Vec::with_capacity(params.len());
    for &id in params {
        let name = model.store.get(id).name.clone();
        let g = grads[id.0]
            .as_ref()
            .ok_or_else(|| TrainError::Config(format!("{name} receives no gradient")))?;
        let (elem, &analytic) = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("parameters are non-empty");
        let x0 = model.store.value(id).data()[elem];
        work.store.value_mut(id).data_mut()[elem] = x0 + h;
        let plus = loss_of(&work, images, &targets, cfg, mode)?;
        work.store.value_mut(id).data_mut()[elem] = x0 - h;
        let minus = loss_of(&work, images, &targets, cfg, mode)?;
        work.store.value_mut(id).data_mut()[elem] = x0;
        let numeric = (plus - minus) / (2.0 * h);
        out.push(ProbeResult {
            name,
            elem,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}

/// A spread of parameters from stem to head: the first stem conv, the first
/// attention bias table and qkv weight, the fusion conv, a decoder node and
/// the head.
pub fn default_probe_params(model: &SegModel) -> Vec<ParamId> {
    let dec_node = match model.config.decoder {
        crate::model::DecoderKind::UNetPlusPlus => "decoder.node01.h.0.conv.weight",
        crate::model::DecoderKind::UNet => "decoder.level0.merge.0.conv.weight",
    };
    [
        "encoder.stem.0.conv.weight",
        "encoder.stage0.0.attn.bias_table",
        "encoder.stage0.0.attn.qkv.weight",
        "encoder.fusion.weight",
        dec_node,
        "head.weight",
    ]
    .iter()
    .filter_map(|n| model.store.find(n))
    .collect()
}
