use crate::tensor::{Activation, Tensor, Var};

use super::{Ctx, Init, Mode, ParamId, ParamStore, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Registers parameters under a dotted name prefix while a model is built.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    init: &'a mut Init,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, init: &'a mut Init) -> Self {
        Self {
            store,
            init,
            prefix: String::new(),
        }
    }

    /// A builder whose names are nested under `name`.
    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        Builder {
            prefix: self.name(name),
            store: &mut *self.store,
            init: &mut *self.init,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn kaiming(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let t = self.init.kaiming_uniform(shape, fan_in);
        self.store.register(self.name(leaf), t, true)
    }

    pub fn trunc_normal(&mut self, leaf: &str, shape: &[usize]) -> ParamId {
        let t = self.init.trunc_normal(shape, 0.02);
        self.store.register(self.name(leaf), t, true)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64, trainable: bool) -> ParamId {
        self.store
            .register(self.name(leaf), Tensor::full(shape, value), trainable)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Channel axis of the input.
    pub axis: usize,
}

impl BatchNorm {
    pub fn new(b: &mut Builder, channels: usize, axis: usize) -> Self {
        Self {
            gamma: b.constant("gamma", &[channels], 1.0, true),
            beta: b.constant("beta", &[channels], 0.0, true),
            running_mean: b.constant("running_mean", &[channels], 0.0, false),
            running_var: b.constant("running_var", &[channels], 1.0, false),
            axis,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(g, b, self.axis, BN_EPS)?;
                ctx.record_bn(self.running_mean, self.running_var, stats);
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store();
                let mean = store.value(self.running_mean);
                let var = store.value(self.running_var);
                Ok(x.batch_norm_eval(g, b, self.axis, BN_EPS, mean.data(), var.data())?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Square `k×k` kernel; Kaiming-uniform weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let weight = b.kaiming("weight", &[out_c, in_c, k, k], in_c * k * k);
        let bias = bias.then(|| b.constant("bias", &[out_c], 0.0, true));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let bias = self.bias.map(|id| ctx.param(id));
        Ok(x.conv2d(ctx.param(self.weight), bias, self.stride, self.padding)?)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.value(self.weight).shape()[0]
    }
}

/// Bias-free convolution, batch norm, optional activation.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub act: Option<Activation>,
}

impl ConvBn {
    pub fn new(b: &mut Builder, in_c: usize, out_c: usize, k: usize, stride: usize, act: Option<Activation>) -> Self {
        Self {
            conv: Conv::new(&mut b.scope("conv"), in_c, out_c, k, stride, k / 2, false),
            bn: BatchNorm::new(&mut b.scope("bn"), out_c, 1),
            act,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.bn.forward(ctx, self.conv.forward(ctx, x)?)?;
        Ok(match self.act {
            Some(a) => y.activation(a),
            None => y,
        })
    }
}

/// Bias-free linear map on `[rows, in]` followed by batch norm over rows.
#[derive(Debug, Clone)]
pub struct LinearBn {
    pub weight: ParamId,
    pub bn: BatchNorm,
}

impl LinearBn {
    pub fn new(b: &mut Builder, in_f: usize, out_f: usize) -> Self {
        Self {
            weight: b.trunc_normal("weight", &[in_f, out_f]),
            bn: BatchNorm::new(&mut b.scope("bn"), out_f, 1),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(ctx.param(self.weight))?;
        self.bn.forward(ctx, y)
    }
}

/// `x + W2·hardswish(W1·x)` on `[rows, dim]`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub expand: LinearBn,
    pub reduce: LinearBn,
}

impl Mlp {
    pub fn new(b: &mut Builder, dim: usize, ratio: usize) -> Self {
        Self {
            expand: LinearBn::new(&mut b.scope("expand"), dim, dim * ratio),
            reduce: LinearBn::new(&mut b.scope("reduce"), dim * ratio, dim),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.expand.forward(ctx, x)?.hardswish();
        Ok(x.add(self.reduce.forward(ctx, h)?)?)
    }
}

/// The decoder's `H`: two 3×3 conv + batch norm + ReLU.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub first: ConvBn,
    pub second: ConvBn,
    pub in_channels: usize,
}

impl DoubleConv {
    pub fn new(b: &mut Builder, in_c: usize, out_c: usize) -> Self {
        let relu = Some(Activation::Relu);
        Self {
            first: ConvBn::new(&mut b.scope("0"), in_c, out_c, 3, 1, relu),
            second: ConvBn::new(&mut b.scope("1"), out_c, out_c, 3, 1, relu),
            in_channels: in_c,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.second.forward(ctx, self.first.forward(ctx, x)?)
    }
}

/// The decoder's `U`: nearest ×2 upsampling then a biased 1×1 conv.
#[derive(Debug, Clone)]
pub struct UpConv {
    pub conv: Conv,
}

impl UpConv {
    pub fn new(b: &mut Builder, in_c: usize, out_c: usize) -> Self {
        Self {
            conv: Conv::new(b, in_c, out_c, 1, 1, 0, true),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        self.conv.forward(ctx, x.upsample_nearest(2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn scoped_names_and_shapes() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let mut b = Builder::new(&mut store, &mut init);
        let h = DoubleConv::new(&mut b.scope("dec").scope("h"), 5, 8);
        assert_eq!(store.get(h.first.conv.weight).name, "dec.h.0.conv.weight");
        assert_eq!(store.value(h.first.conv.weight).shape(), &[8, 5, 3, 3]);
        assert!(h.first.conv.bias.is_none());
        assert!(!store.get(h.second.bn.running_var).trainable);
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let bn = BatchNorm::new(&mut Builder::new(&mut store, &mut init), 1, 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        let x = tape.constant(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
        let y = bn.forward(&ctx, x).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-4);
        let updates = ctx.finish();
        drop(tape);
        store.apply_bn_updates(updates, BN_MOMENTUM);
        // mean 2, unbiased variance 2
        assert!((store.value(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        assert!((store.value(bn.running_var).data()[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn up_conv_doubles_resolution() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let u = UpConv::new(&mut Builder::new(&mut store, &mut init), 4, 2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let x = tape.constant(Tensor::ones(&[1, 4, 3, 5]));
        assert_eq!(u.forward(&ctx, x).unwrap().shape(), vec![1, 2, 6, 10]);
    }
}
