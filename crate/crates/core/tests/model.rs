#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkit::model::{
    Attention, Builder, Ctx, DecoderKind, Init, Mode, ModelConfig, ParamStore, SegModel, ShrinkAttention, Variant,
};
use segkit::tensor::{Tape, Tensor};
use segkit::train::{default_probe_params, loss_gradients, probe_gradients, Adam, TrainConfig};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_mask(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| f64::from(rng.random_range(0..4u8) == 0)).collect(),
    )
    .unwrap()
}

// Closed-form trainable parameter counts, written independently of the
// builders: conv/linear weights, BN affine pairs, conv biases, bias tables.
fn conv_bn(i: usize, o: usize, k: usize) -> usize {
    i * o * k * k + 2 * o
}

fn linear_bn(i: usize, o: usize) -> usize {
    i * o + 2 * o
}

fn mlp(d: usize, r: usize) -> usize {
    linear_bn(d, r * d) + linear_bn(r * d, d)
}

fn up(i: usize, o: usize) -> usize {
    i * o + o
}

fn expected_trainable(c: &ModelConfig) -> usize {
    let grids = c.token_grids();
    let n = |g: (usize, usize)| g.0 * g.1;
    let kd = c.key_dim;
    let mut total = 0;
    let mut prev = 1;
    for &w in &c.stem_channels {
        total += conv_bn(prev, w, 3);
        prev = w;
    }
    for s in 0..3 {
        let (d, h) = (c.stage_dims[s], c.stage_heads[s]);
        let vd = c.attn_ratio * kd;
        let block = linear_bn(d, h * (2 * kd + vd)) + linear_bn(h * vd, d) + h * n(grids[s]) + mlp(d, c.mlp_ratio);
        total += c.stage_depths[s] * block;
        if s < 2 {
            let heads = d / kd;
            let vd = c.shrink_attn_ratio * kd;
            let out = c.stage_dims[s + 1];
            total += linear_bn(d, heads * kd)
                + linear_bn(d, heads * (kd + vd))
                + linear_bn(heads * vd, out)
                + heads * n(grids[s])
                + mlp(out, c.mlp_ratio);
        }
    }
    let dc = &c.decoder_channels;
    total += up(c.stage_dims.iter().sum(), dc[3]);
    let skips = [c.stem_channels[0], c.stem_channels[1], c.stem_channels[2], dc[3]];
    let double = |i: usize, o: usize| conv_bn(i, o, 3) + conv_bn(o, o, 3);
    for i in 0..4 {
        total += double(skips[i], dc[i]);
        match c.decoder {
            DecoderKind::UNetPlusPlus => {
                for j in 1..4 - i {
                    total += up(dc[i + 1], dc[i]) + double((j + 1) * dc[i], dc[i]);
                }
            }
            DecoderKind::UNet => {
                if i < 3 {
                    total += up(dc[i + 1], dc[i]) + double(2 * dc[i], dc[i]);
                }
            }
        }
    }
    total + up(dc[0], c.num_classes)
}

#[test]
fn trainable_count_matches_closed_form() {
    for v in Variant::ALL {
        for d in DecoderKind::ALL {
            let cfg = ModelConfig::new(v, d, (64, 64));
            let model = SegModel::build(cfg.clone(), 0).unwrap();
            assert_eq!(model.trainable_count(), expected_trainable(&cfg), "{v} + {d}");
        }
    }
}

#[test]
fn same_seed_builds_identical_models_and_logits() {
    let cfg = ModelConfig::new(Variant::Levit128s, DecoderKind::UNetPlusPlus, (32, 32));
    let a = SegModel::build(cfg.clone(), 11).unwrap();
    let b = SegModel::build(cfg.clone(), 11).unwrap();
    let c = SegModel::build(cfg, 12).unwrap();
    assert!(a.store.bitwise_eq(&b.store));
    assert!(!a.store.bitwise_eq(&c.store));
    let x = random(&[2, 1, 32, 32], 3);
    let pa = a.predict(&x).unwrap();
    let pb = b.predict(&x).unwrap();
    assert_eq!(pa.shape(), &[2, 3, 32, 32]);
    assert!(pa.data().iter().zip(pb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn indivisible_input_is_a_config_error() {
    let cfg = ModelConfig::new(Variant::Levit384, DecoderKind::UNetPlusPlus, (60, 60));
    let err = SegModel::build(cfg, 0).err().unwrap().to_string();
    assert!(err.contains("60x60") && err.contains("32"), "{err}");
}

#[test]
fn nested_grid_has_triangular_nodes_in_column_order() {
    let cfg = ModelConfig::new(Variant::Levit128s, DecoderKind::UNetPlusPlus, (32, 32));
    let model = SegModel::build(cfg, 0).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, Mode::Train);
    let out = model.forward(&ctx, tape.constant(random(&[2, 1, 32, 32], 1))).unwrap();
    let l = 4;
    assert_eq!(out.grid.node_count(), l * (l + 1) / 2);
    let mut expected = Vec::new();
    for j in 0..l {
        for i in 0..l - j {
            expected.push((i, j));
        }
    }
    assert_eq!(out.grid.order, expected);
    let segkit::model::Decoder::Nested(dec) = &model.decoder else {
        panic!("nested decoder expected");
    };
    let dc = &model.config.decoder_channels;
    for i in 0..l {
        for j in 1..l - i {
            assert_eq!(dec.h[i][j].in_channels, j * dc[i] + dc[i], "H({i},{j})");
        }
    }
    for (i, row) in out.grid.nodes.iter().enumerate() {
        for node in row {
            assert_eq!(node.shape(), vec![2, dc[i], 32 >> (i + 1), 32 >> (i + 1)]);
        }
    }
    assert_eq!(out.logits.shape(), vec![2, 3, 32, 32]);
}

#[test]
fn skip_ladder_halves_resolution_per_level() {
    let cfg = ModelConfig::new(Variant::Levit384, DecoderKind::UNetPlusPlus, (64, 64));
    let model = SegModel::build(cfg, 0).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, Mode::Eval);
    let out = model.forward(&ctx, tape.constant(random(&[1, 1, 64, 64], 2))).unwrap();
    let sizes: Vec<usize> = out.skips.iter().map(|s| s.shape()[2]).collect();
    assert_eq!(sizes, vec![32, 16, 8, 4]);
    assert_eq!(out.skips[3].shape()[1], 256);
    assert_eq!(model.encoder.skip_channels(&model.store), vec![48, 96, 192, 256]);
}

fn attention_fixture(grid: (usize, usize)) -> (ParamStore, Attention) {
    let mut store = ParamStore::new();
    let mut init = Init::new(5);
    let attn = Attention::new(&mut Builder::new(&mut store, &mut init), 16, 2, 4, 2, grid);
    (store, attn)
}

#[test]
fn attention_rows_are_distributions() {
    let (store, attn) = attention_fixture((3, 3));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Train);
    let x = tape.constant(random(&[2, 9, 16], 7));
    let (out, weights) = attn.attend(&ctx, x, attn.bias(&ctx).unwrap()).unwrap();
    assert_eq!(out.shape(), vec![2, 9, 16]);
    let w = weights.value();
    assert_eq!(w.shape(), &[2, 2, 9, 9]);
    for row in w.data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn attention_is_permutation_equivariant_with_permuted_bias() {
    // Swap the first and last tokens of a 2×2 grid and permute the bias the
    // same way: the outputs must swap accordingly.
    let (store, attn) = attention_fixture((2, 2));
    let perm = [3usize, 1, 2, 0];
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval);
    let x = random(&[1, 4, 16], 9);
    let bias = attn.bias(&ctx).unwrap();
    let b = bias.value();
    let mut pb = vec![0.0; b.numel()];
    for h in 0..2 {
        for i in 0..4 {
            for j in 0..4 {
                pb[h * 16 + i * 4 + j] = b.data()[h * 16 + perm[i] * 4 + perm[j]];
            }
        }
    }
    let mut px = vec![0.0; x.numel()];
    for (i, &p) in perm.iter().enumerate() {
        px[i * 16..(i + 1) * 16].copy_from_slice(&x.data()[p * 16..(p + 1) * 16]);
    }
    let (y, _) = attn.attend(&ctx, tape.constant(x), bias).unwrap();
    let pb = tape.constant(Tensor::new(&[2, 4, 4], pb).unwrap());
    let (py, _) = attn
        .attend(&ctx, tape.constant(Tensor::new(&[1, 4, 16], px).unwrap()), pb)
        .unwrap();
    let (y, py) = (y.value(), py.value());
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..16 {
            assert!((py.data()[i * 16 + c] - y.data()[p * 16 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn shrink_block_halves_the_token_grid() {
    let mut store = ParamStore::new();
    let mut init = Init::new(2);
    let shrink = ShrinkAttention::new(&mut Builder::new(&mut store, &mut init), 32, 48, 8, 4, 2, (4, 4));
    assert_eq!(shrink.heads, 4);
    assert_eq!(shrink.out_grid, (2, 2));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Train);
    let y = shrink.forward(&ctx, tape.constant(random(&[2, 16, 32], 4))).unwrap();
    assert_eq!(y.shape(), vec![2, 4, 48]);
}

#[test]
fn loss_reaches_every_skip_and_stem_weight() {
    let cfg = ModelConfig::new(Variant::Levit128s, DecoderKind::UNetPlusPlus, (32, 32));
    let model = SegModel::build(cfg, 3).unwrap();
    let t = Arc::new(random_mask(&[2, 3, 32, 32], 6));
    let loss_cfg = TrainConfig::default();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, Mode::Train);
    let out = model.forward(&ctx, tape.constant(random(&[2, 1, 32, 32], 5))).unwrap();
    // replay the decoder on detached copies so each skip is a leaf
    let leaves: Vec<_> = out.skips.iter().map(|s| tape.variable((*s.value()).clone())).collect();
    let grid = model.decoder.forward(&ctx, &leaves).unwrap();
    let probs = model.head.forward(&ctx, grid.output).unwrap().sigmoid();
    let loss = segkit::train::composite_loss(probs, &t, &loss_cfg).unwrap().total;
    let grads = tape.backward(loss).unwrap();
    for (i, s) in leaves.iter().enumerate() {
        let g = grads.get(*s).unwrap_or_else(|| panic!("skip {i} unreached"));
        assert!(g.iter().any(|v| *v != 0.0), "skip {i} has a zero gradient");
    }

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store, Mode::Train);
    let out = model.forward(&ctx, tape.constant(random(&[2, 1, 32, 32], 5))).unwrap();
    let loss = segkit::train::composite_loss(out.probs, &t, &loss_cfg).unwrap().total;
    let grads = tape.backward(loss).unwrap();
    for block in &model.encoder.stem.blocks {
        let v = ctx.placed(block.conv.weight).unwrap();
        assert!(grads.get(v).unwrap().iter().any(|g| *g != 0.0));
    }
}

#[test]
fn three_steps_leave_no_dead_parameters() {
    // at 64x64 the last stage sees a single token, so its attention softmax
    // has one key and its bias tables get exactly zero gradient
    let cfg = TrainConfig {
        encoder: Variant::Levit128s,
        image_size: 64,
        ..TrainConfig::default()
    };
    cfg.validate().unwrap();
    let mut model = SegModel::build(cfg.model_config(), 8).unwrap();
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let images = random(&[2, 1, 64, 64], 10);
    let targets = Arc::new(random_mask(&[2, 3, 64, 64], 11));
    let mut touched = vec![false; model.store.len()];
    for _ in 0..3 {
        let (_, grads) = loss_gradients(&model, &images, &targets, &cfg, Mode::Train).unwrap();
        for (i, g) in grads.iter().enumerate() {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| *v != 0.0)) {
                touched[i] = true;
            }
        }
        adam.step(&mut model.store, &grads, cfg.lr_init).unwrap();
    }
    let dead: Vec<&str> = model
        .store
        .iter()
        .filter(|(id, p)| {
            p.trainable && !touched[id.0] && !(p.name.starts_with("encoder.stage2.") && p.name.ends_with("bias_table"))
        })
        .map(|(_, p)| p.name.as_str())
        .collect();
    assert!(dead.is_empty(), "dead parameters: {dead:?}");
    let single_token: Vec<bool> = model
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("encoder.stage2.") && p.name.ends_with("bias_table"))
        .map(|(id, _)| touched[id.0])
        .collect();
    assert_eq!(single_token, vec![false; 4]);
}

#[test]
fn parameter_count_grows_with_variant() {
    for d in DecoderKind::ALL {
        let counts: Vec<usize> = Variant::ALL
            .iter()
            .map(|&v| {
                SegModel::build(ModelConfig::new(v, d, (64, 64)), 0)
                    .unwrap()
                    .trainable_count()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{d}: {counts:?}");
    }
}

fn fd_probe(variant: Variant, decoder: DecoderKind) {
    let cfg = TrainConfig {
        encoder: variant,
        decoder,
        image_size: 32,
        ..TrainConfig::default()
    };
    let model = SegModel::build(cfg.model_config(), 21).unwrap();
    let images = random(&[2, 1, 32, 32], 22);
    let targets = random_mask(&[2, 3, 32, 32], 23);
    let params = default_probe_params(&model);
    assert!(params.len() >= 5);
    let results = probe_gradients(&model, &images, &targets, &cfg, &params, 1e-5, Mode::Eval).unwrap();
    for r in &results {
        assert!(r.rel_error < 1e-3, "{r:?}");
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences_small() {
    fd_probe(Variant::Levit128s, DecoderKind::UNet);
}

#[test]
fn end_to_end_gradients_match_finite_differences_levit384_unetpp() {
    fd_probe(Variant::Levit384, DecoderKind::UNetPlusPlus);
}
