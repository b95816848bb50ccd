//! LeViT encoder with a nested (UNet++) or plain U-Net decoder.
//!
//! Modules are plain structs holding [`ParamId`]s into a [`ParamStore`]; a
//! forward pass borrows the store through a [`Ctx`] and records onto a
//! [`Tape`]. Batch-norm running statistics are collected in the context and
//! folded into the store afterwards, so forward never mutates the model.

mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod layers;
mod network;
mod params;

pub use checkpoint::{load_checkpoint, param_manifest, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DecoderKind, ModelConfig, Variant};
pub use decoder::{Decoder, DecoderGrid, NestedDecoder, PlainDecoder};
pub use encoder::{
    map_to_tokens, tokens_to_map, Attention, ConvStem, Encoder, EncoderFeatures, ShrinkAttention, TransformerBlock,
};
pub use layers::{BatchNorm, Builder, Conv, ConvBn, DoubleConv, LinearBn, Mlp, UpConv, BN_EPS, BN_MOMENTUM};
pub use network::{ModelOutput, SegModel};
pub use params::{Init, Param, ParamId, ParamStore};

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{BatchStats, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are collected for update.
    Train,
    /// Running statistics.
    Eval,
}

struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats,
}

/// One forward pass: the tape, a read-only view of the parameters, and the
/// batch-norm statistics gathered along the way.
pub struct Ctx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    mode: Mode,
    vars: RefCell<HashMap<ParamId, Var<'t>>>,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            vars: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// The tape leaf for a parameter; placed once per pass.
    pub fn param(&self, id: ParamId) -> Var<'t> {
        *self.vars.borrow_mut().entry(id).or_insert_with(|| {
            let p = self.store.get(id);
            if p.trainable {
                self.tape.parameter(p.value.clone(), id.0)
            } else {
                self.tape.constant((*p.value).clone())
            }
        })
    }

    /// The leaf for `id` if this pass used it.
    pub fn placed(&self, id: ParamId) -> Option<Var<'t>> {
        self.vars.borrow().get(&id).copied()
    }

    fn record_bn(&self, mean: ParamId, var: ParamId, stats: BatchStats) {
        self.bn_updates.borrow_mut().push(BnUpdate { mean, var, stats });
    }

    /// Ends the pass, handing back the gathered batch statistics.
    pub fn finish(self) -> BnUpdates {
        BnUpdates(self.bn_updates.into_inner())
    }
}

/// Batch statistics from one training-mode pass.
pub struct BnUpdates(Vec<BnUpdate>);

impl BnUpdates {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl ParamStore {
    /// Folds batch statistics into the running buffers:
    /// `running = (1 − momentum)·running + momentum·batch`.
    pub fn apply_bn_updates(&mut self, updates: BnUpdates, momentum: f64) {
        for u in updates.0 {
            let m = self.value_mut(u.mean);
            for (r, b) in m.data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            let v = self.value_mut(u.var);
            for (r, b) in v.data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}
