//! Layers, the patch-token transformer encoder, optimizer and checkpoints.

mod check;
pub mod checkpoint;
mod layers;
mod optim;
mod params;
mod vit;

pub use layers::{
    patchify, sincos_position_table, unpatchify, BatchNorm, BatchStats, Dropout, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, NormMode, PRelu, PatchEmbed, TransformerBlock, INIT_STD,
};
pub use check::{grad_check_store, worst};
pub use optim::{Adam, AdamConfig, CosineSchedule};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use vit::{Encoder, VitConfig};
pub(crate) use vit::parse_arch;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Trainable parameter count and FLOPs of one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Complexity {
    pub params: usize,
    pub flops: u64,
}

/// FLOPs recorded while `forward` builds its graph on a fresh tape
/// (2 per multiply-accumulate, 1 per elementwise op).
pub fn count_flops<T: Scalar>(forward: impl FnOnce(&mut Tape<T>) -> Result<Var>) -> Result<u64> {
    let mut tape = Tape::new();
    forward(&mut tape)?;
    Ok(tape.flops())
}
