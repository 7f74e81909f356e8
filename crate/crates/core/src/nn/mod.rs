//! Differentiable building blocks: parameter storage with Adam, a
//! reverse-mode tape, GRU / self-attention / convolution encoders, a
//! finite-difference checker and the checkpoint container.

pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use encoder::{encoder_forward, BlockKind, Encoder, EncoderSpec, PaddedBatch};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{Linear, SeqLayout};
pub use params::{AdamConfig, Binder, Gradients, Init, Initializer, ParamId, ParamSource, ParamStore};
pub use tape::{Tape, Var};
