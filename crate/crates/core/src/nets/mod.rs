//! Differentiable U-Net models with hand-written reverse mode, AdamW and
//! the versioned parameter checkpoint.

mod arch;
mod checkpoint;
mod layers;
mod optim;
mod real;
mod unet;

pub use arch::{ArchDescriptor, Conditioning, ModelKind, SLICE_VOCAB};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, ModelParams, CHECKPOINT_VERSION};
pub use optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
pub use real::Real;
pub use unet::{Cache, UNet};
