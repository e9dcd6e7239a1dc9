//! Layers the decoder is assembled from. Each layer struct holds the
//! [`ParamId`](crate::tensor::ParamId)s it registered and reads their
//! current values from a [`Ctx`] at forward time.

pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod init;
pub mod norm;
pub mod params;
pub mod upsample;

pub use attention::{attention_weights, axial_attention, self_attention, AttentionParams, AxialAttention, SelfAttention};
pub use checkpoint::{Checkpoint, CheckpointError, LoadReport};
pub use conv::{conv2d, Conv2d};
pub use norm::{batch_norm_eval, batch_norm_train, BatchNorm2d, BN_EPS};
pub use params::{Ctx, Mode, ParamEntry, ParamKind, ParamStore, StatUpdate};
pub use upsample::bilinear_upsample;
