//! Group-equivariant convolutional networks with equivariant pretext tasks and
//! invariant contrastive losses.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode tape.
//! * [`group`]: finite rotation/flip groups and their actions on grids and labels.
//! * [`nn`]: lifting and group convolutions, pooling, group averaging, heads, backbones.
//! * [`pretext`]: equivariant context prediction and jigsaw.
//! * [`contrastive`]: invariant MoCo, SwAV and SimSiam losses.
//! * [`data`]: synthetic data, augmentations and minibatching.

pub mod contrastive;
pub mod data;
pub mod error;
pub mod group;
pub mod nn;
pub mod pretext;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
