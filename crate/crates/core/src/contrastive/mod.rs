//! Invariant contrastive objectives: momentum contrast with a feature queue,
//! swapped prototype prediction with Sinkhorn-Knopp assignments, and
//! stop-gradient siamese cosine matching.
//!
//! With `invariant` set, features are group-averaged before normalization so
//! every loss becomes unchanged when any single input is transformed.

mod losses;
mod net;
mod state;
mod step;

pub use losses::{
    embed, moco_loss, simsiam_loss, sinkhorn_knopp, soft_cross_entropy, swav_loss, SINKHORN_EPS,
};
pub use net::{ContrastiveNet, ContrastiveNetConfig};
pub use state::{invariant_inner, FeatureQueue, MomentumEncoder, Prototypes};
pub use step::{
    moco_forward, moco_step, simsiam_forward, simsiam_step, swav_forward, swav_step, MocoConfig,
    MocoState, SimSiamConfig, SwavConfig, SwavState,
};
