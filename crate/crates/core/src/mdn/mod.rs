//! Mixture density network head, NLL training and MAP prediction.

mod head;
mod network;

pub use head::{head_transform, nll_loss, GmmParams, MdnConfig, NllOutput};
pub use network::{MapPrediction, MdnNetwork};
