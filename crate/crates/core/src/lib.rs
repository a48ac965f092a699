//! Mixture density network regression with a closed-form split of predictive variance into
//! explained and unexplained parts, plus a highway simulator that uses the split to gate a
//! learned driving policy.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod mdn;
pub mod model;
pub mod nn;
pub mod sim;
pub mod synthetic;
pub mod train;
pub mod ualfd;
pub mod uncertainty;

pub use data::TrainingSet;
pub use error::{Error, Result};
pub use mdn::{GmmParams, MapPrediction, MdnConfig, MdnNetwork};
pub use model::{Model, RegNet};
pub use nn::{MlpConfig, MlpNetwork};
pub use train::{LossTrace, TrainSchedule};
pub use uncertainty::{McDropoutReport, TimingReport, UncertaintyReport};
