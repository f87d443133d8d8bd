//! Continual model merging: tangent-space fine-tuning, curvature-weighted
//! merging from optimizer statistics, and post-merge feature alignment.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file pin the common choices.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0)` also rejects NaN

pub mod align;
pub mod data;
pub mod error;
pub mod harness;
pub mod head;
pub mod merge;
pub mod net;
pub mod optim;
pub mod params;
pub mod scalar;

pub use align::{refine_last_layer, representation_bias, BiasReport};
pub use data::{Scenario, Split, TaskDataset, TaskSequence};
pub use error::{Error, Result};
pub use harness::{run_continual, Flags, MergeMethod, RunConfig, RunResult};
pub use head::{predict_nmc, FrozenHead, PrototypePolicy, PrototypeStore};
pub use merge::{fisher_merge, FisherAccumulator, MergeConfig};
pub use net::{Activation, FeatureMode, Model, ModelConfig, TangentModel};
pub use optim::{AdamWHyper, AdamWState, DecayMode};
pub use params::{Layout, ParamSet};
pub use scalar::Scalar;

pub type ParamSet64 = ParamSet<f64>;
pub type ParamSet32 = ParamSet<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type FrozenHead64 = FrozenHead<f64>;
pub type FrozenHead32 = FrozenHead<f32>;
pub type PrototypeStore64 = PrototypeStore<f64>;
pub type AdamWState64 = AdamWState<f64>;
pub type AdamWState32 = AdamWState<f32>;
pub type FisherAccumulator64 = FisherAccumulator<f64>;
pub type TaskSequence64 = TaskSequence<f64>;
pub type TaskSequence32 = TaskSequence<f32>;
