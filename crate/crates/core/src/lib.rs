//! Learnable GFlowNet dropout masks for miniature image classifiers, with
//! the uncertainty-evaluation toolkit that goes with them.

pub mod nn;
pub mod rng;
pub mod gflowout;
pub mod metrics;
pub mod data;
pub mod saliency;
