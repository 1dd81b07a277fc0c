//! GFlowNet-trained dropout masks.
//!
//! A dropout configuration is built one site at a time: the state after `t`
//! steps holds the masks of the first `t` dropout sites and the action picks
//! the binary mask of the next site. Per-site policy networks emit independent
//! keep-probabilities for every unit of a site, conditioned on the pooled
//! activation entering the site (and, for `bottomup`, on the pooled input
//! embedding). Policies and the log-partition estimate are trained with the
//! trajectory-balance objective against the reward
//! `R(z) = p(y | x, z) · p(z)` with an independent Bernoulli keep-prior.

mod network;
mod objective;
pub mod oracle;
mod policy;
mod sampler;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::NnError;

pub use network::{Network, PredictiveDistribution};
pub use objective::{log_prior, reward, tb_loss, tb_loss_value, RewardComponents};
pub use oracle::{
    brute_force_mask_distribution, enumerable_toy, fit_toy_policy, target_distribution, tb_gradient_check, total_variation,
    FlowCheck, MAX_ENUMERABLE_UNITS, TOY_POLICY_LR,
};
pub use policy::{init_gflowout, log_z, policy_keep_probs, LOG_Z_PARAM, PARAM_PREFIX};
pub use sampler::{apply_expected_mask, apply_mask, sample_bits, MaskSampler, MaskTrajectory, Regime};
pub use train::{StepLosses, TrainHyper, Trainer};

pub use crate::nn::DropoutMask;

/// Keep-probabilities are clamped into this interval to bound `log_q`.
pub const PROB_CLAMP: (f64, f64) = (1e-4, 1.0 - 1e-4);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// No dropout.
    None,
    /// I.i.d. Bernoulli(π) keep masks with inverted-dropout scaling.
    Random,
    /// Policy conditioned on the input embedding and the layer context.
    BottomUp,
    /// Policy conditioned on the layer context only.
    TopDown,
}

impl MaskMode {
    pub const ALL: [MaskMode; 4] = [MaskMode::None, MaskMode::Random, MaskMode::BottomUp, MaskMode::TopDown];

    /// Modes whose masks come from a learned policy.
    pub fn is_learned(self) -> bool {
        matches!(self, MaskMode::BottomUp | MaskMode::TopDown)
    }

    pub fn is_stochastic(self) -> bool {
        self != MaskMode::None
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::None => "none",
            MaskMode::Random => "random",
            MaskMode::BottomUp => "bottomup",
            MaskMode::TopDown => "topdown",
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskMode {
    type Err = GflowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MaskMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| GflowError::Config(format!("unknown mask mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GFlowOutConfig {
    pub mode: MaskMode,
    /// π: keep probability of `random` masks and of the reward's keep-prior.
    pub keep_prob: f64,
    pub policy_hidden: usize,
    pub log_z_hidden: usize,
}

impl Default for GFlowOutConfig {
    fn default() -> Self {
        Self {
            mode: MaskMode::BottomUp,
            keep_prob: 0.9,
            policy_hidden: 32,
            log_z_hidden: 16,
        }
    }
}

impl GFlowOutConfig {
    pub fn validate(&self) -> Result<(), GflowError> {
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(GflowError::Config(format!("keep_prob {} outside (0, 1]", self.keep_prob)));
        }
        if self.mode.is_learned() && (self.policy_hidden == 0 || self.log_z_hidden == 0) {
            return Err(GflowError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GflowError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("mask mode `{0}` samples masks and needs a random stream")]
    MissingRng(MaskMode),
    #[error("{0} mask units is too many to enumerate (limit {MAX_ENUMERABLE_UNITS})")]
    TooManyUnits(usize),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid gflowout config: {0}")]
    Config(String),
}
