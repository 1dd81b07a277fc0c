use serde::{Deserialize, Serialize};

use super::GflowError;
use crate::nn::{DropoutMask, NnError, Tape, Var};

/// Log-domain reward of a complete mask assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    /// `log p(y | x, z)`
    pub log_likelihood: f64,
    /// `log p(z)` under independent Bernoulli(π) keep bits.
    pub log_prior: f64,
    pub log_r: f64,
}

/// `Σ_units [bit·ln π + (1 − bit)·ln(1 − π)]`; exact `0` contributions for
/// kept units when `π = 1`.
pub fn log_prior(masks: &[DropoutMask], keep_prob: f64) -> f64 {
    let (lk, ld) = (keep_prob.ln(), (1.0 - keep_prob).ln());
    masks
        .iter()
        .flat_map(|m| m.keep.iter())
        .map(|&k| if k { lk } else { ld })
        .sum()
}

/// `log R = log softmax(logits)[label] + log p(z)`.
pub fn reward(logits: &[f64], label: usize, masks: &[DropoutMask], keep_prob: f64) -> Result<RewardComponents, GflowError> {
    if label >= logits.len() {
        return Err(NnError::Label {
            label,
            n_classes: logits.len(),
        }
        .into());
    }
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(GflowError::Config(format!("keep-prior {keep_prob} outside [0, 1]")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite("reward logits".into()).into());
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let log_likelihood = (logits[label] - lse).min(0.0);
    let log_prior = log_prior(masks, keep_prob);
    Ok(RewardComponents {
        log_likelihood,
        log_prior,
        log_r: log_likelihood + log_prior,
    })
}

/// `(log Z + log q − log R)²` on the tape. `log_r` enters as a constant, so
/// no gradient reaches the classifier through this term.
pub fn tb_loss(tape: &mut Tape, log_z: Var, log_q: Var, log_r: f64) -> Result<Var, NnError> {
    if !log_r.is_finite() {
        return Err(NnError::NonFinite(format!("log reward {log_r}")));
    }
    let s = tape.add(log_z, log_q)?;
    let r = tape.constant(tape.shape(s).to_vec().as_slice(), vec![log_r])?;
    let d = tape.sub(s, r)?;
    tape.square(d)
}

pub fn tb_loss_value(log_z: f64, log_q: f64, log_r: f64) -> Result<f64, GflowError> {
    if !(log_z.is_finite() && log_q.is_finite() && log_r.is_finite()) {
        return Err(NnError::NonFinite(format!("tb inputs ({log_z}, {log_q}, {log_r})")).into());
    }
    let d = log_z + log_q - log_r;
    Ok(d * d)
}
