use rand::Rng as _;

use super::{policy_keep_probs, GFlowOutConfig, MaskMode};
use crate::nn::{DropoutMask, NnError, Session, SiteHook, SiteSpec, Tape, Var};
use crate::rng::Rng;

/// How masks are chosen at each site.
#[derive(Debug, Clone, PartialEq)]
pub enum Regime {
    /// Draw masks from the policy (or the Bernoulli prior in `random` mode).
    Sample,
    /// Deterministic pass: multiply by keep-probabilities instead of bits.
    Expected,
    /// Use the given masks, still scoring them under the policy.
    Replay(Vec<DropoutMask>),
}

/// Masks chosen for sites `0..T` in order, with per-step log-probabilities.
/// The state before step `t` is `masks[..t]`; the action is `masks[t]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskTrajectory {
    pub masks: Vec<DropoutMask>,
    pub step_log_probs: Vec<f64>,
    pub log_q: f64,
}

impl MaskTrajectory {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn state(&self, t: usize) -> &[DropoutMask] {
        &self.masks[..t]
    }

    pub fn action(&self, t: usize) -> &DropoutMask {
        &self.masks[t]
    }

    fn push(&mut self, mask: DropoutMask, log_prob: f64) {
        self.masks.push(mask);
        self.step_log_probs.push(log_prob);
        self.log_q += log_prob;
    }
}

/// One independent Bernoulli draw per unit: keep iff `u < p`, `u ~ U[0, 1)`.
pub fn sample_bits(probs: &[f64], rng: &mut Rng) -> Vec<bool> {
    probs.iter().map(|&p| rng.random::<f64>() < p).collect()
}

fn bernoulli_log_prob(probs: &[f64], bits: &[bool]) -> f64 {
    probs
        .iter()
        .zip(bits)
        .map(|(&p, &b)| {
            if b {
                p.ln()
            } else if p >= 1.0 {
                f64::NEG_INFINITY
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

fn scale(tape: &mut Tape, activation: Var, site: &SiteSpec, factor: Vec<f64>) -> Result<Var, NnError> {
    let f = tape.constant(&[site.units], factor)?;
    if site.tokens {
        tape.scale_features(activation, f)
    } else {
        tape.scale_channels(activation, f)
    }
}

/// Multiplies an activation by a site mask, broadcast over spatial positions
/// or tokens. `random` masks are rescaled by `1/π` when `training`
/// (inverted dropout); learned masks are never rescaled; `none` is the
/// identity. Stochastic evaluation passes use `training = true`.
pub fn apply_mask(
    tape: &mut Tape,
    activation: Var,
    site: &SiteSpec,
    mask: &DropoutMask,
    mode: MaskMode,
    keep_prob: f64,
    training: bool,
) -> Result<Var, NnError> {
    if mask.len() != site.units {
        return Err(NnError::Mask(format!(
            "mask for `{}` has {} units, expected {}",
            site.name,
            mask.len(),
            site.units
        )));
    }
    let factor = match mode {
        MaskMode::None => return Ok(activation),
        MaskMode::Random if training => mask.keep.iter().map(|&k| if k { 1.0 / keep_prob } else { 0.0 }).collect(),
        _ => mask.as_f64(),
    };
    scale(tape, activation, site, factor)
}

/// Deterministic expected-mask multiply by per-unit keep-probabilities.
pub fn apply_expected_mask(tape: &mut Tape, activation: Var, site: &SiteSpec, probs: &[f64]) -> Result<Var, NnError> {
    if probs.len() != site.units {
        return Err(NnError::Mask(format!("{} keep-probabilities for {} units", probs.len(), site.units)));
    }
    scale(tape, activation, site, probs.to_vec())
}

/// Site hook that chooses (or replays) masks during a forward pass and
/// accumulates the trajectory log-probability.
pub struct MaskSampler<'a> {
    cfg: &'a GFlowOutConfig,
    regime: Regime,
    rng: Option<&'a mut Rng>,
    log_q: Option<Var>,
    trajectory: MaskTrajectory,
    keep_probs: Vec<Vec<f64>>,
}

impl<'a> MaskSampler<'a> {
    pub fn new(cfg: &'a GFlowOutConfig, regime: Regime, rng: Option<&'a mut Rng>) -> Self {
        Self {
            cfg,
            regime,
            rng,
            log_q: None,
            trajectory: MaskTrajectory::default(),
            keep_probs: Vec::new(),
        }
    }

    /// Differentiable `Σ log P(a_t | s_t)` (learned modes with sampled or
    /// replayed masks only).
    pub fn log_q_var(&self) -> Option<Var> {
        self.log_q
    }

    pub fn trajectory(&self) -> &MaskTrajectory {
        &self.trajectory
    }

    pub fn into_trajectory(self) -> MaskTrajectory {
        self.trajectory
    }

    /// Keep-probabilities used at each site so far.
    pub fn keep_probs(&self) -> &[Vec<f64>] {
        &self.keep_probs
    }

    fn choose_bits(&mut self, index: usize, site: &SiteSpec, probs: &[f64]) -> Result<Vec<bool>, NnError> {
        match &self.regime {
            Regime::Replay(masks) => {
                let m = masks
                    .get(index)
                    .ok_or_else(|| NnError::Mask(format!("no replay mask for site `{}`", site.name)))?;
                if m.site != site.name || m.len() != site.units {
                    return Err(NnError::Mask(format!(
                        "replay mask `{}` ({} units) does not fit site `{}` ({} units)",
                        m.site,
                        m.len(),
                        site.name,
                        site.units
                    )));
                }
                Ok(m.keep.clone())
            }
            _ => {
                let rng = self
                    .rng
                    .as_deref_mut()
                    .ok_or_else(|| NnError::Mask(format!("mode `{}` needs a random stream", self.cfg.mode)))?;
                Ok(sample_bits(probs, rng))
            }
        }
    }
}

impl SiteHook for MaskSampler<'_> {
    fn on_site(
        &mut self,
        sess: &mut Session<'_>,
        index: usize,
        site: &SiteSpec,
        activation: Var,
        embedding: Var,
    ) -> Result<Var, NnError> {
        let mode = self.cfg.mode;
        let pi = self.cfg.keep_prob;
        match mode {
            MaskMode::None => {
                self.keep_probs.push(vec![1.0; site.units]);
                self.trajectory.push(DropoutMask::ones(&site.name, site.units), 0.0);
                Ok(activation)
            }
            MaskMode::Random => {
                let probs = vec![pi; site.units];
                self.keep_probs.push(probs.clone());
                if self.regime == Regime::Expected {
                    // π · (1/π): inverted dropout is the identity in expectation
                    return Ok(activation);
                }
                let bits = self.choose_bits(index, site, &probs)?;
                let lp = bernoulli_log_prob(&probs, &bits);
                let mask = DropoutMask { site: site.name.clone(), keep: bits };
                let out = apply_mask(&mut sess.tape, activation, site, &mask, mode, pi, true)?;
                self.trajectory.push(mask, lp);
                Ok(out)
            }
            MaskMode::BottomUp | MaskMode::TopDown => {
                let p = policy_keep_probs(sess, self.cfg, index, embedding, activation).map_err(|e| match e {
                    super::GflowError::Nn(e) => e,
                    other => NnError::Mask(other.to_string()),
                })?;
                let probs = sess.tape.value(p).to_vec();
                self.keep_probs.push(probs.clone());
                if self.regime == Regime::Expected {
                    return apply_expected_mask(&mut sess.tape, activation, site, &probs);
                }
                let bits = self.choose_bits(index, site, &probs)?;
                let mask = DropoutMask { site: site.name.clone(), keep: bits };
                let lp = sess.tape.bernoulli_log_prob(p, &mask.as_f64())?;
                let lp_value = sess.tape.scalar(lp);
                self.log_q = Some(match self.log_q {
                    Some(acc) => sess.tape.add(acc, lp)?,
                    None => lp,
                });
                let out = apply_mask(&mut sess.tape, activation, site, &mask, mode, pi, true)?;
                self.trajectory.push(mask, lp_value);
                Ok(out)
            }
        }
    }
}
