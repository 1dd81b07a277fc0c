//! Exhaustive enumeration of small mask spaces.
//!
//! For networks with at most [`MAX_ENUMERABLE_UNITS`] mask units every
//! complete assignment `z` is scored directly: its exact reward `R(z)`, the
//! partition `Z = Σ_z R(z)`, and the exact probability `q(z)` that the
//! policy generates it. Flows induced by the policy are rebuilt two ways
//! (summing complete trajectories through a state, and summing its outgoing
//! edges) so that flow consistency can be checked numerically.

use std::collections::BTreeMap;

use super::{
    log_z, reward, tb_loss, GFlowOutConfig, GflowError, MaskMode, Network, Regime, TrainHyper, Trainer, PARAM_PREFIX,
};
use crate::nn::gradcheck::{self, GradCheckReport};
use crate::nn::{BackboneConfig, BackboneKind, AdamConfig, DropoutMask, GradFilter, MiniResConfig, NnError, Session, Tensor};
use crate::rng::{stream, Stream};

pub const MAX_ENUMERABLE_UNITS: usize = 16;

/// Exact mask distribution of one `(x, y)` pair.
#[derive(Debug, Clone)]
pub struct FlowCheck {
    /// Every complete mask assignment, indexed by its bit code.
    pub assignments: Vec<Vec<DropoutMask>>,
    pub log_rewards: Vec<f64>,
    pub rewards: Vec<f64>,
    /// `Z = Σ_z R(z)`.
    pub partition: f64,
    /// `R(z) / Z`.
    pub target: Vec<f64>,
    /// Exact policy probability `q(z)` of each assignment.
    pub policy: Vec<f64>,
    pub total_variation: f64,
    /// The network's own `log Z` estimate (learned modes only).
    pub learned_log_z: Option<f64>,
    /// Largest `|F(s) − Σ_a F(s, a)|` over all non-terminal states.
    pub max_flow_violation: f64,
    pub states_checked: usize,
}

impl FlowCheck {
    pub fn log_partition(&self) -> f64 {
        self.partition.ln()
    }
}

/// `(Z, R / Z)` for non-negative rewards.
pub fn target_distribution(rewards: &[f64]) -> (f64, Vec<f64>) {
    let z: f64 = rewards.iter().sum();
    (z, rewards.iter().map(|r| r / z).collect())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Enumerates all `2^n` mask assignments of `net` for input `x` with label `y`.
pub fn brute_force_mask_distribution(net: &Network, x: &Tensor, y: usize) -> Result<FlowCheck, GflowError> {
    let sites = net.sites();
    let n: usize = sites.iter().map(|s| s.units).sum();
    if n > MAX_ENUMERABLE_UNITS {
        return Err(GflowError::TooManyUnits(n));
    }
    let offsets: Vec<usize> = sites
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s.units;
            Some(o)
        })
        .collect();
    let count = 1usize << n;
    let mut assignments = Vec::with_capacity(count);
    let mut log_rewards = Vec::with_capacity(count);
    let mut log_q = Vec::with_capacity(count);
    let mut step_logs = Vec::with_capacity(count);
    let mut learned_log_z = None;
    for code in 0..count as u64 {
        let masks: Vec<DropoutMask> = sites
            .iter()
            .zip(&offsets)
            .map(|(s, &o)| DropoutMask::from_bits(&s.name, s.units, code >> o))
            .collect();
        let mut sess = Session::new(&net.params, GradFilter::Nothing);
        let (trace, traj, _) = net.forward_on(&mut sess, x, Regime::Replay(masks.clone()), None)?;
        let logits = sess.tape.value(trace.logits).to_vec();
        let r = reward(&logits, y, &masks, net.gflowout.keep_prob)?;
        if code == 0 && net.gflowout.mode.is_learned() {
            let lz = log_z(&mut sess, &net.gflowout, trace.embedding)?;
            learned_log_z = Some(sess.tape.scalar(lz));
        }
        log_rewards.push(r.log_r);
        log_q.push(traj.log_q);
        step_logs.push(traj.step_log_probs);
        assignments.push(masks);
    }
    let log_partition = log_sum_exp(&log_rewards);
    let partition = log_partition.exp();
    let rewards: Vec<f64> = log_rewards.iter().map(|l| l.exp()).collect();
    let target: Vec<f64> = log_rewards.iter().map(|l| (l - log_partition).exp()).collect();
    let policy: Vec<f64> = log_q.iter().map(|l| l.exp()).collect();
    let total_variation = total_variation(&policy, &target);

    // Flow of the policy-induced DAG, scaled by the network's Z estimate.
    let z_flow = learned_log_z.map(f64::exp).unwrap_or(partition);
    let mut inflow: BTreeMap<(usize, u64), f64> = BTreeMap::new();
    let mut edges: BTreeMap<(usize, u64, u64), f64> = BTreeMap::new();
    for (code, steps) in step_logs.iter().enumerate() {
        let code = code as u64;
        let mut prefix_log = 0.0;
        for (t, site) in sites.iter().enumerate() {
            let prefix = code & ((1u64 << offsets[t]) - 1);
            let action = (code >> offsets[t]) & ((1u64 << site.units) - 1);
            *inflow.entry((t, prefix)).or_insert(0.0) += z_flow * policy[code as usize];
            prefix_log += steps[t];
            edges.entry((t, prefix, action)).or_insert(z_flow * prefix_log.exp());
        }
    }
    let mut outflow: BTreeMap<(usize, u64), f64> = BTreeMap::new();
    for ((t, prefix, _), f) in &edges {
        *outflow.entry((*t, *prefix)).or_insert(0.0) += f;
    }
    let max_flow_violation = inflow
        .iter()
        .map(|(k, f_in)| (f_in - outflow.get(k).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max);

    Ok(FlowCheck {
        assignments,
        log_rewards,
        rewards,
        partition,
        target,
        policy,
        total_variation,
        learned_log_z,
        max_flow_violation,
        states_checked: inflow.len(),
    })
}

/// A MiniRes with two dropout sites of two channels each (16 masks) on a
/// 4×4 input, plus a fixed input and label.
pub fn enumerable_toy(mode: MaskMode, seed: u64) -> Result<(Network, Tensor, usize), GflowError> {
    let backbone = BackboneConfig {
        kind: BackboneKind::MiniRes,
        input_size: 4,
        in_channels: 3,
        n_classes: 3,
        minires: MiniResConfig {
            stem_channels: 3,
            channels: vec![2, 2],
        },
        ..BackboneConfig::default()
    };
    let gflowout = GFlowOutConfig {
        mode,
        keep_prob: 0.9,
        policy_hidden: 16,
        log_z_hidden: 8,
    };
    let net = Network::new(backbone, gflowout, seed)?;
    let mut rng = stream(seed, Stream::Eval);
    let normal = rand_distr::StandardNormal;
    let data = (0..3 * 16).map(|_| rand_distr::Distribution::<f64>::sample(&normal, &mut rng)).collect();
    let x = Tensor::new(&[3, 4, 4], data)?;
    Ok((net, x, 0))
}

/// Policy learning rate for [`fit_toy_policy`]. The scalar log-partition
/// of `topdown` needs more than 2000 steps at the default 1e-3.
pub const TOY_POLICY_LR: f64 = 3e-3;

/// Trains only the policy and log-partition of [`enumerable_toy`] with
/// trajectory balance (classifier frozen, batches of 16 copies of the toy
/// input) for `steps` steps. Returns the network, its input and label, and
/// the mean TB loss of the last step.
pub fn fit_toy_policy(mode: MaskMode, seed: u64, steps: usize) -> Result<(Network, Tensor, usize, f64), GflowError> {
    let (net, x, y) = enumerable_toy(mode, seed)?;
    let hyper = TrainHyper {
        freeze_classifier: true,
        policy: AdamConfig {
            lr: TOY_POLICY_LR,
            ..AdamConfig::default()
        },
        batch_size: 16,
        ..TrainHyper::default()
    };
    let mut trainer = Trainer::new(net, hyper);
    let mut rng = stream(seed, Stream::Masks);
    let batch: Vec<_> = (0..16).map(|_| (&x, y)).collect();
    let mut last = f64::NAN;
    for _ in 0..steps {
        last = trainer.train_step(&batch, &mut rng)?.mean_tb();
    }
    Ok((trainer.into_network(), x, y, last))
}

fn as_nn(e: GflowError) -> NnError {
    match e {
        GflowError::Nn(n) => n,
        other => NnError::Tape(other.to_string()),
    }
}

/// Finite-difference check of the trajectory-balance loss on the
/// enumerable toy with masks fixed by replay, over every policy and
/// log-partition parameter. With the masks fixed, `log R` does not depend
/// on those parameters, and the backbone only reaches the policy through
/// detached inputs, so these are exactly the parameters TB trains.
pub fn tb_gradient_check(mode: MaskMode, seed: u64, eps: f64) -> Result<GradCheckReport, GflowError> {
    if !mode.is_learned() {
        return Err(GflowError::Config(format!("mode {mode} has no trajectory-balance loss")));
    }
    let (net, x, y) = enumerable_toy(mode, seed)?;
    let masks: Vec<DropoutMask> = net
        .sites()
        .iter()
        .enumerate()
        .map(|(t, s)| DropoutMask::from_bits(s.name.clone(), s.units, 1 + t as u64))
        .collect();
    let log_r = {
        let mut sess = Session::new(&net.params, GradFilter::Nothing);
        let (trace, traj, _) = net.forward_on(&mut sess, &x, Regime::Replay(masks.clone()), None)?;
        reward(sess.tape.value(trace.logits), y, &traj.masks, net.gflowout.keep_prob)?.log_r
    };
    let loss = |sess: &mut Session<'_>| -> Result<crate::nn::Var, NnError> {
        let (trace, _, log_q) = net
            .forward_on(sess, &x, Regime::Replay(masks.clone()), None)
            .map_err(as_nn)?;
        let lz = log_z(sess, &net.gflowout, trace.embedding).map_err(as_nn)?;
        let lq = log_q.ok_or_else(|| NnError::Tape("learned modes accumulate log q".into()))?;
        tb_loss(&mut sess.tape, lz, lq, log_r)
    };
    let entries: Vec<_> = gradcheck::all_entries(&net.params)
        .into_iter()
        .filter(|(n, _)| n.starts_with(PARAM_PREFIX))
        .collect();
    Ok(gradcheck::check(&net.params, loss, &entries, eps)?)
}
