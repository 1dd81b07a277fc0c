use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{log_z, reward, tb_loss, GflowError, Network, Regime, PARAM_PREFIX};
use crate::nn::{Adam, AdamConfig, GradFilter, NnError, Session, Tensor};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    /// λ: weight of the trajectory-balance term.
    pub lambda_tb: f64,
    pub classifier: AdamConfig,
    pub policy: AdamConfig,
    pub batch_size: usize,
    /// Train only policy / log-partition parameters.
    pub freeze_classifier: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lambda_tb: 1.0,
            classifier: AdamConfig::default(),
            policy: AdamConfig::default(),
            batch_size: 32,
            freeze_classifier: false,
        }
    }
}

/// Summed losses over the samples of one or more steps.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepLosses {
    pub ce_sum: f64,
    pub tb_sum: f64,
    pub correct: usize,
    pub samples: usize,
}

impl StepLosses {
    pub fn mean_ce(&self) -> f64 {
        self.ce_sum / self.samples.max(1) as f64
    }

    pub fn mean_tb(&self) -> f64 {
        self.tb_sum / self.samples.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.samples.max(1) as f64
    }

    fn merge(&mut self, o: StepLosses) {
        self.ce_sum += o.ce_sum;
        self.tb_sum += o.tb_sum;
        self.correct += o.correct;
        self.samples += o.samples;
    }
}

fn diverged(e: GflowError) -> GflowError {
    match e {
        GflowError::Nn(NnError::NonFinite(m)) => GflowError::Diverged(m),
        other => other,
    }
}

/// Joint optimizer state: classifier parameters learn from cross-entropy,
/// policy and log-partition parameters from λ·TB.
pub struct Trainer {
    pub net: Network,
    pub hyper: TrainHyper,
    classifier_opt: Adam,
    policy_opt: Adam,
}

impl Trainer {
    pub fn new(net: Network, hyper: TrainHyper) -> Self {
        Self {
            classifier_opt: Adam::new(hyper.classifier),
            policy_opt: Adam::new(hyper.policy),
            net,
            hyper,
        }
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    /// One optimizer step on a mini-batch: mean cross-entropy plus λ times
    /// the mean trajectory-balance loss.
    pub fn train_step(&mut self, batch: &[(&Tensor, usize)], rng: &mut Rng) -> Result<StepLosses, GflowError> {
        self.step_inner(batch, rng).map_err(diverged)
    }

    fn step_inner(&mut self, batch: &[(&Tensor, usize)], rng: &mut Rng) -> Result<StepLosses, GflowError> {
        if batch.is_empty() {
            return Ok(StepLosses::default());
        }
        let cfg = self.net.gflowout.clone();
        let learned = cfg.mode.is_learned();
        let freeze = self.hyper.freeze_classifier;
        let filter = if freeze { GradFilter::Prefix(PARAM_PREFIX) } else { GradFilter::All };
        let inv_b = 1.0 / batch.len() as f64;
        let mut out = StepLosses::default();
        self.net.params.zero_grad();
        for &(x, y) in batch {
            let mut sess = Session::new(&self.net.params, filter);
            let (trace, traj, log_q) = self.net.forward_on(&mut sess, x, Regime::Sample, Some(&mut *rng))?;
            let logits = sess.tape.value(trace.logits).to_vec();
            let ce = sess.tape.cross_entropy(trace.logits, y)?;
            out.ce_sum += sess.tape.scalar(ce);
            out.correct += usize::from(crate::metrics::argmax(&logits) == y);
            out.samples += 1;
            let mut total = ce;
            if learned {
                let r = reward(&logits, y, &traj.masks, cfg.keep_prob)?;
                let lz = log_z(&mut sess, &cfg, trace.embedding)?;
                let lq = log_q.expect("learned modes accumulate log q");
                let tb = tb_loss(&mut sess.tape, lz, lq, r.log_r)?;
                out.tb_sum += sess.tape.scalar(tb);
                let weighted = sess.tape.scale(tb, self.hyper.lambda_tb)?;
                total = if freeze { weighted } else { sess.tape.add(ce, weighted)? };
            }
            let total = sess.tape.scale(total, inv_b)?;
            let (mut tape, bound) = sess.finish();
            tape.backward(total)?;
            self.net.params.accumulate_grads(&tape, &bound, 1.0);
        }
        if !freeze {
            self.classifier_opt.step(&mut self.net.params, |n| !n.starts_with(PARAM_PREFIX));
        }
        if learned {
            self.policy_opt.step(&mut self.net.params, |n| n.starts_with(PARAM_PREFIX));
        }
        if let Some((name, _)) = self.net.params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(GflowError::Diverged(format!("parameter `{name}` became non-finite")));
        }
        Ok(out)
    }

    /// One pass over `data` in an order shuffled by `order_rng`.
    pub fn train_epoch(
        &mut self,
        data: &[(Tensor, usize)],
        order_rng: &mut Rng,
        mask_rng: &mut Rng,
    ) -> Result<StepLosses, GflowError> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(order_rng);
        let mut total = StepLosses::default();
        for chunk in order.chunks(self.hyper.batch_size.max(1)) {
            let batch: Vec<(&Tensor, usize)> = chunk.iter().map(|&i| (&data[i].0, data[i].1)).collect();
            total.merge(self.train_step(&batch, mask_rng)?);
        }
        Ok(total)
    }
}
