use super::{init_gflowout, GFlowOutConfig, GflowError, MaskSampler, MaskTrajectory, Regime};
use crate::nn::{forward, softmax, BackboneConfig, ForwardTrace, GradFilter, ParamStore, Session, SiteSpec, Tensor};
use crate::rng::{stream, Rng, Stream};

pub use crate::metrics::PredictiveDistribution;

/// A backbone with its mask machinery and all parameters.
#[derive(Debug, Clone)]
pub struct Network {
    pub backbone: BackboneConfig,
    pub gflowout: GFlowOutConfig,
    pub params: ParamStore,
}

impl Network {
    /// Fresh parameters. Backbone and policy weights come from separate
    /// streams of `seed`, so the backbone init does not depend on the mode.
    pub fn new(backbone: BackboneConfig, gflowout: GFlowOutConfig, seed: u64) -> Result<Self, GflowError> {
        let mut params = ParamStore::new();
        crate::nn::init_backbone(&backbone, &mut stream(seed, Stream::BackboneInit), &mut params)?;
        init_gflowout(&gflowout, &backbone, &mut stream(seed, Stream::PolicyInit), &mut params)?;
        Ok(Self {
            backbone,
            gflowout,
            params,
        })
    }

    /// Wraps loaded parameters, checking they match exactly the names and
    /// shapes the configuration requires.
    pub fn from_params(backbone: BackboneConfig, gflowout: GFlowOutConfig, params: ParamStore) -> Result<Self, GflowError> {
        let reference = Self::new(backbone, gflowout, 0)?;
        if reference.params.len() != params.len() {
            return Err(GflowError::Config(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(GflowError::Config(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { params, ..reference })
    }

    pub fn sites(&self) -> Vec<SiteSpec> {
        self.backbone.dropout_sites()
    }

    pub fn total_mask_units(&self) -> usize {
        self.sites().iter().map(|s| s.units).sum()
    }

    fn check_rng(&self, regime: &Regime, rng: &Option<&mut Rng>) -> Result<(), GflowError> {
        if *regime == Regime::Sample && self.gflowout.mode.is_stochastic() && rng.is_none() {
            return Err(GflowError::MissingRng(self.gflowout.mode));
        }
        Ok(())
    }

    /// One forward pass; returns the trace (on `sess`'s tape), the sampled
    /// trajectory and the differentiable `log q` node when there is one.
    pub fn forward_on<'s>(
        &self,
        sess: &mut Session<'s>,
        x: &Tensor,
        regime: Regime,
        rng: Option<&mut Rng>,
    ) -> Result<(ForwardTrace, MaskTrajectory, Option<crate::nn::Var>), GflowError> {
        self.check_rng(&regime, &rng)?;
        let mut sampler = MaskSampler::new(&self.gflowout, regime, rng);
        let trace = forward(&self.backbone, sess, x, &mut sampler)?;
        let log_q = sampler.log_q_var();
        Ok((trace, sampler.into_trajectory(), log_q))
    }

    fn probs(&self, x: &Tensor, regime: Regime, rng: Option<&mut Rng>) -> Result<Vec<f64>, GflowError> {
        let mut sess = Session::new(&self.params, GradFilter::Nothing);
        let (trace, _, _) = self.forward_on(&mut sess, x, regime, rng)?;
        Ok(softmax(sess.tape.value(trace.logits)))
    }

    /// Class probabilities of the deterministic expected-mask pass.
    pub fn expected_probs(&self, x: &Tensor) -> Result<Vec<f64>, GflowError> {
        self.probs(x, Regime::Expected, None)
    }

    /// Class probabilities under one sampled mask configuration.
    pub fn sampled_probs(&self, x: &Tensor, rng: Option<&mut Rng>) -> Result<Vec<f64>, GflowError> {
        self.probs(x, Regime::Sample, rng)
    }

    /// `k` stochastic passes with independently sampled masks plus the
    /// expected-mask point prediction.
    pub fn predictive_passes(
        &self,
        id: &str,
        x: &Tensor,
        label: usize,
        k: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<PredictiveDistribution, GflowError> {
        if k == 0 {
            return Err(GflowError::Config("at least one forward pass is required".into()));
        }
        let mut probs = Vec::with_capacity(k);
        for _ in 0..k {
            probs.push(self.sampled_probs(x, rng.as_deref_mut())?);
        }
        Ok(PredictiveDistribution {
            id: id.to_string(),
            label,
            probs,
            point_probs: self.expected_probs(x)?,
        })
    }
}
