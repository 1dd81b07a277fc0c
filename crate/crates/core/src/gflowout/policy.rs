use rand::Rng;

use super::{GFlowOutConfig, GflowError, MaskMode, PROB_CLAMP};
use crate::nn::{kaiming_uniform, BackboneConfig, NnError, ParamStore, Session, Tensor, Var};

/// All policy and log-partition parameters live under this name prefix.
pub const PARAM_PREFIX: &str = "gflowout/";
/// Scalar log-partition parameter (context-only modes).
pub const LOG_Z_PARAM: &str = "gflowout/log_z";

// Output-layer weights start small so initial keep-probabilities sit near
// the prior regardless of the context.
const OUTPUT_INIT_SCALE: f64 = 0.1;

fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP.0, PROB_CLAMP.1);
    (p / (1.0 - p)).ln()
}

fn site_prefix(index: usize) -> String {
    format!("{PARAM_PREFIX}site{index}")
}

/// Adds policy and log-partition parameters for learned mask modes.
/// `none` and `random` have no trainable mask parameters.
pub fn init_gflowout<R: Rng + ?Sized>(
    cfg: &GFlowOutConfig,
    backbone: &BackboneConfig,
    rng: &mut R,
    store: &mut ParamStore,
) -> Result<(), GflowError> {
    cfg.validate()?;
    if !cfg.mode.is_learned() {
        return Ok(());
    }
    let emb = backbone.embedding_dim();
    let hidden = cfg.policy_hidden;
    for (i, site) in backbone.dropout_sites().iter().enumerate() {
        let p = site_prefix(i);
        let in_dim = match cfg.mode {
            MaskMode::BottomUp => emb + site.units,
            _ => site.units,
        };
        store.insert(format!("{p}.fc1.w"), kaiming_uniform(&[hidden, in_dim], in_dim, rng))?;
        store.insert(format!("{p}.fc1.b"), Tensor::zeros(&[hidden]))?;
        let mut w2 = kaiming_uniform(&[site.units, hidden], hidden, rng);
        w2.data_mut().iter_mut().for_each(|v| *v *= OUTPUT_INIT_SCALE);
        store.insert(format!("{p}.fc2.w"), w2)?;
        let b2 = vec![logit(cfg.keep_prob); site.units];
        store.insert(format!("{p}.fc2.b"), Tensor::new(&[site.units], b2)?)?;
    }
    match cfg.mode {
        MaskMode::BottomUp => {
            let hz = cfg.log_z_hidden;
            store.insert(format!("{PARAM_PREFIX}logz.fc1.w"), kaiming_uniform(&[hz, emb], emb, rng))?;
            store.insert(format!("{PARAM_PREFIX}logz.fc1.b"), Tensor::zeros(&[hz]))?;
            let mut w2 = kaiming_uniform(&[1, hz], hz, rng);
            w2.data_mut().iter_mut().for_each(|v| *v *= OUTPUT_INIT_SCALE);
            store.insert(format!("{PARAM_PREFIX}logz.fc2.w"), w2)?;
            store.insert(format!("{PARAM_PREFIX}logz.fc2.b"), Tensor::zeros(&[1]))?;
        }
        _ => store.insert(LOG_Z_PARAM, Tensor::zeros(&[1]))?,
    }
    Ok(())
}

fn mlp(sess: &mut Session<'_>, prefix: &str, input: Var) -> Result<Var, NnError> {
    let w1 = sess.param(&format!("{prefix}.fc1.w"))?;
    let b1 = sess.param(&format!("{prefix}.fc1.b"))?;
    let w2 = sess.param(&format!("{prefix}.fc2.w"))?;
    let b2 = sess.param(&format!("{prefix}.fc2.b"))?;
    let h = sess.tape.dense(input, w1, Some(b1))?;
    let h = sess.tape.gelu(h)?;
    sess.tape.dense(h, w2, Some(b2))
}

/// Per-unit keep-probabilities for site `index`: elementwise logistic of the
/// policy MLP output, clamped to [`PROB_CLAMP`].
///
/// `context` is the activation entering the site and is mean-pooled over
/// positions or tokens. `embedding` and `context` are detached first: the policy reads the
/// network's activations but never sends gradient into the backbone.
pub fn policy_keep_probs(
    sess: &mut Session<'_>,
    cfg: &GFlowOutConfig,
    index: usize,
    embedding: Var,
    context: Var,
) -> Result<Var, GflowError> {
    let h = sess.tape.detach(context)?;
    let h = match sess.tape.shape(h).len() {
        3 => sess.tape.mean_spatial(h)?,
        2 => sess.tape.mean_tokens(h)?,
        _ => h,
    };
    let input = match cfg.mode {
        MaskMode::BottomUp => {
            let x = sess.tape.detach(embedding)?;
            sess.tape.concat(&[x, h])?
        }
        MaskMode::TopDown => h,
        other => return Err(GflowError::Config(format!("mode `{other}` has no mask policy"))),
    };
    let logits = mlp(sess, &site_prefix(index), input)?;
    let p = sess.tape.sigmoid(logits)?;
    Ok(sess.tape.clamp(p, PROB_CLAMP.0, PROB_CLAMP.1)?)
}

/// Learned log-partition as a scalar node: an MLP of the (detached) input
/// embedding for `bottomup`, a single parameter for `topdown`.
pub fn log_z(sess: &mut Session<'_>, cfg: &GFlowOutConfig, embedding: Var) -> Result<Var, GflowError> {
    let v = match cfg.mode {
        MaskMode::BottomUp => {
            let x = sess.tape.detach(embedding)?;
            mlp(sess, &format!("{PARAM_PREFIX}logz"), x)?
        }
        MaskMode::TopDown => sess.param(LOG_Z_PARAM)?,
        other => return Err(GflowError::Config(format!("mode `{other}` has no partition estimate"))),
    };
    Ok(sess.tape.index(v, 0)?)
}
