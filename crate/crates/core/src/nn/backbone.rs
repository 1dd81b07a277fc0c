//! MiniRes (residual CNN) and MiniViT (patch transformer) backbones.
//!
//! Both expose an ordered list of dropout sites. During `forward` each site's
//! activation is handed to a [`SiteHook`], which returns the (possibly
//! masked) activation that continues through the network.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{kaiming_uniform, DropoutMask, NnError, ParamStore, Session, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    MiniRes,
    MiniVit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiniResConfig {
    pub stem_channels: usize,
    /// Output channels of each residual block; its length is the block count.
    pub channels: Vec<usize>,
}

impl Default for MiniResConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            channels: vec![8, 16, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiniVitConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
}

impl Default for MiniVitConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 32,
            n_layers: 2,
            n_heads: 2,
            mlp_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub input_size: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    pub minires: MiniResConfig,
    pub minivit: MiniVitConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::MiniRes,
            input_size: 32,
            in_channels: 3,
            n_classes: 3,
            minires: MiniResConfig::default(),
            minivit: MiniVitConfig::default(),
        }
    }
}

/// A named point in the network where a dropout mask attaches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSpec {
    pub name: String,
    /// Mask units: channels (MiniRes) or embedding dimensions (MiniViT).
    pub units: usize,
    /// Spatial grid of the activation: feature-map extent or patch grid.
    pub grid: (usize, usize),
    /// Activation is `[T, D]` tokens rather than `[C, H, W]`.
    pub tokens: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::Config(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.input_size == 0 || self.in_channels == 0 {
            return bad("input_size and in_channels must be positive".into());
        }
        match self.kind {
            BackboneKind::MiniRes => {
                let r = &self.minires;
                if r.channels.is_empty() || r.stem_channels == 0 || r.channels.contains(&0) {
                    return bad("minires needs at least one block and positive channel counts".into());
                }
                let div = 1usize << r.channels.len();
                if !self.input_size.is_multiple_of(div) {
                    return bad(format!(
                        "input_size {} must be divisible by 2^n_blocks = {div}",
                        self.input_size
                    ));
                }
            }
            BackboneKind::MiniVit => {
                let v = &self.minivit;
                if v.patch_size == 0 || !self.input_size.is_multiple_of(v.patch_size) {
                    return bad(format!(
                        "input_size {} not divisible by patch_size {}",
                        self.input_size, v.patch_size
                    ));
                }
                if v.n_heads == 0 || !v.embed_dim.is_multiple_of(v.n_heads) {
                    return bad(format!(
                        "embed_dim {} not divisible by n_heads {}",
                        v.embed_dim, v.n_heads
                    ));
                }
                if v.n_layers == 0 || v.mlp_dim == 0 {
                    return bad("minivit needs at least one layer and a positive mlp_dim".into());
                }
            }
        }
        Ok(())
    }

    /// One site per residual block or per Attention-MLP block, in forward order.
    pub fn dropout_sites(&self) -> Vec<SiteSpec> {
        match self.kind {
            BackboneKind::MiniRes => {
                let mut side = self.input_size;
                self.minires
                    .channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        side /= 2;
                        SiteSpec {
                            name: format!("block{i}"),
                            units: c,
                            grid: (side, side),
                            tokens: false,
                        }
                    })
                    .collect()
            }
            BackboneKind::MiniVit => {
                let g = self.input_size / self.minivit.patch_size;
                (0..self.minivit.n_layers)
                    .map(|i| SiteSpec {
                        name: format!("layer{i}"),
                        units: self.minivit.embed_dim,
                        grid: (g, g),
                        tokens: true,
                    })
                    .collect()
            }
        }
    }

    /// Width of the pooled input embedding handed to site hooks.
    pub fn embedding_dim(&self) -> usize {
        match self.kind {
            BackboneKind::MiniRes => self.minires.stem_channels,
            BackboneKind::MiniVit => self.minivit.embed_dim,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.input_size, self.input_size]
    }
}

/// Called once per dropout site during the forward pass.
pub trait SiteHook {
    /// `activation` is the block output entering the site; `embedding` is the
    /// pooled input embedding. Returns the activation to propagate.
    fn on_site(
        &mut self,
        sess: &mut Session<'_>,
        index: usize,
        site: &SiteSpec,
        activation: Var,
        embedding: Var,
    ) -> Result<Var, NnError>;
}

/// Leaves every site untouched (a network with no dropout at all).
pub struct NoDropout;

impl SiteHook for NoDropout {
    fn on_site(&mut self, _: &mut Session<'_>, _: usize, _: &SiteSpec, activation: Var, _: Var) -> Result<Var, NnError> {
        Ok(activation)
    }
}

struct FixedMasks<'m> {
    masks: &'m [DropoutMask],
}

impl SiteHook for FixedMasks<'_> {
    fn on_site(
        &mut self,
        sess: &mut Session<'_>,
        index: usize,
        site: &SiteSpec,
        activation: Var,
        _: Var,
    ) -> Result<Var, NnError> {
        let mask = &self.masks[index];
        let factor = sess.tape.constant(&[site.units], mask.as_f64())?;
        if site.tokens {
            sess.tape.scale_features(activation, factor)
        } else {
            sess.tape.scale_channels(activation, factor)
        }
    }
}

/// Node handles recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Pooled input embedding (stem channels or mean patch embedding).
    pub embedding: Var,
    /// Activation entering each site, before masking.
    pub site_inputs: Vec<Var>,
    /// Activation leaving each site, after masking.
    pub site_outputs: Vec<Var>,
}

pub fn init_backbone<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R, store: &mut ParamStore) -> Result<(), NnError> {
    cfg.validate()?;
    let zeros = |n: usize| Tensor::zeros(&[n]);
    match cfg.kind {
        BackboneKind::MiniRes => {
            let r = &cfg.minires;
            let c0 = r.stem_channels;
            let k = 3;
            store.insert("stem.w", kaiming_uniform(&[c0, cfg.in_channels, k, k], cfg.in_channels * k * k, rng))?;
            store.insert("stem.b", zeros(c0))?;
            let mut c_in = c0;
            for (i, &c) in r.channels.iter().enumerate() {
                let p = format!("block{i}");
                store.insert(format!("{p}.conv1.w"), kaiming_uniform(&[c, c_in, k, k], c_in * k * k, rng))?;
                store.insert(format!("{p}.conv1.b"), zeros(c))?;
                store.insert(format!("{p}.conv2.w"), kaiming_uniform(&[c, c, k, k], c * k * k, rng))?;
                store.insert(format!("{p}.conv2.b"), zeros(c))?;
                if c != c_in {
                    store.insert(format!("{p}.proj.w"), kaiming_uniform(&[c, c_in, 1, 1], c_in, rng))?;
                    store.insert(format!("{p}.proj.b"), zeros(c))?;
                }
                c_in = c;
            }
            store.insert("head.w", kaiming_uniform(&[cfg.n_classes, c_in], c_in, rng))?;
            store.insert("head.b", zeros(cfg.n_classes))?;
        }
        BackboneKind::MiniVit => {
            let v = &cfg.minivit;
            let d = v.embed_dim;
            let patch_dim = cfg.in_channels * v.patch_size * v.patch_size;
            let tokens = (cfg.input_size / v.patch_size).pow(2);
            store.insert("patch.w", kaiming_uniform(&[d, patch_dim], patch_dim, rng))?;
            store.insert("patch.b", zeros(d))?;
            let normal = Normal::new(0.0, 0.02).expect("valid std");
            let pos = (0..tokens * d).map(|_| normal.sample(rng)).collect();
            store.insert("pos", Tensor::new(&[tokens, d], pos)?)?;
            for i in 0..v.n_layers {
                let p = format!("layer{i}");
                store.insert(format!("{p}.ln1.g"), Tensor::new(&[d], vec![1.0; d])?)?;
                store.insert(format!("{p}.ln1.b"), zeros(d))?;
                for proj in ["q", "k", "v", "o"] {
                    store.insert(format!("{p}.attn.{proj}.w"), kaiming_uniform(&[d, d], d, rng))?;
                    store.insert(format!("{p}.attn.{proj}.b"), zeros(d))?;
                }
                store.insert(format!("{p}.ln2.g"), Tensor::new(&[d], vec![1.0; d])?)?;
                store.insert(format!("{p}.ln2.b"), zeros(d))?;
                store.insert(format!("{p}.mlp.fc1.w"), kaiming_uniform(&[v.mlp_dim, d], d, rng))?;
                store.insert(format!("{p}.mlp.fc1.b"), zeros(v.mlp_dim))?;
                store.insert(format!("{p}.mlp.fc2.w"), kaiming_uniform(&[d, v.mlp_dim], v.mlp_dim, rng))?;
                store.insert(format!("{p}.mlp.fc2.b"), zeros(d))?;
            }
            store.insert("head.w", kaiming_uniform(&[cfg.n_classes, d], d, rng))?;
            store.insert("head.b", zeros(cfg.n_classes))?;
        }
    }
    Ok(())
}

/// `relu(conv(relu(conv(x))) + shortcut(x))`; the shortcut is the identity
/// unless `{prefix}.proj.w` exists (1×1 projection).
pub fn residual_block(sess: &mut Session<'_>, x: Var, prefix: &str) -> Result<Var, NnError> {
    let w1 = sess.param(&format!("{prefix}.conv1.w"))?;
    let b1 = sess.param(&format!("{prefix}.conv1.b"))?;
    let w2 = sess.param(&format!("{prefix}.conv2.w"))?;
    let b2 = sess.param(&format!("{prefix}.conv2.b"))?;
    let h = sess.tape.conv2d(x, w1, Some(b1), 1)?;
    let h = sess.tape.relu(h)?;
    let h = sess.tape.conv2d(h, w2, Some(b2), 1)?;
    let proj = format!("{prefix}.proj.w");
    let shortcut = if sess.store().contains(&proj) {
        let pw = sess.param(&proj)?;
        let pb = sess.param(&format!("{prefix}.proj.b"))?;
        sess.tape.conv2d(x, pw, Some(pb), 0)?
    } else {
        x
    };
    let y = sess.tape.add(h, shortcut)?;
    sess.tape.relu(y)
}

/// Multi-head self-attention over `[T, d]` tokens.
///
/// Returns the output projection and, per head, the `[T, T]` attention
/// weights. The concatenated head outputs (before the output projection) are
/// returned as the third element.
pub fn multi_head_attention(
    sess: &mut Session<'_>,
    x: Var,
    prefix: &str,
    n_heads: usize,
) -> Result<(Var, Vec<Var>, Var), NnError> {
    let shape = sess.tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(NnError::Shape(format!("attention input {shape:?} is not [T, d]")));
    }
    let d = shape[1];
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(NnError::Shape(format!("embed dim {d} not divisible into {n_heads} heads")));
    }
    let proj = |name: &str, sess: &mut Session<'_>| -> Result<Var, NnError> {
        let w = sess.param(&format!("{prefix}.attn.{name}.w"))?;
        let b = sess.param(&format!("{prefix}.attn.{name}.b"))?;
        if sess.tape.shape(w) != [d, d] {
            return Err(NnError::Shape(format!("{prefix}.attn.{name}.w expects [{d}, {d}]")));
        }
        sess.tape.dense(x, w, Some(b))
    };
    let q = proj("q", sess)?;
    let k = proj("k", sess)?;
    let v = proj("v", sess)?;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = sess.tape.slice_cols(q, h * dh, dh)?;
        let kh = sess.tape.slice_cols(k, h * dh, dh)?;
        let vh = sess.tape.slice_cols(v, h * dh, dh)?;
        let kt = sess.tape.transpose(kh)?;
        let scores = sess.tape.matmul(qh, kt)?;
        let scores = sess.tape.scale(scores, scale)?;
        let attn = sess.tape.softmax_rows(scores)?;
        heads.push(sess.tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let concat = if heads.len() == 1 { heads[0] } else { sess.tape.concat_cols(&heads)? };
    let wo = sess.param(&format!("{prefix}.attn.o.w"))?;
    let bo = sess.param(&format!("{prefix}.attn.o.b"))?;
    let out = sess.tape.dense(concat, wo, Some(bo))?;
    Ok((out, weights, concat))
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `+ MLP(LN(·))`.
pub fn attention_block(sess: &mut Session<'_>, x: Var, prefix: &str, n_heads: usize) -> Result<Var, NnError> {
    let g1 = sess.param(&format!("{prefix}.ln1.g"))?;
    let b1 = sess.param(&format!("{prefix}.ln1.b"))?;
    let h = sess.tape.layer_norm(x, g1, b1)?;
    let (a, _, _) = multi_head_attention(sess, h, prefix, n_heads)?;
    let x1 = sess.tape.add(x, a)?;
    let g2 = sess.param(&format!("{prefix}.ln2.g"))?;
    let b2 = sess.param(&format!("{prefix}.ln2.b"))?;
    let h2 = sess.tape.layer_norm(x1, g2, b2)?;
    let w1 = sess.param(&format!("{prefix}.mlp.fc1.w"))?;
    let c1 = sess.param(&format!("{prefix}.mlp.fc1.b"))?;
    let w2 = sess.param(&format!("{prefix}.mlp.fc2.w"))?;
    let c2 = sess.param(&format!("{prefix}.mlp.fc2.b"))?;
    let m = sess.tape.dense(h2, w1, Some(c1))?;
    let m = sess.tape.gelu(m)?;
    let m = sess.tape.dense(m, w2, Some(c2))?;
    sess.tape.add(x1, m)
}

/// Runs the backbone on one preprocessed `[C, H, W]` image.
pub fn forward(
    cfg: &BackboneConfig,
    sess: &mut Session<'_>,
    x: &Tensor,
    hook: &mut dyn SiteHook,
) -> Result<ForwardTrace, NnError> {
    if x.shape() != cfg.input_shape() {
        return Err(NnError::Shape(format!(
            "input {:?} does not match backbone input {:?}",
            x.shape(),
            cfg.input_shape()
        )));
    }
    let sites = cfg.dropout_sites();
    let input = sess.input(x)?;
    let mut site_inputs = Vec::with_capacity(sites.len());
    let mut site_outputs = Vec::with_capacity(sites.len());
    let (pooled, embedding) = match cfg.kind {
        BackboneKind::MiniRes => {
            let w = sess.param("stem.w")?;
            let b = sess.param("stem.b")?;
            let h = sess.tape.conv2d(input, w, Some(b), 1)?;
            let mut h = sess.tape.relu(h)?;
            let embedding = sess.tape.mean_spatial(h)?;
            for (i, site) in sites.iter().enumerate() {
                h = sess.tape.avg_pool2(h)?;
                let y = residual_block(sess, h, &site.name)?;
                site_inputs.push(y);
                h = hook.on_site(sess, i, site, y, embedding)?;
                site_outputs.push(h);
            }
            (sess.tape.mean_spatial(h)?, embedding)
        }
        BackboneKind::MiniVit => {
            let v = &cfg.minivit;
            let patches = sess.tape.patchify(input, v.patch_size)?;
            let w = sess.param("patch.w")?;
            let b = sess.param("patch.b")?;
            let tok = sess.tape.dense(patches, w, Some(b))?;
            let pos = sess.param("pos")?;
            let mut h = sess.tape.add(tok, pos)?;
            let embedding = sess.tape.mean_tokens(h)?;
            for (i, site) in sites.iter().enumerate() {
                let y = attention_block(sess, h, &site.name, v.n_heads)?;
                site_inputs.push(y);
                h = hook.on_site(sess, i, site, y, embedding)?;
                site_outputs.push(h);
            }
            (sess.tape.mean_tokens(h)?, embedding)
        }
    };
    let hw = sess.param("head.w")?;
    let hb = sess.param("head.b")?;
    let logits = sess.tape.dense(pooled, hw, Some(hb))?;
    Ok(ForwardTrace {
        logits,
        embedding,
        site_inputs,
        site_outputs,
    })
}

/// Forward pass with explicit masks, one per site in site order.
pub fn forward_with_masks(
    cfg: &BackboneConfig,
    sess: &mut Session<'_>,
    x: &Tensor,
    masks: &[DropoutMask],
) -> Result<ForwardTrace, NnError> {
    let sites = cfg.dropout_sites();
    for site in &sites {
        let n = masks.iter().filter(|m| m.site == site.name).count();
        if n == 0 {
            return Err(NnError::Mask(format!("missing mask for site `{}`", site.name)));
        }
        if n > 1 {
            return Err(NnError::Mask(format!("site `{}` has {n} masks", site.name)));
        }
    }
    if let Some(extra) = masks.iter().find(|m| !sites.iter().any(|s| s.name == m.site)) {
        return Err(NnError::Mask(format!("mask for unknown site `{}`", extra.site)));
    }
    let mut ordered = Vec::with_capacity(sites.len());
    for site in &sites {
        let m = masks.iter().find(|m| m.site == site.name).expect("checked above");
        if m.len() != site.units {
            return Err(NnError::Mask(format!(
                "mask for `{}` has {} units, site has {}",
                site.name,
                m.len(),
                site.units
            )));
        }
        ordered.push(m.clone());
    }
    forward(cfg, sess, x, &mut FixedMasks { masks: &ordered })
}
