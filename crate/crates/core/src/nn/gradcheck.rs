//! Central finite-difference gradient checking.

use super::{GradFilter, NnError, ParamStore, Session, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a small absolute floor so that entries whose true
/// gradient is ~0 are judged on absolute agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of the scalar built by `loss` with central
/// differences at step `eps` for the listed `(parameter, flat index)` pairs.
pub fn check<F>(store: &ParamStore, loss: F, entries: &[(String, usize)], eps: f64) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Session<'_>) -> Result<Var, NnError>,
{
    let mut sess = Session::new(store, GradFilter::All);
    let root = loss(&mut sess)?;
    let (mut tape, bound) = sess.finish();
    tape.backward(root)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    analytic_store.accumulate_grads(&tape, &bound, 1.0);

    let eval = |s: &ParamStore| -> Result<f64, NnError> {
        let mut sess = Session::new(s, GradFilter::Nothing);
        let root = loss(&mut sess)?;
        Ok(sess.tape.scalar(root))
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = store.clone();
    for (name, idx) in entries {
        let analytic = analytic_store.get(name)?.grad().map(|g| g[*idx]).unwrap_or(0.0);
        let orig = probe.get(name)?.data()[*idx];
        probe.get_mut(name)?.data_mut()[*idx] = orig + eps;
        let plus = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[*idx] = orig - eps;
        let minus = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[*idx] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name.clone(), *idx, analytic, numeric));
        }
    }
    Ok(report)
}

/// Every scalar of every parameter.
pub fn all_entries(store: &ParamStore) -> Vec<(String, usize)> {
    store
        .iter()
        .flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.to_string(), i)))
        .collect()
}

fn random_tensor<R: rand::Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("consistent shape")
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output entry carries a
/// distinct upstream gradient.
fn project(sess: &mut Session<'_>, out: Var, r: &[f64]) -> Result<Var, NnError> {
    let shape = sess.tape.shape(out).to_vec();
    let c = sess.tape.constant(&shape, r.to_vec())?;
    let m = sess.tape.mul(out, c)?;
    sess.tape.sum(m)
}

fn projection_for(shape: &[usize], seed: u64) -> Vec<f64> {
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::Eval);
    random_tensor(shape, &mut rng).into_data()
}

type LayerCase = (&'static str, ParamStore, Box<dyn Fn(&mut Session<'_>) -> Result<Var, NnError>>);

/// Finite-difference checks of every primitive layer type on small random
/// instances: dense, conv, pooling, activations, layer-norm, attention,
/// residual block, patch embedding, mask multiplies, cross-entropy and the Bernoulli
/// log-probability. Every scalar parameter is checked.
pub fn layer_suite(seed: u64, eps: f64) -> Result<Vec<(String, GradCheckReport)>, NnError> {
    use super::{attention_block, init_backbone, residual_block, BackboneConfig, BackboneKind, MiniVitConfig};
    let mut rng = crate::rng::stream(seed, crate::rng::Stream::BackboneInit);
    let mut cases: Vec<LayerCase> = Vec::new();

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&[3, 5], &mut rng))?;
    s.insert("w", random_tensor(&[4, 5], &mut rng))?;
    s.insert("b", random_tensor(&[4], &mut rng))?;
    let r = projection_for(&[3, 4], seed);
    cases.push((
        "dense",
        s,
        Box::new(move |sess| {
            let (x, w, b) = (sess.param("x")?, sess.param("w")?, sess.param("b")?);
            let y = sess.tape.dense(x, w, Some(b))?;
            project(sess, y, &r)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&[2, 5, 4], &mut rng))?;
    s.insert("w", random_tensor(&[3, 2, 3, 3], &mut rng))?;
    s.insert("b", random_tensor(&[3], &mut rng))?;
    let r = projection_for(&[3, 5, 4], seed + 1);
    cases.push((
        "conv2d",
        s,
        Box::new(move |sess| {
            let (x, w, b) = (sess.param("x")?, sess.param("w")?, sess.param("b")?);
            let y = sess.tape.conv2d(x, w, Some(b), 1)?;
            project(sess, y, &r)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&[2, 4, 6], &mut rng))?;
    let r = projection_for(&[2], seed + 2);
    let r2 = projection_for(&[2, 2, 3], seed + 3);
    cases.push((
        "pooling",
        s,
        Box::new(move |sess| {
            let x = sess.param("x")?;
            let p = sess.tape.avg_pool2(x)?;
            let m = sess.tape.mean_spatial(x)?;
            let a = project(sess, p, &r2)?;
            let b = project(sess, m, &r)?;
            sess.tape.add(a, b)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&[7], &mut rng))?;
    let r = projection_for(&[7], seed + 4);
    cases.push((
        "activations",
        s,
        Box::new(move |sess| {
            let x = sess.param("x")?;
            let g = sess.tape.gelu(x)?;
            let sg = sess.tape.sigmoid(x)?;
            let sq = sess.tape.square(x)?;
            let re = sess.tape.relu(x)?;
            let a = project(sess, g, &r)?;
            let b = project(sess, sg, &r)?;
            let c = project(sess, sq, &r)?;
            let d = project(sess, re, &r)?;
            let ab = sess.tape.add(a, b)?;
            let cd = sess.tape.add(c, d)?;
            sess.tape.add(ab, cd)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&[2, 4, 4], &mut rng))?;
    let r = projection_for(&[8], seed + 10);
    let rm = projection_for(&[4, 8], seed + 11);
    cases.push((
        "patchify",
        s,
        Box::new(move |sess| {
            let x = sess.param("x")?;
            let p = sess.tape.patchify(x, 2)?;
            let sq = sess.tape.square(p)?;
            let m = sess.tape.mean_tokens(sq)?;
            let a = project(sess, p, &rm)?;
            let b = project(sess, m, &r)?;
            sess.tape.add(a, b)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&[3, 6], &mut rng))?;
    s.insert("g", random_tensor(&[6], &mut rng))?;
    s.insert("b", random_tensor(&[6], &mut rng))?;
    let r = projection_for(&[3, 6], seed + 5);
    cases.push((
        "layer_norm",
        s,
        Box::new(move |sess| {
            let (x, g, b) = (sess.param("x")?, sess.param("g")?, sess.param("b")?);
            let y = sess.tape.layer_norm(x, g, b)?;
            project(sess, y, &r)
        }),
    ));

    let vit = BackboneConfig {
        kind: BackboneKind::MiniVit,
        minivit: MiniVitConfig {
            embed_dim: 8,
            n_heads: 2,
            mlp_dim: 12,
            n_layers: 1,
            ..MiniVitConfig::default()
        },
        ..BackboneConfig::default()
    };
    let mut s = ParamStore::new();
    init_backbone(&vit, &mut rng, &mut s)?;
    // biases start at zero; randomize them so their paths are exercised
    for (name, t) in s.iter_mut() {
        if name.starts_with("layer0") {
            let shape = t.shape().to_vec();
            *t = random_tensor(&shape, &mut rng).with_grad();
        }
    }
    s.insert("x", random_tensor(&[3, 8], &mut rng))?;
    let r = projection_for(&[3, 8], seed + 6);
    cases.push((
        "attention_block",
        s,
        Box::new(move |sess| {
            let x = sess.param("x")?;
            let y = attention_block(sess, x, "layer0", 2)?;
            project(sess, y, &r)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("x", random_tensor(&[2, 4, 4], &mut rng))?;
    for (name, shape) in [
        ("blk.conv1.w", vec![3, 2, 3, 3]),
        ("blk.conv1.b", vec![3]),
        ("blk.conv2.w", vec![3, 3, 3, 3]),
        ("blk.conv2.b", vec![3]),
        ("blk.proj.w", vec![3, 2, 1, 1]),
        ("blk.proj.b", vec![3]),
    ] {
        s.insert(name, random_tensor(&shape, &mut rng))?;
    }
    let r = projection_for(&[3, 4, 4], seed + 7);
    cases.push((
        "residual_block",
        s,
        Box::new(move |sess| {
            let x = sess.param("x")?;
            let y = residual_block(sess, x, "blk")?;
            project(sess, y, &r)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("a", random_tensor(&[3, 2, 2], &mut rng))?;
    s.insert("m", random_tensor(&[3], &mut rng))?;
    s.insert("t", random_tensor(&[4, 5], &mut rng))?;
    s.insert("f", random_tensor(&[5], &mut rng))?;
    let ra = projection_for(&[3, 2, 2], seed + 8);
    let rt = projection_for(&[4, 5], seed + 9);
    cases.push((
        "mask_multiply",
        s,
        Box::new(move |sess| {
            let (a, m, t, f) = (sess.param("a")?, sess.param("m")?, sess.param("t")?, sess.param("f")?);
            let y1 = sess.tape.scale_channels(a, m)?;
            let y2 = sess.tape.scale_features(t, f)?;
            let p1 = project(sess, y1, &ra)?;
            let p2 = project(sess, y2, &rt)?;
            sess.tape.add(p1, p2)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("z", random_tensor(&[5], &mut rng))?;
    cases.push((
        "cross_entropy",
        s,
        Box::new(|sess| {
            let z = sess.param("z")?;
            sess.tape.cross_entropy(z, 3)
        }),
    ));

    let mut s = ParamStore::new();
    s.insert("u", random_tensor(&[6], &mut rng))?;
    cases.push((
        "bernoulli_log_prob",
        s,
        Box::new(|sess| {
            let u = sess.param("u")?;
            let p = sess.tape.sigmoid(u)?;
            let p = sess.tape.clamp(p, 1e-4, 1.0 - 1e-4)?;
            sess.tape.bernoulli_log_prob(p, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
        }),
    ));

    let mut out = Vec::with_capacity(cases.len());
    for (name, store, loss) in cases {
        let entries = all_entries(&store);
        out.push((name.to_string(), check(&store, |s| loss(s), &entries, eps)?));
    }
    Ok(out)
}

/// `n` distinct parameter entries drawn uniformly from `store`.
pub fn random_entries<R: rand::Rng + ?Sized>(store: &ParamStore, n: usize, rng: &mut R) -> Vec<(String, usize)> {
    let all = all_entries(store);
    rand::seq::index::sample(rng, all.len(), n.min(all.len()))
        .into_iter()
        .map(|i| all[i].clone())
        .collect()
}
