use gflowmask_core::data::{apply_noise, apply_noise_normalized, ImageSample, NoiseKind, NoiseSpec, PreprocessConfig};
use gflowmask_core::gflowout::{enumerable_toy, tb_loss_value, MaskMode};
use gflowmask_core::metrics::{auc_binary, ece_from_pairs, entropy, weighted_prf};
use gflowmask_core::nn::{softmax, GradFilter, Session, Tensor};
use gflowmask_core::rng::{stream, Stream};
use proptest::prelude::*;

fn prob_vector(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, 1..max_len).prop_map(|z| softmax(&z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-500.0f64..500.0, 1..12)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn entropy_bounds_and_permutation(p in prob_vector(10), rot in 0usize..10) {
        let h = entropy(&p).unwrap();
        let c = p.len() as f64;
        prop_assert!(h >= 0.0);
        prop_assert!(h <= c.ln() + 1e-12);
        let mut q = p.clone();
        q.rotate_left(rot % p.len());
        prop_assert!((entropy(&q).unwrap() - h).abs() < 1e-12);
        let uniform = vec![1.0 / c; p.len()];
        prop_assert!((entropy(&uniform).unwrap() - c.ln()).abs() < 1e-12);
    }

    #[test]
    fn ece_range_permutation_and_counts(
        pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..80),
        m in 1usize..20,
        rot in 0usize..80,
    ) {
        let (e, bins) = ece_from_pairs(&pairs, m).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(bins.bins.iter().map(|b| b.count).sum::<usize>(), pairs.len());
        let mut shuffled = pairs.clone();
        shuffled.rotate_left(rot % pairs.len());
        shuffled.reverse();
        let (e2, _) = ece_from_pairs(&shuffled, m).unwrap();
        prop_assert!((e - e2).abs() < 1e-12);
        // the score only sees non-empty bins
        let n = pairs.len() as f64;
        let manual: f64 = bins
            .bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n * (b.accuracy() - b.avg_conf()).abs())
            .sum();
        prop_assert!((e - manual).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_transforms(
        data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..60),
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
        let pos: Vec<bool> = data.iter().map(|d| d.1).collect();
        let base = auc_binary(&scores, &pos);
        let cubic: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s).collect();
        let exp: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() - 3.0).collect();
        prop_assert_eq!(auc_binary(&cubic, &pos), base);
        prop_assert_eq!(auc_binary(&exp, &pos), base);
        if let Some(a) = base {
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn single_class_predictions_recall_equals_prevalence(
        labels in prop::collection::vec(0usize..4, 1..60),
        k in 0usize..4,
    ) {
        let preds = vec![k; labels.len()];
        let prf = weighted_prf(&labels, &preds, 4).unwrap();
        let prevalence = labels.iter().filter(|&&l| l == k).count() as f64 / labels.len() as f64;
        prop_assert!((prf.recall - prevalence).abs() < 1e-12);
    }

    #[test]
    fn noise_stays_in_range(
        pixels in prop::collection::vec(0.0f64..=1.0, 27),
        kind in prop_oneof![Just(NoiseKind::Gaussian), Just(NoiseKind::SaltPepper), Just(NoiseKind::Speckle)],
        param in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let img = ImageSample::new("p", 0, 3, 3, pixels).unwrap();
        let spec = NoiseSpec { kind, param };
        let out = apply_noise(&img, spec, &mut stream(seed, Stream::Noise)).unwrap();
        prop_assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));

        let cfg = PreprocessConfig::default();
        let (lo, hi) = cfg.normalized_bounds();
        let t = Tensor::new(
            &[3, 3, 3],
            (0..27).map(|i| {
                let c = i / 9;
                (img.pixels[(i % 9) * 3 + c] - cfg.mean[c]) / cfg.std[c]
            }).collect(),
        ).unwrap();
        let noisy = apply_noise_normalized(&t, spec, &cfg, &mut stream(seed, Stream::Noise)).unwrap();
        for (i, v) in noisy.data().iter().enumerate() {
            let c = i / 9;
            prop_assert!(*v >= lo[c] - 1e-12 && *v <= hi[c] + 1e-12);
        }
    }

    #[test]
    fn zero_noise_is_identity(pixels in prop::collection::vec(0.0f64..=1.0, 12), seed in 0u64..100) {
        let img = ImageSample::new("z", 1, 2, 2, pixels).unwrap();
        for kind in [NoiseKind::Gaussian, NoiseKind::SaltPepper, NoiseKind::Speckle] {
            let out = apply_noise(&img, NoiseSpec { kind, param: 0.0 }, &mut stream(seed, Stream::Noise)).unwrap();
            prop_assert_eq!(&out, &img);
        }
    }

    #[test]
    fn tb_loss_is_nonnegative_and_zero_when_balanced(
        log_z in -10.0f64..10.0,
        log_q in -20.0f64..0.0,
        log_r in -20.0f64..0.0,
    ) {
        let l = tb_loss_value(log_z, log_q, log_r).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(tb_loss_value(log_r - log_q, log_q, log_r).unwrap() < 1e-20);
        prop_assert_eq!(tb_loss_value(0.0, -1.0, -1.0).unwrap(), 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampled_log_q_is_nonpositive(seed in 0u64..1000) {
        for mode in [MaskMode::BottomUp, MaskMode::TopDown, MaskMode::Random] {
            let (net, x, _) = enumerable_toy(mode, seed).unwrap();
            let mut rng = stream(seed, Stream::Masks);
            let mut sess = Session::new(&net.params, GradFilter::Nothing);
            let (_, traj, _) = net.forward_on(&mut sess, &x, gflowmask_core::gflowout::Regime::Sample, Some(&mut rng)).unwrap();
            prop_assert!(traj.log_q <= 0.0);
            prop_assert!(traj.log_q.is_finite());
            let sites: Vec<_> = traj.masks.iter().map(|m| (m.site.clone(), m.len())).collect();
            prop_assert_eq!(sites, vec![("block0".to_string(), 2), ("block1".to_string(), 2)]);
        }
    }
}
