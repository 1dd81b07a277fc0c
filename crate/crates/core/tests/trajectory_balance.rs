use gflowmask_core::gflowout::{
    brute_force_mask_distribution, enumerable_toy, fit_toy_policy, tb_loss_value, MaskMode, TrainHyper, Trainer,
    PARAM_PREFIX,
};
use gflowmask_core::rng::{stream, Stream};

const STEPS: usize = 2000;

#[test]
fn trained_policy_matches_reward_posterior() {
    for mode in [MaskMode::BottomUp, MaskMode::TopDown] {
        let (net, x, y, last_tb) = fit_toy_policy(mode, 11, STEPS).unwrap();
        let fc = brute_force_mask_distribution(&net, &x, y).unwrap();
        assert_eq!(fc.assignments.len(), 16);
        let log_z = fc.learned_log_z.unwrap();
        assert!(fc.total_variation < 0.05, "{mode}: tv {}", fc.total_variation);
        assert!((log_z - fc.log_partition()).abs() < 0.05, "{mode}: {log_z} vs {}", fc.log_partition());
        assert!(last_tb < 1e-3, "{mode}: tb {last_tb}");
        assert!(fc.max_flow_violation < 1e-9, "{mode}: {}", fc.max_flow_violation);
    }
}

#[test]
fn untrained_policy_is_flow_consistent() {
    let (net, x, y) = enumerable_toy(MaskMode::BottomUp, 11).unwrap();
    let fc = brute_force_mask_distribution(&net, &x, y).unwrap();
    assert!(fc.max_flow_violation < 1e-9);
    assert!((fc.policy.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((fc.target.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // 2 sites × 2 units: root, 4 one-site states
    assert_eq!(fc.states_checked, 5);
}

#[test]
fn optimal_log_partition_for_a_fixed_policy() {
    // E_q[(c + log q − log R)²] is minimized at c* = E_q[log R − log q].
    let (net, x, y, _) = fit_toy_policy(MaskMode::BottomUp, 4, STEPS).unwrap();
    let fc = brute_force_mask_distribution(&net, &x, y).unwrap();
    let expected_tb = |c: f64| -> f64 {
        fc.policy
            .iter()
            .zip(&fc.log_rewards)
            .map(|(q, lr)| q * tb_loss_value(c, q.ln(), *lr).unwrap())
            .sum()
    };
    let closed: f64 = fc.policy.iter().zip(&fc.log_rewards).map(|(q, lr)| q * (lr - q.ln())).sum();
    let lo = fc.log_partition() - 1.0;
    let best = (0..=2000)
        .map(|i| lo + i as f64 * 1e-3)
        .min_by(|a, b| expected_tb(*a).total_cmp(&expected_tb(*b)))
        .unwrap();
    assert!((best - closed).abs() <= 1e-3, "{best} vs {closed}");
    // with q ≈ R/Z the optimum is ln Z
    assert!((closed - fc.log_partition()).abs() < 0.05);
}

fn policy_params(net: &gflowmask_core::gflowout::Network) -> Vec<(String, Vec<f64>)> {
    net.params
        .iter()
        .filter(|(n, _)| n.starts_with(PARAM_PREFIX))
        .map(|(n, t)| (n.to_string(), t.data().to_vec()))
        .collect()
}

#[test]
fn zero_lambda_leaves_policy_untouched() {
    let (net, x, y) = enumerable_toy(MaskMode::BottomUp, 2).unwrap();
    let before = policy_params(&net);
    let mut tr = Trainer::new(
        net,
        TrainHyper {
            lambda_tb: 0.0,
            ..TrainHyper::default()
        },
    );
    let mut rng = stream(2, Stream::Masks);
    for _ in 0..5 {
        tr.train_step(&[(&x, y), (&x, y)], &mut rng).unwrap();
    }
    assert_eq!(policy_params(&tr.net), before);
}

#[test]
fn none_mode_has_zero_tb_and_no_policy() {
    let (net, x, y) = enumerable_toy(MaskMode::None, 2).unwrap();
    assert!(policy_params(&net).is_empty());
    let mut tr = Trainer::new(net, TrainHyper::default());
    let mut rng = stream(2, Stream::Masks);
    let l = tr.train_step(&[(&x, y)], &mut rng).unwrap();
    assert_eq!(l.tb_sum, 0.0);
    assert!(l.ce_sum > 0.0);
}
