use proptest::prelude::*;
use usad_autodiff::{Graph, Tensor};
use usad_core::losses::*;

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn acc_grid() -> Vec<f64> {
    std::iter::once(0.01).chain((1..=20).map(|i| i as f64 * 0.05)).collect()
}

#[test]
fn focal_with_gamma_zero_alpha_one_is_cross_entropy() {
    let params = FocalParams { gamma: 0.0, alpha: 1.0 };
    for i in 1..=999 {
        let p = i as f64 / 1000.0;
        let probs = [p, 1.0 - p];
        assert!((focal_loss(p, params) - cross_entropy(&probs, 0)).abs() < 1e-12);
    }
}

#[test]
fn smoothing_with_zero_epsilon_is_nll() {
    let p = softmax(&[0.4, -1.0, 2.2, 0.0]);
    let logp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    for y in 0..4 {
        assert!((label_smoothing_nll(&logp, y, 0.0) - -logp[y]).abs() < 1e-12);
    }
}

#[test]
fn focal_hand_value() {
    let v = focal_loss(0.9, FocalParams { gamma: 2.0, alpha: 0.25 });
    let expected = 0.25 * 0.01 * -(0.9f64).ln();
    assert!((v - expected).abs() < 1e-15);
    assert!((v - 2.6341e-4).abs() < 1e-8);
}

#[test]
fn smoothing_hand_value() {
    let logp = [0.8f64.ln(), 0.2f64.ln()];
    let v = label_smoothing_nll(&logp, 0, 0.1);
    assert!((v - -(0.95 * 0.8f64.ln() + 0.05 * 0.2f64.ln())).abs() < 1e-15);
    assert!((v - 0.29245827).abs() < 1e-8);
}

#[test]
fn uniform_prediction_smoothing_is_log_k() {
    for k in [2usize, 3, 7] {
        let logp = vec![-(k as f64).ln(); k];
        for eps in [0.0, 0.05, 0.3, 0.9] {
            assert!((label_smoothing_nll(&logp, 0, eps) - (k as f64).ln()).abs() < 1e-12);
        }
    }
}

#[test]
fn focal_is_monotone_on_a_grid() {
    for params in [FocalParams::default(), FocalParams { gamma: 2.0, alpha: 0.25 }, FocalParams { gamma: 0.5, alpha: 1.0 }] {
        let vals: Vec<f64> = (1..=1000).map(|i| focal_loss(i as f64 / 1000.0, params)).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]), "{params:?}");
    }
}

#[test]
fn cross_entropy_floor_is_flagged() {
    let p = [1.0, 0.0];
    assert!(is_floored(&p, 1));
    assert!(cross_entropy(&p, 1).is_finite());
    assert!(!is_floored(&p, 0));
}

#[test]
fn class_balanced_effective_number_ratio() {
    let beta: f64 = 0.999;
    let s = class_balanced_scales(&[0, 1], &[10, 1000], ClassBalancedParams { beta }).unwrap();
    let effective = |n: i32| (1.0 - beta.powi(n)) / (1.0 - beta);
    let oracle = effective(1000) / effective(10);
    let ratio = s[0] / s[1];
    assert!((ratio - oracle).abs() < 1e-9);
    // The effective-number formula gives 63.515…, which rounds to the
    // commonly quoted ≈63.6 only loosely.
    assert!((ratio - 63.6).abs() < 0.15, "{ratio}");
    assert!((s.iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-12);
}

#[test]
fn class_balanced_reweight_scales_the_mean() {
    let losses = [1.0, 2.0, 3.0];
    let v = class_balanced_reweight(&losses, &[0, 0, 1], &[2, 1], ClassBalancedParams { beta: 0.0 }).unwrap();
    assert!((v - 2.0).abs() < 1e-12);
    assert!(class_balanced_reweight(&losses, &[0, 1], &[2, 1], ClassBalancedParams::default()).is_err());
}

fn graph_loss(logits: &[f64], y: usize, omega: [f64; 3], cfg: &LossConfig) -> f64 {
    let mut g = Graph::<f64>::inference();
    let x = g.input(Tensor::from_slice(logits));
    let l = composite_loss(&mut g, x, y, omega, cfg, 1.0).unwrap();
    g.value(l).item()
}

fn graph_parts(logits: &[f64], y: usize, cfg: &LossConfig) -> [f64; 3] {
    let mut g = Graph::<f64>::inference();
    let x = g.input(Tensor::from_slice(logits));
    let p = sub_losses(&mut g, x, y, cfg).unwrap();
    [g.value(p.smoothing).item(), g.value(p.focal).item(), g.value(p.ce).item()]
}

#[test]
fn point_mass_weights_reproduce_each_sub_loss_exactly() {
    let cfg = LossConfig { smoothing: 0.1, focal: FocalParams { gamma: 2.0, alpha: 0.25 }, ..Default::default() };
    let logits = [0.7, -0.3, 1.9, 0.1];
    let parts = graph_parts(&logits, 2, &cfg);
    for i in 0..3 {
        let mut omega = [0.0; 3];
        omega[i] = 1.0;
        assert_eq!(graph_loss(&logits, 2, omega, &cfg).to_bits(), parts[i].to_bits());
    }
}

#[test]
fn composite_is_linear_in_the_weights() {
    let cfg = LossConfig::default();
    let logits = [0.2, 1.1, -0.5];
    let a = graph_loss(&logits, 0, [0.2, 0.3, 0.5], &cfg);
    let b = graph_loss(&logits, 0, [0.4, 0.6, 1.0], &cfg);
    assert!((b - 2.0 * a).abs() < 1e-12);
    let parts = graph_parts(&logits, 0, &cfg);
    let p = softmax(&logits);
    let logp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    assert!((parts[0] - label_smoothing_nll(&logp, 0, cfg.smoothing)).abs() < 1e-12);
    assert!((parts[1] - focal_loss(p[0], cfg.focal)).abs() < 1e-12);
    assert!((parts[2] - cross_entropy(&p, 0)).abs() < 1e-12);
}

#[test]
fn class_balanced_term_is_optional() {
    let logits = [0.2, 1.1, -0.5];
    let off = LossConfig::default();
    let on = LossConfig { cb_weight: 0.5, ..Default::default() };
    let base = graph_loss(&logits, 1, [0.3, 0.3, 0.4], &off);
    let mut g = Graph::<f64>::inference();
    let x = g.input(Tensor::from_slice(&logits));
    let l = composite_loss(&mut g, x, 1, [0.3, 0.3, 0.4], &on, 2.0).unwrap();
    let ce = cross_entropy(&softmax(&logits), 1);
    assert!((g.value(l).item() - base - 0.5 * 2.0 * ce).abs() < 1e-12);
}

#[test]
fn controller_grid_keeps_weights_feasible() {
    for tau in [0.0, 0.5, 1.0] {
        for acc in acc_grid() {
            let mut s = CompositeLossState { tau, ..Default::default() };
            s.update_weights(acc).unwrap();
            assert!((s.omega.iter().sum::<f64>() - 1.0).abs() < 1e-9, "tau {tau} acc {acc}: {:?}", s.omega);
            assert!(s.omega.iter().all(|w| (0.1..=0.8).contains(w)), "tau {tau} acc {acc}: {:?}", s.omega);
        }
    }
}

#[test]
fn controller_pre_clamp_matches_closed_form() {
    for temperature in [0.5, 1.0, 2.0] {
        for acc in acc_grid() {
            let mut s = CompositeLossState { temperature, ..Default::default() };
            let old = s.omega[1];
            let u = s.update_weights(acc).unwrap();
            let target = 2.0 - 0.5 - 1.0 / (acc + 1e-8);
            assert!((u.target - target).abs() < 1e-12);
            assert!((u.pre_clamp - (old + (target - old) / temperature)).abs() < 1e-12);
        }
    }
    let mut s = CompositeLossState::default();
    let u = s.update_weights(0.8).unwrap();
    assert!((u.pre_clamp - 0.25).abs() < 1e-7);
}

#[test]
fn controller_rejects_bad_state() {
    assert!(CompositeLossState::new([0.3, 0.3, 0.4], 0.5, 0.0, (0.1, 0.8)).is_err());
    assert!(CompositeLossState::new([0.3, 0.3, 0.4], 0.5, 1.0, (0.5, 0.8)).is_err());
    assert!(CompositeLossState::new([-0.1, 0.6, 0.5], 0.5, 1.0, (0.1, 0.8)).is_err());
    let mut s = CompositeLossState::default();
    assert!(s.update_weights(-0.1).is_err());
}

#[test]
fn controller_records_previous_accuracy() {
    let mut s = CompositeLossState::default();
    let first = s.update_weights(0.6).unwrap();
    assert_eq!(first.heuristic_agrees, None);
    assert_eq!(s.prev_acc, Some(0.6));
    let second = s.update_weights(0.9).unwrap();
    assert!(second.heuristic_agrees.is_some());
}

proptest! {
    #[test]
    fn controller_invariants_hold_for_any_sequence(
        accs in prop::collection::vec(0.0..=1.0f64, 1..30),
        tau in 0.0..=1.0f64,
        temperature in 0.25..4.0f64,
    ) {
        let mut s = CompositeLossState { tau, temperature, ..Default::default() };
        for acc in accs {
            s.update_weights(acc).unwrap();
            prop_assert!((s.omega.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.omega.iter().all(|w| (0.1..=0.8).contains(w)));
        }
    }

    #[test]
    fn smoothing_lower_bound(logits in prop::collection::vec(-6.0..6.0f64, 2..8), eps in 0.0..0.99f64, y_seed in 0usize..100) {
        let k = logits.len();
        let y = y_seed % k;
        let logp: Vec<f64> = softmax(&logits).iter().map(|v| v.ln()).collect();
        let max_lp = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bound = (1.0 - eps + eps / k as f64) * -max_lp;
        let v = label_smoothing_nll(&logp, y, eps);
        prop_assert!(v >= bound - 1e-12);
        prop_assert!(bound >= 0.0);
    }
}
