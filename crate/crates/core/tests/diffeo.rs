use lapirn::diffeo::{compose, folding_stats, integrate, jacobian_det, Transform, DEFAULT_TIME_STEPS};
use lapirn::metrics::evaluate;
use lapirn::synth::synth_pair;
use lapirn::Field;
use proptest::prelude::*;

fn interior_max_diff(a: &Field, b: &Field, margin: usize) -> f32 {
    let sp = a.spatial().to_vec();
    let mut worst = 0.0f32;
    for y in margin..sp[0] - margin {
        for x in margin..sp[1] - margin {
            let e: f32 = (0..a.channels()).map(|c| (a.at(c, &[y, x]) - b.at(c, &[y, x])).powi(2)).sum();
            worst = worst.max(e.sqrt());
        }
    }
    worst
}

#[test]
fn forward_and_inverse_cancel() {
    for seed in 0..4 {
        let v = synth_pair(seed, &[64, 64], 4.0).unwrap().velocity;
        let fwd = integrate(&v, DEFAULT_TIME_STEPS).unwrap();
        let inv = integrate(&v.scaled(-1.0), DEFAULT_TIME_STEPS).unwrap();
        let round = compose(&fwd.disp, &inv.disp).unwrap();
        let err = interior_max_diff(&round, &Field::zeros(round.shape()), 8);
        assert!(err <= 0.1, "seed {seed}: {err}");
    }
}

#[test]
fn integrated_fields_do_not_fold() {
    for seed in 10..14 {
        let v = synth_pair(seed, &[64, 64], 4.0).unwrap().velocity;
        let det = jacobian_det(&integrate(&v, DEFAULT_TIME_STEPS).unwrap()).unwrap();
        assert_eq!(folding_stats(&det).pct_nonpositive, 0.0, "seed {seed}");
    }
}

#[test]
fn half_flows_compose_to_full_flow() {
    for seed in 20..23 {
        let v = synth_pair(seed, &[64, 64], 4.0).unwrap().velocity;
        let half = integrate(&v.scaled(0.5), DEFAULT_TIME_STEPS).unwrap();
        let full = integrate(&v, DEFAULT_TIME_STEPS).unwrap();
        let both = compose(&half.disp, &half.disp).unwrap();
        let err = interior_max_diff(&both, &full.disp, 8);
        assert!(err <= 0.05, "seed {seed}: {err}");
    }
}

#[test]
fn constant_velocity_is_a_translation() {
    let v = Field::from_fn(&[2, 24, 24], |c, _| [1.5, -0.75][c]);
    let t = integrate(&v, DEFAULT_TIME_STEPS).unwrap();
    for c in 0..2 {
        assert!(t.disp.channel(c).iter().all(|&u| (u - v.channel(c)[0]).abs() < 1e-5));
    }
    let det = jacobian_det(&t).unwrap();
    assert!(det.data().iter().all(|&d| (d - 1.0).abs() < 1e-5));
}

#[test]
fn jacobian_of_linear_map_3d() {
    let a = [[0.1f32, 0.0, 0.2], [0.0, -0.3, 0.0], [0.05, 0.0, 0.0]];
    let u = Field::from_fn(&[3, 6, 7, 5], |c, p| (0..3).map(|k| a[c][k] * p[k] as f32).sum());
    let det = jacobian_det(&Transform::displacement(u).unwrap()).unwrap();
    let m = |i: usize, k: usize| a[i][k] as f64 + if i == k { 1.0 } else { 0.0 };
    let expect = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
        + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
    assert!(det.data().iter().all(|&d| (d as f64 - expect).abs() < 1e-5));
}

#[test]
fn folding_metric_is_the_shared_computation() {
    let u = Field::from_fn(&[2, 16, 16], |c, p| if c == 1 { -1.8 * (p[1] as f32 * 0.7).sin() } else { 0.0 });
    let t = Transform::displacement(u).unwrap();
    let direct = folding_stats(&jacobian_det(&t).unwrap());
    let report = evaluate(&t, None, 0.0).unwrap();
    assert!(direct.pct_nonpositive > 0.0);
    assert_eq!(report.pct_folding, direct.pct_nonpositive);
    assert_eq!(report.jac_std, direct.std);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(integrate(&Field::zeros(&[3, 8, 8]), 7).is_err());
    assert!(integrate(&Field::zeros(&[2, 8, 8]), 0).is_err());
    assert!(compose(&Field::zeros(&[2, 8, 8]), &Field::zeros(&[2, 8, 9])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn small_smooth_flows_are_invertible(seed in 0u64..1000, scale in 0.5f32..4.0) {
        let v = synth_pair(seed, &[48, 48], scale).unwrap().velocity;
        let fwd = integrate(&v, DEFAULT_TIME_STEPS).unwrap();
        let inv = integrate(&v.scaled(-1.0), DEFAULT_TIME_STEPS).unwrap();
        let round = compose(&fwd.disp, &inv.disp).unwrap();
        prop_assert!(interior_max_diff(&round, &Field::zeros(round.shape()), 8) <= 0.1);
        let det = jacobian_det(&fwd).unwrap();
        prop_assert_eq!(folding_stats(&det).pct_nonpositive, 0.0);
    }
}
