use lapirn::autodiff::{Graph, OpKind};
use lapirn::gradcheck::{check_all, check_op, GradCheckConfig};
use lapirn::Field;

#[test]
fn every_op_matches_finite_differences() {
    let cfg = GradCheckConfig::default();
    for r in check_all(&cfg).unwrap() {
        assert!(
            r.passed(),
            "{}: {} failures, max abs {:.2e}, max rel {:.2e}",
            r.kind.name(),
            r.failures,
            r.max_abs_err,
            r.max_rel_err
        );
        assert!(r.trials >= 3);
    }
}

#[test]
fn other_seeds_also_pass() {
    for seed in [11, 12] {
        let cfg = GradCheckConfig {
            seed,
            ..Default::default()
        };
        for kind in [OpKind::Conv, OpKind::GridSample, OpKind::LocalNcc, OpKind::ConvTranspose] {
            let r = check_op(kind, &cfg).unwrap();
            assert!(r.passed(), "{} seed {seed}: {r:?}", kind.name());
        }
    }
}

fn loss_grads(a: f32, b: f32) -> Vec<f32> {
    let x0 = Field::from_fn(&[2, 4, 4], |c, p| ((c * 7 + p[0] * 3 + p[1]) % 5) as f32 * 0.3 - 0.6);
    let mut g = Graph::new();
    let x = g.param(x0);
    let sq = g.square(x);
    let l1 = g.mean(sq);
    let ss = g.softsign(x);
    let l2 = g.sum(ss);
    let s1 = g.scale(l1, a);
    let s2 = g.scale(l2, b);
    let l = g.add(s1, s2).unwrap();
    g.backward(l).unwrap().get(x).unwrap().data().to_vec()
}

#[test]
fn backward_is_linear_in_the_loss() {
    let (a, b) = (0.7f32, -1.3f32);
    let combined = loss_grads(a, b);
    let g1 = loss_grads(1.0, 0.0);
    let g2 = loss_grads(0.0, 1.0);
    for i in 0..combined.len() {
        let expect = a * g1[i] + b * g2[i];
        assert!((combined[i] - expect).abs() <= 1e-5, "{i}: {} vs {expect}", combined[i]);
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(Field::from_fn(&[2, 6, 6], |c, p| (c + p[0] * p[1]) as f32 * 0.1));
        let w = g.param(Field::from_fn(&[3, 2, 3, 3], |c, p| ((c * 5 + p[0] + 2 * p[1]) % 7) as f32 * 0.05));
        let y = g.conv(x, w, None, 2).unwrap();
        let y = g.leaky_relu(y, 0.2);
        let sq = g.square(y);
        let l = g.mean(sq);
        let gr = g.backward(l).unwrap();
        (g.value(l).data()[0].to_bits(), gr.get(x).unwrap().clone(), gr.get(w).unwrap().clone())
    };
    let a = run();
    let b = run();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.2, b.2);
}
