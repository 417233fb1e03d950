use lapirn::autodiff::Graph;
use lapirn::engine::{adam_step, AdamConfig, OptimizerState};
use lapirn::similarity::{level_loss, local_ncc_value, similarity_pyramid, LossConfig};
use lapirn::Field;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Squared windowed correlation, averaged over voxels, with the window
/// zero-padded at the border and centred sums computed directly.
fn ncc_oracle(f: &Field, m: &Field, w: usize, eps: f64) -> f64 {
    let sp = f.spatial();
    let (h, wd) = (sp[0] as isize, sp[1] as isize);
    let r = (w / 2) as isize;
    let n = (w * w) as f64;
    let px = |img: &Field, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h || x >= wd {
            0.0
        } else {
            img.at(0, &[y as usize, x as usize]) as f64
        }
    };
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..wd {
            let mut vf = Vec::new();
            let mut vm = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    vf.push(px(f, y + dy, x + dx));
                    vm.push(px(m, y + dy, x + dx));
                }
            }
            let mf = vf.iter().sum::<f64>() / n;
            let mm = vm.iter().sum::<f64>() / n;
            let cross: f64 = vf.iter().zip(&vm).map(|(a, b)| (a - mf) * (b - mm)).sum();
            let varf: f64 = vf.iter().map(|a| (a - mf).powi(2)).sum();
            let varm: f64 = vm.iter().map(|b| (b - mm).powi(2)).sum();
            total += cross * cross / (varf * varm + eps);
        }
    }
    total / (h * wd) as f64
}

fn noise(seed: u64, shape: &[usize]) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Field::from_fn(shape, |_, _| rng.random_range(0.0..1.0))
}

fn blobs(shape: &[usize], shift: [f32; 2]) -> Field {
    Field::from_fn(shape, |_, p| {
        let (y, x) = (p[0] as f32 - shift[0], p[1] as f32 - shift[1]);
        let g = |cy: f32, cx: f32, s: f32| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp();
        g(14.0, 12.0, 4.0) + 0.7 * g(20.0, 22.0, 3.0) + 0.5 * g(9.0, 23.0, 3.5)
    })
}

#[test]
fn ncc_matches_brute_force_9x9() {
    for seed in 0..3 {
        let f = noise(seed, &[1, 20, 17]);
        let m = Field::from_fn(&[1, 20, 17], |_, p| f.at(0, p) * 0.5 + 0.3 * ((p[0] + 2 * p[1]) as f32).sin());
        let got = local_ncc_value(&f, &m, 9, 1e-5).unwrap() as f64;
        let want = ncc_oracle(&f, &m, 9, 1e-5);
        assert!((got - want).abs() <= 1e-5, "{got} vs {want}");
    }
}

#[test]
fn ncc_matches_brute_force_small_windows() {
    let f = noise(7, &[1, 11, 13]);
    let m = noise(8, &[1, 11, 13]);
    for w in [3, 5, 7] {
        let got = local_ncc_value(&f, &m, w, 1e-5).unwrap() as f64;
        let want = ncc_oracle(&f, &m, w, 1e-5);
        assert!((got - want).abs() <= 1e-5, "w={w}: {got} vs {want}");
    }
}

#[test]
fn identical_textured_images_reach_the_lower_bound() {
    let f = noise(3, &[1, 64, 64]);
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let mv = g.constant(f);
    let v = g.constant(Field::zeros(&[2, 64, 64]));
    let loss = level_loss(&mut g, fv, mv, v, 3, &cfg).unwrap();
    let total = g.value(loss.total).data()[0];
    assert!((total + 1.75).abs() <= 1e-2, "{total}");
    assert_eq!(g.value(loss.regularizer).data()[0], 0.0);
}

#[test]
fn ramp_regularizer_equals_level_weight() {
    let cfg = LossConfig::default();
    let ramp = Field::from_fn(&[2, 16, 16], |c, p| if c == 0 { p[0] as f32 } else { 0.0 });
    for p in 1..=cfg.levels {
        let mut g = Graph::new();
        let f = g.constant(noise(1, &[1, 16, 16]));
        let m = g.constant(noise(2, &[1, 16, 16]));
        let v = g.param(ramp.clone());
        let loss = level_loss(&mut g, f, m, v, p, &cfg).unwrap();
        let reg = g.value(loss.regularizer).data()[0];
        let want = cfg.lambda / 2f32.powi((cfg.levels - p) as i32);
        assert!((reg - want).abs() <= 1e-5, "p={p}: {reg} vs {want}");
    }
}

#[test]
fn gradient_descent_recovers_a_translation() {
    let shape = [1, 32, 32];
    let t = [1.6f32, -1.2];
    let fixed = blobs(&shape, [0.0, 0.0]);
    let moving = blobs(&shape, t);
    let cfg = LossConfig::default();
    let names = vec!["t".to_string()];
    let mut params = vec![Field::zeros(&[2])];
    let mut state = OptimizerState::new(1);
    for _ in 0..300 {
        let shift = params[0].data().to_vec();
        let mut g = Graph::new();
        let disp = g.param(Field::from_fn(&[2, 32, 32], |c, _| shift[c]));
        let f = g.constant(fixed.clone());
        let m = g.constant(moving.clone());
        let warped = g.grid_sample(m, disp).unwrap();
        let s = similarity_pyramid(&mut g, f, warped, 2, &cfg).unwrap();
        let grads = g.backward(s).unwrap();
        let gd = grads.get(disp).unwrap();
        let gt = Field::from_fn(&[2], |c, _| gd.channel(c).iter().sum());
        adam_step(&mut params, &names, &[Some(&gt)], &mut state, 0.02, &AdamConfig::default()).unwrap();
    }
    let got = params[0].data();
    for c in 0..2 {
        assert!((got[c] - t[c]).abs() <= 0.25, "{got:?} vs {t:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ncc_is_symmetric_and_bounded(a in any::<u64>(), b in any::<u64>(), w in prop::sample::select(vec![3usize, 5, 7, 9])) {
        let f = noise(a, &[1, 14, 12]);
        let m = noise(b, &[1, 14, 12]);
        let fm = local_ncc_value(&f, &m, w, 1e-5).unwrap();
        let mf = local_ncc_value(&m, &f, w, 1e-5).unwrap();
        prop_assert!((fm - mf).abs() <= 1e-5);
        prop_assert!((0.0..=1.0 + 1e-3).contains(&fm));
    }
}
