use lapirn::pyramid::{build_pyramid, upsample_disp, warp};
use lapirn::Field;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bilinear / trilinear sampling at clamped coordinates, one voxel at a time.
fn naive_warp(img: &Field, disp: &Field) -> Vec<f32> {
    let sp = img.spatial().to_vec();
    let rank = sp.len();
    let mut out = Vec::new();
    let n: usize = sp.iter().product();
    for c in 0..img.channels() {
        for v in 0..n {
            let mut idx = vec![0usize; rank];
            let mut rem = v;
            for ax in (0..rank).rev() {
                idx[ax] = rem % sp[ax];
                rem /= sp[ax];
            }
            let pos: Vec<f64> = (0..rank)
                .map(|ax| {
                    let p = idx[ax] as f64 + disp.at(ax, &idx) as f64;
                    p.clamp(0.0, (sp[ax] - 1) as f64)
                })
                .collect();
            let mut acc = 0.0f64;
            for corner in 0..(1 << rank) {
                let mut w = 1.0;
                let mut at = vec![0usize; rank];
                for ax in 0..rank {
                    let lo = pos[ax].floor();
                    let t = pos[ax] - lo;
                    let hi_side = corner >> ax & 1 == 1;
                    let i = if hi_side { (lo as usize + 1).min(sp[ax] - 1) } else { lo as usize };
                    w *= if hi_side { t } else { 1.0 - t };
                    at[ax] = i;
                }
                acc += w * img.at(c, &at) as f64;
            }
            out.push(acc as f32);
        }
    }
    out
}

fn smooth_disp(rng: &mut ChaCha8Rng, spatial: &[usize], amp: f32) -> Field {
    let rank = spatial.len();
    let freqs: Vec<Vec<f32>> = (0..rank)
        .map(|_| (0..rank).map(|_| rng.random_range(0.05..0.4)).collect())
        .collect();
    let phase: Vec<f32> = (0..rank).map(|_| rng.random_range(0.0..6.0)).collect();
    let mut shape = vec![rank];
    shape.extend_from_slice(spatial);
    Field::from_fn(&shape, |c, p| {
        let arg: f32 = p.iter().zip(&freqs[c]).map(|(&x, f)| x as f32 * f).sum();
        amp * (arg + phase[c]).sin()
    })
}

fn random_image(rng: &mut ChaCha8Rng, shape: &[usize]) -> Field {
    Field::from_fn(shape, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn warp_matches_naive_sampling_2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let img = random_image(&mut rng, &[2, 13, 17]);
        let disp = smooth_disp(&mut rng, &[13, 17], 3.5);
        let out = warp(&img, &disp).unwrap();
        let oracle = naive_warp(&img, &disp);
        for (a, b) in out.data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn warp_matches_naive_sampling_3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..3 {
        let img = random_image(&mut rng, &[1, 7, 9, 8]);
        let disp = smooth_disp(&mut rng, &[7, 9, 8], 2.5);
        let out = warp(&img, &disp).unwrap();
        let oracle = naive_warp(&img, &disp);
        for (a, b) in out.data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn upsampled_ramp_matches_closed_form() {
    let (h, w) = (6usize, 9usize);
    let coef = [[0.3f32, 0.25, -0.1], [-1.0, 0.05, 0.4]];
    let v = Field::from_fn(&[2, h, w], |c, p| coef[c][0] + coef[c][1] * p[0] as f32 + coef[c][2] * p[1] as f32);
    let up = upsample_disp(&v).unwrap();
    assert_eq!(up.shape(), &[2, 2 * h, 2 * w]);
    let src = |i: usize, n: usize| ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
    for c in 0..2 {
        for y in 0..2 * h {
            for x in 0..2 * w {
                let expect = 2.0
                    * (coef[c][0] as f64 + coef[c][1] as f64 * src(y, h) + coef[c][2] as f64 * src(x, w));
                let got = up.at(c, &[y, x]) as f64;
                assert!((got - expect).abs() <= 1e-5, "c={c} y={y} x={x}: {got} vs {expect}");
            }
        }
    }
}

#[test]
fn pyramid_depth_and_halving() {
    let img = Field::zeros(&[1, 40, 24, 32]);
    let p = build_pyramid(&img, 3).unwrap();
    assert_eq!(p.depth(), 3);
    assert_eq!(p.level(1).spatial(), &[10, 6, 8]);
    assert_eq!(p.finest(), &img);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_displacement_is_identity(h in 2usize..12, w in 2usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, &[1, h, w]);
        prop_assert_eq!(warp(&img, &Field::zeros(&[2, h, w])).unwrap(), img);
    }

    #[test]
    fn pyramid_extents_monotone(h in 16usize..70, w in 16usize..70, levels in 1usize..=3) {
        let p = build_pyramid(&Field::zeros(&[1, h, w]), levels).unwrap();
        prop_assert_eq!(p.depth(), levels);
        for pair in p.levels.windows(2) {
            for (a, b) in pair[0].spatial().iter().zip(pair[1].spatial()) {
                prop_assert!(a <= b);
                prop_assert_eq!(*a, b / 2);
            }
        }
    }

    #[test]
    fn translations_compose_on_linear_images(
        t1 in (-2.0f32..2.0, -2.0f32..2.0),
        t2 in (-2.0f32..2.0, -2.0f32..2.0),
        a in -1.0f32..1.0,
        b in -1.0f32..1.0,
    ) {
        let n = 16;
        let img = Field::from_fn(&[1, n, n], |_, p| a * p[0] as f32 + b * p[1] as f32 + 0.5);
        let c1 = [t1.0, t1.1];
        let c2 = [t2.0, t2.1];
        let d1 = Field::from_fn(&[2, n, n], |c, _| c1[c]);
        let d2 = Field::from_fn(&[2, n, n], |c, _| c2[c]);
        let d12 = Field::from_fn(&[2, n, n], |c, _| c1[c] + c2[c]);
        let twice = warp(&warp(&img, &d1).unwrap(), &d2).unwrap();
        let once = warp(&img, &d12).unwrap();
        let m = 5;
        for y in m..n - m {
            for x in m..n - m {
                prop_assert!((twice.at(0, &[y, x]) - once.at(0, &[y, x])).abs() <= 1e-4);
            }
        }
    }
}
