//! Synthetic image pairs with known smooth deformations.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffeo::{integrate, Transform, DEFAULT_TIME_STEPS};
use crate::error::{Error, Result};
use crate::field::{Field, LabelMap};
use crate::metrics::warp_labels;
use crate::pyramid::warp;

/// Number of foreground labels in a synthetic segmentation.
pub const SYNTH_LABELS: u16 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub fixed: Field,
    pub moving: Field,
    /// Velocity used to deform the fixed image into the moving one.
    pub velocity: Field,
    /// Displacement that registers the pair: `moving(x + u(x)) ≈ fixed(x)`.
    pub truth: Transform,
    pub seg_fixed: LabelMap,
    pub seg_moving: LabelMap,
}

/// Separable Gaussian blur of every channel with replicated borders.
pub fn gaussian_blur(f: &Field, sigma: f32) -> Field {
    if sigma <= 0.0 {
        return f.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let spatial = f.spatial().to_vec();
    let rank = spatial.len();
    let mut out = f.clone();
    for axis in 0..rank {
        let n = spatial[axis];
        let stride: usize = spatial[axis + 1..].iter().product();
        let outer: usize = spatial[..axis].iter().product();
        for c in 0..f.channels() {
            let ch = out.channel_mut(c);
            let mut line = vec![0.0f32; n];
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * n * stride + s;
                    for (i, l) in line.iter_mut().enumerate() {
                        *l = ch[base + i * stride];
                    }
                    for i in 0..n {
                        let mut acc = 0.0;
                        for (k, w) in kernel.iter().enumerate() {
                            let j = (i as isize + k as isize - radius).clamp(0, n as isize - 1) as usize;
                            acc += w * line[j];
                        }
                        ch[base + i * stride] = acc;
                    }
                }
            }
        }
    }
    out
}

fn max_norm(u: &Field) -> f32 {
    let n = u.voxels();
    (0..n)
        .map(|v| (0..u.channels()).map(|c| u.channel(c)[v].powi(2)).sum::<f32>().sqrt())
        .fold(0.0, f32::max)
}

/// Smooth random field quantized into regions: background plus
/// `SYNTH_LABELS` structures, each with its own intensity.
fn regions(rng: &mut ChaCha8Rng, spatial: &[usize]) -> (Field, LabelMap) {
    let min_ext = *spatial.iter().min().unwrap() as f32;
    let mut shape = vec![1];
    shape.extend_from_slice(spatial);
    let raw = Field::from_fn(&shape, |_, _| StandardNormal.sample(&mut *rng));
    let s = gaussian_blur(&raw, min_ext / 16.0);
    let mut sorted = s.data().to_vec();
    sorted.sort_by(f32::total_cmp);
    let n_classes = SYNTH_LABELS as usize + 1;
    let cuts: Vec<f32> = (1..n_classes).map(|k| sorted[k * sorted.len() / n_classes]).collect();
    let labels: Vec<u16> = s.data().iter().map(|&x| cuts.iter().filter(|&&c| x >= c).count() as u16).collect();
    let mut levels: Vec<f32> = (0..n_classes).map(|k| (k as f32 + rng.random_range(0.1f32..0.9)) / n_classes as f32).collect();
    levels[1..].shuffle(rng);
    let data = labels.iter().map(|&l| levels[l as usize]).collect();
    let mut img = gaussian_blur(&Field::from_parts(shape.clone(), data), 0.7);
    let noise = Field::from_fn(&shape, |_, _| StandardNormal.sample(&mut *rng));
    for (x, n) in img.data_mut().iter_mut().zip(noise.data()) {
        *x += 0.02 * n;
    }
    (img, LabelMap::new(shape, labels).expect("same shape as image"))
}

fn smooth_velocity(rng: &mut ChaCha8Rng, spatial: &[usize], scale: f32) -> Result<Field> {
    let rank = spatial.len();
    let mut shape = vec![rank];
    shape.extend_from_slice(spatial);
    if scale == 0.0 {
        return Ok(Field::zeros(&shape));
    }
    let min_ext = *spatial.iter().min().unwrap() as f32;
    let raw = Field::from_fn(&shape, |_, _| StandardNormal.sample(&mut *rng));
    let mut v = gaussian_blur(&raw, min_ext / 8.0);
    let m = max_norm(&v).max(1e-12);
    v = v.scaled(scale / m);
    // Rescale so the integrated displacement, not the velocity, hits the
    // requested magnitude.
    for _ in 0..3 {
        let u = integrate(&v, DEFAULT_TIME_STEPS)?;
        let m = max_norm(&u.disp).max(1e-12);
        v = v.scaled(scale / m);
    }
    Ok(v)
}

/// Deterministic synthetic pair. `moving = warp(fixed, integrate(v))`; the
/// ground-truth registration is `integrate(-v)`.
pub fn synth_pair(seed: u64, spatial: &[usize], scale: f32) -> Result<SynthPair> {
    check_request(spatial, scale)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fixed, seg_fixed) = regions(&mut rng, spatial);
    deform_with(&mut rng, fixed, seg_fixed, scale)
}

/// A new pair sharing `atlas` as its fixed image: the atlas deformed by a
/// velocity drawn from `seed`.
pub fn synth_atlas_pair(atlas: &Field, atlas_seg: &LabelMap, seed: u64, scale: f32) -> Result<SynthPair> {
    check_request(atlas.spatial(), scale)?;
    if atlas.channels() != 1 || atlas_seg.shape() != atlas.shape() {
        return Err(Error::mismatch("synth_atlas_pair", atlas.shape(), atlas_seg.shape()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    deform_with(&mut rng, atlas.clone(), atlas_seg.clone(), scale)
}

fn check_request(spatial: &[usize], scale: f32) -> Result<()> {
    if !(2..=3).contains(&spatial.len()) || spatial.iter().any(|&n| n < 4) {
        return Err(Error::shape("synth_pair", format!("unsupported extents {spatial:?}")));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!("deformation scale must be >= 0, got {scale}")));
    }
    Ok(())
}

fn deform_with(rng: &mut ChaCha8Rng, fixed: Field, seg_fixed: LabelMap, scale: f32) -> Result<SynthPair> {
    let velocity = smooth_velocity(rng, fixed.spatial(), scale)?;
    let forward = integrate(&velocity, DEFAULT_TIME_STEPS)?;
    let moving = warp(&fixed, &forward.disp)?;
    let truth = integrate(&velocity.scaled(-1.0), DEFAULT_TIME_STEPS)?;
    let seg_moving = warp_labels(&seg_fixed, &forward)?;
    Ok(SynthPair {
        fixed,
        moving,
        velocity,
        truth,
        seg_fixed,
        seg_moving,
    })
}

/// Mean endpoint error between two displacement fields over voxels at
/// least `margin` away from every face.
pub fn endpoint_error(a: &Field, b: &Field, margin: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch("endpoint_error", a.shape(), b.shape()));
    }
    let spatial = a.spatial().to_vec();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    let mut coord = vec![0usize; spatial.len()];
    for v in 0..a.voxels() {
        let mut rem = v;
        for ax in (0..spatial.len()).rev() {
            coord[ax] = rem % spatial[ax];
            rem /= spatial[ax];
        }
        if coord.iter().zip(&spatial).any(|(&c, &n)| c < margin || c + margin >= n) {
            continue;
        }
        let e: f64 = (0..a.channels())
            .map(|c| (a.channel(c)[v] as f64 - b.channel(c)[v] as f64).powi(2))
            .sum();
        sum += e.sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::shape("endpoint_error", format!("margin {margin} leaves no voxels in {spatial:?}")));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffeo::{folding_stats, jacobian_det};

    #[test]
    fn zero_scale_gives_identical_pair() {
        let p = synth_pair(3, &[32, 32], 0.0).unwrap();
        assert_eq!(p.fixed, p.moving);
        assert!(p.truth.disp.data().iter().all(|&x| x == 0.0));
        assert_eq!(p.seg_fixed, p.seg_moving);
    }

    #[test]
    fn same_seed_same_pair() {
        let a = synth_pair(9, &[32, 32], 3.0).unwrap();
        let b = synth_pair(9, &[32, 32], 3.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_pair(10, &[32, 32], 3.0).unwrap());
    }

    #[test]
    fn displacement_magnitude_and_no_folding() {
        let p = synth_pair(1, &[64, 64], 4.0).unwrap();
        let fwd = integrate(&p.velocity, DEFAULT_TIME_STEPS).unwrap();
        assert!((max_norm(&fwd.disp) - 4.0).abs() < 0.2);
        let det = jacobian_det(&fwd).unwrap();
        assert_eq!(folding_stats(&det).pct_nonpositive, 0.0);
    }

    #[test]
    fn segmentation_has_four_labels() {
        let p = synth_pair(2, &[48, 48], 2.0).unwrap();
        let l = p.seg_fixed.labels();
        assert!(l.iter().all(|&x| x <= SYNTH_LABELS));
        assert!(l.len() >= 4, "{l:?}");
    }

    #[test]
    fn blur_preserves_constants() {
        let f = Field::full(&[2, 9, 7], 1.5);
        assert!(gaussian_blur(&f, 2.0).data().iter().all(|&x| (x - 1.5).abs() < 1e-5));
    }
}
