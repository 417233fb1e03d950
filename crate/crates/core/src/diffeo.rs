//! Scaling-and-squaring integration of stationary velocity fields and
//! Jacobian analysis of the resulting transforms.

use std::cell::Cell;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::field::{check_spatial_rank, Field};
use crate::pyramid::warp;

/// Default number of squaring steps.
pub const DEFAULT_TIME_STEPS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    Diffeo,
    Displacement,
}

impl TransformKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Diffeo => "diffeo",
            TransformKind::Displacement => "disp",
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffeo" => Ok(TransformKind::Diffeo),
            "disp" | "displacement" => Ok(TransformKind::Displacement),
            other => Err(Error::Config(format!("unknown mode '{other}' (expected diffeo|disp)"))),
        }
    }
}

/// A deformation `phi(x) = x + disp(x)` with displacements in voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    pub disp: Field,
    pub kind: TransformKind,
    /// Velocity field the displacement was integrated from (diffeo only).
    pub source: Option<Field>,
}

impl Transform {
    pub fn identity(spatial: &[usize]) -> Self {
        let mut shape = vec![spatial.len()];
        shape.extend_from_slice(spatial);
        Self {
            disp: Field::zeros(&shape),
            kind: TransformKind::Displacement,
            source: None,
        }
    }

    pub fn displacement(disp: Field) -> Result<Self> {
        check_vector_field("transform", &disp)?;
        Ok(Self {
            disp,
            kind: TransformKind::Displacement,
            source: None,
        })
    }

    pub fn spatial(&self) -> &[usize] {
        self.disp.spatial()
    }
}

fn check_vector_field(op: &'static str, v: &Field) -> Result<()> {
    check_spatial_rank(op, v)?;
    if v.channels() != v.spatial_rank() {
        return Err(Error::shape(
            op,
            format!("expected {} channels, got shape {:?}", v.spatial_rank(), v.shape()),
        ));
    }
    Ok(())
}

thread_local! {
    static INTEGRATE_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of integrations (field or graph) performed on this thread.
pub fn integrate_call_count() -> usize {
    INTEGRATE_CALLS.with(|c| c.get())
}

fn bump() {
    INTEGRATE_CALLS.with(|c| c.set(c.get() + 1));
}

/// Scaling and squaring: `u0 = v / 2^T`, then `T` times
/// `u <- u + u(x + u(x))`.
pub fn integrate(v: &Field, steps: usize) -> Result<Transform> {
    check_vector_field("integrate", v)?;
    if steps == 0 {
        return Err(Error::Config("integration needs at least one time step".into()));
    }
    bump();
    let mut u = v.scaled(1.0 / (1u64 << steps) as f32);
    for _ in 0..steps {
        let moved = warp(&u, &u)?;
        u.data_mut()
            .iter_mut()
            .zip(moved.data())
            .for_each(|(a, b)| *a += b);
    }
    Ok(Transform {
        disp: u,
        kind: TransformKind::Diffeo,
        source: Some(v.clone()),
    })
}

/// Differentiable [`integrate`]; returns the displacement node.
pub fn integrate_var(g: &mut Graph, v: Var, steps: usize) -> Result<Var> {
    check_vector_field("integrate", g.value(v))?;
    if steps == 0 {
        return Err(Error::Config("integration needs at least one time step".into()));
    }
    bump();
    let mut u = g.scale(v, 1.0 / (1u64 << steps) as f32);
    for _ in 0..steps {
        let moved = g.grid_sample(u, u)?;
        u = g.add(u, moved)?;
    }
    Ok(u)
}

/// Displacement of `a ∘ b`: `b(x) + a(x + b(x))`.
pub fn compose(a: &Field, b: &Field) -> Result<Field> {
    check_vector_field("compose", a)?;
    if a.shape() != b.shape() {
        return Err(Error::mismatch("compose", a.shape(), b.shape()));
    }
    let moved = warp(a, b)?;
    let data = b.data().iter().zip(moved.data()).map(|(x, y)| x + y).collect();
    Ok(Field::from_parts(a.shape().to_vec(), data))
}

/// Partial derivative of channel data along `axis` at flat voxel `v`:
/// central differences inside, one-sided on the faces.
fn partial(u: &[f32], spatial: &[usize], strides: &[usize], coord: &[usize], v: usize, axis: usize) -> f64 {
    let n = spatial[axis];
    let s = strides[axis];
    let i = coord[axis];
    if n < 2 {
        return 0.0;
    }
    if i == 0 {
        (u[v + s] - u[v]) as f64
    } else if i == n - 1 {
        (u[v] - u[v - s]) as f64
    } else {
        (u[v + s] as f64 - u[v - s] as f64) * 0.5
    }
}

/// Per-voxel determinant of `d(x + u)/dx`, shaped `[1, spatial..]`.
pub fn jacobian_det(t: &Transform) -> Result<Field> {
    let u = &t.disp;
    check_vector_field("jacobian_det", u)?;
    let spatial = u.spatial().to_vec();
    if spatial.iter().any(|&n| n < 3) {
        return Err(Error::shape(
            "jacobian_det",
            format!("all extents must be >= 3, got {spatial:?}"),
        ));
    }
    let rank = spatial.len();
    let nvox: usize = spatial.iter().product();
    let mut strides = vec![1usize; rank];
    for ax in (0..rank - 1).rev() {
        strides[ax] = strides[ax + 1] * spatial[ax + 1];
    }
    let mut out = Vec::with_capacity(nvox);
    let mut coord = vec![0usize; rank];
    for v in 0..nvox {
        let mut rem = v;
        for ax in (0..rank).rev() {
            coord[ax] = rem % spatial[ax];
            rem /= spatial[ax];
        }
        let mut j = [[0.0f64; 3]; 3];
        for (i, row) in j.iter_mut().enumerate().take(rank) {
            let ch = u.channel(i);
            for (k, cell) in row.iter_mut().enumerate().take(rank) {
                *cell = partial(ch, &spatial, &strides, &coord, v, k) + if i == k { 1.0 } else { 0.0 };
            }
        }
        let det = if rank == 2 {
            j[0][0] * j[1][1] - j[0][1] * j[1][0]
        } else {
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        };
        out.push(det as f32);
    }
    let mut shape = vec![1];
    shape.extend(spatial);
    Ok(Field::from_parts(shape, out))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldingStats {
    /// Percentage (0..=100) of voxels with non-positive determinant.
    pub pct_nonpositive: f64,
    /// Population standard deviation of the determinant.
    pub std: f64,
}

pub fn folding_stats(det: &Field) -> FoldingStats {
    let n = det.len() as f64;
    let nonpos = det.data().iter().filter(|&&d| d <= 0.0).count() as f64;
    let mean = det.data().iter().map(|&d| d as f64).sum::<f64>() / n;
    let var = det.data().iter().map(|&d| (d as f64 - mean).powi(2)).sum::<f64>() / n;
    FoldingStats {
        pct_nonpositive: 100.0 * nonpos / n,
        std: var.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_velocity_is_identity() {
        let t = integrate(&Field::zeros(&[2, 8, 8]), 7).unwrap();
        assert!(t.disp.data().iter().all(|&x| x == 0.0));
        assert_eq!(t.kind, TransformKind::Diffeo);
        assert!(t.source.is_some());
    }

    #[test]
    fn constant_velocity_is_translation() {
        let c = [1.5f32, -2.25];
        let v = Field::from_fn(&[2, 24, 24], |ch, _| c[ch]);
        let t = integrate(&v, 7).unwrap();
        for y in 3..21 {
            for x in 3..21 {
                for ch in 0..2 {
                    assert!((t.disp.at(ch, &[y, x]) - c[ch]).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn identity_jacobian() {
        let det = jacobian_det(&Transform::identity(&[5, 6])).unwrap();
        assert!(det.data().iter().all(|&d| d == 1.0));
        assert_eq!(folding_stats(&det), FoldingStats { pct_nonpositive: 0.0, std: 0.0 });
    }

    #[test]
    fn uniform_scaling_jacobian() {
        let u = Field::from_fn(&[2, 9, 9], |c, p| 0.1 * p[c] as f32);
        let det = jacobian_det(&Transform::displacement(u).unwrap()).unwrap();
        assert!(det.data().iter().all(|&d| (d - 1.21).abs() < 1e-4));
        let u3 = Field::from_fn(&[3, 5, 5, 5], |c, p| 0.1 * p[c] as f32);
        let det3 = jacobian_det(&Transform::displacement(u3).unwrap()).unwrap();
        assert!(det3.data().iter().all(|&d| (d - 1.331).abs() < 1e-4));
    }

    #[test]
    fn single_column_fold() {
        let u = Field::from_fn(&[2, 8, 8], |c, p| if c == 1 && p[1] == 4 { -3.0 } else { 0.0 });
        let det = jacobian_det(&Transform::displacement(u).unwrap()).unwrap();
        assert!(det.data().iter().any(|&d| d < 0.0));
        assert!(folding_stats(&det).pct_nonpositive > 0.0);
    }

    #[test]
    fn folding_percentage_counts() {
        let mut d = vec![1.0f32; 1000];
        d[3] = 0.0;
        d[500] = -0.2;
        d[999] = -5.0;
        let det = Field::new(vec![1, 10, 100], d).unwrap();
        assert!((folding_stats(&det).pct_nonpositive - 0.3).abs() < 1e-12);
    }

    #[test]
    fn jacobian_needs_three_voxels() {
        assert!(jacobian_det(&Transform::identity(&[2, 8])).is_err());
    }

    #[test]
    fn graph_and_field_integration_agree() {
        let v = Field::from_fn(&[2, 12, 12], |c, p| ((p[0] as f32 * 0.4 + c as f32).sin() + (p[1] as f32 * 0.3).cos()) * 1.3);
        let t = integrate(&v, 7).unwrap();
        let mut g = Graph::new();
        let vv = g.constant(v);
        let u = integrate_var(&mut g, vv, 7).unwrap();
        assert_eq!(g.value(u), &t.disp);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("diffeo".parse::<TransformKind>().unwrap(), TransformKind::Diffeo);
        assert_eq!("disp".parse::<TransformKind>().unwrap(), TransformKind::Displacement);
        assert!("affine".parse::<TransformKind>().is_err());
    }
}
