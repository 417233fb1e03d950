//! Image pyramids, linear resampling and warping.

use crate::autodiff::{resize_forward, Graph, Resize, Var};
use crate::error::{Error, Result};
use crate::field::{check_spatial_rank, Dims3, Field};

/// Levels ordered coarse to fine; the last level is the original image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePyramid {
    pub levels: Vec<Field>,
}

impl ImagePyramid {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Level `i` counted from 1 (coarsest) as in the level notation used
    /// throughout the crate.
    pub fn level(&self, i: usize) -> &Field {
        &self.levels[i - 1]
    }

    pub fn finest(&self) -> &Field {
        self.levels.last().expect("pyramid has at least one level")
    }
}

/// Checks that every spatial extent is at least `4 * 2^(levels - 1)`.
pub fn check_pyramid_extents(spatial: &[usize], levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::Config("pyramid depth must be at least 1".into()));
    }
    let min = 4usize << (levels - 1);
    if spatial.iter().any(|&n| n < min) {
        return Err(Error::shape(
            "build_pyramid",
            format!("extents {spatial:?} too small for {levels} levels (need >= {min})"),
        ));
    }
    Ok(())
}

/// Builds an `levels`-deep pyramid by repeated 0.5x linear resizing.
pub fn build_pyramid(img: &Field, levels: usize) -> Result<ImagePyramid> {
    check_spatial_rank("build_pyramid", img)?;
    check_pyramid_extents(img.spatial(), levels)?;
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let (data, shape) = resize_forward(prev.data(), prev.shape(), Resize::Half);
        out.push(Field::from_parts(shape, data));
    }
    out.reverse();
    Ok(ImagePyramid { levels: out })
}

/// Differentiable counterpart of [`build_pyramid`]; returns coarse to fine.
pub fn build_pyramid_var(g: &mut Graph, img: Var, levels: usize) -> Result<Vec<Var>> {
    check_pyramid_extents(g.value(img).spatial(), levels)?;
    let mut out = vec![img];
    for _ in 1..levels {
        let next = g.resize(*out.last().unwrap(), Resize::Half)?;
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

fn check_disp(op: &'static str, img: &Field, disp: &Field) -> Result<()> {
    check_spatial_rank(op, img)?;
    if disp.shape().len() != img.shape().len()
        || disp.channels() != img.spatial_rank()
        || disp.spatial() != img.spatial()
    {
        return Err(Error::mismatch(op, img.shape(), disp.shape()));
    }
    Ok(())
}

/// `img(x + disp(x))` with linear interpolation and border clamping.
pub fn warp(img: &Field, disp: &Field) -> Result<Field> {
    check_disp("warp", img, disp)?;
    let data = crate::autodiff::kernels::grid_sample_forward(
        img.data(),
        img.channels(),
        disp.data(),
        Dims3::from_spatial(img.spatial()),
        img.spatial_rank(),
    );
    Ok(Field::from_parts(img.shape().to_vec(), data))
}

/// Doubles the grid of a displacement or velocity field and its values,
/// keeping magnitudes in voxels of the destination grid.
pub fn upsample_disp(v: &Field) -> Result<Field> {
    check_spatial_rank("upsample_disp", v)?;
    if v.channels() != v.spatial_rank() {
        return Err(Error::shape(
            "upsample_disp",
            format!("expected {} channels, got shape {:?}", v.spatial_rank(), v.shape()),
        ));
    }
    let (data, shape) = resize_forward(v.data(), v.shape(), Resize::Double);
    Ok(Field::from_parts(shape, data).scaled(2.0))
}

/// Differentiable [`upsample_disp`].
pub fn upsample_disp_var(g: &mut Graph, v: Var) -> Result<Var> {
    let f = g.value(v);
    if f.channels() != f.spatial_rank() {
        return Err(Error::shape(
            "upsample_disp",
            format!("expected {} channels, got shape {:?}", f.spatial_rank(), f.shape()),
        ));
    }
    let up = g.resize(v, Resize::Double)?;
    Ok(g.scale(up, 2.0))
}
