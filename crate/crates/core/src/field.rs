//! Dense channels-first arrays of `f32` and integer label maps.

use crate::error::{Error, Result};

/// N-dimensional dense array of 32-bit floats.
///
/// Images, velocity and displacement fields are laid out channels first:
/// `[C, s0, s1]` in 2-D and `[C, s0, s1, s2]` in 3-D. Displacement channel
/// `k` is measured in voxels along spatial axis `k`. Convolution weights use
/// the same type with `[C_out, C_in, k..]` shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Field {
    /// Builds a field from external data, rejecting length mismatches and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for values produced by kernels; only the length is
    /// checked (in debug builds).
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Fills a `[C, spatial..]` field by evaluating `f(channel, coords)`.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize, &[usize]) -> f32) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(idx[0], &idx[1..]));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn spatial_rank(&self) -> usize {
        self.shape.len() - 1
    }

    pub fn voxels(&self) -> usize {
        self.spatial().iter().product()
    }

    /// Channel `c` as a contiguous slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Value at `[c, coords..]`.
    pub fn at(&self, c: usize, coords: &[usize]) -> f32 {
        self.data[self.offset(c, coords)]
    }

    pub fn offset(&self, c: usize, coords: &[usize]) -> usize {
        let mut off = c;
        for (ax, &i) in coords.iter().enumerate() {
            off = off * self.shape[ax + 1] + i;
        }
        off
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(
            "field",
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            "field",
            format!("shape {shape:?} needs {n} values, got {len}"),
        ));
    }
    Ok(())
}

/// Integer segmentation map, shaped like a single-channel field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(shape: Vec<usize>, data: Vec<u16>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spatial(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u16> {
        self.data
    }

    /// Sorted distinct labels, background included.
    pub fn labels(&self) -> Vec<u16> {
        let mut seen = std::collections::BTreeSet::new();
        seen.extend(self.data.iter().copied());
        seen.into_iter().collect()
    }

    pub fn to_field(&self) -> Field {
        Field::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }
}

/// Spatial extents padded to three axes; 2-D grids get a unit leading depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dims3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub fn from_spatial(spatial: &[usize]) -> Self {
        match *spatial {
            [h, w] => Self { d: 1, h, w },
            [d, h, w] => Self { d, h, w },
            _ => panic!("spatial rank must be 2 or 3, got {spatial:?}"),
        }
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }
}

pub(crate) fn check_spatial_rank(op: &'static str, f: &Field) -> Result<()> {
    match f.spatial_rank() {
        2 | 3 => Ok(()),
        r => Err(Error::shape(
            op,
            format!("expected 2 or 3 spatial axes, got {r} (shape {:?})", f.shape()),
        )),
    }
}
