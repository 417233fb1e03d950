//! Forward and adjoint kernels behind the autodiff ops.
//!
//! Everything here works on flat slices with 2-D grids lifted to a unit
//! depth axis. Accumulations run sequentially in index order so repeated
//! runs are bit-identical.

use crate::field::Dims3;

/// Geometry of a strided, zero-padded correlation over a 3-axis grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub input: Dims3,
    pub output: Dims3,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// `rank` is the number of spatial axes (2 or 3); for rank 2 the depth
    /// axis is passed through untouched.
    pub fn new(channels: usize, input: Dims3, rank: usize, k: usize, s: usize, p: usize) -> Self {
        let (kernel, stride, pad) = if rank == 2 {
            ([1, k, k], [1, s, s], [0, p, p])
        } else {
            ([k; 3], [s; 3], [p; 3])
        };
        let out_len = |n: usize, a: usize| (n + 2 * pad[a] - kernel[a]) / stride[a] + 1;
        let output = Dims3 {
            d: out_len(input.d, 0),
            h: out_len(input.h, 1),
            w: out_len(input.w, 2),
        };
        Self {
            channels,
            input,
            output,
            kernel,
            stride,
            pad,
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel_len()
    }
}

/// Source index along one axis for output position `o` and tap `k`.
#[inline]
fn src(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

/// Unfolds `image` (`[channels, input]`) into a `[rows, output.len()]` matrix.
pub(crate) fn im2col(g: &ConvGeom, image: &[f32]) -> Vec<f32> {
    let ncols = g.output.len();
    let mut cols = vec![0.0f32; g.rows() * ncols];
    let [kd, kh, kw] = g.kernel;
    let inp = g.input;
    let out = g.output;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &image[c * inp.len()..(c + 1) * inp.len()];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oz in 0..out.d {
                        let Some(iz) = src(oz, kz, g.stride[0], g.pad[0], inp.d) else {
                            continue;
                        };
                        for oy in 0..out.h {
                            let Some(iy) = src(oy, ky, g.stride[1], g.pad[1], inp.h) else {
                                continue;
                            };
                            let src_row = &plane[(iz * inp.h + iy) * inp.w..][..inp.w];
                            let dst_row = &mut dst[(oz * out.h + oy) * out.w..][..out.w];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                if let Some(ix) = src(ox, kx, g.stride[2], g.pad[2], inp.w) {
                                    *d = src_row[ix];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the input grid.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f32]) -> Vec<f32> {
    let ncols = g.output.len();
    let inp = g.input;
    let out = g.output;
    let mut image = vec![0.0f32; g.channels * inp.len()];
    let [kd, kh, kw] = g.kernel;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut image[c * inp.len()..(c + 1) * inp.len()];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let srcm = &cols[row * ncols..(row + 1) * ncols];
                    for oz in 0..out.d {
                        let Some(iz) = src(oz, kz, g.stride[0], g.pad[0], inp.d) else {
                            continue;
                        };
                        for oy in 0..out.h {
                            let Some(iy) = src(oy, ky, g.stride[1], g.pad[1], inp.h) else {
                                continue;
                            };
                            let dst_row = &mut plane[(iz * inp.h + iy) * inp.w..][..inp.w];
                            let src_row = &srcm[(oz * out.h + oy) * out.w..][..out.w];
                            for (ox, &v) in src_row.iter().enumerate() {
                                if let Some(ix) = src(ox, kx, g.stride[2], g.pad[2], inp.w) {
                                    dst_row[ix] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    image
}

/// `C = op(A) * op(B)` (overwrites `C`), with `op(A)` of size `m x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
) -> Vec<f32> {
    let cols = im2col(g, input);
    let n = g.output.len();
    let mut out = vec![0.0f32; cout * n];
    gemm(cout, g.rows(), n, weight, false, &cols, false, &mut out);
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    cout: usize,
    grad_out: &[f32],
    need_input: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let cols = im2col(g, input);
    let n = g.output.len();
    let rows = g.rows();
    let mut dw = vec![0.0f32; cout * rows];
    gemm(cout, n, rows, grad_out, false, &cols, true, &mut dw);
    let dinput = need_input.then(|| {
        let mut dcols = vec![0.0f32; rows * n];
        gemm(rows, cout, n, weight, true, grad_out, false, &mut dcols);
        col2im(g, &dcols)
    });
    let db = grad_out.chunks(n).map(sum_seq).collect();
    (dinput, dw, db)
}

/// Transposed convolution as the adjoint of a strided convolution whose
/// input grid is this op's output grid. `g.channels` is the output channel
/// count and `weight` is `[cin, cout, k..]`.
pub(crate) fn conv_transpose_forward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    cin: usize,
) -> Vec<f32> {
    let n_in = g.output.len();
    let rows = g.rows();
    let mut cols = vec![0.0f32; rows * n_in];
    gemm(rows, cin, n_in, weight, true, input, false, &mut cols);
    let mut out = col2im(g, &cols);
    if let Some(b) = bias {
        let n = g.input.len();
        for (co, chunk) in out.chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

pub(crate) fn conv_transpose_backward(
    g: &ConvGeom,
    input: &[f32],
    weight: &[f32],
    cin: usize,
    grad_out: &[f32],
    need_input: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let n_in = g.output.len();
    let rows = g.rows();
    let dcols = im2col(g, grad_out);
    let mut dw = vec![0.0f32; cin * rows];
    gemm(cin, n_in, rows, input, false, &dcols, true, &mut dw);
    let dinput = need_input.then(|| {
        let mut dx = vec![0.0f32; cin * n_in];
        gemm(cin, rows, n_in, weight, false, &dcols, false, &mut dx);
        dx
    });
    let n = g.input.len();
    let db = grad_out.chunks(n).map(sum_seq).collect();
    (dinput, dw, db)
}

fn sum_seq(xs: &[f32]) -> f32 {
    xs.iter().fold(0.0f32, |a, &b| a + b)
}

/// Clamped linear-interpolation stencil along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    t: f32,
    clamped: bool,
}

#[inline]
fn tap(p: f32, n: usize) -> Tap {
    let hi = (n - 1) as f32;
    let (q, clamped) = if p < 0.0 {
        (0.0, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    };
    let i0 = q.floor() as usize;
    let i0 = i0.min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    Tap {
        i0,
        i1,
        t: q - i0 as f32,
        clamped,
    }
}

/// `out[c, x] = image[c](x + disp(x))` with linear interpolation and border
/// clamping. `disp` has one channel per spatial axis (`rank` of them).
pub(crate) fn grid_sample_forward(
    image: &[f32],
    channels: usize,
    disp: &[f32],
    dims: Dims3,
    rank: usize,
) -> Vec<f32> {
    let n = dims.len();
    let mut out = vec![0.0f32; channels * n];
    if rank == 2 {
        let (h, w) = (dims.h, dims.w);
        for y in 0..h {
            for x in 0..w {
                let v = y * w + x;
                let ty = tap(y as f32 + disp[v], h);
                let tx = tap(x as f32 + disp[n + v], w);
                for c in 0..channels {
                    let img = &image[c * n..(c + 1) * n];
                    let a = img[ty.i0 * w + tx.i0] * (1.0 - tx.t) + img[ty.i0 * w + tx.i1] * tx.t;
                    let b = img[ty.i1 * w + tx.i0] * (1.0 - tx.t) + img[ty.i1 * w + tx.i1] * tx.t;
                    out[c * n + v] = a * (1.0 - ty.t) + b * ty.t;
                }
            }
        }
    } else {
        let (d, h, w) = (dims.d, dims.h, dims.w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = (z * h + y) * w + x;
                    let tz = tap(z as f32 + disp[v], d);
                    let ty = tap(y as f32 + disp[n + v], h);
                    let tx = tap(x as f32 + disp[2 * n + v], w);
                    for c in 0..channels {
                        let img = &image[c * n..(c + 1) * n];
                        let at = |zz: usize, yy: usize, xx: usize| img[(zz * h + yy) * w + xx];
                        let lerp_x = |zz, yy| at(zz, yy, tx.i0) * (1.0 - tx.t) + at(zz, yy, tx.i1) * tx.t;
                        let p0 = lerp_x(tz.i0, ty.i0) * (1.0 - ty.t) + lerp_x(tz.i0, ty.i1) * ty.t;
                        let p1 = lerp_x(tz.i1, ty.i0) * (1.0 - ty.t) + lerp_x(tz.i1, ty.i1) * ty.t;
                        out[c * n + v] = p0 * (1.0 - tz.t) + p1 * tz.t;
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_image, d_disp)` for [`grid_sample_forward`].
pub(crate) fn grid_sample_backward(
    image: &[f32],
    channels: usize,
    disp: &[f32],
    dims: Dims3,
    rank: usize,
    grad_out: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let n = dims.len();
    let mut dimg = vec![0.0f32; channels * n];
    let mut ddisp = vec![0.0f32; rank * n];
    if rank == 2 {
        let (h, w) = (dims.h, dims.w);
        for y in 0..h {
            for x in 0..w {
                let v = y * w + x;
                let ty = tap(y as f32 + disp[v], h);
                let tx = tap(x as f32 + disp[n + v], w);
                let (mut gy, mut gx) = (0.0f32, 0.0f32);
                for c in 0..channels {
                    let g = grad_out[c * n + v];
                    let base = c * n;
                    let i00 = ty.i0 * w + tx.i0;
                    let i01 = ty.i0 * w + tx.i1;
                    let i10 = ty.i1 * w + tx.i0;
                    let i11 = ty.i1 * w + tx.i1;
                    dimg[base + i00] += g * (1.0 - ty.t) * (1.0 - tx.t);
                    dimg[base + i01] += g * (1.0 - ty.t) * tx.t;
                    dimg[base + i10] += g * ty.t * (1.0 - tx.t);
                    dimg[base + i11] += g * ty.t * tx.t;
                    let img = &image[base..base + n];
                    let (v00, v01, v10, v11) = (img[i00], img[i01], img[i10], img[i11]);
                    gy += g * ((1.0 - tx.t) * (v10 - v00) + tx.t * (v11 - v01));
                    gx += g * ((1.0 - ty.t) * (v01 - v00) + ty.t * (v11 - v10));
                }
                if !ty.clamped {
                    ddisp[v] = gy;
                }
                if !tx.clamped {
                    ddisp[n + v] = gx;
                }
            }
        }
    } else {
        let (d, h, w) = (dims.d, dims.h, dims.w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = (z * h + y) * w + x;
                    let tz = tap(z as f32 + disp[v], d);
                    let ty = tap(y as f32 + disp[n + v], h);
                    let tx = tap(x as f32 + disp[2 * n + v], w);
                    let zs = [(tz.i0, 1.0 - tz.t), (tz.i1, tz.t)];
                    let ys = [(ty.i0, 1.0 - ty.t), (ty.i1, ty.t)];
                    let xs = [(tx.i0, 1.0 - tx.t), (tx.i1, tx.t)];
                    let (mut gz, mut gy, mut gx) = (0.0f32, 0.0f32, 0.0f32);
                    for c in 0..channels {
                        let g = grad_out[c * n + v];
                        let base = c * n;
                        let mut corner = [[[0.0f32; 2]; 2]; 2];
                        for (a, &(zi, wz)) in zs.iter().enumerate() {
                            for (b, &(yi, wy)) in ys.iter().enumerate() {
                                for (e, &(xi, wx)) in xs.iter().enumerate() {
                                    let idx = base + (zi * h + yi) * w + xi;
                                    dimg[idx] += g * wz * wy * wx;
                                    corner[a][b][e] = image[idx];
                                }
                            }
                        }
                        let k = corner;
                        let (wz1, wy1, wx1) = (tz.t, ty.t, tx.t);
                        let (wz0, wy0, wx0) = (1.0 - wz1, 1.0 - wy1, 1.0 - wx1);
                        let dz = wy0 * wx0 * (k[1][0][0] - k[0][0][0])
                            + wy0 * wx1 * (k[1][0][1] - k[0][0][1])
                            + wy1 * wx0 * (k[1][1][0] - k[0][1][0])
                            + wy1 * wx1 * (k[1][1][1] - k[0][1][1]);
                        let dy = wz0 * wx0 * (k[0][1][0] - k[0][0][0])
                            + wz0 * wx1 * (k[0][1][1] - k[0][0][1])
                            + wz1 * wx0 * (k[1][1][0] - k[1][0][0])
                            + wz1 * wx1 * (k[1][1][1] - k[1][0][1]);
                        let dx = wz0 * wy0 * (k[0][0][1] - k[0][0][0])
                            + wz0 * wy1 * (k[0][1][1] - k[0][1][0])
                            + wz1 * wy0 * (k[1][0][1] - k[1][0][0])
                            + wz1 * wy1 * (k[1][1][1] - k[1][1][0]);
                        gz += g * dz;
                        gy += g * dy;
                        gx += g * dx;
                    }
                    if !tz.clamped {
                        ddisp[v] = gz;
                    }
                    if !ty.clamped {
                        ddisp[n + v] = gy;
                    }
                    if !tx.clamped {
                        ddisp[2 * n + v] = gx;
                    }
                }
            }
        }
    }
    (dimg, ddisp)
}

/// Linear resampling weights along one axis (cell-centre convention).
#[derive(Clone, Debug)]
pub(crate) struct AxisResample {
    pub from: usize,
    pub to: usize,
    taps: Vec<(usize, usize, f32)>,
}

impl AxisResample {
    pub fn new(from: usize, to: usize, scale: f32) -> Self {
        let ratio = 1.0 / scale;
        let taps = (0..to)
            .map(|i| {
                let s = (i as f32 + 0.5) * ratio - 0.5;
                let tp = tap(s, from);
                (tp.i0, tp.i1, tp.t)
            })
            .collect();
        Self { from, to, taps }
    }

    /// Resamples axis `axis` of a row-major array with extents `shape`.
    pub fn apply(&self, data: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * self.to * inner];
        for o in 0..outer {
            let src = &data[o * self.from * inner..(o + 1) * self.from * inner];
            let dst = &mut out[o * self.to * inner..(o + 1) * self.to * inner];
            for (j, &(i0, i1, t)) in self.taps.iter().enumerate() {
                let a = &src[i0 * inner..(i0 + 1) * inner];
                let b = &src[i1 * inner..(i1 + 1) * inner];
                for (k, d) in dst[j * inner..(j + 1) * inner].iter_mut().enumerate() {
                    *d = a[k] * (1.0 - t) + b[k] * t;
                }
            }
        }
        out
    }

    /// Transpose of [`apply`]; `shape` is the shape of the *input* of `apply`.
    pub fn adjoint(&self, grad: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * self.from * inner];
        for o in 0..outer {
            let g = &grad[o * self.to * inner..(o + 1) * self.to * inner];
            let dst = &mut out[o * self.from * inner..(o + 1) * self.from * inner];
            for (j, &(i0, i1, t)) in self.taps.iter().enumerate() {
                for k in 0..inner {
                    let gv = g[j * inner + k];
                    dst[i0 * inner + k] += gv * (1.0 - t);
                    dst[i1 * inner + k] += gv * t;
                }
            }
        }
        out
    }
}

/// Zero-padded box sum with per-axis radii over a `Dims3` grid.
pub(crate) fn box_sum(data: &[f64], dims: Dims3, radius: [usize; 3]) -> Vec<f64> {
    let mut cur = data.to_vec();
    let shape = [dims.d, dims.h, dims.w];
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let r = radius[axis];
        if r == 0 {
            continue;
        }
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut next = vec![0.0f64; cur.len()];
        prefix.resize(n + 1, 0.0);
        for o in 0..outer {
            for k in 0..inner {
                let base = o * n * inner + k;
                prefix[0] = 0.0;
                for i in 0..n {
                    prefix[i + 1] = prefix[i] + cur[base + i * inner];
                }
                for i in 0..n {
                    let lo = i.saturating_sub(r);
                    let hi = (i + r + 1).min(n);
                    next[base + i * inner] = prefix[hi] - prefix[lo];
                }
            }
        }
        cur = next;
    }
    cur
}

/// Window statistics for squared local NCC.
struct NccStats {
    i_sum: Vec<f64>,
    j_sum: Vec<f64>,
    cross: Vec<f64>,
    i_var: Vec<f64>,
    j_var: Vec<f64>,
    i_neg: Vec<bool>,
    j_neg: Vec<bool>,
}

fn ncc_stats(f: &[f32], m: &[f32], dims: Dims3, radius: [usize; 3], wn: f64) -> NccStats {
    let fi: Vec<f64> = f.iter().map(|&v| v as f64).collect();
    let mj: Vec<f64> = m.iter().map(|&v| v as f64).collect();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let i_sum = box_sum(&fi, dims, radius);
    let j_sum = box_sum(&mj, dims, radius);
    let i2 = box_sum(&sq(&fi, &fi), dims, radius);
    let j2 = box_sum(&sq(&mj, &mj), dims, radius);
    let ij = box_sum(&sq(&fi, &mj), dims, radius);
    let n = fi.len();
    let mut cross = vec![0.0; n];
    let mut i_var = vec![0.0; n];
    let mut j_var = vec![0.0; n];
    let mut i_neg = vec![false; n];
    let mut j_neg = vec![false; n];
    for x in 0..n {
        cross[x] = ij[x] - i_sum[x] * j_sum[x] / wn;
        let iv = i2[x] - i_sum[x] * i_sum[x] / wn;
        let jv = j2[x] - j_sum[x] * j_sum[x] / wn;
        i_neg[x] = iv < 0.0;
        j_neg[x] = jv < 0.0;
        i_var[x] = iv.max(0.0);
        j_var[x] = jv.max(0.0);
    }
    NccStats {
        i_sum,
        j_sum,
        cross,
        i_var,
        j_var,
        i_neg,
        j_neg,
    }
}

pub(crate) fn ncc_radius(window: usize, rank: usize) -> ([usize; 3], f64) {
    let r = window / 2;
    let radius = if rank == 2 { [0, r, r] } else { [r, r, r] };
    (radius, (window as f64).powi(rank as i32))
}

/// Mean over voxels of the squared windowed correlation coefficient.
pub(crate) fn ncc_forward(f: &[f32], m: &[f32], dims: Dims3, rank: usize, window: usize, eps: f64) -> f32 {
    let (radius, wn) = ncc_radius(window, rank);
    let s = ncc_stats(f, m, dims, radius, wn);
    let total = (0..f.len()).fold(0.0f64, |acc, x| {
        acc + s.cross[x] * s.cross[x] / (s.i_var[x] * s.j_var[x] + eps)
    });
    (total / f.len() as f64) as f32
}

/// Gradients of `grad_out * ncc_forward(f, m)` with respect to `f` and `m`.
pub(crate) fn ncc_backward(
    f: &[f32],
    m: &[f32],
    dims: Dims3,
    rank: usize,
    window: usize,
    eps: f64,
    grad_out: f32,
) -> (Vec<f32>, Vec<f32>) {
    let (radius, wn) = ncc_radius(window, rank);
    let s = ncc_stats(f, m, dims, radius, wn);
    let n = f.len();
    let mut alpha = vec![0.0f64; n];
    let mut beta = vec![0.0f64; n];
    let mut gamma = vec![0.0f64; n];
    for x in 0..n {
        let den = s.i_var[x] * s.j_var[x] + eps;
        let a = s.cross[x];
        alpha[x] = 2.0 * a / den;
        let common = -a * a / (den * den);
        beta[x] = if s.i_neg[x] { 0.0 } else { common * s.j_var[x] };
        gamma[x] = if s.j_neg[x] { 0.0 } else { common * s.i_var[x] };
    }
    let scaled = |coef: &[f64], sums: &[f64]| -> Vec<f64> {
        coef.iter().zip(sums).map(|(c, s)| c * s / wn).collect()
    };
    let b_alpha = box_sum(&alpha, dims, radius);
    let b_alpha_j = box_sum(&scaled(&alpha, &s.j_sum), dims, radius);
    let b_alpha_i = box_sum(&scaled(&alpha, &s.i_sum), dims, radius);
    let b_beta = box_sum(&beta, dims, radius);
    let b_beta_i = box_sum(&scaled(&beta, &s.i_sum), dims, radius);
    let b_gamma = box_sum(&gamma, dims, radius);
    let b_gamma_j = box_sum(&scaled(&gamma, &s.j_sum), dims, radius);
    let g = grad_out as f64 / n as f64;
    let mut df = vec![0.0f32; n];
    let mut dm = vec![0.0f32; n];
    for y in 0..n {
        let (fy, my) = (f[y] as f64, m[y] as f64);
        df[y] = (g * (my * b_alpha[y] - b_alpha_j[y] + 2.0 * fy * b_beta[y] - 2.0 * b_beta_i[y])) as f32;
        dm[y] = (g * (fy * b_alpha[y] - b_alpha_i[y] + 2.0 * my * b_gamma[y] - 2.0 * b_gamma_j[y])) as f32;
    }
    (df, dm)
}
