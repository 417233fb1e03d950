//! Minimal reverse-mode automatic differentiation over [`Field`]s.
//!
//! A [`Graph`] is an append-only tape: every op pushes one node whose parents
//! already live earlier on the tape, so reverse index order is a valid
//! reverse topological order and [`Graph::backward`] visits each node once.

pub(crate) mod kernels;

use crate::error::{Error, Result};
use crate::field::{check_spatial_rank, Dims3, Field};
use kernels::{AxisResample, ConvGeom};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Resize factor supported by [`Graph::resize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    Half,
    Double,
}

impl Resize {
    pub fn factor(self) -> f32 {
        match self {
            Resize::Half => 0.5,
            Resize::Double => 2.0,
        }
    }

    pub fn extent(self, n: usize) -> usize {
        match self {
            Resize::Half => n / 2,
            Resize::Double => n * 2,
        }
    }
}

/// The backward rule recorded for a node.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    Concat(Vec<Var>),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    },
    ConvTranspose {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    LeakyRelu(Var, f32),
    Softsign(Var),
    GridSample {
        image: Var,
        disp: Var,
    },
    Resize(Var, Resize),
    SpatialGradient(Var, usize),
    Mean(Var),
    Sum(Var),
    Square(Var),
    LocalNcc {
        fixed: Var,
        moving: Var,
        window: usize,
        eps: f32,
    },
}

/// Discriminant of [`Op`], used for graph inspection and gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Scale,
    Concat,
    Conv,
    ConvTranspose,
    LeakyRelu,
    Softsign,
    GridSample,
    Resize,
    SpatialGradient,
    Mean,
    Sum,
    Square,
    LocalNcc,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Scale,
        OpKind::Concat,
        OpKind::Conv,
        OpKind::ConvTranspose,
        OpKind::LeakyRelu,
        OpKind::Softsign,
        OpKind::GridSample,
        OpKind::Resize,
        OpKind::SpatialGradient,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Square,
        OpKind::LocalNcc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Scale => "scale",
            OpKind::Concat => "concat",
            OpKind::Conv => "conv",
            OpKind::ConvTranspose => "conv_transpose",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Softsign => "softsign",
            OpKind::GridSample => "grid_sample",
            OpKind::Resize => "resize",
            OpKind::SpatialGradient => "spatial_gradient",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Square => "square",
            OpKind::LocalNcc => "local_ncc",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Scale(..) => OpKind::Scale,
            Op::Concat(_) => OpKind::Concat,
            Op::Conv { .. } => OpKind::Conv,
            Op::ConvTranspose { .. } => OpKind::ConvTranspose,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Softsign(_) => OpKind::Softsign,
            Op::GridSample { .. } => OpKind::GridSample,
            Op::Resize(..) => OpKind::Resize,
            Op::SpatialGradient(..) => OpKind::SpatialGradient,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::Square(_) => OpKind::Square,
            Op::LocalNcc { .. } => OpKind::LocalNcc,
        }
    }

    pub fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::LeakyRelu(a, _)
            | Op::Softsign(a)
            | Op::Resize(a, _)
            | Op::SpatialGradient(a, _)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Square(a) => vec![*a],
            Op::Concat(vs) => vs.clone(),
            Op::Conv {
                input, weight, bias, ..
            }
            | Op::ConvTranspose {
                input,
                weight,
                bias,
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::GridSample { image, disp } => vec![*image, *disp],
            Op::LocalNcc { fixed, moving, .. } => vec![*fixed, *moving],
        }
    }
}

struct Node {
    value: Field,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Field>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Field> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Field> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Append-only tape of values and their backward rules.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Field) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Field) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Field {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of nodes on the tape produced by an op of `kind`.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Nodes produced by an op of `kind`, in tape order.
    pub fn nodes_of(&self, kind: OpKind) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op.kind() == kind)
            .map(Var)
            .collect()
    }

    fn push(&mut self, value: Field, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Field, op: Op) -> Var {
        let rg = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::mismatch(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (fa, fb) = (self.value(a), self.value(b));
        let data = fa.data().iter().zip(fb.data()).map(|(x, y)| x + y).collect();
        let out = Field::from_parts(fa.shape().to_vec(), data);
        Ok(self.push_op(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (fa, fb) = (self.value(a), self.value(b));
        let data = fa.data().iter().zip(fb.data()).map(|(x, y)| x - y).collect();
        let out = Field::from_parts(fa.shape().to_vec(), data);
        Ok(self.push_op(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).scaled(s);
        self.push_op(out, Op::Scale(a, s))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let spatial = self.value(*first).spatial().to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let f = self.value(p);
            if f.spatial() != spatial.as_slice() {
                return Err(Error::mismatch("concat", self.value(*first).shape(), f.shape()));
            }
            channels += f.channels();
            data.extend_from_slice(f.data());
        }
        let mut shape = vec![channels];
        shape.extend(spatial);
        Ok(self.push_op(Field::from_parts(shape, data), Op::Concat(parts.to_vec())))
    }

    fn conv_geom(&self, op: &'static str, input: Var, weight: Var, stride: usize) -> Result<(ConvGeom, usize)> {
        let x = self.value(input);
        let w = self.value(weight);
        check_spatial_rank(op, x)?;
        let rank = x.spatial_rank();
        let ws = w.shape();
        if ws.len() != rank + 2 || ws[2..].iter().any(|&k| k != ws[2]) {
            return Err(Error::shape(
                op,
                format!("weight {ws:?} is not a cubic kernel for rank-{rank} input {:?}", x.shape()),
            ));
        }
        let k = ws[2];
        Ok((
            ConvGeom::new(x.channels(), Dims3::from_spatial(x.spatial()), rank, k, stride, 1),
            rank,
        ))
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [channels] {
                return Err(Error::mismatch(op, bs, &[channels]));
            }
        }
        Ok(())
    }

    /// Cross-correlation with padding 1; `weight` is `[C_out, C_in, k, k(, k)]`.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(Error::shape("conv", format!("stride must be 1 or 2, got {stride}")));
        }
        let (g, _) = self.conv_geom("conv", input, weight, stride)?;
        let ws = self.value(weight).shape().to_vec();
        if ws[1] != g.channels {
            return Err(Error::shape(
                "conv",
                format!("weight {ws:?} expects {} input channels, input {:?}", ws[1], self.value(input).shape()),
            ));
        }
        let cout = ws[0];
        self.check_bias("conv", bias, cout)?;
        let data = kernels::conv_forward(
            &g,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            cout,
        );
        let out = Field::from_parts(out_shape(cout, g.output, self.value(input).spatial_rank()), data);
        Ok(self.push_op(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                stride,
            },
        ))
    }

    /// Stride-2, padding-1 transposed convolution; `weight` is
    /// `[C_in, C_out, k, k(, k)]`. With `k = 4` the spatial extents double.
    pub fn conv_transpose(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        check_spatial_rank("conv_transpose", x)?;
        let rank = x.spatial_rank();
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != rank + 2 || ws[0] != x.channels() || ws[2..].iter().any(|&k| k != ws[2]) {
            return Err(Error::shape(
                "conv_transpose",
                format!("weight {ws:?} incompatible with input {:?}", x.shape()),
            ));
        }
        let (cout, k) = (ws[1], ws[2]);
        let out_spatial: Vec<usize> = x.spatial().iter().map(|&n| (n - 1) * 2 + k - 2).collect();
        let g = transpose_geom(cout, &out_spatial, rank, k);
        if g.output != Dims3::from_spatial(x.spatial()) {
            return Err(Error::shape("conv_transpose", format!("kernel {k} does not invert a stride-2 conv")));
        }
        self.check_bias("conv_transpose", bias, cout)?;
        let data = kernels::conv_transpose_forward(
            &g,
            x.data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            ws[0],
        );
        let mut shape = vec![cout];
        shape.extend(out_spatial);
        Ok(self.push_op(Field::from_parts(shape, data), Op::ConvTranspose { input, weight, bias }))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push_op(out, Op::LeakyRelu(a, slope))
    }

    /// `x / (1 + |x|)`.
    pub fn softsign(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + x.abs()));
        self.push_op(out, Op::Softsign(a))
    }

    /// Samples `image` at `x + disp(x)` with linear interpolation, clamping
    /// coordinates to the grid.
    pub fn grid_sample(&mut self, image: Var, disp: Var) -> Result<Var> {
        let (img, d) = (self.value(image), self.value(disp));
        check_spatial_rank("grid_sample", img)?;
        let rank = img.spatial_rank();
        if d.shape().len() != img.shape().len() || d.channels() != rank || d.spatial() != img.spatial() {
            return Err(Error::mismatch("grid_sample", img.shape(), d.shape()));
        }
        let data = kernels::grid_sample_forward(
            img.data(),
            img.channels(),
            d.data(),
            Dims3::from_spatial(img.spatial()),
            rank,
        );
        let out = Field::from_parts(img.shape().to_vec(), data);
        Ok(self.push_op(out, Op::GridSample { image, disp }))
    }

    /// Linear resize of every spatial axis by 0.5 (floor) or 2.
    pub fn resize(&mut self, a: Var, factor: Resize) -> Result<Var> {
        let x = self.value(a);
        check_spatial_rank("resize", x)?;
        if factor == Resize::Half && x.spatial().iter().any(|&n| n < 2) {
            return Err(Error::shape("resize", format!("cannot halve {:?}", x.shape())));
        }
        let (data, shape) = resize_forward(x.data(), x.shape(), factor);
        Ok(self.push_op(Field::from_parts(shape, data), Op::Resize(a, factor)))
    }

    /// Forward difference along spatial axis `axis`; that axis shrinks by one.
    pub fn spatial_gradient(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.spatial_rank() || x.spatial()[axis] < 2 {
            return Err(Error::shape(
                "spatial_gradient",
                format!("axis {axis} invalid for shape {:?}", x.shape()),
            ));
        }
        let shape = x.shape();
        let full = axis + 1;
        let outer: usize = shape[..full].iter().product();
        let n = shape[full];
        let inner: usize = shape[full + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * (n - 1) * inner);
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..n - 1 {
                for k in 0..inner {
                    let j = base + i * inner + k;
                    data.push(x.data()[j + inner] - x.data()[j]);
                }
            }
        }
        let mut oshape = shape.to_vec();
        oshape[full] -= 1;
        Ok(self.push_op(Field::from_parts(oshape, data), Op::SpatialGradient(a, axis)))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = sum_seq(x.data()) / x.len() as f32;
        self.push_op(Field::scalar(s), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = sum_seq(self.value(a).data());
        self.push_op(Field::scalar(s), Op::Sum(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push_op(out, Op::Square(a))
    }

    /// Mean over voxels of the squared local correlation coefficient between
    /// two single-channel images, with `window^D` windows and zero padding.
    pub fn local_ncc(&mut self, fixed: Var, moving: Var, window: usize, eps: f32) -> Result<Var> {
        self.same_shape("local_ncc", fixed, moving)?;
        let f = self.value(fixed);
        check_spatial_rank("local_ncc", f)?;
        if f.channels() != 1 {
            return Err(Error::shape("local_ncc", format!("expected one channel, got {:?}", f.shape())));
        }
        if window.is_multiple_of(2) {
            return Err(Error::shape("local_ncc", format!("window must be odd, got {window}")));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("local_ncc epsilon must be positive, got {eps}")));
        }
        let cc = kernels::ncc_forward(
            f.data(),
            self.value(moving).data(),
            Dims3::from_spatial(f.spatial()),
            f.spatial_rank(),
            window,
            eps as f64,
        );
        Ok(self.push_op(
            Field::scalar(cc),
            Op::LocalNcc {
                fixed,
                moving,
                window,
                eps,
            },
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let v = self.value(loss);
        if v.shape().iter().any(|&s| s != 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", v.shape()),
            ));
        }
        self.backward_with(loss, Field::full(v.shape(), 1.0))
    }

    /// Reverse pass seeded with an arbitrary output cotangent.
    pub fn backward_with(&self, output: Var, seed: Field) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::mismatch("backward", seed.shape(), self.value(output).shape()));
        }
        let mut grads: Vec<Option<Field>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        // Only leaves keep their gradients.
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Field>], v: Var, g: Vec<f32>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(Field::from_parts(self.value(v).shape().to_vec(), g));
            }
        }
    }

    fn propagate(&self, op: &Op, value: &Field, g: &Field, grads: &mut [Option<Field>]) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|x| -x).collect());
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gd.iter().map(|x| x * s).collect()),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Conv {
                input,
                weight,
                bias,
                stride,
            } => {
                let (geom, _) = self
                    .conv_geom("conv", *input, *weight, *stride)
                    .expect("validated at construction");
                let cout = self.value(*weight).shape()[0];
                let (dx, dw, db) = kernels::conv_backward(
                    &geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    cout,
                    gd,
                    self.requires_grad(*input),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, dw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ConvTranspose {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let ws = self.value(*weight).shape();
                let geom = transpose_geom(ws[1], value.spatial(), x.spatial_rank(), ws[2]);
                let (dx, dw, db) = kernels::conv_transpose_backward(
                    &geom,
                    x.data(),
                    self.value(*weight).data(),
                    ws[0],
                    gd,
                    self.requires_grad(*input),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, dw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let d = x
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { gv * slope })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softsign(a) => {
                let x = self.value(*a).data();
                let d = x
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| {
                        let den = 1.0 + xv.abs();
                        gv / (den * den)
                    })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::GridSample { image, disp } => {
                let img = self.value(*image);
                let (dimg, ddisp) = kernels::grid_sample_backward(
                    img.data(),
                    img.channels(),
                    self.value(*disp).data(),
                    Dims3::from_spatial(img.spatial()),
                    img.spatial_rank(),
                    gd,
                );
                self.accumulate(grads, *image, dimg);
                self.accumulate(grads, *disp, ddisp);
            }
            Op::Resize(a, factor) => {
                let d = resize_backward(gd, self.value(*a).shape(), *factor);
                self.accumulate(grads, *a, d);
            }
            Op::SpatialGradient(a, axis) => {
                let shape = self.value(*a).shape();
                let full = axis + 1;
                let outer: usize = shape[..full].iter().product();
                let n = shape[full];
                let inner: usize = shape[full + 1..].iter().product();
                let mut d = vec![0.0f32; self.value(*a).len()];
                for o in 0..outer {
                    for i in 0..n - 1 {
                        for k in 0..inner {
                            let gv = gd[(o * (n - 1) + i) * inner + k];
                            let j = o * n * inner + i * inner + k;
                            d[j + inner] += gv;
                            d[j] -= gv;
                        }
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0] / n as f32; n]);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                let d = x.iter().zip(gd).map(|(&xv, &gv)| 2.0 * xv * gv).collect();
                self.accumulate(grads, *a, d);
            }
            Op::LocalNcc {
                fixed,
                moving,
                window,
                eps,
            } => {
                let f = self.value(*fixed);
                let (df, dm) = kernels::ncc_backward(
                    f.data(),
                    self.value(*moving).data(),
                    Dims3::from_spatial(f.spatial()),
                    f.spatial_rank(),
                    *window,
                    *eps as f64,
                    gd[0],
                );
                self.accumulate(grads, *fixed, df);
                self.accumulate(grads, *moving, dm);
            }
        }
    }
}

fn sum_seq(xs: &[f32]) -> f32 {
    xs.iter().fold(0.0f32, |a, &b| a + b)
}

fn out_shape(channels: usize, d: Dims3, rank: usize) -> Vec<usize> {
    if rank == 2 {
        vec![channels, d.h, d.w]
    } else {
        vec![channels, d.d, d.h, d.w]
    }
}

fn transpose_geom(cout: usize, out_spatial: &[usize], rank: usize, k: usize) -> ConvGeom {
    ConvGeom::new(cout, Dims3::from_spatial(out_spatial), rank, k, 2, 1)
}

pub(crate) fn resize_forward(data: &[f32], shape: &[usize], factor: Resize) -> (Vec<f32>, Vec<usize>) {
    let mut cur = data.to_vec();
    let mut cur_shape = shape.to_vec();
    for axis in 1..shape.len() {
        let n = cur_shape[axis];
        let r = AxisResample::new(n, factor.extent(n), factor.factor());
        cur = r.apply(&cur, &cur_shape, axis);
        cur_shape[axis] = r.to;
    }
    (cur, cur_shape)
}

fn resize_backward(grad: &[f32], in_shape: &[usize], factor: Resize) -> Vec<f32> {
    // Shapes before each axis pass of the forward.
    let mut shapes = vec![in_shape.to_vec()];
    for axis in 1..in_shape.len() {
        let mut s = shapes.last().unwrap().clone();
        s[axis] = factor.extent(s[axis]);
        shapes.push(s);
    }
    let mut cur = grad.to_vec();
    for axis in (1..in_shape.len()).rev() {
        let before = &shapes[axis - 1];
        let n = before[axis];
        let r = AxisResample::new(n, factor.extent(n), factor.factor());
        cur = r.adjoint(&cur, before, axis);
    }
    cur
}
