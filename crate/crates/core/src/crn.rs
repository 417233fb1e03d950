//! Per-level registration network and the coarse-to-fine level stack.
//!
//! Each level runs an encoder (two stride-1 convs, one stride-2 conv), `R`
//! pre-activation residual blocks at half resolution, and a decoder (a
//! transposed conv back to full resolution, an encoder skip, two convs and a
//! `D`-channel output conv squashed by SoftSign). The decoder's upsampled
//! feature map is handed to the next level and added to that level's
//! stride-2 encoder output, which lives on the same grid.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::diffeo::{integrate_var, Transform, TransformKind, DEFAULT_TIME_STEPS};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::pyramid::{build_pyramid, upsample_disp_var};

pub const LEAKY_SLOPE: f32 = 0.2;
pub const DEFAULT_CHANNELS: usize = 28;
pub const DEFAULT_RESBLOCKS: usize = 5;
pub const DEFAULT_VELOCITY_SCALE: f32 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { stride: usize },
    ConvTranspose,
}

/// One learnable layer of a CRN.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl LayerSpec {
    fn conv(name: impl Into<String>, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv { stride },
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
        }
    }

    pub fn weight_shape(&self, dim: usize) -> Vec<usize> {
        let mut s = match self.kind {
            LayerKind::Conv { .. } => vec![self.out_channels, self.in_channels],
            LayerKind::ConvTranspose => vec![self.in_channels, self.out_channels],
        };
        s.extend(std::iter::repeat_n(self.kernel, dim));
        s
    }
}

/// Shape hyperparameters of one CRN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrnShape {
    /// Spatial rank (2 or 3); also the number of output channels.
    pub dim: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub resblocks: usize,
}

impl CrnShape {
    pub fn layers(&self) -> Vec<LayerSpec> {
        let c = self.channels;
        let mut v = vec![
            LayerSpec::conv("enc0", self.in_channels, c, 1),
            LayerSpec::conv("enc1", c, c, 1),
            LayerSpec::conv("down", c, c, 2),
        ];
        for r in 0..self.resblocks {
            v.push(LayerSpec::conv(format!("res{r}.conv0"), c, c, 1));
            v.push(LayerSpec::conv(format!("res{r}.conv1"), c, c, 1));
        }
        v.push(LayerSpec {
            name: "up".into(),
            kind: LayerKind::ConvTranspose,
            in_channels: c,
            out_channels: c,
            kernel: 4,
        });
        v.push(LayerSpec::conv("dec0", c, c, 1));
        v.push(LayerSpec::conv("dec1", c, c, 1));
        v.push(LayerSpec::conv("out", c, self.dim, 1));
        v
    }
}

/// Learnable tensors of one CRN, keyed `<layer>.weight` / `<layer>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrnParams {
    pub shape: CrnShape,
    pub tensors: BTreeMap<String, Field>,
}

impl CrnParams {
    /// He-uniform initialization for leaky ReLU with zero biases; the output
    /// conv starts near zero so an untrained level predicts an
    /// almost-identity transform.
    pub fn init(shape: CrnShape, rng: &mut impl Rng) -> Self {
        let mut tensors = BTreeMap::new();
        for layer in shape.layers() {
            let ws = layer.weight_shape(shape.dim);
            let fan_in = layer.in_channels * layer.kernel.pow(shape.dim as u32);
            let bound = if layer.name == "out" {
                1e-5
            } else {
                (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f32)).sqrt()
            };
            let n: usize = ws.iter().product();
            let w = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            let b = vec![0.0; layer.out_channels];
            tensors.insert(format!("{}.weight", layer.name), Field::from_parts(ws, w));
            tensors.insert(format!("{}.bias", layer.name), Field::from_parts(vec![layer.out_channels], b));
        }
        Self { shape, tensors }
    }

    pub fn zeros(shape: CrnShape) -> Self {
        let mut tensors = BTreeMap::new();
        for layer in shape.layers() {
            tensors.insert(format!("{}.weight", layer.name), Field::zeros(&layer.weight_shape(shape.dim)));
            tensors.insert(format!("{}.bias", layer.name), Field::zeros(&[layer.out_channels]));
        }
        Self { shape, tensors }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Field::len).sum()
    }

    /// Adds every tensor to `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundCrn {
        let vars = self
            .tensors
            .iter()
            .map(|(k, f)| {
                let v = if trainable { g.param(f.clone()) } else { g.constant(f.clone()) };
                (k.clone(), v)
            })
            .collect();
        BoundCrn {
            shape: self.shape,
            vars,
        }
    }
}

/// A CRN whose tensors live on a graph.
#[derive(Clone, Debug)]
pub struct BoundCrn {
    pub shape: CrnShape,
    pub vars: BTreeMap<String, Var>,
}

impl BoundCrn {
    fn w(&self, layer: &str) -> Var {
        self.vars[&format!("{layer}.weight")]
    }

    fn b(&self, layer: &str) -> Var {
        self.vars[&format!("{layer}.bias")]
    }

    fn conv(&self, g: &mut Graph, x: Var, layer: &str, stride: usize) -> Result<Var> {
        g.conv(x, self.w(layer), Some(self.b(layer)), stride)
    }

    fn conv_act(&self, g: &mut Graph, x: Var, layer: &str, stride: usize) -> Result<Var> {
        let y = self.conv(g, x, layer, stride)?;
        Ok(g.leaky_relu(y, LEAKY_SLOPE))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrnOutput {
    /// `velocity_scale * softsign(out conv)`.
    pub v: Var,
    /// Upsampled decoder features handed to the next level.
    pub hidden: Var,
}

/// One CRN forward pass. `skip` is the previous level's hidden map, added
/// after the stride-2 encoder conv.
pub fn crn_forward(
    g: &mut Graph,
    net: &BoundCrn,
    input: Var,
    skip: Option<Var>,
    velocity_scale: f32,
) -> Result<CrnOutput> {
    let x = g.value(input);
    let s = net.shape;
    if x.spatial_rank() != s.dim || x.channels() != s.in_channels {
        return Err(Error::shape(
            "crn_forward",
            format!("input {:?} does not match a {}-D CRN with {} input channels", x.shape(), s.dim, s.in_channels),
        ));
    }
    if x.spatial().iter().any(|n| n % 2 != 0) {
        return Err(Error::shape("crn_forward", format!("extents must be even, got {:?}", x.shape())));
    }
    let e0 = net.conv_act(g, input, "enc0", 1)?;
    let e1 = net.conv_act(g, e0, "enc1", 1)?;
    let mut h = net.conv_act(g, e1, "down", 2)?;
    if let Some(skip) = skip {
        h = g.add(h, skip)?;
    }
    for r in 0..s.resblocks {
        let a = g.leaky_relu(h, LEAKY_SLOPE);
        let a = net.conv(g, a, &format!("res{r}.conv0"), 1)?;
        let a = g.leaky_relu(a, LEAKY_SLOPE);
        let a = net.conv(g, a, &format!("res{r}.conv1"), 1)?;
        h = g.add(h, a)?;
    }
    let up = g.conv_transpose(h, net.w("up"), Some(net.b("up")))?;
    let hidden = g.leaky_relu(up, LEAKY_SLOPE);
    let d = g.add(hidden, e1)?;
    let d = net.conv_act(g, d, "dec0", 1)?;
    let d = net.conv_act(g, d, "dec1", 1)?;
    let out = net.conv(g, d, "out", 1)?;
    let out = g.softsign(out);
    let v = g.scale(out, velocity_scale);
    Ok(CrnOutput { v, hidden })
}

/// Parameters of the full L-level stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LapirnParams {
    pub levels: Vec<CrnParams>,
    pub velocity_scale: f32,
    pub mode: TransformKind,
    pub time_steps: usize,
    /// Diffeo mode only: build the upsampled coarse transform by integrating
    /// the upsampled velocity instead of upsampling the integrated field.
    pub reintegrate: bool,
}

/// Network hyperparameters for [`LapirnParams::init`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LapirnShape {
    pub dim: usize,
    pub levels: usize,
    pub channels: usize,
    pub resblocks: usize,
}

impl Default for LapirnShape {
    fn default() -> Self {
        Self {
            dim: 3,
            levels: 3,
            channels: DEFAULT_CHANNELS,
            resblocks: DEFAULT_RESBLOCKS,
        }
    }
}

impl LapirnShape {
    pub fn level_shape(&self, level: usize) -> CrnShape {
        CrnShape {
            dim: self.dim,
            in_channels: if level == 1 { 2 } else { 2 + self.dim },
            channels: self.channels,
            resblocks: self.resblocks,
        }
    }
}

impl LapirnParams {
    pub fn init(shape: LapirnShape, mode: TransformKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            levels: (1..=shape.levels).map(|l| CrnParams::init(shape.level_shape(l), &mut rng)).collect(),
            velocity_scale: DEFAULT_VELOCITY_SCALE,
            mode,
            time_steps: DEFAULT_TIME_STEPS,
            reintegrate: false,
        }
    }

    pub fn zeros(shape: LapirnShape, mode: TransformKind) -> Self {
        Self {
            levels: (1..=shape.levels).map(|l| CrnParams::zeros(shape.level_shape(l))).collect(),
            velocity_scale: DEFAULT_VELOCITY_SCALE,
            mode,
            time_steps: DEFAULT_TIME_STEPS,
            reintegrate: false,
        }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn shape(&self) -> LapirnShape {
        let s = self.levels[0].shape;
        LapirnShape {
            dim: s.dim,
            levels: self.levels.len(),
            channels: s.channels,
            resblocks: s.resblocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("LapIRN needs at least one level".into()));
        }
        if !(self.velocity_scale > 0.0) {
            return Err(Error::Config(format!("velocity scale must be > 0, got {}", self.velocity_scale)));
        }
        if self.time_steps == 0 {
            return Err(Error::Config("time steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Graph nodes produced for one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct LevelNodes {
    pub fixed: Var,
    pub moving: Var,
    /// Moving image warped by the upsampled coarser transform (the network
    /// input); equals `moving` at level 1.
    pub moving_prewarped: Var,
    pub v: Var,
    pub disp: Var,
    /// `moving` warped by this level's own transform.
    pub warped: Var,
}

/// Checks that `F`/`M` match and split evenly into `levels` halvings.
pub fn check_lapirn_inputs(fixed: &Field, moving: &Field, levels: usize) -> Result<()> {
    if fixed.shape() != moving.shape() {
        return Err(Error::mismatch("lapirn_forward", fixed.shape(), moving.shape()));
    }
    if fixed.channels() != 1 {
        return Err(Error::shape("lapirn_forward", format!("images must have one channel, got {:?}", fixed.shape())));
    }
    let div = 1usize << levels;
    if fixed.spatial().iter().any(|n| n % div != 0) {
        return Err(Error::shape(
            "lapirn_forward",
            format!("extents {:?} must be divisible by {div}", fixed.spatial()),
        ));
    }
    Ok(())
}

/// Runs levels `1..=nets.len()` on the graph. `nets[i]` is the bound CRN of
/// level `i + 1`; the pyramid depth is `total_levels`.
pub fn lapirn_forward_graph(
    g: &mut Graph,
    params: &LapirnParams,
    nets: &[BoundCrn],
    fixed: &Field,
    moving: &Field,
) -> Result<Vec<LevelNodes>> {
    params.validate()?;
    let total = params.depth();
    check_lapirn_inputs(fixed, moving, total)?;
    let fp = build_pyramid(fixed, total)?;
    let mp = build_pyramid(moving, total)?;
    let mut out: Vec<LevelNodes> = Vec::with_capacity(nets.len());
    let mut hidden: Option<Var> = None;
    for (idx, net) in nets.iter().enumerate() {
        let f = g.constant(fp.levels[idx].clone());
        let m = g.constant(mp.levels[idx].clone());
        let (input, prewarped, v_prev_up) = match out.last() {
            None => (g.concat(&[f, m])?, m, None),
            Some(prev) => {
                let v_up = upsample_disp_var(g, prev.v)?;
                let phi_up = match params.mode {
                    TransformKind::Diffeo if params.reintegrate => integrate_var(g, v_up, params.time_steps)?,
                    TransformKind::Diffeo => upsample_disp_var(g, prev.disp)?,
                    TransformKind::Displacement => v_up,
                };
                let mw = g.grid_sample(m, phi_up)?;
                (g.concat(&[f, mw, v_up])?, mw, Some(v_up))
            }
        };
        let crn = crn_forward(g, net, input, hidden, params.velocity_scale)?;
        let v = match v_prev_up {
            Some(up) => g.add(crn.v, up)?,
            None => crn.v,
        };
        let disp = match params.mode {
            TransformKind::Diffeo => integrate_var(g, v, params.time_steps)?,
            TransformKind::Displacement => v,
        };
        let warped = g.grid_sample(m, disp)?;
        out.push(LevelNodes {
            fixed: f,
            moving: m,
            moving_prewarped: prewarped,
            v,
            disp,
            warped,
        });
        hidden = Some(crn.hidden);
    }
    Ok(out)
}

/// Result of an inference pass for one level.
#[derive(Clone, Debug)]
pub struct LevelResult {
    pub v: Field,
    pub transform: Transform,
    pub warped: Field,
}

/// Inference through every level; returns coarse to fine.
pub fn lapirn_forward(params: &LapirnParams, fixed: &Field, moving: &Field) -> Result<Vec<LevelResult>> {
    let mut g = Graph::new();
    let nets: Vec<BoundCrn> = params.levels.iter().map(|p| p.bind(&mut g, false)).collect();
    let nodes = lapirn_forward_graph(&mut g, params, &nets, fixed, moving)?;
    Ok(nodes
        .iter()
        .map(|n| {
            let v = g.value(n.v).clone();
            let disp = g.value(n.disp).clone();
            let transform = Transform {
                disp,
                kind: params.mode,
                source: (params.mode == TransformKind::Diffeo).then(|| v.clone()),
            };
            LevelResult {
                v,
                transform,
                warped: g.value(n.warped).clone(),
            }
        })
        .collect())
}
