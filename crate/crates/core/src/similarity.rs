//! Local NCC, the multi-resolution similarity pyramid and the per-level
//! training loss.

use crate::autodiff::{Graph, Var};
use crate::diffeo::TransformKind;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::pyramid::build_pyramid_var;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Pyramid depth `L`.
    pub levels: usize,
    /// Smoothness weight `lambda` at the finest level.
    pub lambda: f32,
    /// Denominator stabilizer of the correlation coefficient.
    pub eps: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            lambda: 4.0,
            eps: 1e-5,
        }
    }
}

impl LossConfig {
    /// Defaults with the mode-specific regularization weight (4 for
    /// velocity fields, 1 for displacement fields).
    pub fn for_mode(mode: TransformKind) -> Self {
        Self {
            lambda: default_lambda(mode),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.eps)));
        }
        Ok(())
    }

    /// NCC window at pyramid level `i` (1 = coarsest).
    pub fn window(level: usize) -> usize {
        1 + 2 * level
    }

    /// Regularization weight applied at level `p`.
    pub fn level_lambda(&self, p: usize) -> f32 {
        self.lambda / (1u64 << (self.levels - p)) as f32
    }
}

pub fn default_lambda(mode: TransformKind) -> f32 {
    match mode {
        TransformKind::Diffeo => 4.0,
        TransformKind::Displacement => 1.0,
    }
}

/// Squared local NCC of two single-channel images (graph node).
pub fn local_ncc(g: &mut Graph, fixed: Var, moving: Var, window: usize, eps: f32) -> Result<Var> {
    g.local_ncc(fixed, moving, window, eps)
}

/// Non-differentiable convenience wrapper around [`local_ncc`].
pub fn local_ncc_value(fixed: &Field, moving: &Field, window: usize, eps: f32) -> Result<f32> {
    let mut g = Graph::new();
    let f = g.constant(fixed.clone());
    let m = g.constant(moving.clone());
    let v = g.local_ncc(f, m, window, eps)?;
    Ok(g.value(v).data()[0])
}

/// `S^K = sum_i -(1 / 2^(K-i)) NCC_{1+2i}(F_i, M_i)` over a `K`-level
/// pyramid built from level-`K` inputs.
pub fn similarity_pyramid(g: &mut Graph, fixed: Var, moving_warped: Var, k: usize, cfg: &LossConfig) -> Result<Var> {
    if k == 0 || k > cfg.levels {
        return Err(Error::Config(format!("similarity pyramid depth {k} outside 1..={}", cfg.levels)));
    }
    let fp = build_pyramid_var(g, fixed, k)?;
    let mp = build_pyramid_var(g, moving_warped, k)?;
    let mut total: Option<Var> = None;
    for i in 1..=k {
        let ncc = g.local_ncc(fp[i - 1], mp[i - 1], LossConfig::window(i), cfg.eps)?;
        let term = g.scale(ncc, -1.0 / (1u64 << (k - i)) as f32);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("k >= 1"))
}

/// Sum over axes of the voxel mean of the channel-summed squared forward
/// difference. The last slice along each axis has no forward difference and
/// is left out of that axis's mean.
pub fn smoothness(g: &mut Graph, v: Var) -> Result<Var> {
    let rank = g.value(v).spatial_rank();
    let channels = g.value(v).channels() as f32;
    let mut total: Option<Var> = None;
    for axis in 0..rank {
        let d = g.spatial_gradient(v, axis)?;
        let sq = g.square(d);
        let m = g.mean(sq);
        let term = g.scale(m, channels);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("rank >= 2"))
}

/// Nodes making up one level loss.
#[derive(Clone, Copy, Debug)]
pub struct LevelLoss {
    pub total: Var,
    pub similarity: Var,
    /// Weighted regularizer, `lambda / 2^(L-p) * smoothness(v)`.
    pub regularizer: Var,
}

/// `L_p = S^p(F, M_warped) + lambda / 2^(L-p) * ||grad v||^2`.
pub fn level_loss(
    g: &mut Graph,
    fixed: Var,
    moving_warped: Var,
    velocity: Var,
    p: usize,
    cfg: &LossConfig,
) -> Result<LevelLoss> {
    cfg.validate()?;
    if p == 0 || p > cfg.levels {
        return Err(Error::Config(format!("level {p} outside 1..={}", cfg.levels)));
    }
    if g.value(velocity).spatial() != g.value(fixed).spatial() {
        return Err(Error::mismatch("level_loss", g.value(fixed).shape(), g.value(velocity).shape()));
    }
    let similarity = similarity_pyramid(g, fixed, moving_warped, p, cfg)?;
    let smooth = smoothness(g, velocity)?;
    let regularizer = g.scale(smooth, cfg.level_lambda(p));
    let total = g.add(similarity, regularizer)?;
    Ok(LevelLoss {
        total,
        similarity,
        regularizer,
    })
}
