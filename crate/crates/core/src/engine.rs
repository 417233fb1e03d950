//! Adam, coarse-to-fine network training, and direct per-pair optimization.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::crn::{lapirn_forward_graph, BoundCrn, LapirnParams, LapirnShape, DEFAULT_RESBLOCKS, DEFAULT_VELOCITY_SCALE};
use crate::diffeo::{integrate_var, Transform, TransformKind, DEFAULT_TIME_STEPS};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::metrics::{evaluate, MetricsReport};
use crate::pyramid::{build_pyramid, upsample_disp_var};
use crate::similarity::{default_lambda, level_loss, LossConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Field,
    pub v: Field,
    /// Number of updates applied to this tensor; drives bias correction.
    pub step: u64,
}

/// Adam state for an ordered list of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub slots: Vec<Option<AdamSlot>>,
    /// Number of optimizer calls.
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            slots: vec![None; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `grads[i] == None` leaves tensor `i` and
/// its moments untouched. Any non-finite gradient aborts the whole step
/// before anything is modified.
pub fn adam_step(
    params: &mut [Field],
    names: &[String],
    grads: &[Option<&Field>],
    state: &mut OptimizerState,
    lr: f32,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} slots", params.len(), grads.len(), state.slots.len()),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params[i].shape() {
                return Err(Error::mismatch("adam_step", params[i].shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for parameter '{}'", names[i])));
            }
        }
    }
    state.step += 1;
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let slot = state.slots[i].get_or_insert_with(|| AdamSlot {
            m: Field::zeros(g.shape()),
            v: Field::zeros(g.shape()),
            step: 0,
        });
        slot.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(slot.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(slot.step as i32);
        let p = params[i].data_mut();
        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Training and direct-optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub adam: AdamConfig,
    /// Steps during which already-trained levels stay frozen when a new
    /// level joins.
    pub freeze_steps: usize,
    pub steps_per_level: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TransformKind,
    pub levels: usize,
    pub lambda: f32,
    pub channels: usize,
    pub resblocks: usize,
    pub time_steps: usize,
    pub velocity_scale: f32,
    pub reintegrate: bool,
    pub ncc_eps: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            adam: AdamConfig::default(),
            freeze_steps: 100,
            steps_per_level: 300,
            batch_size: 1,
            seed: 0,
            mode: TransformKind::Diffeo,
            levels: 3,
            lambda: default_lambda(TransformKind::Diffeo),
            channels: 16,
            resblocks: DEFAULT_RESBLOCKS,
            time_steps: DEFAULT_TIME_STEPS,
            velocity_scale: DEFAULT_VELOCITY_SCALE,
            reintegrate: false,
            ncc_eps: 1e-5,
        }
    }
}

impl TrainConfig {
    /// Defaults with the mode's regularization weight.
    pub fn for_mode(mode: TransformKind) -> Self {
        Self {
            mode,
            lambda: default_lambda(mode),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.levels == 0 || self.time_steps == 0 || self.steps_per_level == 0 {
            return Err(Error::Config("levels, time_steps and steps_per_level must be >= 1".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!("only batch size 1 is supported, got {}", self.batch_size)));
        }
        self.loss_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            levels: self.levels,
            lambda: self.lambda,
            eps: self.ncc_eps,
        }
    }

    /// Fully resolved `key=value` listing, one per line, in fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("mode", self.mode.as_str().into()),
            kv("levels", self.levels.to_string()),
            kv("lambda", self.lambda.to_string()),
            kv("time_steps", self.time_steps.to_string()),
            kv("lr", self.lr.to_string()),
            kv("adam_beta1", self.adam.beta1.to_string()),
            kv("adam_beta2", self.adam.beta2.to_string()),
            kv("adam_eps", self.adam.eps.to_string()),
            kv("freeze_steps", self.freeze_steps.to_string()),
            kv("steps_per_level", self.steps_per_level.to_string()),
            kv("batch_size", self.batch_size.to_string()),
            kv("seed", self.seed.to_string()),
            kv("channels", self.channels.to_string()),
            kv("resblocks", self.resblocks.to_string()),
            kv("velocity_scale", self.velocity_scale.to_string()),
            kv("reintegrate", self.reintegrate.to_string()),
            kv("ncc_eps", self.ncc_eps.to_string()),
        ]
    }
}

/// Source of `(fixed, moving)` training pairs.
pub trait PairSampler {
    fn next_pair(&mut self) -> Result<(Field, Field)>;
}

/// Cycles through an in-memory set of pairs, reshuffling each epoch with a
/// seeded RNG.
pub struct ShuffledPairs {
    pairs: Vec<(Field, Field)>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl ShuffledPairs {
    pub fn new(pairs: Vec<(Field, Field)>, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("no training pairs".into()));
        }
        let n = pairs.len();
        let mut s = Self {
            pairs,
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }
}

impl PairSampler for ShuffledPairs {
    fn next_pair(&mut self) -> Result<(Field, Field)> {
        if self.pos == self.order.len() {
            self.reshuffle();
        }
        let i = self.order[self.pos];
        self.pos += 1;
        Ok(self.pairs[i].clone())
    }
}

/// Yields each pair once, then reports exhaustion.
pub struct FinitePairs {
    pairs: std::vec::IntoIter<(Field, Field)>,
}

impl FinitePairs {
    pub fn new(pairs: Vec<(Field, Field)>) -> Self {
        Self {
            pairs: pairs.into_iter(),
        }
    }
}

impl PairSampler for FinitePairs {
    fn next_pair(&mut self) -> Result<(Field, Field)> {
        self.pairs
            .next()
            .ok_or_else(|| Error::Data("pair sampler exhausted".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub phase: usize,
    pub loss: f32,
    pub similarity: f32,
    pub regularizer: f32,
    /// Levels (1-based) that received no update this step.
    pub frozen: Vec<usize>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn phase_rows(&self, phase: usize) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.phase == phase)
    }

    /// CSV with header `step,phase,loss,similarity,regularizer,frozen_levels,wall_ms`.
    /// Frozen levels are `;`-separated, `-` when none.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,phase,loss,similarity,regularizer,frozen_levels,wall_ms\n");
        for r in &self.rows {
            let frozen = if r.frozen.is_empty() {
                "-".to_string()
            } else {
                r.frozen.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";")
            };
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.3}\n",
                r.step, r.phase, r.loss, r.similarity, r.regularizer, frozen, r.wall_ms
            ));
        }
        s
    }
}

/// Half-open global step range `[start, end)` of phase `p` (1-based).
pub fn phase_range(p: usize, steps_per_level: usize) -> std::ops::Range<usize> {
    (p - 1) * steps_per_level..p * steps_per_level
}

/// Callback invoked after each training step with the current parameters
/// and per-level optimizer state.
pub type StepHook<'a> = dyn FnMut(&LogRow, &LapirnParams, &[OptimizerState]) + 'a;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: LapirnParams,
    pub log: TrainLog,
    pub optimizer: Vec<OptimizerState>,
    /// Set when training stopped early on NaN or divergence.
    pub failure: Option<String>,
}

/// Tracks the divergence rule: abort once the loss stays above ten times
/// its phase-initial magnitude for 50 consecutive steps.
struct DivergenceGuard {
    initial: Option<f32>,
    over: usize,
}

const DIVERGENCE_FACTOR: f32 = 10.0;
const DIVERGENCE_PATIENCE: usize = 50;

impl DivergenceGuard {
    fn new() -> Self {
        Self { initial: None, over: 0 }
    }

    fn check(&mut self, loss: f32) -> Option<String> {
        if !loss.is_finite() {
            return Some(format!("loss became {loss}"));
        }
        let init = *self.initial.get_or_insert(loss);
        let bound = init + (DIVERGENCE_FACTOR - 1.0) * init.abs();
        if loss > bound && loss.abs() > DIVERGENCE_FACTOR * init.abs() {
            self.over += 1;
        } else {
            self.over = 0;
        }
        (self.over >= DIVERGENCE_PATIENCE).then(|| {
            format!("loss {loss} exceeded {DIVERGENCE_FACTOR}x its phase-initial value {init} for {DIVERGENCE_PATIENCE} steps")
        })
    }
}

/// Progressive training: phase `p` activates levels `1..=p` and minimizes
/// the level-`p` loss. For the first `freeze_steps` steps of phases `p > 1`
/// the levels below `p` are held fixed.
pub fn train_coarse_to_fine(
    sampler: &mut dyn PairSampler,
    cfg: &TrainConfig,
    dim: usize,
    mut hook: Option<&mut StepHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let shape = LapirnShape {
        dim,
        levels: cfg.levels,
        channels: cfg.channels,
        resblocks: cfg.resblocks,
    };
    let mut params = LapirnParams::init(shape, cfg.mode, cfg.seed);
    params.velocity_scale = cfg.velocity_scale;
    params.time_steps = cfg.time_steps;
    params.reintegrate = cfg.reintegrate;
    let names: Vec<Vec<String>> = params.levels.iter().map(|l| l.tensors.keys().cloned().collect()).collect();
    let mut optimizer: Vec<OptimizerState> = names.iter().map(|n| OptimizerState::new(n.len())).collect();
    let loss_cfg = cfg.loss_config();
    let mut log = TrainLog::default();
    let start = Instant::now();
    let mut global = 0usize;

    for phase in 1..=cfg.levels {
        let mut guard = DivergenceGuard::new();
        for s in 0..cfg.steps_per_level {
            let frozen: Vec<usize> = if phase > 1 && s < cfg.freeze_steps {
                (1..phase).collect()
            } else {
                vec![]
            };
            let (fixed, moving) = sampler.next_pair()?;
            let mut g = Graph::new();
            let nets: Vec<BoundCrn> = params.levels[..phase]
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(&mut g, !frozen.contains(&(i + 1))))
                .collect();
            let nodes = lapirn_forward_graph(&mut g, &params, &nets, &fixed, &moving)?;
            let top = nodes[phase - 1];
            let loss = level_loss(&mut g, top.fixed, top.warped, top.v, phase, &loss_cfg)?;
            let row = LogRow {
                step: global,
                phase,
                loss: g.value(loss.total).data()[0],
                similarity: g.value(loss.similarity).data()[0],
                regularizer: g.value(loss.regularizer).data()[0],
                frozen: frozen.clone(),
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            if let Some(reason) = guard.check(row.loss) {
                log.rows.push(row);
                return Ok(TrainOutcome {
                    params,
                    log,
                    optimizer,
                    failure: Some(reason),
                });
            }
            let grads = g.backward(loss.total)?;
            for (lvl, net) in nets.iter().enumerate() {
                if frozen.contains(&(lvl + 1)) {
                    continue;
                }
                let level_names = &names[lvl];
                let gs: Vec<Option<&Field>> = level_names.iter().map(|n| grads.get(net.vars[n])).collect();
                let mut tensors: Vec<Field> = level_names
                    .iter()
                    .map(|n| params.levels[lvl].tensors[n].clone())
                    .collect();
                if let Err(e) = adam_step(&mut tensors, level_names, &gs, &mut optimizer[lvl], cfg.lr, &cfg.adam) {
                    log.rows.push(row);
                    return match e {
                        Error::Numerical(reason) => Ok(TrainOutcome {
                            params,
                            log,
                            optimizer,
                            failure: Some(reason),
                        }),
                        other => Err(other),
                    };
                }
                for (n, t) in level_names.iter().zip(tensors) {
                    params.levels[lvl].tensors.insert(n.clone(), t);
                }
            }
            if let Some(h) = hook.as_mut() {
                h(&row, &params, &optimizer);
            }
            log.rows.push(row);
            global += 1;
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        optimizer,
        failure: None,
    })
}

/// Result of [`register_direct`].
#[derive(Clone, Debug)]
pub struct DirectOutcome {
    pub transform: Transform,
    /// Finest-level velocity (or displacement in displacement mode).
    pub velocity: Field,
    pub warped: Field,
    pub report: MetricsReport,
    pub log: TrainLog,
}

/// Instance-wise optimization of the level losses without a network.
///
/// Free grids `r_1..r_L` start at zero; the level-`i` field is
/// `v_i = r_i + upsample(v_{i-1})`. Phase `p` runs `steps_per_level` Adam
/// steps on `r_1..r_p` against the level-`p` loss.
pub fn register_direct(fixed: &Field, moving: &Field, cfg: &TrainConfig) -> Result<DirectOutcome> {
    cfg.validate()?;
    crate::crn::check_lapirn_inputs(fixed, moving, cfg.levels)?;
    let start = Instant::now();
    let fp = build_pyramid(fixed, cfg.levels)?;
    let mp = build_pyramid(moving, cfg.levels)?;
    let dim = fixed.spatial_rank();
    let mut grids: Vec<Field> = fp
        .levels
        .iter()
        .map(|l| {
            let mut s = vec![dim];
            s.extend_from_slice(l.spatial());
            Field::zeros(&s)
        })
        .collect();
    let names: Vec<String> = (1..=cfg.levels).map(|i| format!("velocity{i}")).collect();
    let mut state = OptimizerState::new(cfg.levels);
    let loss_cfg = cfg.loss_config();
    let mut log = TrainLog::default();
    let mut global = 0usize;

    let build = |g: &mut Graph, grids: &[Field], phase: usize, trainable: bool| -> Result<(Vec<Var>, Var, Var)> {
        let leaves: Vec<Var> = grids[..phase]
            .iter()
            .map(|f| if trainable { g.param(f.clone()) } else { g.constant(f.clone()) })
            .collect();
        let mut v = leaves[0];
        for leaf in &leaves[1..] {
            let up = upsample_disp_var(g, v)?;
            v = g.add(*leaf, up)?;
        }
        let disp = match cfg.mode {
            TransformKind::Diffeo => integrate_var(g, v, cfg.time_steps)?,
            TransformKind::Displacement => v,
        };
        Ok((leaves, v, disp))
    };

    for phase in 1..=cfg.levels {
        let mut guard = DivergenceGuard::new();
        let f = &fp.levels[phase - 1];
        let m = &mp.levels[phase - 1];
        for _ in 0..cfg.steps_per_level {
            let mut g = Graph::new();
            let (leaves, v, disp) = build(&mut g, &grids, phase, true)?;
            let fv = g.constant(f.clone());
            let mv = g.constant(m.clone());
            let warped = g.grid_sample(mv, disp)?;
            let loss = level_loss(&mut g, fv, warped, v, phase, &loss_cfg)?;
            let row = LogRow {
                step: global,
                phase,
                loss: g.value(loss.total).data()[0],
                similarity: g.value(loss.similarity).data()[0],
                regularizer: g.value(loss.regularizer).data()[0],
                frozen: vec![],
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            if let Some(reason) = guard.check(row.loss) {
                return Err(Error::Numerical(reason));
            }
            let grads = g.backward(loss.total)?;
            let gs: Vec<Option<&Field>> = (0..cfg.levels)
                .map(|i| if i < phase { grads.get(leaves[i]) } else { None })
                .collect();
            adam_step(&mut grids, &names, &gs, &mut state, cfg.lr, &cfg.adam)?;
            log.rows.push(row);
            global += 1;
        }
    }

    let mut g = Graph::new();
    let (_, v, disp) = build(&mut g, &grids, cfg.levels, false)?;
    let velocity = g.value(v).clone();
    let transform = Transform {
        disp: g.value(disp).clone(),
        kind: cfg.mode,
        source: (cfg.mode == TransformKind::Diffeo).then(|| velocity.clone()),
    };
    let warped = crate::pyramid::warp(moving, &transform.disp)?;
    let seconds = start.elapsed().as_secs_f64();
    let report = evaluate(&transform, None, seconds)?;
    Ok(DirectOutcome {
        transform,
        velocity,
        warped,
        report,
        log,
    })
}
