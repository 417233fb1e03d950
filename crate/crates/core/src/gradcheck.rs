//! Central finite-difference checks for every autodiff op.
//!
//! Each op is evaluated on small random inputs; the backward pass is seeded
//! with a random cotangent `r` and compared against
//! `(r . y(x + h e) - r . y(x - h e)) / 2h` for every input element `e`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, OpKind, Resize, Var};
use crate::error::{Error, Result};
use crate::field::Field;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f32,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-2,
            abs_tol: 1e-4,
            trials: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub kind: OpKind,
    pub trials: usize,
    pub elements: usize,
    /// Largest `|analytic - numeric|` over all checked elements.
    pub max_abs_err: f64,
    /// Largest relative error among elements above the absolute floor.
    pub max_rel_err: f64,
    pub failures: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Field>,
    build: Builder,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Field {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Field::new(shape.to_vec(), data).expect("finite")
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Field {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1f32..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Field::new(shape.to_vec(), data).expect("finite")
}

/// Displacements whose sample points stay inside the grid and away from
/// integer knots, where linear interpolation is not differentiable.
fn interior_disp(rng: &mut ChaCha8Rng, spatial: &[usize]) -> Field {
    let rank = spatial.len();
    let mut shape = vec![rank];
    shape.extend_from_slice(spatial);
    let mut f = Field::zeros(&shape);
    let n: usize = spatial.iter().product();
    for v in 0..n {
        let mut rem = v;
        let mut coord = vec![0usize; rank];
        for ax in (0..rank).rev() {
            coord[ax] = rem % spatial[ax];
            rem /= spatial[ax];
        }
        for ax in 0..rank {
            let cell = rng.random_range(0..spatial[ax] - 1) as f32;
            let p = cell + rng.random_range(0.15f32..0.85);
            f.data_mut()[ax * n + v] = p - coord[ax] as f32;
        }
    }
    f
}

fn case(kind: OpKind, trial: usize, rng: &mut ChaCha8Rng) -> Case {
    let three_d = trial == 2;
    let sp: Vec<usize> = if three_d { vec![4, 4, 4] } else { vec![5, 5] };
    let shaped = |c: usize| {
        let mut s = vec![c];
        s.extend_from_slice(&sp);
        s
    };
    match kind {
        OpKind::Add | OpKind::Sub => Case {
            inputs: vec![uniform(rng, &shaped(2), -1.0, 1.0), uniform(rng, &shaped(2), -1.0, 1.0)],
            build: Box::new(move |g, v| if kind == OpKind::Add { g.add(v[0], v[1]) } else { g.sub(v[0], v[1]) }),
        },
        OpKind::Scale => Case {
            inputs: vec![uniform(rng, &shaped(2), -1.0, 1.0)],
            build: Box::new(|g, v| Ok(g.scale(v[0], -1.7))),
        },
        OpKind::Concat => Case {
            inputs: vec![uniform(rng, &shaped(1), -1.0, 1.0), uniform(rng, &shaped(2), -1.0, 1.0)],
            build: Box::new(|g, v| g.concat(v)),
        },
        OpKind::Conv => {
            let stride = if trial == 1 { 2 } else { 1 };
            let mut ws = vec![3, 2];
            ws.extend(std::iter::repeat_n(3, sp.len()));
            Case {
                inputs: vec![
                    uniform(rng, &shaped(2), -1.0, 1.0),
                    uniform(rng, &ws, -0.15, 0.15),
                    uniform(rng, &[3], -0.1, 0.1),
                ],
                build: Box::new(move |g, v| g.conv(v[0], v[1], Some(v[2]), stride)),
            }
        }
        OpKind::ConvTranspose => {
            let small: Vec<usize> = if three_d { vec![2, 2, 2] } else { vec![3, 3] };
            let mut xs = vec![2];
            xs.extend_from_slice(&small);
            let mut ws = vec![2, 3];
            ws.extend(std::iter::repeat_n(4, small.len()));
            Case {
                inputs: vec![
                    uniform(rng, &xs, -1.0, 1.0),
                    uniform(rng, &ws, -0.15, 0.15),
                    uniform(rng, &[3], -0.1, 0.1),
                ],
                build: Box::new(|g, v| g.conv_transpose(v[0], v[1], Some(v[2]))),
            }
        }
        OpKind::LeakyRelu => Case {
            inputs: vec![away_from_zero(rng, &shaped(2))],
            build: Box::new(|g, v| Ok(g.leaky_relu(v[0], 0.2))),
        },
        OpKind::Softsign => Case {
            inputs: vec![uniform(rng, &shaped(2), -3.0, 3.0)],
            build: Box::new(|g, v| Ok(g.softsign(v[0]))),
        },
        OpKind::GridSample => Case {
            inputs: vec![uniform(rng, &shaped(2), -1.0, 1.0), interior_disp(rng, &sp)],
            build: Box::new(|g, v| g.grid_sample(v[0], v[1])),
        },
        OpKind::Resize => {
            let (shape, factor) = match trial {
                0 => (vec![2, 6, 6], Resize::Half),
                1 => (vec![2, 5, 5], Resize::Double),
                _ => (vec![1, 4, 4, 4], Resize::Half),
            };
            Case {
                inputs: vec![uniform(rng, &shape, -1.0, 1.0)],
                build: Box::new(move |g, v| g.resize(v[0], factor)),
            }
        }
        OpKind::SpatialGradient => {
            let axis = trial % sp.len();
            Case {
                inputs: vec![uniform(rng, &shaped(2), -1.0, 1.0)],
                build: Box::new(move |g, v| g.spatial_gradient(v[0], axis)),
            }
        }
        OpKind::Mean => Case {
            inputs: vec![uniform(rng, &shaped(2), -1.0, 1.0)],
            build: Box::new(|g, v| Ok(g.mean(v[0]))),
        },
        OpKind::Sum => Case {
            inputs: vec![uniform(rng, &shaped(2), -1.0, 1.0)],
            build: Box::new(|g, v| Ok(g.sum(v[0]))),
        },
        OpKind::Square => Case {
            inputs: vec![uniform(rng, &shaped(2), -1.0, 1.0)],
            build: Box::new(|g, v| Ok(g.square(v[0]))),
        },
        OpKind::LocalNcc => {
            let window = if trial == 1 { 5 } else { 3 };
            let f = uniform(rng, &shaped(1), 0.0, 1.0);
            let noise = uniform(rng, &shaped(1), -0.5, 0.5);
            let m = Field::from_parts(
                f.shape().to_vec(),
                f.data().iter().zip(noise.data()).map(|(a, b)| 0.8 * a + b).collect(),
            );
            Case {
                inputs: vec![f, m],
                build: Box::new(move |g, v| g.local_ncc(v[0], v[1], window, 1e-5)),
            }
        }
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
}

fn forward(case: &Case, inputs: &[Field]) -> Result<Field> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|f| g.param(f.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

/// Runs the finite-difference check for one op kind.
pub fn check_op(kind: OpKind, cfg: &GradCheckConfig) -> Result<OpReport> {
    if kind == OpKind::Leaf {
        return Err(Error::Config("leaf has no backward rule".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (kind as u64).wrapping_mul(0x9e37_79b9));
    let mut report = OpReport {
        kind,
        trials: cfg.trials,
        elements: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        failures: 0,
    };
    for trial in 0..cfg.trials {
        let case = case(kind, trial % 3, &mut rng);
        let mut g = Graph::new();
        let vars: Vec<Var> = case.inputs.iter().map(|f| g.param(f.clone())).collect();
        let out = (case.build)(&mut g, &vars)?;
        let seed = uniform(&mut rng, g.value(out).shape(), -1.0, 1.0);
        let grads = g.backward_with(out, seed.clone())?;

        for (k, input) in case.inputs.iter().enumerate() {
            let zeros = Field::zeros(input.shape());
            let analytic = grads.get(vars[k]).unwrap_or(&zeros);
            for e in 0..input.len() {
                let mut plus = case.inputs.clone();
                let mut minus = case.inputs.clone();
                let x = input.data()[e];
                plus[k].data_mut()[e] = x + cfg.step;
                minus[k].data_mut()[e] = x - cfg.step;
                let dx = (plus[k].data()[e] - minus[k].data()[e]) as f64;
                let yp = forward(&case, &plus)?;
                let ym = forward(&case, &minus)?;
                let dy: f64 = seed
                    .data()
                    .iter()
                    .zip(yp.data().iter().zip(ym.data()))
                    .map(|(&r, (&a, &b))| r as f64 * (a as f64 - b as f64))
                    .sum();
                let numeric = dy / dx;
                let a = analytic.data()[e] as f64;
                let err = (a - numeric).abs();
                let scale = a.abs().max(numeric.abs());
                report.elements += 1;
                report.max_abs_err = report.max_abs_err.max(err);
                if err > cfg.abs_tol {
                    let rel = err / scale;
                    report.max_rel_err = report.max_rel_err.max(rel);
                    if rel > cfg.rel_tol {
                        report.failures += 1;
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Checks every differentiable op kind.
pub fn check_all(cfg: &GradCheckConfig) -> Result<Vec<OpReport>> {
    OpKind::ALL.iter().map(|&k| check_op(k, cfg)).collect()
}
