//! Command-line front end. Exit codes: 0 success, 2 usage or configuration
//! error, 3 data or shape error, 4 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::autodiff::OpKind;
use crate::crn::lapirn_forward;
use crate::diffeo::TransformKind;
use crate::engine::{register_direct, train_coarse_to_fine, ShuffledPairs, TrainConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{check_all, check_op, GradCheckConfig, OpReport};
use crate::io::{
    export_pgm, load_field, load_labels, params_from_checkpoint, params_to_checkpoint, save_field, save_labels,
    write_run_cfg, Checkpoint,
};
use crate::metrics::{evaluate, SegPair};
use crate::synth::{synth_atlas_pair, synth_pair};
use crate::{Field, LabelMap};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "lapirn", version, about = "Laplacian pyramid diffeomorphic image registration")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic pair with a known deformation.
    Synth(SynthArgs),
    /// Register one pair by direct optimization of the velocity pyramid.
    Register(RegisterArgs),
    /// Train the network coarse to fine on a directory of pairs.
    Train(TrainArgs),
    /// Register one pair with a trained checkpoint.
    Infer(InferArgs),
    /// Score a displacement field against segmentations.
    Eval(EvalArgs),
    /// Compare every op's backward pass with finite differences.
    Gradcheck(GradcheckArgs),
    /// Write one 2-D slice of a tensor as an 8-bit PGM.
    ExportPgm(ExportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extents as HxW or DxHxW.
    #[arg(long)]
    size: Option<String>,
    #[arg(long, default_value_t = 4.0)]
    scale: f32,
    /// Reuse F.lpt and seg.lpt from an earlier synth directory as the fixed image.
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value = "diffeo", value_parser = parse_mode)]
    mode: TransformKind,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Smoothness weight; defaults to 4 for diffeo and 1 for disp.
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long, default_value_t = 7)]
    timesteps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn config(&self) -> TrainConfig {
        let mut c = TrainConfig::for_mode(self.mode);
        c.levels = self.levels;
        if let Some(l) = self.lambda {
            c.lambda = l;
        }
        c.time_steps = self.timesteps;
        c.lr = self.lr;
        c.seed = self.seed;
        c
    }
}

#[derive(Args, Debug)]
struct SegArgs {
    #[arg(long)]
    fixed_seg: Option<PathBuf>,
    #[arg(long)]
    moving_seg: Option<PathBuf>,
}

impl SegArgs {
    fn load(&self) -> Result<Option<(LabelMap, LabelMap)>> {
        match (&self.fixed_seg, &self.moving_seg) {
            (Some(f), Some(m)) => Ok(Some((load_labels(f)?, load_labels(m)?))),
            (None, None) => Ok(None),
            _ => Err(Error::Config("--fixed-seg and --moving-seg must be given together".into())),
        }
    }
}

#[derive(Args, Debug)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Optimizer steps per pyramid level.
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[command(flatten)]
    segs: SegArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory whose subdirectories each hold F.lpt and M.lpt.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 5)]
    resblocks: usize,
    #[arg(long, default_value_t = 100)]
    freeze_steps: usize,
    #[arg(long, default_value_t = 300)]
    steps_per_level: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[command(flatten)]
    segs: SegArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    disp: PathBuf,
    #[arg(long)]
    fixed_seg: PathBuf,
    #[arg(long)]
    moving_seg: PathBuf,
    #[arg(long, default_value = "pair0")]
    pair_id: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Check a single op kind (e.g. conv, grid_sample).
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    slice: usize,
    /// Channel to export.
    #[arg(long, default_value_t = 0)]
    channel: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<Vec<usize>, String> {
    let dims: std::result::Result<Vec<usize>, _> = s.split(['x', 'X']).map(str::parse).collect();
    match dims {
        Ok(d) if (2..=3).contains(&d.len()) && d.iter().all(|&n| n > 0) => Ok(d),
        _ => Err(format!("expected HxW or DxHxW, got '{s}'")),
    }
}

fn parse_mode(s: &str) -> std::result::Result<TransformKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Shape { .. } | Error::Data(_) | Error::Io(_) => EXIT_DATA,
        Error::Numerical(_) => EXIT_NUMERICAL,
    }
}

fn kind_name(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Shape { .. } => "shape",
        Error::Data(_) => "data",
        Error::Io(_) => "io",
        Error::Numerical(_) => "numerical",
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors are reported on stderr as one
/// `error kind=<kind>: <reason>` line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            eprintln!("error kind=usage: {}", one_line(first.trim_start_matches("error: ")));
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error kind={}: {}", kind_name(&e), one_line(&e.to_string()));
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Register(a) => register(a),
        Cmd::Train(a) => train(a),
        Cmd::Infer(a) => infer(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::ExportPgm(a) => {
            let f = load_field(&a.input)?;
            if a.channel >= f.channels() {
                return Err(Error::shape("export_pgm", format!("channel {} out of range for {:?}", a.channel, f.shape())));
            }
            let mut shape = vec![1];
            shape.extend_from_slice(f.spatial());
            let ch = Field::new(shape, f.channel(a.channel).to_vec())?;
            export_pgm(&a.out, &ch, a.slice)?;
            Ok(EXIT_OK)
        }
    }
}

fn out_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p)?;
    Ok(())
}

fn kv(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn size_str(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn synth(a: SynthArgs) -> Result<i32> {
    let size = a.size.as_deref().map(parse_size).transpose().map_err(Error::Config)?;
    out_dir(&a.out)?;
    let pair = match &a.atlas {
        Some(dir) => {
            let atlas = load_field(dir.join("F.lpt"))?;
            let seg = load_labels(dir.join("seg.lpt"))?;
            if size.as_ref().is_some_and(|s| s != atlas.spatial()) {
                return Err(Error::Config(format!("--size disagrees with the atlas extents {:?}", atlas.spatial())));
            }
            synth_atlas_pair(&atlas, &seg, a.seed, a.scale)?
        }
        None => {
            let size = size.ok_or_else(|| Error::Config("--size is required without --atlas".into()))?;
            synth_pair(a.seed, &size, a.scale)?
        }
    };
    save_field(a.out.join("F.lpt"), &pair.fixed)?;
    save_field(a.out.join("M.lpt"), &pair.moving)?;
    save_labels(a.out.join("seg.lpt"), &pair.seg_fixed)?;
    save_labels(a.out.join("seg_moving.lpt"), &pair.seg_moving)?;
    save_field(a.out.join("vtrue.lpt"), &pair.velocity)?;
    save_field(a.out.join("disp_true.lpt"), &pair.truth.disp)?;
    let mut cfg = kv(&[
        ("command", "synth".into()),
        ("seed", a.seed.to_string()),
        ("size", size_str(pair.fixed.spatial())),
        ("scale", a.scale.to_string()),
    ]);
    if let Some(dir) = &a.atlas {
        cfg.push(("atlas".into(), dir.display().to_string()));
    }
    write_run_cfg(&a.out, &cfg)?;
    Ok(EXIT_OK)
}

fn write_outputs(
    out: &Path,
    disp: &Field,
    velocity: Option<&Field>,
    warped: &Field,
    report: &crate::metrics::MetricsReport,
) -> Result<()> {
    save_field(out.join("disp.lpt"), disp)?;
    save_field(out.join("warped.lpt"), warped)?;
    if let Some(v) = velocity {
        save_field(out.join("velocity.lpt"), v)?;
    }
    fs::write(out.join("metrics.csv"), report.to_csv("pair0"))?;
    Ok(())
}

fn register(a: RegisterArgs) -> Result<i32> {
    let fixed = load_field(&a.fixed)?;
    let moving = load_field(&a.moving)?;
    let segs = a.segs.load()?;
    let mut cfg = a.model.config();
    cfg.steps_per_level = a.iters;
    out_dir(&a.out)?;
    let mut run_cfg = kv(&[
        ("command", "register".into()),
        ("fixed", a.fixed.display().to_string()),
        ("moving", a.moving.display().to_string()),
    ]);
    run_cfg.extend(cfg.to_kv());
    write_run_cfg(&a.out, &run_cfg)?;
    let res = register_direct(&fixed, &moving, &cfg)?;
    let mut report = res.report.clone();
    if let Some((fs_, ms)) = &segs {
        report = evaluate(&res.transform, Some(SegPair { fixed: fs_, moving: ms }), report.seconds)?;
    }
    let velocity = (cfg.mode == TransformKind::Diffeo).then_some(&res.velocity);
    write_outputs(&a.out, &res.transform.disp, velocity, &res.warped, &report)?;
    fs::write(a.out.join("register_log.csv"), res.log.to_csv())?;
    Ok(EXIT_OK)
}

/// Sorted subdirectories of `dir` that contain both `F.lpt` and `M.lpt`.
pub fn pair_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut dirs: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("F.lpt").is_file() && p.join("M.lpt").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no F.lpt/M.lpt pairs under {}", dir.display())));
    }
    Ok(dirs)
}

fn train(a: TrainArgs) -> Result<i32> {
    let dirs = pair_dirs(&a.data)?;
    let mut pairs = Vec::with_capacity(dirs.len());
    for d in &dirs {
        pairs.push((load_field(d.join("F.lpt"))?, load_field(d.join("M.lpt"))?));
    }
    let dim = pairs[0].0.spatial_rank();
    let mut cfg = a.model.config();
    cfg.channels = a.channels;
    cfg.resblocks = a.resblocks;
    cfg.freeze_steps = a.freeze_steps;
    cfg.steps_per_level = a.steps_per_level;
    out_dir(&a.out)?;
    let mut run_cfg = kv(&[
        ("command", "train".into()),
        ("data", a.data.display().to_string()),
        ("pairs", pairs.len().to_string()),
    ]);
    run_cfg.extend(cfg.to_kv());
    write_run_cfg(&a.out, &run_cfg)?;
    let mut sampler = ShuffledPairs::new(pairs, cfg.seed)?;
    let outcome = train_coarse_to_fine(&mut sampler, &cfg, dim, None)?;
    fs::write(a.out.join("train_log.csv"), outcome.log.to_csv())?;
    if let Some(reason) = outcome.failure {
        return Err(Error::Numerical(reason));
    }
    params_to_checkpoint(&outcome.params, &cfg.to_kv()).save(a.out.join("checkpoint.lpc"))?;
    Ok(EXIT_OK)
}

fn infer(a: InferArgs) -> Result<i32> {
    let params = params_from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let fixed = load_field(&a.fixed)?;
    let moving = load_field(&a.moving)?;
    let segs = a.segs.load()?;
    out_dir(&a.out)?;
    write_run_cfg(
        &a.out,
        &kv(&[
            ("command", "infer".into()),
            ("ckpt", a.ckpt.display().to_string()),
            ("fixed", a.fixed.display().to_string()),
            ("moving", a.moving.display().to_string()),
            ("mode", params.mode.as_str().into()),
            ("levels", params.depth().to_string()),
        ]),
    )?;
    let start = Instant::now();
    let levels = lapirn_forward(&params, &fixed, &moving)?;
    let seconds = start.elapsed().as_secs_f64();
    let last = levels.last().expect("at least one level");
    let report = evaluate(
        &last.transform,
        segs.as_ref().map(|(f, m)| SegPair { fixed: f, moving: m }),
        seconds,
    )?;
    write_outputs(&a.out, &last.transform.disp, last.transform.source.as_ref(), &last.warped, &report)?;
    Ok(EXIT_OK)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let disp = load_field(&a.disp)?;
    let fixed = load_labels(&a.fixed_seg)?;
    let moving = load_labels(&a.moving_seg)?;
    let t = crate::diffeo::Transform::displacement(disp)?;
    let start = Instant::now();
    let report = evaluate(&t, Some(SegPair { fixed: &fixed, moving: &moving }), 0.0)?;
    let report = crate::metrics::MetricsReport {
        seconds: start.elapsed().as_secs_f64(),
        ..report
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    fs::write(&a.out, report.to_csv(&a.pair_id))?;
    Ok(EXIT_OK)
}

fn print_report(r: &OpReport) {
    println!(
        "{} {:<14} trials={} elements={} max_abs={:.3e} max_rel={:.3e} failures={}",
        if r.passed() { "PASS" } else { "FAIL" },
        r.kind.name(),
        r.trials,
        r.elements,
        r.max_abs_err,
        r.max_rel_err,
        r.failures
    );
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let cfg = GradCheckConfig {
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let reports = match &a.op {
        Some(name) => {
            let kind = OpKind::from_name(name)
                .filter(|k| *k != OpKind::Leaf)
                .ok_or_else(|| Error::Config(format!("unknown op '{name}'")))?;
            vec![check_op(kind, &cfg)?]
        }
        None => check_all(&cfg)?,
    };
    reports.iter().for_each(print_report);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.kind.name()).collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(","))))
    }
}
