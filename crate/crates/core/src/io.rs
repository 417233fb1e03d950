//! Binary tensor and checkpoint files, `run.cfg` text and PGM export.
//!
//! Tensor files (`LPT1`): magic, dtype byte (0 = f32, 1 = u16), rank byte,
//! `rank` little-endian u32 extents, then the row-major little-endian
//! payload. Checkpoints (`LPC1`): magic, u32 entry count, entries of
//! `[u16 name length, name, tensor file]`, then a u32-length-prefixed
//! block of `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::crn::{CrnParams, LapirnParams, LapirnShape};
use crate::diffeo::TransformKind;
use crate::error::{Error, Result};
use crate::field::{Field, LabelMap};

pub const TENSOR_MAGIC: &[u8; 4] = b"LPT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LPC1";

const DTYPE_F32: u8 = 0;
const DTYPE_U16: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    F32(Field),
    U16(LabelMap),
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(f) => f.shape(),
            Tensor::U16(l) => l.shape(),
        }
    }

    pub fn into_field(self) -> Result<Field> {
        match self {
            Tensor::F32(f) => Ok(f),
            Tensor::U16(_) => Err(Error::Data("expected a float tensor, found labels".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            Tensor::U16(l) => Ok(l),
            Tensor::F32(_) => Err(Error::Data("expected a label tensor, found floats".into())),
        }
    }
}

impl From<Field> for Tensor {
    fn from(f: Field) -> Self {
        Tensor::F32(f)
    }
}

impl From<LabelMap> for Tensor {
    fn from(l: LabelMap) -> Self {
        Tensor::U16(l)
    }
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::Data(format!("rank {} does not fit the header", shape.len())));
    }
    let dtype = match t {
        Tensor::F32(_) => DTYPE_F32,
        Tensor::U16(_) => DTYPE_U16,
    };
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[dtype, shape.len() as u8])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Data(format!("extent {d} does not fit in u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    match t {
        Tensor::F32(f) => {
            let mut buf = Vec::with_capacity(f.len() * 4);
            f.data().iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Tensor::U16(l) => {
            let mut buf = Vec::with_capacity(l.data().len() * 2);
            l.data().iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Data(format!("truncated {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let b = read_exact(r, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let magic = read_exact(r, 4, "tensor header")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Data(format!("bad tensor magic {magic:?}")));
    }
    let head = read_exact(r, 2, "tensor header")?;
    let (dtype, rank) = (head[0], head[1] as usize);
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, "tensor extents")? as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Data(format!("extents {shape:?} overflow")))?;
    match dtype {
        DTYPE_F32 => {
            let bytes = read_exact(r, n * 4, "tensor payload")?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Tensor::F32(Field::new(shape, data)?))
        }
        DTYPE_U16 => {
            let bytes = read_exact(r, n * 2, "tensor payload")?;
            let data = bytes.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Tensor::U16(LabelMap::new(shape, data)?))
        }
        other => Err(Error::Data(format!("unknown dtype code {other}"))),
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).expect("writing to memory");
    buf
}

/// Decodes a whole buffer; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = bytes;
    let t = read_tensor(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Data(format!("{} trailing bytes after tensor", r.len())));
    }
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    decode_tensor(&bytes)
}

pub fn save_field(path: impl AsRef<Path>, f: &Field) -> Result<()> {
    save_tensor(path, &Tensor::F32(f.clone()))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<Field> {
    load_tensor(path)?.into_field()
}

pub fn save_labels(path: impl AsRef<Path>, l: &LabelMap) -> Result<()> {
    save_tensor(path, &Tensor::U16(l.clone()))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    load_tensor(path)?.into_labels()
}

/// Named tensors plus an ordered `key=value` configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
    pub config: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, _) in &self.entries {
            if !seen.insert(n) {
                return Err(Error::Data(format!("duplicate checkpoint entry '{n}'")));
            }
            if n.len() > u16::MAX as usize {
                return Err(Error::Data(format!("entry name of {} bytes is too long", n.len())));
            }
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (n, t) in &self.entries {
            buf.extend_from_slice(&(n.len() as u16).to_le_bytes());
            buf.extend_from_slice(n.as_bytes());
            write_tensor(&mut buf, t)?;
        }
        let text = format_kv(&self.config)?;
        buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
        buf.extend_from_slice(text.as_bytes());
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let magic = read_exact(&mut r, 4, "checkpoint header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Data(format!("bad checkpoint magic {magic:?}")));
        }
        let count = read_u32(&mut r, "checkpoint header")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..count {
            let len = read_exact(&mut r, 2, "entry name length")?;
            let len = u16::from_le_bytes([len[0], len[1]]) as usize;
            let name = String::from_utf8(read_exact(&mut r, len, "entry name")?)
                .map_err(|_| Error::Data("entry name is not UTF-8".into()))?;
            if !seen.insert(name.clone()) {
                return Err(Error::Data(format!("duplicate checkpoint entry '{name}'")));
            }
            let t = read_tensor(&mut r)?;
            entries.push((name, t));
        }
        let len = read_u32(&mut r, "config length")? as usize;
        let text = String::from_utf8(read_exact(&mut r, len, "config block")?)
            .map_err(|_| Error::Data("config block is not UTF-8".into()))?;
        if !r.is_empty() {
            return Err(Error::Data(format!("{} trailing bytes after checkpoint", r.len())));
        }
        Ok(Self {
            entries,
            config: parse_kv(&text)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

/// `key=value` lines in the given order. Keys may not contain `=` or
/// newlines; values may not contain newlines.
pub fn format_kv(kv: &[(String, String)]) -> Result<String> {
    let mut s = String::new();
    for (k, v) in kv {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Data(format!("invalid config entry '{k}'")));
        }
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    Ok(s)
}

pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Data(format!("config line without '=': {l}")))
        })
        .collect()
}

/// Writes `run.cfg` into `dir`.
pub fn write_run_cfg(dir: impl AsRef<Path>, kv: &[(String, String)]) -> Result<()> {
    fs::write(dir.as_ref().join("run.cfg"), format_kv(kv)?)?;
    Ok(())
}

fn param_name(level: usize, tensor: &str) -> String {
    format!("level{level}.{tensor}")
}

/// Packs network parameters and their hyperparameters into a checkpoint.
pub fn params_to_checkpoint(p: &LapirnParams, extra: &[(String, String)]) -> Checkpoint {
    let s = p.shape();
    let mut entries = Vec::new();
    for (i, level) in p.levels.iter().enumerate() {
        for (name, t) in &level.tensors {
            entries.push((param_name(i + 1, name), Tensor::F32(t.clone())));
        }
    }
    let mut config: Vec<(String, String)> = vec![
        ("dim".into(), s.dim.to_string()),
        ("levels".into(), s.levels.to_string()),
        ("channels".into(), s.channels.to_string()),
        ("resblocks".into(), s.resblocks.to_string()),
        ("mode".into(), p.mode.as_str().into()),
        ("velocity_scale".into(), p.velocity_scale.to_string()),
        ("time_steps".into(), p.time_steps.to_string()),
        ("reintegrate".into(), p.reintegrate.to_string()),
    ];
    for (k, v) in extra {
        if !config.iter().any(|(c, _)| c == k) {
            config.push((k.clone(), v.clone()));
        }
    }
    Checkpoint { entries, config }
}

fn cfg<T: std::str::FromStr>(c: &Checkpoint, key: &str) -> Result<T> {
    let raw = c
        .config_value(key)
        .ok_or_else(|| Error::Data(format!("checkpoint config lacks '{key}'")))?;
    raw.parse()
        .map_err(|_| Error::Data(format!("checkpoint config '{key}' has bad value '{raw}'")))
}

/// Rebuilds parameters, checking every tensor against the recorded
/// architecture.
pub fn params_from_checkpoint(c: &Checkpoint) -> Result<LapirnParams> {
    let shape = LapirnShape {
        dim: cfg(c, "dim")?,
        levels: cfg(c, "levels")?,
        channels: cfg(c, "channels")?,
        resblocks: cfg(c, "resblocks")?,
    };
    if !(2..=3).contains(&shape.dim) || shape.levels == 0 {
        return Err(Error::Data(format!("unsupported architecture {shape:?}")));
    }
    let mode: TransformKind = cfg::<String>(c, "mode")?
        .parse()
        .map_err(|e: Error| Error::Data(e.to_string()))?;
    let mut levels = Vec::with_capacity(shape.levels);
    let mut used = 0usize;
    for l in 1..=shape.levels {
        let template = CrnParams::zeros(shape.level_shape(l));
        let mut tensors = BTreeMap::new();
        for (name, zero) in &template.tensors {
            let key = param_name(l, name);
            let t = c
                .get(&key)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor '{key}'")))?;
            let Tensor::F32(f) = t else {
                return Err(Error::Data(format!("tensor '{key}' is not f32")));
            };
            if f.shape() != zero.shape() {
                return Err(Error::Data(format!(
                    "tensor '{key}' has shape {:?}, expected {:?}",
                    f.shape(),
                    zero.shape()
                )));
            }
            tensors.insert(name.clone(), f.clone());
            used += 1;
        }
        levels.push(CrnParams {
            shape: template.shape,
            tensors,
        });
    }
    if used != c.entries.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors, architecture uses {used}",
            c.entries.len()
        )));
    }
    let p = LapirnParams {
        levels,
        velocity_scale: cfg(c, "velocity_scale")?,
        mode,
        time_steps: cfg(c, "time_steps")?,
        reintegrate: cfg(c, "reintegrate")?,
    };
    p.validate().map_err(|e| Error::Data(e.to_string()))?;
    Ok(p)
}

/// 8-bit binary PGM of channel 0; 3-D inputs are sliced at `slice` along
/// the first spatial axis. Intensities are min-max scaled to 0..=255.
pub fn pgm_bytes(f: &Field, slice: usize) -> Result<Vec<u8>> {
    let (h, w, plane) = match f.spatial() {
        [h, w] => {
            if slice != 0 {
                return Err(Error::shape("export_pgm", format!("slice {slice} out of range for a 2-D image")));
            }
            (*h, *w, f.channel(0))
        }
        [d, h, w] => {
            if slice >= *d {
                return Err(Error::shape("export_pgm", format!("slice {slice} out of range 0..{d}")));
            }
            (*h, *w, &f.channel(0)[slice * h * w..(slice + 1) * h * w])
        }
        other => return Err(Error::shape("export_pgm", format!("expected 2-D or 3-D image, got {other:?}"))),
    };
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&x| {
        if span > 0.0 {
            ((x - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn export_pgm(path: impl AsRef<Path>, f: &Field, slice: usize) -> Result<()> {
    fs::write(path, pgm_bytes(f, slice)?)?;
    Ok(())
}
