//! Registration quality: Dice overlap, Jacobian folding statistics, volume
//! change of structures and timing.

use std::collections::BTreeMap;

use crate::diffeo::{folding_stats, jacobian_det, Transform};
use crate::error::{Error, Result};
use crate::field::{Dims3, LabelMap};

/// Label value treated as background and left out of every structure metric.
pub const BACKGROUND: u16 = 0;

/// Per-label Dice `2|A∩B| / (|A| + |B|)`. A label absent from both maps
/// scores 1.0.
pub fn dice(a: &LabelMap, b: &LabelMap, labels: &[u16]) -> Result<BTreeMap<u16, f64>> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch("dice", a.shape(), b.shape()));
    }
    let mut out = BTreeMap::new();
    for &l in labels {
        let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
        for (&x, &y) in a.data().iter().zip(b.data()) {
            let (ia, ib) = (x == l, y == l);
            na += ia as u64;
            nb += ib as u64;
            both += (ia && ib) as u64;
        }
        let d = if na + nb == 0 {
            1.0
        } else {
            2.0 * both as f64 / (na + nb) as f64
        };
        out.insert(l, d);
    }
    Ok(out)
}

/// Non-background labels present in either map, ascending.
pub fn foreground_labels(a: &LabelMap, b: &LabelMap) -> Vec<u16> {
    let mut l = a.labels();
    l.extend(b.labels());
    l.sort_unstable();
    l.dedup();
    l.retain(|&x| x != BACKGROUND);
    l
}

fn nearest(p: f32, n: usize) -> usize {
    p.round().clamp(0.0, (n - 1) as f32) as usize
}

/// Nearest-neighbour pull-back `seg(x + u(x))` with border clamping.
pub fn warp_labels(seg: &LabelMap, t: &Transform) -> Result<LabelMap> {
    let spatial = seg.spatial();
    if t.spatial() != spatial {
        return Err(Error::mismatch("warp_labels", seg.shape(), t.disp.shape()));
    }
    let rank = spatial.len();
    let dims = Dims3::from_spatial(spatial);
    let n = dims.len();
    let u = &t.disp;
    let mut out = Vec::with_capacity(n);
    for z in 0..dims.d {
        for y in 0..dims.h {
            for x in 0..dims.w {
                let v = (z * dims.h + y) * dims.w + x;
                let (sz, sy, sx) = if rank == 2 {
                    (0, nearest(y as f32 + u.channel(0)[v], dims.h), nearest(x as f32 + u.channel(1)[v], dims.w))
                } else {
                    (
                        nearest(z as f32 + u.channel(0)[v], dims.d),
                        nearest(y as f32 + u.channel(1)[v], dims.h),
                        nearest(x as f32 + u.channel(2)[v], dims.w),
                    )
                };
                out.push(seg.data()[(sz * dims.h + sy) * dims.w + sx]);
            }
        }
    }
    LabelMap::new(seg.shape().to_vec(), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopologyChange {
    /// Mean per-label volume ratio, `None` when no label qualified.
    pub value: Option<f64>,
    pub per_label: BTreeMap<u16, f64>,
    /// Labels skipped because one of the two volumes was zero.
    pub excluded: Vec<u16>,
}

/// Mean over labels of `|moving voxels of l| / |warped voxels of l|`.
///
/// With pull-back warping a transform whose Jacobian determinant is `J`
/// shrinks a structure in the warped image by `1/J`, so this ratio tracks
/// the local volume change `J` of the transform itself.
pub fn topology_change(moving: &LabelMap, warped: &LabelMap, labels: &[u16]) -> Result<TopologyChange> {
    if moving.shape() != warped.shape() {
        return Err(Error::mismatch("topology_change", moving.shape(), warped.shape()));
    }
    let mut per_label = BTreeMap::new();
    let mut excluded = Vec::new();
    for &l in labels {
        let before = moving.data().iter().filter(|&&x| x == l).count();
        let after = warped.data().iter().filter(|&&x| x == l).count();
        if before == 0 || after == 0 {
            excluded.push(l);
        } else {
            per_label.insert(l, before as f64 / after as f64);
        }
    }
    let value = (!per_label.is_empty()).then(|| per_label.values().sum::<f64>() / per_label.len() as f64);
    Ok(TopologyChange {
        value,
        per_label,
        excluded,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub dsc: BTreeMap<u16, f64>,
    pub dsc_mean: Option<f64>,
    /// Percentage of voxels with non-positive Jacobian determinant.
    pub pct_folding: f64,
    pub jac_std: f64,
    pub tc: Option<f64>,
    pub seconds: f64,
}

/// Segmentations used to score a registration.
#[derive(Clone, Copy, Debug)]
pub struct SegPair<'a> {
    pub fixed: &'a LabelMap,
    pub moving: &'a LabelMap,
}

/// Jacobian statistics of `t`, plus Dice and volume change when
/// segmentations are given.
pub fn evaluate(t: &Transform, segs: Option<SegPair<'_>>, seconds: f64) -> Result<MetricsReport> {
    let det = jacobian_det(t)?;
    let stats = folding_stats(&det);
    let mut report = MetricsReport {
        pct_folding: stats.pct_nonpositive,
        jac_std: stats.std,
        seconds,
        ..MetricsReport::default()
    };
    if let Some(s) = segs {
        if s.fixed.spatial() != t.spatial() {
            return Err(Error::mismatch("evaluate", s.fixed.shape(), t.disp.shape()));
        }
        let warped = warp_labels(s.moving, t)?;
        let labels = foreground_labels(s.fixed, s.moving);
        report.dsc = dice(s.fixed, &warped, &labels)?;
        if !report.dsc.is_empty() {
            report.dsc_mean = Some(report.dsc.values().sum::<f64>() / report.dsc.len() as f64);
        }
        report.tc = topology_change(s.moving, &warped, &s.moving.labels().into_iter().filter(|&l| l != BACKGROUND).collect::<Vec<_>>())?.value;
    }
    Ok(report)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MetricsReport {
    /// CSV header for the given per-label columns.
    pub fn csv_header(labels: &[u16]) -> String {
        let mut h = String::from("pair_id,dsc_mean,pct_folding,jac_std,tc,seconds");
        for l in labels {
            h.push_str(&format!(",dsc_{l}"));
        }
        h
    }

    /// One CSV row; labels missing from this report leave an empty cell.
    pub fn csv_row(&self, pair_id: &str, labels: &[u16]) -> String {
        let mut r = format!(
            "{pair_id},{},{},{},{},{}",
            opt(self.dsc_mean),
            self.pct_folding,
            self.jac_std,
            opt(self.tc),
            self.seconds
        );
        for l in labels {
            r.push(',');
            r.push_str(&opt(self.dsc.get(l).copied()));
        }
        r
    }

    /// Header plus a single row, using this report's own labels.
    pub fn to_csv(&self, pair_id: &str) -> String {
        let labels: Vec<u16> = self.dsc.keys().copied().collect();
        format!("{}\n{}\n", Self::csv_header(&labels), self.csv_row(pair_id, &labels))
    }
}
