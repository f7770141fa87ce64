//! Overlap and surface-distance metrics on binary volumes.
//!
//! HD95 pools the distances from every boundary voxel of the prediction to
//! the nearest boundary voxel of the truth, and vice versa, then takes the
//! 95th percentile with linear interpolation between order statistics
//! (`rank = 0.95 * (n - 1)`). A boundary voxel is a foreground voxel with at
//! least one 6-neighbour in the background; outside the volume counts as
//! background. Distances are in millimetres.

use crate::anatomy::BinaryMask3;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dsc: f64,
    pub sensitivity: f64,
    pub precision: f64,
    /// `None` when exactly one of the masks is empty.
    pub hd95_mm: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &BinaryMask3, truth: &BinaryMask3) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    c
}

fn ratio(num: usize, den: usize, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics(pred: &BinaryMask3, truth: &BinaryMask3) -> Result<SegMetrics> {
    if pred.dims() != truth.dims() {
        return Err(Error::dim(
            "metrics",
            format!("prediction {:?} vs truth {:?}", pred.dims(), truth.dims()),
        ));
    }
    if pred.spacing() != truth.spacing() {
        return Err(Error::Validation(format!(
            "spacing differs: prediction {:?}, truth {:?}",
            pred.spacing(),
            truth.spacing()
        )));
    }
    let c = confusion(pred, truth);
    let both_empty = c.tp + c.fp + c.fn_ == 0;
    let p_empty = c.tp + c.fp == 0;
    let t_empty = c.tp + c.fn_ == 0;
    let hd95_mm = match (p_empty, t_empty) {
        (true, true) => Some(0.0),
        (false, false) => Some(hd95(pred, truth)),
        _ => None,
    };
    Ok(SegMetrics {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, both_empty),
        sensitivity: ratio(c.tp, c.tp + c.fn_, both_empty),
        precision: ratio(c.tp, c.tp + c.fp, both_empty),
        hd95_mm,
    })
}

/// Foreground voxels with a background 6-neighbour.
pub fn boundary(m: &BinaryMask3) -> BinaryMask3 {
    let [d, h, w] = m.dims();
    BinaryMask3::from_fn(m.dims(), m.spacing(), |[z, y, x]| {
        m.get([z, y, x])
            && (z == 0
                || y == 0
                || x == 0
                || z + 1 == d
                || y + 1 == h
                || x + 1 == w
                || !m.get([z - 1, y, x])
                || !m.get([z + 1, y, x])
                || !m.get([z, y - 1, x])
                || !m.get([z, y + 1, x])
                || !m.get([z, y, x - 1])
                || !m.get([z, y, x + 1]))
    })
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// foreground voxel of `m`; `inf` everywhere when `m` is empty.
pub fn squared_edt(m: &BinaryMask3) -> Vec<f64> {
    let [d, h, w] = m.dims();
    let sp = m.spacing();
    let mut f: Vec<f64> = m.data().iter().map(|&v| if v != 0 { 0.0 } else { f64::INFINITY }).collect();
    let mut line = Vec::new();
    let mut out = Vec::new();
    for (axis, n, stride) in [(0, d, h * w), (1, h, w), (2, w, 1)] {
        let step = sp[axis] as f64;
        let outer = f.len() / n;
        for o in 0..outer {
            let base = match axis {
                0 => o,
                1 => (o / w) * h * w + o % w,
                _ => o * w,
            };
            line.clear();
            line.extend((0..n).map(|i| f[base + i * stride]));
            lower_envelope(&line, step, &mut out);
            for i in 0..n {
                f[base + i * stride] = out[i];
            }
        }
    }
    f
}

/// One-dimensional squared distance transform of sampled function `f` on a
/// grid with spacing `step` (Felzenszwalb and Huttenlocher).
fn lower_envelope(f: &[f64], step: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        return;
    }
    let pos = |q: usize| q as f64 * step;
    // Parabola vertices and the boundaries between consecutive ones.
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let cross = |q: usize, p: usize| {
        let (xq, xp) = (pos(q), pos(p));
        ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp))
    };
    for &q in &sites {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = cross(q, p);
                    if s <= *z.last().expect("boundary") {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            v.push(q);
                            z.push(f64::NEG_INFINITY);
                            break;
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = pos(i);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let dx = x - pos(v[k]);
        *o = dx * dx + f[v[k]];
    }
}

/// Linear-interpolated percentile of sorted data, `p` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = p * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

fn hd95(a: &BinaryMask3, b: &BinaryMask3) -> f64 {
    let ba = boundary(a);
    let bb = boundary(b);
    let da = squared_edt(&ba);
    let db = squared_edt(&bb);
    let mut dists = Vec::with_capacity(ba.count() + bb.count());
    for (i, &v) in ba.data().iter().enumerate() {
        if v != 0 {
            dists.push(db[i].sqrt());
        }
    }
    for (i, &v) in bb.data().iter().enumerate() {
        if v != 0 {
            dists.push(da[i].sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    percentile_sorted(&dists, 0.95)
}

/// Mean over cases; HD95 averages only the cases where it is defined.
pub fn mean_metrics(all: &[SegMetrics]) -> SegMetrics {
    let n = all.len().max(1) as f64;
    let hd: Vec<f64> = all.iter().filter_map(|m| m.hd95_mm).collect();
    SegMetrics {
        dsc: all.iter().map(|m| m.dsc).sum::<f64>() / n,
        sensitivity: all.iter().map(|m| m.sensitivity).sum::<f64>() / n,
        precision: all.iter().map(|m| m.precision).sum::<f64>() / n,
        hd95_mm: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
    }
}
