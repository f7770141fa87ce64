//! Binary masks and the myocardial prior pipeline:
//! largest component -> axial contours -> cubic dilation.

use crate::error::{Error, Result};
use crate::tensor::{Dims3, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Binary volume `(D, H, W)` with voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask3 {
    dims: Dims3,
    spacing: [f32; 3],
    data: Vec<u8>,
}

impl BinaryMask3 {
    pub fn new(dims: Dims3, spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::dim("mask", format!("{} values for dims {dims:?}", data.len())));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Validation(format!("mask must be binary: value {} at index {i}", data[i])));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Validation(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims3, spacing: [f32; 3]) -> Self {
        Self::new(dims, spacing, vec![0; dims.iter().product()]).expect("valid zero mask")
    }

    pub fn from_fn(dims: Dims3, spacing: [f32; 3], mut f: impl FnMut([usize; 3]) -> bool) -> Self {
        let mut m = Self::zeros(dims, spacing);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let i = m.index([z, y, x]);
                    m.data[i] = f([z, y, x]) as u8;
                }
            }
        }
        m
    }

    /// Voxels of a `(1, 1, D, H, W)` or `(D, H, W)` tensor above `threshold`.
    pub fn from_tensor(t: &Tensor, threshold: f32, spacing: [f32; 3]) -> Result<Self> {
        let s = t.shape();
        let dims = match s {
            [1, 1, d, h, w] | [d, h, w] => [*d, *h, *w],
            _ => return Err(Error::dim("mask", format!("cannot view {s:?} as one volume"))),
        };
        Self::new(dims, spacing, t.data().iter().map(|&v| (v > threshold) as u8).collect())
    }

    /// `(1, 1, D, H, W)` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::new(&[1, 1, d, h, w], self.data.iter().map(|&v| v as f32).collect()).expect("shape")
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn index(&self, [z, y, x]: [usize; 3]) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [_, h, w] = self.dims;
        [i / (h * w), (i / w) % h, i % w]
    }

    pub fn get(&self, p: [usize; 3]) -> bool {
        self.data[self.index(p)] != 0
    }

    pub fn set(&mut self, p: [usize; 3], v: bool) {
        let i = self.index(p);
        self.data[i] = v as u8;
    }

    /// True when every foreground voxel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask3) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn flip_w(&self) -> Self {
        let w = self.dims[2];
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(w) {
            data.extend(row.iter().rev());
        }
        Self { data, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut v = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        v.push([dz, dy, dx]);
                    }
                }
            }
        }
        v
    }
}

fn step(dims: Dims3, p: [usize; 3], o: [isize; 3]) -> Option<[usize; 3]> {
    let mut q = [0; 3];
    for a in 0..3 {
        let v = p[a] as isize + o[a];
        if v < 0 || v >= dims[a] as isize {
            return None;
        }
        q[a] = v as usize;
    }
    Some(q)
}

/// Keeps the largest connected component. Components are discovered in
/// linear-index order and only a strictly larger one replaces the current
/// best, so ties go to the component holding the lowest-index voxel.
pub fn largest_component(m: &BinaryMask3, conn: Connectivity) -> BinaryMask3 {
    let offsets = conn.offsets();
    let mut label = vec![0u32; m.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..m.len() {
        if m.data[start] == 0 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let p = m.coords(i);
            for &o in &offsets {
                if let Some(q) = step(m.dims, p, o) {
                    let j = m.index(q);
                    if m.data[j] != 0 && label[j] == 0 {
                        label[j] = next;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    let data = label.iter().map(|&l| (l != 0 && l == best.0) as u8).collect();
    BinaryMask3 { data, ..m.clone() }
}

/// Per axial (D) slice, keeps foreground voxels with at least one in-plane
/// 4-neighbour in the background; outside the slice counts as background.
pub fn slice_contours(m: &BinaryMask3) -> BinaryMask3 {
    let [d, h, w] = m.dims;
    let mut out = BinaryMask3::zeros(m.dims, m.spacing);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !m.get([z, y, x]) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !m.get([z, y - 1, x])
                    || !m.get([z, y + 1, x])
                    || !m.get([z, y, x - 1])
                    || !m.get([z, y, x + 1]);
                if edge {
                    out.set([z, y, x], true);
                }
            }
        }
    }
    out
}

/// Dilation by the cube of half-width `radius`, done as three separable
/// running-window maxima.
pub fn dilate(m: &BinaryMask3, radius: usize) -> BinaryMask3 {
    if radius == 0 {
        return m.clone();
    }
    let [d, h, w] = m.dims;
    let mut cur = m.data.clone();
    let mut line = Vec::new();
    for (axis, n, stride) in [(0, d, h * w), (1, h, w), (2, w, 1)] {
        let outer: usize = m.dims.iter().product::<usize>() / n;
        let mut next = vec![0u8; cur.len()];
        for o in 0..outer {
            // Start index of line `o` along `axis`.
            let base = match axis {
                0 => o,
                1 => (o / w) * h * w + o % w,
                _ => o * w,
            };
            line.clear();
            line.extend((0..n).map(|i| cur[base + i * stride] as usize));
            // Prefix sums give the window count in O(1).
            let mut prefix = vec![0usize; n + 1];
            for i in 0..n {
                prefix[i + 1] = prefix[i] + line[i];
            }
            for i in 0..n {
                let lo = i.saturating_sub(radius);
                let hi = (i + radius + 1).min(n);
                next[base + i * stride] = (prefix[hi] > prefix[lo]) as u8;
            }
        }
        cur = next;
    }
    BinaryMask3 { data: cur, ..m.clone() }
}

/// Default half-width of the prior dilation, in voxels.
pub const DEFAULT_PRIOR_RADIUS: usize = 2;

/// Expanded myocardial prior: largest 26-connected component, axial
/// contours, then cubic dilation.
pub fn build_prior(myo: &BinaryMask3, radius: usize) -> BinaryMask3 {
    let lc = largest_component(myo, Connectivity::TwentySix);
    dilate(&slice_contours(&lc), radius)
}
