//! Overlapping patch tiling and weighted stitching.

use crate::error::{Error, Result};
use crate::tensor::{Dims3, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: Dims3,
    pub overlap: usize,
    /// Strictly increasing start offsets per axis.
    pub starts: [Vec<usize>; 3],
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.starts.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch origins in grid order (D outermost, W innermost).
    pub fn origins(&self) -> Vec<Dims3> {
        let mut out = Vec::with_capacity(self.len());
        for &z in &self.starts[0] {
            for &y in &self.starts[1] {
                for &x in &self.starts[2] {
                    out.push([z, y, x]);
                }
            }
        }
        out
    }
}

fn plan_axis(dim: usize, patch: usize, overlap: usize) -> Vec<usize> {
    let stride = patch - overlap;
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + patch < dim).collect();
    starts.push(dim - patch);
    starts.dedup();
    starts
}

/// Starts at stride `patch - overlap`; the last start is clamped so the
/// final patch ends on the boundary.
pub fn plan_patches(dims: Dims3, patch: Dims3, overlap: usize) -> Result<PatchGrid> {
    for (axis, name) in ["D", "H", "W"].iter().enumerate() {
        if patch[axis] == 0 || patch[axis] > dims[axis] {
            return Err(Error::Config(format!(
                "patch {} exceeds volume {} along axis {name}",
                patch[axis], dims[axis]
            )));
        }
        if overlap >= patch[axis] {
            return Err(Error::Config(format!(
                "overlap {overlap} must be smaller than patch {} along axis {name}",
                patch[axis]
            )));
        }
    }
    let starts = [0, 1, 2].map(|a| plan_axis(dims[a], patch[a], overlap));
    Ok(PatchGrid { patch, overlap, starts })
}

/// Linear ramp: 1 in the interior, tapering to `1 / (overlap + 1)` at the
/// patch faces.
pub fn ramp(patch: usize, overlap: usize) -> Vec<f32> {
    let o = (overlap + 1) as f32;
    (0..patch)
        .map(|i| 1f32.min((i + 1) as f32 / o).min((patch - i) as f32 / o))
        .collect()
}

/// Blends per-patch `(1, C, pd, ph, pw)` blocks into `(1, C, D, H, W)`.
/// Accumulation follows grid order, so the result is deterministic.
pub fn stitch(blocks: &[Tensor], grid: &PatchGrid, dims: Dims3) -> Result<Tensor> {
    let origins = grid.origins();
    if blocks.len() != origins.len() {
        return Err(Error::Usage(format!(
            "stitch needs {} patches, got {}",
            origins.len(),
            blocks.len()
        )));
    }
    let [pd, ph, pw] = grid.patch;
    let channels = match blocks.first() {
        Some(b) => {
            let [_, c, ..] = b.dims5("stitch")?;
            c
        }
        None => return Err(Error::Usage("stitch needs at least one patch".into())),
    };
    let ramps = [0, 1, 2].map(|a| ramp(grid.patch[a], grid.overlap));
    let [d, h, w] = dims;
    let vol = d * h * w;
    let mut acc = vec![0f64; channels * vol];
    let mut wsum = vec![0f64; vol];
    for (block, &[z0, y0, x0]) in blocks.iter().zip(&origins) {
        if block.shape() != [1, channels, pd, ph, pw] {
            return Err(Error::dim(
                "stitch",
                format!("patch {:?}, expected {:?}", block.shape(), [1, channels, pd, ph, pw]),
            ));
        }
        let data = block.data();
        for z in 0..pd {
            for y in 0..ph {
                let wzy = ramps[0][z] * ramps[1][y];
                for x in 0..pw {
                    let wt = (wzy * ramps[2][x]) as f64;
                    let dst = ((z0 + z) * h + y0 + y) * w + x0 + x;
                    wsum[dst] += wt;
                    for c in 0..channels {
                        acc[c * vol + dst] += wt * data[((c * pd + z) * ph + y) * pw + x] as f64;
                    }
                }
            }
        }
    }
    let out = (0..channels * vol).map(|i| (acc[i] / wsum[i % vol]) as f32).collect();
    Tensor::new(&[1, channels, d, h, w], out)
}
