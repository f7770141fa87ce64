//! Pooling, channel reductions and trilinear upsampling.

use super::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct MaxPoolOp {
    /// Flat input index of the winner for each output element.
    argmax: Vec<u32>,
}

impl Backward for MaxPoolOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        let d = gx.data_mut();
        for (&i, &g) in self.argmax.iter().zip(grad.data()) {
            d[i as usize] += g;
        }
        vec![Some(gx)]
    }
}

struct GlobalAvgPoolOp;

impl Backward for GlobalAvgPoolOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let shape = inputs[0].shape();
        let vol: usize = shape[2..].iter().product();
        let mut d = Vec::with_capacity(inputs[0].numel());
        for &g in grad.data() {
            d.extend(std::iter::repeat_n(g / vol as f32, vol));
        }
        vec![Some(Tensor::new(shape, d).expect("shape"))]
    }
}

struct ChannelMeanOp;

impl Backward for ChannelMeanOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let shape = inputs[0].shape();
        let (b, c) = (shape[0], shape[1]);
        let vol: usize = shape[2..].iter().product();
        let g = grad.data();
        let mut d = Vec::with_capacity(inputs[0].numel());
        for bi in 0..b {
            let row = &g[bi * vol..(bi + 1) * vol];
            for _ in 0..c {
                d.extend(row.iter().map(|&v| v / c as f32));
            }
        }
        vec![Some(Tensor::new(shape, d).expect("shape"))]
    }
}

struct ChannelMaxOp {
    argmax: Vec<u32>,
}

impl Backward for ChannelMaxOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut gx = Tensor::zeros(inputs[0].shape());
        let d = gx.data_mut();
        for (&i, &g) in self.argmax.iter().zip(grad.data()) {
            d[i as usize] += g;
        }
        vec![Some(gx)]
    }
}

/// Source taps `(i0, i1, frac)` for doubling an axis of length `n` with
/// half-pixel centers; coordinates left of the first center clamp to it.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Linear interpolation along one axis of a `[outer, n, inner]` view.
fn interp_axis(src: &[f32], outer: usize, n: usize, inner: usize, taps: &[(usize, usize, f32)]) -> Vec<f32> {
    let m = taps.len();
    let mut out = vec![0.0f32; outer * m * inner];
    for o in 0..outer {
        for (j, &(i0, i1, t)) in taps.iter().enumerate() {
            let a = &src[(o * n + i0) * inner..(o * n + i0 + 1) * inner];
            let b = &src[(o * n + i1) * inner..(o * n + i1 + 1) * inner];
            let dst = &mut out[(o * m + j) * inner..(o * m + j + 1) * inner];
            for k in 0..inner {
                dst[k] = (1.0 - t) * a[k] + t * b[k];
            }
        }
    }
    out
}

fn interp_axis_adjoint(grad: &[f32], outer: usize, n: usize, inner: usize, taps: &[(usize, usize, f32)]) -> Vec<f32> {
    let m = taps.len();
    let mut out = vec![0.0f32; outer * n * inner];
    for o in 0..outer {
        for (j, &(i0, i1, t)) in taps.iter().enumerate() {
            let g = &grad[(o * m + j) * inner..(o * m + j + 1) * inner];
            for k in 0..inner {
                out[(o * n + i0) * inner + k] += (1.0 - t) * g[k];
                out[(o * n + i1) * inner + k] += t * g[k];
            }
        }
    }
    out
}

struct UpsampleOp;

impl Backward for UpsampleOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let [b, c, d, h, w] = inputs[0].dims5("trilinear_upsample").expect("rank 5");
        // Forward order was W, H, D; undo in reverse.
        let g = interp_axis_adjoint(grad.data(), b * c, d, 4 * h * w, &upsample_taps(d));
        let g = interp_axis_adjoint(&g, b * c * d, h, 2 * w, &upsample_taps(h));
        let g = interp_axis_adjoint(&g, b * c * d * h, w, 1, &upsample_taps(w));
        vec![Some(Tensor::new(inputs[0].shape(), g).expect("shape"))]
    }
}

impl Graph {
    /// 2x2x2 max pooling with stride 2; ties go to the lowest linear index.
    pub fn max_pool3d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [b, c, d, h, w] = t.dims5("max_pool3d")?;
        for (axis, n) in [("D", d), ("H", h), ("W", w)] {
            if n % 2 != 0 {
                return Err(Error::dim("max_pool3d", format!("axis {axis} has odd length {n}")));
            }
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let src = t.data();
        let mut out = Vec::with_capacity(b * c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..b * c {
            let base = plane * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut arg = 0usize;
                        let mut first = true;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                    if first || src[i] > best {
                                        best = src[i];
                                        arg = i;
                                        first = false;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(arg as u32);
                    }
                }
            }
        }
        let out = Tensor::new(&[b, c, od, oh, ow], out)?;
        Ok(self.push("max_pool3d", out, &[x], MaxPoolOp { argmax }))
    }

    /// Mean over `(D, H, W)` -> `(B, C, 1, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [b, c, d, h, w] = t.dims5("global_avg_pool")?;
        let vol = d * h * w;
        let out: Vec<f32> = t
            .data()
            .chunks(vol)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / vol as f64) as f32)
            .collect();
        let out = Tensor::new(&[b, c, 1, 1, 1], out)?;
        Ok(self.push("global_avg_pool", out, &[x], GlobalAvgPoolOp))
    }

    /// Mean over channels -> `(B, 1, D, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [b, c, d, h, w] = t.dims5("channel_mean")?;
        let vol = d * h * w;
        let src = t.data();
        let mut out = vec![0.0f32; b * vol];
        for bi in 0..b {
            let dst = &mut out[bi * vol..(bi + 1) * vol];
            for ch in 0..c {
                let s = &src[(bi * c + ch) * vol..(bi * c + ch + 1) * vol];
                for (o, v) in dst.iter_mut().zip(s) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|v| *v /= c as f32);
        }
        let out = Tensor::new(&[b, 1, d, h, w], out)?;
        Ok(self.push("channel_mean", out, &[x], ChannelMeanOp))
    }

    /// Max over channels -> `(B, 1, D, H, W)`; ties go to the lowest channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [b, c, d, h, w] = t.dims5("channel_max")?;
        let vol = d * h * w;
        let src = t.data();
        let mut out = Vec::with_capacity(b * vol);
        let mut argmax = Vec::with_capacity(b * vol);
        for bi in 0..b {
            for v in 0..vol {
                let mut best = src[bi * c * vol + v];
                let mut arg = bi * c * vol + v;
                for ch in 1..c {
                    let i = (bi * c + ch) * vol + v;
                    if src[i] > best {
                        best = src[i];
                        arg = i;
                    }
                }
                out.push(best);
                argmax.push(arg as u32);
            }
        }
        let out = Tensor::new(&[b, 1, d, h, w], out)?;
        Ok(self.push("channel_max", out, &[x], ChannelMaxOp { argmax }))
    }

    /// Doubles every spatial axis by trilinear interpolation with half-pixel
    /// centers (`align_corners = false`).
    pub fn trilinear_upsample(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [b, c, d, h, w] = t.dims5("trilinear_upsample")?;
        let y = interp_axis(t.data(), b * c * d * h, w, 1, &upsample_taps(w));
        let y = interp_axis(&y, b * c * d, h, 2 * w, &upsample_taps(h));
        let y = interp_axis(&y, b * c, d, 4 * h * w, &upsample_taps(d));
        let out = Tensor::new(&[b, c, 2 * d, 2 * h, 2 * w], y)?;
        Ok(self.push("trilinear_upsample", out, &[x], UpsampleOp))
    }
}
