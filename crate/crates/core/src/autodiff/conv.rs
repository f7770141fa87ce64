//! Direct and grouped 3D convolution.
//!
//! Each group is lowered to a matrix product: the receptive fields of a slab
//! of output depth slices are unrolled into a `(Cin/g * kd*kh*kw) x N` column
//! buffer and multiplied by the `(Cout/g) x K` kernel matrix. Pointwise
//! kernels with unit stride and no padding skip the unrolling and read the
//! input in place. The column buffer is rebuilt in the backward pass instead
//! of being kept alive.

use super::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound on column-buffer elements per slab.
const COL_BUDGET: usize = 1 << 17;
/// Widest group output for which the direct loops are used.
const DIRECT_MAX_COUT: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dOptions {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
}

impl Default for Conv3dOptions {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
            groups: 1,
        }
    }
}

impl Conv3dOptions {
    /// Unit stride with "same" zero padding for an odd cubic kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: [kernel / 2; 3],
            ..Self::default()
        }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

const AXES: [&str; 3] = ["D", "H", "W"];

impl Geometry {
    fn new(x: &Tensor, w: &Tensor, opts: &Conv3dOptions) -> Result<Self> {
        let [batch, cin, d, h, wd] = x.dims5("conv3d")?;
        let [cout, cin_g, kd, kh, kw] = match w.shape() {
            &[a, b, c, d, e] => [a, b, c, d, e],
            s => return Err(Error::dim("conv3d", format!("weight must be rank 5, got {s:?}"))),
        };
        let g = opts.groups;
        if g == 0 || cin % g != 0 {
            return Err(Error::dim("conv3d", format!("axis C: {cin} input channels not divisible by {g} groups")));
        }
        if cout % g != 0 {
            return Err(Error::dim("conv3d", format!("axis C: {cout} output channels not divisible by {g} groups")));
        }
        if cin / g != cin_g {
            return Err(Error::dim(
                "conv3d",
                format!("axis C: input has {cin} channels, weight expects {} ({cin_g} per group x {g})", cin_g * g),
            ));
        }
        let input = [d, h, wd];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * opts.padding[a];
            if opts.stride[a] == 0 || kernel[a] == 0 || span < kernel[a] {
                return Err(Error::dim(
                    "conv3d",
                    format!("axis {}: kernel {} does not fit padded extent {span}", AXES[a], kernel[a]),
                ));
            }
            output[a] = (span - kernel[a]) / opts.stride[a] + 1;
        }
        Ok(Self {
            batch,
            cin,
            cout,
            groups: g,
            input,
            kernel,
            stride: opts.stride,
            pad: opts.padding,
            output,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn ksize(&self) -> usize {
        self.kernel.iter().product()
    }
    fn k(&self) -> usize {
        self.cin_g() * self.ksize()
    }
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.output[1] * self.output[2]
    }
    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
    /// Narrow unit-stride kernels skip the column buffer: with few output
    /// channels per group the unrolling costs more than the product.
    fn direct(&self) -> bool {
        self.stride == [1, 1, 1] && !self.pointwise() && self.cout_g() <= DIRECT_MAX_COUT
    }
    /// Output depth slices per column slab.
    fn slab(&self) -> usize {
        let per_slice = self.k() * self.out_plane();
        (COL_BUDGET / per_slice.max(1)).clamp(1, self.output[0])
    }
}

/// `c = alpha * a @ b + beta * c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output positions `o` along one axis whose input `o + k - pad` lies inside `[0, n)`.
fn valid_range(out_len: usize, n: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

/// Visits every `(out_row, in_row, len)` pair of W-rows touched by kernel tap
/// `(kz, ky, kx)` for a unit-stride convolution.
fn for_each_row(geo: &Geometry, tap: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [id, ih, iw] = geo.input;
    let [od, oh, ow] = geo.output;
    let [pz, py, px] = geo.pad;
    let (zlo, zhi) = valid_range(od, id, tap[0], pz);
    let (ylo, yhi) = valid_range(oh, ih, tap[1], py);
    let (xlo, xhi) = valid_range(ow, iw, tap[2], px);
    if xlo >= xhi {
        return;
    }
    for z in zlo..zhi {
        let iz = z + tap[0] - pz;
        for y in ylo..yhi {
            let iy = y + tap[1] - py;
            f((z * oh + y) * ow + xlo, (iz * ih + iy) * iw + xlo + tap[2] - px, xhi - xlo);
        }
    }
}

fn taps(geo: &Geometry) -> impl Iterator<Item = (usize, [usize; 3])> {
    let [kd, kh, kw] = geo.kernel;
    (0..kd * kh * kw).map(move |t| (t, [t / (kh * kw), (t / kw) % kh, t % kw]))
}

fn direct_forward(geo: &Geometry, x: &[f32], w: &[f32], out: &mut [f32]) {
    let (cin_g, cout_g, ks) = (geo.cin_g(), geo.cout_g(), geo.ksize());
    let (in_vol, out_vol) = (geo.in_vol(), geo.out_vol());
    for b in 0..geo.batch {
        for co in 0..geo.cout {
            let g = co / cout_g;
            let oc = &mut out[(b * geo.cout + co) * out_vol..(b * geo.cout + co + 1) * out_vol];
            for ci in 0..cin_g {
                let c = b * geo.cin + g * cin_g + ci;
                let xc = &x[c * in_vol..(c + 1) * in_vol];
                let wc = &w[(co * cin_g + ci) * ks..(co * cin_g + ci + 1) * ks];
                for (t, tap) in taps(geo) {
                    let wv = wc[t];
                    for_each_row(geo, tap, |o, i, n| {
                        for (d, s) in oc[o..o + n].iter_mut().zip(&xc[i..i + n]) {
                            *d += wv * s;
                        }
                    });
                }
            }
        }
    }
}

fn direct_backward(geo: &Geometry, x: &[f32], w: &[f32], gy: &[f32], mut gx: Option<&mut [f32]>, mut gw: Option<&mut [f32]>) {
    let (cin_g, cout_g, ks) = (geo.cin_g(), geo.cout_g(), geo.ksize());
    let (in_vol, out_vol) = (geo.in_vol(), geo.out_vol());
    for b in 0..geo.batch {
        for co in 0..geo.cout {
            let g = co / cout_g;
            let gc = &gy[(b * geo.cout + co) * out_vol..(b * geo.cout + co + 1) * out_vol];
            for ci in 0..cin_g {
                let c = b * geo.cin + g * cin_g + ci;
                let wi = (co * cin_g + ci) * ks;
                for (t, tap) in taps(geo) {
                    if let Some(gx) = gx.as_deref_mut() {
                        let wv = w[wi + t];
                        let gxc = &mut gx[c * in_vol..(c + 1) * in_vol];
                        for_each_row(geo, tap, |o, i, n| {
                            for (d, s) in gxc[i..i + n].iter_mut().zip(&gc[o..o + n]) {
                                *d += wv * s;
                            }
                        });
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        let xc = &x[c * in_vol..(c + 1) * in_vol];
                        let mut acc = 0.0f64;
                        for_each_row(geo, tap, |o, i, n| {
                            let row: f32 = gc[o..o + n].iter().zip(&xc[i..i + n]).map(|(a, b)| a * b).sum();
                            acc += row as f64;
                        });
                        gw[wi + t] += acc as f32;
                    }
                }
            }
        }
    }
}

/// Unrolls receptive fields of output slices `[z0, z1)` of one group.
fn im2col(geo: &Geometry, src: &[f32], c0: usize, z0: usize, z1: usize, col: &mut [f32]) {
    let [id, ih, iw] = geo.input;
    let [kd, kh, kw] = geo.kernel;
    let [_, oh, ow] = geo.output;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.pad;
    let n = (z1 - z0) * oh * ow;
    let mut row = 0;
    for ci in 0..geo.cin_g() {
        let chan = &src[(c0 + ci) * id * ih * iw..(c0 + ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut col[row * n..(row + 1) * n];
                    let mut o = 0;
                    for oz in z0..z1 {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let seg = &mut dst[o..o + ow];
                            o += ow;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                seg.fill(0.0);
                                continue;
                            }
                            let line = &chan[(iz as usize * ih + iy as usize) * iw..][..iw];
                            if sw == 1 {
                                // ix = ox + kx - pw must lie in [0, iw).
                                let lo = pw.saturating_sub(kx).min(ow);
                                let hi = (iw + pw).saturating_sub(kx).clamp(lo, ow);
                                seg[..lo].fill(0.0);
                                seg[hi..].fill(0.0);
                                seg[lo..hi].copy_from_slice(&line[lo + kx - pw..hi + kx - pw]);
                            } else {
                                for (ox, v) in seg.iter_mut().enumerate() {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    *v = if ix >= 0 && ix < iw as isize { line[ix as usize] } else { 0.0 };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds a column buffer back into input-gradient channels.
fn col2im(geo: &Geometry, col: &[f32], c0: usize, z0: usize, z1: usize, dst: &mut [f32]) {
    let [id, ih, iw] = geo.input;
    let [kd, kh, kw] = geo.kernel;
    let [_, oh, ow] = geo.output;
    let [sd, sh, sw] = geo.stride;
    let [pd, ph, pw] = geo.pad;
    let n = (z1 - z0) * oh * ow;
    let mut row = 0;
    for ci in 0..geo.cin_g() {
        let chan = &mut dst[(c0 + ci) * id * ih * iw..(c0 + ci + 1) * id * ih * iw];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let srcrow = &col[row * n..(row + 1) * n];
                    let mut o = 0;
                    for oz in z0..z1 {
                        let iz = (oz * sd + kz) as isize - pd as isize;
                        for oy in 0..oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let seg = &srcrow[o..o + ow];
                            o += ow;
                            if iz < 0 || iz >= id as isize || iy < 0 || iy >= ih as isize {
                                continue;
                            }
                            let line = &mut chan[(iz as usize * ih + iy as usize) * iw..][..iw];
                            if sw == 1 {
                                let lo = pw.saturating_sub(kx).min(ow);
                                let hi = (iw + pw).saturating_sub(kx).clamp(lo, ow);
                                if lo < hi {
                                    for (d, s) in line[lo + kx - pw..hi + kx - pw].iter_mut().zip(&seg[lo..hi]) {
                                        *d += s;
                                    }
                                }
                            } else {
                                for (ox, s) in seg.iter().enumerate() {
                                    let ix = (ox * sw + kx) as isize - pw as isize;
                                    if ix >= 0 && ix < iw as isize {
                                        line[ix as usize] += s;
                                    }
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn forward(geo: &Geometry, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let (k, cin_g, cout_g) = (geo.k(), geo.cin_g(), geo.cout_g());
    let (in_vol, out_vol, plane) = (geo.in_vol(), geo.out_vol(), geo.out_plane());
    let mut out = vec![0.0f32; geo.batch * geo.cout * out_vol];
    if geo.direct() {
        direct_forward(geo, x, w, &mut out);
        if let Some(bias) = bias {
            for (c, chunk) in out.chunks_mut(out_vol).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[c % geo.cout]);
            }
        }
        return out;
    }
    let slab = geo.slab();
    let mut col = if geo.pointwise() { Vec::new() } else { vec![0.0f32; k * slab * plane] };
    for b in 0..geo.batch {
        let xb = &x[b * geo.cin * in_vol..(b + 1) * geo.cin * in_vol];
        let ob = &mut out[b * geo.cout * out_vol..(b + 1) * geo.cout * out_vol];
        for g in 0..geo.groups {
            let wg = &w[g * cout_g * k..(g + 1) * cout_g * k];
            let og = &mut ob[g * cout_g * out_vol..];
            if geo.pointwise() {
                let xg = &xb[g * cin_g * in_vol..];
                gemm(cout_g, k, out_vol, wg, (k, 1), xg, (in_vol, 1), 0.0, og, (out_vol, 1));
                continue;
            }
            let mut z0 = 0;
            while z0 < geo.output[0] {
                let z1 = (z0 + slab).min(geo.output[0]);
                let n = (z1 - z0) * plane;
                im2col(geo, xb, g * cin_g, z0, z1, &mut col[..k * n]);
                gemm(cout_g, k, n, wg, (k, 1), &col[..k * n], (n, 1), 0.0, &mut og[z0 * plane..], (out_vol, 1));
                z0 = z1;
            }
        }
        if let Some(bias) = bias {
            for (c, chunk) in ob.chunks_mut(out_vol).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[c]);
            }
        }
    }
    out
}

struct Conv3dOp {
    geo: Geometry,
    has_bias: bool,
}

impl Backward for Conv3dOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let geo = &self.geo;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let gy = grad.data();
        let (k, cin_g, cout_g) = (geo.k(), geo.cin_g(), geo.cout_g());
        let (in_vol, out_vol, plane) = (geo.in_vol(), geo.out_vol(), geo.out_plane());
        let mut gx = needs[0].then(|| vec![0.0f32; x.len()]);
        let mut gw = needs[1].then(|| vec![0.0f32; w.len()]);
        let slab = if geo.direct() { 0 } else { geo.slab() };
        if geo.direct() {
            direct_backward(geo, x, w, gy, gx.as_deref_mut(), gw.as_deref_mut());
        }
        let mut col = if geo.pointwise() || geo.direct() { Vec::new() } else { vec![0.0f32; k * slab * plane] };
        for b in (0..geo.batch).filter(|_| !geo.direct()) {
            let xb = &x[b * geo.cin * in_vol..(b + 1) * geo.cin * in_vol];
            let gyb = &gy[b * geo.cout * out_vol..(b + 1) * geo.cout * out_vol];
            for g in 0..geo.groups {
                let wg = &w[g * cout_g * k..(g + 1) * cout_g * k];
                let gyg = &gyb[g * cout_g * out_vol..];
                if geo.pointwise() {
                    if let Some(gw) = gw.as_mut() {
                        let xg = &xb[g * cin_g * in_vol..];
                        let gwg = &mut gw[g * cout_g * k..(g + 1) * cout_g * k];
                        gemm(cout_g, out_vol, k, gyg, (out_vol, 1), xg, (1, in_vol), 1.0, gwg, (k, 1));
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxg = &mut gx[(b * geo.cin + g * cin_g) * in_vol..];
                        gemm(k, cout_g, out_vol, wg, (1, k), gyg, (out_vol, 1), 1.0, gxg, (in_vol, 1));
                    }
                    continue;
                }
                let mut z0 = 0;
                while z0 < geo.output[0] {
                    let z1 = (z0 + slab).min(geo.output[0]);
                    let n = (z1 - z0) * plane;
                    let gys = &gyg[z0 * plane..];
                    if let Some(gw) = gw.as_mut() {
                        im2col(geo, xb, g * cin_g, z0, z1, &mut col[..k * n]);
                        let gwg = &mut gw[g * cout_g * k..(g + 1) * cout_g * k];
                        gemm(cout_g, n, k, gys, (out_vol, 1), &col[..k * n], (1, n), 1.0, gwg, (k, 1));
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(k, cout_g, n, wg, (1, k), gys, (out_vol, 1), 0.0, &mut col[..k * n], (n, 1));
                        let gxb = &mut gx[b * geo.cin * in_vol..(b + 1) * geo.cin * in_vol];
                        col2im(geo, &col[..k * n], g * cin_g, z0, z1, gxb);
                    }
                    z0 = z1;
                }
            }
        }
        let gb = (self.has_bias && needs.get(2).copied().unwrap_or(false)).then(|| {
            let mut gb = vec![0.0f32; geo.cout];
            for b in 0..geo.batch {
                for (c, acc) in gb.iter_mut().enumerate() {
                    let chunk = &gy[(b * geo.cout + c) * out_vol..(b * geo.cout + c + 1) * out_vol];
                    *acc += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            }
            Tensor::new(&[geo.cout], gb).expect("bias shape")
        });
        let mut result = vec![
            gx.map(|d| Tensor::new(inputs[0].shape(), d).expect("input shape")),
            gw.map(|d| Tensor::new(inputs[1].shape(), d).expect("weight shape")),
        ];
        if self.has_bias {
            result.push(gb);
        }
        result
    }
}

impl Graph {
    /// 3D cross-correlation with zero padding.
    ///
    /// `weight` is `(Cout, Cin/groups, kd, kh, kw)`; `bias`, when given, is `(Cout)`.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Option<Var>, opts: Conv3dOptions) -> Result<Var> {
        let geo = Geometry::new(self.value(x), self.value(weight), &opts)?;
        if let Some(b) = bias {
            let s = self.value(b).shape();
            if s != [geo.cout] {
                return Err(Error::dim("conv3d", format!("bias shape {s:?} does not match {} output channels", geo.cout)));
            }
        }
        let out = forward(
            &geo,
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&[geo.batch, geo.cout, geo.output[0], geo.output[1], geo.output[2]], out)?;
        let op = Conv3dOp {
            geo,
            has_bias: bias.is_some(),
        };
        let inputs: Vec<Var> = [Some(x), Some(weight), bias].into_iter().flatten().collect();
        Ok(self.push("conv3d", out, &inputs, op))
    }
}
