//! Single-level separable 3D discrete wavelet transform.
//!
//! A volume `(B, C, D, H, W)` is decomposed into a subband tensor
//! `(B, C, 8, D/2, H/2, W/2)`. Subband `k = 4*f_d + 2*f_h + f_w`, where each
//! `f` is 0 for the low-pass and 1 for the high-pass filter on that axis:
//! `k = 0` is LLL and `k = 7` is HHH.
//!
//! Only two-tap filter banks are supported. With two taps every output
//! depends on one disjoint 2x2x2 block of the input, so no boundary extension
//! is needed and the separable transform collapses to an 8x8 matrix applied
//! per block. The adjoints used for back-propagation are the transposed block
//! matrices; for orthonormal filters they coincide with the inverse.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const SUBBANDS: usize = 8;

const AXIS_NAMES: [&str; 3] = ["D", "H", "W"];

/// Analysis and synthesis taps of a two-channel, two-tap filter bank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterPair {
    pub analysis_low: [f64; 2],
    pub analysis_high: [f64; 2],
    pub synthesis_low: [f64; 2],
    pub synthesis_high: [f64; 2],
}

impl Default for FilterPair {
    fn default() -> Self {
        Self::haar()
    }
}

impl FilterPair {
    /// Orthonormal Haar: low `(1, 1)/√2`, high `(1, -1)/√2`.
    pub fn haar() -> Self {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            analysis_low: [r, r],
            analysis_high: [r, -r],
            synthesis_low: [r, r],
            synthesis_high: [r, -r],
        }
    }

    /// Builds a filter bank, rejecting taps that do not reconstruct perfectly.
    pub fn new(
        analysis_low: [f64; 2],
        analysis_high: [f64; 2],
        synthesis_low: [f64; 2],
        synthesis_high: [f64; 2],
    ) -> Result<Self> {
        let f = Self {
            analysis_low,
            analysis_high,
            synthesis_low,
            synthesis_high,
        };
        // x[a] = sl[a]*lo + sh[a]*hi with lo = al·x, hi = ah·x must be the identity.
        for a in 0..2 {
            for b in 0..2 {
                let v = synthesis_low[a] * analysis_low[b] + synthesis_high[a] * analysis_high[b];
                let want = if a == b { 1.0 } else { 0.0 };
                if (v - want).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "filter bank does not reconstruct perfectly (entry ({a},{b}) = {v})"
                    )));
                }
            }
        }
        Ok(f)
    }

    fn analysis(&self, band: usize) -> [f64; 2] {
        if band == 0 {
            self.analysis_low
        } else {
            self.analysis_high
        }
    }

    fn synthesis(&self, band: usize) -> [f64; 2] {
        if band == 0 {
            self.synthesis_low
        } else {
            self.synthesis_high
        }
    }

    /// `A[k][p]`: subband `k` from block position `p = 4a + 2b + c`.
    fn analysis_matrix(&self) -> [[f32; 8]; 8] {
        let mut m = [[0.0f32; 8]; 8];
        for (k, row) in m.iter_mut().enumerate() {
            let (fd, fh, fw) = (self.analysis(k >> 2), self.analysis((k >> 1) & 1), self.analysis(k & 1));
            for (p, v) in row.iter_mut().enumerate() {
                *v = (fd[p >> 2] * fh[(p >> 1) & 1] * fw[p & 1]) as f32;
            }
        }
        m
    }

    /// `S[p][k]`: block position `p` from subband `k`.
    fn synthesis_matrix(&self) -> [[f32; 8]; 8] {
        let mut m = [[0.0f32; 8]; 8];
        for (p, row) in m.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                let (gd, gh, gw) = (self.synthesis(k >> 2), self.synthesis((k >> 1) & 1), self.synthesis(k & 1));
                *v = (gd[p >> 2] * gh[(p >> 1) & 1] * gw[p & 1]) as f32;
            }
        }
        m
    }
}

fn transpose(m: &[[f32; 8]; 8]) -> [[f32; 8]; 8] {
    let mut t = [[0.0f32; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            t[j][i] = m[i][j];
        }
    }
    t
}

/// Block offsets of the eight voxels of a 2x2x2 block in a `(D, H, W)` plane.
fn block_offsets(h: usize, w: usize) -> [usize; 8] {
    let mut o = [0usize; 8];
    for (p, v) in o.iter_mut().enumerate() {
        *v = (p >> 2) * h * w + ((p >> 1) & 1) * w + (p & 1);
    }
    o
}

/// `s[k] = Σ_p m[k][p] · x[block p]` for every block.
fn analyze(x: &Tensor, m: &[[f32; 8]; 8], op: &'static str) -> Result<Tensor> {
    let [b, c, d, h, w] = x.dims5(op)?;
    for (axis, &n) in [d, h, w].iter().enumerate() {
        if n % 2 != 0 {
            return Err(Error::dim(op, format!("axis {} has odd length {n}", AXIS_NAMES[axis])));
        }
    }
    let (hd, hh, hw) = (d / 2, h / 2, w / 2);
    let sub = hd * hh * hw;
    let offs = block_offsets(h, w);
    let src = x.data();
    let mut out = vec![0.0f32; b * c * SUBBANDS * sub];
    for plane in 0..b * c {
        let xin = &src[plane * d * h * w..(plane + 1) * d * h * w];
        let sout = &mut out[plane * SUBBANDS * sub..(plane + 1) * SUBBANDS * sub];
        for i in 0..hd {
            for j in 0..hh {
                for l in 0..hw {
                    let base = (2 * i * h + 2 * j) * w + 2 * l;
                    let mut v = [0.0f32; 8];
                    for p in 0..8 {
                        v[p] = xin[base + offs[p]];
                    }
                    let o = (i * hh + j) * hw + l;
                    for (k, row) in m.iter().enumerate() {
                        let mut acc = 0.0f32;
                        for p in 0..8 {
                            acc += row[p] * v[p];
                        }
                        sout[k * sub + o] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c, SUBBANDS, hd, hh, hw], out)
}

/// `x[block p] = Σ_k m[p][k] · s[k]` for every block.
fn synthesize(s: &Tensor, m: &[[f32; 8]; 8], op: &'static str) -> Result<Tensor> {
    let [b, c, k8, hd, hh, hw] = s.dims6(op)?;
    if k8 != SUBBANDS {
        return Err(Error::dim(op, format!("subband axis has length {k8}, expected {SUBBANDS}")));
    }
    let (d, h, w) = (2 * hd, 2 * hh, 2 * hw);
    let sub = hd * hh * hw;
    let offs = block_offsets(h, w);
    let src = s.data();
    let mut out = vec![0.0f32; b * c * d * h * w];
    for plane in 0..b * c {
        let sin = &src[plane * SUBBANDS * sub..(plane + 1) * SUBBANDS * sub];
        let xout = &mut out[plane * d * h * w..(plane + 1) * d * h * w];
        for i in 0..hd {
            for j in 0..hh {
                for l in 0..hw {
                    let o = (i * hh + j) * hw + l;
                    let mut v = [0.0f32; 8];
                    for k in 0..8 {
                        v[k] = sin[k * sub + o];
                    }
                    let base = (2 * i * h + 2 * j) * w + 2 * l;
                    for (p, row) in m.iter().enumerate() {
                        let mut acc = 0.0f32;
                        for k in 0..8 {
                            acc += row[k] * v[k];
                        }
                        xout[base + offs[p]] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c, d, h, w], out)
}

/// Forward transform `(B, C, D, H, W) -> (B, C, 8, D/2, H/2, W/2)`.
pub fn dwt3(x: &Tensor, f: &FilterPair) -> Result<Tensor> {
    analyze(x, &f.analysis_matrix(), "dwt3")
}

/// Inverse transform `(B, C, 8, d, h, w) -> (B, C, 2d, 2h, 2w)`.
pub fn iwt3(s: &Tensor, f: &FilterPair) -> Result<Tensor> {
    synthesize(s, &f.synthesis_matrix(), "iwt3")
}

/// Adjoint of [`dwt3`]: maps a subband-shaped gradient to a volume gradient.
pub fn dwt3_adjoint(grad: &Tensor, f: &FilterPair) -> Result<Tensor> {
    synthesize(grad, &transpose(&f.analysis_matrix()), "dwt3_adjoint")
}

/// Adjoint of [`iwt3`]: maps a volume gradient to a subband gradient.
pub fn iwt3_adjoint(grad: &Tensor, f: &FilterPair) -> Result<Tensor> {
    analyze(grad, &transpose(&f.synthesis_matrix()), "iwt3_adjoint")
}
