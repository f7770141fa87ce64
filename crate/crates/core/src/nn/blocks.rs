//! Network-specific modules: prior projection, residual feature encoder,
//! wavelet down/up-sampling, decoder refinement and multi-scale fusion.

use super::layers::{Conv, ConvBnRelu, Init};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::wavelet::{FilterPair, SUBBANDS};

/// One step of the prior pyramid: `M_i = MaxPool(Scale * Conv1x1x1(M_{i-1}))`.
#[derive(Clone, Debug)]
pub struct PriorProjection {
    pub conv: Conv,
}

impl PriorProjection {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        // Bias-free so that an all-zero prior contributes exactly nothing.
        let conv = Conv::new(store, init, &format!("{name}.conv"), cin, cout, 1, 1, false)?;
        Ok(Self { conv })
    }

    /// `scale` is the shared learnable scalar.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, m_prev: Var, scale: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, m_prev)?;
        let y = g.scale(y, scale)?;
        g.max_pool3d(y)
    }
}

/// Residual double convolution followed by parallel channel and spatial
/// attention whose gated outputs are summed.
#[derive(Clone, Debug)]
pub struct Rfe {
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
    /// 1x1x1 projection on the identity path when widths differ.
    pub skip: Option<Conv>,
    pub channel_gate: Conv,
    pub spatial_gate: Conv,
}

impl Rfe {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let skip = if cin != cout {
            Some(Conv::new(store, init, &format!("{name}.skip"), cin, cout, 1, 1, false)?)
        } else {
            None
        };
        Ok(Self {
            conv1: ConvBnRelu::new(store, init, &format!("{name}.conv1"), cin, cout, 1)?,
            conv2: ConvBnRelu::new(store, init, &format!("{name}.conv2"), cout, cout, 1)?,
            skip,
            channel_gate: Conv::new(store, init, &format!("{name}.channel_gate"), cout, cout, 1, 1, true)?,
            spatial_gate: Conv::new(store, init, &format!("{name}.spatial_gate"), 2, 1, 7, 1, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let f = self.conv1.forward(g, store, x)?;
        let f = self.conv2.forward(g, store, f)?;
        let identity = match &self.skip {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        let r = g.add(f, identity)?;

        let pooled = g.global_avg_pool(r)?;
        let ch = self.channel_gate.forward(g, store, pooled)?;
        let ch = g.sigmoid(ch);
        let e_ch = g.mul(r, ch)?;

        let mean = g.channel_mean(r)?;
        let max = g.channel_max(r)?;
        let maps = g.concat_channels(&[mean, max])?;
        let sp = self.spatial_gate.forward(g, store, maps)?;
        let sp = g.sigmoid(sp);
        let e_sp = g.mul(r, sp)?;

        g.add(e_ch, e_sp)
    }
}

/// Two conv-BN-ReLU blocks; stands in for [`Rfe`] when that module is off.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
}

impl DoubleConv {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv1: ConvBnRelu::new(store, init, &format!("{name}.conv1"), cin, cout, 1)?,
            conv2: ConvBnRelu::new(store, init, &format!("{name}.conv2"), cout, cout, 1)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, store, x)?;
        self.conv2.forward(g, store, y)
    }
}

/// Output of [`WaveletDown::forward`].
#[derive(Clone, Copy, Debug)]
pub struct DownOutput {
    /// Attention-weighted subband sum at half resolution, `(B, C, D/2, H/2, W/2)`.
    pub x_out: Var,
    /// Raw subbands of the input, `(B, C, 8, D/2, H/2, W/2)`.
    pub subbands: Var,
    /// Subband attention weights, `(B, 8)`.
    pub attention: Var,
}

/// Wavelet-driven downsampling.
///
/// Subbands are flattened subband-major: channel `k * C + c` holds subband
/// `k` of input channel `c`, so group `k` of the grouped convolution sees
/// exactly subband `k`.
#[derive(Clone, Debug)]
pub struct WaveletDown {
    pub conv: ConvBnRelu,
    /// Grouped 1x1x1 conv, `8C -> 8`: one logit per subband.
    pub attention: Conv,
    pub filters: FilterPair,
}

impl WaveletDown {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, channels: usize, filters: FilterPair) -> Result<Self> {
        let wide = SUBBANDS * channels;
        Ok(Self {
            conv: ConvBnRelu::new(store, init, &format!("{name}.conv"), wide, wide, SUBBANDS)?,
            attention: Conv::new(store, init, &format!("{name}.attention"), wide, SUBBANDS, 1, SUBBANDS, true)?,
            filters,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<DownOutput> {
        let subbands = g.dwt3(x, &self.filters)?;
        let [b, c, _, d, h, w] = g.value(subbands).dims6("wavelet_down")?;
        let flat = g.permute(subbands, &[0, 2, 1, 3, 4, 5])?;
        let flat = g.reshape(flat, &[b, SUBBANDS * c, d, h, w])?;
        let enh = self.conv.forward(g, store, flat)?;

        let pooled = g.global_avg_pool(enh)?;
        let logits = self.attention.forward(g, store, pooled)?;
        let a = g.sigmoid(logits);
        let attention = g.reshape(a, &[b, SUBBANDS])?;
        let a6 = g.reshape(a, &[b, SUBBANDS, 1, 1, 1, 1])?;

        let sub = g.reshape(enh, &[b, SUBBANDS, c, d, h, w])?;
        let weighted = g.mul(sub, a6)?;
        let x_out = g.sum_axis(weighted, 1)?;
        Ok(DownOutput {
            x_out,
            subbands,
            attention,
        })
    }
}

/// Inverse-wavelet upsampling: predict subbands from the deeper feature,
/// blend with the encoder's raw subbands, and reconstruct.
#[derive(Clone, Debug)]
pub struct WaveletUp {
    pub proj: Conv,
    /// Unconstrained; the blend weight is `sigmoid(alpha)`.
    pub alpha: ParamId,
    pub filters: FilterPair,
}

impl WaveletUp {
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        cin: usize,
        cout: usize,
        alpha_init: f32,
        filters: FilterPair,
    ) -> Result<Self> {
        let proj = Conv::new(store, init, &format!("{name}.proj"), cin, SUBBANDS * cout, 1, 1, true)?;
        let raw = (alpha_init / (1.0 - alpha_init)).ln();
        let alpha = store.add(format!("{name}.alpha"), crate::Tensor::scalar(raw), true)?;
        Ok(Self { proj, alpha, filters })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_deep: Var, skip: Var) -> Result<Var> {
        let pred = self.proj.forward(g, store, x_deep)?;
        let [b, c8, d, h, w] = g.value(pred).dims5("wavelet_up")?;
        let c = c8 / SUBBANDS;
        let expected = [b, c, SUBBANDS, d, h, w];
        if g.value(skip).shape() != expected {
            return Err(Error::dim(
                "wavelet_up",
                format!("skip subbands {:?} do not match predicted {expected:?}", g.value(skip).shape()),
            ));
        }
        let pred = g.reshape(pred, &[b, SUBBANDS, c, d, h, w])?;
        let pred = g.permute(pred, &[0, 2, 1, 3, 4, 5])?;
        let raw = g.param(store, self.alpha);
        let alpha = g.sigmoid(raw);
        let keep = g.affine(alpha, -1.0, 1.0);
        let a = g.scale(pred, alpha)?;
        let s = g.scale(skip, keep)?;
        let blended = g.add(a, s)?;
        g.iwt3(blended, &self.filters)
    }
}

/// Trilinear x2 upsampling followed by a 1x1x1 conv; the ablation
/// replacement for [`WaveletUp`].
#[derive(Clone, Debug)]
pub struct InterpUp {
    pub conv: Conv,
}

impl InterpUp {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, init, &format!("{name}.conv"), cin, cout, 1, 1, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x_deep: Var) -> Result<Var> {
        let up = g.trilinear_upsample(x_deep)?;
        self.conv.forward(g, store, up)
    }
}

/// Concatenate the upsampled feature with the spatial skip and refine.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
}

impl DecoderStage {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: ConvBnRelu::new(store, init, &format!("{name}.conv1"), 2 * channels, channels, 1)?,
            conv2: ConvBnRelu::new(store, init, &format!("{name}.conv2"), channels, channels, 1)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, y: Var, skip: Var) -> Result<Var> {
        let u = g.concat_channels(&[y, skip])?;
        let u = self.conv1.forward(g, store, u)?;
        self.conv2.forward(g, store, u)
    }
}

/// Width every decoder feature is compressed to before fusion.
pub const FUSION_WIDTH: usize = 8;

/// Multi-scale feature fusion head.
///
/// Fusion runs top-down: the deeper fused map is upsampled, concatenated
/// with the compressed decoder feature, and turned into a sigmoid weight map
/// that gates that feature before a 3x3x3 conv. The deeper map only enters
/// through the weights.
#[derive(Clone, Debug)]
pub struct Msff {
    /// Per scale, finest first: `C_i -> 8`.
    pub compress: Vec<Conv>,
    /// Per fused scale `1..S-1`, finest first: `16 -> 8`.
    pub gate: Vec<Conv>,
    pub fuse: Vec<Conv>,
    pub head: Conv,
}

impl Msff {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, widths: &[usize], out_channels: usize) -> Result<Self> {
        let mut compress = Vec::new();
        let mut gate = Vec::new();
        let mut fuse = Vec::new();
        for (i, &c) in widths.iter().enumerate() {
            compress.push(Conv::new(store, init, &format!("{name}.compress{}", i + 1), c, FUSION_WIDTH, 1, 1, true)?);
        }
        for i in 1..widths.len() {
            gate.push(Conv::new(store, init, &format!("{name}.gate{i}"), 2 * FUSION_WIDTH, FUSION_WIDTH, 1, 1, true)?);
            fuse.push(Conv::new(store, init, &format!("{name}.fuse{i}"), FUSION_WIDTH, FUSION_WIDTH, 3, 1, true)?);
        }
        let head = Conv::new(store, init, &format!("{name}.head"), FUSION_WIDTH, out_channels, 1, 1, true)?;
        Ok(Self {
            compress,
            gate,
            fuse,
            head,
        })
    }

    /// `features` are the decoder outputs `DF_1..DF_S`, finest first.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &[Var]) -> Result<Var> {
        if features.len() != self.compress.len() {
            return Err(Error::dim(
                "msff",
                format!("expected {} scales, got {}", self.compress.len(), features.len()),
            ));
        }
        let mut compressed = Vec::with_capacity(features.len());
        for (conv, &f) in self.compress.iter().zip(features) {
            compressed.push(conv.forward(g, store, f)?);
        }
        let mut fused = *compressed.last().expect("at least one scale");
        for i in (0..features.len() - 1).rev() {
            let up = g.trilinear_upsample(fused)?;
            let cat = g.concat_channels(&[up, compressed[i]])?;
            let w = self.gate[i].forward(g, store, cat)?;
            let w = g.sigmoid(w);
            let gated = g.mul(w, compressed[i])?;
            fused = self.fuse[i].forward(g, store, gated)?;
        }
        self.head.forward(g, store, fused)
    }
}
