//! Network assembly.
//!
//! Channel ladder: stage `i` (1-based) has width `C_i = C * 2^(i-1)` and
//! works at `input / 2^(i-1)`. The stem lifts the input to `C`; stage `i`
//! encodes to `C_i`, then downsamples. The projected prior `M_i` is added to
//! the downsampled stage output, which is the input of the next stage (or of
//! the bottleneck after the last stage).

pub mod blocks;
pub mod checkpoint;
pub mod layers;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wavelet::FilterPair;
use blocks::{DecoderStage, DoubleConv, InterpUp, Msff, PriorProjection, Rfe, WaveletDown, WaveletUp};
use layers::{Conv, ConvBnRelu, Init};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_width: usize,
    pub scales: usize,
    pub use_mpe: bool,
    pub use_rfe: bool,
    pub use_msff: bool,
    pub use_wt_iwt: bool,
    pub scale_init: f32,
    pub alpha_init: f32,
    pub in_channels: usize,
    pub out_channels: usize,
    pub filters: FilterPair,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_width: 8,
            scales: 4,
            use_mpe: true,
            use_rfe: true,
            use_msff: true,
            use_wt_iwt: true,
            scale_init: 0.1,
            alpha_init: 0.5,
            in_channels: 1,
            out_channels: 1,
            filters: FilterPair::haar(),
        }
    }
}

/// The six rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    E1,
    E2,
    E3,
    E4,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::E1,
        Variant::E2,
        Variant::E3,
        Variant::E4,
        Variant::Full,
    ];

    /// `(MPE, RFE, MSFF, WT/IWT)`.
    pub fn toggles(self) -> [bool; 4] {
        match self {
            Variant::Baseline => [false, false, false, false],
            Variant::E1 => [true, false, false, false],
            Variant::E2 => [false, true, false, false],
            Variant::E3 => [false, false, true, false],
            Variant::E4 => [false, false, false, true],
            Variant::Full => [true, true, true, true],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::E1 => "E1",
            Variant::E2 => "E2",
            Variant::E3 => "E3",
            Variant::E4 => "E4",
            Variant::Full => "Full model",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl NetworkConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        [self.use_mpe, self.use_rfe, self.use_msff, self.use_wt_iwt] = v.toggles();
        self
    }

    pub fn toggles(&self) -> [bool; 4] {
        [self.use_mpe, self.use_rfe, self.use_msff, self.use_wt_iwt]
    }

    /// The ablation row these toggles correspond to, if any.
    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.toggles() == self.toggles())
    }

    /// Variant name, or `"Custom"` for toggle sets outside the table.
    pub fn variant_name(&self) -> &'static str {
        self.variant().map_or("Custom", Variant::name)
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_width << (stage - 1)
    }

    /// Spatial sizes must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.scales
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.scales == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("widths, channel counts and scales must be positive".into()));
        }
        if self.scales > 6 {
            return Err(Error::Config(format!("scales = {} is unreasonably deep (max 6)", self.scales)));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return Err(Error::Config(format!("alpha_init must lie in (0, 1), got {}", self.alpha_init)));
        }
        if !self.scale_init.is_finite() {
            return Err(Error::Config("scale_init must be finite".into()));
        }
        FilterPair::new(
            self.filters.analysis_low,
            self.filters.analysis_high,
            self.filters.synthesis_low,
            self.filters.synthesis_high,
        )?;
        Ok(())
    }

    /// Checks that a volume of size `dims` can pass through the network.
    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let k = self.divisor();
        for (axis, n) in ["D", "H", "W"].iter().zip(dims) {
            if n == 0 || n % k != 0 {
                return Err(Error::Config(format!(
                    "axis {axis} has length {n}, which is not a positive multiple of 2^{} = {k}",
                    self.scales
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Rfe(Rfe),
    Plain(DoubleConv),
}

impl Encoder {
    fn new(store: &mut ParamStore, init: &Init, rfe: bool, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(if rfe {
            Encoder::Rfe(Rfe::new(store, init, name, cin, cout)?)
        } else {
            Encoder::Plain(DoubleConv::new(store, init, name, cin, cout)?)
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Encoder::Rfe(b) => b.forward(g, store, x),
            Encoder::Plain(b) => b.forward(g, store, x),
        }
    }
}

#[derive(Clone, Debug)]
enum Up {
    Wavelet(WaveletUp),
    Interp(InterpUp),
}

#[derive(Clone, Debug)]
enum Head {
    Msff(Msff),
    Plain(Conv),
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Spatial skips `SK_1..SK_S`.
    pub skips: Vec<Var>,
    /// Raw subbands `W_1..W_S` (empty without wavelets).
    pub subbands: Vec<Var>,
    /// Prior pyramid `M_1..M_S` (empty without the prior).
    pub priors: Vec<Var>,
    /// Decoder outputs `DF_1..DF_S`.
    pub decoded: Vec<Var>,
}

/// The segmentation network and its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub seed: u64,
    pub store: ParamStore,
    stem: ConvBnRelu,
    scale: Option<ParamId>,
    priors: Vec<PriorProjection>,
    encoders: Vec<Encoder>,
    downs: Vec<Option<WaveletDown>>,
    bottleneck: Encoder,
    ups: Vec<Up>,
    decoders: Vec<DecoderStage>,
    head: Head,
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = Init::new(seed);
        let mut store = ParamStore::new();
        let s = config.scales;
        let c = config.base_width;
        let stem = ConvBnRelu::new(&mut store, &init, "stem", config.in_channels, c, 1)?;

        let (scale, priors) = if config.use_mpe {
            let id = store.add("prior.scale", Tensor::scalar(config.scale_init), true)?;
            let mut p = Vec::new();
            for i in 1..=s {
                let cin = if i == 1 { 1 } else { config.width(i - 1) };
                p.push(PriorProjection::new(&mut store, &init, &format!("prior{i}"), cin, config.width(i))?);
            }
            (Some(id), p)
        } else {
            (None, Vec::new())
        };

        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for i in 1..=s {
            let cin = if i == 1 { c } else { config.width(i - 1) };
            let cout = config.width(i);
            encoders.push(Encoder::new(&mut store, &init, config.use_rfe, &format!("enc{i}"), cin, cout)?);
            downs.push(if config.use_wt_iwt {
                Some(WaveletDown::new(&mut store, &init, &format!("down{i}"), cout, config.filters)?)
            } else {
                None
            });
        }
        let deepest = config.width(s);
        let bottleneck = Encoder::new(&mut store, &init, config.use_rfe, "bottleneck", deepest, deepest)?;

        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        for i in 1..=s {
            let cin = if i == s { deepest } else { config.width(i + 1) };
            let cout = config.width(i);
            ups.push(if config.use_wt_iwt {
                Up::Wavelet(WaveletUp::new(
                    &mut store,
                    &init,
                    &format!("up{i}"),
                    cin,
                    cout,
                    config.alpha_init,
                    config.filters,
                )?)
            } else {
                Up::Interp(InterpUp::new(&mut store, &init, &format!("up{i}"), cin, cout)?)
            });
            decoders.push(DecoderStage::new(&mut store, &init, &format!("dec{i}"), cout)?);
        }

        let head = if config.use_msff {
            let widths: Vec<usize> = (1..=s).map(|i| config.width(i)).collect();
            Head::Msff(Msff::new(&mut store, &init, "msff", &widths, config.out_channels)?)
        } else {
            Head::Plain(Conv::new(&mut store, &init, "head", c, config.out_channels, 1, 1, true)?)
        };

        Ok(Self {
            config,
            seed,
            store,
            stem,
            scale,
            priors,
            encoders,
            downs,
            bottleneck,
            ups,
            decoders,
            head,
        })
    }

    /// Id of the shared prior scale, when the prior is enabled.
    pub fn prior_scale(&self) -> Option<ParamId> {
        self.scale
    }

    /// Ids of the raw (pre-sigmoid) blend weights, finest stage first.
    pub fn alphas(&self) -> Vec<ParamId> {
        self.ups
            .iter()
            .filter_map(|u| match u {
                Up::Wavelet(w) => Some(w.alpha),
                Up::Interp(_) => None,
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Logits `(B, out_channels, D, H, W)`.
    pub fn forward(&self, g: &mut Graph, x: Var, prior: Option<Var>) -> Result<Var> {
        Ok(self.forward_trace(g, x, prior)?.logits)
    }

    pub fn forward_trace(&self, g: &mut Graph, x: Var, prior: Option<Var>) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let store = &self.store;
        let [b, cin, d, h, w] = g.value(x).dims5("network")?;
        if cin != cfg.in_channels {
            return Err(Error::dim("network", format!("axis C: input has {cin} channels, expected {}", cfg.in_channels)));
        }
        cfg.check_dims([d, h, w])?;
        let mut m = match (cfg.use_mpe, prior) {
            (true, Some(p)) => {
                if g.value(p).shape() != [b, 1, d, h, w] {
                    return Err(Error::dim(
                        "network",
                        format!("prior {:?} does not match input {:?}", g.value(p).shape(), [b, 1, d, h, w]),
                    ));
                }
                Some(p)
            }
            (true, None) => return Err(Error::Usage("the prior encoder is enabled but no prior mask was given".into())),
            (false, _) => None,
        };
        let scale = self.scale.map(|id| g.param(store, id));

        let mut trace = ForwardTrace {
            logits: x,
            skips: Vec::new(),
            subbands: Vec::new(),
            priors: Vec::new(),
            decoded: Vec::new(),
        };
        let mut hcur = self.stem.forward(g, store, x)?;
        for i in 0..cfg.scales {
            let sk = self.encoders[i].forward(g, store, hcur)?;
            trace.skips.push(sk);
            let mut down = match &self.downs[i] {
                Some(wd) => {
                    let out = wd.forward(g, store, sk)?;
                    trace.subbands.push(out.subbands);
                    out.x_out
                }
                None => g.max_pool3d(sk)?,
            };
            if let (Some(mp), Some(s)) = (m, scale) {
                let next = self.priors[i].forward(g, store, mp, s)?;
                trace.priors.push(next);
                down = g.add(down, next)?;
                m = Some(next);
            }
            hcur = down;
        }
        hcur = self.bottleneck.forward(g, store, hcur)?;

        let mut decoded = vec![hcur; cfg.scales];
        for i in (0..cfg.scales).rev() {
            let y = match &self.ups[i] {
                Up::Wavelet(u) => u.forward(g, store, hcur, trace.subbands[i])?,
                Up::Interp(u) => u.forward(g, store, hcur)?,
            };
            hcur = self.decoders[i].forward(g, store, y, trace.skips[i])?;
            decoded[i] = hcur;
        }
        trace.decoded = decoded;
        trace.logits = match &self.head {
            Head::Msff(msff) => msff.forward(g, store, &trace.decoded)?,
            Head::Plain(conv) => conv.forward(g, store, trace.decoded[0])?,
        };
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;

    #[test]
    fn output_shape_matches_input() {
        let cfg = NetworkConfig {
            base_width: 2,
            scales: 2,
            ..NetworkConfig::default()
        };
        let net = Network::new(cfg, 1).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(Tensor::zeros(&[1, 1, 8, 8, 8]));
        let m = g.input(Tensor::zeros(&[1, 1, 8, 8, 8]));
        let y = net.forward(&mut g, x, Some(m)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 8, 8, 8]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = Network::new(NetworkConfig::default(), 1).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(Tensor::zeros(&[1, 1, 16, 16, 24]));
        let m = g.input(Tensor::zeros(&[1, 1, 16, 16, 24]));
        assert!(matches!(net.forward(&mut g, x, Some(m)), Err(Error::Config(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(NetworkConfig::default().with_variant(v).variant(), Some(v));
        }
        let custom = NetworkConfig {
            use_mpe: false,
            ..NetworkConfig::default()
        };
        assert_eq!(custom.variant_name(), "Custom");
    }
}
