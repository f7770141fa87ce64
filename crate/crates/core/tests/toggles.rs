mod common;

use common::{binary, uniform};
use coroseg::autodiff::{Graph, Mode, ParamStore};
use coroseg::nn::blocks::WaveletUp;
use coroseg::nn::layers::Init;
use coroseg::nn::{Network, NetworkConfig, Variant};
use coroseg::wavelet::{iwt3, FilterPair};
use coroseg::Tensor;
use std::collections::HashSet;

fn small(variant: Variant) -> NetworkConfig {
    NetworkConfig {
        base_width: 4,
        scales: 3,
        ..NetworkConfig::default()
    }
    .with_variant(variant)
}

fn logits(net: &Network, mode: Mode, image: &Tensor, prior: &Tensor) -> Vec<u32> {
    let mut g = Graph::new(mode);
    let x = g.input(image.clone());
    let p = g.input(prior.clone());
    let y = net.forward(&mut g, x, Some(p)).unwrap();
    g.value(y).data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_prior_scale_equals_disabled_prior() {
    let image = uniform(&[1, 1, 16, 16, 16], 1, 0.0, 1.0);
    let prior = binary(&[1, 1, 16, 16, 16], 2, 0.3);
    let mut with = Network::new(small(Variant::Full), 11).unwrap();
    let id = with.prior_scale().unwrap();
    with.store.set(id, Tensor::scalar(0.0)).unwrap();
    let mut cfg = small(Variant::Full);
    cfg.use_mpe = false;
    let without = Network::new(cfg, 11).unwrap();
    for mode in [Mode::Train, Mode::Eval] {
        assert_eq!(logits(&with, mode, &image, &prior), logits(&without, mode, &image, &prior), "{mode:?}");
    }
}

#[test]
fn vanishing_blend_weight_reconstructs_the_skip() {
    let mut store = ParamStore::new();
    let up = WaveletUp::new(&mut store, &Init::new(3), "up", 6, 3, 0.5, FilterPair::haar()).unwrap();
    store.set(up.alpha, Tensor::scalar(-40.0)).unwrap();
    let deep = uniform(&[2, 6, 3, 2, 4], 4, -1.0, 1.0);
    let skip = uniform(&[2, 3, 8, 3, 2, 4], 5, -1.0, 1.0);
    let mut g = Graph::new(Mode::Train);
    let d = g.input(deep);
    let s = g.input(skip.clone());
    let y = up.forward(&mut g, &store, d, s).unwrap();
    let want = iwt3(&skip, &FilterPair::haar()).unwrap();
    let got = g.value(y);
    assert_eq!(got.shape(), want.shape());
    let err = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    assert!(err <= 1e-6, "max abs error {err}");
}

#[test]
fn every_variant_has_its_own_parameter_count() {
    let counts: Vec<usize> = Variant::ALL
        .iter()
        .map(|&v| Network::new(small(v), 0).unwrap().num_parameters())
        .collect();
    let distinct: HashSet<_> = counts.iter().collect();
    assert_eq!(distinct.len(), 6, "{counts:?}");
}

#[test]
fn prior_encoder_adds_scale_and_bias_free_projections() {
    for (width, scales) in [(4, 3), (8, 4), (2, 2)] {
        let cfg = |v| NetworkConfig {
            base_width: width,
            scales,
            ..NetworkConfig::default()
        }
        .with_variant(v);
        let base = Network::new(cfg(Variant::Baseline), 0).unwrap().num_parameters();
        let e1 = Network::new(cfg(Variant::E1), 0).unwrap().num_parameters();
        // One shared scalar plus a 1x1x1 conv per stage from the previous
        // prior's channels (one mask channel at the first stage).
        let widths: Vec<usize> = (0..scales).map(|i| width << i).collect();
        let projections: usize = (0..scales).map(|i| if i == 0 { 1 } else { widths[i - 1] } * widths[i]).sum();
        assert_eq!(e1 - base, 1 + projections, "width {width} scales {scales}");
    }
}

#[test]
fn baseline_ignores_the_prior() {
    let net = Network::new(small(Variant::Baseline), 5).unwrap();
    let image = uniform(&[1, 1, 16, 16, 16], 6, 0.0, 1.0);
    let a = logits(&net, Mode::Eval, &image, &binary(&[1, 1, 16, 16, 16], 7, 0.2));
    let b = logits(&net, Mode::Eval, &image, &Tensor::zeros(&[1, 1, 16, 16, 16]));
    assert_eq!(a, b);
}

#[test]
fn enabled_prior_without_mask_is_a_usage_error() {
    let net = Network::new(small(Variant::E1), 5).unwrap();
    let mut g = Graph::new(Mode::Eval);
    let x = g.input(Tensor::zeros(&[1, 1, 16, 16, 16]));
    assert!(matches!(net.forward(&mut g, x, None), Err(coroseg::Error::Usage(_))));
}

#[test]
fn constant_low_band_upsamples_without_checkerboard() {
    let mut store = ParamStore::new();
    let up = WaveletUp::new(&mut store, &Init::new(8), "up", 4, 2, 0.5, FilterPair::haar()).unwrap();
    // Zero the projection so the blend sees the skip subbands only.
    for p in store.iter_mut() {
        if p.name.starts_with("up.proj") {
            p.value = Tensor::zeros(p.value.shape());
        }
    }
    let skip = Tensor::from_fn(&[1, 2, 8, 3, 4, 5], |i| if (i / 60) % 8 == 0 { 0.7 + (i / 480) as f32 } else { 0.0 });
    let mut g = Graph::new(Mode::Eval);
    let d = g.input(uniform(&[1, 4, 3, 4, 5], 9, -1.0, 1.0));
    let s = g.input(skip);
    let y = up.forward(&mut g, &store, d, s).unwrap();
    let out = g.value(y);
    for c in out.data().chunks(6 * 8 * 10) {
        let mean = c.iter().map(|&v| v as f64).sum::<f64>() / c.len() as f64;
        let var = c.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c.len() as f64;
        assert!(var <= 1e-10, "variance {var}");
        assert!(mean.abs() > 0.1);
    }
}
