//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use coroseg::anatomy::{BinaryMask3, Connectivity};
use coroseg::autodiff::{Conv3dOptions, Graph, Mode, ParamStore, Var};
use coroseg::nn::blocks::{Msff, PriorProjection, Rfe, WaveletDown, WaveletUp};
use coroseg::nn::layers::Init;
use coroseg::nn::{Network, NetworkConfig, Variant};
use coroseg::train::{total_loss, LossConfig};
use coroseg::wavelet::FilterPair;
use coroseg::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Values bounded away from zero, so ReLU kinks are not crossed.
pub fn off_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.05f32..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A shuffled ladder with gaps of 0.01, so max reductions have no ties.
pub fn distinct(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng(seed));
    Tensor::new(shape, v.into_iter().map(|i| i as f32 * 0.01 - 0.3).collect()).unwrap()
}

pub fn binary(shape: &[usize], seed: u64, p: f64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_bool(p) as u8 as f32)
}

type Build<'a> = dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var> + 'a;

fn weights_for(shape: &[usize]) -> Tensor {
    uniform(shape, 0xfeed + shape.iter().sum::<usize>() as u64, -1.0, 1.0)
}

/// `sum(w * out)` in f64 with a fixed random `w`, plus the on/off pattern of
/// every ReLU in the graph.
/// Which input wins each 2x2x2 max-pool window.
fn pool_winners(x: &Tensor, out: &mut Vec<u32>) {
    let s = x.shape();
    let (bc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
    let v = x.data();
    for n in 0..bc {
        for z in (0..d).step_by(2) {
            for y in (0..h).step_by(2) {
                for xx in (0..w).step_by(2) {
                    let mut best = (f32::NEG_INFINITY, 0u32);
                    for k in 0..8u32 {
                        let (dz, dy, dx) = ((k >> 2) as usize, ((k >> 1) & 1) as usize, (k & 1) as usize);
                        let val = v[((n * d + z + dz) * h + y + dy) * w + xx + dx];
                        if val > best.0 {
                            best = (val, k);
                        }
                    }
                    out.push(best.1);
                }
            }
        }
    }
}

/// Which channel wins at each voxel of a channel max.
fn channel_winners(x: &Tensor, out: &mut Vec<u32>) {
    let s = x.shape();
    let (c, vox) = (s[1], s[2] * s[3] * s[4]);
    for b in 0..s[0] {
        for i in 0..vox {
            let at = |ch: usize| x.data()[(b * c + ch) * vox + i];
            out.push((0..c).fold(0, |best, ch| if at(ch) > at(best) { ch } else { best }) as u32);
        }
    }
}

/// Weighted f64 sum of the output plus the piecewise-linear state of the
/// graph: ReLU signs and max-pool / channel-max winners.
fn loss_f64(inputs: &[Tensor], store: &ParamStore, build: &Build) -> (f64, Vec<u32>) {
    let mut g = Graph::new(Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, store, &vars).expect("forward");
    let y = g.value(out);
    let w = weights_for(y.shape());
    let loss = y.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
    let mut pattern = Vec::new();
    for (name, value, ins) in g.nodes() {
        match name {
            "relu" => pattern.extend(value.data().iter().map(|&v| (v > 0.0) as u32)),
            "max_pool3d" => pool_winners(g.value(ins[0]), &mut pattern),
            "channel_max" => channel_winners(g.value(ins[0]), &mut pattern),
            _ => {}
        }
    }
    (loss, pattern)
}

const DIRECTIONS: usize = 3;
const REDRAWS: u64 = 16;

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn shifted(t: &Tensor, v: &Tensor, h: f32) -> Tensor {
    t.zip_map(v, |a, b| a + h * b)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-4)
}

/// Central difference along a direction, shrinking the step at most
/// `levels - 1` times until no ReLU or max changes state between the two
/// probes. `None` if every step crosses a kink.
fn central(eval: &dyn Fn(f32) -> (f64, Vec<u32>), h: f32, levels: u32) -> Option<f64> {
    (0..levels).map(|k| h / (1 << k) as f32).find_map(|hh| {
        let (lp, pp) = eval(hh);
        let (lm, pm) = eval(-hh);
        (pp == pm).then(|| (lp - lm) / (2.0 * hh as f64))
    })
}

/// Pairs of (reverse-mode, finite-difference) directional derivatives along
/// random directions; directions whose probes cross a kink are redrawn.
fn probe(analytic: &Tensor, seed: u64, h: f32, eval: &dyn Fn(&Tensor, f32) -> (f64, Vec<u32>)) -> (Vec<f64>, Vec<f64>) {
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for j in 0..DIRECTIONS as u64 {
        // Tiny steps drown in float32 noise, so redraw the direction before
        // shrinking far.
        let found = [2, 8].into_iter().find_map(|levels| {
            (0..REDRAWS).find_map(|r| {
                let v = uniform(analytic.shape(), seed + 100 * j + r, -1.0, 1.0);
                central(&|step| eval(&v, step), h, levels).map(|fd| (dot(analytic, &v), fd))
            })
        });
        let (x, y) = found.unwrap_or((f64::NAN, f64::NAN));
        a.push(x);
        n.push(y);
    }
    (a, n)
}

/// Relative errors between reverse-mode and central-difference directional
/// derivatives. Every input and every trainable parameter is
/// probed on its own along a few random directions; the error is the 2-norm
/// of the mismatch over the directions, relative to the larger 2-norm of the
/// two derivative vectors. `per_tensor` is the worst such error; `whole` pools
/// every probe of every tensor into one pair of vectors.
///
/// Probing whole tensors at once keeps the signal well above the float32
/// rounding of the forward pass, which per-coordinate differences are not.
pub struct GradErrors {
    pub per_tensor: f64,
    pub whole: f64,
}

pub fn check_grad(inputs: &[Tensor], store: &mut ParamStore, h: f32, build: &Build) -> GradErrors {
    let mut g = Graph::new(Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = build(&mut g, store, &vars).expect("forward");
    let w = g.input(weights_for(g.value(out).shape()));
    let prod = g.mul(out, w).expect("mul");
    let loss = g.sum_all(prod);
    store.zero_grad();
    let grads = g.backward(loss, store).expect("backward");
    let debug = std::env::var_os("GRAD_DEBUG").is_some();

    let mut worst = 0f64;
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let (a, n) = probe(&analytic, 1000 * (k as u64 + 1), h, &|v, step| {
            let mut moved = inputs.to_vec();
            moved[k] = shifted(t, v, step);
            loss_f64(&moved, store, build)
        });
        if debug {
            eprintln!("  input {k}: {:.2e} {a:?} {n:?}", rel_err(&a, &n));
        }
        worst = worst.max(rel_err(&a, &n));
        all_a.extend(a);
        all_n.extend(n);
    }
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let analytic = store.get(id).grad.clone();
        let orig = store.get(id).value.clone();
        let cell = std::cell::RefCell::new(store.clone());
        let (a, n) = probe(&analytic, 50_000 + 1000 * id.index() as u64, h, &|v, step| {
            cell.borrow_mut().get_mut(id).value = shifted(&orig, v, step);
            loss_f64(inputs, &cell.borrow(), build)
        });
        if debug {
            eprintln!("  {}: {:.2e} {a:?} {n:?}", store.get(id).name, rel_err(&a, &n));
        }
        let e = rel_err(&a, &n);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        all_a.extend(a);
        all_n.extend(n);
    }
    let whole = rel_err(&all_a, &all_n);
    GradErrors {
        per_tensor: worst,
        whole: if whole.is_nan() { f64::INFINITY } else { whole },
    }
}

/// Single ops are held to the per-tensor error. Whole networks are held to
/// the pooled error: a per-channel shift early in a network moves hundreds
/// of ReLUs at once, so kink-free steps for that one tensor are small enough
/// that float32 rounding dominates its difference quotient.
pub struct GradResult {
    pub name: &'static str,
    pub error: f64,
    pub worst_tensor: f64,
    pub tolerance: f64,
}

impl GradResult {
    pub fn ok(&self) -> bool {
        self.error <= self.tolerance
    }
}

const OP_TOL: f64 = 1e-3;
const NET_TOL: f64 = 1e-2;
const H: f32 = 1e-2;

fn conv(opts: Conv3dOptions, bias: bool) -> impl Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var> {
    move |g, _, v| g.conv3d(v[0], v[1], bias.then(|| v[2]), opts)
}

/// Every differentiable operation and block against central differences.
pub fn gradient_suite() -> Vec<GradResult> {
    let mut out = Vec::new();
    let mut run = |name: &'static str, tol: f64, inputs: Vec<Tensor>, store: &mut ParamStore, h: f32, build: &Build| {
        let e = check_grad(&inputs, store, h, build);
        out.push(GradResult {
            name,
            error: if tol == NET_TOL { e.whole } else { e.per_tensor },
            worst_tensor: e.per_tensor,
            tolerance: tol,
        });
    };
    let empty = &mut ParamStore::new();

    run(
        "conv3d 3x3x3 dense",
        OP_TOL,
        vec![uniform(&[2, 3, 4, 4, 4], 1, -1.0, 1.0), uniform(&[4, 3, 3, 3, 3], 2, -0.5, 0.5), uniform(&[4], 3, -1.0, 1.0)],
        empty,
        H,
        &conv(Conv3dOptions::same(3), true),
    );
    run(
        "conv3d grouped",
        OP_TOL,
        vec![uniform(&[1, 4, 4, 4, 4], 4, -1.0, 1.0), uniform(&[8, 1, 3, 3, 3], 5, -0.5, 0.5)],
        empty,
        H,
        &conv(Conv3dOptions::same(3).grouped(4), false),
    );
    run(
        "conv3d pointwise",
        OP_TOL,
        vec![uniform(&[2, 3, 3, 4, 5], 6, -1.0, 1.0), uniform(&[5, 3, 1, 1, 1], 7, -0.5, 0.5), uniform(&[5], 8, -1.0, 1.0)],
        empty,
        H,
        &conv(Conv3dOptions::same(1), true),
    );
    run(
        "conv3d 7x7x7 two-to-one",
        OP_TOL,
        vec![uniform(&[1, 2, 5, 6, 4], 9, -1.0, 1.0), uniform(&[1, 2, 7, 7, 7], 10, -0.2, 0.2), uniform(&[1], 11, -1.0, 1.0)],
        empty,
        H,
        &conv(Conv3dOptions::same(7), true),
    );
    run(
        "conv3d strided",
        OP_TOL,
        vec![uniform(&[1, 2, 6, 6, 6], 12, -1.0, 1.0), uniform(&[3, 2, 2, 2, 2], 13, -0.5, 0.5)],
        empty,
        H,
        &conv(
            Conv3dOptions {
                stride: [2; 3],
                ..Conv3dOptions::default()
            },
            false,
        ),
    );
    run(
        "batch_norm",
        OP_TOL,
        vec![uniform(&[2, 3, 3, 3, 2], 14, -2.0, 2.0), uniform(&[3], 15, 0.5, 1.5), uniform(&[3], 16, -1.0, 1.0)],
        empty,
        1e-3,
        &|g, _, v| {
            let (rm, rv) = (Tensor::zeros(&[3]), Tensor::ones(&[3]));
            Ok(g.batch_norm(v[0], v[1], v[2], (&rm, &rv), 1e-5, 0.1)?.out)
        },
    );
    run("relu", OP_TOL, vec![off_zero(&[2, 3, 2, 2, 2], 17)], empty, H, &|g, _, v| Ok(g.relu(v[0])));
    run("sigmoid", OP_TOL, vec![uniform(&[2, 3, 2, 2, 2], 18, -4.0, 4.0)], empty, H, &|g, _, v| Ok(g.sigmoid(v[0])));
    run(
        "mul broadcast",
        OP_TOL,
        vec![uniform(&[2, 3, 2, 3, 2], 19, -1.0, 1.0), uniform(&[2, 3, 1, 1, 1], 20, -1.0, 1.0)],
        empty,
        H,
        &|g, _, v| g.mul(v[0], v[1]),
    );
    run(
        "add, scale, affine",
        OP_TOL,
        vec![uniform(&[2, 2, 2, 2, 2], 21, -1.0, 1.0), uniform(&[2, 2, 2, 2, 2], 22, -1.0, 1.0), Tensor::scalar(0.7)],
        empty,
        H,
        &|g, _, v| {
            let s = g.add(v[0], v[1])?;
            let s = g.scale(s, v[2])?;
            Ok(g.affine(s, -1.5, 0.25))
        },
    );
    run("max_pool3d", OP_TOL, vec![distinct(&[2, 2, 4, 4, 2], 23)], empty, 1e-3, &|g, _, v| g.max_pool3d(v[0]));
    run(
        "global_avg_pool",
        OP_TOL,
        vec![uniform(&[2, 3, 2, 3, 4], 24, -1.0, 1.0)],
        empty,
        H,
        &|g, _, v| g.global_avg_pool(v[0]),
    );
    run(
        "channel_mean and channel_max",
        OP_TOL,
        vec![distinct(&[2, 4, 2, 3, 2], 25)],
        empty,
        1e-3,
        &|g, _, v| {
            let a = g.channel_mean(v[0])?;
            let b = g.channel_max(v[0])?;
            g.concat_channels(&[a, b])
        },
    );
    run(
        "trilinear_upsample",
        OP_TOL,
        vec![uniform(&[1, 2, 3, 2, 4], 26, -1.0, 1.0)],
        empty,
        H,
        &|g, _, v| g.trilinear_upsample(v[0]),
    );
    run(
        "dwt3",
        OP_TOL,
        vec![uniform(&[2, 3, 4, 4, 4], 27, -1.0, 1.0)],
        empty,
        H,
        &|g, _, v| g.dwt3(v[0], &FilterPair::haar()),
    );
    run(
        "iwt3",
        OP_TOL,
        vec![uniform(&[1, 2, 8, 2, 2, 2], 28, -1.0, 1.0)],
        empty,
        H,
        &|g, _, v| g.iwt3(v[0], &FilterPair::haar()),
    );
    run(
        "reshape, permute, concat, sum_axis",
        OP_TOL,
        vec![uniform(&[1, 2, 2, 3, 2], 29, -1.0, 1.0), uniform(&[1, 1, 2, 3, 2], 30, -1.0, 1.0)],
        empty,
        H,
        &|g, _, v| {
            let c = g.concat_channels(&[v[0], v[1]])?;
            let p = g.permute(c, &[0, 2, 1, 3, 4])?;
            let r = g.reshape(p, &[1, 2, 3, 3, 2, 1])?;
            g.sum_axis(r, 2)
        },
    );
    let target = binary(&[2, 1, 4, 4, 4], 31, 0.3);
    let t2 = target.clone();
    run("dice_loss", OP_TOL, vec![uniform(&[2, 1, 4, 4, 4], 32, -3.0, 3.0)], empty, H, &move |g, _, v| {
        g.dice_loss(v[0], &t2, 1e-5)
    });
    let t2 = target.clone();
    run("bce_loss", OP_TOL, vec![uniform(&[2, 1, 4, 4, 4], 33, -3.0, 3.0)], empty, H, &move |g, _, v| {
        g.bce_loss(v[0], &t2)
    });
    let t2 = target.clone();
    run("total_loss", OP_TOL, vec![uniform(&[2, 1, 4, 4, 4], 34, -3.0, 3.0)], empty, H, &move |g, _, v| {
        total_loss(g, v[0], &t2, &LossConfig::default())
    });

    let init = Init::new(40);
    let mut store = ParamStore::new();
    let prior = PriorProjection::new(&mut store, &init, "prior", 2, 3).unwrap();
    run(
        "prior projection",
        OP_TOL,
        vec![uniform(&[1, 2, 4, 4, 4], 41, 0.0, 1.0), Tensor::scalar(0.3)],
        &mut store,
        1e-3,
        &|g, s, v| prior.forward(g, s, v[0], v[1]),
    );

    let mut store = ParamStore::new();
    let rfe = Rfe::new(&mut store, &init, "rfe", 2, 3).unwrap();
    run(
        "residual feature encoder",
        OP_TOL,
        vec![uniform(&[2, 2, 4, 4, 2], 42, -1.0, 1.0)],
        &mut store,
        1e-3,
        &|g, s, v| rfe.forward(g, s, v[0]),
    );

    let mut store = ParamStore::new();
    let down = WaveletDown::new(&mut store, &init, "down", 2, FilterPair::haar()).unwrap();
    run(
        "wavelet downsample",
        OP_TOL,
        vec![uniform(&[2, 2, 4, 4, 4], 43, -1.0, 1.0)],
        &mut store,
        1e-3,
        &|g, s, v| Ok(down.forward(g, s, v[0])?.x_out),
    );

    let mut store = ParamStore::new();
    let up = WaveletUp::new(&mut store, &init, "up", 4, 2, 0.5, FilterPair::haar()).unwrap();
    run(
        "iwt upsample",
        OP_TOL,
        vec![uniform(&[1, 4, 2, 2, 2], 44, -1.0, 1.0), uniform(&[1, 2, 8, 2, 2, 2], 45, -1.0, 1.0)],
        &mut store,
        H,
        &|g, s, v| up.forward(g, s, v[0], v[1]),
    );

    let mut store = ParamStore::new();
    let msff = Msff::new(&mut store, &init, "msff", &[2, 4], 1).unwrap();
    run(
        "multi-scale feature fusion",
        OP_TOL,
        vec![uniform(&[1, 2, 4, 4, 4], 46, -1.0, 1.0), uniform(&[1, 4, 2, 2, 2], 47, -1.0, 1.0)],
        &mut store,
        H,
        &|g, s, v| msff.forward(g, s, &[v[0], v[1]]),
    );

    for (name, variant) in [("end-to-end full model", Variant::Full), ("end-to-end baseline", Variant::Baseline)] {
        let cfg = NetworkConfig {
            base_width: 2,
            scales: 2,
            ..NetworkConfig::default()
        }
        .with_variant(variant);
        let mut net = Network::new(cfg, 50).unwrap();
        let mut store = std::mem::take(&mut net.store);
        let image = uniform(&[1, 1, 8, 8, 8], 51, 0.0, 1.0);
        let prior = binary(&[1, 1, 8, 8, 8], 52, 0.3);
        let net_ref = &net;
        run(name, NET_TOL, vec![image], &mut store, H, &move |g, s, v| {
            let mut n = net_ref.clone();
            n.store = s.clone();
            let p = g.input(prior.clone());
            n.forward(g, v[0], Some(p))
        });
    }
    out
}

// ---------------------------------------------------------------- morphology

pub fn random_mask(seed: u64) -> BinaryMask3 {
    let mut r = rng(seed);
    let dims = [r.random_range(1..=12), r.random_range(1..=12), r.random_range(1..=12)];
    let p = r.random_range(0.05..0.6);
    BinaryMask3::from_fn(dims, [1.0; 3], |_| r.random_bool(p))
}

fn neighbours(dims: [usize; 3], p: [usize; 3], conn: Connectivity) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let l1 = dz.abs() + dy.abs() + dx.abs();
                if l1 == 0 || (conn == Connectivity::Six && l1 != 1) {
                    continue;
                }
                let q = [p[0] as i64 + dz, p[1] as i64 + dy, p[2] as i64 + dx];
                if (0..3).all(|a| q[a] >= 0 && q[a] < dims[a] as i64) {
                    out.push([q[0] as usize, q[1] as usize, q[2] as usize]);
                }
            }
        }
    }
    out
}

/// Minimum-label propagation to a fixed point; each component ends up
/// labelled with its lowest linear index.
pub fn oracle_largest_component(m: &BinaryMask3, conn: Connectivity) -> BinaryMask3 {
    let n = m.len();
    let mut label: Vec<usize> = (0..n).map(|i| if m.data()[i] != 0 { i } else { usize::MAX }).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            if label[i] == usize::MAX {
                continue;
            }
            for q in neighbours(m.dims(), m.coords(i), conn) {
                let j = m.index(q);
                if label[j] < label[i] {
                    label[i] = label[j];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut size = vec![0usize; n];
    for &l in &label {
        if l != usize::MAX {
            size[l] += 1;
        }
    }
    // Largest size; among equals the smallest label.
    let best = (0..n).filter(|&l| size[l] > 0).max_by_key(|&l| (size[l], std::cmp::Reverse(l)));
    BinaryMask3::from_fn(m.dims(), m.spacing(), |p| Some(label[m.index(p)]) == best)
}

pub fn oracle_slice_contours(m: &BinaryMask3) -> BinaryMask3 {
    let [_, h, w] = m.dims();
    let fg = |z: usize, y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m.get([z, y as usize, x as usize]);
    BinaryMask3::from_fn(m.dims(), m.spacing(), |[z, y, x]| {
        let (y, x) = (y as i64, x as i64);
        fg(z, y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !fg(z, y + dy, x + dx))
    })
}

pub fn oracle_dilate(m: &BinaryMask3, r: usize) -> BinaryMask3 {
    let dims = m.dims();
    BinaryMask3::from_fn(dims, m.spacing(), |p| {
        let lo = p.map(|v| v.saturating_sub(r));
        let hi = [0, 1, 2].map(|a| (p[a] + r).min(dims[a] - 1));
        (lo[0]..=hi[0]).any(|z| (lo[1]..=hi[1]).any(|y| (lo[2]..=hi[2]).any(|x| m.get([z, y, x]))))
    })
}

// ------------------------------------------------------------------- metrics

pub struct OracleMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub hd95: Option<f64>,
}

fn oracle_boundary(m: &BinaryMask3) -> Vec<[usize; 3]> {
    let dims = m.dims();
    let mut out = Vec::new();
    for i in 0..m.len() {
        let p = m.coords(i);
        if !m.get(p) {
            continue;
        }
        let on_edge = (0..3).any(|a| p[a] == 0 || p[a] + 1 == dims[a]);
        if on_edge || neighbours(dims, p, Connectivity::Six).iter().any(|&q| !m.get(q)) {
            out.push(p);
        }
    }
    out
}

/// Counts by enumeration; HD95 from all pairwise boundary distances.
pub fn oracle_metrics(pred: &BinaryMask3, truth: &BinaryMask3) -> OracleMetrics {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for i in 0..pred.len() {
        match (pred.data()[i], truth.data()[i]) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let bp = oracle_boundary(pred);
    let bt = oracle_boundary(truth);
    let s = pred.spacing().map(|v| v as f64);
    let dist = |a: [usize; 3], b: [usize; 3]| {
        (0..3)
            .map(|k| {
                let d = (a[k] as f64 - b[k] as f64) * s[k];
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let hd95 = match (bp.is_empty(), bt.is_empty()) {
        (true, true) => Some(0.0),
        (false, false) => {
            let mut all: Vec<f64> = bp
                .iter()
                .map(|&a| bt.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min))
                .chain(bt.iter().map(|&b| bp.iter().map(|&a| dist(a, b)).fold(f64::INFINITY, f64::min)))
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rank = 0.95 * (all.len() - 1) as f64;
            let (lo, frac) = (rank.floor() as usize, rank.fract());
            let hi = (lo + 1).min(all.len() - 1);
            Some(all[lo] * (1.0 - frac) + all[hi] * frac)
        }
        _ => None,
    };
    OracleMetrics { tp, fp, fn_, hd95 }
}

pub fn random_pair(seed: u64) -> (BinaryMask3, BinaryMask3) {
    let mut r = rng(seed);
    let spacing = [r.random_range(0.5f32..2.0), r.random_range(0.5f32..2.0), r.random_range(0.5f32..2.0)];
    let p = r.random_range(0.0..0.5);
    let q = r.random_range(0.0..0.5);
    let a = BinaryMask3::from_fn([8, 8, 8], spacing, |_| r.random_bool(p));
    let b = BinaryMask3::from_fn([8, 8, 8], spacing, |_| r.random_bool(q));
    (a, b)
}
