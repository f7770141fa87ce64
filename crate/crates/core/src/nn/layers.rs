//! Parameterized building blocks shared by the network modules.

use crate::autodiff::{Conv3dOptions, Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic per-parameter initializer.
///
/// Each tensor draws from its own stream seeded by `(seed, name)`, so adding
/// or removing a module never shifts the initial values of the others.
#[derive(Clone, Copy, Debug)]
pub struct Init {
    pub seed: u64,
}

fn fnv1a(seed: u64, name: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Fan-in scaled uniform (Kaiming) for a ReLU network:
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, name));
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv3dOptions,
}

impl Conv {
    /// Cubic `k`-kernel convolution with "same" padding.
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = cin / groups * k * k * k;
        let wname = format!("{name}.weight");
        let w = init.kaiming(&wname, &[cout, cin / groups, k, k, k], fan_in);
        let weight = store.add(wname, w, true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true)?)
        } else {
            None
        };
        let opts = Conv3dOptions {
            groups,
            ..Conv3dOptions::same(k)
        };
        Ok(Self { weight, bias, opts })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv3d(x, w, b, self.opts)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let running = (&store.get(self.running_mean).value, &store.get(self.running_var).value);
        let out = g.batch_norm(x, gamma, beta, running, self.eps, self.momentum)?;
        if let Some((rm, rv)) = out.running {
            g.defer_update(self.running_mean, rm);
            g.defer_update(self.running_var, rv);
        }
        Ok(out.out)
    }
}

/// `ReLU(BN(Conv3x3x3(x)))`.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, cin: usize, cout: usize, groups: usize) -> Result<Self> {
        // The conv bias is redundant in front of BN.
        let conv = Conv::new(store, init, &format!("{name}.conv"), cin, cout, 3, groups, false)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), cout)?;
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}
