use super::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Result of [`Graph::batch_norm`].
pub struct BatchNormOutput {
    pub out: Var,
    /// Updated `(running_mean, running_var)` in training mode.
    pub running: Option<(Tensor, Tensor)>,
}

struct BatchNormOp {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
    /// Statistics came from the batch (train) rather than running buffers.
    batch_stats: bool,
}

impl Backward for BatchNormOp {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let [b, c, d, h, w] = x.dims5("batch_norm").expect("rank 5");
        let vol = d * h * w;
        let n = (b * vol) as f64;
        let (xd, gd, gam) = (x.data(), grad.data(), gamma.data());
        let mut g_gamma = vec![0.0f32; c];
        let mut g_beta = vec![0.0f32; c];
        let mut gx = needs[0].then(|| vec![0.0f32; x.numel()]);
        for ch in 0..c {
            let (mu, istd) = (self.mean[ch], self.inv_std[ch]);
            let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
            for bi in 0..b {
                let off = (bi * c + ch) * vol;
                for i in off..off + vol {
                    let xhat = (xd[i] - mu) * istd;
                    sum_g += gd[i] as f64;
                    sum_gx += (gd[i] * xhat) as f64;
                }
            }
            g_gamma[ch] = sum_gx as f32;
            g_beta[ch] = sum_g as f32;
            let Some(gx) = gx.as_mut() else { continue };
            let scale = gam[ch] * istd;
            if self.batch_stats {
                let mean_g = (sum_g / n) as f32;
                let mean_gx = (sum_gx / n) as f32;
                for bi in 0..b {
                    let off = (bi * c + ch) * vol;
                    for i in off..off + vol {
                        let xhat = (xd[i] - mu) * istd;
                        gx[i] = scale * (gd[i] - mean_g - xhat * mean_gx);
                    }
                }
            } else {
                for bi in 0..b {
                    let off = (bi * c + ch) * vol;
                    for i in off..off + vol {
                        gx[i] = scale * gd[i];
                    }
                }
            }
        }
        vec![
            gx.map(|d| Tensor::new(x.shape(), d).expect("shape")),
            Some(Tensor::new(&[c], g_gamma).expect("shape")),
            Some(Tensor::new(&[c], g_beta).expect("shape")),
        ]
    }
}

impl Graph {
    /// Per-channel batch normalization over `(B, D, H, W)`.
    ///
    /// In training mode the batch statistics normalize the input and the
    /// returned running statistics are blended with `momentum`; the running
    /// variance uses the unbiased estimate. In eval mode the given running
    /// statistics are used as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor, &Tensor),
        eps: f32,
        momentum: f32,
    ) -> Result<BatchNormOutput> {
        let t = self.value(x);
        let [b, c, d, h, w] = t.dims5("batch_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(
                    "batch_norm",
                    format!("axis C: {name} has shape {:?}, input has {c} channels", self.value(v).shape()),
                ));
            }
        }
        if running.0.shape() != [c] || running.1.shape() != [c] {
            return Err(Error::dim("batch_norm", format!("axis C: running stats do not have {c} entries")));
        }
        let vol = d * h * w;
        let n = b * vol;
        let xd = t.data();
        let train = self.training();
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        let mut unbiased = vec![0.0f32; c];
        if train {
            for ch in 0..c {
                let mut s = 0.0f64;
                for bi in 0..b {
                    let off = (bi * c + ch) * vol;
                    s += xd[off..off + vol].iter().map(|&v| v as f64).sum::<f64>();
                }
                let mu = s / n as f64;
                let mut ss = 0.0f64;
                for bi in 0..b {
                    let off = (bi * c + ch) * vol;
                    ss += xd[off..off + vol].iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
                }
                mean[ch] = mu as f32;
                var[ch] = (ss / n as f64) as f32;
                unbiased[ch] = if n > 1 { (ss / (n - 1) as f64) as f32 } else { var[ch] };
            }
        } else {
            mean.copy_from_slice(running.0.data());
            var.copy_from_slice(running.1.data());
        }
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let (gam, bet) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0f32; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * vol;
                let (mu, istd, g, be) = (mean[ch], inv_std[ch], gam[ch], bet[ch]);
                for i in off..off + vol {
                    out[i] = g * ((xd[i] - mu) * istd) + be;
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let running = train.then(|| {
            let rm = running.0.zip_map(&Tensor::new(&[c], mean.clone()).expect("c"), |r, m| (1.0 - momentum) * r + momentum * m);
            let rv = running.1.zip_map(&Tensor::new(&[c], unbiased).expect("c"), |r, v| (1.0 - momentum) * r + momentum * v);
            (rm, rv)
        });
        let op = BatchNormOp {
            mean,
            inv_std,
            batch_stats: train,
        };
        let out = self.push("batch_norm", out, &[x, gamma, beta], op);
        Ok(BatchNormOutput { out, running })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;

    fn run(mode: Mode, x: Tensor, gamma: f32, beta: f32, rm: f32, rv: f32) -> (Tensor, Option<(Tensor, Tensor)>) {
        let c = x.shape()[1];
        let mut g = Graph::new(mode);
        let x = g.input(x);
        let ga = g.input(Tensor::full(&[c], gamma));
        let be = g.input(Tensor::full(&[c], beta));
        let (rm, rv) = (Tensor::full(&[c], rm), Tensor::full(&[c], rv));
        let o = g.batch_norm(x, ga, be, (&rm, &rv), 1e-5, 0.1).unwrap();
        (g.value(o.out).clone(), o.running)
    }

    #[test]
    fn constant_channel_centers_to_beta() {
        let (y, _) = run(Mode::Train, Tensor::full(&[1, 2, 2, 2, 2], 3.5), 1.0, 0.0, 0.0, 1.0);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let (y, _) = run(Mode::Train, Tensor::full(&[1, 1, 2, 2, 2], 3.5), 1.0, 5.0, 0.0, 1.0);
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let x = Tensor::from_fn(&[2, 2, 1, 2, 3], |i| i as f32 - 5.0);
        let (y, running) = run(Mode::Eval, x.clone(), 1.0, 0.0, 0.0, 1.0);
        assert!(y.max_abs_diff(&x) < 1e-4);
        assert!(running.is_none());
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        // Channel values 0..8 -> mean 3.5, unbiased var 6.
        let x = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i as f32);
        let (y, running) = run(Mode::Train, x, 1.0, 0.0, 0.0, 1.0);
        let (rm, rv) = running.unwrap();
        assert!((rm.data()[0] - 0.35).abs() < 1e-6);
        assert!((rv.data()[0] - (0.9 + 0.6)).abs() < 1e-6);
        assert!(y.sum().abs() < 1e-5);
    }

    #[test]
    fn wrong_gamma_length_is_a_dimension_error() {
        let mut g = Graph::new(Mode::Train);
        let x = g.input(Tensor::zeros(&[1, 2, 1, 1, 1]));
        let ga = g.input(Tensor::ones(&[3]));
        let be = g.input(Tensor::zeros(&[2]));
        let r = Tensor::zeros(&[2]);
        assert!(matches!(g.batch_norm(x, ga, be, (&r, &r), 1e-5, 0.1), Err(Error::Dimension { .. })));
    }
}
