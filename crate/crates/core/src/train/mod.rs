//! Loss, optimization, patch pipeline, metrics and the ablation harness.

pub mod metrics;
pub mod optim;
pub mod patches;

use crate::anatomy::{build_prior, BinaryMask3, DEFAULT_PRIOR_RADIUS};
use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkConfig, Variant};
use crate::phantom::VolumeRecord;
use crate::tensor::{Dims3, Tensor};
use metrics::{mean_metrics, metrics, SegMetrics};
use optim::{cosine_lr, Adam, AdamConfig};
use patches::{plan_patches, stitch};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the Dice term; BCE gets `1 - lambda`.
    pub lambda: f32,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            dice_eps: 1e-5,
        }
    }
}

/// `lambda * dice + (1 - lambda) * bce`.
pub fn total_loss(g: &mut Graph, logits: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let dice = g.dice_loss(logits, target, cfg.dice_eps)?;
    let bce = g.bce_loss(logits, target)?;
    let a = g.affine(dice, cfg.lambda, 0.0);
    let b = g.affine(bce, 1.0 - cfg.lambda, 0.0);
    g.add(a, b)
}

/// Min-max scaling to `[0, 1]`; constant volumes map to zero.
pub fn normalize(t: &Tensor) -> Tensor {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        t.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::zeros(t.shape())
    }
}

/// A case ready for the network: normalized image, prior and target, all
/// `(1, 1, D, H, W)`.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub image: Tensor,
    pub prior: Tensor,
    pub target: Tensor,
    pub truth: BinaryMask3,
}

impl Case {
    pub fn from_record(rec: &VolumeRecord, prior_radius: usize) -> Result<Self> {
        Ok(Self {
            id: rec.id.clone(),
            image: normalize(&rec.intensity),
            prior: build_prior(&rec.myo, prior_radius).to_tensor(),
            target: rec.vessel.to_tensor(),
            truth: rec.vessel.clone(),
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.truth.dims()
    }
}

/// Image, prior and target cropped to the same block.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub prior: Tensor,
    pub target: Tensor,
}

impl Sample {
    pub fn crop(case: &Case, start: Dims3, size: Dims3) -> Result<Self> {
        Ok(Self {
            image: case.image.crop3(start, size)?,
            prior: case.prior.crop3(start, size)?,
            target: case.target.crop3(start, size)?,
        })
    }

    /// Mirrors image, prior and target along W together.
    pub fn flip(&self) -> Result<Self> {
        Ok(Self {
            image: self.image.flip_w()?,
            prior: self.prior.flip_w()?,
            target: self.target.flip_w()?,
        })
    }
}

/// Flips with probability one half.
pub fn random_flip(s: Sample, rng: &mut impl Rng) -> Result<Sample> {
    if rng.random_bool(0.5) {
        s.flip()
    } else {
        Ok(s)
    }
}

fn stack(ts: &[&Tensor]) -> Result<Tensor> {
    let first = ts.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * ts.len());
    for t in ts {
        if t.shape() != first.shape() {
            return Err(Error::dim("batch", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    shape[0] *= ts.len();
    Tensor::new(&shape, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub patience: usize,
    pub patch: Dims3,
    pub overlap: usize,
    pub batch_size: usize,
    /// Random patches drawn from each training case per epoch.
    pub patches_per_case: usize,
    pub prior_radius: usize,
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            epochs: 60,
            patience: 15,
            patch: [32, 32, 32],
            overlap: 8,
            batch_size: 1,
            patches_per_case: 1,
            prior_radius: DEFAULT_PRIOR_RADIUS,
            flip: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.network.check_dims(self.patch)?;
        if !(0.0..=1.0).contains(&self.loss.lambda) {
            return Err(Error::Config(format!("loss.lambda must lie in [0, 1], got {}", self.loss.lambda)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patches_per_case == 0 {
            return Err(Error::Config("epochs, batch_size and patches_per_case must be positive".into()));
        }
        if self.overlap >= self.patch.into_iter().min().unwrap_or(0) {
            return Err(Error::Config(format!("overlap {} must be smaller than the patch", self.overlap)));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", self.optimizer.lr)));
        }
        Ok(())
    }

    /// Checks that every volume can hold a patch.
    pub fn check_volume(&self, dims: Dims3) -> Result<()> {
        plan_patches(dims, self.patch, self.overlap).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dsc: f64,
}

/// Network plus optimizer state for step-level control.
pub struct Trainer {
    pub net: Network,
    pub adam: Adam,
    pub config: TrainConfig,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::new(config.network.clone(), config.seed)?;
        let adam = Adam::new(config.optimizer.clone(), &net.store);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a1e);
        Ok(Self { net, adam, config, rng })
    }

    /// One forward, backward and Adam update on a batch; returns the loss.
    pub fn step(&mut self, batch: &[Sample], lr: f64) -> Result<f64> {
        let image = stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let prior = stack(&batch.iter().map(|s| &s.prior).collect::<Vec<_>>())?;
        let target = stack(&batch.iter().map(|s| &s.target).collect::<Vec<_>>())?;
        let mut g = Graph::new(Mode::Train);
        let x = g.input(image);
        let p = self.net.config.use_mpe.then(|| g.input(prior));
        let logits = self.net.forward(&mut g, x, p)?;
        let loss = total_loss(&mut g, logits, &target, &self.config.loss)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            let (node, op) = g.first_non_finite().unwrap_or((loss.index(), "loss"));
            return Err(Error::NonFinite { op, node });
        }
        self.net.store.zero_grad();
        g.backward(loss, &mut self.net.store)?;
        if let Some((_, p)) = self.net.store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::Validation(format!("non-finite gradient for `{}`", p.name)));
        }
        g.commit_updates(&mut self.net.store)?;
        self.adam.step(&mut self.net.store, lr);
        Ok(value as f64)
    }

    /// One pass over shuffled random patches; returns the mean loss.
    pub fn epoch(&mut self, cases: &[Case], lr: f64) -> Result<f64> {
        let patch = self.config.patch;
        let mut order: Vec<usize> = (0..cases.len())
            .flat_map(|i| std::iter::repeat_n(i, self.config.patches_per_case))
            .collect();
        order.shuffle(&mut self.rng);
        let mut samples = Vec::with_capacity(order.len());
        for &i in &order {
            let dims = cases[i].dims();
            let start = [0, 1, 2].map(|a| self.rng.random_range(0..=dims[a] - patch[a]));
            let s = Sample::crop(&cases[i], start, patch)?;
            samples.push(if self.config.flip { random_flip(s, &mut self.rng)? } else { s });
        }
        let mut total = 0.0;
        let mut steps = 0;
        for batch in samples.chunks(self.config.batch_size) {
            total += self.step(batch, lr)?;
            steps += 1;
        }
        Ok(total / steps as f64)
    }
}

/// Sliding-window inference; returns stitched logits `(1, C, D, H, W)`.
pub fn predict(net: &Network, image: &Tensor, prior: Option<&Tensor>, patch: Dims3, overlap: usize) -> Result<Tensor> {
    let [_, _, d, h, w] = image.dims5("predict")?;
    let dims = [d, h, w];
    if net.config.use_mpe && prior.is_none() {
        return Err(Error::Usage("the prior encoder is enabled but no prior mask was given".into()));
    }
    let grid = plan_patches(dims, patch, overlap)?;
    let blocks = grid
        .origins()
        .into_par_iter()
        .map(|o| {
            let mut g = Graph::new(Mode::Eval);
            let x = g.input(image.crop3(o, patch)?);
            let p = match prior.filter(|_| net.config.use_mpe) {
                Some(p) => Some(g.input(p.crop3(o, patch)?)),
                None => None,
            };
            let logits = net.forward(&mut g, x, p)?;
            Ok(g.value(logits).clone())
        })
        .collect::<Result<Vec<_>>>()?;
    stitch(&blocks, &grid, dims)
}

/// Foreground where `sigmoid(logit) > 0.5`, i.e. `logit > 0`.
pub fn binarize(logits: &Tensor, spacing: [f32; 3]) -> Result<BinaryMask3> {
    BinaryMask3::from_tensor(logits, 0.0, spacing)
}

pub fn predict_case(net: &Network, case: &Case, cfg: &TrainConfig) -> Result<BinaryMask3> {
    let logits = predict(net, &case.image, Some(&case.prior), cfg.patch, cfg.overlap)?;
    binarize(&logits, case.truth.spacing())
}

pub fn evaluate(net: &Network, cases: &[Case], cfg: &TrainConfig) -> Result<Vec<SegMetrics>> {
    cases
        .iter()
        .map(|c| metrics(&predict_case(net, c, cfg)?, &c.truth))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best validation DSC.
    pub best: Network,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Epoch loop with cosine decay, validation DSC after every epoch,
/// best-weight retention and early stopping after `patience` epochs without
/// strict improvement.
pub fn train(
    cfg: &TrainConfig,
    train_cases: &[Case],
    val_cases: &[Case],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_cases.is_empty() || val_cases.is_empty() {
        return Err(Error::Config("training needs at least one train and one validation case".into()));
    }
    for c in train_cases.iter().chain(val_cases) {
        cfg.network.check_dims(c.dims())?;
        cfg.check_volume(c.dims())?;
    }
    let mut t = Trainer::new(cfg.clone())?;
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, t.net.clone());
    let mut stale = 0;
    let mut stopped_early = false;
    for e in 0..cfg.epochs {
        let lr = cosine_lr(e, cfg.epochs, cfg.optimizer.lr);
        let train_loss = t.epoch(train_cases, lr)?;
        let val_dsc = mean_metrics(&evaluate(&t.net, val_cases, cfg)?).dsc;
        let rec = EpochRecord {
            epoch: e + 1,
            lr,
            train_loss,
            val_dsc,
        };
        on_epoch(&rec);
        history.push(rec);
        if val_dsc > best.0 {
            best = (val_dsc, e + 1, t.net.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best: best.2,
        best_epoch: best.1,
        history,
        stopped_early,
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub parameters: usize,
    pub best_epoch: usize,
    /// Mean over the test cases.
    pub metrics: SegMetrics,
}

/// Trains and tests every variant under the same seed, data and schedule.
pub fn ablate(
    base: &TrainConfig,
    variants: &[Variant],
    train_cases: &[Case],
    val_cases: &[Case],
    test_cases: &[Case],
    mut on_epoch: impl FnMut(Variant, &EpochRecord),
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&v| {
            let cfg = TrainConfig {
                network: base.network.clone().with_variant(v),
                ..base.clone()
            };
            let out = train(&cfg, train_cases, val_cases, |r| on_epoch(v, r))?;
            Ok(AblationRow {
                variant: v,
                parameters: out.best.num_parameters(),
                best_epoch: out.best_epoch,
                metrics: mean_metrics(&evaluate(&out.best, test_cases, &cfg)?),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_weights() {
        let logits = Tensor::new(&[1, 1, 1, 1, 2], vec![0.3, -1.2]).unwrap();
        let target = Tensor::new(&[1, 1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let eval = |lambda: f32| {
            let mut g = Graph::new(Mode::Eval);
            let x = g.input(logits.clone());
            let cfg = LossConfig { lambda, ..LossConfig::default() };
            let l = total_loss(&mut g, x, &target, &cfg).unwrap();
            let d = g.dice_loss(x, &target, cfg.dice_eps).unwrap();
            let b = g.bce_loss(x, &target).unwrap();
            (g.value(l).data()[0], g.value(d).data()[0], g.value(b).data()[0])
        };
        let (l1, d, _) = eval(1.0);
        assert_eq!(l1, d);
        let (l0, _, b) = eval(0.0);
        assert_eq!(l0, b);
        let (lh, d, b) = eval(0.5);
        assert!((lh - 0.5 * (d + b)).abs() < 1e-7);
    }

    #[test]
    fn double_flip_is_identity() {
        let t = Tensor::from_fn(&[1, 1, 2, 3, 4], |i| i as f32);
        let s = Sample {
            image: t.clone(),
            prior: t.map(|v| v * 2.0),
            target: t.map(|v| (v as usize % 2) as f32),
        };
        assert_eq!(s.flip().unwrap().flip().unwrap(), s);
        let f = s.flip().unwrap();
        assert_eq!(f.image.data()[0], 3.0);
        assert_eq!(f.prior.data()[0], 6.0);
        assert_eq!(f.target.data()[0], 1.0);
    }

    #[test]
    fn normalize_maps_to_unit_range() {
        let t = Tensor::new(&[4], vec![2.0, 4.0, 3.0, 6.0]).unwrap();
        assert_eq!(normalize(&t).data(), &[0.0, 0.5, 0.25, 1.0]);
        assert_eq!(normalize(&Tensor::full(&[3], 7.0)).data(), &[0.0; 3]);
    }
}
