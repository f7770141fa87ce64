//! Synthetic CCTA-like phantoms.
//!
//! A phantom is an ellipsoidal myocardial shell around a contrast-filled
//! cavity, with a branching vessel tree running over the outer surface of
//! the shell. Centerlines are random walks in the (polar, azimuth) angles of
//! an ellipsoid slightly larger than the shell, so every tube stays on the
//! epicardium. Unlabelled straight tubes of vessel intensity cross the
//! background away from the heart, so brightness alone does not identify a
//! coronary. Intensities are piecewise constant plus Gaussian noise.

use crate::anatomy::BinaryMask3;
use crate::error::{Error, Result};
use crate::tensor::{Dims3, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// Shell plus vessel tree.
    Tree,
    /// One straight tube along W through `(d, h) = center`, no shell.
    StraightTube { center: [f64; 2], radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: Dims3,
    pub spacing: [f32; 3],
    /// Shell center, voxels.
    pub center: [f64; 3],
    /// Outer shell semi-axes, voxels.
    pub radii: [f64; 3],
    pub thickness: f64,
    /// Relative random perturbation of center and radii.
    pub jitter: f64,
    /// Number of root vessels.
    pub branches: usize,
    /// Levels of child branches below each root.
    pub depth: usize,
    /// Tube radius at the leaves and at the roots, voxels.
    pub radius_range: [f64; 2],
    /// Root centerline length, voxels.
    pub length: f64,
    /// Heading noise per step, radians.
    pub tortuosity: f64,
    /// Polar band (radians from the +D axis) the tree is confined to.
    pub polar_band: [f64; 2],
    /// Unlabelled vessel-bright tubes kept at least `distractor_gap` voxels
    /// outside the shell.
    pub distractors: usize,
    pub distractor_gap: f64,
    pub mu_vessel: f64,
    pub mu_myo: f64,
    pub mu_cavity: f64,
    pub mu_background: f64,
    pub noise: f64,
    pub seed: u64,
    pub layout: Layout,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::for_dims([48, 48, 48], 0)
    }
}

impl PhantomSpec {
    /// Default geometry scaled to the volume size.
    pub fn for_dims(dims: Dims3, seed: u64) -> Self {
        let f = |n: usize, k: f64| n as f64 * k;
        Self {
            dims,
            spacing: [1.0; 3],
            center: [f(dims[0], 0.5) - 0.5, f(dims[1], 0.5) - 0.5, f(dims[2], 0.5) - 0.5],
            radii: [f(dims[0], 0.30), f(dims[1], 0.33), f(dims[2], 0.30)],
            thickness: 3.0,
            jitter: 0.08,
            branches: 2,
            depth: 2,
            radius_range: [1.0, 1.6],
            length: f(dims[0].min(dims[1]).min(dims[2]), 1.6),
            tortuosity: 0.12,
            polar_band: [0.35 * PI, 0.7 * PI],
            distractors: 3,
            distractor_gap: 4.0,
            mu_vessel: 1.0,
            mu_myo: 0.45,
            mu_cavity: 0.75,
            mu_background: 0.1,
            noise: 0.08,
            seed,
            layout: Layout::Tree,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0 || n % 16 != 0) {
            return Err(Error::Config(format!("phantom dims {:?} must be positive multiples of 16", self.dims)));
        }
        if !(self.mu_vessel > self.mu_myo && self.mu_myo > self.mu_background) {
            return Err(Error::Config("intensities must satisfy vessel > myocardium > background".into()));
        }
        if self.radius_range[0] < 1.0 || self.radius_range[1] < self.radius_range[0] {
            return Err(Error::Config(format!("radius range {:?} must satisfy 1 <= min <= max", self.radius_range)));
        }
        if self.noise < 0.0 || self.thickness <= 0.0 || self.radii.iter().any(|&r| r <= self.thickness) {
            return Err(Error::Config("noise must be >= 0 and the shell must be thicker than 0 and hollow".into()));
        }
        if !(self.distractor_gap >= 0.0) {
            return Err(Error::Config("distractor gap must be >= 0".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("spacing must be positive".into()));
        }
        Ok(())
    }
}

/// One dataset case.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub id: String,
    /// `(1, 1, D, H, W)`.
    pub intensity: Tensor,
    pub vessel: BinaryMask3,
    pub myo: BinaryMask3,
    pub spacing: [f32; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Shell geometry after jitter.
#[derive(Clone, Copy, Debug)]
pub struct Shell {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub thickness: f64,
}

impl Shell {
    /// Normalized radius: 1 on the ellipsoid with semi-axes `radii + offset`.
    pub fn rho(&self, p: [f64; 3], offset: f64) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / (self.radii[a] + offset)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn in_wall(&self, p: [f64; 3]) -> bool {
        self.rho(p, 0.0) <= 1.0 && self.rho(p, -self.thickness) > 1.0
    }

    pub fn in_cavity(&self, p: [f64; 3]) -> bool {
        self.rho(p, -self.thickness) <= 1.0
    }

    /// Point on the ellipsoid `radii + offset` at polar angle `theta` (from
    /// +D) and azimuth `phi`.
    pub fn surface(&self, theta: f64, phi: f64, offset: f64) -> [f64; 3] {
        let r = |a: usize| self.radii[a] + offset;
        [
            self.center[0] + r(0) * theta.cos(),
            self.center[1] + r(1) * theta.sin() * phi.cos(),
            self.center[2] + r(2) * theta.sin() * phi.sin(),
        ]
    }
}

/// Centerline sample: position and tube radius.
#[derive(Clone, Copy, Debug)]
struct Node {
    p: [f64; 3],
    r: f64,
}

/// Centerline height above the outer wall, as a fraction of the tube radius.
/// Tubes are half sunk into the epicardium and then clipped by the wall.
const SEAT: f64 = 0.5;
const STEP: f64 = 0.7;

struct Walker<'a> {
    shell: &'a Shell,
    spec: &'a PhantomSpec,
    mean_radius: f64,
}

impl Walker<'_> {
    /// Random walk from `(theta, phi)` with initial heading `psi`; the tube
    /// radius tapers linearly from `r0` to `r1`.
    fn walk(&self, rng: &mut ChaCha8Rng, start: (f64, f64, f64), length: f64, r0: f64, r1: f64) -> Vec<(Node, f64, f64, f64)> {
        let (mut theta, mut phi, mut psi) = start;
        let steps = (length / STEP).ceil().max(2.0) as usize;
        let turn = Normal::new(0.0, self.spec.tortuosity).expect("finite sigma");
        let [lo, hi] = self.spec.polar_band;
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let r = r0 + (r1 - r0) * i as f64 / (steps - 1) as f64;
            let p = self.shell.surface(theta, phi, SEAT * r);
            out.push((Node { p, r }, theta, phi, psi));
            psi += turn.sample(rng);
            theta += STEP * psi.cos() / self.mean_radius;
            phi += STEP * psi.sin() / (self.mean_radius * theta.sin().max(0.2));
            if theta < lo || theta > hi {
                theta = theta.clamp(lo, hi);
                psi = PI - psi;
            }
        }
        out
    }

    /// Root walk plus recursively spawned children.
    fn tree(&self, rng: &mut ChaCha8Rng, start: (f64, f64, f64), length: f64, r0: f64, level: usize, out: &mut Vec<Vec<Node>>) {
        let rmin = self.spec.radius_range[0];
        let r1 = (r0 * 0.7).max(rmin);
        let path = self.walk(rng, start, length, r0, r1);
        if level < self.spec.depth && path.len() > 8 {
            let children = 2;
            for _ in 0..children {
                let at = rng.random_range(path.len() / 5..path.len() * 3 / 4);
                let (node, theta, phi, psi) = path[at];
                let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let heading = psi + side * rng.random_range(0.6..1.2);
                let child_r = (node.r * 0.75).max(rmin);
                self.tree(rng, (theta, phi, heading), length * 0.45, child_r, level + 1, out);
            }
        }
        out.push(path.into_iter().map(|(n, ..)| n).collect());
    }
}

/// Marks voxels whose center lies within the interpolated radius of the
/// segment `a -> b`.
fn rasterize_segment(mask: &mut BinaryMask3, a: Node, b: Node) {
    let dims = mask.dims();
    let rmax = a.r.max(b.r);
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for ax in 0..3 {
        let l = a.p[ax].min(b.p[ax]) - rmax;
        let h = a.p[ax].max(b.p[ax]) + rmax;
        if h < 0.0 || l > (dims[ax] - 1) as f64 {
            return;
        }
        lo[ax] = l.ceil().max(0.0) as usize;
        hi[ax] = (h.floor() as usize).min(dims[ax] - 1);
    }
    let ab = [b.p[0] - a.p[0], b.p[1] - a.p[1], b.p[2] - a.p[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let q = [z as f64, y as f64, x as f64];
                let aq = [q[0] - a.p[0], q[1] - a.p[1], q[2] - a.p[2]];
                let t = if len2 > 0.0 {
                    ((aq[0] * ab[0] + aq[1] * ab[1] + aq[2] * ab[2]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let d2 = (0..3).map(|k| (aq[k] - t * ab[k]).powi(2)).sum::<f64>();
                let r = a.r + t * (b.r - a.r);
                if d2 <= r * r {
                    mask.set([z, y, x], true);
                }
            }
        }
    }
}

fn jittered_shell(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Shell {
    let mut j = || if spec.jitter > 0.0 { rng.random_range(-spec.jitter..spec.jitter) } else { 0.0 };
    let mut center = spec.center;
    let mut radii = spec.radii;
    for a in 0..3 {
        center[a] += j() * spec.dims[a] as f64 * 0.25;
        radii[a] *= 1.0 + j();
    }
    Shell {
        center,
        radii,
        thickness: spec.thickness,
    }
}

/// Straight tubes through random background points, clipped to stay
/// `distractor_gap` voxels outside the shell.
fn distractors(spec: &PhantomSpec, shell: &Shell, rng: &mut ChaCha8Rng) -> Result<BinaryMask3> {
    let dims = spec.dims;
    let mut mask = BinaryMask3::zeros(dims, spec.spacing);
    let far = |p: [f64; 3]| shell.rho(p, spec.distractor_gap) > 1.0;
    let reach = dims.iter().copied().max().unwrap_or(0) as f64 * 2.0;
    for _ in 0..spec.distractors {
        let mut anchor = None;
        for _ in 0..64 {
            let p = [0, 1, 2].map(|a| rng.random_range(0.0..dims[a] as f64 - 1.0));
            if far(p) {
                anchor = Some(p);
                break;
            }
        }
        let Some(p) = anchor else { continue };
        let dir: [f64; 3] = loop {
            let v = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0f64));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.1 && n <= 1.0 {
                break v.map(|x| x / n);
            }
        };
        let r = rng.random_range(spec.radius_range[0]..=spec.radius_range[1]);
        let a = Node { p: [0, 1, 2].map(|k| p[k] - reach * dir[k]), r };
        let b = Node { p: [0, 1, 2].map(|k| p[k] + reach * dir[k]), r };
        rasterize_segment(&mut mask, a, b);
    }
    let data = BinaryMask3::from_fn(dims, spec.spacing, |[z, y, x]| far([z as f64, y as f64, x as f64]));
    let clipped: Vec<u8> = mask.data().iter().zip(data.data()).map(|(&m, &f)| m & f).collect();
    BinaryMask3::new(dims, spec.spacing, clipped)
}

/// Deterministic phantom for `spec` (all randomness comes from `spec.seed`).
pub fn generate(spec: &PhantomSpec) -> Result<VolumeRecord> {
    Ok(generate_with_centerlines(spec)?.0)
}

/// Like [`generate`], also returning every centerline sample (voxel units).
pub fn generate_with_centerlines(spec: &PhantomSpec) -> Result<(VolumeRecord, Vec<[f64; 3]>)> {
    spec.validate()?;
    let mut centerline = Vec::new();
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vessel = BinaryMask3::zeros(dims, spec.spacing);
    let mut myo = BinaryMask3::zeros(dims, spec.spacing);
    let mut cavity = BinaryMask3::zeros(dims, spec.spacing);
    let mut decoy = BinaryMask3::zeros(dims, spec.spacing);

    match &spec.layout {
        Layout::StraightTube { center, radius } => {
            let a = Node {
                p: [center[0], center[1], -1.0],
                r: *radius,
            };
            let b = Node {
                p: [center[0], center[1], dims[2] as f64],
                r: *radius,
            };
            rasterize_segment(&mut vessel, a, b);
            centerline.extend((0..dims[2]).map(|x| [center[0], center[1], x as f64]));
        }
        Layout::Tree => {
            let shell = jittered_shell(spec, &mut rng);
            myo = BinaryMask3::from_fn(dims, spec.spacing, |[z, y, x]| shell.in_wall([z as f64, y as f64, x as f64]));
            cavity = BinaryMask3::from_fn(dims, spec.spacing, |[z, y, x]| shell.in_cavity([z as f64, y as f64, x as f64]));
            let walker = Walker {
                shell: &shell,
                spec,
                mean_radius: shell.radii.iter().sum::<f64>() / 3.0 + spec.radius_range[1],
            };
            let mut paths = Vec::new();
            let [lo, hi] = spec.polar_band;
            for k in 0..spec.branches {
                let phi = 2.0 * PI * (k as f64 + rng.random_range(0.0..0.6)) / spec.branches as f64;
                let theta = lo + (hi - lo) * rng.random_range(0.05..0.3);
                let psi = rng.random_range(-0.4..0.4);
                walker.tree(&mut rng, (theta, phi, psi), spec.length, spec.radius_range[1], 0, &mut paths);
            }
            for path in &paths {
                centerline.extend(path.iter().map(|n| n.p));
                for pair in path.windows(2) {
                    rasterize_segment(&mut vessel, pair[0], pair[1]);
                }
            }
            // Tubes sit outside the wall; strip any rasterization overlap.
            let data: Vec<u8> = vessel.data().iter().zip(myo.data()).map(|(&v, &m)| v & (1 - m)).collect();
            vessel = BinaryMask3::new(dims, spec.spacing, data)?;
            decoy = distractors(spec, &shell, &mut rng)?;
        }
    }

    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let n: usize = dims.iter().product();
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let base = if vessel.data()[i] != 0 || decoy.data()[i] != 0 {
            spec.mu_vessel
        } else if myo.data()[i] != 0 {
            spec.mu_myo
        } else if cavity.data()[i] != 0 {
            spec.mu_cavity
        } else {
            spec.mu_background
        };
        let eps = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        values.push((base + eps) as f32);
    }
    let [d, h, w] = dims;
    let rec = VolumeRecord {
        id: format!("phantom-{:016x}", spec.seed),
        intensity: Tensor::new(&[1, 1, d, h, w], values)?,
        vessel,
        myo,
        spacing: spec.spacing,
    };
    Ok((rec, centerline))
}

/// `(train, val, test)` sizes: 10% and 20% rounded down, remainder to train.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 5;
    (n - val - test, val, test)
}

/// Split of case `i` out of `n`: train cases first, then val, then test.
pub fn split_of(i: usize, n: usize) -> Split {
    let (train, val, _) = split_sizes(n);
    if i < train {
        Split::Train
    } else if i < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

/// SplitMix64 finalizer; derives independent per-case seeds.
pub fn case_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` phantoms from `template` with per-index seeds and a 7:1:2 split.
pub fn make_dataset(n: usize, template: &PhantomSpec, base_seed: u64) -> Result<Vec<(VolumeRecord, Split)>> {
    if n < 10 {
        return Err(Error::Config(format!("a dataset needs at least 10 cases for a 7:1:2 split, got {n}")));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let spec = PhantomSpec {
                seed: case_seed(base_seed, i),
                ..template.clone()
            };
            let mut rec = generate(&spec)?;
            rec.id = format!("case{i:03}");
            Ok((rec, split_of(i, n)))
        })
        .collect()
}
