//! `coroseg` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use clap::{Args, Parser, Subcommand, ValueEnum};
use coroseg::anatomy::{build_prior, DEFAULT_PRIOR_RADIUS};
use coroseg::io::{self, ReportRow, RunMetadata, Volume};
use coroseg::nn::{checkpoint, Variant};
use coroseg::phantom::{case_seed, make_dataset, PhantomSpec, Split};
use coroseg::tensor::{Dims3, Tensor};
use coroseg::train::metrics::{mean_metrics, metrics};
use coroseg::train::{self as tr, Case, TrainConfig};
use coroseg::wavelet::{dwt3, iwt3, FilterPair};
use coroseg::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const THREADS_ENV: &str = "COROSEG_THREADS";
const ROUND_TRIP_TOLERANCE: f64 = 1e-6;
const ENERGY_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "coroseg", version, about = "Anatomy-guided wavelet U-Net for coronary segmentation")]
struct Cli {
    /// Worker threads; defaults to $COROSEG_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a 7:1:2 split.
    PhantomGen(PhantomGenArgs),
    /// Train on a manifest; writes the best checkpoint and history.
    Train(TrainArgs),
    /// Sliding-window inference on one volume; writes a u8 mask.
    Predict(PredictArgs),
    /// Compare a predicted mask with the truth.
    Eval(EvalArgs),
    /// Train and test the six ablation variants.
    Ablate(AblateArgs),
    /// Wavelet round-trip check on a random volume.
    WaveletCheck(WaveletCheckArgs),
}

fn parse_dims(s: &str) -> std::result::Result<Dims3, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts.as_slice() {
        [n] => Ok([*n; 3]),
        [d, h, w] => Ok([*d, *h, *w]),
        _ => Err("expected N or D,H,W".into()),
    }
}

#[derive(Args)]
struct PhantomGenArgs {
    /// Number of cases.
    #[arg(long)]
    n: usize,
    /// Volume size, `N` or `D,H,W`; each must be a multiple of 16.
    #[arg(long, value_parser = parse_dims, default_value = "48")]
    dims: Dims3,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Baseline,
    E1,
    E2,
    E3,
    E4,
    Full,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::E1 => Variant::E1,
            VariantArg::E2 => Variant::E2,
            VariantArg::E3 => Variant::E3,
            VariantArg::E4 => Variant::E4,
            VariantArg::Full => Variant::Full,
        }
    }
}

/// Flags that override the config file.
#[derive(Args)]
struct TrainOverrides {
    /// Training config JSON; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_parser = parse_dims)]
    patch: Option<Dims3>,
    #[arg(long)]
    overlap: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    prior_radius: Option<usize>,
    /// Sets all four module toggles to an ablation row.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident).+ = $value:expr) => {
                if let Some(v) = $value {
                    cfg.$($field).+ = v;
                }
            };
        }
        set!(seed = self.seed);
        set!(epochs = self.epochs);
        set!(patience = self.patience);
        set!(optimizer.lr = self.lr);
        set!(patch = self.patch);
        set!(overlap = self.overlap);
        set!(batch_size = self.batch_size);
        set!(network.base_width = self.base_width);
        set!(network.scales = self.scales);
        set!(prior_radius = self.prior_radius);
        if let Some(v) = self.variant {
            cfg.network = cfg.network.with_variant(v.into());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOverrides,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOverrides,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Intensity volume (f32 SVOL).
    #[arg(long)]
    volume: PathBuf,
    /// Myocardium mask (u8 SVOL); required when the prior encoder is on.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PRIOR_RADIUS)]
    prior_radius: usize,
    #[arg(long, value_parser = parse_dims, default_value = "32")]
    patch: Dims3,
    #[arg(long, default_value_t = 8)]
    overlap: usize,
    /// Output mask (u8 SVOL).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Also write `<out>.csv` and `<out>.json` reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WaveletCheckArgs {
    #[arg(long, value_parser = parse_dims, default_value = "16")]
    dims: Dims3,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Schema { .. } | Error::Dimension { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads.filter(|&n| n > 0) {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::PhantomGen(a) => phantom_gen(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::WaveletCheck(a) => wavelet_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn print_resolved(config: &impl serde::Serialize, seed: u64) -> Result<()> {
    println!("config: {}", serde_json::to_string(config)?);
    println!("seed: {seed}");
    Ok(())
}

fn phantom_gen(a: PhantomGenArgs) -> Result<()> {
    if a.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let spec = PhantomSpec::for_dims(a.dims, a.seed);
    spec.validate()?;
    let resolved = serde_json::json!({ "n": a.n, "dims": a.dims, "phantom": spec });
    print_resolved(&resolved, a.seed)?;
    let data = make_dataset(a.n, &spec, a.seed)?;
    let seeds: Vec<u64> = (0..a.n).map(|i| case_seed(a.seed, i)).collect();
    io::write_dataset(&a.out, &data, &seeds)?;
    RunMetadata::new("phantom-gen", a.seed, None, &resolved)?.save(a.out.join("run_metadata.json"))?;
    let count = |s: Split| data.iter().filter(|(_, x)| *x == s).count();
    println!(
        "wrote {} cases to {} (train {}, val {}, test {})",
        a.n,
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

struct Splits {
    train: Vec<Case>,
    val: Vec<Case>,
    test: Vec<Case>,
}

/// Loads every case and checks its shape against the config before any
/// training starts.
fn load_splits(manifest: &Path, cfg: &TrainConfig) -> Result<Splits> {
    let records = io::load_manifest(manifest)?.load_records()?;
    let mut s = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (rec, split) in &records {
        let dims = rec.vessel.dims();
        cfg.network
            .check_dims(dims)
            .and_then(|_| cfg.check_volume(dims))
            .map_err(|e| Error::Config(format!("case {}: {e}", rec.id)))?;
        let case = Case::from_record(rec, cfg.prior_radius)?;
        match split {
            Split::Train => s.train.push(case),
            Split::Val => s.val.push(case),
            Split::Test => s.test.push(case),
        }
    }
    Ok(s)
}

fn report_line(r: &tr::EpochRecord) {
    eprintln!(
        "epoch {:>3}  lr {:.6}  loss {:.5}  val_dsc {:.4}",
        r.epoch, r.lr, r.train_loss, r.val_dsc
    );
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.opts.resolve()?;
    print_resolved(&cfg, cfg.seed)?;
    let data = load_splits(&a.data, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let out = tr::train(&cfg, &data.train, &data.val, report_line)?;
    checkpoint::save(a.out.join("checkpoint.ckpt"), &out.best)?;
    std::fs::write(a.out.join("history.csv"), io::history_csv(&out.history)?)?;
    RunMetadata::new("train", cfg.seed, cfg.network.variant(), &cfg)?.save(a.out.join("run_metadata.json"))?;
    println!("variant: {}", cfg.network.variant_name());
    println!("best epoch {} of {}", out.best_epoch, out.history.len());
    if !data.test.is_empty() {
        let m = mean_metrics(&tr::evaluate(&out.best, &data.test, &cfg)?);
        io::save_report(a.out.join("test_report"), &[ReportRow::new(cfg.network.variant_name(), &m)])?;
        println!("test: {}", serde_json::to_string(&m)?);
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.opts.resolve()?;
    print_resolved(&cfg, cfg.seed)?;
    let data = load_splits(&a.data, &cfg)?;
    if data.test.is_empty() {
        return Err(Error::Config("the manifest has no test cases".into()));
    }
    std::fs::create_dir_all(&a.out)?;
    let rows = tr::ablate(&cfg, &Variant::ALL, &data.train, &data.val, &data.test, |v, r| {
        eprint!("[{v}] ");
        report_line(r);
    })?;
    std::fs::write(a.out.join("ablation.csv"), io::ablation_csv(&rows)?)?;
    let report: Vec<ReportRow> = rows.iter().map(|r| ReportRow::new(r.variant.name(), &r.metrics)).collect();
    io::save_report(a.out.join("report"), &report)?;
    RunMetadata::new("ablate", cfg.seed, cfg.network.variant(), &cfg)?.save(a.out.join("run_metadata.json"))?;
    print!("{}", io::ablation_csv(&rows)?);
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let net = checkpoint::load(&a.checkpoint)?;
    let vol = io::read_volume(&a.volume)?;
    let resolved = serde_json::json!({
        "network": net.config,
        "patch": a.patch,
        "overlap": a.overlap,
        "prior_radius": a.prior_radius,
    });
    print_resolved(&resolved, net.seed)?;
    let image = tr::normalize(&vol.to_tensor());
    let patch = [0, 1, 2].map(|i| a.patch[i].min(vol.dims[i]));
    net.config.check_dims(vol.dims)?;
    net.config.check_dims(patch)?;
    let prior = match (&a.prior, net.config.use_mpe) {
        (Some(p), true) => {
            let myo = io::read_volume(p)?.to_mask()?;
            if myo.dims() != vol.dims {
                return Err(Error::dim(
                    "predict",
                    format!("prior {:?} does not match volume {:?}", myo.dims(), vol.dims),
                ));
            }
            Some(build_prior(&myo, a.prior_radius).to_tensor())
        }
        (None, true) => return Err(Error::Usage("this checkpoint uses the prior encoder; pass --prior".into())),
        (_, false) => None,
    };
    let logits = tr::predict(&net, &image, prior.as_ref(), patch, a.overlap)?;
    let mask = tr::binarize(&logits, vol.spacing)?;
    io::write_volume(&a.out, &Volume::from_mask(&mask))?;
    println!("wrote {:?} mask with {} foreground voxels to {}", mask.dims(), mask.count(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = io::read_volume(&a.pred)?.to_mask()?;
    let truth = io::read_volume(&a.truth)?.to_mask()?;
    let m = metrics(&pred, &truth)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    if let Some(out) = a.out {
        io::save_report(out, &[ReportRow::new("prediction", &m)])?;
    }
    Ok(())
}

fn wavelet_check(a: WaveletCheckArgs) -> Result<()> {
    print_resolved(
        &serde_json::json!({ "dims": a.dims, "batch": a.batch, "channels": a.channels }),
        a.seed,
    )?;
    let [d, h, w] = a.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let x = Tensor::from_fn(&[a.batch, a.channels, d, h, w], |_| rng.random_range(-1.0..1.0));
    let f = FilterPair::haar();
    let s = dwt3(&x, &f)?;
    let back = iwt3(&s, &f)?;
    let err = back.max_abs_diff(&x) as f64;
    let energy = |t: &Tensor| t.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>();
    let rel = (energy(&s) - energy(&x)).abs() / energy(&x).max(f64::MIN_POSITIVE);
    println!("max_abs_error {err:.3e}");
    println!("energy_rel_error {rel:.3e}");
    if err > ROUND_TRIP_TOLERANCE {
        return Err(Error::Validation(format!(
            "round-trip error {err:.3e} exceeds {ROUND_TRIP_TOLERANCE:e}"
        )));
    }
    if rel > ENERGY_TOLERANCE {
        return Err(Error::Validation(format!(
            "relative energy change {rel:.3e} exceeds {ENERGY_TOLERANCE:e}"
        )));
    }
    Ok(())
}
