//! Scenario runner and CLI: dataset generation, the two training stages,
//! single reconstructions, the three benchmark scenarios (noise-free, 5%
//! noise, adversarial disc), and the noise-scaling convergence study.

use clap::{Args, Parser, Subcommand};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

use crate::grid::{
    l2_norm, psnr, read_image, read_sinogram, write_image, write_pgm, Grid, GridError, Image,
    Sinogram,
};
use crate::net::io::{load_adapter, load_autoencoder, save_adapter, save_autoencoder};
use crate::net::{Model, NetError, TrainedModel};
use crate::phantoms::{
    add_disc, add_noise, derive_seed, random_phantom, DatasetCounts, PhantomError,
    DEFAULT_DISC_CENTER, DEFAULT_DISC_INTENSITY, DEFAULT_DISC_RADIUS,
};
use crate::regularizer::{bregman_distance, reg_value, RegError, RegParams};
use crate::solver::{
    admm_solve, write_solver_log, IdentityOp, RadonOp, SolveError, SolverConfig,
};
use crate::tomo::{default_detectors, fbp, radon_forward, FbpFilter, Geometry, TomoError};
use crate::training::{
    make_adapter_dataset, train_adapter, train_autoencoder, write_train_log, TrainConfig,
    TrainError,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Tomo(#[from] TomoError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Reg(#[from] RegError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Msg(String),
}

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioTag {
    NoiseFree,
    Noisy5Pct,
    Adversarial,
}

impl ScenarioTag {
    pub fn default_solver(self) -> SolverConfig {
        match self {
            ScenarioTag::NoiseFree => SolverConfig::noise_free(),
            ScenarioTag::Noisy5Pct => SolverConfig::noisy_5pct(),
            ScenarioTag::Adversarial => SolverConfig::adversarial(),
        }
    }

    pub fn noise_level(self) -> f64 {
        match self {
            ScenarioTag::Noisy5Pct => 0.05,
            _ => 0.0,
        }
    }
}

impl FromStr for ScenarioTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "noise-free" => Ok(ScenarioTag::NoiseFree),
            "noisy-5pct" => Ok(ScenarioTag::Noisy5Pct),
            "adversarial" => Ok(ScenarioTag::Adversarial),
            other => Err(format!(
                "unknown scenario '{other}' (expected noise-free, noisy-5pct or adversarial)"
            )),
        }
    }
}

impl fmt::Display for ScenarioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioTag::NoiseFree => "noise-free",
            ScenarioTag::Noisy5Pct => "noisy-5pct",
            ScenarioTag::Adversarial => "adversarial",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub tag: ScenarioTag,
    pub side: usize,
    pub n_angles: usize,
    pub n_phantoms: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    pub output_dir: PathBuf,
}

impl ScenarioConfig {
    pub fn new(tag: ScenarioTag, output_dir: PathBuf) -> Self {
        ScenarioConfig {
            tag,
            side: 128,
            n_angles: 60,
            n_phantoms: 20,
            seed: 0,
            solver: tag.default_solver(),
            output_dir,
        }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.n_angles, default_detectors(self.side), self.side)
            .expect("valid scenario geometry")
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Interior pixels whose full 3x3 neighborhood in the true image is constant.
pub fn flat_mask(truth: &Image) -> Vec<bool> {
    let n = truth.side();
    let mut mask = vec![false; n * n];
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let v = truth.at(i, j);
            let mut flat = true;
            'scan: for di in 0..3 {
                for dj in 0..3 {
                    if truth.at(i + di - 1, j + dj - 1) != v {
                        flat = false;
                        break 'scan;
                    }
                }
            }
            mask[i * n + j] = flat;
        }
    }
    mask
}

pub fn disc_mask(img: &Image, center: (f64, f64), radius: f64) -> Vec<bool> {
    let n = img.side();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = img.pixel_center(i, j);
            mask[i * n + j] = (x - center.0).powi(2) + (y - center.1).powi(2) <= radius * radius;
        }
    }
    mask
}

pub fn masked_variance(u: &Image, mask: &[bool]) -> f64 {
    let vals: Vec<f64> = u
        .values()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        return 0.0;
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64
}

pub fn masked_psnr(u: &Image, truth: &Image, mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&a, &b), &m) in u.values().iter().zip(truth.values()).zip(mask) {
        if m {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    if count == 0 || sum == 0.0 {
        return crate::grid::PSNR_CAP_DB;
    }
    (10.0 * (1.0f64 / (sum / count as f64)).log10()).min(crate::grid::PSNR_CAP_DB)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRow {
    pub phantom: usize,
    pub method: &'static str,
    pub psnr: f64,
    pub data_residual: f64,
    pub reg_value: f64,
    pub flat_variance: Option<f64>,
    pub disc_psnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioReport {
    pub rows: Vec<MethodRow>,
    pub failures: Vec<(usize, String)>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6e}"),
        None => "-".into(),
    }
}

pub fn write_report(report: &ScenarioReport, path: &Path) -> Result<(), ExpError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "# phantom method psnr data_residual reg_value flat_variance disc_psnr"
    )?;
    for r in &report.rows {
        writeln!(
            f,
            "{} {} {:.6e} {:.6e} {:.6e} {} {}",
            r.phantom,
            r.method,
            r.psnr,
            r.data_residual,
            r.reg_value,
            fmt_opt(r.flat_variance),
            fmt_opt(r.disc_psnr)
        )?;
    }
    for (i, msg) in &report.failures {
        writeln!(f, "# failed phantom {i}: {msg}")?;
    }
    Ok(())
}

fn map_indexed<T: Send, F: Fn(usize) -> T + Sync + Send>(count: usize, f: F) -> Vec<T> {
    #[cfg(feature = "parallel")]
    return (0..count).into_par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    (0..count).map(f).collect()
}

// phantom stream tags (streams 0..2 are the make-data splits)
const STREAM_SCENARIO: u64 = 2; // reuse of the test split stream
const STREAM_NOISE: u64 = 3;
const STREAM_CONV_PHANTOM: u64 = 7;
const STREAM_CONV_NOISE: u64 = 8;

/// Per-phantom pipeline: simulate data per the scenario tag, reconstruct
/// with FBP, post-processing (N applied to FBP) and the variational solver,
/// write every image, and collect the metric rows. Solver failures are
/// recorded per phantom; the run continues.
pub fn run_scenario(cfg: &ScenarioConfig, model: &TrainedModel) -> Result<ScenarioReport, ExpError> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let geometry = cfg.geometry();
    let reg = RegParams::l1(cfg.solver.c, model.ae.desc.level_weights())
        .map_err(|e| ExpError::Msg(e.to_string()))?;
    let op = RadonOp(geometry);

    type PhantomOutput = (Vec<MethodRow>, Vec<(String, Image)>, String);
    let results: Vec<Result<PhantomOutput, String>> = map_indexed(cfg.n_phantoms, |i| {
        let run = || -> Result<PhantomOutput, ExpError> {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SCENARIO, i as u64));
            let mut truth = random_phantom(&mut rng, cfg.side, (3, 12));
            if cfg.tag == ScenarioTag::Adversarial {
                truth = add_disc(
                    &truth,
                    DEFAULT_DISC_CENTER,
                    DEFAULT_DISC_RADIUS,
                    DEFAULT_DISC_INTENSITY,
                )?;
            }
            let y_clean = radon_forward(&truth, &op.0)?;
            let level = cfg.tag.noise_level();
            let y = if level > 0.0 {
                let mut nrng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_NOISE, i as u64));
                add_noise(&y_clean, level, &mut nrng)
            } else {
                y_clean
            };
            let u_fbp = fbp(&y, &op.0, FbpFilter::RamLak)?;
            let u_post = model.apply(&u_fbp);
            let (u_anett, diag) = admm_solve(&y, &op, model, &cfg.solver)?;

            let flat = flat_mask(&truth);
            let disc = disc_mask(&truth, DEFAULT_DISC_CENTER, DEFAULT_DISC_RADIUS);
            let mut rows = Vec::with_capacity(3);
            for (method, u) in [("fbp", &u_fbp), ("post", &u_post), ("anett", &u_anett)] {
                let ku = radon_forward(u, &op.0)?;
                let data_residual = ku
                    .values()
                    .iter()
                    .zip(y.values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                rows.push(MethodRow {
                    phantom: i,
                    method,
                    psnr: psnr(u, &truth, 1.0)?,
                    data_residual,
                    reg_value: reg_value(u, model, &reg)?,
                    flat_variance: (cfg.tag == ScenarioTag::Noisy5Pct)
                        .then(|| masked_variance(u, &flat)),
                    disc_psnr: (cfg.tag == ScenarioTag::Adversarial)
                        .then(|| masked_psnr(u, &truth, &disc)),
                });
            }
            let images = vec![
                (format!("{i:03}_truth.grd"), truth),
                (format!("{i:03}_fbp.grd"), u_fbp),
                (format!("{i:03}_post.grd"), u_post),
                (format!("{i:03}_anett.grd"), u_anett),
            ];
            let mut log = String::new();
            log.push_str("# iter objective data_residual primal_residual\n");
            for r in &diag.records {
                log.push_str(&format!(
                    "{} {:.6e} {:.6e} {:.6e}\n",
                    r.iter, r.objective, r.data_residual, r.primal_residual
                ));
            }
            Ok((rows, images, log))
        };
        run().map_err(|e| e.to_string())
    });

    let mut report = ScenarioReport::default();
    for (i, result) in results.into_iter().enumerate() {
        match result {
            Ok((rows, images, log)) => {
                report.rows.extend(rows);
                for (name, img) in &images {
                    write_image(img, &cfg.output_dir.join(name))?;
                }
                if let Some((name, img)) = images.last() {
                    write_pgm(img, 1.0, &cfg.output_dir.join(name.replace(".grd", ".pgm")))?;
                }
                std::fs::write(cfg.output_dir.join(format!("{i:03}_solve.txt")), log)?;
            }
            Err(msg) => report.failures.push((i, msg)),
        }
    }
    write_report(&report, &cfg.output_dir.join("report.txt"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Convergence study
// ---------------------------------------------------------------------------

/// alpha_k = RATE_TAU * delta_k; at delta_0 = 0.05 this reproduces the 5%
/// noise setting alpha = 5e-4.
pub const RATE_TAU: f64 = 1e-2;
pub const RATE_DELTA0: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub k: usize,
    pub delta: f64,
    pub alpha: f64,
    pub norm_dist: f64,
    pub bregman: f64,
    pub data_residual: f64,
    pub fbp_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    /// Exact-data leg solved at the smallest alpha.
    pub zero_leg: RateRow,
    pub slope: f64,
}

/// Least-squares slope of ln(y) against ln(x).
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

pub fn write_rate_report(report: &RateReport, path: &Path) -> Result<(), ExpError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "# k delta alpha norm_dist bregman data_residual fbp_residual"
    )?;
    for r in report.rows.iter().chain(std::iter::once(&report.zero_leg)) {
        writeln!(
            f,
            "{} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e}",
            r.k, r.delta, r.alpha, r.norm_dist, r.bregman, r.data_residual, r.fbp_residual
        )?;
    }
    writeln!(f, "# loglog slope {:.6e}", report.slope)?;
    Ok(())
}

/// Solves the same exact-data phantom at noise levels delta_k = delta0 *
/// 2^{-k} with alpha_k = tau * delta_k, records the distance to the true
/// image and the smoothed Bregman distance, and fits the log-log rate.
pub fn convergence_study(
    cfg: &ScenarioConfig,
    model: &TrainedModel,
    legs: usize,
) -> Result<RateReport, ExpError> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let geometry = cfg.geometry();
    let op = RadonOp(geometry);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_CONV_PHANTOM, 0));
    let u_plus = random_phantom(&mut rng, cfg.side, (3, 12));
    let y = radon_forward(&u_plus, &op.0)?;
    let reg = {
        let mut p = RegParams::l1(cfg.solver.c, model.ae.desc.level_weights())
            .map_err(|e| ExpError::Msg(e.to_string()))?;
        p.eps_s = crate::regularizer::DEFAULT_BREGMAN_SMOOTHING;
        p
    };

    let solve_leg = |k: usize, delta: f64| -> Result<RateRow, ExpError> {
        let y_k = if delta > 0.0 {
            let mut nrng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_CONV_NOISE, k as u64));
            add_noise(&y, delta, &mut nrng)
        } else {
            y.clone()
        };
        let alpha = RATE_TAU * delta.max(RATE_DELTA0 * 0.5f64.powi(legs as i32 - 1));
        let mut solver = cfg.solver.clone();
        solver.alpha = alpha;
        let (u_k, diag) = admm_solve(&y_k, &op, model, &solver)?;
        let diff = Image::same_shape(
            &u_k,
            u_k.values()
                .iter()
                .zip(u_plus.values())
                .map(|(a, b)| a - b)
                .collect(),
        );
        let u_fbp = fbp(&y_k, &op.0, FbpFilter::RamLak)?;
        let k_fbp = radon_forward(&u_fbp, &op.0)?;
        let fbp_residual = k_fbp
            .values()
            .iter()
            .zip(y_k.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(RateRow {
            k,
            delta,
            alpha,
            norm_dist: l2_norm(&diff),
            bregman: bregman_distance(&u_k, &u_plus, model, &reg)
                .map_err(|e| ExpError::Msg(e.to_string()))?,
            data_residual: diag.records.last().map(|r| r.data_residual).unwrap_or(0.0),
            fbp_residual,
        })
    };

    let deltas: Vec<f64> = (0..legs).map(|k| RATE_DELTA0 * 0.5f64.powi(k as i32)).collect();
    let leg_results = map_indexed(legs, |k| solve_leg(k, deltas[k]).map_err(|e| e.to_string()));
    let mut rows = Vec::with_capacity(legs);
    for r in leg_results {
        rows.push(r.map_err(ExpError::Msg)?);
    }
    let zero_leg = solve_leg(legs, 0.0)?;
    let slope = fit_loglog_slope(
        &rows.iter().map(|r| r.delta).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.bregman).collect::<Vec<_>>(),
    );
    let report = RateReport {
        rows,
        zero_leg,
        slope,
    };
    write_rate_report(&report, &cfg.output_dir.join("rates.txt"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

/// Writes one .grd per phantom plus manifest.txt with lines
/// "split index seed filename".
pub fn write_dataset(
    dir: &Path,
    master_seed: u64,
    counts: DatasetCounts,
    side: usize,
) -> Result<(), ExpError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (stream, (split, count)) in [
        ("train", counts.train),
        ("val", counts.val),
        ("test", counts.test),
    ]
    .iter()
    .enumerate()
    {
        let images = map_indexed(*count, |i| {
            let seed = derive_seed(master_seed, stream as u64, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (seed, random_phantom(&mut rng, side, (3, 12)))
        });
        for (i, (seed, img)) in images.iter().enumerate() {
            let name = format!("{split}_{i:04}.grd");
            write_image(img, &dir.join(&name))?;
            manifest.push_str(&format!("{split} {i} {seed} {name}\n"));
        }
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Loads every image of one split, ordered by index.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Image>, ExpError> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| ExpError::Msg(format!("cannot read manifest in {}: {e}", dir.display())))?;
    let mut entries: Vec<(usize, String)> = Vec::new();
    for line in manifest.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(ExpError::Msg(format!("malformed manifest line: {line}")));
        }
        if fields[0] == split {
            let idx: usize = fields[1]
                .parse()
                .map_err(|_| ExpError::Msg(format!("bad index in manifest line: {line}")))?;
            entries.push((idx, fields[3].to_string()));
        }
    }
    entries.sort();
    entries
        .into_iter()
        .map(|(_, name)| Ok(read_image(&dir.join(name))?))
        .collect()
}

fn load_model(ae_path: &Path, adapter_path: Option<&Path>) -> Result<TrainedModel, ExpError> {
    if !ae_path.exists() {
        return Err(ExpError::Msg(format!(
            "model file not found: {}",
            ae_path.display()
        )));
    }
    let (ae, _) = load_autoencoder(ae_path)?;
    let adapter = match adapter_path {
        Some(p) => {
            if !p.exists() {
                return Err(ExpError::Msg(format!("model file not found: {}", p.display())));
            }
            Some(load_adapter(p)?.0)
        }
        None => None,
    };
    Ok(TrainedModel { ae, adapter })
}

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "anett",
    about = "Sparse-view CT reconstruction with a learned sparse autoencoder regularizer",
    version,
    subcommand_required = true,
    arg_required_else_help = true,
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the phantom datasets (.grd files plus manifest.txt)
    MakeData(MakeDataArgs),
    /// Train the sparse denoising autoencoder
    TrainAe(TrainAeArgs),
    /// Train the operator-adaptation network on top of a frozen autoencoder
    TrainAdapter(TrainAdapterArgs),
    /// Reconstruct a single sinogram
    Reconstruct(ReconstructArgs),
    /// Run a full scenario over many phantoms and write the metric table
    Benchmark(BenchmarkArgs),
    /// Noise-scaling study of reconstruction error and Bregman distance
    ConvergenceStudy(ConvergenceArgs),
    /// Print a summary of a .grd or parameter file
    Inspect(InspectArgs),
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long, default_value = "data", env = "ANETT_OUTPUT_DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 400)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 50)]
    test: usize,
    #[arg(long, default_value_t = 128)]
    side: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainAeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "autoencoder.anp")]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    eta: f64,
    #[arg(long, default_value_t = 1e-5)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainAdapterArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ae: PathBuf,
    #[arg(long, default_value = "adapter.anp")]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    angles: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone, Copy)]
struct SolverOverrides {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    outer: Option<usize>,
    #[arg(long)]
    inner: Option<usize>,
    #[arg(long)]
    stepsize: Option<f64>,
}

impl SolverOverrides {
    fn apply(&self, mut base: SolverConfig) -> SolverConfig {
        if let Some(v) = self.alpha {
            base.alpha = v;
        }
        if let Some(v) = self.c {
            base.c = v;
        }
        if let Some(v) = self.rho {
            base.rho = v;
        }
        if let Some(v) = self.outer {
            base.outer = v;
        }
        if let Some(v) = self.inner {
            base.inner = v;
        }
        if let Some(v) = self.stepsize {
            base.stepsize = v;
        }
        base
    }
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    sinogram: PathBuf,
    #[arg(long, default_value = "noise-free")]
    scenario: ScenarioTag,
    #[arg(long)]
    ae: Option<PathBuf>,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long, default_value = "reconstruction.grd")]
    out: PathBuf,
    /// Use the identity operator and identity networks (oracle fixture);
    /// requires a square sinogram and no model files
    #[arg(long, default_value_t = false)]
    identity: bool,
    #[command(flatten)]
    solver: SolverOverrides,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    scenario: ScenarioTag,
    #[arg(long)]
    ae: PathBuf,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long, default_value = "benchmark", env = "ANETT_OUTPUT_DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    phantoms: usize,
    #[arg(long, default_value_t = 128)]
    side: usize,
    #[arg(long, default_value_t = 60)]
    angles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverOverrides,
}

#[derive(Args)]
struct ConvergenceArgs {
    #[arg(long)]
    ae: PathBuf,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long, default_value = "convergence", env = "ANETT_OUTPUT_DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    side: usize,
    #[arg(long, default_value_t = 60)]
    angles: usize,
    #[arg(long, default_value_t = 6)]
    legs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverOverrides,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

/// Expands `--config file` into the flags listed in the file (one key=value
/// per line, '#' comments). The expansion is inserted directly after the
/// subcommand so explicit command-line flags take precedence.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>, String> {
    let pos = match argv.iter().position(|a| a == "--config") {
        Some(p) => p,
        None => return Ok(argv),
    };
    let path = argv
        .get(pos + 1)
        .ok_or("--config requires a file path".to_string())?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config file {path}: {e}"))?;
    let mut flags = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(format!("malformed config line (want key=value): {line}"))?;
        flags.push(format!("--{}", key.trim()));
        flags.push(value.trim().to_string());
    }
    let mut out: Vec<String> = Vec::with_capacity(argv.len() + flags.len());
    // [program, subcommand] + config flags + remaining user flags
    let mut rest: Vec<String> = argv;
    rest.remove(pos + 1);
    rest.remove(pos);
    if rest.len() < 2 {
        return Err("--config requires a subcommand".into());
    }
    out.extend(rest.drain(..2));
    out.extend(flags);
    out.extend(rest);
    Ok(out)
}

fn train_cfg(epochs: usize, batch: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: batch,
        lr,
        seed,
        ..TrainConfig::default()
    }
}

fn run_cmd(cmd: Cmd) -> Result<(), ExpError> {
    match cmd {
        Cmd::MakeData(a) => {
            let counts = DatasetCounts {
                train: a.train,
                val: a.val,
                test: a.test,
            };
            write_dataset(&a.out, a.seed, counts, a.side)?;
            println!(
                "wrote {} phantoms to {}",
                counts.train + counts.val + counts.test,
                a.out.display()
            );
        }
        Cmd::TrainAe(a) => {
            let train = load_split(&a.data, "train")?;
            let val = load_split(&a.data, "val")?;
            let mut cfg = train_cfg(a.epochs, a.batch, a.lr, a.seed);
            cfg.eta = a.eta;
            cfg.beta = a.beta;
            let (ae, report) = train_autoencoder(&train, &val, &cfg)?;
            save_autoencoder(&ae, a.seed, &a.out)?;
            write_train_log(&report, &a.out.with_extension("log"))?;
            println!(
                "autoencoder saved to {} (best epoch {}, val loss {:.6e})",
                a.out.display(),
                report.best_epoch,
                report.best_val_loss
            );
        }
        Cmd::TrainAdapter(a) => {
            let (ae, _) = load_autoencoder(&a.ae)?;
            let train = load_split(&a.data, "train")?;
            let val = load_split(&a.data, "val")?;
            let g = Geometry::new(a.angles, default_detectors(train[0].side()), train[0].side())?;
            let pairs = make_adapter_dataset(&train, &g)?;
            let val_pairs = make_adapter_dataset(&val, &g)?;
            let mut cfg = train_cfg(a.epochs, a.batch, a.lr, a.seed);
            cfg.gamma = a.gamma;
            let (ad, report) = train_adapter(&pairs, &val_pairs, &ae, &cfg)?;
            save_adapter(&ad, a.seed, &a.out)?;
            write_train_log(&report, &a.out.with_extension("log"))?;
            println!(
                "adapter saved to {} (best epoch {}, val loss {:.6e})",
                a.out.display(),
                report.best_epoch,
                report.best_val_loss
            );
        }
        Cmd::Reconstruct(a) => {
            let y = read_sinogram(&a.sinogram)?;
            let cfg = a.solver.apply(a.scenario.default_solver());
            let (u, diag) = if a.identity {
                let (na, nd) = y.shape();
                if na != nd {
                    return Err(ExpError::Msg(format!(
                        "identity fixture needs a square sinogram, got {na}x{nd}"
                    )));
                }
                admm_solve(&y, &IdentityOp { side: na }, &crate::net::IdentityModel, &cfg)?
            } else {
                let ae_path = a.ae.as_deref().ok_or(ExpError::Msg(
                    "reconstruct requires --ae (or --identity)".into(),
                ))?;
                let model = load_model(ae_path, a.adapter.as_deref())?;
                let side = model_image_side(&y)?;
                let g = Geometry::new(y.shape().0, y.shape().1, side)?;
                admm_solve(&y, &RadonOp(g), &model, &cfg)?
            };
            write_image(&u, &a.out)?;
            write_solver_log(&diag, &a.out.with_extension("txt"))?;
            println!("reconstruction written to {}", a.out.display());
        }
        Cmd::Benchmark(a) => {
            let model = load_model(&a.ae, a.adapter.as_deref())?;
            let mut cfg = ScenarioConfig::new(a.scenario, a.out.clone());
            cfg.side = a.side;
            cfg.n_angles = a.angles;
            cfg.n_phantoms = a.phantoms;
            cfg.seed = a.seed;
            cfg.solver = a.solver.apply(a.scenario.default_solver());
            let report = run_scenario(&cfg, &model)?;
            println!(
                "{} rows, {} failures; report at {}",
                report.rows.len(),
                report.failures.len(),
                a.out.join("report.txt").display()
            );
        }
        Cmd::ConvergenceStudy(a) => {
            let model = load_model(&a.ae, a.adapter.as_deref())?;
            let mut cfg = ScenarioConfig::new(ScenarioTag::Noisy5Pct, a.out.clone());
            cfg.side = a.side;
            cfg.n_angles = a.angles;
            cfg.seed = a.seed;
            cfg.solver = a.solver.apply(SolverConfig::noisy_5pct());
            let report = convergence_study(&cfg, &model, a.legs)?;
            println!(
                "loglog slope {:.4}; report at {}",
                report.slope,
                a.out.join("rates.txt").display()
            );
        }
        Cmd::Inspect(a) => {
            println!("{}", inspect(&a.path)?);
        }
    }
    Ok(())
}

/// Image side implied by the sinogram detector count (detectors =
/// ceil(1.5 n), inverted here).
fn model_image_side(y: &Sinogram) -> Result<usize, ExpError> {
    let nd = y.n_detectors();
    let side = (nd as f64 / 1.5).floor() as usize;
    for cand in [side, side.saturating_sub(1), side + 1] {
        if cand >= 8 && default_detectors(cand) == nd {
            return Ok(cand);
        }
    }
    Err(ExpError::Msg(format!(
        "cannot infer image side from {nd} detectors"
    )))
}

/// One-paragraph summary of a .grd or parameter file.
pub fn inspect(path: &Path) -> Result<String, ExpError> {
    if let Ok((ae, seed)) = load_autoencoder(path) {
        use crate::net::ParamSet;
        return Ok(format!(
            "autoencoder: {} ({} parameters, seed {seed})",
            ae.desc.encode_header(),
            ae.n_params()
        ));
    }
    if let Ok((ad, seed)) = load_adapter(path) {
        use crate::net::ParamSet;
        return Ok(format!(
            "adapter: {} ({} parameters, seed {seed})",
            ad.desc.encode_header(),
            ad.n_params()
        ));
    }
    if let Ok(img) = read_image(path) {
        let n = img.side();
        let min = img.values().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = img
            .values()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        return Ok(format!(
            "image: {n}x{n}, range [{min:.4}, {max:.4}], mean {:.4}",
            crate::grid::mean(&img)
        ));
    }
    let y = read_sinogram(path)?;
    let (na, nd) = y.shape();
    Ok(format!(
        "sinogram: {na} angles x {nd} detectors, mean {:.4}",
        crate::grid::mean(&y)
    ))
}

/// Entry point used by the binary; returns the process exit code.
pub fn cli(argv: Vec<String>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run_cmd(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::write_sinogram;
    use crate::solver::soft_threshold;

    #[test]
    fn scenario_tag_parse_and_defaults() {
        let tag: ScenarioTag = "noise-free".parse().unwrap();
        assert_eq!(tag, ScenarioTag::NoiseFree);
        let s = tag.default_solver();
        assert_eq!((s.alpha, s.c, s.rho), (1e-5, 1e2, 2.0));
        assert_eq!((s.outer, s.inner, s.stepsize), (50, 10, 0.5));
        let s = ScenarioTag::Noisy5Pct.default_solver();
        assert_eq!((s.alpha, s.c, s.outer, s.stepsize), (5e-4, 1e1, 100, 0.1));
        let s = ScenarioTag::Adversarial.default_solver();
        assert_eq!((s.alpha, s.c, s.outer), (1e-5, 1e1, 50));
        assert!("bogus".parse::<ScenarioTag>().is_err());
        assert_eq!(ScenarioTag::Noisy5Pct.to_string(), "noisy-5pct");
    }

    #[test]
    fn flat_mask_of_constant_image_is_all_interior() {
        let img = Image::from_values(8, vec![0.3; 64]).unwrap();
        let mask = flat_mask(&img);
        let count = mask.iter().filter(|&&m| m).count();
        assert_eq!(count, 36); // 6x6 interior
        assert!(masked_variance(&img, &mask).abs() < 1e-30);
    }

    #[test]
    fn flat_mask_excludes_edges_in_truth() {
        let mut img = Image::from_values(8, vec![0.3; 64]).unwrap();
        *img.at_mut(4, 4) = 1.0;
        let mask = flat_mask(&img);
        let n = 8;
        // the 3x3 block around the edit is no longer flat
        for i in 3..=5 {
            for j in 3..=5 {
                assert!(!mask[i * n + j]);
            }
        }
        assert!(mask[1 * n + 1]);
    }

    #[test]
    fn masked_psnr_matches_global_psnr_on_full_mask() {
        let a = Image::from_values(8, (0..64).map(|v| v as f64 / 64.0).collect()).unwrap();
        let b = Image::from_values(8, vec![0.5; 64]).unwrap();
        let mask = vec![true; 64];
        let got = masked_psnr(&a, &b, &mask);
        let want = psnr(&a, &b, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn loglog_slope_recovers_power_law() {
        let xs: Vec<f64> = (1..=6).map(|k| 0.05 * 0.5f64.powi(k)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(1.3)).collect();
        let slope = fit_loglog_slope(&xs, &ys);
        assert!((slope - 1.3).abs() < 1e-10);
    }

    #[test]
    fn expand_config_inserts_flags_before_user_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "side=64\n# comment\nseed=9\n").unwrap();
        let argv: Vec<String> = [
            "anett",
            "make-data",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "11",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let out = expand_config(argv).unwrap();
        assert_eq!(
            out,
            vec![
                "anett", "make-data", "--side", "64", "--seed", "9", "--seed", "11"
            ]
        );
    }

    #[test]
    fn cli_without_arguments_is_nonzero_with_usage() {
        assert_ne!(cli(vec!["anett".into()]), 0);
    }

    #[test]
    fn cli_unknown_subcommand_is_nonzero() {
        assert_ne!(cli(vec!["anett".into(), "frobnicate".into()]), 0);
    }

    #[test]
    fn cli_benchmark_missing_model_reports_error() {
        let code = cli(
            ["anett", "benchmark", "--scenario", "noise-free", "--ae", "/nonexistent.anp"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        assert_eq!(code, 1);
    }

    #[test]
    fn make_data_is_deterministic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d1");
        let args = |o: &Path| -> Vec<String> {
            [
                "anett", "make-data", "--out", o.to_str().unwrap(), "--train", "3", "--val", "2",
                "--test", "2", "--side", "16", "--seed", "5",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect()
        };
        assert_eq!(cli(args(&out)), 0);
        let train = load_split(&out, "train").unwrap();
        assert_eq!(train.len(), 3);
        let out2 = dir.path().join("d2");
        assert_eq!(cli(args(&out2)), 0);
        for name in ["manifest.txt", "train_0000.grd", "test_0001.grd"] {
            let a = std::fs::read(out.join(name)).unwrap();
            let b = std::fs::read(out2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
    }

    #[test]
    fn reconstruct_identity_fixture_matches_soft_threshold_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        use rand::Rng;
        let y = Sinogram::from_values(n, n, (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap();
        let ypath = dir.path().join("y.grd");
        write_sinogram(&y, &ypath).unwrap();
        let upath = dir.path().join("u.grd");
        let code = cli(
            [
                "anett",
                "reconstruct",
                "--sinogram",
                ypath.to_str().unwrap(),
                "--identity",
                "--alpha",
                "0.4",
                "--c",
                "1.0",
                "--outer",
                "200",
                "--stepsize",
                "0.4",
                "--out",
                upath.to_str().unwrap(),
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        );
        assert_eq!(code, 0);
        let u = read_image(&upath).unwrap();
        for (&got, &yv) in u.values().iter().zip(y.values()) {
            let want = soft_threshold(yv, 0.2);
            assert!((got - want).abs() <= 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn inspect_summarizes_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.grd");
        write_image(&Image::from_values(8, vec![0.5; 64]).unwrap(), &p).unwrap();
        let s = inspect(&p).unwrap();
        assert!(s.contains("8x8"), "{s}");
    }

    #[test]
    fn model_side_inference_inverts_detector_default() {
        for n in [8usize, 16, 64, 100, 128] {
            let y = Sinogram::zeros(60, default_detectors(n));
            assert_eq!(model_image_side(&y).unwrap(), n);
        }
    }
}
