//! Training loops: the sparse denoising autoencoder (reconstruction +
//! weighted latent l1 + weight decay) and the operator-adapted network
//! trained on artifact/clean pairs with the autoencoder frozen. Both use
//! minibatch Adam with validation-best selection and are bit-deterministic
//! per seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

use crate::grid::{mean, Grid, Image};
use crate::net::adam::{adam_step, AdamState};
use crate::net::{
    adapt_with_trace, adapt_vjp, autoencode, decode_vjp, decode_with_trace, encode_vjp,
    encode_with_trace, AdapterParams, AutoencoderParams, Descriptor, NetError, ParamSet,
};
use crate::tomo::{fbp, radon_forward, FbpFilter, Geometry, TomoError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tomo(#[from] TomoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Sparsity weight on the weighted latent l1 term.
    pub eta: f64,
    /// Weight decay for the autoencoder parameters.
    pub beta: f64,
    /// Weight decay for the adapter parameters.
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 1e-3,
            beta: 1e-5,
            gamma: 1e-5,
            epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.eta < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(TrainError::Diverged(format!(
                "regularization weights must be >= 0: eta={}, beta={}, gamma={}",
                self.eta, self.beta, self.gamma
            )));
        }
        if self.epochs < 1 || self.batch_size < 1 || !(self.lr > 0.0) {
            return Err(TrainError::Diverged(format!(
                "need epochs >= 1, batch_size >= 1, lr > 0; got {}, {}, {}",
                self.epochs, self.batch_size, self.lr
            )));
        }
        Ok(())
    }
}

// RNG stream tags for seed derivation.
const STREAM_SHUFFLE: u64 = 0x51;
const STREAM_TRAIN_PERTURB: u64 = 0x52;
const STREAM_VAL_PERTURB: u64 = 0x53;

/// u + white Gaussian noise with standard deviation p * mean(u).
pub fn perturb_with_p(u: &Image, p: f64, rng: &mut impl Rng) -> Image {
    let sigma = p * mean(u);
    if sigma <= 0.0 {
        return u.clone();
    }
    let values = u
        .values()
        .iter()
        .map(|&v| {
            let delta: f64 = rng.sample(StandardNormal);
            v + sigma * delta
        })
        .collect();
    Image::same_shape(u, values)
}

/// Denoising perturbation with p sampled fresh from Uniform[0, 0.1].
pub fn perturb(u: &Image, rng: &mut impl Rng) -> Image {
    let p = rng.gen_range(0.0..0.1);
    perturb_with_p(u, p, rng)
}

#[inline]
fn l1_subgradient(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.signum()
    }
}

/// Loss and parameter gradient of
///   ||N^a(input) - target||^2 + eta * ||E(input)||_{1,w} + beta * ||theta||^2
/// for one (already perturbed) input.
pub fn ae_loss_on(
    ae: &AutoencoderParams,
    input: &Image,
    target: &Image,
    eta: f64,
    beta: f64,
) -> Result<(f64, AutoencoderParams), NetError> {
    let (code, enc_trace) = encode_with_trace(ae, input)?;
    let (recon, dec_trace) = decode_with_trace(ae, &code)?;
    let residual: Vec<f64> = recon
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| a - b)
        .collect();
    let loss_rec: f64 = residual.iter().map(|v| v * v).sum();
    let l1: f64 = code
        .levels
        .iter()
        .zip(&code.weights)
        .map(|(level, &w)| w * level.data.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    let loss = loss_rec + eta * l1 + beta * ae.squared_norm();

    let mut grads = ae.zeros_like();
    let cot_img = Image::same_shape(target, residual.iter().map(|v| 2.0 * v).collect());
    let mut cot_code = decode_vjp(ae, &dec_trace, &cot_img, Some(&mut grads));
    for (level, (cot_level, &w)) in code
        .levels
        .iter()
        .zip(cot_code.levels.iter_mut().zip(&code.weights))
    {
        for (c, &v) in cot_level.data.iter_mut().zip(&level.data) {
            *c += eta * w * l1_subgradient(v);
        }
    }
    encode_vjp(ae, &enc_trace, &cot_code, Some(&mut grads));
    grads.add_scaled(ae, 2.0 * beta);
    Ok((loss, grads))
}

/// Samples one perturbation and evaluates the denoising objective.
pub fn ae_loss(
    ae: &AutoencoderParams,
    u: &Image,
    eta: f64,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<(f64, AutoencoderParams), NetError> {
    let input = perturb(u, rng);
    ae_loss_on(ae, &input, u, eta, beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Validation loss of the freshly initialized parameters.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 means the initial snapshot won.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// One line per record: "epoch train_loss val_loss"; the initial snapshot is
/// epoch 0 with "-" in the train column.
pub fn write_train_log(report: &TrainReport, path: &Path) -> Result<(), TrainError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "0 - {:.6e}", report.initial_val_loss)?;
    for r in &report.epochs {
        writeln!(f, "{} {:.6e} {:.6e}", r.epoch, r.train_loss, r.val_loss)?;
    }
    writeln!(
        f,
        "# best epoch {} val {:.6e}",
        report.best_epoch, report.best_val_loss
    )?;
    f.flush()?;
    Ok(())
}

fn map_ordered<T: Send, F: Fn(usize) -> T + Sync>(idxs: &[usize], f: F) -> Vec<T> {
    #[cfg(feature = "parallel")]
    return idxs.par_iter().map(|&i| f(i)).collect();
    #[cfg(not(feature = "parallel"))]
    idxs.iter().map(|&i| f(i)).collect()
}

/// Shared minibatch-Adam loop with validation-best selection. The closures
/// must be deterministic in (epoch, item) so runs are reproducible.
fn run_training<P, L, V>(
    mut params: P,
    n_train: usize,
    cfg: &TrainConfig,
    loss_grad: L,
    val_loss: V,
) -> Result<(P, TrainReport), TrainError>
where
    P: ParamSet + Clone + Send + Sync,
    L: Fn(&P, usize, usize) -> Result<(f64, P), NetError> + Sync,
    V: Fn(&P) -> Result<f64, NetError>,
{
    cfg.validate()?;
    let check = |label: &str, v: f64, epoch: usize| -> Result<f64, TrainError> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TrainError::Diverged(format!(
                "{label} loss {v} at epoch {epoch}"
            )))
        }
    };
    let initial_val_loss = check("validation", val_loss(&params)?, 0)?;
    let mut best = (0usize, initial_val_loss, params.clone());
    let mut flat = params.to_flat();
    let mut adam = AdamState::new(flat.len());
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(crate::phantoms::derive_seed(
            cfg.seed,
            STREAM_SHUFFLE,
            epoch as u64,
        ));
        order.shuffle(&mut shuffle_rng);
        let mut train_loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = map_ordered(batch, |i| loss_grad(&params, epoch, i));
            let mut grad_acc: Option<P> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g) = r?;
                batch_loss += loss;
                match grad_acc.as_mut() {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    None => grad_acc = Some(g),
                }
            }
            let mut g = grad_acc.expect("nonempty batch");
            let scale = 1.0 / batch.len() as f64;
            g.scale(scale);
            train_loss_sum += batch_loss * scale * (batch.len() as f64 / n_train as f64);
            adam_step(&mut flat, &g.to_flat(), &mut adam, cfg.lr);
            params.set_from_flat(&flat);
        }
        let train_loss = check("training", train_loss_sum, epoch)?;
        let vl = check("validation", val_loss(&params)?, epoch)?;
        if vl < best.1 {
            best = (epoch, vl, params.clone());
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: vl,
        });
    }
    let (best_epoch, best_val_loss, best_params) = best;
    Ok((
        best_params,
        TrainReport {
            initial_val_loss,
            epochs: records,
            best_epoch,
            best_val_loss,
        },
    ))
}

/// Trains the sparse denoising autoencoder and returns the parameters with
/// the smallest validation loss (the initial snapshot included). Training
/// perturbations are resampled per (epoch, example); validation uses a fixed
/// perturbation per example so the selection criterion is deterministic.
pub fn train_autoencoder(
    train: &[Image],
    val: &[Image],
    cfg: &TrainConfig,
) -> Result<(AutoencoderParams, TrainReport), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("training images"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyDataset("validation images"));
    }
    let init = AutoencoderParams::init(Descriptor::default(), cfg.seed);
    init.desc.check_side(train[0].side())?;
    let loss_grad = |ae: &AutoencoderParams, epoch: usize, i: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::phantoms::derive_seed(
            cfg.seed,
            STREAM_TRAIN_PERTURB.wrapping_add((epoch as u64) << 32),
            i as u64,
        ));
        ae_loss(ae, &train[i], cfg.eta, cfg.beta, &mut rng)
    };
    let val_loss = |ae: &AutoencoderParams| -> Result<f64, NetError> {
        let idxs: Vec<usize> = (0..val.len()).collect();
        let losses = map_ordered(&idxs, |i| -> Result<f64, NetError> {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::phantoms::derive_seed(
                cfg.seed,
                STREAM_VAL_PERTURB,
                i as u64,
            ));
            let input = perturb(&val[i], &mut rng);
            let (code, _) = encode_with_trace(ae, &input)?;
            let (recon, _) = decode_with_trace(ae, &code)?;
            let loss_rec: f64 = recon
                .values()
                .iter()
                .zip(val[i].values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let l1: f64 = code
                .levels
                .iter()
                .zip(&code.weights)
                .map(|(level, &w)| w * level.data.iter().map(|v| v.abs()).sum::<f64>())
                .sum();
            Ok(loss_rec + cfg.eta * l1 + cfg.beta * ae.squared_norm())
        });
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / val.len() as f64)
    };
    run_training(init, train.len(), cfg, loss_grad, val_loss)
}

/// Doubled dataset for operator adaptation: (fbp(K u), u) for every image,
/// then the clean identity pairs (u, u).
pub fn make_adapter_dataset(
    images: &[Image],
    g: &Geometry,
) -> Result<Vec<(Image, Image)>, TomoError> {
    let mut pairs = Vec::with_capacity(2 * images.len());
    for u in images {
        let y = radon_forward(u, g)?;
        pairs.push((fbp(&y, g, FbpFilter::RamLak)?, u.clone()));
    }
    for u in images {
        pairs.push((u.clone(), u.clone()));
    }
    Ok(pairs)
}

fn adapter_loss_on(
    ad: &AdapterParams,
    z: &Image,
    target: &Image,
    gamma: f64,
) -> Result<(f64, AdapterParams), NetError> {
    let (out, trace) = adapt_with_trace(ad, z)?;
    let residual: Vec<f64> = out
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| a - b)
        .collect();
    let loss = residual.iter().map(|v| v * v).sum::<f64>() + gamma * ad.squared_norm();
    let mut grads = ad.zeros_like();
    let cot = Image::same_shape(target, residual.iter().map(|v| 2.0 * v).collect());
    adapt_vjp(ad, &trace, &cot, Some(&mut grads));
    grads.add_scaled(ad, 2.0 * gamma);
    Ok((loss, grads))
}

/// Trains the adapter on precomputed autoencoder outputs N^a(v_i); the
/// autoencoder parameters receive no gradient and are never modified.
pub fn train_adapter(
    pairs: &[(Image, Image)],
    val_pairs: &[(Image, Image)],
    ae: &AutoencoderParams,
    cfg: &TrainConfig,
) -> Result<(AdapterParams, TrainReport), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset("adapter training pairs"));
    }
    if val_pairs.is_empty() {
        return Err(TrainError::EmptyDataset("adapter validation pairs"));
    }
    // theta is frozen, so N^a(v_i) is a constant of the optimization and is
    // evaluated once up front
    let precompute = |ps: &[(Image, Image)]| -> Result<Vec<(Image, Image)>, NetError> {
        let idxs: Vec<usize> = (0..ps.len()).collect();
        map_ordered(&idxs, |i| -> Result<(Image, Image), NetError> {
            Ok((autoencode(ae, &ps[i].0)?, ps[i].1.clone()))
        })
        .into_iter()
        .collect()
    };
    let train_z = precompute(pairs)?;
    let val_z = precompute(val_pairs)?;
    let init = AdapterParams::init(ae.desc.clone(), cfg.seed.wrapping_add(1));
    let loss_grad = |ad: &AdapterParams, _epoch: usize, i: usize| {
        adapter_loss_on(ad, &train_z[i].0, &train_z[i].1, cfg.gamma)
    };
    let val_loss = |ad: &AdapterParams| -> Result<f64, NetError> {
        let idxs: Vec<usize> = (0..val_z.len()).collect();
        let losses = map_ordered(&idxs, |i| -> Result<f64, NetError> {
            let (out, _) = adapt_with_trace(ad, &val_z[i].0)?;
            let r: f64 = out
                .values()
                .iter()
                .zip(val_z[i].1.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Ok(r + cfg.gamma * ad.squared_norm())
        });
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / val_z.len() as f64)
    };
    run_training(init, train_z.len(), cfg, loss_grad, val_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::psnr;
    use crate::phantoms::random_phantom;

    fn random_image(n: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_values(n, (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn perturb_of_zero_mean_image_is_identity() {
        let u = Image::zeros(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(perturb(&u, &mut rng), u);
    }

    #[test]
    fn perturb_statistics_at_forced_p() {
        let u = Image::from_values(100, vec![0.5; 10_000]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = perturb_with_p(&u, 0.1, &mut rng);
        let diffs: Vec<f64> = out
            .values()
            .iter()
            .zip(u.values())
            .map(|(a, b)| a - b)
            .collect();
        let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let std =
            (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!((std - 0.05).abs() <= 0.05 * 0.05, "std {std}");
    }

    #[test]
    fn perturb_differs_between_calls() {
        let u = random_image(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = perturb(&u, &mut rng);
        let b = perturb(&u, &mut rng);
        assert_ne!(a, b);
    }

    #[test]
    fn ae_loss_zero_for_fixed_point_without_regularization() {
        // with zero biases the network maps 0 to 0, a perfect reconstruction
        let mut ae = AutoencoderParams::init(Descriptor::default(), 5);
        ae.zero_biases();
        let u = Image::zeros(16);
        let (loss, grads) = ae_loss_on(&ae, &u, &u, 0.0, 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.squared_norm(), 0.0);
    }

    #[test]
    fn ae_loss_dominates_sparsity_term() {
        let ae = AutoencoderParams::init(Descriptor::default(), 6);
        let u = random_image(16, 7);
        let eta = 1e-3;
        let (loss, _) = ae_loss_on(&ae, &u, &u, eta, 1e-5).unwrap();
        let code = crate::net::encode(&ae, &u).unwrap();
        let l1: f64 = code
            .levels
            .iter()
            .zip(&code.weights)
            .map(|(level, &w)| w * level.data.iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert!(loss >= eta * l1);
    }

    #[test]
    fn ae_loss_gradient_matches_finite_differences() {
        let ae = AutoencoderParams::init(Descriptor::default(), 8);
        let input = random_image(16, 9);
        let target = random_image(16, 10);
        let eta = 1e-2;
        let beta = 1e-4;
        let (_, grads) = ae_loss_on(&ae, &input, &target, eta, beta).unwrap();
        let gflat = grads.to_flat();
        let base_flat = ae.to_flat();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..5 {
            let dir: Vec<f64> = (0..base_flat.len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let eval = |t: f64| {
                let mut p = ae.clone();
                let flat: Vec<f64> = base_flat
                    .iter()
                    .zip(&dir)
                    .map(|(b, d)| b + t * d)
                    .collect();
                p.set_from_flat(&flat);
                ae_loss_on(&p, &input, &target, eta, beta).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic: f64 = gflat.iter().zip(&dir).map(|(g, d)| g * d).sum();
            assert!(
                (fd - analytic).abs() <= 1e-4 * analytic.abs().max(1e-8),
                "fd {fd} vs analytic {analytic}"
            );
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 42,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn train_autoencoder_validation_best_and_determinism() {
        let train: Vec<Image> = (0..4).map(|i| random_image(16, 100 + i)).collect();
        let val: Vec<Image> = (0..2).map(|i| random_image(16, 200 + i)).collect();
        let cfg = tiny_cfg();
        let (ae1, rep1) = train_autoencoder(&train, &val, &cfg).unwrap();
        assert!(rep1.best_val_loss <= rep1.initial_val_loss);
        for r in &rep1.epochs {
            assert!(rep1.best_val_loss <= r.val_loss);
        }
        let (ae2, rep2) = train_autoencoder(&train, &val, &cfg).unwrap();
        assert_eq!(ae1.to_flat(), ae2.to_flat());
        assert_eq!(rep1, rep2);
    }

    #[test]
    fn train_autoencoder_rejects_empty_datasets() {
        let imgs = vec![random_image(16, 0)];
        assert!(matches!(
            train_autoencoder(&[], &imgs, &tiny_cfg()),
            Err(TrainError::EmptyDataset(_))
        ));
        assert!(matches!(
            train_autoencoder(&imgs, &[], &tiny_cfg()),
            Err(TrainError::EmptyDataset(_))
        ));
    }

    #[test]
    fn adapter_dataset_shape_and_artifacts() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let imgs: Vec<Image> = (0..2).map(|_| random_phantom(&mut rng, 32, (3, 8))).collect();
        let g = Geometry::sparse_view(32);
        let pairs = make_adapter_dataset(&imgs, &g).unwrap();
        assert_eq!(pairs.len(), 4);
        for (i, u) in imgs.iter().enumerate() {
            assert_eq!(&pairs[2 + i].0, u);
            assert_eq!(&pairs[2 + i].1, u);
            let p = psnr(&pairs[i].0, u, 1.0).unwrap();
            assert!(p < 30.0, "sparse-view fbp unexpectedly clean: {p} dB");
        }
    }

    #[test]
    fn train_adapter_freezes_autoencoder_and_improves_validation() {
        let ae = AutoencoderParams::init(Descriptor::default(), 30);
        let ae_before = ae.to_flat();
        let pairs: Vec<(Image, Image)> = (0..4)
            .map(|i| (random_image(16, 300 + i), random_image(16, 400 + i)))
            .collect();
        let val: Vec<(Image, Image)> = (0..2)
            .map(|i| (random_image(16, 500 + i), random_image(16, 600 + i)))
            .collect();
        let (_, rep) = train_adapter(&pairs, &val, &ae, &tiny_cfg()).unwrap();
        assert_eq!(ae.to_flat(), ae_before);
        assert!(rep.best_val_loss <= rep.initial_val_loss);
    }

    #[test]
    fn train_log_round_trips_through_text() {
        let rep = TrainReport {
            initial_val_loss: 1.25,
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.75,
            }],
            best_epoch: 1,
            best_val_loss: 0.75,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.txt");
        write_train_log(&rep, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("0 - 1.25"));
        assert!(text.contains("1 5.0"));
        assert!(text.contains("best epoch 1"));
    }
}
