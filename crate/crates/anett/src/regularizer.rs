//! The learned regularizer: weighted latent sparsity plus the augmentation
//! penalty (c/2)||u - N(u)||^2, its gradient, and the smoothed absolute
//! Bregman distance used by the convergence-rate study.

use thiserror::Error;

use crate::grid::{Grid, Image};
use crate::net::{LatentCode, Model};

#[derive(Debug, Error)]
pub enum RegError {
    #[error("invalid regularizer parameters: {0}")]
    Invalid(String),
    #[error("weight count {got} does not match {expected} latent levels")]
    WeightCount { expected: usize, got: usize },
}

/// q, c, per-level weights, and the smoothing width used only for the
/// Bregman diagnostic (never inside ADMM).
#[derive(Debug, Clone, PartialEq)]
pub struct RegParams {
    pub q: f64,
    pub c: f64,
    pub weights: Vec<f64>,
    pub eps_s: f64,
}

pub const DEFAULT_BREGMAN_SMOOTHING: f64 = 1e-6;

impl RegParams {
    pub fn new(q: f64, c: f64, weights: Vec<f64>, eps_s: f64) -> Result<Self, RegError> {
        if !(q >= 1.0) {
            return Err(RegError::Invalid(format!("q must be >= 1, got {q}")));
        }
        if !(c > 0.0) {
            return Err(RegError::Invalid(format!("c must be > 0, got {c}")));
        }
        if weights.is_empty() || !weights.iter().all(|&w| w > 0.0) {
            return Err(RegError::Invalid(format!(
                "weights must be nonempty and positive, got {weights:?}"
            )));
        }
        if !(eps_s >= 0.0) {
            return Err(RegError::Invalid(format!("eps_s must be >= 0, got {eps_s}")));
        }
        Ok(RegParams {
            q,
            c,
            weights,
            eps_s,
        })
    }

    /// q = 1 with the model's own level weights.
    pub fn l1(c: f64, weights: Vec<f64>) -> Result<Self, RegError> {
        RegParams::new(1.0, c, weights, DEFAULT_BREGMAN_SMOOTHING)
    }

    fn check_levels(&self, code: &LatentCode) -> Result<(), RegError> {
        if self.weights.len() != code.levels.len() {
            return Err(RegError::WeightCount {
                expected: code.levels.len(),
                got: self.weights.len(),
            });
        }
        Ok(())
    }
}

/// sum_l w_l sum_{lambda in level l} |xi_lambda|^q
pub fn weighted_lq(code: &LatentCode, q: f64, weights: &[f64]) -> f64 {
    assert_eq!(weights.len(), code.levels.len(), "weight count mismatch");
    code.levels
        .iter()
        .zip(weights)
        .map(|(level, &w)| {
            let s: f64 = if q == 1.0 {
                level.data.iter().map(|v| v.abs()).sum()
            } else {
                level.data.iter().map(|v| v.abs().powf(q)).sum()
            };
            w * s
        })
        .sum()
}

fn augmented_residual<M: Model>(u: &Image, model: &M) -> Image {
    let nu = model.apply(u);
    let values = u
        .values()
        .iter()
        .zip(nu.values())
        .map(|(a, b)| a - b)
        .collect();
    Image::same_shape(u, values)
}

/// R_c(u) = weighted_lq(E(u)) + (c/2) ||u - N(u)||^2
pub fn reg_value<M: Model>(u: &Image, model: &M, p: &RegParams) -> Result<f64, RegError> {
    let code = model.encode(u);
    p.check_levels(&code)?;
    let sparse = weighted_lq(&code, p.q, &p.weights);
    let r = augmented_residual(u, model);
    let aug: f64 = r.values().iter().map(|v| v * v).sum();
    Ok(sparse + 0.5 * p.c * aug)
}

/// Gradient of (c/2) ||u - N(u)||^2: c (I - J_N)^T (u - N(u)).
pub fn grad_augmented<M: Model>(u: &Image, model: &M, c: f64) -> Image {
    let r = augmented_residual(u, model);
    let jt_r = model.apply_vjp(u, &r);
    let values = r
        .values()
        .iter()
        .zip(jt_r.values())
        .map(|(a, b)| c * (a - b))
        .collect();
    Image::same_shape(u, values)
}

fn smooth_abs(x: f64, eps: f64) -> f64 {
    (x * x + eps * eps).sqrt()
}

fn smoothed_reg_value<M: Model>(u: &Image, model: &M, p: &RegParams) -> Result<f64, RegError> {
    let code = model.encode(u);
    p.check_levels(&code)?;
    let sparse: f64 = code
        .levels
        .iter()
        .zip(&p.weights)
        .map(|(level, &w)| {
            w * level
                .data
                .iter()
                .map(|&v| smooth_abs(v, p.eps_s))
                .sum::<f64>()
        })
        .sum();
    let r = augmented_residual(u, model);
    let aug: f64 = r.values().iter().map(|v| v * v).sum();
    Ok(sparse + 0.5 * p.c * aug)
}

fn smoothed_reg_grad<M: Model>(u: &Image, model: &M, p: &RegParams) -> Result<Image, RegError> {
    let code = model.encode(u);
    p.check_levels(&code)?;
    // d/dx sqrt(x^2 + eps^2) = x / sqrt(x^2 + eps^2), scaled by the level weight
    let mut cot = code.clone();
    for (level, &w) in cot.levels.iter_mut().zip(&p.weights) {
        for v in level.data.iter_mut() {
            *v = w * *v / smooth_abs(*v, p.eps_s);
        }
    }
    let sparse_grad = model.encode_vjp(u, &cot);
    let aug_grad = grad_augmented(u, model, p.c);
    let values = sparse_grad
        .values()
        .iter()
        .zip(aug_grad.values())
        .map(|(a, b)| a + b)
        .collect();
    Ok(Image::same_shape(u, values))
}

/// Absolute Bregman distance |R(u) - R(u_ref) - <grad R(u_ref), u - u_ref>|
/// of the eps_s-smoothed regularizer. Requires eps_s > 0 (the raw l1 term is
/// not differentiable).
pub fn bregman_distance<M: Model>(
    u: &Image,
    u_ref: &Image,
    model: &M,
    p: &RegParams,
) -> Result<f64, RegError> {
    if p.eps_s <= 0.0 {
        return Err(RegError::Invalid(
            "bregman_distance requires eps_s > 0".into(),
        ));
    }
    let value = smoothed_reg_value(u, model, p)?;
    let value_ref = smoothed_reg_value(u_ref, model, p)?;
    let grad_ref = smoothed_reg_grad(u_ref, model, p)?;
    let inner: f64 = grad_ref
        .values()
        .iter()
        .zip(u.values().iter().zip(u_ref.values()))
        .map(|(g, (a, b))| g * (a - b))
        .sum();
    Ok((value - value_ref - inner).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::l2_norm;
    use crate::net::{AutoencoderParams, Descriptor, IdentityModel, Tensor, TrainedModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_values(n, (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn random_code(seed: u64) -> LatentCode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = vec![
            Tensor {
                c: 1,
                h: 4,
                w: 4,
                data: (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            },
            Tensor {
                c: 2,
                h: 2,
                w: 2,
                data: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            },
        ];
        LatentCode {
            levels,
            weights: vec![0.5, 0.25],
        }
    }

    #[test]
    fn weighted_lq_zero_code_is_zero() {
        let code = random_code(1).zeros_like();
        assert_eq!(weighted_lq(&code, 1.0, &[0.5, 0.25]), 0.0);
    }

    #[test]
    fn weighted_lq_single_coefficient_level_weight() {
        let mut code = random_code(1).zeros_like();
        code.levels[0].data[3] = 1.0;
        assert_eq!(weighted_lq(&code, 1.0, &[0.5, 0.25]), 0.5);
    }

    #[test]
    fn weighted_lq_matches_scalar_loop_oracle() {
        let code = random_code(2);
        for q in [1.0, 1.5, 2.0] {
            let w = [0.5, 0.25];
            let got = weighted_lq(&code, q, &w);
            let mut want = 0.0;
            for (level, &wl) in code.levels.iter().zip(&w) {
                for &v in &level.data {
                    want += wl * v.abs().powf(q);
                }
            }
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn weighted_lq_is_homogeneous_of_degree_q() {
        let code = random_code(3);
        for q in [1.0, 2.0] {
            let base = weighted_lq(&code, q, &[0.5, 0.25]);
            for a in [-3.0f64, 0.7, 2.5] {
                let scaled = weighted_lq(&code.scale(a), q, &[0.5, 0.25]);
                let want = a.abs().powf(q) * base;
                assert!((scaled - want).abs() <= 1e-12 * want.max(1.0));
            }
        }
    }

    #[test]
    fn reg_params_validation() {
        assert!(RegParams::new(0.5, 1.0, vec![1.0], 0.0).is_err());
        assert!(RegParams::new(1.0, 0.0, vec![1.0], 0.0).is_err());
        assert!(RegParams::new(1.0, 1.0, vec![], 0.0).is_err());
        assert!(RegParams::new(1.0, 1.0, vec![1.0, -0.5], 0.0).is_err());
        assert!(RegParams::new(1.0, 1.0, vec![1.0], -1.0).is_err());
        assert!(RegParams::new(1.0, 1.0, vec![1.0], 0.0).is_ok());
    }

    #[test]
    fn identity_model_reg_value_closed_form() {
        // E = id, N = id: R_c(u) = ||u||_1 regardless of c
        let u = random_image(8, 4);
        let p = RegParams::l1(5.0, vec![1.0]).unwrap();
        let got = reg_value(&u, &IdentityModel, &p).unwrap();
        let want: f64 = u.values().iter().map(|v| v.abs()).sum();
        assert!((got - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn grad_augmented_is_zero_for_identity_model() {
        let u = random_image(8, 5);
        let g = grad_augmented(&u, &IdentityModel, 3.0);
        assert_eq!(l2_norm(&g), 0.0);
    }

    #[test]
    fn grad_augmented_matches_finite_differences() {
        let model = TrainedModel {
            ae: AutoencoderParams::init(Descriptor::default(), 11),
            adapter: None,
        };
        let u = random_image(16, 6);
        let c = 2.0;
        let g = grad_augmented(&u, &model, c);
        let phi = |img: &Image| {
            let nu = model.apply(img);
            let s: f64 = img
                .values()
                .iter()
                .zip(nu.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            0.5 * c * s
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..5 {
            let dir = Image::same_shape(
                &u,
                (0..u.values().len())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            );
            let up = crate::grid::axpy(h, &dir, &u).unwrap();
            let um = crate::grid::axpy(-h, &dir, &u).unwrap();
            let fd = (phi(&up) - phi(&um)) / (2.0 * h);
            let analytic = crate::grid::dot(&g, &dir).unwrap();
            assert!(
                (fd - analytic).abs() <= 1e-4 * analytic.abs().max(1e-6),
                "fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn reg_value_dominates_augmented_term() {
        let model = TrainedModel {
            ae: AutoencoderParams::init(Descriptor::default(), 12),
            adapter: None,
        };
        let u = random_image(16, 8);
        let p = RegParams::l1(10.0, model.ae.desc.level_weights()).unwrap();
        let total = reg_value(&u, &model, &p).unwrap();
        let r = augmented_residual(&u, &model);
        let aug = 0.5 * p.c * r.values().iter().map(|v| v * v).sum::<f64>();
        assert!(total >= aug);
    }

    #[test]
    fn reg_value_coercive_along_rays() {
        let model = TrainedModel {
            ae: AutoencoderParams::init(Descriptor::default(), 13),
            adapter: None,
        };
        let p = RegParams::l1(1.0, model.ae.desc.level_weights()).unwrap();
        for seed in [20u64, 21] {
            let u0 = random_image(16, seed);
            let mut prev = reg_value(&u0, &model, &p).unwrap();
            let first = prev;
            for &t in &[10.0, 100.0, 1000.0] {
                let ut = Image::same_shape(&u0, u0.values().iter().map(|v| t * v).collect());
                let val = reg_value(&ut, &model, &p).unwrap();
                assert!(val > prev, "t={t}: {val} <= {prev}");
                prev = val;
            }
            assert!(prev > 100.0 * first);
        }
    }

    #[test]
    fn bregman_rejects_zero_smoothing() {
        let u = random_image(8, 9);
        let p = RegParams::new(1.0, 1.0, vec![1.0], 0.0).unwrap();
        assert!(bregman_distance(&u, &u, &IdentityModel, &p).is_err());
    }

    #[test]
    fn bregman_at_reference_is_zero_and_nonnegative_elsewhere() {
        let model = TrainedModel {
            ae: AutoencoderParams::init(Descriptor::default(), 14),
            adapter: None,
        };
        let mut p = RegParams::l1(1.0, model.ae.desc.level_weights()).unwrap();
        p.eps_s = 1e-6;
        let u = random_image(16, 10);
        let v = random_image(16, 11);
        assert_eq!(bregman_distance(&u, &u, &model, &p).unwrap(), 0.0);
        assert!(bregman_distance(&v, &u, &model, &p).unwrap() >= 0.0);
    }

    /// E = 0, N(u) = beta*u + b: the smoothed l1 term is the constant
    /// levels*eps and cancels, leaving the quadratic
    /// (c/2) ||(1-beta)(u - u_ref)||^2.
    struct AffineToy {
        beta: f64,
        shift: f64,
    }

    impl Model for AffineToy {
        fn encode(&self, u: &Image) -> LatentCode {
            LatentCode {
                levels: vec![Tensor::zeros(1, u.side(), u.side())],
                weights: vec![1.0],
            }
        }
        fn encode_vjp(&self, u: &Image, _cot: &LatentCode) -> Image {
            Image::same_shape(u, vec![0.0; u.values().len()])
        }
        fn apply(&self, u: &Image) -> Image {
            Image::same_shape(
                u,
                u.values().iter().map(|v| self.beta * v + self.shift).collect(),
            )
        }
        fn apply_vjp(&self, _u: &Image, cot: &Image) -> Image {
            Image::same_shape(cot, cot.values().iter().map(|v| self.beta * v).collect())
        }
    }

    #[test]
    fn bregman_quadratic_toy_matches_hand_computed_value() {
        let toy = AffineToy {
            beta: 0.5,
            shift: 0.1,
        };
        let c = 3.0;
        let p = RegParams::new(1.0, c, vec![1.0], 1e-6).unwrap();
        let u_ref = Image::from_values(8, vec![0.2; 64]).unwrap();
        let mut u = u_ref.clone();
        // perturb two pixels
        *u.at_mut(1, 2) += 0.4;
        *u.at_mut(5, 6) -= 0.3;
        let got = bregman_distance(&u, &u_ref, &toy, &p).unwrap();
        let want = 0.5 * c * (1.0 - toy.beta).powi(2) * (0.4f64.powi(2) + 0.3f64.powi(2));
        assert!(
            (got - want).abs() <= 1e-10 * want,
            "got {got}, want {want}"
        );
    }
}
