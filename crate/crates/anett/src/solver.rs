//! ADMM minimization of the variational objective
//!   ||Ku - y||^2 + alpha (||E(u)||_{1,w} + (c/2)||u - N(u)||^2)
//! via the splitting xi = E(u) with scaled dual variable: a momentum
//! gradient u-update with backtracking, a soft-threshold xi-update, and the
//! dual ascent eta += E(u) - xi.

use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

use crate::grid::{Grid, Image, Sinogram};
use crate::net::{LatentCode, Model};
use crate::regularizer::{grad_augmented, weighted_lq};
use crate::tomo::{radon_adjoint, radon_forward, Geometry, TomoError};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("solver diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Tomo(#[from] TomoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// The forward operator K and its adjoint, abstracted so the solver runs
/// unchanged against the Radon transform or the identity test fixture.
pub trait LinearOp: Sync {
    fn forward(&self, u: &Image) -> Result<Sinogram, SolveError>;
    fn adjoint(&self, y: &Sinogram) -> Result<Image, SolveError>;
    /// Approximate pseudo-inverse used to build the solver's starting point.
    /// Defaults to the adjoint, which is exact for orthogonal operators.
    fn pseudo_inverse(&self, y: &Sinogram) -> Result<Image, SolveError> {
        self.adjoint(y)
    }
}

pub struct RadonOp(pub Geometry);

impl LinearOp for RadonOp {
    fn forward(&self, u: &Image) -> Result<Sinogram, SolveError> {
        Ok(radon_forward(u, &self.0)?)
    }
    fn adjoint(&self, y: &Sinogram) -> Result<Image, SolveError> {
        Ok(radon_adjoint(y, &self.0)?)
    }
    /// Filtered backprojection: the classical approximate inverse of the
    /// Radon transform, unlike the plain adjoint which blurs and rescales.
    fn pseudo_inverse(&self, y: &Sinogram) -> Result<Image, SolveError> {
        Ok(crate::tomo::fbp(y, &self.0, crate::tomo::FbpFilter::RamLak)?)
    }
}

/// K = identity: an n x n image reinterpreted as an n x n sinogram. Test
/// fixture for the closed-form soft-threshold oracle.
pub struct IdentityOp {
    pub side: usize,
}

impl LinearOp for IdentityOp {
    fn forward(&self, u: &Image) -> Result<Sinogram, SolveError> {
        assert_eq!(u.side(), self.side);
        Ok(Sinogram::from_values(self.side, self.side, u.values().to_vec()).unwrap())
    }
    fn adjoint(&self, y: &Sinogram) -> Result<Image, SolveError> {
        assert_eq!(y.shape(), (self.side, self.side));
        Ok(Image::from_values(self.side, y.values().to_vec()).unwrap())
    }
}

pub const MOMENTUM: f64 = 0.8;
const MAX_HALVINGS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub alpha: f64,
    pub c: f64,
    pub rho: f64,
    pub outer: usize,
    pub inner: usize,
    pub stepsize: f64,
}

impl SolverConfig {
    pub fn noise_free() -> Self {
        SolverConfig {
            alpha: 1e-5,
            c: 1e2,
            rho: 2.0,
            outer: 50,
            inner: 10,
            stepsize: 0.5,
        }
    }

    pub fn noisy_5pct() -> Self {
        SolverConfig {
            alpha: 5e-4,
            c: 1e1,
            rho: 2.0,
            outer: 100,
            inner: 10,
            stepsize: 0.1,
        }
    }

    pub fn adversarial() -> Self {
        SolverConfig {
            alpha: 1e-5,
            c: 1e1,
            rho: 2.0,
            outer: 50,
            inner: 10,
            stepsize: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.alpha > 0.0 && self.c > 0.0 && self.rho > 0.0 && self.stepsize > 0.0) {
            return Err(SolveError::InvalidConfig(format!(
                "alpha, c, rho, stepsize must be > 0; got {}, {}, {}, {}",
                self.alpha, self.c, self.rho, self.stepsize
            )));
        }
        if self.outer < 1 || self.inner < 1 {
            return Err(SolveError::InvalidConfig(format!(
                "outer and inner must be >= 1; got {}, {}",
                self.outer, self.inner
            )));
        }
        Ok(())
    }
}

/// sign(v) * max(|v| - t, 0). Panics on a negative threshold.
#[inline]
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    assert!(t >= 0.0, "negative threshold {t}");
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Componentwise soft_threshold(E(u) + eta, alpha * w_l / rho).
pub fn xi_update<M: Model>(
    u: &Image,
    model: &M,
    eta: &LatentCode,
    alpha: f64,
    rho: f64,
) -> LatentCode {
    let code = model.encode(u);
    let mut out = code.add(eta);
    for (level, &w) in out.levels.iter_mut().zip(&code.weights) {
        let t = alpha * w / rho;
        for v in level.data.iter_mut() {
            *v = soft_threshold(*v, t);
        }
    }
    out
}

/// Objective of the u-update subproblem:
/// ||Ku - y||^2 + (alpha c / 2) ||u - N(u)||^2 + (rho/2) ||E(u) - xi + eta||^2
fn inner_objective<K: LinearOp, M: Model>(
    u: &Image,
    y: &Sinogram,
    op: &K,
    model: &M,
    xi: &LatentCode,
    eta: &LatentCode,
    cfg: &SolverConfig,
) -> Result<f64, SolveError> {
    let ku = op.forward(u)?;
    let data: f64 = ku
        .values()
        .iter()
        .zip(y.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let nu = model.apply(u);
    let aug: f64 = u
        .values()
        .iter()
        .zip(nu.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let split = model.encode(u).sub(xi).add(eta);
    let split_sq = split.dot(&split);
    Ok(data + 0.5 * cfg.alpha * cfg.c * aug + 0.5 * cfg.rho * split_sq)
}

fn inner_gradient<K: LinearOp, M: Model>(
    u: &Image,
    y: &Sinogram,
    op: &K,
    model: &M,
    xi: &LatentCode,
    eta: &LatentCode,
    cfg: &SolverConfig,
) -> Result<Image, SolveError> {
    let ku = op.forward(u)?;
    let residual = Sinogram::same_shape(
        &ku,
        ku.values().iter().zip(y.values()).map(|(a, b)| a - b).collect(),
    );
    let g_data = op.adjoint(&residual)?;
    let g_aug = grad_augmented(u, model, cfg.alpha * cfg.c);
    let split = model.encode(u).sub(xi).add(eta);
    let g_split = model.encode_vjp(u, &split);
    Ok(Image::same_shape(
        u,
        g_data
            .values()
            .iter()
            .zip(g_aug.values().iter().zip(g_split.values()))
            .map(|(d, (a, s))| 2.0 * d + a + cfg.rho * s)
            .collect(),
    ))
}

/// Heavy-ball descent on the u-update subproblem: at most cfg.inner steps,
/// momentum buffer starting at zero, stepsize halved (up to 20 times in
/// total) whenever a step would increase the objective. Returns the best
/// iterate seen, so the objective never increases across the call.
pub fn u_update<K: LinearOp, M: Model>(
    u0: &Image,
    y: &Sinogram,
    op: &K,
    model: &M,
    xi: &LatentCode,
    eta: &LatentCode,
    cfg: &SolverConfig,
) -> Result<Image, SolveError> {
    let check = |f: f64| -> Result<f64, SolveError> {
        if f.is_finite() {
            Ok(f)
        } else {
            Err(SolveError::Diverged(format!("u-update objective {f}")))
        }
    };
    let mut u = u0.clone();
    let mut f_u = check(inner_objective(&u, y, op, model, xi, eta, cfg)?)?;
    let mut best = (f_u, u.clone());
    let mut momentum = vec![0.0; u.values().len()];
    let mut step = cfg.stepsize;
    let mut halvings = 0usize;
    'outer: for _ in 0..cfg.inner {
        let g = inner_gradient(&u, y, op, model, xi, eta, cfg)?;
        for (m, &gv) in momentum.iter_mut().zip(g.values()) {
            *m = MOMENTUM * *m + gv;
        }
        let mut momentum_dropped = false;
        loop {
            let u_try = Image::same_shape(
                &u,
                u.values()
                    .iter()
                    .zip(&momentum)
                    .map(|(v, m)| v - step * m)
                    .collect(),
            );
            let f_try = check(inner_objective(&u_try, y, op, model, xi, eta, cfg)?)?;
            if f_try <= f_u {
                u = u_try;
                f_u = f_try;
                if f_u < best.0 {
                    best = (f_u, u.clone());
                }
                break;
            }
            // an ascent step usually means momentum overshoot; fall back to
            // the plain gradient direction before shrinking the stepsize
            if !momentum_dropped {
                momentum.copy_from_slice(g.values());
                momentum_dropped = true;
                continue;
            }
            halvings += 1;
            if halvings >= MAX_HALVINGS {
                break 'outer;
            }
            step *= 0.5;
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    /// Full variational objective at u_k.
    pub objective: f64,
    /// ||K u_k - y||
    pub data_residual: f64,
    /// ||E(u_k) - xi_k||
    pub primal_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SolveDiagnostics {
    pub records: Vec<IterRecord>,
}

/// One record per line: "iter objective data_residual primal_residual".
pub fn write_solver_log(diag: &SolveDiagnostics, path: &Path) -> Result<(), SolveError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# iter objective data_residual primal_residual")?;
    for r in &diag.records {
        writeln!(
            f,
            "{} {:.6e} {:.6e} {:.6e}",
            r.iter, r.objective, r.data_residual, r.primal_residual
        )?;
    }
    Ok(())
}

/// Full objective: ||Ku - y||^2 + alpha (||E(u)||_{1,w} + (c/2)||u - N(u)||^2)
pub fn full_objective<K: LinearOp, M: Model>(
    u: &Image,
    y: &Sinogram,
    op: &K,
    model: &M,
    cfg: &SolverConfig,
) -> Result<f64, SolveError> {
    let ku = op.forward(u)?;
    let data: f64 = ku
        .values()
        .iter()
        .zip(y.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let code = model.encode(u);
    let sparse = weighted_lq(&code, 1.0, &code.weights);
    let nu = model.apply(u);
    let aug: f64 = u
        .values()
        .iter()
        .zip(nu.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(data + cfg.alpha * (sparse + 0.5 * cfg.c * aug))
}

/// ADMM on the split objective, initialized at u0 = N(K# y) with K# the
/// operator's approximate pseudo-inverse, xi0 = E(u0), eta0 = 0. Returns the
/// final image and one diagnostic record per outer iteration.
pub fn admm_solve<K: LinearOp, M: Model>(
    y: &Sinogram,
    op: &K,
    model: &M,
    cfg: &SolverConfig,
) -> Result<(Image, SolveDiagnostics), SolveError> {
    cfg.validate()?;
    let mut u = model.apply(&op.pseudo_inverse(y)?);
    let mut xi = model.encode(&u);
    let mut eta = xi.zeros_like();
    let mut diag = SolveDiagnostics::default();
    for k in 1..=cfg.outer {
        u = u_update(&u, y, op, model, &xi, &eta, cfg)?;
        xi = xi_update(&u, model, &eta, cfg.alpha, cfg.rho);
        let code = model.encode(&u);
        let primal = code.sub(&xi);
        eta = eta.add(&primal);
        let ku = op.forward(&u)?;
        let data_residual = ku
            .values()
            .iter()
            .zip(y.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let objective = full_objective(&u, y, op, model, cfg)?;
        if !objective.is_finite() {
            return Err(SolveError::Diverged(format!(
                "objective {objective} at outer iteration {k}"
            )));
        }
        diag.records.push(IterRecord {
            iter: k,
            objective,
            data_residual,
            primal_residual: primal.norm(),
        });
    }
    Ok((u, diag))
}
