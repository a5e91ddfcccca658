//! Global optima of the convexified dropout problem: singular value
//! shrinkage-thresholding with KKT rank selection, the rank-one gap
//! condition, equalized rank-one factorizations, and a numerical upper
//! estimate of the induced regularizer.

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, RANK_TOL};
use crate::network::{
    self, matrix_to_rows, network_map, Architecture, DropoutConfig, InputMoment, WeightStack,
};
use crate::regularizer::{
    chain_products, effective_nu, explicit_regularizer, second_moment_gradient,
};

/// `U diag(max(sigma - alpha, 0)) V^T`.
pub fn shrink_threshold(x: &Matrix, alpha: f64) -> Result<Matrix> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::InvalidArgument(format!("threshold must be non-negative, got {alpha}")));
    }
    Ok(linalg::svd(x)?.recompose_with(|_, s| (s - alpha).max(0.0)))
}

/// Minimizer of `E ||y - W x||^2 + nu ||W C^{1/2}||_*^2` subject to `rank W <= r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSolution {
    pub rho: usize,
    pub alpha_rho: f64,
    pub kappa_rho: f64,
    pub nu: f64,
    pub rank_cap: usize,
    /// Singular values of `M_bar = C_yx C^{-1/2}`.
    pub singular_values: Vec<f64>,
    pub shrunk_sigma: Vec<f64>,
    #[serde(serialize_with = "serialize_matrix", deserialize_with = "deserialize_matrix")]
    pub w_star: Matrix,
    pub gap_holds: bool,
    /// `||M_bar - W C^{1/2}||_F^2 + nu ||W C^{1/2}||_*^2`, which differs from the
    /// population objective by the constant `tr C_yy - ||M_bar||_F^2`.
    pub objective_value: f64,
}

fn serialize_matrix<S: serde::Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&matrix_to_rows(m), s)
}

fn deserialize_matrix<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<Matrix, D::Error> {
    let rows: Vec<Vec<f64>> = serde::Deserialize::deserialize(d)?;
    network::matrix_from_rows(&rows).map_err(serde::de::Error::custom)
}

/// `M_bar = C_yx C^{-1/2}`.
pub fn whitened_target(cyx: &Matrix, m: &InputMoment) -> Result<Matrix> {
    m.check_dim(cyx.ncols())?;
    linalg::ensure_finite(cyx.view(), "C_yx")?;
    Ok(if m.is_identity() {
        cyx.clone()
    } else {
        cyx.dot(m.inv_sqrt_c())
    })
}

/// `alpha_rho = nu * sum_{i <= rho} sigma_i / (1 + rho nu)`.
fn threshold_for(sigma: &[f64], rho: usize, nu: f64) -> f64 {
    let head: f64 = sigma[..rho].iter().sum();
    nu * head / (1.0 + rho as f64 * nu)
}

pub fn solve_convex_envelope(
    cyx: &Matrix,
    m: &InputMoment,
    nu: f64,
    r: usize,
) -> Result<SpectrumSolution> {
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(Error::InvalidArgument(format!("nu must be finite and non-negative, got {nu}")));
    }
    if r == 0 {
        return Err(Error::InvalidArgument("rank cap must be at least 1".into()));
    }
    let m_bar = whitened_target(cyx, m)?;
    let spec = linalg::svd(&m_bar)?;
    let sigma = spec.singular_values.clone();
    let top = r.min(spec.rank());

    let mut chosen = None;
    for rho in (1..=top).rev() {
        let alpha = threshold_for(&sigma, rho, nu);
        let active = sigma[rho - 1] > alpha;
        let inactive = sigma[rho..top].iter().all(|&s| s <= alpha);
        if active && inactive {
            chosen = Some((rho, alpha));
            break;
        }
    }
    let (rho, alpha) = match chosen {
        Some(c) => c,
        None if top == 0 => (0, 0.0),
        None => {
            return Err(Error::Contract(format!(
                "no rank satisfies the optimality conditions for spectrum {sigma:?} at nu = {nu}"
            )))
        }
    };
    let shrunk: Vec<f64> = sigma
        .iter()
        .enumerate()
        .map(|(i, &s)| if i < rho { s - alpha } else { 0.0 })
        .collect();
    let w_bar = spec.recompose_with(|i, _| shrunk[i]);
    let w_star = if m.is_identity() {
        w_bar.clone()
    } else {
        w_bar.dot(m.inv_sqrt_c())
    };
    let residual = &m_bar - &w_bar;
    let nuclear: f64 = shrunk.iter().sum();
    let objective_value = residual.iter().map(|v| v * v).sum::<f64>() + nu * nuclear * nuclear;
    let gap_holds = gap_from_sigma(&sigma, nu).0;
    Ok(SpectrumSolution {
        rho,
        alpha_rho: alpha,
        kappa_rho: if rho == 0 { 0.0 } else { sigma[..rho].iter().sum::<f64>() / rho as f64 },
        nu,
        rank_cap: r,
        singular_values: sigma,
        shrunk_sigma: shrunk,
        w_star,
        gap_holds,
        objective_value,
    })
}

/// `||M_bar - W C^{1/2}||_F^2 + nu ||W C^{1/2}||_*^2` for any candidate map `W`.
pub fn envelope_objective(w: &Matrix, cyx: &Matrix, m: &InputMoment, nu: f64) -> Result<f64> {
    let m_bar = whitened_target(cyx, m)?;
    let w_bar = if m.is_identity() { w.clone() } else { w.dot(m.sqrt_c()) };
    if w_bar.dim() != m_bar.dim() {
        return Err(Error::Shape("candidate map does not match C_yx".into()));
    }
    let nuc = network::nuclear_norm(&w_bar)?;
    Ok((&m_bar - &w_bar).iter().map(|v| v * v).sum::<f64>() + nu * nuc * nuc)
}

/// Violations of the optimality conditions of a [`SpectrumSolution`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `max_{i <= rho} |sigma_bar_i + nu sum_j sigma_bar_j - sigma_i|`.
    pub stationarity: f64,
    /// `max_{rho < i <= r} (sigma_i - alpha_rho)^+` over numerically nonzero `sigma_i`.
    pub dual_feasibility: f64,
}

pub fn kkt_residuals(sol: &SpectrumSolution) -> KktResiduals {
    let sum: f64 = sol.shrunk_sigma.iter().sum();
    let stationarity = (0..sol.rho)
        .map(|i| (sol.shrunk_sigma[i] + sol.nu * sum - sol.singular_values[i]).abs())
        .fold(0.0, f64::max);
    let top = sol.singular_values.first().copied().unwrap_or(0.0);
    let dual_feasibility = sol
        .singular_values
        .iter()
        .enumerate()
        .skip(sol.rho)
        .take(sol.rank_cap.saturating_sub(sol.rho))
        .filter(|(_, &s)| s > RANK_TOL * top)
        .map(|(_, &s)| (s - sol.alpha_rho).max(0.0))
        .fold(0.0, f64::max);
    KktResiduals {
        stationarity,
        dual_feasibility,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    pub holds: bool,
    /// `(sigma_1 - sigma_2) - sigma_2 / nu`.
    pub margin: f64,
}

fn gap_from_sigma(sigma: &[f64], nu: f64) -> (bool, f64) {
    let s1 = sigma.first().copied().unwrap_or(0.0);
    let s2 = sigma.get(1).copied().unwrap_or(0.0);
    let top = s1.max(f64::MIN_POSITIVE);
    if s2 <= RANK_TOL * top {
        return (true, s1 - s2);
    }
    if nu == 0.0 {
        return (false, f64::NEG_INFINITY);
    }
    let margin = (s1 - s2) - s2 / nu;
    (margin >= 0.0, margin)
}

/// Whether `sigma_1(M_bar) - sigma_2(M_bar) >= sigma_2(M_bar) / nu`.
pub fn gap_condition(cyx: &Matrix, m: &InputMoment, nu: f64) -> Result<GapCheck> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::InvalidArgument(format!("nu must be positive, got {nu}")));
    }
    let sigma = linalg::svd(&whitened_target(cyx, m)?)?.singular_values;
    let (holds, margin) = gap_from_sigma(&sigma, nu);
    Ok(GapCheck { holds, margin })
}

/// An equalized factorization of `u v^T` through all-ones hidden layers:
/// `W_1 = 1 v^T / sqrt(d_1)`, `W_i = 1 1^T / sqrt(d_i d_{i-1})`, `W_{k+1} = u 1^T / sqrt(d_k)`.
///
/// Every equalization term comes out as `||u|| ||v||_C / prod d_j` whatever `C` is,
/// so the construction needs no knowledge of the input moment.
pub fn equalized_rank1(arch: &Architecture, u: &[f64], v: &[f64]) -> Result<WeightStack> {
    if u.len() != arch.output_dim() || v.len() != arch.input_dim() {
        return Err(Error::Shape(format!(
            "u has length {} and v has length {}, expected {} and {}",
            u.len(),
            v.len(),
            arch.output_dim(),
            arch.input_dim()
        )));
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("u and v must be finite".into()));
    }
    if u.iter().all(|&x| x == 0.0) || v.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidArgument("u and v must be nonzero".into()));
    }
    let w = arch.widths();
    let n = w.len() - 1;
    let mut layers = Vec::with_capacity(n);
    for i in 1..=n {
        let (rows, cols) = (w[i], w[i - 1]);
        let layer = if i == 1 {
            let s = (rows as f64).sqrt();
            Matrix::from_shape_fn((rows, cols), |(_, c)| v[c] / s)
        } else if i == n {
            let s = (cols as f64).sqrt();
            Matrix::from_shape_fn((rows, cols), |(r, _)| u[r] / s)
        } else {
            Matrix::from_elem((rows, cols), 1.0 / ((rows * cols) as f64).sqrt())
        };
        layers.push(layer);
    }
    WeightStack::new(layers)
}

/// Optimum for a single output neuron: `W* = C_yx C^{-1} / (1 + nu)` together
/// with its induced regularizer `nu ||W*||_C^2`.
pub fn single_output_optimum(cyx: &Matrix, m: &InputMoment, nu: f64) -> Result<(Matrix, f64)> {
    if cyx.nrows() != 1 {
        return Err(Error::Shape(format!(
            "single-output optimum needs one output row, got {}",
            cyx.nrows()
        )));
    }
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(Error::InvalidArgument(format!("nu must be finite and non-negative, got {nu}")));
    }
    let m_bar = whitened_target(cyx, m)?;
    let ls = if m.is_identity() { m_bar } else { m_bar.dot(m.inv_sqrt_c()) };
    let w = ls / (1.0 + nu);
    let theta = single_output_induced_regularizer(&w, m, nu)?;
    Ok((w, theta))
}

/// `Theta(w) = nu ||w||_C^2` for a single-output map.
pub fn single_output_induced_regularizer(w: &Matrix, m: &InputMoment, nu: f64) -> Result<f64> {
    if w.nrows() != 1 {
        return Err(Error::Shape("expected a single-output map".into()));
    }
    Ok(nu * network::c_norm_sq(w, m)?)
}

/// Options for [`induced_regularizer_estimate_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOptions {
    pub restarts: usize,
    pub seed: u64,
    pub init_noise: f64,
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub residual_tol: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            seed: 0,
            init_noise: 0.1,
            max_iterations: 100_000,
            gradient_tol: 1e-8,
            residual_tol: 1e-6,
        }
    }
}

/// Best implementation of a target map found by the estimator.
#[derive(Debug, Clone)]
pub struct ThetaEstimate {
    /// `R` of `weights`: an upper bound on the induced regularizer.
    pub value: f64,
    pub weights: WeightStack,
    /// `||W_{k+1 -> 1} - M||_F` of `weights`.
    pub residual: f64,
    /// `nu ||M C^{1/2}||_*^2`.
    pub lower_bound: f64,
    pub best_restart: usize,
    pub iterations: usize,
}

/// Upper estimate of `Theta(M) = inf { R(W) : W_{k+1 -> 1} = M }`.
pub fn induced_regularizer_estimate(
    target: &Matrix,
    arch: &Architecture,
    cfg: &DropoutConfig,
    m: &InputMoment,
    restarts: usize,
    seed: u64,
) -> Result<ThetaEstimate> {
    let opts = EstimatorOptions {
        restarts,
        seed,
        ..EstimatorOptions::default()
    };
    induced_regularizer_estimate_with(target, arch, cfg, m, &opts)
}

/// Minimizes `R` over implementations of `M` with an augmented Lagrangian:
/// the penalty weight grows tenfold whenever the constraint residual stalls,
/// and each subproblem is solved by gradient descent with Barzilai-Borwein
/// trial steps and Armijo backtracking. A final least-squares correction of
/// `W_1` makes the returned stack implement `M` to rounding error.
pub fn induced_regularizer_estimate_with(
    target: &Matrix,
    arch: &Architecture,
    cfg: &DropoutConfig,
    m: &InputMoment,
    opts: &EstimatorOptions,
) -> Result<ThetaEstimate> {
    if target.nrows() != arch.output_dim() || target.ncols() != arch.input_dim() {
        return Err(Error::Shape(format!(
            "target is {}x{} but the architecture maps {} -> {}",
            target.nrows(),
            target.ncols(),
            arch.input_dim(),
            arch.output_dim()
        )));
    }
    m.check_dim(arch.input_dim())?;
    if opts.restarts == 0 {
        return Err(Error::InvalidArgument("need at least one restart".into()));
    }
    let spec = linalg::svd(target)?;
    let rank = spec.rank();
    if rank > arch.max_rank() {
        return Err(Error::Contract(format!(
            "target has rank {rank} but the narrowest layer has width {}",
            arch.max_rank()
        )));
    }
    let nu = effective_nu(arch, cfg);
    let nuc_c = if m.is_identity() {
        spec.nuclear_norm()
    } else {
        network::nuclear_norm(&target.dot(m.sqrt_c()))?
    };
    let lower_bound = nu * nuc_c * nuc_c;
    if rank == 0 {
        let layers = arch
            .widths()
            .windows(2)
            .map(|w| Matrix::zeros((w[1], w[0])))
            .collect();
        return Ok(ThetaEstimate {
            value: 0.0,
            weights: WeightStack::new(layers)?,
            residual: 0.0,
            lower_bound,
            best_restart: 0,
            iterations: 0,
        });
    }

    // Theta is homogeneous of degree two in the map, so work at unit scale.
    let scale = linalg::frobenius(target);
    let unit = target / scale;
    let problem = Problem {
        target: &unit,
        lambda: cfg.lambda(),
        cfg,
        m,
    };
    let runs: Vec<Option<(f64, WeightStack, f64, usize)>> = (0..opts.restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(restart as u64);
            let init = balanced_init(arch, &linalg::svd(&unit).ok()?, rank, opts.init_noise, &mut rng);
            let (ws, iterations) = problem.minimize(init, opts);
            let ws = repair_first_layer(&ws, &unit).ok()?;
            let residual = linalg::frobenius(&(network_map(&ws) - &unit));
            if residual > opts.residual_tol {
                return None;
            }
            let value = explicit_regularizer(&ws, cfg, m).ok()?;
            Some((value, ws, residual, iterations))
        })
        .collect();

    let mut best: Option<(usize, (f64, WeightStack, f64, usize))> = None;
    for (i, run) in runs.into_iter().enumerate() {
        if let Some(run) = run {
            if best.as_ref().is_none_or(|(_, b)| run.0 < b.0) {
                best = Some((i, run));
            }
        }
    }
    let (best_restart, (value, ws, residual, iterations)) = best.ok_or(Error::NoConvergence {
        algorithm: "induced regularizer estimate",
        iterations: opts.max_iterations,
    })?;
    let mut layers = ws.into_layers();
    layers[0] *= scale;
    Ok(ThetaEstimate {
        value: value * scale * scale,
        weights: WeightStack::new(layers)?,
        residual: residual * scale,
        lower_bound,
        best_restart,
        iterations,
    })
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = Matrix::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng));
    let spec = linalg::svd(&g).expect("finite gaussian matrix");
    spec.u.slice(ndarray::s![.., ..cols]).to_owned()
}

/// `M = U S V^T` split evenly across layers through random orthonormal
/// embeddings of the rank-`rho` core, plus Gaussian noise.
fn balanced_init(
    arch: &Architecture,
    spec: &linalg::Spectrum,
    rho: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> WeightStack {
    let w = arch.widths();
    let n = w.len() - 1;
    let root = Array1::from_iter(
        spec.singular_values[..rho]
            .iter()
            .map(|s| s.powf(1.0 / n as f64)),
    );
    let embeds: Vec<Matrix> = (1..n).map(|i| random_orthonormal(w[i], rho, rng)).collect();
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let left = if i == n - 1 {
            spec.u.slice(ndarray::s![.., ..rho]).to_owned()
        } else {
            embeds[i].clone()
        };
        let right = if i == 0 {
            spec.v.slice(ndarray::s![.., ..rho]).to_owned()
        } else {
            embeds[i - 1].clone()
        };
        let mut core = left;
        for (mut col, r) in core.axis_iter_mut(Axis(1)).zip(&root) {
            col *= *r;
        }
        let mut layer = core.dot(&right.t());
        let std = noise / (w[i] as f64).sqrt();
        layer.mapv_inplace(|x| {
            let z: f64 = StandardNormal.sample(rng);
            x + std * z
        });
        layers.push(layer);
    }
    WeightStack::new(layers).expect("shapes follow the architecture")
}

/// `W_1 += A^+ (M - W_{k+1 -> 1})` with `A = W_{k+1} ... W_2`.
fn repair_first_layer(ws: &WeightStack, target: &Matrix) -> Result<WeightStack> {
    let n = ws.layers().len();
    let a = ws.chain(n, 2);
    let spec = linalg::svd(&a)?;
    let top = spec.singular_values.first().copied().unwrap_or(0.0);
    let pinv = {
        let mut v = spec.v.clone();
        for (mut col, &s) in v.axis_iter_mut(Axis(1)).zip(&spec.singular_values) {
            col *= if s > 1e-12 * top { 1.0 / s } else { 0.0 };
        }
        v.dot(&spec.u.t())
    };
    let correction = pinv.dot(&(target - &network_map(ws)));
    let mut layers = ws.layers().to_vec();
    layers[0] += &correction;
    WeightStack::new(layers)
}

struct Problem<'a> {
    target: &'a Matrix,
    lambda: f64,
    cfg: &'a DropoutConfig,
    m: &'a InputMoment,
}

struct Lagrangian<'a> {
    problem: &'a Problem<'a>,
    multiplier: Matrix,
    mu: f64,
}

impl Lagrangian<'_> {
    fn value(&self, ws: &WeightStack) -> f64 {
        let r = explicit_regularizer(ws, self.problem.cfg, self.problem.m).unwrap_or(f64::INFINITY);
        let gap = network_map(ws) - self.problem.target;
        r + (&self.multiplier * &gap).sum() + 0.5 * self.mu * gap.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, ws: &WeightStack) -> Vec<Matrix> {
        let p = self.problem;
        let mut grads = second_moment_gradient(ws, p.lambda, p.m);
        let (prefix, suffix) = chain_products(ws);
        let map = suffix[0].dot(ws.layer(1));
        let map_c = if p.m.is_identity() { map.clone() } else { map.dot(p.m.c()) };
        let pull = &self.multiplier + &((&map - p.target) * self.mu);
        // R = E||W_bar||_C^2 - ||M||_C^2; the constraint terms act through M.
        let outer = pull - map_c * 2.0;
        for (i, g) in grads.iter_mut().enumerate() {
            *g += &suffix[i].t().dot(&outer).dot(&prefix[i].t());
        }
        grads
    }
}

fn norm_sq(v: &[Matrix]) -> f64 {
    v.iter().map(|m| m.iter().map(|x| x * x).sum::<f64>()).sum()
}

fn dot(a: &[Matrix], b: &[Matrix]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y).sum()).sum()
}

fn step(ws: &WeightStack, grads: &[Matrix], t: f64) -> WeightStack {
    let layers = ws
        .layers()
        .iter()
        .zip(grads)
        .map(|(w, g)| w - &(g * t))
        .collect();
    WeightStack::new(layers).unwrap_or_else(|_| ws.clone())
}

impl Problem<'_> {
    fn minimize(&self, init: WeightStack, opts: &EstimatorOptions) -> (WeightStack, usize) {
        let mut lag = Lagrangian {
            problem: self,
            multiplier: Matrix::zeros(self.target.dim()),
            mu: 10.0,
        };
        let mut ws = init;
        let mut used = 0;
        let mut last_residual = f64::INFINITY;
        while used < opts.max_iterations {
            let budget = (opts.max_iterations - used).min(SUBPROBLEM_ITERATIONS);
            let outcome = self.descend(&lag, ws, budget, opts.gradient_tol);
            ws = outcome.ws;
            used += outcome.iterations;
            let gap = network_map(&ws) - self.target;
            let residual = linalg::frobenius(&gap);
            let settled = outcome.grad_norm <= opts.gradient_tol || outcome.stalled;
            if residual <= opts.residual_tol && settled {
                break;
            }
            lag.multiplier.scaled_add(lag.mu, &gap);
            if residual > 0.25 * last_residual && lag.mu < 1e8 {
                lag.mu *= 10.0;
            }
            last_residual = residual;
            if outcome.iterations == 0 {
                break;
            }
        }
        (ws, used)
    }

    /// Gradient descent on one subproblem.
    fn descend(
        &self,
        lag: &Lagrangian<'_>,
        mut ws: WeightStack,
        budget: usize,
        tol: f64,
    ) -> Descent {
        let mut value = lag.value(&ws);
        let mut grad = lag.gradient(&ws);
        let mut t = 1e-2 / (1.0 + lag.mu);
        let mut prev: Option<(WeightStack, Vec<Matrix>)> = None;
        let mut checkpoint = value;
        for it in 0..budget {
            let g2 = norm_sq(&grad);
            if g2.sqrt() <= tol {
                return Descent { ws, iterations: it, grad_norm: g2.sqrt(), stalled: false };
            }
            if it > 0 && it % STALL_WINDOW == 0 {
                if checkpoint - value <= 1e-12 * value.abs().max(1e-12) {
                    return Descent { ws, iterations: it, grad_norm: g2.sqrt(), stalled: true };
                }
                checkpoint = value;
            }
            if let Some((pw, pg)) = &prev {
                let s: Vec<Matrix> = ws.layers().iter().zip(pw.layers()).map(|(a, b)| a - b).collect();
                let y: Vec<Matrix> = grad.iter().zip(pg).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 0.0 {
                    t = norm_sq(&s) / sy;
                }
            }
            let mut accepted = None;
            for _ in 0..60 {
                let cand = step(&ws, &grad, t);
                let v = lag.value(&cand);
                if v <= value - 1e-4 * t * g2 {
                    accepted = Some((cand, v));
                    break;
                }
                t *= 0.5;
            }
            let Some((cand, v)) = accepted else {
                return Descent { ws, iterations: it, grad_norm: g2.sqrt(), stalled: true };
            };
            let g = lag.gradient(&cand);
            prev = Some((std::mem::replace(&mut ws, cand), std::mem::replace(&mut grad, g)));
            value = v;
        }
        let grad_norm = norm_sq(&grad).sqrt();
        Descent { ws, iterations: budget, grad_norm, stalled: false }
    }
}

/// Iteration cap for one augmented-Lagrangian subproblem.
const SUBPROBLEM_ITERATIONS: usize = 20_000;
/// A subproblem counts as stalled when this many steps gain nothing measurable.
const STALL_WINDOW: usize = 200;

struct Descent {
    ws: WeightStack,
    iterations: usize,
    grad_norm: f64,
    stalled: bool,
}
