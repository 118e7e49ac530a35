//! Complete-data and marginal log-likelihoods.
//!
//! A subject's covariates are constant between events, so each intensity is
//! constant on the intervals of the merged grid. Intervals of one event type
//! that share the same `(x, z)` are pooled into a [`Cell`] carrying the total
//! exposure and event count; every integral and score is then a finite sum
//! over cells.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::covariates::{refine_breakpoints, CovariateError, SubjectPanel};
use crate::events::EventSequence;
use crate::model::{GaussianPrior, ModelError, ModelParams};
use crate::num::{cast, log_sum_exp, to_f64, Scalar};
use crate::rng;

pub const MODE_MAX_ITERS: usize = 50;
pub const MODE_GRAD_TOL: f64 = 1e-8;
pub const MODE_DECREMENT_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error("event of type {event_type} at time {time} while not at risk")]
    EventNotAtRisk { event_type: usize, time: f64 },
    #[error("posterior mode search failed after {iterations} iterations (gradient norm {grad_norm:e})")]
    ModeSearchFailure { iterations: usize, grad_norm: f64 },
    #[error("quadrature unstable: {0}")]
    QuadratureUnstable(String),
    #[error("invalid quadrature configuration: {0}")]
    InvalidConfig(String),
}

/// Pooled exposure of one event type over a set of intervals sharing `(x, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub exposure: f64,
    pub events: u32,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// Per-subject evaluation structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectWork {
    pub subject_id: String,
    pub grid: Vec<f64>,
    /// `cells[j]`: cells of event type `j`, in order of first appearance.
    pub cells: Vec<Vec<Cell>>,
    /// Events per type.
    pub counts: Vec<u32>,
}

fn key_of(x: &[f64], z: &[f64]) -> Vec<u64> {
    x.iter().chain(z).map(|v| v.to_bits()).collect()
}

impl SubjectWork {
    pub fn new(panel: &SubjectPanel, sequence: &EventSequence) -> Result<Self, LikError> {
        let grid = refine_breakpoints(panel);
        let types = panel.x.len();
        let mut cells: Vec<Vec<Cell>> = vec![Vec::new(); types];
        let mut counts = vec![0u32; types];
        for j in 0..types {
            let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
            let mut cell_for = |x: &[f64], z: &[f64], cells: &mut Vec<Cell>| -> usize {
                *index.entry(key_of(x, z)).or_insert_with(|| {
                    cells.push(Cell { exposure: 0.0, events: 0, x: x.to_vec(), z: z.to_vec() });
                    cells.len() - 1
                })
            };
            for w in grid.windows(2) {
                let (lo, hi) = (w[0], w[1]);
                if panel.at_risk[j].value(hi)?[0] == 0.0 {
                    continue;
                }
                let c = cell_for(panel.x[j].value(hi)?, panel.z[j].value(hi)?, &mut cells[j]);
                cells[j][c].exposure += hi - lo;
            }
            for rec in sequence.records.iter().filter(|r| r.event_type == j) {
                if rec.time > panel.end {
                    continue;
                }
                if panel.at_risk[j].value(rec.time)?[0] == 0.0 {
                    return Err(LikError::EventNotAtRisk { event_type: j, time: rec.time });
                }
                let c = cell_for(panel.x[j].value(rec.time)?, panel.z[j].value(rec.time)?, &mut cells[j]);
                cells[j][c].events += 1;
                counts[j] += 1;
            }
        }
        Ok(Self { subject_id: panel.subject_id.clone(), grid, cells, counts })
    }

    pub fn types(&self) -> usize {
        self.cells.len()
    }
}

/// `beta0[j] + beta[j]·x`.
#[inline]
pub fn fixed_predictor<T: Scalar>(params: &ModelParams<T>, j: usize, x: &[f64]) -> T {
    let mut eta = params.beta0[j];
    for (b, &v) in params.beta[j].iter().zip(x) {
        if v != 0.0 {
            eta += *b * cast::<T>(v);
        }
    }
    eta
}

/// `A_jᵀ z`, the direction in which `theta` moves the log-intensity.
pub fn factor_direction<T: Scalar>(params: &ModelParams<T>, j: usize, z: &[f64]) -> Vec<T> {
    let a = &params.loadings[j];
    let mut w = vec![T::zero(); a.ncols()];
    for (l, &zl) in z.iter().enumerate() {
        if zl == 0.0 {
            continue;
        }
        let zl: T = cast(zl);
        for (k, wk) in w.iter_mut().enumerate() {
            *wk += a[(l, k)] * zl;
        }
    }
    w
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

fn check_dims<T: Scalar>(params: &ModelParams<T>, work: &SubjectWork, theta: &[T]) -> Result<(), LikError> {
    if work.types() != params.types() || theta.len() != params.factors() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} types / theta {} against parameters with {} types / {} factors",
            work.types(),
            theta.len(),
            params.types(),
            params.factors()
        ))
        .into());
    }
    Ok(())
}

/// `∫ Y_j(t) exp(eta_j(t)) dt` over the observation window, in closed form.
pub fn cumulative_integral<T: Scalar>(params: &ModelParams<T>, work: &SubjectWork, j: usize, theta: &[T]) -> T {
    let mut total = T::zero();
    for c in &work.cells[j] {
        if c.exposure > 0.0 {
            let eta = fixed_predictor(params, j, &c.x) + dot(&factor_direction(params, j, &c.z), theta);
            total += cast::<T>(c.exposure) * eta.exp();
        }
    }
    total
}

/// Event-process part of the complete-data log-likelihood (no prior term).
pub fn conditional_loglik<T: Scalar>(params: &ModelParams<T>, work: &SubjectWork, theta: &[T]) -> Result<T, LikError> {
    check_dims(params, work, theta)?;
    let mut total = T::zero();
    for j in 0..work.types() {
        for c in &work.cells[j] {
            let eta = fixed_predictor(params, j, &c.x) + dot(&factor_direction(params, j, &c.z), theta);
            if c.events > 0 {
                total += cast::<T>(f64::from(c.events)) * eta;
            }
            if c.exposure > 0.0 {
                total -= cast::<T>(c.exposure) * eta.exp();
            }
        }
    }
    Ok(total)
}

/// Complete-data log-likelihood of one subject, including `log φ_K(θ; 0, Σ)`.
pub fn complete_loglik<T: Scalar>(params: &ModelParams<T>, work: &SubjectWork, theta: &[T]) -> Result<T, LikError> {
    let prior = GaussianPrior::new(&params.sigma)?;
    Ok(conditional_loglik(params, work, theta)? + prior.log_density(theta))
}

/// `∂ log φ_K(θ; 0, Σ) / ∂Σ = ½(Σ⁻¹θθᵀΣ⁻¹ − Σ⁻¹)`, as a symmetric matrix.
pub fn sigma_score<T: Scalar>(prior: &GaussianPrior<T>, theta: &[T]) -> DMatrix<T> {
    let inv = prior.inverse();
    let v = inv * DVector::from_column_slice(theta);
    (&v * v.transpose() - inv) * cast::<T>(0.5)
}

/// Analytic gradient of [`complete_loglik`] in `beta0`, `beta` and the
/// loadings. The `sigma` field of the result carries the symmetric-matrix
/// derivative from [`sigma_score`].
pub fn complete_score<T: Scalar>(
    params: &ModelParams<T>,
    work: &SubjectWork,
    theta: &[T],
) -> Result<ModelParams<T>, LikError> {
    check_dims(params, work, theta)?;
    let prior = GaussianPrior::new(&params.sigma)?;
    let mut g = ModelParams::zeros(&params.dims());
    for j in 0..work.types() {
        for c in &work.cells[j] {
            let eta = fixed_predictor(params, j, &c.x) + dot(&factor_direction(params, j, &c.z), theta);
            let resid = cast::<T>(f64::from(c.events)) - cast::<T>(c.exposure) * eta.exp();
            g.beta0[j] += resid;
            for (l, &xl) in c.x.iter().enumerate() {
                if xl != 0.0 {
                    g.beta[j][l] += resid * cast::<T>(xl);
                }
            }
            for (l, &zl) in c.z.iter().enumerate() {
                if zl != 0.0 {
                    let rz = resid * cast::<T>(zl);
                    for (k, &th) in theta.iter().enumerate() {
                        g.loadings[j][(l, k)] += rz * th;
                    }
                }
            }
        }
    }
    g.sigma = sigma_score(&prior, theta);
    Ok(g)
}

/// A subject's complete-data log-likelihood as a function of `theta` alone:
/// `constant + Σ_g [count_g θ·w_g − exp(log_mass_g + θ·w_g)] + log φ(θ)`.
/// Cells sharing a direction `w = A_jᵀz` are pooled; cells with `w = 0`
/// fold into the constant.
#[derive(Debug, Clone)]
pub struct ThetaProfile<T: Scalar> {
    pub constant: T,
    pub groups: Vec<ProfileGroup<T>>,
    pub prior: GaussianPrior<T>,
}

#[derive(Debug, Clone)]
pub struct ProfileGroup<T: Scalar> {
    pub count: T,
    pub log_mass: T,
    pub w: Vec<T>,
}

/// Value, gradient and Hessian of a [`ThetaProfile`].
pub struct Derivatives<T: Scalar> {
    pub value: T,
    pub grad: DVector<T>,
    pub hessian: DMatrix<T>,
}

impl<T: Scalar> ThetaProfile<T> {
    pub fn new(params: &ModelParams<T>, work: &SubjectWork) -> Result<Self, LikError> {
        let prior = GaussianPrior::new(&params.sigma)?;
        Ok(Self::with_prior(params, work, prior))
    }

    pub fn with_prior(params: &ModelParams<T>, work: &SubjectWork, prior: GaussianPrior<T>) -> Self {
        let mut constant = T::zero();
        let mut groups: Vec<ProfileGroup<T>> = Vec::new();
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let neg_inf: T = cast(f64::NEG_INFINITY);
        for j in 0..work.types() {
            for c in &work.cells[j] {
                let base = fixed_predictor(params, j, &c.x);
                let w = factor_direction(params, j, &c.z);
                let n: T = cast(f64::from(c.events));
                if c.events > 0 {
                    constant += n * base;
                }
                if w.iter().all(|v| *v == T::zero()) {
                    if c.exposure > 0.0 {
                        constant -= cast::<T>(c.exposure) * base.exp();
                    }
                    continue;
                }
                let key: Vec<u64> = w.iter().map(|v| to_f64(*v).to_bits()).collect();
                let g = *index.entry(key).or_insert_with(|| {
                    groups.push(ProfileGroup { count: T::zero(), log_mass: neg_inf, w: w.clone() });
                    groups.len() - 1
                });
                groups[g].count += n;
                if c.exposure > 0.0 {
                    let lm = cast::<T>(c.exposure).ln() + base;
                    let cur = groups[g].log_mass;
                    groups[g].log_mass = if cur == neg_inf {
                        lm
                    } else {
                        let m = cur.max(lm);
                        m + ((cur - m).exp() + (lm - m).exp()).ln()
                    };
                }
            }
        }
        Self { constant, groups, prior }
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    /// Conditional log-likelihood given `theta` (no prior term).
    pub fn conditional(&self, theta: &[T]) -> T {
        let mut v = self.constant;
        for g in &self.groups {
            let s = dot(&g.w, theta);
            v += g.count * s - (g.log_mass + s).exp();
        }
        v
    }

    /// Complete-data log-likelihood at `theta`.
    pub fn log_target(&self, theta: &[T]) -> T {
        self.conditional(theta) + self.prior.log_density(theta)
    }

    pub fn derivatives(&self, theta: &[T]) -> Derivatives<T> {
        let k = self.dim();
        let mut grad = DVector::from_vec(self.prior.grad_log_density(theta));
        let mut hessian = -self.prior.inverse().clone();
        let mut value = self.constant + self.prior.log_density(theta);
        for g in &self.groups {
            let s = dot(&g.w, theta);
            let mu = (g.log_mass + s).exp();
            value += g.count * s - mu;
            let r = g.count - mu;
            for a in 0..k {
                grad[a] += r * g.w[a];
                for b in 0..k {
                    hessian[(a, b)] -= mu * g.w[a] * g.w[b];
                }
            }
        }
        Derivatives { value, grad, hessian }
    }
}

/// Posterior mode of `theta` with the Cholesky factor `L` of the negative
/// Hessian there (`L Lᵀ = −∇²`).
#[derive(Debug, Clone)]
pub struct Mode<T: Scalar> {
    pub theta: Vec<T>,
    pub value: T,
    pub chol_l: DMatrix<T>,
    pub iterations: usize,
}

/// Damped Newton search for the posterior mode. The log target is strictly
/// concave in `theta`, so the search starts at zero.
pub fn find_mode<T: Scalar>(profile: &ThetaProfile<T>) -> Result<Mode<T>, LikError> {
    let k = profile.dim();
    let mut theta = vec![T::zero(); k];
    let tol: T = cast(MODE_GRAD_TOL);
    let mut grad_norm = f64::INFINITY;
    for it in 0..=MODE_MAX_ITERS {
        let d = profile.derivatives(&theta);
        if !d.value.is_finite() {
            break;
        }
        let neg_h = -d.hessian.clone();
        let chol = neg_h.cholesky().ok_or_else(|| LikError::QuadratureUnstable("negative Hessian not positive definite".into()))?;
        let gmax = d.grad.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        grad_norm = to_f64(gmax);
        let step = chol.solve(&d.grad);
        // Stop on a small gradient, a negligible Newton decrement (stiff
        // directions under a near-singular covariance), or steps below the
        // resolution of the current iterate.
        let scale = theta.iter().fold(T::one(), |m, v| m.max(v.abs()));
        let tiny = step.iter().all(|s| s.abs() <= scale * cast::<T>(1e-14));
        let decrement = d.grad.dot(&step);
        if gmax <= tol || tiny || decrement <= cast::<T>(MODE_DECREMENT_TOL) {
            return Ok(Mode { theta, value: d.value, chol_l: chol.l(), iterations: it });
        }
        if it == MODE_MAX_ITERS {
            break;
        }
        let mut t = T::one();
        let half: T = cast(0.5);
        let mut moved = false;
        for _ in 0..40 {
            let cand: Vec<T> = theta.iter().zip(step.iter()).map(|(a, s)| *a + t * *s).collect();
            let v = profile.log_target(&cand);
            if v >= d.value {
                theta = cand;
                moved = true;
                break;
            }
            t *= half;
        }
        if !moved {
            return Ok(Mode { theta, value: d.value, chol_l: chol.l(), iterations: it });
        }
    }
    Err(LikError::ModeSearchFailure { iterations: MODE_MAX_ITERS, grad_norm })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadMethod {
    AdaptiveGaussHermite,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    pub method: QuadMethod,
    pub nodes_per_dim: usize,
    pub mc_draws: usize,
    /// Seed for Monte Carlo draws; each subject draws from its own stream.
    pub seed: u64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { method: QuadMethod::AdaptiveGaussHermite, nodes_per_dim: 15, mc_draws: 4000, seed: 0 }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<(), LikError> {
        if self.nodes_per_dim < 3 {
            return Err(LikError::InvalidConfig("nodes_per_dim must be at least 3".into()));
        }
        if self.mc_draws < 100 {
            return Err(LikError::InvalidConfig("mc_draws must be at least 100".into()));
        }
        Ok(())
    }
}

/// Gauss–Hermite rule for the weight `exp(−x²)` by the Golub–Welsch
/// eigenvalue method. Nodes ascend.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize to remove eigen-solver asymmetry.
    for i in 0..n / 2 {
        let (a, b) = (pairs[i], pairs[n - 1 - i]);
        let x = 0.5 * (b.0 - a.0);
        let w = 0.5 * (a.1 + b.1);
        pairs[i] = (-x, w);
        pairs[n - 1 - i] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalEstimate {
    pub value: f64,
    /// Monte Carlo standard error of `value` (0 for quadrature).
    pub mc_se: f64,
    pub method: QuadMethod,
    /// True when AGHQ was requested but the mode search failed.
    pub fell_back: bool,
}

/// `log ∫ exp(complete_loglik(θ)) dθ` for one subject.
pub fn marginal_loglik<T: Scalar>(
    params: &ModelParams<T>,
    work: &SubjectWork,
    quad: &QuadratureConfig,
) -> Result<MarginalEstimate, LikError> {
    quad.validate()?;
    let profile = ThetaProfile::new(params, work)?;
    marginal_from_profile(&profile, &work.subject_id, quad)
}

pub fn marginal_from_profile<T: Scalar>(
    profile: &ThetaProfile<T>,
    subject_id: &str,
    quad: &QuadratureConfig,
) -> Result<MarginalEstimate, LikError> {
    let k = profile.dim();
    if k == 0 || profile.groups.is_empty() {
        // The integrand is the conditional likelihood times the prior density.
        let v = to_f64(profile.conditional(&vec![T::zero(); k]));
        return Ok(MarginalEstimate { value: v, mc_se: 0.0, method: quad.method, fell_back: false });
    }
    match quad.method {
        QuadMethod::AdaptiveGaussHermite => {
            if k > 4 {
                return Err(LikError::QuadratureUnstable(format!("adaptive quadrature supports K <= 4, got {k}")));
            }
            match find_mode(profile) {
                Ok(mode) => aghq(profile, &mode, quad.nodes_per_dim),
                Err(LikError::ModeSearchFailure { iterations, grad_norm }) => {
                    log::warn!(
                        "subject {subject_id}: mode search failed ({iterations} iterations, gradient {grad_norm:e}); using Monte Carlo"
                    );
                    let mut est = monte_carlo(profile, subject_id, quad)?;
                    est.fell_back = true;
                    Ok(est)
                }
                Err(e) => Err(e),
            }
        }
        QuadMethod::MonteCarlo => monte_carlo(profile, subject_id, quad),
    }
}

fn aghq<T: Scalar>(profile: &ThetaProfile<T>, mode: &Mode<T>, nodes: usize) -> Result<MarginalEstimate, LikError> {
    let k = profile.dim();
    let (x, w) = gauss_hermite(nodes);
    let lt = mode.chol_l.transpose();
    let sqrt2: T = cast(std::f64::consts::SQRT_2);
    let mut log_det_l = T::zero();
    for i in 0..k {
        log_det_l += mode.chol_l[(i, i)].ln();
    }
    let total = nodes.pow(k as u32);
    let mut terms = Vec::with_capacity(total);
    let mut idx = vec![0usize; k];
    for _ in 0..total {
        let u = DVector::from_iterator(k, idx.iter().map(|&i| cast::<T>(x[i])));
        let shift = lt.solve_upper_triangular(&u).expect("positive diagonal") * sqrt2;
        let theta: Vec<T> = mode.theta.iter().zip(shift.iter()).map(|(a, b)| *a + *b).collect();
        let lw = idx.iter().fold(T::zero(), |s, &i| s + cast::<T>(w[i].ln()));
        let term = lw + profile.log_target(&theta) + u.norm_squared();
        if to_f64(term).is_nan() {
            return Err(LikError::QuadratureUnstable("non-finite integrand at a quadrature node".into()));
        }
        terms.push(term);
        for d in 0..k {
            idx[d] += 1;
            if idx[d] < nodes {
                break;
            }
            idx[d] = 0;
        }
    }
    let value = cast::<T>(0.5 * k as f64 * std::f64::consts::LN_2) - log_det_l + log_sum_exp(&terms);
    if !value.is_finite() {
        return Err(LikError::QuadratureUnstable("non-finite marginal likelihood".into()));
    }
    Ok(MarginalEstimate { value: to_f64(value), mc_se: 0.0, method: QuadMethod::AdaptiveGaussHermite, fell_back: false })
}

fn monte_carlo<T: Scalar>(
    profile: &ThetaProfile<T>,
    subject_id: &str,
    quad: &QuadratureConfig,
) -> Result<MarginalEstimate, LikError> {
    let k = profile.dim();
    let l = profile.prior.cholesky_l();
    let mut rng = rng::stream(quad.seed, rng::purpose::QUADRATURE, rng::hash_str(subject_id));
    let mut terms = Vec::with_capacity(quad.mc_draws);
    for _ in 0..quad.mc_draws {
        let e = DVector::from_iterator(k, (0..k).map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            cast::<T>(v)
        }));
        let theta = &l * e;
        terms.push(profile.conditional(theta.as_slice()));
    }
    let r = quad.mc_draws as f64;
    let lse = log_sum_exp(&terms);
    if !lse.is_finite() {
        return Err(LikError::QuadratureUnstable("Monte Carlo estimate is not finite".into()));
    }
    let value = to_f64(lse) - r.ln();
    // Delta-method standard error of the log of the sample mean.
    let ratios: Vec<f64> = terms.iter().map(|t| (to_f64(*t - lse)).exp() * r).collect();
    let mean = ratios.iter().sum::<f64>() / r;
    let var = ratios.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    let mc_se = (var / r).sqrt() / mean;
    Ok(MarginalEstimate { value, mc_se, method: QuadMethod::MonteCarlo, fell_back: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::{build_panel, CovariateRule, CovariateSpec};
    use crate::events::{EventCatalog, EventRecord};
    use crate::model::Dims;

    fn one_type_work(events: &[f64], end: f64) -> SubjectWork {
        let catalog = EventCatalog::new(["A"], None).unwrap();
        let spec = CovariateSpec::shared(vec![CovariateRule::Constant], 1);
        let seq = EventSequence {
            subject_id: "s".into(),
            records: events.iter().map(|&t| EventRecord { event_type: 0, time: t }).collect(),
            censor_time: end,
        };
        let panel = build_panel(&seq, &spec, &catalog).unwrap();
        SubjectWork::new(&panel, &seq).unwrap()
    }

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        let (x, w) = gauss_hermite(15);
        let pi_sqrt = std::f64::consts::PI.sqrt();
        let m0: f64 = w.iter().sum();
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m0 - pi_sqrt).abs() < 1e-13);
        assert!((m2 - pi_sqrt / 2.0).abs() < 1e-13);
        assert!((m4 - 0.75 * pi_sqrt).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_integral() {
        let work = one_type_work(&[], 2.0);
        let mut p = ModelParams::<f64>::zeros(&Dims { fixed: vec![1], random: vec![1], factors: 1 });
        p.beta0[0] = 0.7;
        assert!((cumulative_integral(&p, &work, 0, &[0.0]) - 2.0 * 0.7f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn one_event_complete_loglik() {
        let work = one_type_work(&[1.0], 2.0);
        let p = ModelParams::<f64>::zeros(&Dims { fixed: vec![1], random: vec![1], factors: 1 });
        let v = complete_loglik(&p, &work, &[0.0]).unwrap();
        let expect = -2.0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn profile_matches_direct_evaluation() {
        let work = one_type_work(&[0.4, 1.3, 2.0], 3.5);
        let mut p = ModelParams::<f64>::zeros(&Dims { fixed: vec![1], random: vec![1], factors: 1 });
        p.beta0[0] = -0.3;
        p.beta[0][0] = 0.2;
        p.loadings[0][(0, 0)] = 0.8;
        let prof = ThetaProfile::new(&p, &work).unwrap();
        for &t in &[-1.0, 0.0, 0.6] {
            let a = complete_loglik(&p, &work, &[t]).unwrap();
            assert!((prof.log_target(&[t]) - a).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_loadings_make_marginal_exact() {
        let work = one_type_work(&[0.4, 1.3], 3.0);
        let mut p = ModelParams::<f64>::zeros(&Dims { fixed: vec![1], random: vec![1], factors: 2 });
        p.beta0[0] = -0.5;
        let m = marginal_loglik(&p, &work, &QuadratureConfig::default()).unwrap();
        let c = conditional_loglik(&p, &work, &[0.0, 0.0]).unwrap();
        assert_eq!(m.value, c);
    }

    #[test]
    fn aghq_matches_fine_riemann_sum() {
        let work = one_type_work(&[1.0], 2.0);
        let mut p = ModelParams::<f64>::zeros(&Dims { fixed: vec![1], random: vec![1], factors: 1 });
        p.beta0[0] = -1.0;
        p.loadings[0][(0, 0)] = 0.7;
        let m = marginal_loglik(&p, &work, &QuadratureConfig::default()).unwrap();
        let prof = ThetaProfile::new(&p, &work).unwrap();
        let h = 1e-3;
        let mut s = 0.0;
        let mut t = -12.0;
        while t <= 12.0 {
            s += prof.log_target(&[t]).exp() * h;
            t += h;
        }
        assert!((m.value - s.ln()).abs() < 1e-7, "{} vs {}", m.value, s.ln());
    }
}
