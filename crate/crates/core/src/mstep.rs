//! Penalized M-step: coordinate descent on each `Ψ_j` with SCAD handled by
//! local linear approximation, Newton steps for intercepts, and the
//! closed-form covariance update.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::lik::SubjectWork;
use crate::model::{
    apply_mask_in_place, floor_eigenvalues, scad_derivative, scad_penalty, soft_threshold, AnchorMode, BetaConstraint,
    ConstraintMask, GaussianPrior, LoadingConstraint, ModelError, PenaltyConfig, SIGMA_EIGEN_FLOOR,
};
use crate::num::compensated_sum;
use crate::Params;

pub const MAX_HALVINGS: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MstepError {
    #[error("coordinate has no exposure in the current data")]
    ZeroExposure,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Sparse cell data of one event type across all subjects. Built once per
/// fit; only the latent draws change between iterations.
#[derive(Debug, Clone, Default)]
pub struct TypeCells {
    pub subject: Vec<usize>,
    pub exposure: Vec<f64>,
    pub events: Vec<f64>,
    pub x_rows: Vec<Vec<(usize, f64)>>,
    pub z_rows: Vec<Vec<(usize, f64)>>,
    /// Per fixed-effect covariate: `(cell, x value)` for nonzero values.
    pub beta_cols: Vec<Vec<(usize, f64)>>,
    /// Per random-effect covariate: `(cell, z value)` for nonzero values.
    pub z_cols: Vec<Vec<(usize, f64)>>,
}

impl TypeCells {
    pub fn len(&self) -> usize {
        self.subject.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct CellIndex {
    pub types: Vec<TypeCells>,
    pub subjects: usize,
}

impl CellIndex {
    pub fn new(works: &[SubjectWork], fixed_dims: &[usize], random_dims: &[usize]) -> Self {
        let types = fixed_dims.len();
        let mut out: Vec<TypeCells> = (0..types)
            .map(|j| TypeCells {
                beta_cols: vec![Vec::new(); fixed_dims[j]],
                z_cols: vec![Vec::new(); random_dims[j]],
                ..TypeCells::default()
            })
            .collect();
        for (i, w) in works.iter().enumerate() {
            for (j, cells) in w.cells.iter().enumerate() {
                let t = &mut out[j];
                for c in cells {
                    if c.exposure == 0.0 && c.events == 0 {
                        continue;
                    }
                    let idx = t.subject.len();
                    t.subject.push(i);
                    t.exposure.push(c.exposure);
                    t.events.push(f64::from(c.events));
                    let xr: Vec<(usize, f64)> = c.x.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
                    let zr: Vec<(usize, f64)> = c.z.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
                    for &(l, v) in &xr {
                        t.beta_cols[l].push((idx, v));
                    }
                    for &(l, v) in &zr {
                        t.z_cols[l].push((idx, v));
                    }
                    t.x_rows.push(xr);
                    t.z_rows.push(zr);
                }
            }
        }
        Self { types: out, subjects: works.len() }
    }
}

/// A coordinate of `Ψ_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiCoord {
    Intercept,
    Beta(usize),
    Loading(usize, usize),
}

/// Linear predictors and expected counts of every cell of one type under
/// the current parameters and latent draws.
#[derive(Debug, Clone)]
pub struct PsiCache<'a> {
    pub cells: &'a TypeCells,
    pub thetas: &'a [Vec<f64>],
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
}

impl<'a> PsiCache<'a> {
    pub fn new(cells: &'a TypeCells, thetas: &'a [Vec<f64>], params: &Params, j: usize) -> Self {
        let a = &params.loadings[j];
        let k = a.ncols();
        let mut eta = Vec::with_capacity(cells.len());
        let mut mu = Vec::with_capacity(cells.len());
        for c in 0..cells.len() {
            let mut e = params.beta0[j];
            for &(l, v) in &cells.x_rows[c] {
                e += params.beta[j][l] * v;
            }
            let th = &thetas[cells.subject[c]];
            for &(l, v) in &cells.z_rows[c] {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[(l, kk)] * th[kk];
                }
                e += s * v;
            }
            eta.push(e);
            mu.push(cells.exposure[c] * e.exp());
        }
        Self { cells, thetas, eta, mu }
    }

    /// `Ψ_j` at the current state.
    pub fn value(&self) -> f64 {
        let mut s = 0.0;
        for c in 0..self.eta.len() {
            if self.cells.events[c] > 0.0 {
                s += self.cells.events[c] * self.eta[c];
            }
            s -= self.mu[c];
        }
        s
    }

    fn for_column(&self, coord: PsiCoord, mut f: impl FnMut(usize, f64)) {
        match coord {
            PsiCoord::Intercept => (0..self.eta.len()).for_each(|c| f(c, 1.0)),
            PsiCoord::Beta(l) => self.cells.beta_cols[l].iter().for_each(|&(c, v)| f(c, v)),
            PsiCoord::Loading(l, k) => self.cells.z_cols[l].iter().for_each(|&(c, v)| {
                let w = v * self.thetas[self.cells.subject[c]][k];
                if w != 0.0 {
                    f(c, w)
                }
            }),
        }
    }

    /// Change in `Ψ_j` if the coordinate moves by `delta`.
    pub fn delta_value(&self, coord: PsiCoord, delta: f64) -> f64 {
        let mut s = 0.0;
        self.for_column(coord, |c, f| {
            let d = delta * f;
            s += self.cells.events[c] * d - self.mu[c] * d.exp_m1();
        });
        s
    }

    /// Moves the coordinate by `delta`, updating the affected cells.
    pub fn shift(&mut self, coord: PsiCoord, delta: f64) {
        if delta == 0.0 {
            return;
        }
        let mut touched = Vec::new();
        self.for_column(coord, |c, f| touched.push((c, f)));
        for (c, f) in touched {
            self.eta[c] += delta * f;
            self.mu[c] = self.cells.exposure[c] * self.eta[c].exp();
        }
    }
}

/// `(Ψ_j, ∂Ψ_j, ∂²Ψ_j)` in one coordinate at the current state.
pub fn psi_partials(cache: &PsiCache<'_>, coord: PsiCoord) -> Result<(f64, f64, f64), MstepError> {
    let (d1, d2) = derivatives(cache, coord)?;
    Ok((cache.value(), d1, d2))
}

fn derivatives(cache: &PsiCache<'_>, coord: PsiCoord) -> Result<(f64, f64), MstepError> {
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    cache.for_column(coord, |c, f| {
        d1 += (cache.cells.events[c] - cache.mu[c]) * f;
        d2 -= cache.mu[c] * f * f;
    });
    if d2 == 0.0 {
        return Err(MstepError::ZeroExposure);
    }
    Ok((d1, d2))
}

/// Takes the proposed move `delta` or the first of its halvings that does
/// not decrease `Ψ_j − penalty`. Returns the applied move (0 if none).
fn halving_move(cache: &mut PsiCache<'_>, coord: PsiCoord, current: f64, delta: f64, penalty: impl Fn(f64) -> f64) -> f64 {
    let base_pen = penalty(current);
    let mut d = delta;
    for _ in 0..=MAX_HALVINGS {
        if d == 0.0 {
            return 0.0;
        }
        let gain = cache.delta_value(coord, d) - (penalty(current + d) - base_pen);
        if gain >= 0.0 {
            cache.shift(coord, d);
            return d;
        }
        d *= 0.5;
    }
    0.0
}

/// Newton step for `beta0[j]` with step-halving. Returns the new value.
pub fn update_intercept(cache: &mut PsiCache<'_>, current: f64) -> Result<f64, MstepError> {
    let (d1, d2) = derivatives(cache, PsiCoord::Intercept)?;
    let delta = -d1 / d2;
    Ok(current + halving_move(cache, PsiCoord::Intercept, current, delta, |_| 0.0))
}

/// Maximizer of the quadratic model `d1·u + ½d2·u²` around `current` minus
/// the linearized penalty `weight·|·|`: `−T(d1 − current·d2, weight) / d2`.
pub fn lla_target(d1: f64, d2: f64, current: f64, weight: f64) -> f64 {
    -soft_threshold(d1 - current * d2, weight) / d2
}

/// LLA/soft-threshold update of a penalized coordinate:
/// `new = −T(d1 − old·d2, scale·p'_γ(|old|)) / d2`, safeguarded by halving
/// against the exact objective `Ψ_j − scale·p_γ`. `gamma = 0` gives a
/// Newton step. Returns the new value.
pub fn update_penalized(
    cache: &mut PsiCache<'_>,
    coord: PsiCoord,
    current: f64,
    gamma: f64,
    a: f64,
    scale: f64,
) -> Result<f64, MstepError> {
    let (d1, d2) = derivatives(cache, coord)?;
    let weight = scale * scad_derivative(current.abs(), gamma, a)?;
    let target = lla_target(d1, d2, current, weight);
    let delta = target - current;
    let pen = |v: f64| scale * scad_penalty(v, gamma, a);
    Ok(current + halving_move(cache, coord, current, delta, pen))
}

/// `(1/n) Σ θθᵀ` with eigenvalues floored at `1e-8`.
pub fn update_sigma(thetas: &[Vec<f64>], k: usize) -> DMatrix<f64> {
    let n = thetas.len().max(1) as f64;
    let mut s = DMatrix::<f64>::zeros(k, k);
    for r in 0..k {
        for c in 0..=r {
            let v = compensated_sum(thetas.iter().map(|t| t[r] * t[c])) / n;
            s[(r, c)] = v;
            s[(c, r)] = v;
        }
    }
    floor_eigenvalues(&s, SIGMA_EIGEN_FLOOR)
}

/// Result of one coordinate-descent pass.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub params: Params,
    /// Penalized objective after the coordinate updates and the covariance
    /// update, before any rescaling to unit diagonal.
    pub objective: f64,
    /// Factor scales removed by sigma anchoring; latent draws must be
    /// divided by these to stay consistent with the returned parameters.
    pub scales: Vec<f64>,
    /// Coordinates skipped for lack of exposure.
    pub skipped: usize,
}

struct TypeUpdate {
    beta0: f64,
    beta: Vec<f64>,
    loadings: DMatrix<f64>,
    psi: f64,
    penalty: f64,
    skipped: usize,
}

fn sweep_type(
    cells: &TypeCells,
    thetas: &[Vec<f64>],
    params: &Params,
    mask: &ConstraintMask,
    penalty: &PenaltyConfig,
    j: usize,
    scale: f64,
) -> TypeUpdate {
    let mut cache = PsiCache::new(cells, thetas, params, j);
    let mut skipped = 0usize;
    let mut beta0 = params.beta0[j];
    match update_intercept(&mut cache, beta0) {
        Ok(v) => beta0 = v,
        Err(_) => skipped += 1,
    }
    let mut beta = params.beta[j].clone();
    let mut pen = 0.0;
    for l in 0..beta.len() {
        let gamma = match mask.beta[j][l] {
            BetaConstraint::FreePenalized => penalty.gamma1,
            BetaConstraint::FreeUnpenalized => 0.0,
            BetaConstraint::FixedZero => continue,
        };
        match update_penalized(&mut cache, PsiCoord::Beta(l), beta[l], gamma, penalty.a, scale) {
            Ok(v) => beta[l] = v,
            Err(_) => skipped += 1,
        }
        pen += scale * scad_penalty(beta[l], gamma, penalty.a);
    }
    let mut a = params.loadings[j].clone();
    for l in 0..a.nrows() {
        for k in 0..a.ncols() {
            let gamma = match mask.loadings[j][l][k] {
                LoadingConstraint::FreePenalized => penalty.gamma2,
                LoadingConstraint::FreeUnpenalized => 0.0,
                LoadingConstraint::FixedZero | LoadingConstraint::FixedOne => continue,
            };
            match update_penalized(&mut cache, PsiCoord::Loading(l, k), a[(l, k)], gamma, penalty.a, scale) {
                Ok(v) => a[(l, k)] = v,
                Err(_) => skipped += 1,
            }
            pen += scale * scad_penalty(a[(l, k)], gamma, penalty.a);
        }
    }
    TypeUpdate { beta0, beta, loadings: a, psi: cache.value(), penalty: pen, skipped }
}

fn penalty_of(params: &Params, mask: &ConstraintMask, penalty: &PenaltyConfig, scale: f64) -> f64 {
    let mut pen = 0.0;
    for j in 0..params.types() {
        for (l, &b) in params.beta[j].iter().enumerate() {
            if mask.beta[j][l] == BetaConstraint::FreePenalized {
                pen += scale * scad_penalty(b, penalty.gamma1, penalty.a);
            }
        }
        for l in 0..params.loadings[j].nrows() {
            for k in 0..params.factors() {
                if mask.loadings[j][l][k] == LoadingConstraint::FreePenalized {
                    pen += scale * scad_penalty(params.loadings[j][(l, k)], penalty.gamma2, penalty.a);
                }
            }
        }
    }
    pen
}

/// `Σ_j Ψ_j + Σ_i log φ(θ_i; Σ) − n·penalty` at `params` and fixed draws.
pub fn penalized_objective(
    index: &CellIndex,
    thetas: &[Vec<f64>],
    params: &Params,
    mask: &ConstraintMask,
    penalty: &PenaltyConfig,
) -> Result<f64, MstepError> {
    let psi: Vec<f64> = (0..params.types())
        .into_par_iter()
        .map(|j| PsiCache::new(&index.types[j], thetas, params, j).value())
        .collect();
    let prior = GaussianPrior::new(&params.sigma)?;
    let log_prior = compensated_sum(thetas.iter().map(|t| prior.log_density(t)));
    let n = index.subjects as f64;
    Ok(compensated_sum(psi) + log_prior - penalty_of(params, mask, penalty, n))
}

/// One full pass: for each type the intercept, then fixed effects, then
/// loadings in `(l, k)` order; then the covariance update. Types are
/// processed in parallel; each type's updates are sequential, so the result
/// does not depend on the thread count.
pub fn sweep(
    index: &CellIndex,
    thetas: &[Vec<f64>],
    params: &Params,
    mask: &ConstraintMask,
    penalty: &PenaltyConfig,
) -> Result<SweepOutput, MstepError> {
    let n = index.subjects as f64;
    let updates: Vec<TypeUpdate> = (0..params.types())
        .into_par_iter()
        .map(|j| sweep_type(&index.types[j], thetas, params, mask, penalty, j, n))
        .collect();
    let mut out = params.clone();
    let mut skipped = 0;
    for (j, u) in updates.iter().enumerate() {
        out.beta0[j] = u.beta0;
        out.beta[j] = u.beta.clone();
        out.loadings[j] = u.loadings.clone();
        skipped += u.skipped;
    }
    let k = params.factors();
    out.sigma = update_sigma(thetas, k);
    let prior = GaussianPrior::new(&out.sigma)?;
    let log_prior = compensated_sum(thetas.iter().map(|t| prior.log_density(t)));
    let objective = compensated_sum(updates.iter().map(|u| u.psi)) + log_prior
        - compensated_sum(updates.iter().map(|u| u.penalty));
    let scales = if mask.mode == AnchorMode::Sigma { apply_mask_in_place(&mut out, mask)? } else { vec![1.0; k] };
    Ok(SweepOutput { params: out, objective, scales, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_cell(exposure: f64, events: f64) -> TypeCells {
        TypeCells {
            subject: vec![0],
            exposure: vec![exposure],
            events: vec![events],
            x_rows: vec![vec![]],
            z_rows: vec![vec![]],
            beta_cols: vec![],
            z_cols: vec![],
        }
    }

    fn params_1() -> Params {
        Params::zeros(&crate::model::Dims { fixed: vec![0], random: vec![0], factors: 1 })
    }

    #[test]
    fn intercept_newton_reaches_poisson_mle() {
        let cells = single_cell(4.0, 3.0);
        let thetas = vec![vec![0.0]];
        let mut p = params_1();
        let target = (3.0f64 / 4.0).ln();
        for it in 0..8 {
            let mut cache = PsiCache::new(&cells, &thetas, &p, 0);
            p.beta0[0] = update_intercept(&mut cache, p.beta0[0]).unwrap();
            if (p.beta0[0] - target).abs() < 1e-10 {
                assert!(it < 8);
                return;
            }
        }
        panic!("no convergence: {}", p.beta0[0]);
    }

    #[test]
    fn intercept_partials_match_closed_form() {
        let cells = single_cell(2.0, 5.0);
        let thetas = vec![vec![0.0]];
        let mut p = params_1();
        p.beta0[0] = 0.3;
        let cache = PsiCache::new(&cells, &thetas, &p, 0);
        let (v, d1, d2) = psi_partials(&cache, PsiCoord::Intercept).unwrap();
        let lam = 2.0 * 0.3f64.exp();
        assert!((v - (5.0 * 0.3 - lam)).abs() < 1e-14);
        assert!((d1 - (5.0 - lam)).abs() < 1e-14);
        assert!((d2 + lam).abs() < 1e-14);
    }

    #[test]
    fn zero_column_reports_zero_exposure() {
        let cells = TypeCells { beta_cols: vec![vec![]], ..single_cell(1.0, 1.0) };
        let thetas = vec![vec![0.0]];
        let p = Params::zeros(&crate::model::Dims { fixed: vec![1], random: vec![0], factors: 1 });
        let cache = PsiCache::new(&cells, &thetas, &p, 0);
        assert_eq!(psi_partials(&cache, PsiCoord::Beta(0)), Err(MstepError::ZeroExposure));
    }

    #[test]
    fn lla_closed_form_on_quadratic_toy() {
        // Ψ = −½(b − 2)² at b = 0: d1 = 2, d2 = −1, p'(0) = γ = 1.
        assert_eq!(lla_target(2.0, -1.0, 0.0, 1.0), 1.0);
        assert_eq!(lla_target(2.0, -1.0, 0.0, 0.0), 2.0);
        assert_eq!(lla_target(0.5, -1.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn sigma_update_is_the_second_moment() {
        let s = update_sigma(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 2);
        assert_eq!(s[(0, 0)], 1.0);
        assert_eq!(s[(0, 1)], 0.0);
        assert!((s[(1, 1)] - 1e-8).abs() < 1e-20);
        let t = [0.5, -2.0];
        let s = update_sigma(&[t.to_vec()], 2);
        assert!((s[(0, 0)] - 0.25).abs() < 1e-7 && (s[(0, 1)] + 1.0).abs() < 1e-7);
        assert!(s.clone().symmetric_eigenvalues().min() >= 1e-8 * (1.0 - 1e-6));
    }
}
