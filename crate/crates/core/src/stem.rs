//! Stochastic EM: one Metropolis move per subject (the E-step), one
//! coordinate-descent pass (the M-step), and parameter averaging over the
//! final iterations.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::covariates::{build_panel, CovariateError, CovariateSpec};
use crate::events::Dataset;
use crate::lik::{LikError, SubjectWork, ThetaProfile};
use crate::model::{
    apply_mask_in_place, canonicalize_signs, AnchorMode, BetaConstraint, ConstraintMask, Dims, GaussianPrior,
    LoadingConstraint, ModelError, PenaltyConfig,
};
use crate::mstep::{sweep, CellIndex, MstepError};
use crate::rng;
use crate::sampler::{metropolis_step, AdaptConfig, ChainState};
use crate::select::SupportMask;
use crate::Params;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error(transparent)]
    Lik(#[from] LikError),
    #[error(transparent)]
    Mstep(#[from] MstepError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub total_iters: usize,
    pub burn_in: usize,
    pub avg_window: usize,
    pub inner_steps: usize,
    pub msweeps: usize,
    pub seed: u64,
    /// Fraction of the averaging window a penalized coordinate must spend
    /// at exactly zero to be reported as zero.
    pub zero_snap: f64,
    pub adapt: AdaptConfig,
    /// Starting value of the unpenalized anchor loadings when sigma carries
    /// the scale.
    pub anchor_init: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            total_iters: 500,
            burn_in: 300,
            avg_window: 200,
            inner_steps: 1,
            msweeps: 1,
            seed: 0,
            zero_snap: 0.9,
            adapt: AdaptConfig::default(),
            anchor_init: 1.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::ConfigInvalid(m.into()));
        if self.avg_window == 0 {
            return bad("avg_window must be at least 1");
        }
        if self.burn_in + self.avg_window > self.total_iters {
            return bad("burn_in + avg_window exceeds total_iters");
        }
        if self.inner_steps == 0 || self.msweeps == 0 {
            return bad("inner_steps and msweeps must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.zero_snap) {
            return bad("zero_snap must lie in [0, 1]");
        }
        if self.adapt.window == 0 {
            return bad("adaptation window must be at least 1");
        }
        Ok(())
    }
}

/// Per-subject evaluation structures shared by every fit on one dataset.
#[derive(Debug, Clone)]
pub struct FitData {
    pub works: Vec<SubjectWork>,
    pub index: CellIndex,
    pub dims: Dims,
}

impl FitData {
    pub fn new(dataset: &Dataset, spec: &CovariateSpec, factors: usize) -> Result<Self, FitError> {
        spec.validate(&dataset.catalog)?;
        let works = dataset
            .sequences
            .par_iter()
            .map(|seq| {
                let panel = build_panel(seq, spec, &dataset.catalog)?;
                Ok(SubjectWork::new(&panel, seq)?)
            })
            .collect::<Result<Vec<_>, FitError>>()?;
        let dims = Dims::from_spec(spec, factors);
        let index = CellIndex::new(&works, &dims.fixed, &dims.random);
        Ok(Self { works, index, dims })
    }

    pub fn subjects(&self) -> usize {
        self.works.len()
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params_avg: Params,
    pub params_last: Params,
    pub support: SupportMask,
    /// Penalized M-step objective per iteration.
    pub objective_trace: Vec<f64>,
    /// Mean over subjects of the fixed-phase acceptance rate.
    pub acceptance_mean: f64,
    pub acceptance_min: f64,
    pub acceptance_max: f64,
    pub thetas: Vec<Vec<f64>>,
    pub proposal_sd: Vec<f64>,
    /// Coordinate updates skipped for lack of exposure, over all sweeps.
    pub skipped_updates: usize,
}

impl FitResult {
    /// Least-squares slope of the objective over the last `window`
    /// iterations times the window length, and the residual standard
    /// deviation. A drift several times the spread signals non-convergence.
    pub fn trend_diagnostic(&self, window: usize) -> (f64, f64) {
        let tail = &self.objective_trace[self.objective_trace.len().saturating_sub(window)..];
        let m = tail.len() as f64;
        if tail.len() < 3 {
            return (0.0, 0.0);
        }
        let xm = (m - 1.0) / 2.0;
        let ym = tail.iter().sum::<f64>() / m;
        let sxx: f64 = (0..tail.len()).map(|i| (i as f64 - xm).powi(2)).sum();
        let sxy: f64 = tail.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
        let slope = sxy / sxx;
        let resid: f64 = tail
            .iter()
            .enumerate()
            .map(|(i, y)| (y - ym - slope * (i as f64 - xm)).powi(2))
            .sum::<f64>()
            / (m - 2.0);
        (slope * m, resid.sqrt())
    }

    pub fn is_stationary(&self, window: usize) -> bool {
        let (drift, sd) = self.trend_diagnostic(window);
        drift.abs() <= 3.0 * sd
    }
}

/// Zero start: all free coefficients 0, `sigma = I`, fixed-one loadings 1,
/// sigma-anchored loadings at `anchor_init`.
pub fn initial_params(dims: &Dims, mask: &ConstraintMask, anchor_init: f64) -> Result<Params, FitError> {
    let mut p = Params::zeros(dims);
    if mask.mode == AnchorMode::Sigma {
        for (k, anchor) in mask.anchor_rows().into_iter().enumerate() {
            if let Some((j, l)) = anchor {
                p.loadings[j][(l, k)] = anchor_init;
            }
        }
    }
    apply_mask_in_place(&mut p, mask)?;
    Ok(p)
}

/// Covariate-free Poisson estimate `ln(n_j / E_j)` of each intercept, with
/// half an event added to types never observed.
pub fn baseline_start(data: &FitData) -> Vec<f64> {
    let types = data.dims.types();
    let mut events = vec![0.0; types];
    let mut exposure = vec![0.0; types];
    for w in &data.works {
        for (j, cells) in w.cells.iter().enumerate() {
            for c in cells {
                events[j] += f64::from(c.events);
                exposure[j] += c.exposure;
            }
        }
    }
    events
        .iter()
        .zip(&exposure)
        .map(|(&n, &e)| if e > 0.0 { (n.max(0.5) / e).ln() } else { 0.0 })
        .collect()
}

/// Builds the per-subject structures and runs [`fit_prepared`].
pub fn fit(
    dataset: &Dataset,
    spec: &CovariateSpec,
    mask: &ConstraintMask,
    penalty: &PenaltyConfig,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    let data = FitData::new(dataset, spec, mask.factors())?;
    fit_prepared(&data, mask, penalty, config, None)
}

struct Accumulator {
    sum: Params,
    zeros: Params,
    count: usize,
}

fn accumulate(acc: &mut Accumulator, p: &Params) {
    let z = |v: f64| if v == 0.0 { 1.0 } else { 0.0 };
    for j in 0..p.types() {
        acc.sum.beta0[j] += p.beta0[j];
        for (l, &b) in p.beta[j].iter().enumerate() {
            acc.sum.beta[j][l] += b;
            acc.zeros.beta[j][l] += z(b);
        }
        for (idx, &v) in p.loadings[j].iter().enumerate() {
            acc.sum.loadings[j][idx] += v;
            acc.zeros.loadings[j][idx] += z(v);
        }
    }
    acc.sum.sigma += &p.sigma;
    acc.count += 1;
}

fn averaged(acc: &Accumulator, mask: &ConstraintMask, snap: f64) -> Params {
    let b = acc.count as f64;
    let threshold = snap * b;
    let mut p = acc.sum.clone();
    for j in 0..p.types() {
        p.beta0[j] /= b;
        for l in 0..p.beta[j].len() {
            p.beta[j][l] /= b;
            if mask.beta[j][l] == BetaConstraint::FreePenalized && acc.zeros.beta[j][l] >= threshold {
                p.beta[j][l] = 0.0;
            }
        }
        let rows = p.loadings[j].nrows();
        for l in 0..rows {
            for k in 0..p.factors() {
                p.loadings[j][(l, k)] /= b;
                if mask.loadings[j][l][k] == LoadingConstraint::FreePenalized && acc.zeros.loadings[j][(l, k)] >= threshold
                {
                    p.loadings[j][(l, k)] = 0.0;
                }
            }
        }
    }
    p.sigma /= b;
    p
}

/// Runs stochastic EM on prepared data. `init` overrides the zero start.
pub fn fit_prepared(
    data: &FitData,
    mask: &ConstraintMask,
    penalty: &PenaltyConfig,
    config: &FitConfig,
    init: Option<&Params>,
) -> Result<FitResult, FitError> {
    config.validate()?;
    penalty.validate()?;
    mask.validate(&data.dims)?;
    let k = data.dims.factors;
    let n = data.subjects();
    if n == 0 {
        return Err(FitError::ConfigInvalid("dataset has no subjects".into()));
    }
    let mut params = match init {
        Some(p) => {
            p.validate(&data.dims)?;
            let mut p = p.clone();
            apply_mask_in_place(&mut p, mask)?;
            p
        }
        None => {
            let mut p = initial_params(&data.dims, mask, config.anchor_init)?;
            p.beta0 = baseline_start(data);
            p
        }
    };
    let mut chains: Vec<ChainState> = (0..n).map(|_| ChainState::new(k)).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| rng::stream(config.seed, rng::purpose::ESTEP, i as u64)).collect();
    let mut frozen_at: Vec<(u64, u64)> = vec![(0, 0); n];
    let mut trace = Vec::with_capacity(config.total_iters);
    let mut skipped = 0usize;
    let window_start = config.total_iters - config.avg_window;
    let mut acc = Accumulator { sum: Params::zeros(&data.dims), zeros: Params::zeros(&data.dims), count: 0 };
    acc.sum.sigma.fill(0.0);

    for t in 0..config.total_iters {
        if t == config.burn_in {
            for (c, f) in chains.iter_mut().zip(frozen_at.iter_mut()) {
                c.freeze();
                *f = (c.total_accepted, c.total_steps);
            }
        }
        let prior = GaussianPrior::new(&params.sigma)?;
        chains.par_iter_mut().zip(rngs.par_iter_mut()).zip(data.works.par_iter()).for_each(|((chain, r), work)| {
            let profile = ThetaProfile::with_prior(&params, work, prior.clone());
            for _ in 0..config.inner_steps {
                metropolis_step(chain, |th| profile.log_target(th), &config.adapt, r);
            }
        });
        let mut thetas: Vec<Vec<f64>> = chains.iter().map(|c| c.theta.clone()).collect();
        let mut objective = f64::NAN;
        for _ in 0..config.msweeps {
            let out = sweep(&data.index, &thetas, &params, mask, penalty)?;
            params = out.params;
            objective = out.objective;
            skipped += out.skipped;
            if out.scales.iter().any(|&s| s != 1.0) {
                for th in thetas.iter_mut() {
                    for (v, s) in th.iter_mut().zip(&out.scales) {
                        *v /= s;
                    }
                }
            }
        }
        for kk in canonicalize_signs(&mut params, mask) {
            for th in thetas.iter_mut() {
                th[kk] = -th[kk];
            }
        }
        for (c, th) in chains.iter_mut().zip(thetas) {
            c.theta = th;
        }
        trace.push(objective);
        if log::log_enabled!(log::Level::Debug) {
            let acc_rate = chains.iter().map(ChainState::acceptance_rate).sum::<f64>() / n as f64;
            log::debug!("iter {t} objective {objective:.6} acceptance {acc_rate:.3}");
        }
        if t >= window_start {
            accumulate(&mut acc, &params);
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} coordinate updates skipped for lack of exposure");
    }

    let mut params_avg = averaged(&acc, mask, config.zero_snap);
    apply_mask_in_place(&mut params_avg, mask)?;
    let rates: Vec<f64> = chains
        .iter()
        .zip(&frozen_at)
        .map(|(c, &(a0, s0))| {
            let steps = c.total_steps - s0;
            if steps == 0 {
                c.acceptance_rate()
            } else {
                (c.total_accepted - a0) as f64 / steps as f64
            }
        })
        .collect();
    let acceptance_mean = rates.iter().sum::<f64>() / n as f64;
    let acceptance_min = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let acceptance_max = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let support = SupportMask::of(&params_avg, mask);
    Ok(FitResult {
        params_avg,
        params_last: params,
        support,
        objective_trace: trace,
        acceptance_mean,
        acceptance_min,
        acceptance_max,
        thetas: chains.iter().map(|c| c.theta.clone()).collect(),
        proposal_sd: chains.iter().map(|c| c.proposal_sd).collect(),
        skipped_updates: skipped,
    })
}
