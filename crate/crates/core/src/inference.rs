//! Standard errors from the outer-product approximation of the observed
//! information: each subject contributes `ŝ ŝᵀ`, where `ŝ` is the
//! posterior mean of its complete-data score.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::events::EventCatalog;
use crate::covariates::CovariateSpec;
use crate::lik::{complete_score, find_mode, LikError, SubjectWork, ThetaProfile};
use crate::model::{AnchorMode, BetaConstraint, ConstraintMask, Coord, GaussianPrior, ModelError};
use crate::rng;
use crate::sampler::{metropolis_step, AdaptConfig, ChainState};
use crate::stem::FitData;
use crate::Params;

pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("information matrix is singular (condition number {0:e})")]
    SingularInfo(f64),
    #[error("invalid inference configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Lik(#[from] LikError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    /// Retained posterior draws per subject.
    pub draws: usize,
    pub thin: usize,
    pub warmup: usize,
    pub seed: u64,
    pub adapt: AdaptConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { draws: 500, thin: 5, warmup: 500, seed: 0, adapt: AdaptConfig::default() }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.draws == 0 || self.thin == 0 {
            return Err(InferenceError::ConfigInvalid("draws and thin must be positive".into()));
        }
        Ok(())
    }
}

/// Free coordinates of a fitted model. With `nonzero_only`, penalized
/// coefficients estimated at zero are left out. Covariance entries are the
/// lower triangle; the diagonal is dropped when sigma carries the scale.
pub fn free_coordinates(params: &Params, mask: &ConstraintMask, nonzero_only: bool) -> Vec<Coord> {
    let dims = params.dims();
    Coord::all(&dims, mask.mode == AnchorMode::Loadings)
        .into_iter()
        .filter(|c| match *c {
            Coord::Intercept(_) | Coord::Sigma(..) => true,
            Coord::Beta(j, l) => {
                mask.beta[j][l] != BetaConstraint::FixedZero && (!nonzero_only || params.beta[j][l] != 0.0)
            }
            Coord::Loading(j, l, k) => {
                !mask.loadings[j][l][k].is_fixed() && (!nonzero_only || params.loadings[j][(l, k)] != 0.0)
            }
        })
        .collect()
}

/// Approximate observed information over named coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoMatrix {
    pub coords: Vec<Coord>,
    pub matrix: DMatrix<f64>,
}

impl InfoMatrix {
    /// Ratio of the extreme eigenvalues; infinite when the smallest is not
    /// positive.
    pub fn condition_number(&self) -> f64 {
        if self.matrix.is_empty() {
            return 1.0;
        }
        let eig = self.matrix.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

fn extract(score: &Params, coords: &[Coord]) -> Vec<f64> {
    coords
        .iter()
        .map(|c| match *c {
            Coord::Sigma(r, cc) if r != cc => 2.0 * score.sigma[(r, cc)],
            other => other.value(score),
        })
        .collect()
}

/// Posterior-mean score of one subject over `coords`.
pub fn subject_score(
    params: &Params,
    work: &SubjectWork,
    prior: &GaussianPrior<f64>,
    coords: &[Coord],
    cfg: &InferenceConfig,
    stream_index: u64,
) -> Result<Vec<f64>, InferenceError> {
    let k = params.factors();
    if k == 0 {
        return Ok(extract(&complete_score(params, work, &[])?, coords));
    }
    let profile = ThetaProfile::with_prior(params, work, prior.clone());
    let mut chain = ChainState::new(k);
    if let Ok(m) = find_mode(&profile) {
        chain.theta = m.theta;
    }
    let mut r = rng::stream(cfg.seed, rng::purpose::POSTERIOR, stream_index);
    for _ in 0..cfg.warmup {
        metropolis_step(&mut chain, |t| profile.log_target(t), &cfg.adapt, &mut r);
    }
    chain.freeze();
    let mut mean = vec![0.0; coords.len()];
    for _ in 0..cfg.draws {
        for _ in 0..cfg.thin {
            metropolis_step(&mut chain, |t| profile.log_target(t), &cfg.adapt, &mut r);
        }
        let s = extract(&complete_score(params, work, &chain.theta)?, coords);
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    let inv = 1.0 / cfg.draws as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// Sum of per-subject outer products `ŝ_i ŝ_iᵀ`, accumulated in subject
/// order.
pub fn observed_info(
    params: &Params,
    data: &FitData,
    coords: &[Coord],
    cfg: &InferenceConfig,
) -> Result<InfoMatrix, InferenceError> {
    cfg.validate()?;
    params.validate(&data.dims)?;
    let prior = GaussianPrior::new(&params.sigma)?;
    let scores: Vec<Vec<f64>> = data
        .works
        .par_iter()
        .map(|w| subject_score(params, w, &prior, coords, cfg, rng::hash_str(&w.subject_id)))
        .collect::<Result<_, _>>()?;
    Ok(info_from_scores(coords, &scores))
}

pub fn info_from_scores(coords: &[Coord], scores: &[Vec<f64>]) -> InfoMatrix {
    let d = coords.len();
    let mut m = DMatrix::zeros(d, d);
    for s in scores {
        for a in 0..d {
            if s[a] == 0.0 {
                continue;
            }
            for b in 0..=a {
                m[(a, b)] += s[a] * s[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            m[(b, a)] = m[(a, b)];
        }
    }
    InfoMatrix { coords: coords.to_vec(), matrix: m }
}

/// `sqrt(diag(I⁻¹))` per coordinate.
pub fn standard_errors(info: &InfoMatrix) -> Result<Vec<f64>, InferenceError> {
    let cond = info.condition_number();
    if !(cond <= MAX_CONDITION) {
        return Err(InferenceError::SingularInfo(cond));
    }
    let inv = info.matrix.clone().cholesky().ok_or(InferenceError::SingularInfo(cond))?.inverse();
    Ok((0..inv.nrows()).map(|i| inv[(i, i)].sqrt()).collect())
}

/// `coordinate,estimate,se` table; `NA` marks unavailable SEs.
pub fn se_table(
    params: &Params,
    coords: &[Coord],
    ses: Option<&[f64]>,
    catalog: &EventCatalog,
    spec: &CovariateSpec,
) -> String {
    let mut out = String::from("coordinate,estimate,se\n");
    for (i, c) in coords.iter().enumerate() {
        let se = ses.map_or_else(|| "NA".to_string(), |s| s[i].to_string());
        let _ = writeln!(out, "{},{},{}", c.name(catalog, spec).replace(',', ";"), c.value(params), se);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_and_diagonal_ses() {
        let info = InfoMatrix { coords: vec![Coord::Intercept(0)], matrix: DMatrix::from_element(1, 1, 4.0) };
        assert!((standard_errors(&info).unwrap()[0] - 0.5).abs() < 1e-15);
        let info = InfoMatrix {
            coords: vec![Coord::Intercept(0), Coord::Intercept(1)],
            matrix: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![16.0, 0.25])),
        };
        let se = standard_errors(&info).unwrap();
        assert!((se[0] - 0.25).abs() < 1e-15 && (se[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn singular_is_reported() {
        let info = InfoMatrix { coords: vec![Coord::Intercept(0); 2], matrix: DMatrix::from_element(2, 2, 1.0) };
        assert!(matches!(standard_errors(&info), Err(InferenceError::SingularInfo(_))));
    }

    #[test]
    fn gram_is_symmetric_and_order_free() {
        let coords = vec![Coord::Intercept(0), Coord::Intercept(1), Coord::Intercept(2)];
        let s = vec![vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0], vec![2.0, 2.0, -1.0]];
        let a = info_from_scores(&coords, &s);
        let mut r = s.clone();
        r.reverse();
        let b = info_from_scores(&coords, &r);
        assert_eq!(a.matrix, a.matrix.transpose());
        assert!((a.matrix.clone() - b.matrix).abs().max() < 1e-12);
    }
}
