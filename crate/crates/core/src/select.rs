//! Support extraction, constrained refits, BIC and the tuning grid search.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::lik::{marginal_loglik, LikError, QuadratureConfig};
use crate::model::{BetaConstraint, ConstraintMask, Dims, LoadingConstraint, PenaltyConfig};
use crate::num::compensated_sum;
use crate::rng;
use crate::stem::{fit_prepared, FitConfig, FitData, FitError, FitResult};
use crate::Params;

/// Nonzero pattern of the fixed effects and loadings.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SupportMask {
    pub beta: Vec<Vec<bool>>,
    /// `loadings[j][l][k]`.
    pub loadings: Vec<Vec<Vec<bool>>>,
}

impl SupportMask {
    /// Nonzero entries of `params`; fixed-one loadings are active and
    /// fixed-zero entries inactive regardless of the stored values.
    pub fn of(params: &Params, mask: &ConstraintMask) -> Self {
        let beta = params
            .beta
            .iter()
            .zip(&mask.beta)
            .map(|(b, m)| b.iter().zip(m).map(|(v, c)| *c != BetaConstraint::FixedZero && *v != 0.0).collect())
            .collect();
        let loadings = params
            .loadings
            .iter()
            .zip(&mask.loadings)
            .map(|(a, rows)| {
                rows.iter()
                    .enumerate()
                    .map(|(l, row)| {
                        row.iter()
                            .enumerate()
                            .map(|(k, c)| match c {
                                LoadingConstraint::FixedOne => true,
                                LoadingConstraint::FixedZero => false,
                                _ => a[(l, k)] != 0.0,
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { beta, loadings }
    }

    pub fn nonzero_beta(&self) -> usize {
        self.beta.iter().flatten().filter(|&&b| b).count()
    }

    pub fn nonzero_loadings(&self) -> usize {
        self.loadings.iter().flatten().flatten().filter(|&&b| b).count()
    }

    /// `0`/`1` string: fixed effects by type, then loadings by `(j, l, k)`.
    pub fn to_bits(&self) -> String {
        let bit = |b: &bool| if *b { '1' } else { '0' };
        self.beta.iter().flatten().map(bit).chain(self.loadings.iter().flatten().flatten().map(bit)).collect()
    }

    pub fn from_bits(bits: &str, dims: &Dims) -> Option<Self> {
        let mut it = bits.trim().chars();
        let mut next = || match it.next() {
            Some('1') => Some(true),
            Some('0') => Some(false),
            _ => None,
        };
        let mut beta = Vec::new();
        for &l in &dims.fixed {
            beta.push((0..l).map(|_| next()).collect::<Option<Vec<_>>>()?);
        }
        let mut loadings = Vec::new();
        for &l in &dims.random {
            let mut rows = Vec::new();
            for _ in 0..l {
                rows.push((0..dims.factors).map(|_| next()).collect::<Option<Vec<_>>>()?);
            }
            loadings.push(rows);
        }
        if it.next().is_some() {
            return None;
        }
        Some(Self { beta, loadings })
    }

    /// Short stable digest of the pattern.
    pub fn hash(&self) -> u64 {
        rng::hash_str(&self.to_bits())
    }

    /// The mask for refitting on this support: inactive entries fixed at
    /// zero, everything else free and unpenalized. Anchor rows are kept.
    pub fn refit_mask(&self, base: &ConstraintMask) -> ConstraintMask {
        let mut m = base.clone();
        let anchors = base.anchor_rows();
        for (j, row) in m.beta.iter_mut().enumerate() {
            for (l, c) in row.iter_mut().enumerate() {
                *c = if self.beta[j][l] { BetaConstraint::FreeUnpenalized } else { BetaConstraint::FixedZero };
            }
        }
        for (j, rows) in m.loadings.iter_mut().enumerate() {
            for (l, row) in rows.iter_mut().enumerate() {
                if anchors.contains(&Some((j, l))) {
                    continue;
                }
                for (k, c) in row.iter_mut().enumerate() {
                    if c.is_fixed() {
                        continue;
                    }
                    *c = if self.loadings[j][l][k] { LoadingConstraint::FreeUnpenalized } else { LoadingConstraint::FixedZero };
                }
            }
        }
        m
    }
}

/// Unpenalized fit with every coordinate outside `support` held at zero.
pub fn refit_constrained(
    data: &FitData,
    base: &ConstraintMask,
    support: &SupportMask,
    config: &FitConfig,
    init: Option<&Params>,
) -> Result<FitResult, FitError> {
    let mask = support.refit_mask(base);
    fit_prepared(data, &mask, &PenaltyConfig::none(), config, init)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BicValue {
    pub loglik: f64,
    pub p: usize,
    pub bic: f64,
    /// Combined Monte Carlo standard error of `loglik` (0 under quadrature).
    pub mc_se: f64,
    /// Subjects whose quadrature fell back to Monte Carlo.
    pub fallbacks: usize,
}

/// Number of mean-structure parameters: intercepts plus nonzero fixed
/// effects and loadings.
pub fn parameter_count(params: &Params) -> usize {
    let beta = params.beta.iter().flatten().filter(|&&b| b != 0.0).count();
    let load = params.loadings.iter().map(|a| a.iter().filter(|&&v| v != 0.0).count()).sum::<usize>();
    params.types() + beta + load
}

/// `−2 Σ_i log L_i + log(n) p` at `params`.
pub fn bic(data: &FitData, params: &Params, quad: &QuadratureConfig) -> Result<BicValue, LikError> {
    let parts = data
        .works
        .par_iter()
        .map(|w| marginal_loglik(params, w, quad))
        .collect::<Result<Vec<_>, _>>()?;
    let loglik = compensated_sum(parts.iter().map(|m| m.value));
    let mc_se = compensated_sum(parts.iter().map(|m| m.mc_se * m.mc_se)).sqrt();
    let fallbacks = parts.iter().filter(|m| m.fell_back).count();
    let p = parameter_count(params);
    let n = data.subjects() as f64;
    Ok(BicValue { loglik, p, bic: -2.0 * loglik + n.ln() * p as f64, mc_se, fallbacks })
}

/// Log-uniform grid over `(γ1, γ2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub log_gamma1: (f64, f64),
    pub count1: usize,
    pub log_gamma2: (f64, f64),
    pub count2: usize,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), FitError> {
        let finite = [self.log_gamma1.0, self.log_gamma1.1, self.log_gamma2.0, self.log_gamma2.1].iter().all(|v| v.is_finite());
        if self.count1 == 0 || self.count2 == 0 || !finite {
            return Err(FitError::ConfigInvalid("grid needs positive counts and finite ranges".into()));
        }
        Ok(())
    }

    pub fn gamma1(&self) -> Vec<f64> {
        linspace(self.log_gamma1.0, self.log_gamma1.1, self.count1).into_iter().map(f64::exp).collect()
    }

    pub fn gamma2(&self) -> Vec<f64> {
        linspace(self.log_gamma2.0, self.log_gamma2.1, self.count2).into_iter().map(f64::exp).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SelectConfig {
    pub fit: FitConfig,
    /// Iteration budget of the constrained refits (the seed field is
    /// replaced per support).
    pub refit: FitConfig,
    pub quad: QuadratureConfig,
    /// Master seed of the selection stage.
    pub seed: u64,
    /// Start each penalized fit from the previous `γ2` solution in its row.
    pub warm_start: bool,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            refit: FitConfig::default(),
            quad: QuadratureConfig::default(),
            seed: 0,
            warm_start: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridRow {
    pub i1: usize,
    pub i2: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub support: Option<SupportMask>,
    pub bic: Option<BicValue>,
    /// Refit parameters on this row's support.
    pub refit: Option<Params>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub best: Option<usize>,
}

impl GridResult {
    pub fn best_row(&self) -> Option<&GridRow> {
        self.best.map(|b| &self.rows[b])
    }

    /// Delimited table with a header row.
    pub fn to_table(&self) -> String {
        let mut out = String::from("gamma1,gamma2,p,loglik,bic,mc_se,support_hash,status\n");
        for r in &self.rows {
            let hash = r.support.as_ref().map(|s| format!("{:016x}", s.hash())).unwrap_or_default();
            match (&r.bic, &r.error) {
                (Some(b), None) => out.push_str(&format!(
                    "{},{},{},{},{},{},{},ok\n",
                    r.gamma1, r.gamma2, b.p, b.loglik, b.bic, b.mc_se, hash
                )),
                (_, err) => out.push_str(&format!(
                    "{},{},,,,,{},failed: {}\n",
                    r.gamma1,
                    r.gamma2,
                    hash,
                    err.clone().unwrap_or_default().replace(',', ";")
                )),
            }
        }
        out
    }
}

/// Seed of the penalized fit at grid point `(i1, i2)`.
pub fn grid_seed(master: u64, i1: usize, i2: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(master, rng::purpose::GRID, i1 as u64), rng::purpose::GRID, i2 as u64)
}

/// Seed of the refit on a support; identical supports share a refit.
pub fn refit_seed(master: u64, support: &SupportMask) -> u64 {
    rng::derive_seed(master, rng::purpose::REFIT, support.hash())
}

/// For each grid point: penalized fit, support, constrained refit, BIC.
/// Refits are keyed by support, so points that select the same support share
/// one refit and one BIC value. The minimum BIC wins; ties go to the larger
/// `(γ1, γ2)`.
pub fn grid_search(data: &FitData, mask: &ConstraintMask, grid: &GridSpec, cfg: &SelectConfig) -> Result<GridResult, FitError> {
    grid.validate()?;
    let g1 = grid.gamma1();
    let g2 = grid.gamma2();
    let run_point = |i1: usize, i2: usize, init: Option<&Params>| -> Result<FitResult, FitError> {
        let mut fc = cfg.fit.clone();
        fc.seed = grid_seed(cfg.seed, i1, i2);
        fit_prepared(data, mask, &PenaltyConfig::new(g1[i1], g2[i2]), &fc, init)
    };
    let fits: Vec<Vec<Result<FitResult, FitError>>> = if cfg.warm_start {
        (0..g1.len())
            .into_par_iter()
            .map(|i1| {
                let mut row: Vec<Result<FitResult, FitError>> = Vec::with_capacity(g2.len());
                for i2 in 0..g2.len() {
                    let prev = row.last().and_then(|r| r.as_ref().ok()).map(|f| f.params_avg.clone());
                    row.push(run_point(i1, i2, prev.as_ref()));
                }
                row
            })
            .collect()
    } else {
        (0..g1.len()).into_par_iter().map(|i1| (0..g2.len()).into_par_iter().map(|i2| run_point(i1, i2, None)).collect()).collect()
    };

    let mut supports: BTreeMap<String, SupportMask> = BTreeMap::new();
    for f in fits.iter().flatten().flatten() {
        supports.entry(f.support.to_bits()).or_insert_with(|| f.support.clone());
    }
    let unique: Vec<SupportMask> = supports.into_values().collect();
    let refits: Vec<Result<(Params, BicValue), String>> = unique
        .par_iter()
        .map(|s| {
            let mut rc = cfg.refit.clone();
            rc.seed = refit_seed(cfg.seed, s);
            let r = refit_constrained(data, mask, s, &rc, None).map_err(|e| e.to_string())?;
            let mut q = cfg.quad;
            q.seed = rng::derive_seed(cfg.seed, rng::purpose::QUADRATURE, s.hash());
            let b = bic(data, &r.params_avg, &q).map_err(|e| e.to_string())?;
            Ok((r.params_avg, b))
        })
        .collect();
    let lookup: BTreeMap<String, &Result<(Params, BicValue), String>> =
        unique.iter().map(|s| s.to_bits()).zip(refits.iter()).collect();

    let mut rows = Vec::with_capacity(g1.len() * g2.len());
    for (i1, row) in fits.into_iter().enumerate() {
        for (i2, f) in row.into_iter().enumerate() {
            let mut out = GridRow {
                i1,
                i2,
                gamma1: g1[i1],
                gamma2: g2[i2],
                support: None,
                bic: None,
                refit: None,
                error: None,
            };
            match f {
                Err(e) => out.error = Some(e.to_string()),
                Ok(f) => {
                    match lookup[&f.support.to_bits()] {
                        Ok((p, b)) => {
                            out.bic = Some(*b);
                            out.refit = Some(p.clone());
                        }
                        Err(e) => out.error = Some(e.clone()),
                    }
                    out.support = Some(f.support);
                }
            }
            rows.push(out);
        }
    }
    let best = select_best(&rows);
    Ok(GridResult { rows, best })
}

/// Index of the minimum-BIC row; ties go to the larger `(γ1, γ2)`.
pub fn select_best(rows: &[GridRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        let Some(b) = r.bic else { continue };
        if !b.bic.is_finite() || r.error.is_some() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(cur) => {
                let c = &rows[cur];
                let cb = c.bic.expect("scored").bic;
                let better = b.bic < cb || (b.bic == cb && (r.gamma1, r.gamma2) > (c.gamma1, c.gamma2));
                if better {
                    Some(i)
                } else {
                    Some(cur)
                }
            }
        };
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AnchorMode;

    #[test]
    fn support_and_parameter_count() {
        let dims = Dims { fixed: vec![2, 2], random: vec![1, 1], factors: 1 };
        let mut mask = ConstraintMask::penalized(&dims, AnchorMode::Loadings);
        mask.anchor(0, 0, 0);
        let mut p = Params::zeros(&dims);
        p.loadings[0][(0, 0)] = 1.0;
        let s = SupportMask::of(&p, &mask);
        assert_eq!(s.nonzero_beta(), 0);
        assert_eq!(s.nonzero_loadings(), 1);
        assert_eq!(parameter_count(&p), 3);
        p.beta[1][0] = 0.2;
        let s = SupportMask::of(&p, &mask);
        assert_eq!(s.nonzero_beta(), 1);
        assert_eq!(SupportMask::from_bits(&s.to_bits(), &dims), Some(s.clone()));
        let refit = s.refit_mask(&mask);
        assert_eq!(refit.beta[1], vec![BetaConstraint::FreeUnpenalized, BetaConstraint::FixedZero]);
        assert_eq!(refit.loadings[1][0][0], LoadingConstraint::FixedZero);
        assert_eq!(refit.loadings[0][0][0], LoadingConstraint::FixedOne);
        refit.validate(&dims).unwrap();
    }

    #[test]
    fn best_row_prefers_sparser_on_ties() {
        let row = |g1: f64, g2: f64, b: f64| GridRow {
            i1: 0,
            i2: 0,
            gamma1: g1,
            gamma2: g2,
            support: None,
            bic: Some(BicValue { loglik: 0.0, p: 1, bic: b, mc_se: 0.0, fallbacks: 0 }),
            refit: None,
            error: None,
        };
        let rows = vec![row(0.1, 0.1, 5.0), row(0.2, 0.1, 5.0), row(0.1, 0.3, 6.0)];
        assert_eq!(select_best(&rows), Some(1));
        assert_eq!(select_best(&rows[..1]), Some(0));
    }

    #[test]
    fn grid_points_are_log_uniform() {
        let g = GridSpec { log_gamma1: (-8.0, -6.0), count1: 20, log_gamma2: (-7.0, 4.7), count2: 30 };
        let a = g.gamma1();
        assert_eq!(a.len(), 20);
        assert!((a[0].ln() + 8.0).abs() < 1e-12 && (a[19].ln() + 6.0).abs() < 1e-12);
        assert_eq!(g.gamma2().len(), 30);
    }
}
