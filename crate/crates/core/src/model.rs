//! Model parameters, identifiability constraints and the penalty primitives.
//!
//! For event type `j` the log-intensity is
//! `beta0[j] + beta[j]·x + thetaᵀ loadings[j]ᵀ z`, with `theta ~ N(0, sigma)`.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

use crate::covariates::CovariateSpec;
use crate::events::EventCatalog;
use crate::num::{cast, to_f64, Scalar};

/// Eigenvalue floor applied when a covariance estimate loses definiteness.
pub const SIGMA_EIGEN_FLOOR: f64 = 1e-8;

/// Default SCAD shape parameter.
pub const SCAD_A: f64 = 3.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("covariance matrix is not symmetric positive definite")]
    SigmaNotPD,
    #[error("SCAD derivative is defined for nonnegative arguments, got {0}")]
    NegativeInput(f64),
    #[error("mask shape does not match parameters: {0}")]
    MaskShapeMismatch(String),
    #[error("invalid constraint mask: {0}")]
    InvalidMask(String),
    #[error("invalid penalty: {0}")]
    InvalidPenalty(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Parameter dimensions: covariate counts per event type plus the factor
/// dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims {
    pub fixed: Vec<usize>,
    pub random: Vec<usize>,
    pub factors: usize,
}

impl Dims {
    pub fn from_spec(spec: &CovariateSpec, factors: usize) -> Self {
        Self {
            fixed: spec.fixed.iter().map(Vec::len).collect(),
            random: spec.random.iter().map(Vec::len).collect(),
            factors,
        }
    }

    pub fn types(&self) -> usize {
        self.fixed.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    pub beta0: Vec<T>,
    pub beta: Vec<Vec<T>>,
    /// `loadings[j]` is `random_dim(j) × factors`.
    pub loadings: Vec<DMatrix<T>>,
    pub sigma: DMatrix<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// All coefficients zero and `sigma = I`.
    pub fn zeros(dims: &Dims) -> Self {
        let k = dims.factors;
        Self {
            beta0: vec![T::zero(); dims.types()],
            beta: dims.fixed.iter().map(|&l| vec![T::zero(); l]).collect(),
            loadings: dims.random.iter().map(|&l| DMatrix::zeros(l, k)).collect(),
            sigma: DMatrix::identity(k, k),
        }
    }

    pub fn types(&self) -> usize {
        self.beta0.len()
    }

    pub fn factors(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn dims(&self) -> Dims {
        Dims {
            fixed: self.beta.iter().map(Vec::len).collect(),
            random: self.loadings.iter().map(|a| a.nrows()).collect(),
            factors: self.factors(),
        }
    }

    /// Checks shapes against `dims`, symmetry of `sigma` and definiteness.
    pub fn validate(&self, dims: &Dims) -> Result<(), ModelError> {
        if self.dims() != *dims {
            return Err(ModelError::DimensionMismatch(format!("expected {dims:?}, found {:?}", self.dims())));
        }
        if self.loadings.iter().any(|a| a.ncols() != self.factors()) {
            return Err(ModelError::DimensionMismatch("loading columns differ from factor count".into()));
        }
        let k = self.factors();
        let tol: T = cast(1e-12);
        for r in 0..k {
            for c in 0..r {
                if (self.sigma[(r, c)] - self.sigma[(c, r)]).abs() > tol {
                    return Err(ModelError::SigmaNotPD);
                }
            }
        }
        GaussianPrior::new(&self.sigma).map(|_| ())
    }

    /// Converts every entry to another scalar type.
    pub fn convert<U: Scalar>(&self) -> ModelParams<U> {
        let c = |v: T| cast::<U>(to_f64(v));
        ModelParams {
            beta0: self.beta0.iter().map(|&v| c(v)).collect(),
            beta: self.beta.iter().map(|b| b.iter().map(|&v| c(v)).collect()).collect(),
            loadings: self.loadings.iter().map(|a| a.map(c)).collect(),
            sigma: self.sigma.map(c),
        }
    }

    /// Largest absolute entrywise difference to `other` (same shapes).
    pub fn max_abs_diff(&self, other: &Self) -> T {
        let mut m = T::zero();
        let mut upd = |a: T, b: T| m = m.max((a - b).abs());
        for (a, b) in self.beta0.iter().zip(&other.beta0) {
            upd(*a, *b);
        }
        for (ba, bb) in self.beta.iter().zip(&other.beta) {
            for (a, b) in ba.iter().zip(bb) {
                upd(*a, *b);
            }
        }
        for (aa, ab) in self.loadings.iter().zip(&other.loadings) {
            for (a, b) in aa.iter().zip(ab.iter()) {
                upd(*a, *b);
            }
        }
        for (a, b) in self.sigma.iter().zip(other.sigma.iter()) {
            upd(*a, *b);
        }
        m
    }
}

/// Cholesky-factored `N(0, sigma)` density.
#[derive(Debug, Clone)]
pub struct GaussianPrior<T: Scalar> {
    chol: Option<Cholesky<T, Dyn>>,
    log_norm: T,
    inverse: DMatrix<T>,
}

impl<T: Scalar> GaussianPrior<T> {
    pub fn new(sigma: &DMatrix<T>) -> Result<Self, ModelError> {
        let k = sigma.nrows();
        if k == 0 {
            return Ok(Self { chol: None, log_norm: T::zero(), inverse: DMatrix::zeros(0, 0) });
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::SigmaNotPD);
        }
        let chol = Cholesky::new(sigma.clone()).ok_or(ModelError::SigmaNotPD)?;
        let l = chol.l_dirty();
        let mut log_det = T::zero();
        for i in 0..k {
            let d = l[(i, i)];
            if !(d > T::zero()) {
                return Err(ModelError::SigmaNotPD);
            }
            log_det += d.ln();
        }
        log_det *= cast::<T>(2.0);
        let two_pi: T = T::two_pi();
        let log_norm = -(cast::<T>(k as f64) * two_pi.ln() + log_det) * cast::<T>(0.5);
        let inverse = chol.inverse();
        Ok(Self { chol: Some(chol), log_norm, inverse })
    }

    pub fn dim(&self) -> usize {
        self.inverse.nrows()
    }

    pub fn log_density(&self, theta: &[T]) -> T {
        match &self.chol {
            None => T::zero(),
            Some(chol) => {
                let v = DVector::from_column_slice(theta);
                let w = chol.l_dirty().solve_lower_triangular(&v).expect("nonsingular factor");
                self.log_norm - w.norm_squared() * cast::<T>(0.5)
            }
        }
    }

    /// `-sigma⁻¹ theta`.
    pub fn grad_log_density(&self, theta: &[T]) -> Vec<T> {
        let k = self.dim();
        (0..k)
            .map(|r| {
                let mut s = T::zero();
                for c in 0..k {
                    s += self.inverse[(r, c)] * theta[c];
                }
                -s
            })
            .collect()
    }

    pub fn inverse(&self) -> &DMatrix<T> {
        &self.inverse
    }

    /// Lower Cholesky factor of sigma (empty for `K = 0`).
    pub fn cholesky_l(&self) -> DMatrix<T> {
        match &self.chol {
            None => DMatrix::zeros(0, 0),
            Some(c) => c.l(),
        }
    }
}

/// Symmetrizes `sigma` and floors its eigenvalues at `floor`.
pub fn floor_eigenvalues<T: Scalar>(sigma: &DMatrix<T>, floor: T) -> DMatrix<T> {
    let k = sigma.nrows();
    if k == 0 {
        return sigma.clone();
    }
    let sym = (sigma + sigma.transpose()) * cast::<T>(0.5);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    let lambda = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(floor)));
    let q = &eig.eigenvectors;
    let out = q * lambda * q.transpose();
    (&out + out.transpose()) * cast::<T>(0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaConstraint {
    FreePenalized,
    FreeUnpenalized,
    /// Held at zero; used when refitting on a selected support.
    FixedZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadingConstraint {
    FreePenalized,
    FreeUnpenalized,
    FixedZero,
    FixedOne,
}

impl LoadingConstraint {
    pub fn is_fixed(self) -> bool {
        matches!(self, LoadingConstraint::FixedZero | LoadingConstraint::FixedOne)
    }
}

/// How rotation and scale of the factors are pinned down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMode {
    /// A K×K identity submatrix of the stacked loadings is fixed; sigma is free.
    Loadings,
    /// Sigma has unit diagonal; a diagonal K×K submatrix of loadings is
    /// unpenalized with the rest of its rows fixed at zero.
    Sigma,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMask {
    pub beta: Vec<Vec<BetaConstraint>>,
    /// `loadings[j][l][k]`.
    pub loadings: Vec<Vec<Vec<LoadingConstraint>>>,
    pub mode: AnchorMode,
}

impl ConstraintMask {
    /// Every coefficient free and penalized; anchors still need declaring.
    pub fn penalized(dims: &Dims, mode: AnchorMode) -> Self {
        Self {
            beta: dims.fixed.iter().map(|&l| vec![BetaConstraint::FreePenalized; l]).collect(),
            loadings: dims
                .random
                .iter()
                .map(|&l| vec![vec![LoadingConstraint::FreePenalized; dims.factors]; l])
                .collect(),
            mode,
        }
    }

    /// Anchors factor `k` on row `l` of `loadings[j]`: the other entries of
    /// that row become fixed zeros.
    pub fn anchor(&mut self, j: usize, l: usize, k: usize) -> &mut Self {
        let row = &mut self.loadings[j][l];
        for (c, entry) in row.iter_mut().enumerate() {
            *entry = if c != k {
                LoadingConstraint::FixedZero
            } else if self.mode == AnchorMode::Loadings {
                LoadingConstraint::FixedOne
            } else {
                LoadingConstraint::FreeUnpenalized
            };
        }
        self
    }

    pub fn dims(&self) -> Dims {
        Dims {
            fixed: self.beta.iter().map(Vec::len).collect(),
            random: self.loadings.iter().map(Vec::len).collect(),
            factors: self.factors(),
        }
    }

    pub fn factors(&self) -> usize {
        self.loadings.iter().flatten().map(Vec::len).next().unwrap_or(0)
    }

    /// Checks shape against `dims` and that the anchors identify every factor.
    pub fn validate(&self, dims: &Dims) -> Result<(), ModelError> {
        let shape_ok = self.beta.len() == dims.types()
            && self.loadings.len() == dims.types()
            && self.beta.iter().zip(&dims.fixed).all(|(b, &l)| b.len() == l)
            && self.loadings.iter().zip(&dims.random).all(|(a, &l)| a.len() == l)
            && self.loadings.iter().flatten().all(|row| row.len() == dims.factors);
        if !shape_ok {
            return Err(ModelError::MaskShapeMismatch(format!("mask {:?} vs parameters {dims:?}", self.dims())));
        }
        let k = dims.factors;
        let mut covered = vec![false; k];
        for row in self.loadings.iter().flatten() {
            match self.mode {
                AnchorMode::Loadings => {
                    if row.iter().all(|c| c.is_fixed())
                        && row.iter().filter(|&&c| c == LoadingConstraint::FixedOne).count() == 1
                    {
                        let col = row.iter().position(|&c| c == LoadingConstraint::FixedOne).expect("one anchor");
                        covered[col] = true;
                    }
                }
                AnchorMode::Sigma => {
                    if row.contains(&LoadingConstraint::FixedOne) {
                        return Err(ModelError::InvalidMask(
                            "fixed-one loadings are not allowed when sigma carries the scale".into(),
                        ));
                    }
                    let free: Vec<usize> = (0..k).filter(|&c| row[c] != LoadingConstraint::FixedZero).collect();
                    if free.len() == 1 && row[free[0]] == LoadingConstraint::FreeUnpenalized {
                        covered[free[0]] = true;
                    }
                }
            }
        }
        if let Some(missing) = covered.iter().position(|&c| !c) {
            return Err(ModelError::InvalidMask(format!("factor {} has no anchor row", missing + 1)));
        }
        Ok(())
    }

    /// For each factor, the `(j, l)` of its anchor row.
    pub fn anchor_rows(&self) -> Vec<Option<(usize, usize)>> {
        let k = self.factors();
        let mut out = vec![None; k];
        for (j, rows) in self.loadings.iter().enumerate() {
            for (l, row) in rows.iter().enumerate() {
                let non_zero: Vec<usize> = (0..k).filter(|&c| row[c] != LoadingConstraint::FixedZero).collect();
                if non_zero.len() == 1 {
                    let c = non_zero[0];
                    let is_anchor = match self.mode {
                        AnchorMode::Loadings => row[c] == LoadingConstraint::FixedOne,
                        AnchorMode::Sigma => row[c] == LoadingConstraint::FreeUnpenalized,
                    };
                    if is_anchor && out[c].is_none() {
                        out[c] = Some((j, l));
                    }
                }
            }
        }
        out
    }

    /// Parses the mask file format:
    ///
    /// ```text
    /// mode anchor_sigma
    /// type W1
    /// beta ..u.
    /// A .0.
    /// ```
    ///
    /// Symbols: `.` penalized, `u` unpenalized, `0` fixed zero, `1` fixed
    /// one; `-` stands for an empty vector. `A` lines give loading rows in
    /// order. Types without a block must have no covariates.
    pub fn parse(text: &str, catalog: &EventCatalog) -> Result<Self, ModelError> {
        let types = catalog.len();
        let mut beta: Vec<Option<Vec<BetaConstraint>>> = vec![None; types];
        let mut loadings: Vec<Vec<Vec<LoadingConstraint>>> = vec![Vec::new(); types];
        let mut mode = None;
        let mut current: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ModelError::Parse { line, message };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut tokens = trimmed.split_whitespace();
            let key = tokens.next().unwrap_or_default();
            let arg = tokens.next().unwrap_or("-");
            if tokens.next().is_some() {
                return Err(err("too many fields".into()));
            }
            let symbols = if arg == "-" { "" } else { arg };
            match key {
                "mode" => {
                    mode = Some(match arg {
                        "anchor_loadings" => AnchorMode::Loadings,
                        "anchor_sigma" => AnchorMode::Sigma,
                        other => return Err(err(format!("unknown mode `{other}`"))),
                    })
                }
                "type" => {
                    current = Some(catalog.lookup(arg).ok_or_else(|| err(format!("unknown event label `{arg}`")))?);
                }
                "beta" => {
                    let j = current.ok_or_else(|| err("`beta` before `type`".into()))?;
                    let parsed = symbols
                        .chars()
                        .map(|c| match c {
                            '.' => Ok(BetaConstraint::FreePenalized),
                            'u' => Ok(BetaConstraint::FreeUnpenalized),
                            '0' => Ok(BetaConstraint::FixedZero),
                            other => Err(err(format!("invalid beta symbol `{other}`"))),
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    beta[j] = Some(parsed);
                }
                "A" => {
                    let j = current.ok_or_else(|| err("`A` before `type`".into()))?;
                    let parsed = symbols
                        .chars()
                        .map(|c| match c {
                            '.' => Ok(LoadingConstraint::FreePenalized),
                            'u' => Ok(LoadingConstraint::FreeUnpenalized),
                            '0' => Ok(LoadingConstraint::FixedZero),
                            '1' => Ok(LoadingConstraint::FixedOne),
                            other => Err(err(format!("invalid loading symbol `{other}`"))),
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    loadings[j].push(parsed);
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let mode = mode.ok_or(ModelError::Parse { line: 0, message: "missing `mode` line".into() })?;
        Ok(Self { beta: beta.into_iter().map(Option::unwrap_or_default).collect(), loadings, mode })
    }

    pub fn to_text(&self, catalog: &EventCatalog) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            AnchorMode::Loadings => "anchor_loadings",
            AnchorMode::Sigma => "anchor_sigma",
        };
        let _ = writeln!(out, "mode {mode}");
        for j in 0..self.beta.len() {
            let _ = writeln!(out, "type {}", catalog.name(j));
            let b: String = self.beta[j]
                .iter()
                .map(|c| match c {
                    BetaConstraint::FreePenalized => '.',
                    BetaConstraint::FreeUnpenalized => 'u',
                    BetaConstraint::FixedZero => '0',
                })
                .collect();
            let _ = writeln!(out, "beta {}", if b.is_empty() { "-" } else { &b });
            for row in &self.loadings[j] {
                let r: String = row
                    .iter()
                    .map(|c| match c {
                        LoadingConstraint::FreePenalized => '.',
                        LoadingConstraint::FreeUnpenalized => 'u',
                        LoadingConstraint::FixedZero => '0',
                        LoadingConstraint::FixedOne => '1',
                    })
                    .collect();
                let _ = writeln!(out, "A {}", if r.is_empty() { "-" } else { &r });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub a: f64,
}

impl PenaltyConfig {
    pub fn new(gamma1: f64, gamma2: f64) -> Self {
        Self { gamma1, gamma2, a: SCAD_A }
    }

    pub fn none() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.a > 2.0) {
            return Err(ModelError::InvalidPenalty(format!("SCAD shape a = {} must exceed 2", self.a)));
        }
        if !(self.gamma1 >= 0.0) || !(self.gamma2 >= 0.0) {
            return Err(ModelError::InvalidPenalty("tuning parameters must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Log-intensity of type `j` without the at-risk factor.
pub fn log_intensity<T: Scalar>(
    params: &ModelParams<T>,
    j: usize,
    x: &[T],
    z: &[T],
    theta: &[T],
) -> Result<T, ModelError> {
    if j >= params.types() {
        return Err(ModelError::DimensionMismatch(format!("event type {j} out of range")));
    }
    let a = &params.loadings[j];
    if x.len() != params.beta[j].len() || z.len() != a.nrows() || theta.len() != params.factors() {
        return Err(ModelError::DimensionMismatch(format!(
            "x {} / z {} / theta {} against beta {} / loadings {}x{}",
            x.len(),
            z.len(),
            theta.len(),
            params.beta[j].len(),
            a.nrows(),
            a.ncols()
        )));
    }
    let mut eta = params.beta0[j];
    for (b, v) in params.beta[j].iter().zip(x) {
        eta += *b * *v;
    }
    for (l, &zl) in z.iter().enumerate() {
        if zl == T::zero() {
            continue;
        }
        for (k, &th) in theta.iter().enumerate() {
            eta += th * a[(l, k)] * zl;
        }
    }
    Ok(eta)
}

/// Derivative of the SCAD penalty at `x >= 0`:
/// `gamma` on `[0, gamma]`, `(a·gamma − x)₊ / (a − 1)` beyond.
pub fn scad_derivative<T: Scalar>(x: T, gamma: T, a: T) -> Result<T, ModelError> {
    if x < T::zero() {
        return Err(ModelError::NegativeInput(to_f64(x)));
    }
    if gamma <= T::zero() {
        return Ok(T::zero());
    }
    if x <= gamma {
        Ok(gamma)
    } else {
        Ok((a * gamma - x).max(T::zero()) / (a - T::one()))
    }
}

/// SCAD penalty value at `|x|`.
pub fn scad_penalty<T: Scalar>(x: T, gamma: T, a: T) -> T {
    let x = x.abs();
    if gamma <= T::zero() {
        return T::zero();
    }
    let two: T = cast(2.0);
    if x <= gamma {
        gamma * x
    } else if x <= a * gamma {
        (two * a * gamma * x - x * x - gamma * gamma) / (two * (a - T::one()))
    } else {
        (a + T::one()) * gamma * gamma / two
    }
}

/// `sgn(x) (|x| − gamma)₊`.
pub fn soft_threshold<T: Scalar>(x: T, gamma: T) -> T {
    let shrunk = x.abs() - gamma;
    if shrunk <= T::zero() {
        T::zero()
    } else if x > T::zero() {
        shrunk
    } else {
        -shrunk
    }
}

/// Enforces fixed entries and, in sigma-anchored mode, rescales to a unit
/// diagonal covariance (`A_j ← A_j D`, `Σ ← D⁻¹ Σ D⁻¹`). Returns the
/// per-factor scales `D` (all ones in loadings-anchored mode).
pub fn apply_mask_in_place<T: Scalar>(params: &mut ModelParams<T>, mask: &ConstraintMask) -> Result<Vec<T>, ModelError> {
    mask.validate(&params.dims()).map_err(|e| match e {
        ModelError::InvalidMask(m) => ModelError::InvalidMask(m),
        other => ModelError::MaskShapeMismatch(other.to_string()),
    })?;
    for (b, cons) in params.beta.iter_mut().zip(&mask.beta) {
        for (v, c) in b.iter_mut().zip(cons) {
            if *c == BetaConstraint::FixedZero {
                *v = T::zero();
            }
        }
    }
    for (a, rows) in params.loadings.iter_mut().zip(&mask.loadings) {
        for (l, row) in rows.iter().enumerate() {
            for (k, c) in row.iter().enumerate() {
                match c {
                    LoadingConstraint::FixedZero => a[(l, k)] = T::zero(),
                    LoadingConstraint::FixedOne => a[(l, k)] = T::one(),
                    _ => {}
                }
            }
        }
    }
    let k = params.factors();
    let mut scales = vec![T::one(); k];
    if mask.mode == AnchorMode::Sigma {
        for (c, s) in scales.iter_mut().enumerate() {
            *s = params.sigma[(c, c)].sqrt();
        }
        if scales.iter().any(|s| !(*s > T::zero()) || !s.is_finite()) {
            return Err(ModelError::SigmaNotPD);
        }
        for r in 0..k {
            for c in 0..k {
                params.sigma[(r, c)] = if r == c { T::one() } else { params.sigma[(r, c)] / (scales[r] * scales[c]) };
            }
        }
        for a in params.loadings.iter_mut() {
            for (c, mut col) in a.column_iter_mut().enumerate() {
                col *= scales[c];
            }
        }
    }
    Ok(scales)
}

/// Value-returning form of [`apply_mask_in_place`].
pub fn apply_mask<T: Scalar>(params: &ModelParams<T>, mask: &ConstraintMask) -> Result<ModelParams<T>, ModelError> {
    let mut out = params.clone();
    apply_mask_in_place(&mut out, mask)?;
    Ok(out)
}

/// In sigma-anchored mode the sign of each factor is free; this flips
/// factors so their anchor loading is nonnegative. Returns the flipped
/// factor indices.
pub fn canonicalize_signs<T: Scalar>(params: &mut ModelParams<T>, mask: &ConstraintMask) -> Vec<usize> {
    if mask.mode != AnchorMode::Sigma {
        return Vec::new();
    }
    let mut flipped = Vec::new();
    for (k, anchor) in mask.anchor_rows().into_iter().enumerate() {
        let Some((j, l)) = anchor else { continue };
        if params.loadings[j][(l, k)] < T::zero() {
            flipped.push(k);
            for a in params.loadings.iter_mut() {
                a.column_mut(k).iter_mut().for_each(|v| *v = -*v);
            }
            let kk = params.factors();
            for c in 0..kk {
                if c != k {
                    params.sigma[(k, c)] = -params.sigma[(k, c)];
                    params.sigma[(c, k)] = -params.sigma[(c, k)];
                }
            }
        }
    }
    flipped
}

/// One scalar parameter of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Coord {
    Intercept(usize),
    Beta(usize, usize),
    Loading(usize, usize, usize),
    /// Lower-triangular covariance entry `(row, col)` with `row >= col`.
    Sigma(usize, usize),
}

impl Coord {
    pub fn value<T: Scalar>(&self, params: &ModelParams<T>) -> T {
        match *self {
            Coord::Intercept(j) => params.beta0[j],
            Coord::Beta(j, l) => params.beta[j][l],
            Coord::Loading(j, l, k) => params.loadings[j][(l, k)],
            Coord::Sigma(r, c) => params.sigma[(r, c)],
        }
    }

    pub fn name(&self, catalog: &EventCatalog, spec: &CovariateSpec) -> String {
        match *self {
            Coord::Intercept(j) => format!("beta0[{}]", catalog.name(j)),
            Coord::Beta(j, l) => format!("beta[{}|{}]", catalog.name(j), spec.fixed[j][l].describe(catalog)),
            Coord::Loading(j, l, k) => {
                format!("A[{}|{}|{}]", catalog.name(j), spec.random[j][l].describe(catalog), k + 1)
            }
            Coord::Sigma(r, c) => format!("Sigma[{},{}]", r + 1, c + 1),
        }
    }

    /// Every coordinate of a parameter vector in reporting order:
    /// intercepts, then fixed effects by type, loadings by factor then type,
    /// then the strict lower triangle of sigma (and its diagonal when
    /// `with_sigma_diagonal`).
    pub fn all(dims: &Dims, with_sigma_diagonal: bool) -> Vec<Coord> {
        let mut out = Vec::new();
        out.extend((0..dims.types()).map(Coord::Intercept));
        for (j, &l1) in dims.fixed.iter().enumerate() {
            out.extend((0..l1).map(|l| Coord::Beta(j, l)));
        }
        for k in 0..dims.factors {
            for (j, &l2) in dims.random.iter().enumerate() {
                out.extend((0..l2).map(|l| Coord::Loading(j, l, k)));
            }
        }
        if with_sigma_diagonal {
            for r in 0..dims.factors {
                out.push(Coord::Sigma(r, r));
            }
        }
        for c in 0..dims.factors {
            for r in (c + 1)..dims.factors {
                out.push(Coord::Sigma(r, c));
            }
        }
        out
    }
}

fn fmt_row(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| format!(",{v}")).collect()
}

impl ModelParams<f64> {
    /// Writes the parameter file format:
    ///
    /// ```text
    /// factors,3
    /// type,W1
    /// beta0,-4
    /// beta,0,1
    /// A,0,0,1
    /// sigma,1,0,0
    /// ```
    ///
    /// `A` lines are the rows of that type's loading matrix; `sigma` lines
    /// are covariance rows.
    pub fn to_text(&self, catalog: &EventCatalog) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "factors,{}", self.factors());
        for j in 0..self.types() {
            let _ = writeln!(out, "type,{}", catalog.name(j));
            let _ = writeln!(out, "beta0,{}", self.beta0[j]);
            let _ = writeln!(out, "beta{}", fmt_row(self.beta[j].iter().copied()));
            for row in self.loadings[j].row_iter() {
                let _ = writeln!(out, "A{}", fmt_row(row.iter().copied()));
            }
        }
        for row in self.sigma.row_iter() {
            let _ = writeln!(out, "sigma{}", fmt_row(row.iter().copied()));
        }
        out
    }

    pub fn parse(text: &str, catalog: &EventCatalog) -> Result<Self, ModelError> {
        let types = catalog.len();
        let mut factors: Option<usize> = None;
        let mut beta0 = vec![None; types];
        let mut beta: Vec<Vec<f64>> = vec![Vec::new(); types];
        let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); types];
        let mut sigma_rows: Vec<Vec<f64>> = Vec::new();
        let mut current = None;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ModelError::Parse { line, message };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut fields = trimmed.split(',').map(str::trim);
            let key = fields.next().unwrap_or_default();
            let rest: Vec<&str> = fields.collect();
            let numbers = || {
                rest.iter()
                    .map(|s| s.parse::<f64>().map_err(|_| err(format!("invalid number `{s}`"))))
                    .collect::<Result<Vec<f64>, _>>()
            };
            match key {
                "factors" => {
                    let k = rest.first().and_then(|s| s.parse().ok()).ok_or_else(|| err("invalid factor count".into()))?;
                    factors = Some(k);
                }
                "type" => {
                    let label = rest.first().copied().unwrap_or_default();
                    current = Some(catalog.lookup(label).ok_or_else(|| err(format!("unknown event label `{label}`")))?);
                }
                "beta0" | "beta" | "A" => {
                    let j = current.ok_or_else(|| err(format!("`{key}` before `type`")))?;
                    let v = numbers()?;
                    match key {
                        "beta0" => {
                            if v.len() != 1 {
                                return Err(err("beta0 takes one value".into()));
                            }
                            beta0[j] = Some(v[0]);
                        }
                        "beta" => beta[j] = v,
                        _ => rows[j].push(v),
                    }
                }
                "sigma" => sigma_rows.push(numbers()?),
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let k = factors.ok_or(ModelError::Parse { line: 0, message: "missing `factors` line".into() })?;
        if sigma_rows.len() != k || sigma_rows.iter().any(|r| r.len() != k) {
            return Err(ModelError::DimensionMismatch(format!("sigma must be {k}x{k}")));
        }
        let mut loadings = Vec::with_capacity(types);
        for (j, r) in rows.into_iter().enumerate() {
            if r.iter().any(|row| row.len() != k) {
                return Err(ModelError::DimensionMismatch(format!("loading rows of `{}` need {k} values", catalog.name(j))));
            }
            loadings.push(DMatrix::from_fn(r.len(), k, |a, b| r[a][b]));
        }
        let beta0 = beta0
            .into_iter()
            .enumerate()
            .map(|(j, b)| b.ok_or_else(|| ModelError::DimensionMismatch(format!("missing beta0 for `{}`", catalog.name(j)))))
            .collect::<Result<Vec<_>, _>>()?;
        let sigma = DMatrix::from_fn(k, k, |a, b| sigma_rows[a][b]);
        Ok(Self { beta0, beta, loadings, sigma })
    }
}
