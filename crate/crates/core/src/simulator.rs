//! Event-sequence generation by competing exponential clocks.
//!
//! Covariates change only at events, so between events every intensity is
//! constant and the next event is the first of `J` exponential clocks.

use std::fmt::Write as _;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::covariates::{CovariateError, CovariateRule, CovariateSpec};
use crate::events::{Dataset, EventCatalog, EventRecord, EventSequence};
use crate::model::{AnchorMode, ConstraintMask, Dims, GaussianPrior, ModelError};
use crate::rng;
use crate::Params;

pub const DEFAULT_MAX_EVENTS: usize = 10_000;
pub const DEFAULT_HORIZON: f64 = 1e7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
    #[error("subject {subject}: {guard} guard tripped")]
    GuardTripped { subject: String, guard: Guard },
    #[error("{count} subject(s) tripped a guard, first: {first}")]
    GuardsTripped { count: usize, first: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Guard {
    MaxEvents,
    Horizon,
}

impl std::fmt::Display for Guard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Guard::MaxEvents => "max-events",
            Guard::Horizon => "horizon",
        })
    }
}

/// Ground truth for simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueModel {
    pub params: Params,
    pub spec: CovariateSpec,
    pub catalog: EventCatalog,
    /// Rate of the exponential censoring time; `None` disables censoring.
    pub censor_rate: Option<f64>,
}

impl TrueModel {
    pub fn validate(&self) -> Result<(), SimError> {
        // Without a terminating event only censoring ends a path.
        if self.catalog.terminating().is_none() && self.censor_rate.is_none() {
            return Err(SimError::ConfigInvalid("catalog declares no terminating event and censoring is off".into()));
        }
        self.spec.validate(&self.catalog)?;
        let k = self.params.factors();
        self.params.validate(&Dims::from_spec(&self.spec, k))?;
        GaussianPrior::new(&self.params.sigma)?;
        if let Some(r) = self.censor_rate {
            if !(r > 0.0 && r.is_finite()) {
                return Err(SimError::ConfigInvalid(format!("censor rate {r} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub seed: u64,
    pub max_events: usize,
    pub horizon: f64,
    pub sampler: ClockSampler,
}

impl SimConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, max_events: DEFAULT_MAX_EVENTS, horizon: DEFAULT_HORIZON, sampler: ClockSampler::Competing }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::ConfigInvalid("n must be at least 1".into()));
        }
        if self.max_events == 0 || !(self.horizon > 0.0) {
            return Err(SimError::ConfigInvalid("guards must be positive".into()));
        }
        Ok(())
    }
}

/// Two equivalent ways of drawing the next `(wait, type)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockSampler {
    /// One exponential clock per type; the earliest fires.
    Competing,
    /// `Exponential(Σλ)` wait, then a categorical draw of the type.
    TotalRate,
}

/// Draws `(wait, type)` for the given intensities. `None` when every rate is
/// zero.
pub fn next_event<R: Rng + ?Sized>(rates: &[f64], sampler: ClockSampler, rng: &mut R) -> Option<(f64, usize)> {
    match sampler {
        ClockSampler::Competing => {
            let mut best: Option<(f64, usize)> = None;
            for (j, &r) in rates.iter().enumerate() {
                if r > 0.0 {
                    let w = Exp::new(r).expect("positive rate").sample(rng);
                    if best.is_none_or(|(b, _)| w < b) {
                        best = Some((w, j));
                    }
                }
            }
            best
        }
        ClockSampler::TotalRate => {
            let total: f64 = rates.iter().filter(|r| **r > 0.0).sum();
            if !(total > 0.0) {
                return None;
            }
            let wait = Exp::new(total).expect("positive rate").sample(rng);
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut last = 0;
            for (j, &r) in rates.iter().enumerate() {
                if r > 0.0 {
                    acc += r;
                    last = j;
                    if u < acc {
                        return Some((wait, j));
                    }
                }
            }
            Some((wait, last))
        }
    }
}

/// Guards and the sampling variant for one path.
#[derive(Debug, Clone, Copy)]
pub struct PathLimits {
    pub max_events: usize,
    pub horizon: f64,
    pub sampler: ClockSampler,
}

/// Simulates one path given a rate function of the history. The rates are
/// held constant until the next event. Stops at `terminating`, at `censor`,
/// or when every rate is zero (which requires a finite `censor`).
pub fn simulate_path<R: Rng + ?Sized>(
    subject_id: &str,
    mut rates: impl FnMut(&[EventRecord]) -> Vec<f64>,
    terminating: Option<usize>,
    censor: Option<f64>,
    limits: PathLimits,
    rng: &mut R,
) -> Result<EventSequence, SimError> {
    let trip = |guard| SimError::GuardTripped { subject: subject_id.to_string(), guard };
    let mut records: Vec<EventRecord> = Vec::new();
    let mut t = 0.0;
    loop {
        let lambda = rates(&records);
        let Some((wait, j)) = next_event(&lambda, limits.sampler, rng) else {
            return match censor {
                Some(c) => Ok(EventSequence { subject_id: subject_id.to_string(), records, censor_time: c }),
                None => Err(trip(Guard::Horizon)),
            };
        };
        let next = t + wait;
        if let Some(c) = censor {
            if next > c {
                return Ok(EventSequence { subject_id: subject_id.to_string(), records, censor_time: c });
            }
        }
        if next > limits.horizon {
            return Err(trip(Guard::Horizon));
        }
        if records.len() >= limits.max_events {
            return Err(trip(Guard::MaxEvents));
        }
        t = next;
        records.push(EventRecord { event_type: j, time: t });
        if Some(j) == terminating {
            return Ok(EventSequence { subject_id: subject_id.to_string(), records, censor_time: t });
        }
    }
}

/// A simulated subject with the latent factor that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedSubject {
    pub sequence: EventSequence,
    pub theta: Vec<f64>,
}

fn rule_values(rules: &[CovariateRule], records: &[EventRecord]) -> Vec<f64> {
    let n = records.len();
    let last = records.last().map(|r| r.event_type);
    let second = if n >= 2 { Some(records[n - 2].event_type) } else { None };
    rules.iter().map(|r| r.eval(last, second)).collect()
}

/// Per-type intensities given a history and a latent factor.
pub fn intensities(model: &TrueModel, theta: &[f64], records: &[EventRecord]) -> Vec<f64> {
    let p = &model.params;
    let last = records.last().map(|r| r.event_type);
    (0..model.catalog.len())
        .map(|j| {
            if !model.spec.gate_open(j, last) {
                return 0.0;
            }
            let x = rule_values(&model.spec.fixed[j], records);
            let z = rule_values(&model.spec.random[j], records);
            let mut eta = p.beta0[j] + p.beta[j].iter().zip(&x).map(|(b, v)| b * v).sum::<f64>();
            let a = &p.loadings[j];
            for (l, &zl) in z.iter().enumerate() {
                if zl != 0.0 {
                    for (k, &th) in theta.iter().enumerate() {
                        eta += zl * a[(l, k)] * th;
                    }
                }
            }
            eta.exp()
        })
        .collect()
}

/// Draws `θ ~ N(0, Σ)`, an optional censoring time, then the event path.
pub fn simulate_subject<R: Rng + ?Sized>(
    model: &TrueModel,
    subject_id: &str,
    limits: PathLimits,
    rng: &mut R,
) -> Result<SimulatedSubject, SimError> {
    let k = model.params.factors();
    let theta: Vec<f64> = if k == 0 {
        Vec::new()
    } else {
        let prior = GaussianPrior::new(&model.params.sigma)?;
        let e = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(rng)));
        (prior.cholesky_l() * e).iter().copied().collect()
    };
    let censor = model.censor_rate.map(|r| Exp::new(r).expect("validated rate").sample(rng));
    let sequence = simulate_path(
        subject_id,
        |h| intensities(model, &theta, h),
        model.catalog.terminating(),
        censor,
        limits,
        rng,
    )?;
    Ok(SimulatedSubject { sequence, theta })
}

/// A simulated dataset with the per-subject latent factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub thetas: Vec<Vec<f64>>,
}

impl SimulatedData {
    /// Subjects whose observation ended by censoring before termination.
    pub fn censored_fraction(&self) -> f64 {
        let cat = &self.dataset.catalog;
        let c = self.dataset.sequences.iter().filter(|s| !s.is_terminated(cat)).count();
        c as f64 / self.dataset.len().max(1) as f64
    }
}

pub fn subject_name(index: usize) -> String {
    format!("s{:05}", index + 1)
}

/// `n` independent subjects, subject `i` drawn from stream `(seed, i)`.
pub fn simulate_dataset(model: &TrueModel, config: &SimConfig) -> Result<SimulatedData, SimError> {
    model.validate()?;
    config.validate()?;
    let limits = PathLimits { max_events: config.max_events, horizon: config.horizon, sampler: config.sampler };
    let results: Vec<Result<SimulatedSubject, SimError>> = (0..config.n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(config.seed, rng::purpose::SIMULATE, i as u64);
            simulate_subject(model, &subject_name(i), limits, &mut r)
        })
        .collect();
    let mut sequences = Vec::with_capacity(config.n);
    let mut thetas = Vec::with_capacity(config.n);
    let mut tripped: Vec<String> = Vec::new();
    for r in results {
        match r {
            Ok(s) => {
                sequences.push(s.sequence);
                thetas.push(s.theta);
            }
            Err(SimError::GuardTripped { subject, .. }) => tripped.push(subject),
            Err(e) => return Err(e),
        }
    }
    if let Some(first) = tripped.first() {
        return Err(SimError::GuardsTripped { count: tripped.len(), first: first.clone() });
    }
    Ok(SimulatedData { dataset: Dataset { catalog: model.catalog.clone(), sequences }, thetas })
}

/// Sidecar listing each subject's latent factor: `subject,theta_1,...`.
pub fn thetas_to_text(data: &SimulatedData) -> String {
    let mut out = String::new();
    let k = data.thetas.first().map_or(0, Vec::len);
    out.push_str("subject");
    for c in 0..k {
        let _ = write!(out, ",theta{}", c + 1);
    }
    out.push('\n');
    for (s, th) in data.dataset.sequences.iter().zip(&data.thetas) {
        out.push_str(&s.subject_id);
        for v in th {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_thetas(text: &str) -> Result<Vec<(String, Vec<f64>)>, SimError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split(',');
        let id = f.next().unwrap_or_default().trim().to_string();
        let vals = f
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| SimError::ConfigInvalid(format!("thetas line {}: bad number", i + 1)))?;
        out.push((id, vals));
    }
    Ok(out)
}

/// The fifteen-type, three-factor simulation design with its mask.
#[derive(Debug, Clone)]
pub struct Design {
    pub catalog: EventCatalog,
    pub spec: CovariateSpec,
    pub truth: Params,
    pub mask: ConstraintMask,
}

impl Design {
    pub fn true_model(&self, censor_rate: Option<f64>) -> TrueModel {
        TrueModel { params: self.truth.clone(), spec: self.spec.clone(), catalog: self.catalog.clone(), censor_rate }
    }

    /// Variant in which the terminating event is at risk only right after
    /// `Next`, as when it answers a confirmation dialog.
    pub fn with_terminal_gate(mut self) -> Self {
        let ok = self.catalog.lookup("Next_OK").expect("design type");
        let next = self.catalog.lookup("Next").expect("design type");
        self.spec.gates[ok] = Some(vec![next]);
        self
    }
}

pub const DESIGN_TYPES: [&str; 15] = [
    "W1", "W1_M", "W2", "W2_M", "W3", "W3_M", "Next", "Next_Cancel", "R_1", "R_2", "R_3", "R_Open", "R_Close", "Back",
    "Next_OK",
];

/// Rate of the exponential censoring time in the censored variant.
pub fn design_censor_rate() -> f64 {
    (-7.0f64).exp()
}

pub fn builtin_design() -> Design {
    let catalog = EventCatalog::new(DESIGN_TYPES, Some("Next_OK")).expect("static catalog");
    let t = |name: &str| catalog.lookup(name).expect("known type");
    let mut rules: Vec<CovariateRule> = (0..14).map(CovariateRule::LastEventIs).collect();
    for w in ["W1", "W2", "W3"] {
        rules.push(CovariateRule::LastTwoPattern { second_last: t(w), last: t("Back") });
    }
    let spec = CovariateSpec::shared(rules, catalog.len());
    // covariate index of a pattern rule
    let cov = |name: &str| -> usize {
        match name {
            "W1,Back" => 14,
            "W2,Back" => 15,
            "W3,Back" => 16,
            other => t(other),
        }
    };
    let dims = Dims::from_spec(&spec, 3);
    let mut p = Params::zeros(&dims);
    let beta0 = [-4.0, -5.0, -5.0, -5.0, -5.0, -4.0, -7.0, -4.0, -5.0, -5.0, -5.0, -6.0, -5.0, -7.0, -2.0];
    p.beta0.copy_from_slice(&beta0);
    let fixed: [(&str, &str, f64); 23] = [
        ("Back", "W1", 3.0),
        ("Back", "W1_M", 5.0),
        ("Back", "W2", 3.0),
        ("Back", "W2_M", 5.0),
        ("Back", "W3", 3.0),
        ("Back", "W3_M", 5.0),
        ("Back", "Back", 3.0),
        ("R_Open", "W3_M", 2.0),
        ("R_Open", "W3,Back", 2.0),
        ("W3_M", "Next_Cancel", 4.0),
        ("Next", "R_1", 5.0),
        ("Next", "R_2", 5.0),
        ("Next", "R_3", 5.0),
        ("W1", "Back", 1.0),
        ("W1", "W1,Back", -2.0),
        ("W1", "W2,Back", -1.0),
        ("W2", "Back", 1.0),
        ("W2", "W1,Back", 2.0),
        ("W2", "W2,Back", -2.0),
        ("W3", "Back", 1.0),
        ("W3", "W1,Back", -2.0),
        ("W3", "W2,Back", 2.0),
        ("W3", "W3,Back", -2.0),
    ];
    for (ty, c, v) in fixed {
        p.beta[t(ty)][cov(c)] = v;
    }
    let loadings: [(usize, &str, &str, f64); 13] = [
        (0, "W1_M", "W1", 2.0),
        (0, "W2_M", "W2", 2.0),
        (0, "W3_M", "W3", 2.0),
        (0, "R_3", "R_Open", 1.0),
        (1, "Back", "W1", 1.0),
        (1, "Back", "W1_M", 1.0),
        (1, "Back", "W2", 1.0),
        (1, "Back", "W2_M", 1.0),
        (1, "Back", "W3", 1.0),
        (1, "Back", "W3_M", 1.0),
        (2, "W2", "W1,Back", 1.0),
        (2, "W3", "W2,Back", 1.0),
        (2, "W1", "W3,Back", 1.0),
    ];
    for (k, ty, c, v) in loadings {
        p.loadings[t(ty)][(cov(c), k)] = v;
    }
    let off = [((1, 0), -0.3), ((2, 0), 0.3), ((2, 1), -0.3)];
    for ((r, c), v) in off {
        p.sigma[(r, c)] = v;
        p.sigma[(c, r)] = v;
    }
    let mut mask = ConstraintMask::penalized(&dims, AnchorMode::Sigma);
    mask.anchor(t("W1_M"), cov("W1"), 0);
    mask.anchor(t("Back"), cov("W1"), 1);
    mask.anchor(t("W2"), cov("W1,Back"), 2);
    Design { catalog, spec, truth: p, mask }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn design_counts() {
        let d = builtin_design();
        let nz_beta: usize = d.truth.beta.iter().map(|b| b.iter().filter(|v| **v != 0.0).count()).sum();
        let nz_a: usize = d.truth.loadings.iter().map(|a| a.iter().filter(|v| **v != 0.0).count()).sum();
        assert_eq!((nz_beta, nz_a), (23, 13));
        assert!(d.mask.validate(&d.truth.dims()).is_ok());
        assert!(d.true_model(None).validate().is_ok());
    }

    #[test]
    fn zero_rates_give_censored_empty_path() {
        let mut r = rng::stream(1, 0, 0);
        let lim = PathLimits { max_events: 10, horizon: 1e7, sampler: ClockSampler::Competing };
        let s = simulate_path("a", |_| vec![0.0, 0.0], Some(1), Some(5.0), lim, &mut r).unwrap();
        assert!(s.records.is_empty());
        assert_eq!(s.censor_time, 5.0);
    }

    #[test]
    fn guards_trip() {
        let mut r = rng::stream(1, 0, 0);
        let lim = PathLimits { max_events: 10, horizon: 1e7, sampler: ClockSampler::Competing };
        let e = simulate_path("a", |_| vec![1.0], None, None, lim, &mut r).unwrap_err();
        assert!(matches!(e, SimError::GuardTripped { guard: Guard::MaxEvents, .. }));
        let lim = PathLimits { max_events: 1000, horizon: 3.0, sampler: ClockSampler::TotalRate };
        let e = simulate_path("a", |_| vec![1.0], None, None, lim, &mut r).unwrap_err();
        assert!(matches!(e, SimError::GuardTripped { guard: Guard::Horizon, .. }));
    }

    #[test]
    fn n_zero_rejected() {
        assert!(SimConfig::new(0, 1).validate().is_err());
    }
}
