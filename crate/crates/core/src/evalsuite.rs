//! Selection and estimation quality over simulation replicates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::covariates::CovariateSpec;
use crate::events::EventCatalog;
use crate::model::{BetaConstraint, ConstraintMask, Coord, Dims};
use crate::select::SupportMask;
use crate::Params;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least {needed} replicates, have {have}")]
    InsufficientReplicates { needed: usize, have: usize },
    #[error("no replicates")]
    Empty,
    #[error("record line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One simulated-and-fitted replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub replicate: usize,
    /// Support of the penalized fit at every grid point.
    pub grid_supports: Vec<SupportMask>,
    pub selected: SupportMask,
    /// Estimates and standard errors of the selected model by coordinate.
    pub estimates: BTreeMap<Coord, (f64, Option<f64>)>,
}

/// True parameters with the mask that says which coordinates are selectable.
#[derive(Debug, Clone)]
pub struct Truth {
    pub params: Params,
    pub mask: ConstraintMask,
}

impl Truth {
    pub fn support(&self) -> SupportMask {
        SupportMask::of(&self.params, &self.mask)
    }

    /// Coordinates of the estimation table: intercepts, nonzero fixed
    /// effects, nonzero free loadings, then the reported covariance entries.
    pub fn reported_coords(&self) -> Vec<Coord> {
        let dims = self.params.dims();
        let with_diag = self.mask.mode == crate::model::AnchorMode::Loadings;
        Coord::all(&dims, with_diag)
            .into_iter()
            .filter(|c| match *c {
                Coord::Beta(j, l) => self.params.beta[j][l] != 0.0,
                Coord::Loading(j, l, k) => {
                    self.params.loadings[j][(l, k)] != 0.0 && !self.mask.loadings[j][l][k].is_fixed()
                }
                _ => true,
            })
            .collect()
    }
}

/// Pairs `(estimated, true)` over the selectable coordinates: fixed effects
/// not held at zero and loadings that are not fixed.
fn selectable(est: &SupportMask, truth: &SupportMask, mask: &ConstraintMask) -> Result<Vec<(bool, bool)>, EvalError> {
    let dims_ok = est.beta.len() == truth.beta.len()
        && est.beta.iter().zip(&truth.beta).all(|(a, b)| a.len() == b.len())
        && est.loadings.len() == truth.loadings.len()
        && est
            .loadings
            .iter()
            .zip(&truth.loadings)
            .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len()));
    if !dims_ok || mask.beta.len() != truth.beta.len() {
        return Err(EvalError::ShapeMismatch("support dimensions differ from truth".into()));
    }
    let mut out = Vec::new();
    for j in 0..truth.beta.len() {
        for l in 0..truth.beta[j].len() {
            if mask.beta[j][l] != BetaConstraint::FixedZero {
                out.push((est.beta[j][l], truth.beta[j][l]));
            }
        }
        for l in 0..truth.loadings[j].len() {
            for k in 0..truth.loadings[j][l].len() {
                if !mask.loadings[j][l][k].is_fixed() {
                    out.push((est.loadings[j][l][k], truth.loadings[j][l][k]));
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionMetrics {
    pub c0: f64,
    pub c1: f64,
    pub tpr: f64,
    pub fdr: f64,
    pub replicates: usize,
}

fn rates(pairs: &[(bool, bool)]) -> (f64, f64) {
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    let tp = pairs.iter().filter(|p| p.0 && p.1).count();
    let fp = pairs.iter().filter(|p| p.0 && !p.1).count();
    let tpr = if pos == 0 { 1.0 } else { tp as f64 / pos as f64 };
    let fdr = if neg == 0 { 0.0 } else { fp as f64 / neg as f64 };
    (tpr, fdr)
}

/// C0, C1, TPR and FDR averaged over replicates. The FDR denominator is the
/// number of true zeros.
pub fn selection_metrics(records: &[ReplicationRecord], truth: &Truth) -> Result<SelectionMetrics, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let ts = truth.support();
    let (mut c0, mut c1, mut tpr, mut fdr) = (0.0, 0.0, 0.0, 0.0);
    for r in records {
        let sel = selectable(&r.selected, &ts, &truth.mask)?;
        let exact = |pairs: &[(bool, bool)]| pairs.iter().all(|(a, b)| a == b);
        let hit_sel = exact(&sel);
        let mut hit_any = hit_sel;
        for g in &r.grid_supports {
            if exact(&selectable(g, &ts, &truth.mask)?) {
                hit_any = true;
            }
        }
        c0 += f64::from(u8::from(hit_any));
        c1 += f64::from(u8::from(hit_sel));
        let (t, f) = rates(&sel);
        tpr += t;
        fdr += f;
    }
    let n = records.len() as f64;
    Ok(SelectionMetrics { c0: c0 / n, c1: c1 / n, tpr: tpr / n, fdr: fdr / n, replicates: records.len() })
}

/// Whether the selected support equals the truth on every selectable entry.
pub fn matches_truth(record: &ReplicationRecord, truth: &Truth) -> Result<bool, EvalError> {
    Ok(selectable(&record.selected, &truth.support(), &truth.mask)?.iter().all(|(a, b)| a == b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordMetrics {
    pub truth: f64,
    pub bias: f64,
    pub mean_se: f64,
    pub sd: f64,
    pub coverage: f64,
    pub used: usize,
}

/// Normal 97.5% quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Bias, mean SE, SD and 95% coverage for one coordinate from
/// `(estimate, se)` pairs.
pub fn coord_metrics(truth: f64, values: &[(f64, f64)]) -> Result<CoordMetrics, EvalError> {
    let n = values.len();
    if n < 2 {
        return Err(EvalError::InsufficientReplicates { needed: 2, have: n });
    }
    let nf = n as f64;
    let mean = values.iter().map(|v| v.0).sum::<f64>() / nf;
    let mean_se = values.iter().map(|v| v.1).sum::<f64>() / nf;
    let var = values.iter().map(|v| (v.0 - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let covered = values.iter().filter(|(e, s)| (e - truth).abs() <= Z95 * s).count();
    Ok(CoordMetrics { truth, bias: mean - truth, mean_se, sd: var.sqrt(), coverage: covered as f64 / nf, used: n })
}

/// Per-coordinate metrics over the replicates whose selected support
/// matches the truth and that carry a standard error for the coordinate.
pub fn estimation_metrics(
    records: &[ReplicationRecord],
    truth: &Truth,
) -> Result<Vec<(Coord, Result<CoordMetrics, EvalError>)>, EvalError> {
    let mut matching = Vec::new();
    for r in records {
        if matches_truth(r, truth)? {
            matching.push(r);
        }
    }
    Ok(truth
        .reported_coords()
        .into_iter()
        .map(|c| {
            let vals: Vec<(f64, f64)> = matching
                .iter()
                .filter_map(|r| match r.estimates.get(&c) {
                    Some(&(e, Some(s))) if s.is_finite() => Some((e, s)),
                    _ => None,
                })
                .collect();
            (c, coord_metrics(c.value(&truth.params), &vals))
        })
        .collect())
}

pub fn selection_report(rows: &[(String, SelectionMetrics)]) -> String {
    let mut out = String::from("setting,replicates,C0,C1,TPR,FDR\n");
    for (name, m) in rows {
        let _ = writeln!(out, "{name},{},{:.4},{:.4},{:.4},{:.6}", m.replicates, m.c0, m.c1, m.tpr, m.fdr);
    }
    out
}

pub fn estimation_report(
    metrics: &[(Coord, Result<CoordMetrics, EvalError>)],
    catalog: &EventCatalog,
    spec: &CovariateSpec,
) -> String {
    let mut out = String::from("param,coordinate,true,bias,se,sd,cp,used\n");
    for (i, (c, m)) in metrics.iter().enumerate() {
        let name = c.name(catalog, spec).replace(',', ";");
        match m {
            Ok(m) => {
                let _ = writeln!(
                    out,
                    "{},{name},{},{:.6},{:.6},{:.6},{:.4},{}",
                    i + 1,
                    m.truth,
                    m.bias,
                    m.mean_se,
                    m.sd,
                    m.coverage,
                    m.used
                );
            }
            Err(_) => {
                let _ = writeln!(out, "{},{name},NA,NA,NA,NA,NA,0", i + 1);
            }
        }
    }
    out
}

/// Compact coordinate key used in record files.
pub fn coord_key(c: &Coord) -> String {
    match *c {
        Coord::Intercept(j) => format!("I:{j}"),
        Coord::Beta(j, l) => format!("B:{j}:{l}"),
        Coord::Loading(j, l, k) => format!("L:{j}:{l}:{k}"),
        Coord::Sigma(r, c) => format!("S:{r}:{c}"),
    }
}

pub fn parse_coord_key(s: &str) -> Option<Coord> {
    let mut it = s.split(':');
    let tag = it.next()?;
    let nums: Vec<usize> = it.map(|v| v.parse().ok()).collect::<Option<_>>()?;
    match (tag, nums.as_slice()) {
        ("I", [j]) => Some(Coord::Intercept(*j)),
        ("B", [j, l]) => Some(Coord::Beta(*j, *l)),
        ("L", [j, l, k]) => Some(Coord::Loading(*j, *l, *k)),
        ("S", [r, c]) => Some(Coord::Sigma(*r, *c)),
        _ => None,
    }
}

impl ReplicationRecord {
    /// Line format: `replicate,ID`, `selected,BITS`, `grid,BITS` (repeated),
    /// `estimate,KEY,VALUE,SE|NA` (repeated).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "replicate,{}", self.replicate);
        let _ = writeln!(out, "selected,{}", self.selected.to_bits());
        for g in &self.grid_supports {
            let _ = writeln!(out, "grid,{}", g.to_bits());
        }
        for (c, (e, s)) in &self.estimates {
            let se = s.map_or_else(|| "NA".to_string(), |v| v.to_string());
            let _ = writeln!(out, "estimate,{},{e},{se}", coord_key(c));
        }
        out
    }

    pub fn parse(text: &str, dims: &Dims) -> Result<Self, EvalError> {
        let mut replicate = None;
        let mut selected = None;
        let mut grid_supports = Vec::new();
        let mut estimates = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |m: &str| EvalError::Parse { line, message: m.to_string() };
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            let f: Vec<&str> = raw.split(',').collect();
            let bits = |s: &str| SupportMask::from_bits(s, dims).ok_or_else(|| err("support does not fit dimensions"));
            match (f[0], f.len()) {
                ("replicate", 2) => replicate = Some(f[1].parse().map_err(|_| err("bad replicate id"))?),
                ("selected", 2) => selected = Some(bits(f[1])?),
                ("grid", 2) => grid_supports.push(bits(f[1])?),
                ("estimate", 4) => {
                    let c = parse_coord_key(f[1]).ok_or_else(|| err("bad coordinate key"))?;
                    let e: f64 = f[2].parse().map_err(|_| err("bad estimate"))?;
                    let s = if f[3] == "NA" { None } else { Some(f[3].parse().map_err(|_| err("bad se"))?) };
                    estimates.insert(c, (e, s));
                }
                _ => return Err(err("unrecognized line")),
            }
        }
        Ok(Self {
            replicate: replicate.ok_or(EvalError::Parse { line: 0, message: "missing replicate".into() })?,
            grid_supports,
            selected: selected.ok_or(EvalError::Parse { line: 0, message: "missing selected support".into() })?,
            estimates,
        })
    }
}
