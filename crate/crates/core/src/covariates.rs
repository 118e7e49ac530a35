//! History-derived covariate processes.
//!
//! Every covariate is a left-continuous step function of the subject's own
//! event history: its value on `(t_k, t_{k+1}]` depends only on events at
//! times `<= t_k`. Paths are stored in merged (canonical) form so that the
//! union of their knots is the coarsest grid on which all intensities are
//! constant.

use std::fmt;

use thiserror::Error;

use crate::events::{EventCatalog, EventSequence};

/// Covariate values must stay within this bound.
pub const DEFAULT_VALUE_BOUND: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovariateError {
    #[error("rule refers to event type {index}, but the catalog has {types} types")]
    RuleIndexOutOfRange { index: usize, types: usize },
    #[error("time {time} is outside the path domain [0, {end}]")]
    OutOfDomain { time: f64, end: f64 },
    #[error("subject `{0}` has no finite end of observation (no terminating event and no censoring time)")]
    UnboundedObservation(String),
    #[error("covariate value {0} exceeds the configured bound")]
    ValueOutOfBounds(f64),
    #[error("covariate spec has {found} rule lists, expected one per event type ({expected})")]
    WrongTypeCount { found: usize, expected: usize },
    #[error("covariate spec line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovariateRule {
    /// 1 when the most recent event is of the given type.
    LastEventIs(usize),
    /// 1 when the two most recent events are `second_last` then `last`.
    LastTwoPattern { second_last: usize, last: usize },
    /// Always 1 while at risk.
    Constant,
}

impl CovariateRule {
    pub fn eval(&self, last: Option<usize>, second_last: Option<usize>) -> f64 {
        let fired = match *self {
            CovariateRule::LastEventIs(l) => last == Some(l),
            CovariateRule::LastTwoPattern { second_last: a, last: b } => last == Some(b) && second_last == Some(a),
            CovariateRule::Constant => true,
        };
        if fired {
            1.0
        } else {
            0.0
        }
    }

    fn check(&self, types: usize) -> Result<(), CovariateError> {
        let indices: &[usize] = match self {
            CovariateRule::LastEventIs(l) => std::slice::from_ref(l),
            CovariateRule::LastTwoPattern { second_last, last } => &[*second_last, *last],
            CovariateRule::Constant => &[],
        };
        match indices.iter().find(|&&i| i >= types) {
            Some(&index) => Err(CovariateError::RuleIndexOutOfRange { index, types }),
            None => Ok(()),
        }
    }

    /// Short descriptor used in files and coordinate names.
    pub fn describe(&self, catalog: &EventCatalog) -> String {
        let name = |i: usize| catalog.names().get(i).map(String::as_str).unwrap_or("?").to_string();
        match *self {
            CovariateRule::LastEventIs(l) => format!("last({})", name(l)),
            CovariateRule::LastTwoPattern { second_last, last } => {
                format!("lasttwo({},{})", name(second_last), name(last))
            }
            CovariateRule::Constant => "const".to_string(),
        }
    }

    fn parse(token: &str, catalog: &EventCatalog, line: usize) -> Result<Self, CovariateError> {
        let err = |message: String| CovariateError::Parse { line, message };
        let lookup = |label: &str| {
            catalog
                .lookup(label.trim())
                .ok_or_else(|| err(format!("unknown event label `{}`", label.trim())))
        };
        if token == "const" {
            return Ok(CovariateRule::Constant);
        }
        let inner = |prefix: &str| token.strip_prefix(prefix).and_then(|s| s.strip_suffix(')'));
        if let Some(arg) = inner("last(") {
            return Ok(CovariateRule::LastEventIs(lookup(arg)?));
        }
        if let Some(args) = inner("lasttwo(") {
            let (a, b) = args.split_once(',').ok_or_else(|| err(format!("malformed rule `{token}`")))?;
            return Ok(CovariateRule::LastTwoPattern { second_last: lookup(a)?, last: lookup(b)? });
        }
        Err(err(format!("unknown rule `{token}`")))
    }
}

/// Covariate construction for every event type: `fixed[j]` defines the
/// fixed-effect covariates and `random[j]` the random-effect covariates.
/// `gates[j]`, when set, restricts type `j` to be at risk only right after
/// an event of one of the listed types.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSpec {
    pub fixed: Vec<Vec<CovariateRule>>,
    pub random: Vec<Vec<CovariateRule>>,
    pub shared: bool,
    pub gates: Vec<Option<Vec<usize>>>,
}

impl CovariateSpec {
    /// One rule list used for both effect blocks of every event type.
    pub fn shared(rules: Vec<CovariateRule>, types: usize) -> Self {
        Self { fixed: vec![rules.clone(); types], random: vec![rules; types], shared: true, gates: vec![None; types] }
    }

    /// At-risk indicator of type `j` given the most recent event.
    pub fn gate_open(&self, j: usize, last: Option<usize>) -> bool {
        match self.gates.get(j).and_then(Option::as_ref) {
            None => true,
            Some(after) => last.is_some_and(|l| after.contains(&l)),
        }
    }

    pub fn types(&self) -> usize {
        self.fixed.len()
    }

    pub fn fixed_dim(&self, j: usize) -> usize {
        self.fixed[j].len()
    }

    pub fn random_dim(&self, j: usize) -> usize {
        self.random[j].len()
    }

    pub fn validate(&self, catalog: &EventCatalog) -> Result<(), CovariateError> {
        let types = catalog.len();
        for lists in [&self.fixed, &self.random] {
            if lists.len() != types {
                return Err(CovariateError::WrongTypeCount { found: lists.len(), expected: types });
            }
            for rule in lists.iter().flatten() {
                rule.check(types)?;
            }
        }
        if self.gates.len() != types {
            return Err(CovariateError::WrongTypeCount { found: self.gates.len(), expected: types });
        }
        for &index in self.gates.iter().flatten().flatten() {
            if index >= types {
                return Err(CovariateError::RuleIndexOutOfRange { index, types });
            }
        }
        Ok(())
    }

    /// Parses the covariate-spec file format:
    ///
    /// ```text
    /// shared last(W1) last(Back) lasttwo(W1,Back) const
    /// fixed W1 last(W2)
    /// random W1 last(W2)
    /// gate Next_OK Next
    /// ```
    ///
    /// `shared` replicates one list to every type and both blocks; `fixed` and
    /// `random` lines set one type's list. Types without a line get no rules.
    /// `gate J A B` makes type `J` at risk only right after `A` or `B`.
    pub fn parse(text: &str, catalog: &EventCatalog) -> Result<Self, CovariateError> {
        let types = catalog.len();
        let mut fixed: Vec<Option<Vec<CovariateRule>>> = vec![None; types];
        let mut random: Vec<Option<Vec<CovariateRule>>> = vec![None; types];
        let mut shared = None;
        let mut gates: Vec<Option<Vec<usize>>> = vec![None; types];
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let keyword = tokens.next().unwrap_or_default();
            let err = |message: String| CovariateError::Parse { line: line_no, message };
            match keyword {
                "shared" => {
                    let rules =
                        tokens.map(|t| CovariateRule::parse(t, catalog, line_no)).collect::<Result<Vec<_>, _>>()?;
                    shared = Some(rules);
                }
                "fixed" | "random" => {
                    let label = tokens.next().ok_or_else(|| err("missing event label".into()))?;
                    let j = catalog.lookup(label).ok_or_else(|| err(format!("unknown event label `{label}`")))?;
                    let rules =
                        tokens.map(|t| CovariateRule::parse(t, catalog, line_no)).collect::<Result<Vec<_>, _>>()?;
                    let slot = if keyword == "fixed" { &mut fixed[j] } else { &mut random[j] };
                    if slot.replace(rules).is_some() {
                        return Err(err(format!("duplicate {keyword} list for `{label}`")));
                    }
                }
                "gate" => {
                    let mut lookup = |label: &str| {
                        catalog.lookup(label).ok_or_else(|| err(format!("unknown event label `{label}`")))
                    };
                    let label = tokens.next().ok_or_else(|| err("missing event label".into()))?;
                    let j = lookup(label)?;
                    let after = tokens.map(&mut lookup).collect::<Result<Vec<_>, _>>()?;
                    if gates[j].replace(after).is_some() {
                        return Err(err(format!("duplicate gate for `{label}`")));
                    }
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        if let Some(rules) = shared {
            if fixed.iter().chain(random.iter()).any(Option::is_some) {
                return Err(CovariateError::Parse {
                    line: 0,
                    message: "`shared` cannot be combined with per-type lists".into(),
                });
            }
            return Ok(Self { gates, ..Self::shared(rules, types) });
        }
        let unwrap = |v: Vec<Option<Vec<CovariateRule>>>| v.into_iter().map(Option::unwrap_or_default).collect();
        Ok(Self { fixed: unwrap(fixed), random: unwrap(random), shared: false, gates })
    }

    pub fn to_text(&self, catalog: &EventCatalog) -> String {
        let join = |rules: &[CovariateRule]| {
            rules.iter().map(|r| r.describe(catalog)).collect::<Vec<_>>().join(" ")
        };
        let mut out = String::new();
        if self.shared {
            out.push_str(&format!("shared {}\n", join(&self.fixed[0])));
        } else {
            for (j, name) in catalog.names().iter().enumerate() {
                out.push_str(&format!("fixed {name} {}\n", join(&self.fixed[j])).replace("  ", " "));
                out.push_str(&format!("random {name} {}\n", join(&self.random[j])).replace("  ", " "));
            }
        }
        for (j, gate) in self.gates.iter().enumerate() {
            if let Some(after) = gate {
                let names: Vec<&str> = after.iter().map(|&a| catalog.name(a)).collect();
                out.push_str(&format!("gate {} {}\n", catalog.name(j), names.join(" ")));
            }
        }
        out
    }
}

/// A left-continuous step function on `[0, end]` with vector values.
///
/// `values[i]` is the value on `(knots[i], knots[i + 1]]`; `at_zero` is the
/// value at `t = 0`, which differs from `values[0]` only when an event
/// occurs at time zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstantPath {
    knots: Vec<f64>,
    values: Vec<Vec<f64>>,
    at_zero: Vec<f64>,
}

impl PiecewiseConstantPath {
    pub fn constant(value: Vec<f64>, end: f64) -> Self {
        Self::from_changes(value, &[], end)
    }

    /// Builds a canonical path from an initial value and a list of
    /// `(time, new value)` changes; each new value holds right after its
    /// time. Changes must be sorted; those at or beyond `end` are ignored.
    pub fn from_changes(initial: Vec<f64>, changes: &[(f64, Vec<f64>)], end: f64) -> Self {
        let mut knots = vec![0.0];
        let mut values: Vec<Vec<f64>> = Vec::new();
        let at_zero = initial.clone();
        let mut current = initial;
        let mut last_knot = 0.0;
        for (t, v) in changes {
            let t = *t;
            if t >= end {
                break;
            }
            if t > last_knot {
                if values.last() == Some(&current) {
                    *knots.last_mut().expect("non-empty") = t;
                } else {
                    knots.push(t);
                    values.push(current.clone());
                }
                last_knot = t;
            }
            current = v.clone();
        }
        if end > last_knot {
            if values.last() == Some(&current) {
                *knots.last_mut().expect("non-empty") = end;
            } else {
                knots.push(end);
                values.push(current);
            }
        }
        Self { knots, values, at_zero }
    }

    pub fn end(&self) -> f64 {
        *self.knots.last().expect("non-empty")
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn value_at_zero(&self) -> &[f64] {
        &self.at_zero
    }

    pub fn dim(&self) -> usize {
        self.at_zero.len()
    }

    /// Value at `t`, taken from the interval `(k_i, k_{i+1}]` containing it.
    pub fn value(&self, t: f64) -> Result<&[f64], CovariateError> {
        let end = self.end();
        if !(0.0..=end).contains(&t) {
            return Err(CovariateError::OutOfDomain { time: t, end });
        }
        if t == 0.0 {
            return Ok(&self.at_zero);
        }
        let upper = self.knots.partition_point(|&k| k < t);
        Ok(&self.values[upper - 1])
    }

    fn max_abs(&self) -> f64 {
        self.values.iter().chain(std::iter::once(&self.at_zero)).flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Evaluates `path` at `t`.
pub fn path_value(path: &PiecewiseConstantPath, t: f64) -> Result<&[f64], CovariateError> {
    path.value(t)
}

/// Covariate and at-risk paths of one subject, one entry per event type.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPanel {
    pub subject_id: String,
    pub end: f64,
    pub x: Vec<PiecewiseConstantPath>,
    pub z: Vec<PiecewiseConstantPath>,
    pub at_risk: Vec<PiecewiseConstantPath>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariatePanel {
    pub subjects: Vec<SubjectPanel>,
}

impl CovariatePanel {
    pub fn build(
        sequences: &[EventSequence],
        spec: &CovariateSpec,
        catalog: &EventCatalog,
    ) -> Result<Self, CovariateError> {
        let subjects = sequences.iter().map(|s| build_panel(s, spec, catalog)).collect::<Result<_, _>>()?;
        Ok(Self { subjects })
    }
}

fn rule_path(
    rules: &[CovariateRule],
    seq: &EventSequence,
    term_time: Option<f64>,
    end: f64,
) -> PiecewiseConstantPath {
    let initial: Vec<f64> = rules.iter().map(|r| r.eval(None, None)).collect();
    let mut changes = Vec::with_capacity(seq.records.len());
    for (k, rec) in seq.records.iter().enumerate() {
        let value = if term_time.is_some_and(|tt| rec.time >= tt) {
            vec![0.0; rules.len()]
        } else {
            let second = if k > 0 { Some(seq.records[k - 1].event_type) } else { None };
            rules.iter().map(|r| r.eval(Some(rec.event_type), second)).collect()
        };
        changes.push((rec.time, value));
    }
    PiecewiseConstantPath::from_changes(initial, &changes, end)
}

/// Compiles one subject's event history into covariate and at-risk paths on
/// `[0, censor_time]`. Subjects are at risk for every type until the
/// terminating event; all paths are zero afterwards.
pub fn build_panel(
    sequence: &EventSequence,
    spec: &CovariateSpec,
    catalog: &EventCatalog,
) -> Result<SubjectPanel, CovariateError> {
    spec.validate(catalog)?;
    let end = sequence.censor_time;
    if !end.is_finite() {
        return Err(CovariateError::UnboundedObservation(sequence.subject_id.clone()));
    }
    let term_time = if sequence.is_terminated(catalog) { sequence.records.last().map(|r| r.time) } else { None };

    let at_risk_path = match term_time {
        Some(tt) => PiecewiseConstantPath::from_changes(vec![1.0], &[(tt, vec![0.0])], end),
        None => PiecewiseConstantPath::constant(vec![1.0], end),
    };

    let mut cache: Vec<(Vec<CovariateRule>, PiecewiseConstantPath)> = Vec::new();
    let mut path_for = |rules: &[CovariateRule]| -> PiecewiseConstantPath {
        if let Some((_, p)) = cache.iter().find(|(r, _)| r.as_slice() == rules) {
            return p.clone();
        }
        let p = rule_path(rules, sequence, term_time, end);
        cache.push((rules.to_vec(), p.clone()));
        p
    };
    let x: Vec<_> = spec.fixed.iter().map(|r| path_for(r)).collect();
    let z: Vec<_> = spec.random.iter().map(|r| path_for(r)).collect();
    for p in x.iter().chain(z.iter()) {
        let m = p.max_abs();
        if m > DEFAULT_VALUE_BOUND {
            return Err(CovariateError::ValueOutOfBounds(m));
        }
    }
    let at_risk = (0..catalog.len())
        .map(|j| match &spec.gates[j] {
            None => at_risk_path.clone(),
            Some(_) => {
                let changes: Vec<(f64, Vec<f64>)> = sequence
                    .records
                    .iter()
                    .map(|r| {
                        let open = term_time.is_none_or(|tt| r.time < tt) && spec.gate_open(j, Some(r.event_type));
                        (r.time, vec![if open { 1.0 } else { 0.0 }])
                    })
                    .collect();
                let initial = if spec.gate_open(j, None) { 1.0 } else { 0.0 };
                PiecewiseConstantPath::from_changes(vec![initial], &changes, end)
            }
        })
        .collect();
    Ok(SubjectPanel { subject_id: sequence.subject_id.clone(), end, x, z, at_risk })
}

/// The common grid `0 = s_0 < ... < s_M = end` on which every path of the
/// subject is constant over each `(s_m, s_{m+1}]`.
pub fn refine_breakpoints(panel: &SubjectPanel) -> Vec<f64> {
    let mut grid: Vec<f64> = panel
        .x
        .iter()
        .chain(panel.z.iter())
        .chain(panel.at_risk.iter())
        .flat_map(|p| p.knots().iter().copied())
        .collect();
    grid.push(0.0);
    grid.push(panel.end);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

impl fmt::Display for CovariateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovariateRule::LastEventIs(l) => write!(f, "last({l})"),
            CovariateRule::LastTwoPattern { second_last, last } => write!(f, "lasttwo({second_last},{last})"),
            CovariateRule::Constant => write!(f, "const"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{parse_event_log, EventCatalog};

    fn sim_catalog() -> EventCatalog {
        EventCatalog::new(
            [
                "W1", "W1_M", "W2", "W2_M", "W3", "W3_M", "Next", "Next_Cancel", "R_1", "R_2", "R_3", "R_Open",
                "R_Close", "Back", "Next_OK",
            ],
            Some("Next_OK"),
        )
        .unwrap()
    }

    fn example_sequence(catalog: &EventCatalog) -> EventSequence {
        let text = "s,W2,15\ns,Back,25\ns,W1,28\ns,W1_M,34\ns,Back,36\ns,Back,38\ns,W3,42\ns,R_Open,45\n\
s,R_3,50\ns,Next,52\ns,Next_OK,53\n";
        parse_event_log(text, catalog).unwrap().sequences.remove(0)
    }

    #[test]
    fn last_event_indicator_matches_worked_example() {
        let catalog = sim_catalog();
        let w2 = catalog.lookup("W2").unwrap();
        let back = catalog.lookup("Back").unwrap();
        let rules = vec![
            CovariateRule::LastEventIs(w2),
            CovariateRule::LastEventIs(back),
            CovariateRule::LastTwoPattern { second_last: w2, last: back },
        ];
        let spec = CovariateSpec::shared(rules, catalog.len());
        let panel = build_panel(&example_sequence(&catalog), &spec, &catalog).unwrap();
        let x = &panel.x[0];
        let on = |t: f64, l: usize| x.value(t).unwrap()[l] == 1.0;
        // W2 on (15, 25]
        assert!(!on(15.0, 0) && on(15.5, 0) && on(25.0, 0) && !on(25.1, 0));
        // Back on (25, 28] and (36, 42]
        assert!(on(26.0, 1) && on(28.0, 1) && !on(30.0, 1) && !on(36.0, 1) && on(37.0, 1) && on(42.0, 1));
        assert!(!on(42.5, 1));
        // (W2, Back) on (25, 28] only
        assert!(!on(25.0, 2) && on(25.5, 2) && on(28.0, 2) && !on(28.5, 2) && !on(40.0, 2));
        assert_eq!(panel.end, 53.0);
        assert_eq!(panel.at_risk[0].value(53.0).unwrap(), &[1.0]);
    }

    #[test]
    fn empty_history_gives_zero_indicators() {
        let catalog = sim_catalog();
        let seq = EventSequence { subject_id: "e".into(), records: vec![], censor_time: 10.0 };
        let spec = CovariateSpec::shared(vec![CovariateRule::LastEventIs(0), CovariateRule::LastEventIs(13)], 15);
        let panel = build_panel(&seq, &spec, &catalog).unwrap();
        for p in &panel.x {
            assert_eq!(p.knots(), &[0.0, 10.0]);
            assert_eq!(p.values(), &[vec![0.0, 0.0]]);
        }
        assert_eq!(refine_breakpoints(&panel), vec![0.0, 10.0]);
    }

    #[test]
    fn path_value_is_left_continuous() {
        let p = PiecewiseConstantPath::from_changes(vec![0.0], &[(15.0, vec![1.0])], 25.0);
        assert_eq!(p.value(15.0).unwrap(), &[0.0]);
        assert_eq!(p.value(15.0001).unwrap(), &[1.0]);
        assert_eq!(p.value(25.0).unwrap(), &[1.0]);
        assert_eq!(p.value(0.0).unwrap(), &[0.0]);
        assert!(matches!(p.value(25.5), Err(CovariateError::OutOfDomain { .. })));
        assert!(matches!(p.value(-1.0), Err(CovariateError::OutOfDomain { .. })));
    }

    #[test]
    fn redundant_changes_are_merged() {
        let p = PiecewiseConstantPath::from_changes(
            vec![0.0],
            &[(5.0, vec![0.0]), (10.0, vec![1.0]), (12.0, vec![1.0])],
            20.0,
        );
        assert_eq!(p.knots(), &[0.0, 10.0, 20.0]);
        assert_eq!(p.values(), &[vec![0.0], vec![1.0]]);
    }

    #[test]
    fn event_at_time_zero_only_changes_the_open_interval() {
        let p = PiecewiseConstantPath::from_changes(vec![0.0], &[(0.0, vec![1.0])], 4.0);
        assert_eq!(p.value(0.0).unwrap(), &[0.0]);
        assert_eq!(p.value(1e-9).unwrap(), &[1.0]);
        assert_eq!(p.knots(), &[0.0, 4.0]);
    }

    #[test]
    fn grid_is_union_of_breakpoints() {
        let a = PiecewiseConstantPath::from_changes(vec![0.0], &[(15.0, vec![1.0]), (25.0, vec![0.0])], 53.0);
        let b = PiecewiseConstantPath::from_changes(vec![0.0], &[(25.0, vec![1.0]), (28.0, vec![0.0])], 53.0);
        let panel = SubjectPanel {
            subject_id: "g".into(),
            end: 53.0,
            x: vec![a],
            z: vec![b],
            at_risk: vec![PiecewiseConstantPath::constant(vec![1.0], 53.0)],
        };
        assert_eq!(refine_breakpoints(&panel), vec![0.0, 15.0, 25.0, 28.0, 53.0]);
    }

    #[test]
    fn after_termination_paths_vanish() {
        let catalog = sim_catalog();
        let mut seq = example_sequence(&catalog);
        seq.censor_time = 60.0;
        let spec = CovariateSpec::shared(vec![CovariateRule::Constant, CovariateRule::LastEventIs(14)], 15);
        let panel = build_panel(&seq, &spec, &catalog).unwrap();
        assert_eq!(panel.x[3].value(53.0).unwrap(), &[1.0, 0.0]);
        assert_eq!(panel.x[3].value(55.0).unwrap(), &[0.0, 0.0]);
        assert_eq!(panel.at_risk[3].value(53.0).unwrap(), &[1.0]);
        assert_eq!(panel.at_risk[3].value(53.5).unwrap(), &[0.0]);
    }

    #[test]
    fn spec_file_round_trip_and_errors() {
        let catalog = sim_catalog();
        let text = "# design\nshared last(W1) lasttwo(W1,Back) const\n";
        let spec = CovariateSpec::parse(text, &catalog).unwrap();
        assert!(spec.shared);
        assert_eq!(spec.fixed_dim(4), 3);
        assert_eq!(CovariateSpec::parse(&spec.to_text(&catalog), &catalog).unwrap(), spec);

        let per_type = CovariateSpec::parse("fixed W1 last(W2)\nrandom Back const\n", &catalog).unwrap();
        assert_eq!(per_type.fixed_dim(0), 1);
        assert_eq!(per_type.random_dim(13), 1);
        assert_eq!(per_type.random_dim(0), 0);
        assert_eq!(CovariateSpec::parse(&per_type.to_text(&catalog), &catalog).unwrap(), per_type);

        assert!(CovariateSpec::parse("shared last(Nope)\n", &catalog).is_err());
        let bad = CovariateSpec::shared(vec![CovariateRule::LastEventIs(99)], 15);
        assert!(matches!(bad.validate(&catalog), Err(CovariateError::RuleIndexOutOfRange { .. })));
    }

    #[test]
    fn unbounded_sequences_are_rejected() {
        let catalog = sim_catalog();
        let seq = EventSequence {
            subject_id: "u".into(),
            records: vec![crate::events::EventRecord { event_type: 0, time: 1.0 }],
            censor_time: f64::INFINITY,
        };
        let spec = CovariateSpec::shared(vec![], 15);
        assert!(matches!(build_panel(&seq, &spec, &catalog), Err(CovariateError::UnboundedObservation(_))));
    }
}
