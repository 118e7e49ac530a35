//! Event catalogs, per-subject event sequences and the event-log text format.
//!
//! An event log is UTF-8 text with one record per line, `subject,label,time`.
//! Lines starting with `#` are comments, except `#censor,subject,time` which
//! sets a subject's censoring time. A catalog file lists one label per line;
//! a trailing `!terminating` marks the absorbing event type.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EventError {
    #[error("unknown event label `{label}` on line {line}")]
    UnknownEventLabel { label: String, line: usize },
    #[error("event times of subject `{subject}` are not strictly increasing at record {index}")]
    NonIncreasingTimes { subject: String, index: usize },
    #[error("subject `{subject}` has an event after its censoring time")]
    EventAfterCensoring { subject: String },
    #[error("subject `{subject}` has a record after the terminating event")]
    TerminatingNotLast { subject: String },
    #[error("event log contains no records")]
    EmptyInput,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("catalog: {0}")]
    Catalog(String),
}

/// Ordered list of event-type labels, optionally with one absorbing type.
#[derive(Debug, Clone, PartialEq)]
pub struct EventCatalog {
    names: Vec<String>,
    index: HashMap<String, usize>,
    terminating: Option<usize>,
}

impl EventCatalog {
    pub fn new<S: Into<String>>(
        names: impl IntoIterator<Item = S>,
        terminating: Option<&str>,
    ) -> Result<Self, EventError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(EventError::Catalog("at least one event type is required".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (j, name) in names.iter().enumerate() {
            if name.is_empty() || name.contains(',') || name.contains(char::is_whitespace) {
                return Err(EventError::Catalog(format!("invalid label `{name}`")));
            }
            if index.insert(name.clone(), j).is_some() {
                return Err(EventError::Catalog(format!("duplicate label `{name}`")));
            }
        }
        let terminating = match terminating {
            Some(label) => Some(
                *index
                    .get(label)
                    .ok_or_else(|| EventError::Catalog(format!("unknown terminating label `{label}`")))?,
            ),
            None => None,
        };
        Ok(Self { names, index, terminating })
    }

    /// Parses the catalog file format.
    pub fn parse(text: &str) -> Result<Self, EventError> {
        let mut names = Vec::new();
        let mut terminating = None;
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let label = parts.next().unwrap_or_default().to_string();
            match parts.next() {
                None => {}
                Some("!terminating") => {
                    if terminating.is_some() {
                        return Err(EventError::Catalog("more than one terminating event".into()));
                    }
                    terminating = Some(label.clone());
                }
                Some(other) => {
                    return Err(EventError::Catalog(format!("unexpected token `{other}`")));
                }
            }
            names.push(label);
        }
        Self::new(names, terminating.as_deref())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (j, name) in self.names.iter().enumerate() {
            if Some(j) == self.terminating {
                let _ = writeln!(out, "{name} !terminating");
            } else {
                let _ = writeln!(out, "{name}");
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, j: usize) -> &str {
        &self.names[j]
    }

    pub fn lookup(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn terminating(&self) -> Option<usize> {
        self.terminating
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub event_type: usize,
    pub time: f64,
}

/// One subject's time-ordered events. `censor_time` is `f64::INFINITY` when
/// no censoring was recorded and the sequence does not terminate.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    pub subject_id: String,
    pub records: Vec<EventRecord>,
    pub censor_time: f64,
}

impl EventSequence {
    /// End of observation: the terminating event's time if it occurred,
    /// otherwise the censoring time.
    pub fn end_time(&self, catalog: &EventCatalog) -> f64 {
        match (self.records.last(), catalog.terminating()) {
            (Some(last), Some(term)) if last.event_type == term => last.time.min(self.censor_time),
            _ => self.censor_time,
        }
    }

    pub fn is_terminated(&self, catalog: &EventCatalog) -> bool {
        matches!(
            (self.records.last(), catalog.terminating()),
            (Some(last), Some(term)) if last.event_type == term
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub catalog: EventCatalog,
    pub sequences: Vec<EventSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_events(&self) -> usize {
        self.sequences.iter().map(|s| s.records.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    NonFiniteTime,
    NegativeTime,
    UnknownEventType,
    NonIncreasingTimes,
    EventAfterCensoring,
    TerminatingNotLast,
    NonPositiveCensorTime,
    DuplicateSubject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub subject: String,
    pub rule: Rule,
    /// Record index within the subject, when the rule concerns one record.
    pub location: Option<usize>,
}

/// Checks every type invariant of a dataset, returning all violations found.
pub fn validate_dataset(dataset: &Dataset) -> Vec<Violation> {
    let catalog = &dataset.catalog;
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for seq in &dataset.sequences {
        let push = |out: &mut Vec<Violation>, rule, location| {
            out.push(Violation { subject: seq.subject_id.clone(), rule, location })
        };
        if seen.insert(seq.subject_id.as_str(), ()).is_some() {
            push(&mut out, Rule::DuplicateSubject, None);
        }
        if !(seq.censor_time > 0.0) {
            push(&mut out, Rule::NonPositiveCensorTime, None);
        }
        for (k, rec) in seq.records.iter().enumerate() {
            if !rec.time.is_finite() {
                push(&mut out, Rule::NonFiniteTime, Some(k));
            } else if rec.time < 0.0 {
                push(&mut out, Rule::NegativeTime, Some(k));
            }
            if rec.event_type >= catalog.len() {
                push(&mut out, Rule::UnknownEventType, Some(k));
            }
            if k > 0 && !(seq.records[k - 1].time < rec.time) {
                push(&mut out, Rule::NonIncreasingTimes, Some(k));
            }
            if rec.time > seq.censor_time {
                push(&mut out, Rule::EventAfterCensoring, Some(k));
            }
            if Some(rec.event_type) == catalog.terminating() && k + 1 < seq.records.len() {
                push(&mut out, Rule::TerminatingNotLast, Some(k + 1));
            }
        }
    }
    out
}

fn parse_time(field: &str, line: usize) -> Result<f64, EventError> {
    let t: f64 = field.trim().parse().map_err(|_| EventError::Malformed {
        line,
        message: format!("invalid time `{}`", field.trim()),
    })?;
    if !t.is_finite() || t < 0.0 {
        return Err(EventError::Malformed { line, message: format!("time {t} must be finite and nonnegative") });
    }
    Ok(t)
}

/// Parses an event log against a catalog.
///
/// Records of one subject must already be in strictly increasing time order;
/// subjects may interleave and are kept in order of first appearance.
pub fn parse_event_log(text: &str, catalog: &EventCatalog) -> Result<Dataset, EventError> {
    let mut order: Vec<String> = Vec::new();
    let mut by_subject: HashMap<String, (Vec<EventRecord>, Option<f64>)> = HashMap::new();
    let mut any = false;

    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(directive) = line.strip_prefix('#') {
            let fields: Vec<&str> = directive.split(',').collect();
            if fields[0].trim() == "censor" {
                if fields.len() != 3 {
                    return Err(EventError::Malformed { line: line_no, message: "expected `#censor,subject,time`".into() });
                }
                let subject = fields[1].trim().to_string();
                let t = parse_time(fields[2], line_no)?;
                if !(t > 0.0) {
                    return Err(EventError::Malformed { line: line_no, message: "censoring time must be positive".into() });
                }
                let entry = by_subject.entry(subject.clone()).or_insert_with(|| {
                    order.push(subject.clone());
                    (Vec::new(), None)
                });
                entry.1 = Some(t);
                any = true;
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(EventError::Malformed { line: line_no, message: "expected `subject,label,time`".into() });
        }
        let subject = fields[0].trim().to_string();
        let label = fields[1].trim();
        let event_type = catalog
            .lookup(label)
            .ok_or_else(|| EventError::UnknownEventLabel { label: label.to_string(), line: line_no })?;
        let time = parse_time(fields[2], line_no)?;
        let entry = by_subject.entry(subject.clone()).or_insert_with(|| {
            order.push(subject.clone());
            (Vec::new(), None)
        });
        if let Some(prev) = entry.0.last() {
            if Some(prev.event_type) == catalog.terminating() {
                return Err(EventError::TerminatingNotLast { subject });
            }
            if !(prev.time < time) {
                return Err(EventError::NonIncreasingTimes { subject, index: entry.0.len() });
            }
        }
        entry.0.push(EventRecord { event_type, time });
        any = true;
    }
    if !any {
        return Err(EventError::EmptyInput);
    }

    let mut sequences = Vec::with_capacity(order.len());
    for subject in order {
        let (records, censor) = by_subject.remove(&subject).expect("subject recorded");
        let terminated = matches!(
            (records.last(), catalog.terminating()),
            (Some(last), Some(term)) if last.event_type == term
        );
        let censor_time = match censor {
            Some(c) => c,
            None if terminated => records.last().map(|r| r.time).unwrap_or(f64::INFINITY),
            None => f64::INFINITY,
        };
        if records.iter().any(|r| r.time > censor_time) {
            return Err(EventError::EventAfterCensoring { subject });
        }
        sequences.push(EventSequence { subject_id: subject, records, censor_time });
    }
    Ok(Dataset { catalog: catalog.clone(), sequences })
}

/// Writes a dataset in the event-log format. Times use the shortest
/// representation that parses back to the same `f64`.
pub fn write_event_log(dataset: &Dataset) -> String {
    let catalog = &dataset.catalog;
    let mut out = String::new();
    for seq in &dataset.sequences {
        for rec in &seq.records {
            let _ = writeln!(out, "{},{},{}", seq.subject_id, catalog.name(rec.event_type), rec.time);
        }
        let default = if seq.is_terminated(catalog) {
            seq.records.last().map(|r| r.time).unwrap_or(f64::INFINITY)
        } else {
            f64::INFINITY
        };
        if seq.censor_time.is_finite() && seq.censor_time != default {
            let _ = writeln!(out, "#censor,{},{}", seq.subject_id, seq.censor_time);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn piaac_catalog() -> EventCatalog {
        EventCatalog::new(
            ["W1", "W2", "W3", "W4", "W5", "Back", "R_Open", "R_Close", "R_2", "R_4", "Next", "Next_OK"],
            Some("Next_OK"),
        )
        .unwrap()
    }

    const EXAMPLE_ONE: &str = "s1,W1,14\ns1,Back,21\ns1,W2,33\ns1,Back,35\ns1,W3,37\ns1,Back,39\ns1,W4,41\n\
s1,Back,46\ns1,W5,47\ns1,Back,50\ns1,R_Open,53\ns1,R_2,59\ns1,Next,65\ns1,Next_OK,67\n";

    #[test]
    fn parses_logged_example_sequence() {
        let catalog = piaac_catalog();
        let data = parse_event_log(EXAMPLE_ONE, &catalog).unwrap();
        assert_eq!(data.sequences.len(), 1);
        let seq = &data.sequences[0];
        assert_eq!(seq.records.len(), 14);
        assert_eq!(seq.records.last().unwrap().event_type, catalog.lookup("Next_OK").unwrap());
        assert_eq!(seq.censor_time, 67.0);
        assert!(validate_dataset(&data).is_empty());
    }

    #[test]
    fn zero_event_subject_with_censoring() {
        let catalog = piaac_catalog();
        let data = parse_event_log("#censor,s9,10\n", &catalog).unwrap();
        assert!(data.sequences[0].records.is_empty());
        assert_eq!(data.sequences[0].censor_time, 10.0);
        assert!(validate_dataset(&data).is_empty());
    }

    #[test]
    fn rejects_tied_times() {
        let catalog = piaac_catalog();
        let err = parse_event_log("a,W1,5\na,Back,5\n", &catalog).unwrap_err();
        assert_eq!(err, EventError::NonIncreasingTimes { subject: "a".into(), index: 1 });
    }

    #[test]
    fn rejects_unknown_labels_and_empty_input() {
        let catalog = piaac_catalog();
        assert!(matches!(parse_event_log("a,W9,5\n", &catalog), Err(EventError::UnknownEventLabel { .. })));
        assert_eq!(parse_event_log("# nothing\n\n", &catalog), Err(EventError::EmptyInput));
    }

    #[test]
    fn rejects_events_after_censoring_and_termination() {
        let catalog = piaac_catalog();
        assert!(matches!(
            parse_event_log("a,W1,5\n#censor,a,4\n", &catalog),
            Err(EventError::EventAfterCensoring { .. })
        ));
        assert!(matches!(
            parse_event_log("a,Next_OK,5\na,W1,6\n", &catalog),
            Err(EventError::TerminatingNotLast { .. })
        ));
    }

    #[test]
    fn validation_reports_rule_violations() {
        let catalog = piaac_catalog();
        let next_ok = catalog.lookup("Next_OK").unwrap();
        let data = Dataset {
            catalog: catalog.clone(),
            sequences: vec![
                EventSequence {
                    subject_id: "a".into(),
                    records: vec![
                        EventRecord { event_type: next_ok, time: 1.0 },
                        EventRecord { event_type: 0, time: 2.0 },
                    ],
                    censor_time: 10.0,
                },
                EventSequence {
                    subject_id: "b".into(),
                    records: vec![EventRecord { event_type: 0, time: 12.0 }],
                    censor_time: 10.0,
                },
            ],
        };
        let rules: Vec<Rule> = validate_dataset(&data).into_iter().map(|v| v.rule).collect();
        assert_eq!(rules, vec![Rule::TerminatingNotLast, Rule::EventAfterCensoring]);
    }

    #[test]
    fn catalog_file_round_trip() {
        let catalog = piaac_catalog();
        let back = EventCatalog::parse(&catalog.to_text()).unwrap();
        assert_eq!(back, catalog);
        assert!(EventCatalog::parse("A\nA\n").is_err());
    }

    #[test]
    fn censor_directive_survives_round_trip() {
        let catalog = piaac_catalog();
        let text = "a,W1,0.5\na,Back,1.25\n#censor,a,3.5\n#censor,b,2\n";
        let data = parse_event_log(text, &catalog).unwrap();
        let again = parse_event_log(&write_event_log(&data), &catalog).unwrap();
        assert_eq!(again, data);
    }
}
