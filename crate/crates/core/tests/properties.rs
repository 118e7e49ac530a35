use std::collections::BTreeMap;

use cpfactor::covariates::{CovariateRule, CovariateSpec};
use cpfactor::evalsuite::{self, ReplicationRecord, Truth};
use cpfactor::events::{parse_event_log, validate_dataset, write_event_log, Dataset, EventCatalog, EventRecord, EventSequence};
use cpfactor::inference::{self, InferenceConfig};
use cpfactor::lik::QuadratureConfig;
use cpfactor::model::{scad_derivative, scad_penalty, soft_threshold, AnchorMode, ConstraintMask, Coord, Dims, SCAD_A};
use cpfactor::rng;
use cpfactor::select::{bic, SupportMask};
use cpfactor::simulator::{self, next_event, ClockSampler, SimConfig, TrueModel};
use cpfactor::stem::FitData;
use cpfactor::Params;
use proptest::prelude::*;

fn catalog() -> EventCatalog {
    EventCatalog::new(["A", "B", "C", "T"], Some("T")).unwrap()
}

fn sequence_strategy(id: usize) -> impl Strategy<Value = EventSequence> {
    (prop::collection::vec((0usize..3, 1e-3f64..5.0), 0..8), any::<bool>(), 1e-3f64..3.0).prop_map(
        move |(steps, terminate, tail)| {
            let mut t = 0.0;
            let mut records: Vec<EventRecord> = steps
                .into_iter()
                .map(|(j, gap)| {
                    t += gap;
                    EventRecord { event_type: j, time: t }
                })
                .collect();
            let censor_time = if terminate {
                t += tail;
                records.push(EventRecord { event_type: 3, time: t });
                t
            } else {
                t + tail
            };
            EventSequence { subject_id: format!("subj{id}"), records, censor_time }
        },
    )
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (1usize..6)
        .prop_flat_map(|n| (0..n).map(sequence_strategy).collect::<Vec<_>>())
        .prop_map(|sequences| Dataset { catalog: catalog(), sequences })
}

fn rule_strategy() -> impl Strategy<Value = CovariateRule> {
    prop_oneof![
        Just(CovariateRule::Constant),
        (0usize..4).prop_map(CovariateRule::LastEventIs),
        (0usize..4, 0usize..4).prop_map(|(a, b)| CovariateRule::LastTwoPattern { second_last: a, last: b }),
    ]
}

fn spec_strategy() -> impl Strategy<Value = CovariateSpec> {
    (
        prop::collection::vec(prop::collection::vec(rule_strategy(), 0..3), 4),
        prop::collection::vec(prop::collection::vec(rule_strategy(), 0..3), 4),
        prop::collection::vec(prop::option::of(prop::collection::btree_set(0usize..4, 1..3)), 4),
    )
        .prop_map(|(fixed, random, gates)| CovariateSpec {
            fixed,
            random,
            shared: false,
            gates: gates.into_iter().map(|g| g.map(|s| s.into_iter().collect())).collect(),
        })
}

fn finite() -> impl Strategy<Value = f64> {
    -50.0f64..50.0
}

/// Model with random effects on a constant covariate for two types and a
/// unit-sigma single factor anchored on type A.
fn toy_model(beta0: [f64; 2], loading: f64) -> (TrueModel, ConstraintMask) {
    let catalog = EventCatalog::new(["A", "B"], None).unwrap();
    let spec = CovariateSpec {
        fixed: vec![vec![CovariateRule::LastEventIs(0)], vec![CovariateRule::LastEventIs(1)]],
        random: vec![vec![CovariateRule::Constant], vec![CovariateRule::Constant]],
        shared: false,
        gates: vec![None, None],
    };
    let dims = Dims::from_spec(&spec, 1);
    let mut mask = ConstraintMask::penalized(&dims, AnchorMode::Sigma);
    mask.anchor(0, 0, 0);
    let mut p = Params::zeros(&dims);
    p.beta0 = beta0.to_vec();
    p.beta = vec![vec![0.3], vec![-0.2]];
    p.loadings[0][(0, 0)] = 0.5;
    p.loadings[1][(0, 0)] = loading;
    (TrueModel { params: p, spec, catalog, censor_rate: Some(0.5) }, mask)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, .. ProptestConfig::default() })]

    #[test]
    fn event_log_round_trips(data in dataset_strategy()) {
        prop_assert!(validate_dataset(&data).is_empty());
        let text = write_event_log(&data);
        let back = parse_event_log(&text, &data.catalog).unwrap();
        prop_assert_eq!(&back.sequences, &data.sequences);
        prop_assert_eq!(write_event_log(&back), text);
    }

    #[test]
    fn covariate_spec_round_trips(spec in spec_strategy()) {
        let cat = catalog();
        let back = CovariateSpec::parse(&spec.to_text(&cat), &cat).unwrap();
        prop_assert_eq!(&back.fixed, &spec.fixed);
        prop_assert_eq!(&back.random, &spec.random);
        prop_assert_eq!(&back.gates, &spec.gates);
    }

    #[test]
    fn params_round_trip(b0 in prop::collection::vec(finite(), 4), b in finite(), a in finite(), s in -0.9f64..0.9) {
        let cat = catalog();
        let dims = Dims { fixed: vec![1, 0, 2, 0], random: vec![1, 1, 0, 0], factors: 2 };
        let mut p = Params::zeros(&dims);
        p.beta0 = b0;
        p.beta[0][0] = b;
        p.beta[2][1] = -b;
        p.loadings[0][(0, 1)] = a;
        p.sigma[(0, 1)] = s;
        p.sigma[(1, 0)] = s;
        let back = Params::parse(&p.to_text(&cat), &cat).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn mask_round_trips(bits in prop::collection::vec(0u8..3, 3), mode_sigma in any::<bool>()) {
        let cat = catalog();
        let dims = Dims { fixed: vec![1, 1, 1, 0], random: vec![1, 1, 0, 0], factors: 1 };
        let mode = if mode_sigma { AnchorMode::Sigma } else { AnchorMode::Loadings };
        let mut mask = ConstraintMask::penalized(&dims, mode);
        mask.anchor(0, 0, 0);
        for (j, &kind) in bits.iter().enumerate() {
            mask.beta[j][0] = match kind {
                0 => cpfactor::model::BetaConstraint::FreePenalized,
                1 => cpfactor::model::BetaConstraint::FreeUnpenalized,
                _ => cpfactor::model::BetaConstraint::FixedZero,
            };
        }
        let back = ConstraintMask::parse(&mask.to_text(&cat), &cat).unwrap();
        prop_assert_eq!(back, mask);
    }

    #[test]
    fn replication_record_round_trips(
        sel in prop::collection::vec(any::<bool>(), 5),
        grid in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 0..4),
        est in prop::collection::vec((finite(), prop::option::of(0.0f64..3.0)), 3),
    ) {
        let dims = Dims { fixed: vec![2, 1], random: vec![1, 1], factors: 1 };
        let mask_of = |b: &[bool]| SupportMask {
            beta: vec![vec![b[0], b[1]], vec![b[2]]],
            loadings: vec![vec![vec![b[3]]], vec![vec![b[4]]]],
        };
        let coords = [Coord::Intercept(1), Coord::Beta(0, 1), Coord::Loading(1, 0, 0)];
        let record = ReplicationRecord {
            replicate: 7,
            grid_supports: grid.iter().map(|g| mask_of(g)).collect(),
            selected: mask_of(&sel),
            estimates: coords.iter().copied().zip(est).collect::<BTreeMap<_, _>>(),
        };
        let back = ReplicationRecord::parse(&record.to_text(), &dims).unwrap();
        prop_assert_eq!(back, record);
    }

    #[test]
    fn soft_threshold_minimizes_lasso_objective(x in -10.0f64..10.0, gamma in 0.0f64..5.0) {
        let z = soft_threshold(x, gamma);
        let obj = |v: f64| 0.5 * (v - x).powi(2) + gamma * v.abs();
        for d in [-1e-3, 1e-3, -0.5, 0.5] {
            prop_assert!(obj(z) <= obj(z + d) + 1e-12);
        }
        prop_assert!(z.abs() <= x.abs());
    }

    #[test]
    fn scad_derivative_is_bounded_and_nonincreasing(x in 0.0f64..20.0, dx in 0.0f64..5.0, gamma in 0.0f64..3.0) {
        let d1 = scad_derivative(x, gamma, SCAD_A).unwrap();
        let d2 = scad_derivative(x + dx, gamma, SCAD_A).unwrap();
        prop_assert!((0.0..=gamma).contains(&d1));
        prop_assert!(d2 <= d1);
        // The derivative is the slope of the penalty.
        if gamma > 0.0 && x > 1e-3 {
            let h = 1e-6;
            let fd = (scad_penalty(x + h, gamma, SCAD_A) - scad_penalty(x - h, gamma, SCAD_A)) / (2.0 * h);
            let kinks = [gamma, SCAD_A * gamma];
            if kinks.iter().all(|k| (x - k).abs() > 1e-4) {
                prop_assert!((fd - d1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn selection_metrics_are_bounded_and_order_free(
        picks in prop::collection::vec((prop::collection::vec(any::<bool>(), 4), prop::collection::vec(prop::collection::vec(any::<bool>(), 4), 0..3)), 1..6),
    ) {
        let dims = Dims { fixed: vec![2, 1], random: vec![1, 1], factors: 1 };
        let mut mask = ConstraintMask::penalized(&dims, AnchorMode::Sigma);
        mask.anchor(0, 0, 0);
        let mut truth_params = Params::zeros(&dims);
        truth_params.beta[0][0] = 1.0;
        truth_params.loadings[0][(0, 0)] = 1.0;
        truth_params.loadings[1][(0, 0)] = 0.5;
        let truth = Truth { params: truth_params, mask };
        let mask_of = |b: &[bool]| SupportMask {
            beta: vec![vec![b[0], b[1]], vec![b[2]]],
            loadings: vec![vec![vec![true]], vec![vec![b[3]]]],
        };
        let records: Vec<ReplicationRecord> = picks
            .iter()
            .enumerate()
            .map(|(i, (sel, grid))| ReplicationRecord {
                replicate: i,
                grid_supports: grid.iter().map(|g| mask_of(g)).collect(),
                selected: mask_of(sel),
                estimates: BTreeMap::new(),
            })
            .collect();
        let m = evalsuite::selection_metrics(&records, &truth).unwrap();
        for v in [m.c0, m.c1, m.tpr, m.fdr] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.c1 <= m.c0);
        let mut reversed = records.clone();
        reversed.reverse();
        let r = evalsuite::selection_metrics(&reversed, &truth).unwrap();
        prop_assert!((r.c0 - m.c0).abs() < 1e-15 && (r.c1 - m.c1).abs() < 1e-15);
        prop_assert!((r.tpr - m.tpr).abs() < 1e-15 && (r.fdr - m.fdr).abs() < 1e-15);
    }
}

#[test]
fn thetas_round_trip() {
    let (model, _) = toy_model([-0.5, -1.0], 0.4);
    let sim = simulator::simulate_dataset(&model, &SimConfig::new(25, 3)).unwrap();
    let back = simulator::parse_thetas(&simulator::thetas_to_text(&sim)).unwrap();
    assert_eq!(back.len(), 25);
    for ((id, th), (seq, orig)) in back.iter().zip(sim.dataset.sequences.iter().zip(&sim.thetas)) {
        assert_eq!(id, &seq.subject_id);
        assert_eq!(th, orig);
    }
}

#[test]
fn exponential_waits_are_memoryless() {
    let mut r = rng::stream(11, 99, 0);
    let rates = [0.7, 0.3];
    let n = 200_000;
    let waits: Vec<f64> = (0..n).map(|_| next_event(&rates, ClockSampler::Competing, &mut r).unwrap().0).collect();
    let (s, t) = (0.8, 0.5);
    let survived: Vec<f64> = waits.iter().copied().filter(|w| *w > s).collect();
    let conditional = survived.iter().filter(|w| **w > s + t).count() as f64 / survived.len() as f64;
    let marginal = waits.iter().filter(|w| **w > t).count() as f64 / n as f64;
    let p = (-t).exp();
    let se = (p * (1.0 - p) / survived.len() as f64).sqrt() + (p * (1.0 - p) / n as f64).sqrt();
    assert!((conditional - marginal).abs() <= 3.0 * se, "{conditional} vs {marginal}");
}

#[test]
fn poisson_intercept_standard_error() {
    // One type, no covariates, no factors: the intercept's information is
    // the event count, so its SE is 1/√N.
    let catalog = EventCatalog::new(["A"], None).unwrap();
    let spec = CovariateSpec { fixed: vec![vec![]], random: vec![vec![]], shared: false, gates: vec![None] };
    let dims = Dims::from_spec(&spec, 0);
    let mut p = Params::zeros(&dims);
    p.beta0[0] = 0.5;
    let model = TrueModel { params: p.clone(), spec: spec.clone(), catalog, censor_rate: Some(0.25) };
    let sim = simulator::simulate_dataset(&model, &SimConfig::new(3000, 17)).unwrap();
    let data = FitData::new(&sim.dataset, &spec, 0).unwrap();
    let events = sim.dataset.total_events() as f64;
    let exposure: f64 = sim.dataset.sequences.iter().map(|s| s.censor_time).sum();
    p.beta0[0] = (events / exposure).ln();
    let mask = ConstraintMask::penalized(&dims, AnchorMode::Sigma);
    let coords = inference::free_coordinates(&p, &mask, true);
    assert_eq!(coords, vec![Coord::Intercept(0)]);
    let info = inference::observed_info(&p, &data, &coords, &InferenceConfig::default()).unwrap();
    let se = inference::standard_errors(&info).unwrap()[0];
    let oracle = 1.0 / events.sqrt();
    assert!((se / oracle - 1.0).abs() < 0.1, "se {se} vs {oracle}");
}

#[test]
fn doubling_the_data_doubles_the_log_likelihood() {
    let (model, _) = toy_model([-0.3, -0.8], -0.6);
    let sim = simulator::simulate_dataset(&model, &SimConfig::new(60, 5)).unwrap();
    let mut doubled = sim.dataset.clone();
    doubled.sequences.extend(sim.dataset.sequences.iter().map(|s| EventSequence { subject_id: format!("{}b", s.subject_id), ..s.clone() }));
    let one = FitData::new(&sim.dataset, &model.spec, 1).unwrap();
    let two = FitData::new(&doubled, &model.spec, 1).unwrap();
    let quad = QuadratureConfig::default();
    let a = bic(&one, &model.params, &quad).unwrap();
    let b = bic(&two, &model.params, &quad).unwrap();
    assert!((b.loglik - 2.0 * a.loglik).abs() <= 1e-9 * a.loglik.abs(), "{} vs {}", b.loglik, a.loglik);
    assert_eq!(a.p, b.p);
    let penalty = |v: &cpfactor::select::BicValue, n: f64| v.bic + 2.0 * v.loglik - n.ln() * v.p as f64;
    assert!(penalty(&a, 60.0).abs() < 1e-6 && penalty(&b, 120.0).abs() < 1e-6);
}
