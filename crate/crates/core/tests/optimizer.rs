mod common;

use common::{arith_lm, arith_task};
use decotree::decoders::DecoderKind;
use decotree::lm::LanguageModel;
use decotree::optimizer::{
    evaluate_config, optimize, EvalOptions, Params, SearchSpace, Strategy, SubsetSpace, TaskSpec,
    TaskSuite,
};
use decotree::runner::{AggregationPolicy, TerminationPolicy};

fn suite(specs: &[TaskSpec]) -> TaskSuite {
    TaskSuite::new(specs, vec![], arith_lm().vocab()).unwrap()
}

fn five_tasks() -> Vec<TaskSpec> {
    vec![
        arith_task(3, 3, Some(1)),
        arith_task(2, 2, None),
        arith_task(4, 4, Some(3)),
        arith_task(5, 5, None),
        arith_task(6, 6, None),
    ]
}

fn space(kinds: Vec<DecoderKind>, k_max: usize) -> SearchSpace {
    SearchSpace {
        kinds,
        k_min: 1,
        k_max,
        j_range: None,
        subsets: SubsetSpace::Explicit(vec![
            vec!["syntax".into()],
            vec!["syntax".into(), "unit_tests".into()],
        ]),
        time_limit_ms: None,
        max_expansions: Some(400),
    }
}

fn opts() -> EvalOptions {
    EvalOptions {
        termination: TerminationPolicy {
            min_complete: 3,
            max_nodes: 2_000,
            max_seq_len: 8,
            ..Default::default()
        },
        aggregation: AggregationPolicy::default(),
        ..Default::default()
    }
}

fn params(decoder: DecoderKind, k: usize, names: &[&str]) -> Params {
    Params {
        decoder,
        k,
        j: None,
        constraints: names.iter().map(|s| s.to_string()).collect(),
    }
}

#[test]
fn satisfiable_task_scores_one() {
    let lm = arith_lm();
    let s = suite(&[arith_task(1, 1, None)]);
    let p = params(DecoderKind::BeamSearch, 5, &["syntax", "unit_tests"]);
    let t = evaluate_config(
        &lm,
        &p,
        &space(vec![DecoderKind::BeamSearch], 5),
        &s,
        0,
        1,
        &opts(),
    );
    assert_eq!(t.objective, 1.0);
    assert!(t.mean_expansions > 0.0);
    assert!(t.mean_time_ms.is_none());
}

#[test]
fn unsatisfiable_holdout_scores_zero() {
    let lm = arith_lm();
    let s = suite(&[arith_task(1, 999, Some(1))]);
    let p = params(DecoderKind::BeamSearch, 5, &["syntax", "unit_tests"]);
    let t = evaluate_config(
        &lm,
        &p,
        &space(vec![DecoderKind::BeamSearch], 5),
        &s,
        0,
        1,
        &opts(),
    );
    assert_eq!(t.objective, 0.0);
}

#[test]
fn evaluation_is_seeded() {
    let lm = arith_lm();
    let s = suite(&five_tasks());
    let sp = space(vec![DecoderKind::Sampling], 3);
    for kind in DecoderKind::ALL {
        let p = params(kind, 3, &["syntax"]);
        let a = evaluate_config(&lm, &p, &sp, &s, 0, 42, &opts());
        let b = evaluate_config(&lm, &p, &sp, &s, 0, 42, &opts());
        assert_eq!(a, b);
    }
}

#[test]
fn grid_visits_every_point_once() {
    let lm = arith_lm();
    let s = suite(&five_tasks());
    let sp = space(
        vec![DecoderKind::BeamSearch, DecoderKind::Smc, DecoderKind::Asap],
        2,
    );
    let out = optimize(&lm, &sp, &s, Strategy::Grid, 100, 7, 1, &opts()).unwrap();
    assert_eq!(out.history.len(), 12);
    let points = decotree::optimizer::distinct_points(&out.history);
    assert_eq!(points.len(), 12);
    assert!(out.history.iter().enumerate().all(|(i, t)| t.trial == i));
    assert!(out
        .history
        .iter()
        .all(|t| out.best.objective >= t.objective));

    let short = optimize(&lm, &sp, &s, Strategy::Grid, 5, 7, 1, &opts()).unwrap();
    assert_eq!(short.history.len(), 5);
    assert_eq!(short.history[..], out.history[..5]);
}

#[test]
fn single_iteration_returns_that_trial() {
    let lm = arith_lm();
    let s = suite(&five_tasks());
    let sp = space(vec![DecoderKind::Mcts], 3);
    let out = optimize(&lm, &sp, &s, Strategy::Random, 1, 3, 1, &opts()).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.best, out.history[0]);
}

#[test]
fn history_is_reproducible_and_thread_independent() {
    let lm = arith_lm();
    let s = suite(&five_tasks());
    let sp = space(DecoderKind::ALL.to_vec(), 3);
    let a = optimize(&lm, &sp, &s, Strategy::Random, 8, 11, 1, &opts()).unwrap();
    let b = optimize(&lm, &sp, &s, Strategy::Random, 8, 11, 4, &opts()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_inputs_are_rejected() {
    let lm = arith_lm();
    assert!(TaskSuite::new(&[], vec![], lm.vocab()).is_err());
    let mut bad = arith_task(1, 1, None);
    bad.prompt = "7".into();
    assert!(TaskSuite::new(&[bad], vec![], lm.vocab()).is_err());

    let s = suite(&five_tasks());
    let mut sp = space(vec![DecoderKind::BeamSearch], 1);
    sp.subsets = SubsetSpace::Explicit(vec![vec!["missing".into()]]);
    assert!(optimize(&lm, &sp, &s, Strategy::Grid, 1, 0, 1, &opts()).is_err());
    let sp = space(vec![], 1);
    assert!(optimize(&lm, &sp, &s, Strategy::Grid, 1, 0, 1, &opts()).is_err());
}
