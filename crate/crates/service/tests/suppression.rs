use eqtreat_core::data::{Dataset, GroupAssignment, ScoredExample};
use eqtreat_service::evaluate::{BinningRequest, MetricKind};
use eqtreat_service::{evaluate, DemographicStore, EvaluationRequest};
use eqtreat_core::data::BinKind;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use serde_json::Value;

/// Every number released at the higher threshold is released, unchanged, at
/// the lower one.
fn released_subset(high: &Value, low: &Value) -> bool {
    match (high, low) {
        (Value::Number(a), Value::Number(b)) => a == b,
        (Value::Number(_), _) => false,
        (Value::Object(a), Value::Object(b)) => a
            .iter()
            .filter(|(k, _)| k.as_str() != "suppression_threshold" && k.as_str() != "suppressed_cells")
            .all(|(k, v)| b.get(k).is_some_and(|w| released_subset(v, w)) || v.is_null()),
        (Value::Array(a), Value::Array(b)) => a.len() == b.len() && a.iter().zip(b).all(|(v, w)| released_subset(v, w)),
        _ => true,
    }
}

#[test]
fn lowering_the_threshold_never_hides_a_cell() {
    let row = (0.0..=1.0f64, any::<bool>(), 0u8..3);
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 96,
            ..Config::default()
        },
        TestRng::from_seed(RngAlgorithm::ChaCha, &[21; 32]),
    );
    runner
        .run(&(prop::collection::vec(row, 20..400), 0usize..60, 0usize..60), |(rows, t1, t2)| {
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let examples = rows
                .iter()
                .enumerate()
                .map(|(i, r)| ScoredExample::new(format!("m{i}"), r.0, Some(r.1)))
                .collect();
            let d = Dataset::new(examples, "p").unwrap();
            let g = GroupAssignment::from_pairs(
                "g",
                rows.iter().enumerate().map(|(i, r)| (format!("m{i}"), ["A", "B", "C"][r.2 as usize])),
            );
            for metric in [MetricKind::ParityGap, MetricKind::CalibrationCurve, MetricKind::GroupDistribution, MetricKind::QosReport] {
                let mut req = EvaluationRequest::new("p", "g", metric);
                req.binning = BinningRequest {
                    kind: BinKind::EqualWidth,
                    bins: 4,
                };
                let at = |t| {
                    let store = DemographicStore::from_assignments(vec![g.clone()], t).unwrap();
                    evaluate(&store, &d, &req).map(|r| serde_json::to_value(r).unwrap())
                };
                match (at(hi), at(lo)) {
                    (Ok(h), Ok(l)) => prop_assert!(released_subset(&h, &l), "{metric}: {h} vs {l}"),
                    (Err(a), Err(b)) => prop_assert_eq!(a.code(), b.code()),
                    (h, l) => prop_assert!(false, "{metric}: outcome differs by threshold: {h:?} / {l:?}"),
                }
            }
            Ok(())
        })
        .unwrap();
}
