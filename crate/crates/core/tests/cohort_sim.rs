use std::collections::BTreeSet;

use eqtreat_core::cohort::*;
use eqtreat_core::data::*;
use eqtreat_core::sim::*;
use eqtreat_core::synth::{cohort_residual, outcome_shift, DEFAULT_SHIFT};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rayon::prelude::*;

fn split_score(left: &[f64], right: &[f64]) -> f64 {
    if left.is_empty() || right.is_empty() {
        return 0.0;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let n = (left.len() + right.len()) as f64;
    (mean(left) - mean(right)).abs() * left.len().min(right.len()) as f64 / n
}

#[test]
fn root_split_beats_every_enumerated_alternative() {
    let data = cohort_residual(20_000, 3);
    let gd = data.grouped();
    let features = ["destination_gender", "tenure_years", "device"].map(String::from);
    let tree = build_error_tree(&gd, &features, CohortOptions::default()).unwrap();
    let root = tree.root().split.as_ref().unwrap();
    assert_eq!(root.feature, "destination_gender");

    let rows: Vec<(f64, &ScoredExample, &str)> = gd
        .iter()
        .map(|(ex, l)| (ex.outcome_value().unwrap() - ex.score, ex, l.unwrap()))
        .collect();
    let by = |pred: &dyn Fn(&ScoredExample, &str) -> bool| {
        let (l, r): (Vec<&(f64, &ScoredExample, &str)>, Vec<_>) = rows.iter().partition(|(_, ex, g)| pred(ex, g));
        split_score(&l.iter().map(|x| x.0).collect::<Vec<_>>(), &r.iter().map(|x| x.0).collect::<Vec<_>>())
    };
    let group_score = by(&|_, g| g == "F");
    assert!((group_score - root.score).abs() < 1e-9);
    for t in 0..20 {
        let s = by(&|ex, _| ex.features["tenure_years"].as_num().unwrap() <= t as f64);
        assert!(s < group_score, "tenure <= {t}: {s}");
    }
    for mask in 1..7u8 {
        let left: BTreeSet<&str> = ["desktop", "ios", "android"]
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, d)| *d)
            .collect();
        let s = by(&|ex, _| left.contains(ex.features["device"].to_string().as_str()));
        assert!(s < group_score);
    }

    let (l, r) = tree.root().children.unwrap();
    let mut means = [tree.nodes[l].mean_residual, tree.nodes[r].mean_residual];
    means.sort_by(f64::total_cmp);
    assert!((means[0] + 0.2).abs() < 0.02 && (means[1] - 0.2).abs() < 0.02, "{means:?}");
    let leaves = tree.leaves();
    assert!(leaves.windows(2).all(|w| w[0].mean_residual <= w[1].mean_residual));
    assert_eq!(leaves.iter().map(|n| n.leaf_number.unwrap()).collect::<Vec<_>>(), (1..=leaves.len()).collect::<Vec<_>>());
}

#[test]
fn female_cohorts_carry_higher_residuals() {
    let gd = outcome_shift(50_000, 2, DEFAULT_SHIFT).grouped();
    let features = ["gender", "tenure_years", "region"].map(String::from);
    let tree = build_error_tree(&gd, &features, CohortOptions::default()).unwrap();
    assert_eq!(tree.root().split.as_ref().unwrap().feature, "gender");
    let majority = |n: &CohortNode| {
        let f = n.group_counts.get("F").copied().unwrap_or(0);
        let m = n.group_counts.get("M").copied().unwrap_or(0);
        if f > m {
            "F"
        } else {
            "M"
        }
    };
    let leaves = tree.leaves();
    let worst_f = leaves.iter().filter(|n| majority(n) == "F").map(|n| n.mean_residual).fold(f64::INFINITY, f64::min);
    let best_m = leaves.iter().filter(|n| majority(n) == "M").map(|n| n.mean_residual).fold(f64::NEG_INFINITY, f64::max);
    assert!(worst_f > best_m, "{worst_f} vs {best_m}");
}

#[test]
fn sankey_partitions_the_root() {
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 48,
            ..Config::default()
        },
        TestRng::from_seed(RngAlgorithm::ChaCha, &[12; 32]),
    );
    runner
        .run(&(200usize..2000, any::<u64>(), 1usize..5), |(n, seed, depth)| {
            let gd = cohort_residual(n, seed).grouped();
            let features = ["destination_gender", "tenure_years", "device"].map(String::from);
            let opts = CohortOptions {
                max_depth: depth,
                min_leaf: None,
            };
            let tree = build_error_tree(&gd, &features, opts).unwrap();
            let s = tree.export_sankey();
            let leaf_total: usize = s.leaf_order.iter().map(|&id| tree.nodes[id].count).sum();
            prop_assert_eq!(leaf_total, tree.root().count);
            for node in tree.nodes.iter().filter(|n| !n.is_leaf()) {
                let out: usize = s.links.iter().filter(|l| l.source == node.id).map(|l| l.value).sum();
                prop_assert_eq!(out, node.count);
            }
            prop_assert!(tree.depth() <= depth);
            Ok(())
        })
        .unwrap();
}

fn run(eps: f64, seed: u64) -> SimState {
    run_simulation(&SimConfig {
        exploration_budget: eps,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn cumulative_positives_never_fall() {
    for eps in [0.0, 0.05, 0.3] {
        let s = run(eps, 1);
        for g in 0..s.labels.len() {
            assert!(s.steps.windows(2).all(|w| w[0].groups[g].cum_positives <= w[1].groups[g].cum_positives));
        }
    }
}

#[test]
fn no_exploration_keeps_unseeded_group_out() {
    let mut cfg = SimConfig {
        exploration_budget: 0.0,
        steps: 30,
        ..Default::default()
    };
    cfg.groups[1].seeded_fraction = 0.0;
    let s = run_simulation(&cfg).unwrap();
    assert!(s.steps.iter().all(|r| r.groups[1].impressions == 0));
    let r = summarize_sim(&s, DEFAULT_MIN_SHRINK_PP).unwrap();
    assert_eq!(r.flags, vec!["REINFORCING_STATUS_QUO".to_string()]);
}

#[test]
fn exploration_moves_toward_parity() {
    let finals: Vec<f64> = (0..6u64)
        .into_par_iter()
        .map(|seed| summarize_sim(&run(0.05, seed), DEFAULT_MIN_SHRINK_PP).unwrap().final_proportions["F"])
        .collect();
    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    assert!((mean - 0.5).abs() < 0.05, "{finals:?}");
}

#[test]
fn confidence_ranking_also_explores() {
    let mut cfg = SimConfig {
        exploration_budget: 0.05,
        confidence_ranking: true,
        seed: 4,
        ..Default::default()
    };
    cfg.steps = 60;
    let r = summarize_sim(&run_simulation(&cfg).unwrap(), DEFAULT_MIN_SHRINK_PP).unwrap();
    assert!(r.shrink_pp > 0.0);
}

#[test]
fn csv_has_a_row_per_group_and_step() {
    let s = run_simulation(&SimConfig {
        steps: 5,
        sessions_per_step: 20,
        ..Default::default()
    })
    .unwrap();
    let csv = s.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,group,impressions,proportion,cum_positives"));
    assert_eq!(lines.count(), 6 * 2);
}
