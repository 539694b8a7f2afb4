use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply_calibrator, fit_bmt, BmtOptions, GroupCalibrator, LogisticRegression, MitigationError, DEFAULT_L2};
use crate::data::{BinKind, BinningScheme, Dataset, FeatureValue, GroupedDataset, ScoredExample, MISSING_CATEGORY};
use crate::parity::{auroc, pairwise_parity_gaps, MetricError};

/// Attached to every strategy that reads group labels when scoring.
pub const DEMOGRAPHIC_NOTE: &str =
    "reads group labels at scoring time; kept for offline comparison and not an acceptable mitigation on its own";

pub const DEFAULT_FEATURE_BUDGET: usize = 10;
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Baseline,
    AddFeatureSuperset,
    ImputePopulationMeans,
    ImputeGroupMeans,
    AddGroupLabel,
    ExhaustiveSubsetSearch,
    Qpd,
    CausalEffectDecomposition,
    Bmt,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Baseline,
        Strategy::AddFeatureSuperset,
        Strategy::ImputePopulationMeans,
        Strategy::ImputeGroupMeans,
        Strategy::AddGroupLabel,
        Strategy::ExhaustiveSubsetSearch,
        Strategy::Qpd,
        Strategy::CausalEffectDecomposition,
        Strategy::Bmt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::AddFeatureSuperset => "add_feature_superset",
            Self::ImputePopulationMeans => "impute_population_means",
            Self::ImputeGroupMeans => "impute_group_means",
            Self::AddGroupLabel => "add_group_label",
            Self::ExhaustiveSubsetSearch => "exhaustive_subset_search",
            Self::Qpd => "qpd",
            Self::CausalEffectDecomposition => "causal_effect_decomposition",
            Self::Bmt => "bmt",
        }
    }

    pub fn uses_demographics_at_inference(self) -> bool {
        matches!(self, Self::ImputeGroupMeans | Self::AddGroupLabel | Self::Bmt)
    }

    fn dispatches_to_subset_search(self) -> bool {
        matches!(self, Self::ExhaustiveSubsetSearch | Self::Qpd | Self::CausalEffectDecomposition)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = MitigationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| MitigationError::InvalidArgument(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub baseline_features: Vec<String>,
    /// Extra candidate features that blind strategies may add.
    pub feature_superset: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub feature_budget: usize,
    /// Share of training rows held out for BMT fitting and subset selection.
    pub holdout_fraction: f64,
    pub l2: f64,
    pub bin_kind: BinKind,
    pub num_bins: usize,
    pub seed: u64,
    pub bmt: BmtOptions,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            baseline_features: Vec::new(),
            feature_superset: Vec::new(),
            strategies: Strategy::ALL.to_vec(),
            feature_budget: DEFAULT_FEATURE_BUDGET,
            holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
            l2: DEFAULT_L2,
            bin_kind: BinKind::EqualWidth,
            num_bins: BinningScheme::DEFAULT_BINS,
            seed: 0,
            bmt: BmtOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationExperiment {
    pub strategy: Strategy,
    pub uses_demographics_at_inference: bool,
    pub auroc: f64,
    /// Fraction in `[0, 1]`.
    pub parity_gap: f64,
    /// Percentage points: `100 · (baseline gap − gap)`.
    pub reduction_pp: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_features: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessReport {
    pub dimension: String,
    pub baseline_auroc: f64,
    pub baseline_gap: f64,
    /// Sorted by gap, smallest first.
    pub experiments: Vec<MitigationExperiment>,
    pub footnote: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrator: Option<GroupCalibrator>,
}

impl HarnessReport {
    pub fn get(&self, s: Strategy) -> Option<&MitigationExperiment> {
        self.experiments.iter().find(|e| e.strategy == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Impute {
    Zero,
    PopulationMean,
    GroupMean,
}

#[derive(Debug, Clone)]
enum Column {
    Num {
        name: String,
        fill: f64,
        group_fill: BTreeMap<String, f64>,
    },
    Cat {
        name: String,
        /// Reference level first; it gets no indicator.
        levels: Vec<String>,
    },
}

/// Turns examples into model rows. Group labels are only ever read when
/// `labels` is supplied, which blind strategies never do.
#[derive(Debug, Clone)]
struct Encoder {
    columns: Vec<Column>,
    group_levels: Option<Vec<String>>,
}

impl Encoder {
    fn fit(
        rows: &[&ScoredExample],
        labels: Option<&[Option<&str>]>,
        features: &[String],
        impute: Impute,
        add_group: bool,
    ) -> Self {
        let columns = features
            .iter()
            .map(|name| {
                let values: Vec<Option<&FeatureValue>> = rows.iter().map(|e| e.features.get(name)).collect();
                let numeric = values.iter().flatten().all(|v| v.as_num().is_some());
                if numeric {
                    let (mut sum, mut n) = (0.0, 0.0);
                    let mut by_group: BTreeMap<String, (f64, f64)> = BTreeMap::new();
                    for (i, v) in values.iter().enumerate() {
                        let Some(x) = v.and_then(FeatureValue::as_num) else { continue };
                        sum += x;
                        n += 1.0;
                        if let Some(Some(l)) = labels.map(|ls| ls[i]) {
                            let e = by_group.entry(l.to_string()).or_default();
                            e.0 += x;
                            e.1 += 1.0;
                        }
                    }
                    let mean = if n > 0.0 { sum / n } else { 0.0 };
                    let fill = if impute == Impute::Zero { 0.0 } else { mean };
                    let group_fill = if impute == Impute::GroupMean {
                        by_group.into_iter().map(|(l, (s, c))| (l, s / c)).collect()
                    } else {
                        BTreeMap::new()
                    };
                    Column::Num {
                        name: name.clone(),
                        fill,
                        group_fill,
                    }
                } else {
                    let mut levels: BTreeSet<String> = values.iter().map(|v| cat_level(*v)).collect();
                    levels.insert(MISSING_CATEGORY.to_string());
                    Column::Cat {
                        name: name.clone(),
                        levels: levels.into_iter().collect(),
                    }
                }
            })
            .collect();
        let group_levels = add_group.then(|| {
            let set: BTreeSet<String> = labels
                .into_iter()
                .flatten()
                .flatten()
                .map(|l| l.to_string())
                .collect();
            set.into_iter().collect()
        });
        Self { columns, group_levels }
    }

    fn encode(&self, e: &ScoredExample, label: Option<&str>) -> Vec<f64> {
        let mut row = Vec::new();
        for col in &self.columns {
            match col {
                Column::Num { name, fill, group_fill } => {
                    let x = e.features.get(name).and_then(FeatureValue::as_num).unwrap_or_else(|| {
                        label.and_then(|l| group_fill.get(l)).copied().unwrap_or(*fill)
                    });
                    row.push(x);
                }
                Column::Cat { name, levels } => {
                    let v = cat_level(e.features.get(name));
                    row.extend(levels.iter().skip(1).map(|l| if *l == v { 1.0 } else { 0.0 }));
                }
            }
        }
        if let Some(levels) = &self.group_levels {
            row.extend(levels.iter().skip(1).map(|l| if Some(l.as_str()) == label { 1.0 } else { 0.0 }));
        }
        row
    }
}

fn cat_level(v: Option<&FeatureValue>) -> String {
    match v {
        Some(FeatureValue::Cat(s)) => s.clone(),
        Some(FeatureValue::Num(x)) => x.to_string(),
        None => MISSING_CATEGORY.to_string(),
    }
}

/// Labeled training rows split into a model-fitting part and a holdout.
struct Split<'a> {
    fit: Vec<&'a ScoredExample>,
    fit_labels: Vec<Option<&'a str>>,
    holdout: GroupedDataset,
}

fn split_train<'a>(train: &'a GroupedDataset, fraction: f64, seed: u64) -> Result<Split<'a>, MitigationError> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(MitigationError::InvalidArgument(format!("holdout fraction {fraction} outside (0, 1)")));
    }
    let mut labeled: Vec<usize> = (0..train.len()).filter(|&i| train.examples()[i].is_labeled()).collect();
    labeled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((labeled.len() as f64) * fraction).round() as usize;
    let (hold, fit) = labeled.split_at(cut);
    if fit.is_empty() || hold.is_empty() {
        return Err(MitigationError::NoData(format!(
            "{} labeled training rows cannot be split for fitting and holdout",
            labeled.len()
        )));
    }
    let mut hold = hold.to_vec();
    hold.sort_unstable();
    Ok(Split {
        fit: fit.iter().map(|&i| &train.examples()[i]).collect(),
        fit_labels: fit.iter().map(|&i| train.label_of(i)).collect(),
        holdout: train.subset(&hold),
    })
}

struct Trained {
    model: LogisticRegression,
    encoder: Encoder,
}

impl Trained {
    fn score(&self, d: &[ScoredExample], labels: Option<&[Option<&str>]>) -> Vec<f64> {
        d.iter()
            .enumerate()
            .map(|(i, e)| self.model.predict(&self.encoder.encode(e, labels.and_then(|ls| ls[i]))))
            .collect()
    }
}

fn train_model(
    rows: &[&ScoredExample],
    labels: Option<&[Option<&str>]>,
    features: &[String],
    impute: Impute,
    add_group: bool,
    l2: f64,
) -> Result<Trained, MitigationError> {
    let encoder = Encoder::fit(rows, labels, features, impute, add_group);
    let x: Vec<Vec<f64>> = rows
        .iter()
        .enumerate()
        .map(|(i, e)| encoder.encode(e, labels.and_then(|ls| ls[i])))
        .collect();
    let y: Vec<f64> = rows.iter().map(|e| e.outcome_value().unwrap_or(0.0)).collect();
    if x[0].is_empty() {
        // no features: intercept-only model on a constant column
        let ones = vec![vec![0.0]; rows.len()];
        let model = LogisticRegression::fit(&ones, &y, l2)?;
        return Ok(Trained {
            model,
            encoder: Encoder {
                columns: vec![Column::Num {
                    name: String::new(),
                    fill: 0.0,
                    group_fill: BTreeMap::new(),
                }],
                group_levels: None,
            },
        });
    }
    let model = LogisticRegression::fit(&x, &y, l2)?;
    Ok(Trained { model, encoder })
}

/// Max pairwise parity gap and AUROC of `scores` on `gd`.
fn evaluate(gd: &GroupedDataset, scores: &[f64], cfg: &HarnessConfig) -> Result<(f64, f64), MitigationError> {
    let scored = gd.with_scores(scores)?;
    let b = BinningScheme::build(cfg.bin_kind, cfg.num_bins, scores)?;
    let gaps = pairwise_parity_gaps(&scored, &b);
    let gap = gaps.max_gap.ok_or_else(|| {
        let (a, b) = gaps
            .skipped
            .first()
            .map(|s| (s.0.clone(), s.1.clone()))
            .unwrap_or_default();
        MitigationError::Metric(MetricError::Incomparable { a, b })
    })?;
    Ok((auroc(scored.dataset())?, gap))
}

fn labels_of(gd: &GroupedDataset) -> Vec<Option<&str>> {
    (0..gd.len()).map(|i| gd.label_of(i)).collect()
}

/// Chosen subset (by holdout gap) and its trained model.
fn subset_search(
    split: &Split<'_>,
    cfg: &HarnessConfig,
    blind_fit: &[&ScoredExample],
) -> Result<(Vec<String>, Trained), MitigationError> {
    let extra: Vec<String> = cfg
        .feature_superset
        .iter()
        .filter(|f| !cfg.baseline_features.contains(f))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if extra.len() > cfg.feature_budget {
        return Err(MitigationError::FeatureBudgetExceeded {
            requested: extra.len(),
            budget: cfg.feature_budget,
        });
    }
    let holdout_blind = split.holdout.strip_labels();
    let results: Vec<Result<(f64, usize, u32), MitigationError>> = (0u32..1 << extra.len())
        .into_par_iter()
        .map(|mask| {
            let mut feats = cfg.baseline_features.clone();
            feats.extend((0..extra.len()).filter(|b| mask & (1 << b) != 0).map(|b| extra[b].clone()));
            let m = train_model(blind_fit, None, &feats, Impute::Zero, false, cfg.l2)?;
            let (_, gap) = evaluate(&split.holdout, &m.score(holdout_blind.examples(), None), cfg)?;
            Ok((gap, mask.count_ones() as usize, mask))
        })
        .collect();
    let mut best: Option<(f64, usize, u32)> = None;
    for r in results {
        let r = r?;
        if best.is_none_or(|b| (r.0, r.1, r.2) < b) {
            best = Some(r);
        }
    }
    let (_, _, mask) = best.expect("at least the empty subset");
    let chosen: Vec<String> = (0..extra.len()).filter(|b| mask & (1 << b) != 0).map(|b| extra[b].clone()).collect();
    let mut feats = cfg.baseline_features.clone();
    feats.extend(chosen.iter().cloned());
    let m = train_model(blind_fit, None, &feats, Impute::Zero, false, cfg.l2)?;
    Ok((chosen, m))
}

/// Trains the internal scorer under each strategy on `train` and evaluates
/// AUROC and the parity gap on `test`. Blind strategies only ever see label-
/// stripped projections of the data.
pub fn run_blind_harness(
    train: &GroupedDataset,
    test: &GroupedDataset,
    cfg: &HarnessConfig,
) -> Result<HarnessReport, MitigationError> {
    if train.dimension() != test.dimension() {
        return Err(MitigationError::DimensionMismatch {
            expected: train.dimension().to_string(),
            found: test.dimension().to_string(),
        });
    }
    let split = split_train(train, cfg.holdout_fraction, cfg.seed)?;

    // example rows carry no group labels; those live only in the grouping
    let blind_fit: Vec<&ScoredExample> = split.fit.clone();
    let test_blind: Dataset = test.strip_labels();

    let baseline = train_model(&blind_fit, None, &cfg.baseline_features, Impute::Zero, false, cfg.l2)?;
    let baseline_scores = baseline.score(test_blind.examples(), None);
    let (baseline_auroc, baseline_gap) = evaluate(test, &baseline_scores, cfg)?;

    let mut superset = cfg.baseline_features.clone();
    for f in &cfg.feature_superset {
        if !superset.contains(f) {
            superset.push(f.clone());
        }
    }
    let test_labels = labels_of(test);
    let strategies: BTreeSet<Strategy> = cfg.strategies.iter().copied().collect();
    let mut subset: Option<(Vec<String>, Vec<f64>)> = None;
    let mut calibrator = None;
    let mut experiments = Vec::new();
    for s in strategies {
        let mut flags = Vec::new();
        let mut selected = None;
        let scores = match s {
            Strategy::Baseline => baseline_scores.clone(),
            Strategy::AddFeatureSuperset => train_model(&blind_fit, None, &superset, Impute::Zero, false, cfg.l2)?
                .score(test_blind.examples(), None),
            Strategy::ImputePopulationMeans => {
                train_model(&blind_fit, None, &cfg.baseline_features, Impute::PopulationMean, false, cfg.l2)?
                    .score(test_blind.examples(), None)
            }
            Strategy::ImputeGroupMeans => train_model(
                &split.fit,
                Some(&split.fit_labels),
                &cfg.baseline_features,
                Impute::GroupMean,
                false,
                cfg.l2,
            )?
            .score(test.examples(), Some(&test_labels)),
            Strategy::AddGroupLabel => train_model(
                &split.fit,
                Some(&split.fit_labels),
                &cfg.baseline_features,
                Impute::Zero,
                true,
                cfg.l2,
            )?
            .score(test.examples(), Some(&test_labels)),
            Strategy::ExhaustiveSubsetSearch | Strategy::Qpd | Strategy::CausalEffectDecomposition => {
                if subset.is_none() {
                    let (chosen, m) = subset_search(&split, cfg, &blind_fit)?;
                    subset = Some((chosen, m.score(test_blind.examples(), None)));
                }
                let (chosen, scores) = subset.as_ref().expect("just computed");
                selected = Some(chosen.clone());
                if s != Strategy::ExhaustiveSubsetSearch {
                    flags.push("SUBSET_SEARCH_ENGINE".to_string());
                }
                scores.clone()
            }
            Strategy::Bmt => {
                let holdout_scores = baseline.score(split.holdout.strip_labels().examples(), None);
                let c = fit_bmt(&split.holdout.with_scores(&holdout_scores)?, &cfg.bmt)?;
                let calibrated = apply_calibrator(&c, &test.with_scores(&baseline_scores)?)?;
                if !c.fallback.is_empty() {
                    flags.push("FALLBACK".to_string());
                }
                calibrator = Some(c);
                calibrated.dataset().scores()
            }
        };
        debug_assert!(!s.dispatches_to_subset_search() || selected.is_some());
        let (auroc, gap) = evaluate(test, &scores, cfg)?;
        if s.uses_demographics_at_inference() {
            flags.push("DEMOGRAPHICS_AT_INFERENCE".to_string());
        }
        experiments.push(MitigationExperiment {
            strategy: s,
            uses_demographics_at_inference: s.uses_demographics_at_inference(),
            auroc,
            parity_gap: gap,
            reduction_pp: 100.0 * (baseline_gap - gap),
            flags,
            selected_features: selected,
        });
    }
    experiments.sort_by(|a, b| a.parity_gap.total_cmp(&b.parity_gap).then(a.strategy.cmp(&b.strategy)));
    Ok(HarnessReport {
        dimension: train.dimension().to_string(),
        baseline_auroc,
        baseline_gap,
        experiments,
        footnote: DEMOGRAPHIC_NOTE.to_string(),
        calibrator,
    })
}

impl fmt::Display for HarnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mitigation experiments [{}]", self.dimension)?;
        writeln!(f, "  {:<30} {:>8} {:>10} {:>14}", "strategy", "AUROC", "gap (%)", "reduction (pp)")?;
        for e in &self.experiments {
            let mark = if e.uses_demographics_at_inference { "*" } else { "" };
            writeln!(
                f,
                "  {:<30} {:>8.2} {:>10.2} {:>14.2}",
                format!("{}{mark}", e.strategy),
                100.0 * e.auroc,
                100.0 * e.parity_gap,
                e.reduction_pp
            )?;
        }
        writeln!(f, "  * {}", self.footnote)
    }
}
