use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use eqtreat_core::cohort::{build_error_tree, CohortOptions, CohortTree, SankeyExport};
use eqtreat_core::consequence::{consequence_verdict, edge_rates, parse_edges_jsonl, ConsequenceVerdict, EdgeRateTable, VerdictPolicy};
use eqtreat_core::data::{join_groups, BinKind, BinningScheme, GroupedDataset};
use eqtreat_core::dp::{dp_calibration_curve, dp_group_distribution, dp_parity_gap, randomize, DebiasOptions, NoiseChannel};
use eqtreat_core::mitigation::{
    apply_calibrator, fit_bmt, justifiability_pipeline, run_blind_harness, BmtOptions, GroupCalibrator, HarnessConfig,
    PipelineConfig, Strategy,
};
use eqtreat_core::parity::{
    auroc, calibration_curve, group_distribution, pairwise_parity_gaps, qos_report, CalibrationCurve, GroupDistribution,
    PairwiseGapReport, ParityGapReport, QosMetric, QosOptions, QosReport,
};
use eqtreat_core::sim::{run_simulation, summarize_sim, SimConfig, SimSummary, DEFAULT_MIN_SHRINK_PP};
use eqtreat_core::synth::{
    cohort_residual, confounder, edges_to_jsonl, group_label_bias, outcome_shift, random_edges, rate_table_edges, Family, DEFAULT_SHIFT,
};
use eqtreat_service::ServiceConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::io::{emit, load_config, load_dataset, load_groups, read_text, to_json, write_file};
use crate::{Binning, CliError, Command, Joined};

/// Accept-rate lift given to F destinations in generated edge data.
const SYNTH_ACCEPT_LIFT: f64 = 0.03;

#[derive(Debug, Serialize)]
struct Seeded<T> {
    seed: u64,
    #[serde(flatten)]
    report: T,
}

fn joined(j: &Joined) -> Result<GroupedDataset, CliError> {
    let d = load_dataset(&j.input)?;
    let g = load_groups(&j.groups, j.dimension.as_deref())?;
    Ok(join_groups(&d, &g))
}

fn scheme(gd: &GroupedDataset, kind: BinKind, bins: usize) -> Result<BinningScheme, CliError> {
    Ok(BinningScheme::build(kind, bins, &gd.dataset().scores())?)
}

pub fn run(cmd: Command, config: Option<&Path>) -> Result<(), CliError> {
    match cmd {
        Command::Measure {
            joined: j,
            binning,
            threshold,
            seed,
            out,
        } => measure(&j, &binning, threshold, seed, out.as_deref()),
        Command::DpMeasure {
            joined: j,
            binning,
            rho,
            apply_noise,
            seed,
            out,
        } => dp_measure(&j, &binning, rho, apply_noise, seed, out.as_deref()),
        Command::Cohorts {
            joined: j,
            features,
            max_depth,
            min_leaf,
            out,
        } => {
            let mut opts: CohortOptions = load_config(config)?;
            if let Some(d) = max_depth {
                opts.max_depth = d;
            }
            if min_leaf.is_some() {
                opts.min_leaf = min_leaf;
            }
            cohorts(&j, features, opts, out.as_deref())
        }
        Command::Mitigate {
            joined: j,
            binning,
            calibrator,
            min_fit_count,
            out,
            calibrated_out,
        } => {
            let mut opts: BmtOptions = load_config(config)?;
            if let Some(m) = min_fit_count {
                opts.min_fit_count = m;
            }
            mitigate(&j, &binning, calibrator.as_deref(), opts, out.as_deref(), calibrated_out.as_deref())
        }
        Command::Harness {
            joined: j,
            test_input,
            test_fraction,
            baseline_features,
            superset,
            strategies,
            bins,
            bin_kind,
            seed,
            pipeline,
            step_log,
            out,
        } => {
            let mut pcfg: PipelineConfig = if pipeline {
                load_config(config)?
            } else {
                PipelineConfig {
                    harness: load_config(config)?,
                    ..PipelineConfig::default()
                }
            };
            let h = &mut pcfg.harness;
            if !baseline_features.is_empty() {
                h.baseline_features = baseline_features;
            }
            if !superset.is_empty() {
                h.feature_superset = superset;
            }
            if !strategies.is_empty() {
                h.strategies = strategies
                    .iter()
                    .map(|s| Strategy::from_str(s).map_err(|e| CliError::Usage(e.to_string())))
                    .collect::<Result<_, _>>()?;
            }
            if let Some(b) = bins {
                h.num_bins = b;
            }
            if let Some(k) = bin_kind {
                h.bin_kind = k;
            }
            if let Some(s) = seed {
                h.seed = s;
            }
            if pipeline {
                let gd = joined(&j)?;
                let report = justifiability_pipeline(&gd, &pcfg, step_log.as_deref())?;
                let summary = report.to_string();
                emit(
                    &Seeded {
                        seed: pcfg.harness.seed,
                        report,
                    },
                    out.as_deref(),
                    summary,
                )
            } else {
                harness(&j, test_input, test_fraction, &pcfg.harness, out.as_deref())
            }
        }
        Command::Consequences {
            input,
            groups,
            dimension,
            protected,
            out,
        } => {
            let mut policy: VerdictPolicy = load_config(config)?;
            if protected.is_some() {
                policy.protected_group = protected;
            }
            consequences(&input, &groups, dimension.as_deref(), &policy, out.as_deref())
        }
        Command::Simulate {
            epsilon,
            steps,
            seed,
            threshold,
            out,
        } => {
            let mut cfg: SimConfig = load_config(config)?;
            if let Some(e) = epsilon {
                cfg.exploration_budget = e;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            simulate(&cfg, threshold.unwrap_or(DEFAULT_MIN_SHRINK_PP), out.as_deref())
        }
        Command::Serve {
            listen,
            groups,
            threshold,
        } => {
            let mut cfg = ServiceConfig::load(config)?;
            if let Some(l) = listen {
                cfg.listen = l;
            }
            if groups.is_some() {
                cfg.store_path = groups;
            }
            if let Some(t) = threshold {
                cfg.suppression_threshold = t;
            }
            serve(cfg)
        }
        Command::Synth {
            family,
            n,
            seed,
            shift,
            rate_table,
            out,
        } => synth(family, n, seed, shift, rate_table, &out),
    }
}

#[derive(Debug, Serialize)]
struct MeasureReport {
    dimension: String,
    binning: BinningScheme,
    unknown_count: usize,
    parity: PairwiseGapReport,
    calibration: Vec<CalibrationCurve>,
    qos: QosReport,
    distribution: GroupDistribution,
}

fn measure(j: &Joined, binning: &Binning, threshold: f64, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let gd = joined(j)?;
    let b = scheme(&gd, binning.bin_kind, binning.bins)?;
    let parity = pairwise_parity_gaps(&gd, &b);
    // groups without labeled rows have no curve; the parity report lists them as skipped
    let calibration = gd.labels().iter().filter_map(|l| calibration_curve(&gd, &b, l).ok()).collect();
    let qos = qos_report(
        &gd,
        QosMetric::Auroc,
        threshold,
        QosOptions {
            seed,
            ..QosOptions::default()
        },
    )?;
    let distribution = group_distribution(&gd, None);
    let mut summary = String::new();
    for p in &parity.pairs {
        write!(summary, "{p}").ok();
    }
    write!(summary, "{qos}{distribution}").ok();
    let report = MeasureReport {
        dimension: gd.dimension().to_string(),
        binning: b,
        unknown_count: gd.unknown_count(),
        parity,
        calibration,
        qos,
        distribution,
    };
    emit(&Seeded { seed, report }, out, summary)
}

#[derive(Debug, Serialize)]
struct DpMeasureReport {
    dimension: String,
    rho: f64,
    binning: BinningScheme,
    pairs: Vec<ParityGapReport>,
    skipped: Vec<(String, String, String)>,
    calibration: Vec<CalibrationCurve>,
    distribution: GroupDistribution,
}

fn dp_measure(j: &Joined, binning: &Binning, rho: f64, apply_noise: bool, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let d = load_dataset(&j.input)?;
    let mut g = load_groups(&j.groups, j.dimension.as_deref())?;
    if apply_noise {
        let ch = NoiseChannel::new(g.label_set().iter().cloned(), rho)?;
        g = randomize(&g, &ch, seed)?;
    }
    let gd = join_groups(&d, &g);
    let ch = NoiseChannel::new(gd.labels().to_vec(), rho)?;
    let b = scheme(&gd, binning.bin_kind, binning.bins)?;
    let opts = DebiasOptions::default();
    let labels = gd.labels();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for i in 0..labels.len() {
        for k in i + 1..labels.len() {
            match dp_parity_gap(&gd, &ch, &b, &labels[i], &labels[k], &opts) {
                Ok(r) => pairs.push(r),
                Err(e) if matches!(e.code(), "NO_DATA" | "INCOMPARABLE") => {
                    skipped.push((labels[i].clone(), labels[k].clone(), e.code().to_string()))
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    let calibration = labels
        .iter()
        .filter_map(|l| dp_calibration_curve(&gd, &ch, &b, l, &opts).ok())
        .collect();
    let distribution = dp_group_distribution(&gd, &ch, &opts)?;
    let mut summary = String::new();
    for p in &pairs {
        write!(summary, "{p}").ok();
    }
    write!(summary, "{distribution}").ok();
    let report = DpMeasureReport {
        dimension: gd.dimension().to_string(),
        rho,
        binning: b,
        pairs,
        skipped,
        calibration,
        distribution,
    };
    emit(&Seeded { seed, report }, out, summary)
}

#[derive(Debug, Serialize)]
struct CohortReport {
    tree: CohortTree,
    sankey: SankeyExport,
}

fn cohorts(j: &Joined, features: Vec<String>, opts: CohortOptions, out: Option<&Path>) -> Result<(), CliError> {
    let gd = joined(j)?;
    let features = if features.is_empty() {
        let mut all: BTreeSet<String> = gd.examples().iter().flat_map(|e| e.features.keys().cloned()).collect();
        all.insert(gd.dimension().to_string());
        all.into_iter().collect()
    } else {
        features
    };
    let tree = build_error_tree(&gd, &features, opts)?;
    let sankey = tree.export_sankey();
    let summary = tree.to_string();
    emit(&CohortReport { tree, sankey }, out, summary)
}

#[derive(Debug, Serialize)]
struct MitigateReport {
    dimension: String,
    fitted: bool,
    calibrator: Option<PathBuf>,
    calibrated_dataset: Option<PathBuf>,
    auroc_before: Option<f64>,
    auroc_after: Option<f64>,
    max_gap_before: Option<f64>,
    max_gap_after: Option<f64>,
    before: PairwiseGapReport,
    after: PairwiseGapReport,
}

fn mitigate(
    j: &Joined,
    binning: &Binning,
    existing: Option<&Path>,
    opts: BmtOptions,
    out: Option<&Path>,
    calibrated_out: Option<&Path>,
) -> Result<(), CliError> {
    let gd = joined(j)?;
    let before = pairwise_parity_gaps(&gd, &scheme(&gd, binning.bin_kind, binning.bins)?);
    let calibrator: GroupCalibrator = match existing {
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| CliError::Usage(format!("calibrator {}: {e}", p.display())))?,
        None => fit_bmt(&gd, &opts)?,
    };
    let after_gd = apply_calibrator(&calibrator, &gd)?;
    let after = pairwise_parity_gaps(&after_gd, &scheme(&after_gd, binning.bin_kind, binning.bins)?);
    if let Some(p) = out {
        write_file(p, &to_json(&calibrator))?;
    }
    if let Some(p) = calibrated_out {
        write_file(p, &after_gd.dataset().to_jsonl())?;
    }
    let report = MitigateReport {
        dimension: gd.dimension().to_string(),
        fitted: existing.is_none(),
        calibrator: out.map(Path::to_path_buf),
        calibrated_dataset: calibrated_out.map(Path::to_path_buf),
        auroc_before: auroc(gd.dataset()).ok(),
        auroc_after: auroc(after_gd.dataset()).ok(),
        max_gap_before: before.max_gap,
        max_gap_after: after.max_gap,
        before,
        after,
    };
    print!("{}", to_json(&report));
    Ok(())
}

fn harness(j: &Joined, test_input: Option<PathBuf>, test_fraction: f64, cfg: &HarnessConfig, out: Option<&Path>) -> Result<(), CliError> {
    let gd = joined(j)?;
    let (train, test) = match test_input {
        Some(p) => {
            let g = load_groups(&j.groups, j.dimension.as_deref())?;
            (gd, join_groups(&load_dataset(&p)?, &g))
        }
        None => {
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(CliError::Usage(format!("--test-fraction {test_fraction} outside (0, 1)")));
            }
            let mut idx: Vec<usize> = (0..gd.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            let cut = (gd.len() as f64 * test_fraction).round() as usize;
            let (mut te, mut tr) = (idx[..cut].to_vec(), idx[cut..].to_vec());
            te.sort_unstable();
            tr.sort_unstable();
            (gd.subset(&tr), gd.subset(&te))
        }
    };
    let report = run_blind_harness(&train, &test, cfg)?;
    let summary = report.to_string();
    emit(&Seeded { seed: cfg.seed, report }, out, summary)
}

#[derive(Debug, Serialize)]
struct ConsequenceReport {
    table: EdgeRateTable,
    verdict: ConsequenceVerdict,
}

fn consequences(input: &Path, groups: &Path, dimension: Option<&str>, policy: &VerdictPolicy, out: Option<&Path>) -> Result<(), CliError> {
    let edges = parse_edges_jsonl(&read_text(input)?)?;
    let g = load_groups(groups, dimension)?;
    let table = edge_rates(&edges, &g)?;
    let verdict = consequence_verdict(&table, policy)?;
    let summary = format!("{table}{verdict}");
    emit(&ConsequenceReport { table, verdict }, out, summary)
}

#[derive(Debug, Serialize)]
struct SimulateReport {
    exploration_budget: f64,
    steps: usize,
    csv: Option<PathBuf>,
    summary: SimSummary,
}

fn simulate(cfg: &SimConfig, min_shrink_pp: f64, out: Option<&Path>) -> Result<(), CliError> {
    let state = run_simulation(cfg)?;
    let summary = summarize_sim(&state, min_shrink_pp)?;
    match out {
        Some(p) => {
            write_file(p, &state.to_csv())?;
            let report = SimulateReport {
                exploration_budget: cfg.exploration_budget,
                steps: cfg.steps,
                csv: Some(p.to_path_buf()),
                summary,
            };
            print!("{}", to_json(&Seeded { seed: cfg.seed, report }));
        }
        None => print!("{}", state.to_csv()),
    }
    Ok(())
}

fn serve(cfg: ServiceConfig) -> Result<(), CliError> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let rt = tokio::runtime::Runtime::new().map_err(|source| CliError::Write {
        path: PathBuf::from("<runtime>"),
        source,
    })?;
    Ok(rt.block_on(eqtreat_service::serve(cfg))?)
}

#[derive(Debug, Serialize)]
struct SynthReport {
    family: Family,
    n: usize,
    seed: u64,
    files: Vec<PathBuf>,
}

fn synth(family: Family, n: usize, seed: u64, shift: Option<f64>, rate_table: bool, out: &Path) -> Result<(), CliError> {
    if rate_table && family != Family::Edges {
        return Err(CliError::Usage("--rate-table only applies to --family edges".into()));
    }
    if shift.is_some() && family != Family::OutcomeShift {
        return Err(CliError::Usage("--shift only applies to --family outcome-shift".into()));
    }
    let groups_path = out.join("groups.jsonl");
    let (main_path, main, groups) = match family {
        Family::Edges => {
            let (edges, g) = if rate_table { rate_table_edges() } else { random_edges(n, seed, SYNTH_ACCEPT_LIFT) };
            (out.join("edges.jsonl"), edges_to_jsonl(&edges), g)
        }
        f => {
            let data = match f {
                Family::OutcomeShift => outcome_shift(n, seed, shift.unwrap_or(DEFAULT_SHIFT)),
                Family::GroupLabelBias => group_label_bias(n, seed),
                Family::Confounder => confounder(n, seed),
                Family::CohortResidual => cohort_residual(n, seed),
                Family::Edges => unreachable!("handled above"),
            };
            (out.join("dataset.jsonl"), data.dataset.to_jsonl(), data.groups)
        }
    };
    write_file(&main_path, &main)?;
    write_file(&groups_path, &groups.to_jsonl())?;
    print!(
        "{}",
        to_json(&SynthReport {
            family,
            n,
            seed,
            files: vec![main_path, groups_path],
        })
    );
    Ok(())
}
