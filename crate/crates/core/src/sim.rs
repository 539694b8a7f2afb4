//! Explore/exploit recommendation simulator.
//!
//! Members carry a hidden quality (probability of a positive outcome when
//! shown). Exploit sessions rank a candidate pool by a Beta(1, 1)-smoothed
//! success rate; explore sessions first fill the slate with candidates that
//! have fewer than `observation_floor` observations. Shown members realize
//! outcomes, which feed back into the estimates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("slate size {k} exceeds the {available} members available")]
    SlateTooLarge { k: usize, available: usize },
    #[error("empty simulation state")]
    Empty,
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidConfig(_) => "INVALID_CONFIG",
            Self::SlateTooLarge { .. } => "SLATE_TOO_LARGE",
            Self::Empty => "EMPTY_STATE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub label: String,
    pub count: usize,
    /// Latent quality ~ Beta(quality_alpha, quality_beta).
    pub quality_alpha: f64,
    pub quality_beta: f64,
    /// Share of the group that starts with an observation history.
    pub seeded_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub groups: Vec<GroupSpec>,
    pub slate_size: usize,
    pub sessions_per_step: usize,
    /// Members drawn uniformly as the candidate pool of one session.
    pub candidates_per_session: usize,
    /// Fraction of sessions that explore.
    pub exploration_budget: f64,
    pub steps: usize,
    pub seed: u64,
    pub observation_floor: u64,
    /// Observations given to each seeded member before step 1.
    pub initial_observations: u64,
    /// Rank exploit slates by an upper confidence bound instead of the mean.
    pub confidence_ranking: bool,
    pub confidence_z: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let group = |label: &str, seeded_fraction| GroupSpec {
            label: label.to_string(),
            count: 5000,
            quality_alpha: 2.0,
            quality_beta: 2.0,
            seeded_fraction,
        };
        Self {
            // 5000 vs 1667 seeded members: a 75/25 observed split
            groups: vec![group("M", 1.0), group("F", 1.0 / 3.0)],
            slate_size: 5,
            sessions_per_step: 2000,
            candidates_per_session: 50,
            exploration_budget: 0.05,
            steps: 100,
            seed: 0,
            observation_floor: 3,
            initial_observations: 10,
            confidence_ranking: false,
            confidence_z: 1.0,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<usize, SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.groups.is_empty() {
            return bad("at least one group".into());
        }
        for g in &self.groups {
            if !(g.quality_alpha > 0.0 && g.quality_beta > 0.0) {
                return bad(format!("group `{}` needs positive Beta parameters", g.label));
            }
            if !(0.0..=1.0).contains(&g.seeded_fraction) {
                return bad(format!("group `{}` seeded_fraction outside [0, 1]", g.label));
            }
        }
        if !(0.0..=1.0).contains(&self.exploration_budget) {
            return bad(format!("exploration budget {} outside [0, 1]", self.exploration_budget));
        }
        if self.slate_size == 0 || self.steps == 0 || self.sessions_per_step == 0 {
            return bad("slate size, steps and sessions per step must be positive".into());
        }
        let population: usize = self.groups.iter().map(|g| g.count).sum();
        let pool = self.candidates_per_session.min(population);
        if self.slate_size > pool {
            return Err(SimError::SlateTooLarge {
                k: self.slate_size,
                available: pool,
            });
        }
        Ok(population)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMember {
    pub id: usize,
    pub group: usize,
    pub latent_quality: f64,
    pub observation_count: u64,
    pub positive_count: u64,
}

impl SimMember {
    /// Posterior mean under a Beta(1, 1) prior; `None` until first observed.
    pub fn estimate(&self) -> Option<f64> {
        (self.observation_count > 0)
            .then(|| (self.positive_count as f64 + 1.0) / (self.observation_count as f64 + 2.0))
    }

    fn upper_bound(&self, z: f64) -> Option<f64> {
        let (a, b) = (
            self.positive_count as f64 + 1.0,
            (self.observation_count - self.positive_count) as f64 + 1.0,
        );
        let var = a * b / ((a + b).powi(2) * (a + b + 1.0));
        self.estimate().map(|m| m + z * var.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStep {
    pub group: String,
    pub impressions: u64,
    pub proportion: f64,
    pub cum_positives: u64,
}

/// One row per group per step. Step 0 is the seeded history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub groups: Vec<GroupStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub labels: Vec<String>,
    pub steps: Vec<StepRecord>,
}

impl SimState {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,group,impressions,proportion,cum_positives\n");
        for s in &self.steps {
            for g in &s.groups {
                let _ = writeln!(out, "{},{},{},{},{}", s.step, g.group, g.impressions, g.proportion, g.cum_positives);
            }
        }
        out
    }

    /// Builds a state from per-step impression counts, e.g. for summaries
    /// of externally recorded trajectories.
    pub fn from_counts(labels: &[&str], counts: &[Vec<u64>]) -> Self {
        let steps = counts
            .iter()
            .enumerate()
            .map(|(step, row)| {
                let total: u64 = row.iter().sum();
                StepRecord {
                    step,
                    groups: labels
                        .iter()
                        .zip(row)
                        .map(|(l, &c)| GroupStep {
                            group: l.to_string(),
                            impressions: c,
                            proportion: if total > 0 { c as f64 / total as f64 } else { 0.0 },
                            cum_positives: 0,
                        })
                        .collect(),
                }
            })
            .collect();
        Self {
            labels: labels.iter().map(|l| l.to_string()).collect(),
            steps,
        }
    }
}

fn record(step: usize, labels: &[String], impressions: &[u64], cum: &[u64]) -> StepRecord {
    let total: u64 = impressions.iter().sum();
    StepRecord {
        step,
        groups: labels
            .iter()
            .enumerate()
            .map(|(g, l)| GroupStep {
                group: l.clone(),
                impressions: impressions[g],
                proportion: if total > 0 { impressions[g] as f64 / total as f64 } else { 0.0 },
                cum_positives: cum[g],
            })
            .collect(),
    }
}

/// Indices of the `k` highest-ranked candidates; ties go to the lower id.
/// Members never observed have no estimate and rank after every observed one.
pub fn exploit_slate(members: &[SimMember], candidates: &[usize], k: usize, ucb: Option<f64>) -> Vec<usize> {
    let key = |i: usize| match ucb {
        Some(z) => members[i].upper_bound(z),
        None => members[i].estimate(),
    };
    let mut ranked = candidates.to_vec();
    ranked.sort_by(|&a, &b| match (key(a), key(b)) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.cmp(&b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    ranked.truncate(k);
    ranked
}

pub fn run_simulation(cfg: &SimConfig) -> Result<SimState, SimError> {
    let population = cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels: Vec<String> = cfg.groups.iter().map(|g| g.label.clone()).collect();
    let k_groups = labels.len();

    let mut members = Vec::with_capacity(population);
    for (g, spec) in cfg.groups.iter().enumerate() {
        let quality = Beta::new(spec.quality_alpha, spec.quality_beta)
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        let seeded = (spec.count as f64 * spec.seeded_fraction).round() as usize;
        for j in 0..spec.count {
            members.push(SimMember {
                id: members.len(),
                group: g,
                latent_quality: quality.sample(&mut rng),
                observation_count: 0,
                positive_count: 0,
            });
            let m = members.last_mut().expect("just pushed");
            if j < seeded {
                for _ in 0..cfg.initial_observations {
                    m.observation_count += 1;
                    m.positive_count += u64::from(rng.random::<f64>() < m.latent_quality);
                }
            }
        }
    }

    // ids must not encode the group, or id tie-breaks would favor one
    members.shuffle(&mut rng);
    for (i, m) in members.iter_mut().enumerate() {
        m.id = i;
    }

    let mut cum = vec![0u64; k_groups];
    let mut seeded_obs = vec![0u64; k_groups];
    for m in &members {
        cum[m.group] += m.positive_count;
        seeded_obs[m.group] += m.observation_count;
    }
    let mut steps = vec![record(0, &labels, &seeded_obs, &cum)];
    let pool = cfg.candidates_per_session.min(population);
    let ucb = cfg.confidence_ranking.then_some(cfg.confidence_z);

    for step in 1..=cfg.steps {
        let mut impressions = vec![0u64; k_groups];
        for _ in 0..cfg.sessions_per_step {
            let candidates: Vec<usize> = sample(&mut rng, population, pool).into_vec();
            let explore = rng.random::<f64>() < cfg.exploration_budget;
            let slate = if explore {
                let mut under: Vec<usize> = candidates
                    .iter()
                    .copied()
                    .filter(|&i| members[i].observation_count < cfg.observation_floor)
                    .collect();
                under.shuffle(&mut rng);
                under.truncate(cfg.slate_size);
                if under.len() < cfg.slate_size {
                    let rest: Vec<usize> = candidates.iter().copied().filter(|i| !under.contains(i)).collect();
                    let fill = exploit_slate(&members, &rest, cfg.slate_size - under.len(), ucb);
                    under.extend(fill);
                }
                under
            } else {
                exploit_slate(&members, &candidates, cfg.slate_size, ucb)
            };
            for i in slate {
                let m = &mut members[i];
                let positive = rng.random::<f64>() < m.latent_quality;
                m.observation_count += 1;
                m.positive_count += u64::from(positive);
                impressions[m.group] += 1;
                cum[m.group] += u64::from(positive);
            }
        }
        steps.push(record(step, &labels, &impressions, &cum));
    }
    Ok(SimState { labels, steps })
}

pub const DEFAULT_MIN_SHRINK_PP: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountGrowth {
    pub initial: f64,
    pub final_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub initial_proportions: BTreeMap<String, f64>,
    /// Mean over the final quarter of the steps.
    pub final_proportions: BTreeMap<String, f64>,
    pub initial_gap_pp: f64,
    pub final_gap_pp: f64,
    pub shrink_pp: f64,
    pub count_growth: BTreeMap<String, CountGrowth>,
    /// Max − min proportion per step, in percentage points.
    pub gap_trajectory: Vec<f64>,
    /// No group's count fell and the gap shrank.
    pub success: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

fn spread_pp(props: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = props.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = props.fold(f64::INFINITY, f64::min);
    100.0 * (max - min)
}

pub fn summarize_sim(s: &SimState, min_shrink_pp: f64) -> Result<SimSummary, SimError> {
    let first = s.steps.first().ok_or(SimError::Empty)?;
    let tail_len = (s.steps.len() / 4).max(1);
    let tail = &s.steps[s.steps.len() - tail_len..];
    let mean_over_tail = |g: usize, f: &dyn Fn(&GroupStep) -> f64| tail.iter().map(|r| f(&r.groups[g])).sum::<f64>() / tail_len as f64;

    let mut initial_proportions = BTreeMap::new();
    let mut final_proportions = BTreeMap::new();
    let mut count_growth = BTreeMap::new();
    for (g, label) in s.labels.iter().enumerate() {
        initial_proportions.insert(label.clone(), first.groups[g].proportion);
        final_proportions.insert(label.clone(), mean_over_tail(g, &|x| x.proportion));
        count_growth.insert(
            label.clone(),
            CountGrowth {
                initial: first.groups[g].impressions as f64,
                final_count: mean_over_tail(g, &|x| x.impressions as f64),
            },
        );
    }
    let initial_gap_pp = spread_pp(initial_proportions.values().copied());
    let final_gap_pp = spread_pp(final_proportions.values().copied());
    let shrink_pp = initial_gap_pp - final_gap_pp;
    let gap_trajectory = s
        .steps
        .iter()
        .map(|r| spread_pp(r.groups.iter().map(|g| g.proportion)))
        .collect();
    let no_count_fell = count_growth.values().all(|c| c.final_count >= c.initial);
    let mut flags = Vec::new();
    if shrink_pp < min_shrink_pp {
        flags.push("REINFORCING_STATUS_QUO".to_string());
    }
    Ok(SimSummary {
        initial_proportions,
        final_proportions,
        initial_gap_pp,
        final_gap_pp,
        shrink_pp,
        count_growth,
        gap_trajectory,
        success: no_count_fell && shrink_pp > 0.0,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(eps: f64, seed: u64) -> SimConfig {
        SimConfig {
            exploration_budget: eps,
            steps: 20,
            sessions_per_step: 200,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn seeded_split_is_75_25() {
        let s = run_simulation(&small(0.0, 1)).unwrap();
        let g = &s.steps[0].groups;
        assert!((g[0].proportion - 0.75).abs() < 1e-3, "{}", g[0].proportion);
    }

    #[test]
    fn impressions_fill_every_slate() {
        let cfg = small(0.05, 2);
        let s = run_simulation(&cfg).unwrap();
        for r in &s.steps[1..] {
            let total: u64 = r.groups.iter().map(|g| g.impressions).sum();
            assert_eq!(total as usize, cfg.slate_size * cfg.sessions_per_step);
            let p: f64 = r.groups.iter().map(|g| g.proportion).sum();
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_by_seed() {
        assert_eq!(run_simulation(&small(0.05, 3)).unwrap(), run_simulation(&small(0.05, 3)).unwrap());
    }

    #[test]
    fn slate_larger_than_pool() {
        let cfg = SimConfig {
            slate_size: 60,
            ..Default::default()
        };
        assert_eq!(run_simulation(&cfg).unwrap_err().code(), "SLATE_TOO_LARGE");
    }

    #[test]
    fn exploit_slate_is_top_k() {
        let members: Vec<SimMember> = (0..6)
            .map(|i| SimMember {
                id: i,
                group: 0,
                latent_quality: 0.5,
                observation_count: 10,
                positive_count: [3, 9, 1, 9, 5, 0][i],
            })
            .collect();
        assert_eq!(exploit_slate(&members, &[0, 1, 2, 3, 4, 5], 3, None), vec![1, 3, 4]);
    }

    #[test]
    fn exploit_slate_is_top_k_exhaustively() {
        // every 6-member population with counts in 0..=2 observations
        for code in 0..6u32.pow(6) {
            let members: Vec<SimMember> = (0..6)
                .map(|i| {
                    let c = (code / 6u32.pow(i)) % 6;
                    let (n, pos) = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)][c as usize];
                    SimMember {
                        id: i as usize,
                        group: 0,
                        latent_quality: 0.5,
                        observation_count: n,
                        positive_count: pos,
                    }
                })
                .collect();
            let slate = exploit_slate(&members, &[0, 1, 2, 3, 4, 5], 3, None);
            for &i in &slate {
                for j in (0..6).filter(|j| !slate.contains(j)) {
                    match (members[i].estimate(), members[j].estimate()) {
                        (Some(a), Some(b)) => assert!(a >= b, "{code}: {i} shown below {j}"),
                        (None, Some(_)) => panic!("{code}: unobserved {i} shown over {j}"),
                        _ => {}
                    }
                }
            }
        }
    }

    #[test]
    fn figure_endpoints() {
        let s = SimState::from_counts(&["M", "F"], &[vec![75, 25], vec![54, 46]]);
        let r = summarize_sim(&s, DEFAULT_MIN_SHRINK_PP).unwrap();
        assert!((r.initial_gap_pp - 50.0).abs() < 1e-9);
        assert!((r.final_gap_pp - 8.0).abs() < 1e-9);
        assert!((r.shrink_pp - 42.0).abs() < 1e-9);
        assert!(r.flags.is_empty());
    }

    #[test]
    fn count_criterion() {
        let s = SimState::from_counts(&["M", "F"], &[vec![75, 25], vec![75, 40]]);
        let r = summarize_sim(&s, DEFAULT_MIN_SHRINK_PP).unwrap();
        assert!(r.success);
        assert_eq!(r.count_growth["F"].final_count, 40.0);
    }

    #[test]
    fn flat_is_status_quo() {
        let s = SimState::from_counts(&["M", "F"], &[vec![75, 25], vec![75, 25], vec![75, 25]]);
        let r = summarize_sim(&s, DEFAULT_MIN_SHRINK_PP).unwrap();
        assert_eq!(r.flags, vec!["REINFORCING_STATUS_QUO".to_string()]);
        assert!(!r.success);
    }
}
