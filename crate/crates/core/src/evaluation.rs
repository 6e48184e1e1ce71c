//! Scoring of adversary verdicts against ground truth, and the interest
//! profile experiment.
//!
//! Orientation: the positive class is "flagged as generated". `tp` counts
//! decoys flagged, `fp` user queries flagged, `tn` user queries kept and
//! `fn_` decoys kept, so `tnr = tn / (tn + fn_)` is the share of user
//! queries among the queries that survive the filter.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::FilterVerdict;
use crate::corpus::{build_tfidf_pool, CorpusError, PoolSet, DEFAULT_RARE_QUANTILE};
use crate::mockengine::{observed_queries, replay_in_process, MockEngine, MockProfiler};
use crate::obfuscator::{generate_decoys, GuaranteeParams, ObfuscationPlan, ObfuscatorError, Origin};
use crate::sidechannel::{issue_query, BrowserIdentity, ClickModel, EngineTemplate, SessionState, SideChannelError};
use crate::timing::{sample_schedule, ScheduleFallback, ScheduleRequest, TimingError, TimingProfile};
use crate::topics::{TopicId, TopicProfile, TopicUniverse};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("verdict covers {verdict} queries but ground truth has {truth}")]
    LengthMismatch { verdict: usize, truth: usize },
    #[error("no query survives the filter (Tn + Fn = 0)")]
    NothingKept,
    #[error("targeted topics have an empty subtree")]
    EmptySubtree,
    #[error("inferred interest set is empty")]
    EmptyInferred,
    #[error("threshold sweep is empty")]
    EmptySweep,
    #[error("beta must lie in (0, 1), got {0}")]
    InvalidBeta(f64),
    #[error("experiment needs {needed} candidate topics, found {found}")]
    NotEnoughTopics { needed: usize, found: usize },
    #[error(transparent)]
    Obfuscator(#[from] ObfuscatorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    SideChannel(#[from] SideChannelError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Fraction of user queries flagged (dropped).
    pub fn user_drop_rate(&self) -> Option<f64> {
        let users = self.fp + self.tn;
        (users > 0).then(|| self.fp as f64 / users as f64)
    }

    /// Fraction of flagged queries that are decoys.
    pub fn decoy_precision(&self) -> Option<f64> {
        let flagged = self.tp + self.fp;
        (flagged > 0).then(|| self.tp as f64 / flagged as f64)
    }

    /// Fraction of decoys flagged.
    pub fn decoy_recall(&self) -> Option<f64> {
        let decoys = self.tp + self.fn_;
        (decoys > 0).then(|| self.tp as f64 / decoys as f64)
    }
}

pub fn confusion(verdict: &FilterVerdict, truth: &[Origin]) -> Result<ConfusionCounts, EvalError> {
    if verdict.per_query.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            verdict: verdict.per_query.len(),
            truth: truth.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (i, origin) in truth.iter().enumerate() {
        let flagged = verdict.flagged.contains(&i);
        match (origin, flagged) {
            (Origin::Decoy, true) => c.tp += 1,
            (Origin::User, true) => c.fp += 1,
            (Origin::User, false) => c.tn += 1,
            (Origin::Decoy, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn tnr(counts: &ConfusionCounts) -> Result<f64, EvalError> {
    let kept = counts.tn + counts.fn_;
    if kept == 0 {
        return Err(EvalError::NothingKept);
    }
    Ok(counts.tn as f64 / kept as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResiliencyPoint {
    pub threshold: f64,
    /// Fraction of user queries dropped.
    pub alpha: f64,
    pub tnr: Option<f64>,
    pub decoy_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResiliencyCurve {
    /// Ordered by nondecreasing alpha.
    pub points: Vec<ResiliencyPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resiliency {
    /// Least user-drop fraction among operating points with TNR >= beta;
    /// `None` when no operating point reaches beta.
    pub alpha: Option<f64>,
    pub curve: ResiliencyCurve,
}

pub fn resiliency(verdicts: &[FilterVerdict], truth: &[Origin], beta: f64) -> Result<Resiliency, EvalError> {
    if verdicts.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(EvalError::InvalidBeta(beta));
    }
    let mut points = Vec::with_capacity(verdicts.len());
    for v in verdicts {
        let c = confusion(v, truth)?;
        points.push(ResiliencyPoint {
            threshold: v.threshold,
            alpha: c.user_drop_rate().unwrap_or(0.0),
            tnr: tnr(&c).ok(),
            decoy_precision: c.decoy_precision(),
        });
    }
    points.sort_by(|a, b| a.alpha.partial_cmp(&b.alpha).unwrap().then(b.threshold.partial_cmp(&a.threshold).unwrap()));
    let alpha = points
        .iter()
        .filter(|p| p.tnr.is_some_and(|t| t >= beta))
        .map(|p| p.alpha)
        .reduce(f64::min);
    Ok(Resiliency {
        alpha,
        curve: ResiliencyCurve { points },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoubtOutcome {
    /// `(log position, attained)` for every user query.
    pub per_query: Vec<(usize, bool)>,
    pub all: bool,
}

/// Per user query, whether `P(A_q) * p_ob >= epsilon`.
pub fn doubt_attained(
    verdict: &FilterVerdict,
    truth: &[Origin],
    params: &GuaranteeParams,
) -> Result<DoubtOutcome, EvalError> {
    if verdict.per_query.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            verdict: verdict.per_query.len(),
            truth: truth.len(),
        });
    }
    let per_query: Vec<(usize, bool)> = truth
        .iter()
        .enumerate()
        .filter(|(_, o)| **o == Origin::User)
        .map(|(i, _)| (i, verdict.per_query[i] * params.p_ob >= params.epsilon))
        .collect();
    let all = per_query.iter().all(|(_, a)| *a);
    Ok(DoubtOutcome { per_query, all })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProfileComparison {
    pub inferred_interests: BTreeSet<TopicId>,
    pub targeted_topics: BTreeSet<TopicId>,
}

impl ProfileComparison {
    pub fn targeted_subtree(&self, universe: &TopicUniverse) -> BTreeSet<TopicId> {
        self.targeted_topics.iter().flat_map(|&t| universe.subtree(t)).collect()
    }
}

/// Share of the targeted subtree that shows up in the inferred profile.
pub fn impact(comparison: &ProfileComparison, universe: &TopicUniverse) -> Result<f64, EvalError> {
    let subtree = comparison.targeted_subtree(universe);
    if subtree.is_empty() {
        return Err(EvalError::EmptySubtree);
    }
    let hit = comparison.inferred_interests.intersection(&subtree).count();
    Ok(hit as f64 / subtree.len() as f64)
}

/// Share of the inferred profile that lies in the targeted subtree.
pub fn precision(comparison: &ProfileComparison, universe: &TopicUniverse) -> Result<f64, EvalError> {
    if comparison.inferred_interests.is_empty() {
        return Err(EvalError::EmptyInferred);
    }
    let subtree = comparison.targeted_subtree(universe);
    let hit = comparison.inferred_interests.intersection(&subtree).count();
    Ok(hit as f64 / comparison.inferred_interests.len() as f64)
}

/// Rounds half away from zero at two decimals, absorbing binary noise so
/// that e.g. 0.435 rounds to 0.44.
pub fn round2(x: f64) -> f64 {
    let scaled = x * 100.0;
    let nudged = scaled + scaled.signum() * 1e-9;
    nudged.round() / 100.0
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub tests: usize,
    pub topics_per_test: usize,
    pub query_count: usize,
    pub rate_per_minute: f64,
    pub rare_quantile: f64,
    pub start: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            tests: 8,
            topics_per_test: 2,
            query_count: 180,
            rate_per_minute: 3.0,
            rare_quantile: DEFAULT_RARE_QUANTILE,
            start: 1_325_462_400.0,
        }
    }
}

/// Runs each test as a fresh profile: pick random root topics, build
/// TF-IDF pools for their subtrees from `documents`, send the decoys
/// through the mock engine, and let the profiler read the engine's log.
pub fn mock_profile_experiment(
    cfg: &ExperimentConfig,
    documents: &BTreeMap<TopicId, Vec<String>>,
    universe: &TopicUniverse,
    profiler: &MockProfiler,
    template: &EngineTemplate,
    seed: u64,
) -> Result<Vec<ProfileComparison>, EvalError> {
    let roots: Vec<TopicId> = universe
        .topics()
        .iter()
        .filter(|t| t.parent.is_none())
        .map(|t| t.id)
        .filter(|&t| universe.subtree(t).iter().all(|s| documents.get(s).is_some_and(|d| !d.is_empty())))
        .collect();
    if roots.len() < cfg.topics_per_test {
        return Err(EvalError::NotEnoughTopics {
            needed: cfg.topics_per_test,
            found: roots.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cfg.tests);
    for test in 0..cfg.tests {
        let targeted: BTreeSet<TopicId> = roots.choose_multiple(&mut rng, cfg.topics_per_test).copied().collect();
        let subtree: BTreeSet<TopicId> = targeted.iter().flat_map(|&t| universe.subtree(t)).collect();
        let mut pools = PoolSet::default();
        for &t in &subtree {
            pools.insert(build_tfidf_pool(&documents[&t], t, cfg.rare_quantile)?);
        }
        let counts: BTreeMap<TopicId, f64> = subtree.iter().map(|&t| (t, 1.0)).collect();
        let mut plan = ObfuscationPlan::topic_exposed(&TopicProfile::from_counts(&counts, None), Default::default());
        plan.rate = cfg.rate_per_minute * 60.0;

        let horizon = cfg.query_count as f64 / cfg.rate_per_minute * 60.0;
        let request = ScheduleRequest {
            fallback: ScheduleFallback::Uniform,
            ..ScheduleRequest::new(cfg.start, horizon, plan.rate)
        };
        let test_seed = seed ^ (test as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut schedule = sample_schedule(&TimingProfile::default(), &request, test_seed)?;
        schedule.truncate(cfg.query_count);
        let decoys = generate_decoys(&plan, &schedule, &pools, test_seed)?;

        let engine = MockEngine::new(template.clone(), &pools);
        let mut session = SessionState::new(BrowserIdentity {
            user_agent: "Mozilla/5.0 (Windows NT 6.1; rv:10.0) Gecko/20100101 Firefox/10.0".into(),
            accept_language: "en-US,en;q=0.5".into(),
            cookie_sid: format!("profile{test}"),
        });
        let clicks = ClickModel::default();
        let mut traces = Vec::with_capacity(decoys.len());
        for (i, q) in decoys.iter().enumerate() {
            traces.push(issue_query(q, template, &mut session, &clicks, test_seed.wrapping_add(i as u64))?);
        }
        replay_in_process(&engine, &traces);
        let observed = observed_queries(&engine.log());
        let inferred = profiler.infer(observed.iter().map(|q| q.text.as_str()));
        out.push(ProfileComparison {
            inferred_interests: inferred,
            targeted_topics: targeted,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub test_id: String,
    pub value: f64,
}

pub fn write_metrics(records: &[MetricRecord]) -> String {
    records
        .iter()
        .map(|r| format!("{}\t{}\t{}\n", r.metric, r.test_id, r.value))
        .collect()
}

pub fn read_metrics(text: &str) -> Result<Vec<MetricRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(format!("metrics line {}: expected 3 fields", i + 1));
        }
        let value = f[2]
            .parse()
            .map_err(|_| format!("metrics line {}: bad value `{}`", i + 1, f[2]))?;
        out.push(MetricRecord {
            metric: f[0].to_string(),
            test_id: f[1].to_string(),
            value,
        });
    }
    Ok(out)
}
