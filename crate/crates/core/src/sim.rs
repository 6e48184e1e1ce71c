//! End-to-end simulation of one user with the obfuscator in the browser:
//! learn from a history period, then search for the evaluation period
//! while decoys run in the same browser session.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PoolSet;
use crate::mockengine::audit::AuditContext;
use crate::mockengine::{observed_queries, replay_in_process, MockEngine, RequestLogEntry};
use crate::obfuscator::{
    generate_decoys, learn_topic_correlation, ObfuscationPlan, ObfuscatorError, Origin, PlanMode, Query,
    DEFAULT_RATE,
};
use crate::querylog::{GroundTruthRecord, ObservedQuery};
use crate::sidechannel::{issue_query, ClickModel, EngineTemplate, RankBias, SearchTrace, SessionState, SideChannelError};
use crate::timing::{
    active_periods, learn_timing, sample_schedule, ScheduleRequest, TimingError, TimingProfile, DEFAULT_JITTER,
    DEFAULT_SESSION_GAP, WEEK_SECS,
};
use crate::topics::{learn_profile, KeywordFrequencyProfile, TopicId};
use crate::world::{UserActivity, UserConfig, UserModel, World, DEFAULT_EPOCH};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("history produced no queries")]
    EmptyHistory,
    #[error("rate must be finite and nonnegative, got {0}")]
    InvalidRate(f64),
    #[error(transparent)]
    Obfuscator(#[from] ObfuscatorError),
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    SideChannel(#[from] SideChannelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    /// Start of the evaluation period; history precedes it.
    pub start: f64,
    pub history_weeks: usize,
    pub weeks: usize,
    pub mode: PlanMode,
    /// Target count for topic-obfuscated plans.
    pub obfuscated_targets: usize,
    /// Decoys per hour, averaged over the evaluation period; 0 disables.
    pub rate: f64,
    /// Feeds per topic the decoy pools draw from, never the user's own.
    pub decoy_feeds_per_topic: usize,
    pub jitter: f64,
    pub session_gap: f64,
    pub user: UserConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            start: DEFAULT_EPOCH,
            history_weeks: 2,
            weeks: 1,
            mode: PlanMode::TopicExposed,
            obfuscated_targets: 6,
            rate: DEFAULT_RATE,
            decoy_feeds_per_topic: 48,
            jitter: DEFAULT_JITTER,
            session_gap: DEFAULT_SESSION_GAP,
            user: UserConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub user: UserModel,
    pub history: UserActivity,
    /// The user's own activity during the evaluation period.
    pub activity: UserActivity,
    pub timing: TimingProfile,
    pub plan: Option<ObfuscationPlan>,
    pub decoy_pools: PoolSet,
    pub decoys: Vec<Query>,
    /// User and decoy searches in issue order.
    pub traces: Vec<SearchTrace>,
    /// Periods in which the browser is open and decoys may run.
    pub active_periods: Vec<(f64, f64)>,
    pub template: EngineTemplate,
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub log: Vec<RequestLogEntry>,
    pub observed: Vec<ObservedQuery>,
}

/// Weight, in queries, of the history click-through rate.
const CLICK_PRIOR: f64 = 50.0;

fn derive(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Fraction of history queries that led to a click.
fn learned_click_rate(history: &UserActivity) -> f64 {
    if history.clicked.is_empty() {
        return 0.0;
    }
    history.clicked.iter().filter(|&&c| c).count() as f64 / history.clicked.len() as f64
}

pub fn simulate(world: &World, cfg: &SimConfig, template: &EngineTemplate) -> Result<Simulation, SimError> {
    if !(cfg.rate.is_finite() && cfg.rate >= 0.0) {
        return Err(SimError::InvalidRate(cfg.rate));
    }
    let user = UserModel::sample(world, cfg.user.clone(), derive(cfg.seed, 1));
    let mut used = HashSet::new();
    let history_start = cfg.start - cfg.history_weeks as f64 * WEEK_SECS;
    let history = user.simulate(history_start, cfg.history_weeks, derive(cfg.seed, 2), &mut used);
    if history.queries.is_empty() {
        return Err(SimError::EmptyHistory);
    }
    let activity = user.simulate(cfg.start, cfg.weeks, derive(cfg.seed, 3), &mut used);

    let timing = learn_timing(&history.queries, cfg.session_gap);
    let schedule_profile = TimingProfile {
        sessions: activity.sessions.clone(),
        ..timing.clone()
    };
    let horizon = cfg.weeks as f64 * WEEK_SECS;
    let request = ScheduleRequest {
        jitter: cfg.jitter,
        ..ScheduleRequest::new(cfg.start, horizon, cfg.rate)
    };
    let active = if activity.sessions.is_empty() {
        Vec::new()
    } else {
        active_periods(&schedule_profile, &request)?
    };

    let mut plan = None;
    let mut decoy_pools = PoolSet::default();
    let mut decoys = Vec::new();
    if cfg.rate > 0.0 && !activity.sessions.is_empty() {
        let profile = learn_profile(&history.queries, &world.universe, None);
        let keywords = KeywordFrequencyProfile::learn(&history.queries);
        let mut p = match cfg.mode {
            PlanMode::TopicExposed => ObfuscationPlan::topic_exposed(&profile, keywords),
            PlanMode::TopicObfuscated => {
                let user_per_week = history.queries.len() as f64 / cfg.history_weeks.max(1) as f64;
                let ratio = cfg.rate * WEEK_SECS / 3600.0 / user_per_week;
                ObfuscationPlan::topic_obfuscated(
                    &profile,
                    &world.universe,
                    cfg.obfuscated_targets,
                    ratio,
                    keywords,
                    derive(cfg.seed, 4),
                )?
            }
        };
        p.rate = cfg.rate;
        p.topic_correlation = learn_topic_correlation(&history.queries, cfg.session_gap);
        p.click_rate = learned_click_rate(&history);
        p.validate(profile.topics().len())?;

        // decoy feeds: same topics, never the feeds the user reads
        let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, 5));
        let mut choice: BTreeMap<TopicId, Vec<usize>> = BTreeMap::new();
        for (&t, &w) in &p.topic_weights.weights {
            if w <= 0.0 {
                continue;
            }
            let reading = user.reading.get(&t).cloned().unwrap_or_default();
            let n = world.feeds.get(&t).map(Vec::len).unwrap_or(0);
            let mut free: Vec<usize> = (0..n).filter(|i| !reading.contains(i)).collect();
            free.shuffle(&mut rng);
            free.truncate(cfg.decoy_feeds_per_topic);
            free.sort_unstable();
            choice.insert(t, free);
        }
        decoy_pools = world.pools_from(&choice);
        let schedule = sample_schedule(&schedule_profile, &request, derive(cfg.seed, 6))?;
        decoys = generate_decoys(&p, &schedule, &decoy_pools, derive(cfg.seed, 7))?;
        plan = Some(p);
    }

    let mut merged: Vec<(Query, bool)> = activity
        .queries
        .iter()
        .cloned()
        .zip(activity.clicked.iter().copied())
        .chain(decoys.iter().cloned().map(|q| (q, false)))
        .collect();
    merged.sort_by(|a, b| {
        a.0.timestamp
            .partial_cmp(&b.0.timestamp)
            .unwrap()
            .then((a.0.origin == Origin::Decoy).cmp(&(b.0.origin == Origin::Decoy)))
    });

    // decoy clicks follow the user's click-through as observed so far, with
    // the history rate standing in for CLICK_PRIOR earlier queries
    let prior_rate = plan.as_ref().map(|p| p.click_rate).unwrap_or(0.0);
    let (mut user_seen, mut user_clicked) = (0usize, 0usize);
    let mut session = SessionState::new(user.identity.clone());
    let mut traces = Vec::with_capacity(merged.len());
    for (i, (q, clicked)) in merged.iter().enumerate() {
        let seed = derive(cfg.seed, 1000 + i as u64);
        let trace = match q.origin {
            Origin::User => {
                let model = ClickModel {
                    rate: if *clicked { 1.0 } else { 0.0 },
                    rank_bias: RankBias::Zipf(1.5),
                };
                let mut t = issue_query(q, template, &mut session, &model, seed)?;
                for c in &mut t.clicks {
                    c.content_fetched = true;
                }
                user_seen += 1;
                user_clicked += usize::from(*clicked);
                t
            }
            Origin::Decoy => {
                let rate = (prior_rate * CLICK_PRIOR + user_clicked as f64) / (CLICK_PRIOR + user_seen as f64);
                let model = ClickModel {
                    rate,
                    rank_bias: RankBias::Zipf(1.5),
                };
                issue_query(q, template, &mut session, &model, seed)?
            }
        };
        traces.push(trace);
    }

    Ok(Simulation {
        user,
        history,
        activity,
        timing,
        plan,
        decoy_pools,
        decoys,
        traces,
        active_periods: active,
        template: template.clone(),
    })
}

impl Simulation {
    pub fn session_key(&self) -> &str {
        &self.user.identity.cookie_sid
    }

    pub fn ground_truth(&self) -> Vec<GroundTruthRecord> {
        self.traces
            .iter()
            .map(|t| GroundTruthRecord {
                timestamp: t.query.timestamp,
                session_key: t.session_key.clone(),
                text: t.query.text.clone(),
                origin: t.query.origin,
            })
            .collect()
    }

    pub fn origins(&self) -> Vec<Origin> {
        self.traces.iter().map(|t| t.query.origin).collect()
    }

    pub fn audit_context(&self) -> AuditContext {
        AuditContext {
            template: self.template.clone(),
            activity: [(self.session_key().to_string(), self.active_periods.clone())].into(),
        }
    }

    pub fn engine(&self) -> MockEngine {
        MockEngine::new(self.template.clone(), &self.decoy_pools)
    }

    pub fn replay_in_process(&self) -> Replay {
        let engine = self.engine();
        replay_in_process(&engine, &self.traces);
        let log = engine.log();
        let observed = observed_queries(&log);
        Replay { log, observed }
    }

    /// Decoys per hour over the evaluation period.
    pub fn decoy_rate(&self, weeks: usize) -> f64 {
        self.decoys.len() as f64 / (weeks.max(1) as f64 * WEEK_SECS / 3600.0)
    }
}
