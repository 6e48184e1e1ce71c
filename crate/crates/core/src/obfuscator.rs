//! Decoy query generation and the reasonable-doubt guarantee arithmetic.

use std::collections::{BTreeMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PoolSet;
use crate::timing::DEFAULT_SESSION_GAP;
use crate::topics::{
    select_obfuscation_topics, KeywordFrequencyProfile, TopicError, TopicId, TopicProfile, TopicUniverse,
};
use crate::text::tokenize;

/// Decoys per hour per engine.
pub const DEFAULT_RATE: f64 = 3.0;
pub const DEFAULT_CLICK_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Origin {
    User,
    Decoy,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::User => "user",
            Origin::Decoy => "decoy",
        }
    }

    pub fn parse(s: &str) -> Option<Origin> {
        match s {
            "user" => Some(Origin::User),
            "decoy" => Some(Origin::Decoy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub terms: Vec<String>,
    pub topic_id: TopicId,
    pub timestamp: f64,
    pub origin: Origin,
}

impl Query {
    pub fn new(text: impl Into<String>, topic_id: TopicId, timestamp: f64, origin: Origin) -> Self {
        let text = text.into();
        let terms = tokenize(&text);
        Query {
            text,
            terms,
            topic_id,
            timestamp,
            origin,
        }
    }
}

#[derive(Debug, Error)]
pub enum ObfuscatorError {
    #[error("epsilon {epsilon} must satisfy 0 < epsilon < p_ob = {p_ob}; the bound is infinite otherwise")]
    UnboundedEpsilon { epsilon: f64, p_ob: f64 },
    #[error("p_ob must lie in [0, 1], got {0}")]
    InvalidProbability(f64),
    #[error("epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),
    #[error("counts inconsistent: X + Y = {actual} but X_est + Y_est = {estimated}")]
    InconsistentCounts { actual: u64, estimated: u64 },
    #[error("reasonable doubt needs X_est + Y_est > 0")]
    EmptyEstimate,
    #[error("no keyword pool (or an empty one) for topic {0}")]
    EmptyPool(TopicId),
    #[error("schedule is not sorted")]
    UnsortedSchedule,
    #[error("rate must be positive, got {0}")]
    InvalidRate(f64),
    #[error("plan has no topic with positive weight")]
    NoTopics,
    #[error("topic-obfuscated plan needs more targets ({targets}) than user topics ({user})")]
    NotEnoughTargets { targets: usize, user: usize },
    #[error(transparent)]
    Topic(#[from] TopicError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    TopicExposed,
    TopicObfuscated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObfuscationPlan {
    pub mode: PlanMode,
    pub target_topics: Vec<TopicId>,
    /// Decoy-only topic -> the user topic it stands in for.
    #[serde(default)]
    pub mirrors: BTreeMap<TopicId, TopicId>,
    pub topic_weights: TopicProfile,
    /// Decoys per hour per engine.
    pub rate: f64,
    pub keyword_profile: KeywordFrequencyProfile,
    /// Probability that a decoy in the same session as the previous decoy
    /// reuses its topic instead of drawing a fresh one.
    pub topic_correlation: f64,
    pub click_rate: f64,
    /// Draw every non-repeated decoy text at most once per stream.
    pub fresh_keywords: bool,
    /// Least decoy count meeting the guarantee, and the random surplus on
    /// top of it, over the planning horizon.
    pub min_decoys: u64,
    pub surplus: u64,
}

impl ObfuscationPlan {
    /// Decoys follow the user's own topic weights.
    pub fn topic_exposed(user_profile: &TopicProfile, keyword_profile: KeywordFrequencyProfile) -> Self {
        ObfuscationPlan {
            mode: PlanMode::TopicExposed,
            target_topics: user_profile.topics(),
            mirrors: BTreeMap::new(),
            topic_weights: user_profile.clone(),
            rate: DEFAULT_RATE,
            keyword_profile,
            topic_correlation: 0.0,
            click_rate: DEFAULT_CLICK_RATE,
            fresh_keywords: true,
            min_decoys: 0,
            surplus: 0,
        }
    }

    /// Decoys spread over `n` targets: the user topics plus decoy topics
    /// mirroring their frequency bands. `decoy_ratio` is the expected
    /// number of decoys per user query.
    pub fn topic_obfuscated(
        user_profile: &TopicProfile,
        universe: &TopicUniverse,
        n: usize,
        decoy_ratio: f64,
        keyword_profile: KeywordFrequencyProfile,
        seed: u64,
    ) -> Result<Self, ObfuscatorError> {
        let user = user_profile.topics().len();
        if n <= user {
            return Err(ObfuscatorError::NotEnoughTargets { targets: n, user });
        }
        if !(decoy_ratio.is_finite() && decoy_ratio > 0.0) {
            return Err(ObfuscatorError::InvalidRate(decoy_ratio));
        }
        let selection = select_obfuscation_topics(user_profile, universe, n, seed)?;
        Ok(ObfuscationPlan {
            mode: PlanMode::TopicObfuscated,
            target_topics: selection.targets.clone(),
            mirrors: selection.mirrors.clone(),
            topic_weights: selection.equalized_weights(user_profile, decoy_ratio),
            ..ObfuscationPlan::topic_exposed(user_profile, keyword_profile)
        })
    }

    pub fn validate(&self, user_topic_count: usize) -> Result<(), ObfuscatorError> {
        if !(self.rate > 0.0) {
            return Err(ObfuscatorError::InvalidRate(self.rate));
        }
        if self.mode == PlanMode::TopicObfuscated && self.target_topics.len() <= user_topic_count {
            return Err(ObfuscatorError::NotEnoughTargets {
                targets: self.target_topics.len(),
                user: user_topic_count,
            });
        }
        if self.topic_weights.is_empty() {
            return Err(ObfuscatorError::NoTopics);
        }
        Ok(())
    }
}

/// Chance that two consecutive same-session queries share a topic beyond
/// what independent draws from the profile would give, in [0, 1].
pub fn learn_topic_correlation(queries: &[Query], session_gap: f64) -> f64 {
    let mut qs: Vec<&Query> = queries.iter().filter(|q| !q.topic_id.is_unclassified()).collect();
    qs.sort_by(|a, b| a.timestamp.partial_cmp(&b.timestamp).unwrap());
    let (mut pairs, mut same) = (0u64, 0u64);
    let mut counts: BTreeMap<TopicId, f64> = BTreeMap::new();
    for q in &qs {
        *counts.entry(q.topic_id).or_insert(0.0) += 1.0;
    }
    for w in qs.windows(2) {
        if w[1].timestamp - w[0].timestamp < session_gap {
            pairs += 1;
            if w[0].topic_id == w[1].topic_id {
                same += 1;
            }
        }
    }
    if pairs == 0 {
        return 0.0;
    }
    let profile = TopicProfile::from_counts(&counts, None);
    let chance: f64 = profile.weights.values().map(|w| w * w).sum();
    if chance >= 1.0 {
        return 0.0;
    }
    let observed = same as f64 / pairs as f64;
    ((observed - chance) / (1.0 - chance)).clamp(0.0, 1.0)
}

struct TopicSampler<'a> {
    terms: Vec<&'a str>,
    index: WeightedIndex<f64>,
    weights: Vec<f64>,
}

impl<'a> TopicSampler<'a> {
    fn draw(&mut self, rng: &mut ChaCha8Rng, used: Option<&HashSet<&'a str>>) -> &'a str {
        let term = self.terms[self.index.sample(rng)];
        let Some(used) = used else { return term };
        if !used.contains(term) {
            return term;
        }
        // drop consumed terms and retry; exhausted pools fall back to repeats
        let fresh: Vec<(usize, f64)> = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, &w)| (i, if used.contains(self.terms[i]) { 0.0 } else { w }))
            .collect();
        match WeightedIndex::new(fresh.iter().map(|(_, w)| *w)) {
            Ok(idx) => {
                self.weights = fresh.into_iter().map(|(_, w)| w).collect();
                self.index = idx;
                self.terms[self.index.sample(rng)]
            }
            Err(_) => term,
        }
    }
}

fn build_samplers<'a>(
    plan: &ObfuscationPlan,
    pools: &'a PoolSet,
) -> Result<(Vec<TopicId>, WeightedIndex<f64>, BTreeMap<TopicId, TopicSampler<'a>>), ObfuscatorError> {
    let topics: Vec<(TopicId, f64)> = plan
        .topic_weights
        .weights
        .iter()
        .filter(|(_, &w)| w > 0.0)
        .map(|(&t, &w)| (t, w))
        .collect();
    if topics.is_empty() {
        return Err(ObfuscatorError::NoTopics);
    }
    let popularity = &plan.keyword_profile.ngram_popularity;
    let mut samplers = BTreeMap::new();
    for &(topic, _) in &topics {
        let pool = pools
            .get(topic)
            .filter(|p| !p.is_empty())
            .ok_or(ObfuscatorError::EmptyPool(topic))?;
        let lengths: Vec<usize> = pool.entries.iter().map(|(t, _)| tokenize(t).len()).collect();
        // mass of the pool at each n-gram length, so reweighting hits the
        // user's length distribution rather than multiplying into it
        let mut mass: BTreeMap<usize, f64> = BTreeMap::new();
        for ((_, w), &n) in pool.entries.iter().zip(&lengths) {
            *mass.entry(n).or_insert(0.0) += w;
        }
        let reweight = |n: usize| -> f64 {
            if popularity.is_empty() {
                1.0
            } else {
                popularity.get(&n).copied().unwrap_or(0.0) / mass[&n]
            }
        };
        let mut weights: Vec<f64> = pool
            .entries
            .iter()
            .zip(&lengths)
            .map(|((_, w), &n)| w * reweight(n))
            .collect();
        if weights.iter().all(|&w| w <= 0.0) {
            // no overlap with the user's lengths: use the raw pool
            weights = pool.entries.iter().map(|(_, w)| *w).collect();
        }
        let index = WeightedIndex::new(&weights).map_err(|_| ObfuscatorError::EmptyPool(topic))?;
        samplers.insert(
            topic,
            TopicSampler {
                terms: pool.entries.iter().map(|(t, _)| t.as_str()).collect(),
                index,
                weights,
            },
        );
    }
    let ids: Vec<TopicId> = topics.iter().map(|(t, _)| *t).collect();
    let index = WeightedIndex::new(topics.iter().map(|(_, w)| *w)).map_err(|_| ObfuscatorError::NoTopics)?;
    Ok((ids, index, samplers))
}

/// One decoy per schedule timestamp.
///
/// Every repetition in the keyword profile is replayed, rescaled to the
/// stream length, on one designated decoy text. The other decoys take
/// topics from the plan weights net of those blocks, with same-session
/// reuse at the plan's topic correlation. Texts are single pool n-grams
/// reweighted toward the user's n-gram length popularity.
pub fn generate_decoys(
    plan: &ObfuscationPlan,
    schedule: &[f64],
    pools: &PoolSet,
    seed: u64,
) -> Result<Vec<Query>, ObfuscatorError> {
    if schedule.windows(2).any(|w| w[0] > w[1]) {
        return Err(ObfuscatorError::UnsortedSchedule);
    }
    let (topic_ids, topic_index, mut samplers) = build_samplers(plan, pools)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = schedule.len();
    let rho = plan.topic_correlation.clamp(0.0, 1.0);

    let profile = &plan.keyword_profile;
    let mut free: Vec<usize> = (0..n).collect();
    free.shuffle(&mut rng);

    // repeated texts first: each user repetition is replayed on one decoy
    // text, in the repeated query's own topic when the plan exposes it
    let mut blocks: Vec<(Vec<usize>, TopicId)> = Vec::new();
    if profile.sample_size > 0 {
        for rep in &profile.repetitions {
            let scaled = (rep.count as f64 * n as f64 / profile.sample_size as f64).round() as usize;
            if scaled < 2 || scaled > free.len() {
                continue;
            }
            let topic = if plan.mode == PlanMode::TopicExposed && samplers.contains_key(&rep.topic) {
                rep.topic
            } else {
                topic_ids[topic_index.sample(&mut rng)]
            };
            blocks.push((free.split_off(free.len() - scaled), topic));
        }
    }

    // the remaining slots make up each topic's share of the whole stream
    let repeated: usize = blocks.iter().map(|(s, _)| s.len()).sum();
    let mut residual: Vec<f64> = topic_ids.iter().map(|t| plan.topic_weights.weight(*t) * n as f64).collect();
    for (slots, topic) in &blocks {
        let k = topic_ids.iter().position(|t| t == topic).expect("block topic is planned");
        residual[k] -= slots.len() as f64;
    }
    let residual_index = if repeated < n {
        WeightedIndex::new(residual.iter().map(|r| r.max(0.0))).ok()
    } else {
        None
    };
    let fresh_index = residual_index.as_ref().unwrap_or(&topic_index);

    // fresh topics as a correlated chain over the schedule
    let mut topics: Vec<TopicId> = Vec::with_capacity(n);
    for (i, &t) in schedule.iter().enumerate() {
        let reuse = i > 0 && t - schedule[i - 1] < DEFAULT_SESSION_GAP && rng.gen::<f64>() < rho;
        topics.push(if reuse { topics[i - 1] } else { topic_ids[fresh_index.sample(&mut rng)] });
    }

    let mut texts: Vec<Option<&str>> = vec![None; n];
    let mut used: HashSet<&str> = HashSet::new();
    for (slots, topic) in blocks {
        let sampler = samplers.get_mut(&topic).expect("sampler per topic");
        let text = sampler.draw(&mut rng, plan.fresh_keywords.then_some(&used));
        used.insert(text);
        for s in slots {
            topics[s] = topic;
            texts[s] = Some(text);
        }
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let text = match texts[i] {
            Some(t) => t,
            None => {
                let sampler = samplers.get_mut(&topics[i]).expect("sampler per topic");
                let t = sampler.draw(&mut rng, plan.fresh_keywords.then_some(&used));
                used.insert(t);
                t
            }
        };
        out.push(Query::new(text, topics[i], schedule[i], Origin::Decoy));
    }
    Ok(out)
}

/// Counts and probabilities behind the reasonable-doubt guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeParams {
    pub y: u64,
    pub x: u64,
    pub y_est: u64,
    pub x_est: u64,
    pub p_ob: f64,
    pub epsilon: f64,
}

impl GuaranteeParams {
    pub fn new(y: u64, x: u64, y_est: u64, x_est: u64, p_ob: f64, epsilon: f64) -> Result<Self, ObfuscatorError> {
        if !(0.0..=1.0).contains(&p_ob) {
            return Err(ObfuscatorError::InvalidProbability(p_ob));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(ObfuscatorError::InvalidEpsilon(epsilon));
        }
        if x + y != x_est + y_est {
            return Err(ObfuscatorError::InconsistentCounts {
                actual: x + y,
                estimated: x_est + y_est,
            });
        }
        Ok(GuaranteeParams {
            y,
            x,
            y_est,
            x_est,
            p_ob,
            epsilon,
        })
    }

    /// The adversary that assumes a single user query and certain
    /// obfuscation: `Y_est = 1`, `p_ob = 1`.
    pub fn conservative(y: u64, x: u64, epsilon: f64) -> Result<Self, ObfuscatorError> {
        let total = x + y;
        let y_est = total.min(1);
        GuaranteeParams::new(y, x, y_est, total - y_est, 1.0, epsilon)
    }
}

/// `P(A and Ob) = p_ob * X_est / (X_est + Y_est)`.
pub fn reasonable_doubt(params: &GuaranteeParams) -> Result<f64, ObfuscatorError> {
    let total = params.x_est + params.y_est;
    if total == 0 {
        return Err(ObfuscatorError::EmptyEstimate);
    }
    Ok(params.p_ob * params.x_est as f64 / total as f64)
}

/// Least decoy count `X` with `(X + Y - Y_est) / (X + Y) * p_ob >= epsilon`,
/// i.e. `max(0, ceil(Y_est * p_ob / (p_ob - epsilon) - Y))`.
pub fn min_decoys(y_est: u64, p_ob: f64, epsilon: f64, y: u64) -> Result<u64, ObfuscatorError> {
    if !(p_ob > 0.0 && p_ob <= 1.0) {
        return Err(ObfuscatorError::InvalidProbability(p_ob));
    }
    if !(epsilon > 0.0) || epsilon >= p_ob {
        return Err(ObfuscatorError::UnboundedEpsilon { epsilon, p_ob });
    }
    if y_est == 0 {
        return Ok(0);
    }
    let bound = y_est as f64 * p_ob / (p_ob - epsilon) - y as f64;
    // absorb rounding noise when the bound is an exact integer
    let x = (bound - 1e-9 * bound.abs().max(1.0)).ceil();
    Ok(if x <= 0.0 { 0 } else { x as u64 })
}

/// Plans decoys for a horizon like the user's history: the guarantee
/// minimum plus a seeded surplus in `[0, X_min]`, never below the default
/// rate. Topic weights, keyword profile and topic correlation are learned
/// from the history.
pub fn plan_overhead(
    user_history: &[Query],
    epsilon: f64,
    p_ob: f64,
    adversary_y_est: u64,
    seed: u64,
) -> Result<ObfuscationPlan, ObfuscatorError> {
    let y = user_history.len() as u64;
    let x_min = min_decoys(adversary_y_est, p_ob, epsilon, y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let surplus = rng.gen_range(0..=x_min);

    let mut counts: BTreeMap<TopicId, f64> = BTreeMap::new();
    for q in user_history.iter().filter(|q| !q.topic_id.is_unclassified()) {
        *counts.entry(q.topic_id).or_insert(0.0) += 1.0;
    }
    let first = user_history.iter().map(|q| q.timestamp).reduce(f64::min);
    let last = user_history.iter().map(|q| q.timestamp).reduce(f64::max);
    let window = first.zip(last);
    let profile = TopicProfile::from_counts(&counts, window);
    let hours = window.map(|(a, b)| (b - a) / 3600.0).unwrap_or(0.0).max(1.0);

    let mut plan = ObfuscationPlan::topic_exposed(&profile, KeywordFrequencyProfile::learn(user_history));
    plan.rate = DEFAULT_RATE.max((x_min + surplus) as f64 / hours);
    plan.topic_correlation = learn_topic_correlation(user_history, DEFAULT_SESSION_GAP);
    plan.min_decoys = x_min;
    plan.surplus = surplus;
    Ok(plan)
}
