//! Origin-blind attacks on a search log.
//!
//! Every input here is an [`ObservedQuery`], which has no origin field, so
//! no attack can read ground truth.
//!
//! Flag probabilities come from a two-hypothesis posterior over the topic
//! the query classifies to. Under "generated" the topic is uniform over the
//! universe plus the unclassified bucket; under "user" it follows the
//! (smoothed) user profile. The prior of "generated" is the adversary's
//! estimate `X_est / (X_est + Y_est)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PoolSet;
use crate::querylog::ObservedQuery;
use crate::stats::entropy_bits;
use crate::text::fold;
use crate::timing::DEFAULT_SESSION_GAP;
use crate::topics::{classify, TopicId, TopicProfile, TopicUniverse};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SMOOTHING: f64 = 1e-3;
/// The adversary's belief that a user's next in-session query stays on topic.
pub const DEFAULT_USER_COHERENCE: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum AdversaryError {
    #[error("prior profile is empty")]
    EmptyProfile,
    #[error("similarity needs at least two logs, got {0}")]
    TooFewLogs(usize),
    #[error("verdict line {line}: {message}")]
    VerdictRecord { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    /// Flag probability per log position.
    pub per_query: Vec<f64>,
    pub threshold: f64,
    pub flagged: BTreeSet<usize>,
}

impl FilterVerdict {
    pub fn from_scores(per_query: Vec<f64>, threshold: f64) -> Self {
        let flagged = per_query
            .iter()
            .enumerate()
            .filter(|(_, &p)| p >= threshold)
            .map(|(i, _)| i)
            .collect();
        FilterVerdict {
            per_query,
            threshold,
            flagged,
        }
    }

    pub fn with_threshold(&self, threshold: f64) -> Self {
        FilterVerdict::from_scores(self.per_query.clone(), threshold)
    }

    /// Every distinct score as a threshold, plus one above the maximum.
    pub fn sweep(&self) -> Vec<FilterVerdict> {
        let mut ts: Vec<f64> = self.per_query.clone();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        let above = ts.last().map(|m| m + 1.0).unwrap_or(1.0);
        ts.push(above);
        ts.into_iter().map(|t| self.with_threshold(t)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Adversary<'a> {
    pub universe: &'a TopicUniverse,
    pub pools: &'a PoolSet,
    pub x_est: f64,
    pub y_est: f64,
    pub smoothing: f64,
    pub user_coherence: f64,
    pub session_gap: f64,
}

impl<'a> Adversary<'a> {
    /// Adversary with no count information (`X_est = Y_est`).
    pub fn new(universe: &'a TopicUniverse, pools: &'a PoolSet) -> Self {
        Adversary {
            universe,
            pools,
            x_est: 1.0,
            y_est: 1.0,
            smoothing: DEFAULT_SMOOTHING,
            user_coherence: DEFAULT_USER_COHERENCE,
            session_gap: DEFAULT_SESSION_GAP,
        }
    }

    pub fn with_estimates(mut self, x_est: u64, y_est: u64) -> Self {
        self.x_est = x_est as f64;
        self.y_est = y_est as f64;
        self
    }

    fn prior(&self) -> f64 {
        let total = self.x_est + self.y_est;
        if total > 0.0 {
            self.x_est / total
        } else {
            0.5
        }
    }

    fn categories(&self) -> f64 {
        self.universe.len() as f64 + 1.0
    }

    fn generated_likelihood(&self) -> f64 {
        1.0 / self.categories()
    }

    fn user_likelihood(&self, topic: TopicId, profile: &TopicProfile) -> f64 {
        if profile.is_empty() {
            return self.generated_likelihood();
        }
        (profile.weight(topic) + self.smoothing) / (1.0 + self.smoothing * self.categories())
    }

    fn posterior(&self, g: f64, u: f64) -> f64 {
        let pi = self.prior();
        let num = pi * g;
        let den = num + (1.0 - pi) * u;
        if den > 0.0 {
            num / den
        } else {
            pi
        }
    }

    pub fn topic_of(&self, query: &ObservedQuery) -> TopicId {
        classify(&query.text, self.universe, self.pools).topic
    }

    /// Attack I: flag probability of one query.
    pub fn attack1_single_query(&self, query: &ObservedQuery, profile: &TopicProfile) -> f64 {
        let topic = self.topic_of(query);
        self.posterior(self.generated_likelihood(), self.user_likelihood(topic, profile))
    }

    /// Profile the adversary learns from a log by classifying it.
    pub fn learn_log_profile(&self, log: &[ObservedQuery]) -> (Vec<TopicId>, TopicProfile) {
        let topics: Vec<TopicId> = log.iter().map(|q| self.topic_of(q)).collect();
        let mut counts: BTreeMap<TopicId, f64> = BTreeMap::new();
        for t in topics.iter().filter(|t| !t.is_unclassified()) {
            *counts.entry(*t).or_insert(0.0) += 1.0;
        }
        (topics, TopicProfile::from_counts(&counts, None))
    }

    /// Attack II scores: the per-query posterior under the profile learned
    /// from the log itself, extended with whether the previous query of the
    /// same search session shares the topic.
    pub fn attack2_scores(&self, log: &[ObservedQuery]) -> Vec<f64> {
        let (topics, profile) = self.learn_log_profile(log);
        let same_topic_by_chance: f64 = profile.weights.values().map(|w| w * w).sum();
        let s_g = same_topic_by_chance;
        let s_u = self.user_coherence.max(s_g);

        let mut order: Vec<usize> = (0..log.len()).collect();
        order.sort_by(|&a, &b| {
            log[a]
                .session_key
                .cmp(&log[b].session_key)
                .then(log[a].timestamp.partial_cmp(&log[b].timestamp).unwrap())
        });
        let mut session_feature: Vec<Option<bool>> = vec![None; log.len()];
        for w in order.windows(2) {
            let (p, c) = (w[0], w[1]);
            let same_session =
                log[p].session_key == log[c].session_key && log[c].timestamp - log[p].timestamp < self.session_gap;
            if same_session && !topics[p].is_unclassified() && !topics[c].is_unclassified() {
                session_feature[c] = Some(topics[p] == topics[c]);
            }
        }

        (0..log.len())
            .map(|i| {
                let mut g = self.generated_likelihood();
                let mut u = self.user_likelihood(topics[i], &profile);
                match session_feature[i] {
                    Some(true) => {
                        g *= s_g;
                        u *= s_u;
                    }
                    Some(false) => {
                        g *= 1.0 - s_g;
                        u *= 1.0 - s_u;
                    }
                    None => {}
                }
                self.posterior(g, u)
            })
            .collect()
    }

    /// Attack II: filter the whole log at a fixed threshold.
    pub fn attack2_filter_set(&self, log: &[ObservedQuery], threshold: f64) -> FilterVerdict {
        FilterVerdict::from_scores(self.attack2_scores(log), threshold)
    }

    /// Attack III: score new queries against a profile built earlier.
    pub fn attack3_profile_filter(
        &self,
        new_queries: &[ObservedQuery],
        prior_profile: &TopicProfile,
        threshold: f64,
    ) -> Result<FilterVerdict, AdversaryError> {
        if prior_profile.is_empty() {
            return Err(AdversaryError::EmptyProfile);
        }
        let scores = new_queries
            .iter()
            .map(|q| self.attack1_single_query(q, prior_profile))
            .collect();
        Ok(FilterVerdict::from_scores(scores, threshold))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BotFeatureVector {
    pub query_word_entropy: f64,
    pub keyword_length_entropy: f64,
    pub mean_terms_per_query: f64,
    pub duplicate_query_rate: f64,
    pub periodicity_score: f64,
    pub click_through_rate: f64,
    pub topic_entropy: f64,
}

impl BotFeatureVector {
    pub fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("query_word_entropy", self.query_word_entropy),
            ("keyword_length_entropy", self.keyword_length_entropy),
            ("mean_terms_per_query", self.mean_terms_per_query),
            ("duplicate_query_rate", self.duplicate_query_rate),
            ("periodicity_score", self.periodicity_score),
            ("click_through_rate", self.click_through_rate),
            ("topic_entropy", self.topic_entropy),
        ]
    }
}

/// Reads a `term TAB frequency` word-frequency table.
pub fn read_word_frequencies(text: &str) -> Result<BTreeMap<String, f64>, String> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (t, f) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: expected `term TAB frequency`", i + 1))?;
        let f: f64 = f
            .trim()
            .parse()
            .map_err(|_| format!("line {}: bad frequency `{f}`", i + 1))?;
        if !(f >= 0.0) {
            return Err(format!("line {}: negative frequency", i + 1));
        }
        *out.entry(fold(t)).or_insert(0.0) += f;
    }
    Ok(out)
}

/// Largest cosine similarity between the hourly activity series (1 when the
/// hour holds any query) and itself shifted by 1..=24 hours.
pub fn periodicity(timestamps: &[f64]) -> f64 {
    let Some(t0) = timestamps.iter().copied().reduce(f64::min) else {
        return 0.0;
    };
    let bins: Vec<usize> = timestamps.iter().map(|t| ((t - t0) / 3600.0).floor() as usize).collect();
    let n = bins.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut series = vec![0.0f64; n];
    for b in bins {
        series[b] = 1.0;
    }
    let mut best: f64 = 0.0;
    for lag in 1..=24usize {
        if lag >= n {
            break;
        }
        let (a, b) = (&series[..n - lag], &series[lag..]);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na > 0.0 && nb > 0.0 {
            best = best.max(dot / (na * nb));
        }
    }
    best.clamp(0.0, 1.0)
}

/// Behavioral and physical features of a log. Word surprisal uses the
/// frequency table when given (unseen words get half a count), else the
/// log's own word frequencies. Topic entropy needs a classifier and is 0
/// without one.
pub fn bot_features(
    log: &[ObservedQuery],
    word_freq: Option<&BTreeMap<String, f64>>,
    classifier: Option<(&TopicUniverse, &PoolSet)>,
) -> BotFeatureVector {
    let n = log.len().max(1) as f64;
    let words: Vec<String> = log.iter().flat_map(|q| q.terms.iter().map(|t| fold(t))).collect();

    let query_word_entropy = if words.is_empty() {
        0.0
    } else {
        let surprisal: f64 = match word_freq {
            Some(table) => {
                let total: f64 = table.values().sum::<f64>() + 0.5 * (table.len() as f64 + 1.0);
                words
                    .iter()
                    .map(|w| {
                        let f = table.get(w).copied().unwrap_or(0.0) + 0.5;
                        -(f / total).log2()
                    })
                    .sum()
            }
            None => {
                let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
                for w in &words {
                    *counts.entry(w.as_str()).or_insert(0.0) += 1.0;
                }
                let total = words.len() as f64;
                words.iter().map(|w| -(counts[w.as_str()] / total).log2()).sum()
            }
        };
        (surprisal / words.len() as f64).max(0.0)
    };

    let mut lengths: BTreeMap<usize, u64> = BTreeMap::new();
    let mut texts: BTreeMap<&str, u64> = BTreeMap::new();
    for q in log {
        *lengths.entry(q.text.chars().count()).or_insert(0) += 1;
        *texts.entry(q.text.as_str()).or_insert(0) += 1;
    }
    let duplicates: u64 = texts.values().filter(|&&c| c > 1).sum();

    let topic_entropy = match classifier {
        Some((universe, pools)) => {
            let mut counts: BTreeMap<TopicId, u64> = BTreeMap::new();
            for q in log {
                let t = classify(&q.text, universe, pools).topic;
                if !t.is_unclassified() {
                    *counts.entry(t).or_insert(0) += 1;
                }
            }
            entropy_bits(counts.into_values())
        }
        None => 0.0,
    };

    let timestamps: Vec<f64> = log.iter().map(|q| q.timestamp).collect();
    BotFeatureVector {
        query_word_entropy,
        keyword_length_entropy: entropy_bits(lengths.into_values()),
        mean_terms_per_query: words.len() as f64 / n,
        duplicate_query_rate: duplicates as f64 / n,
        periodicity_score: periodicity(&timestamps),
        click_through_rate: log.iter().filter(|q| !q.clicked_ranks.is_empty()).count() as f64 / n,
        topic_entropy,
    }
}

fn click_items(log: &[ObservedQuery]) -> BTreeMap<(String, u32), u64> {
    let mut items = BTreeMap::new();
    for q in log {
        if q.clicked_ranks.is_empty() {
            *items.entry((q.text.clone(), 0)).or_insert(0) += 1;
        }
        for &r in &q.clicked_ranks {
            *items.entry((q.text.clone(), r)).or_insert(0) += 1;
        }
    }
    items
}

/// Multiset Jaccard similarity of two logs over (query text, clicked rank)
/// items; a query without clicks contributes rank 0.
pub fn log_similarity(a: &[ObservedQuery], b: &[ObservedQuery]) -> f64 {
    let (ia, ib) = (click_items(a), click_items(b));
    let keys: BTreeSet<&(String, u32)> = ia.keys().chain(ib.keys()).collect();
    let (mut inter, mut union) = (0u64, 0u64);
    for k in keys {
        let (x, y) = (ia.get(k).copied().unwrap_or(0), ib.get(k).copied().unwrap_or(0));
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pairwise similarity matrix; the diagonal is 1.
pub fn sbotminer_similarity(logs: &[Vec<ObservedQuery>]) -> Result<Vec<Vec<f64>>, AdversaryError> {
    if logs.len() < 2 {
        return Err(AdversaryError::TooFewLogs(logs.len()));
    }
    let n = logs.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = log_similarity(&logs[i], &logs[j]);
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    Ok(m)
}

/// Plain Jaccard similarity of the distinct query texts of two logs.
pub fn query_set_jaccard(a: &[ObservedQuery], b: &[ObservedQuery]) -> f64 {
    let sa: BTreeSet<&str> = a.iter().map(|q| q.text.as_str()).collect();
    let sb: BTreeSet<&str> = b.iter().map(|q| q.text.as_str()).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Serializes a verdict: a `threshold TAB t` header, then
/// `position TAB score TAB flagged` per query.
pub fn write_verdict(verdict: &FilterVerdict) -> String {
    let mut out = format!("threshold\t{}\n", verdict.threshold);
    for (i, p) in verdict.per_query.iter().enumerate() {
        out.push_str(&format!("{i}\t{p}\t{}\n", u8::from(verdict.flagged.contains(&i))));
    }
    out
}

pub fn read_verdict(text: &str) -> Result<FilterVerdict, AdversaryError> {
    let err = |line: usize, message: String| AdversaryError::VerdictRecord { line, message };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.is_empty());
    let threshold = match lines.next() {
        Some((_, l)) => l
            .strip_prefix("threshold\t")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| err(1, "expected `threshold TAB value` header".into()))?,
        None => return Err(err(1, "empty verdict".into())),
    };
    let mut scores = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(err(i + 1, "expected 3 fields".into()));
        }
        if f[0].parse::<usize>().ok() != Some(scores.len()) {
            return Err(err(i + 1, format!("position `{}` out of sequence", f[0])));
        }
        let p: f64 = f[1].parse().map_err(|_| err(i + 1, format!("bad score `{}`", f[1])))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(err(i + 1, format!("score {p} outside [0, 1]")));
        }
        scores.push(p);
    }
    Ok(FilterVerdict::from_scores(scores, threshold))
}
