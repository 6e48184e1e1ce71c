//! Topic universe, query classification and topic profiles.
//!
//! The classifier is a weighted term-overlap stand-in: a query belongs to
//! the topic whose pool carries the most weight on the query's words.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PoolSet;
use crate::obfuscator::Query;
use crate::text::{fold, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TopicId(pub u32);

impl TopicId {
    /// Reserved id for queries no pool matches. Never part of a universe.
    pub const UNCLASSIFIED: TopicId = TopicId(0);

    pub fn is_unclassified(self) -> bool {
        self == Self::UNCLASSIFIED
    }
}

impl fmt::Display for TopicId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for TopicId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse().map(TopicId)
    }
}

#[derive(Debug, Error)]
pub enum TopicError {
    #[error("duplicate topic id {0}")]
    DuplicateId(TopicId),
    #[error("topic id 0 is reserved for unclassified queries")]
    ReservedId,
    #[error("topic {topic} references unknown parent {parent}")]
    UnknownParent { topic: TopicId, parent: TopicId },
    #[error("parent chain of topic {0} is cyclic")]
    Cycle(TopicId),
    #[error("topic {0} is not in the universe")]
    UnknownTopic(TopicId),
    #[error("requested {requested} topics but the universe has only {available}")]
    NotEnoughTopics { requested: usize, available: usize },
    #[error("requested {requested} topics, fewer than the {user} user topics")]
    FewerThanUserTopics { requested: usize, user: usize },
    #[error("universe record on line {line}: {message}")]
    Record { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub id: TopicId,
    pub name: String,
    pub parent: Option<TopicId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicUniverse {
    topics: Vec<Topic>,
    pub version: String,
}

const DEFAULT_ROOTS: [&str; 14] = [
    "Arts & Humanities",
    "Business & Economy",
    "Computers & Internet",
    "Education",
    "Entertainment",
    "Government",
    "Health",
    "News & Media",
    "Recreation & Sports",
    "Reference",
    "Regional",
    "Science",
    "Social Science",
    "Society & Culture",
];

// (name, parent index into DEFAULT_ROOTS)
const DEFAULT_MISC: [(&str, usize); 7] = [
    ("Small Business & B2B", 1),
    ("Shopping", 1),
    ("Military", 5),
    ("Politics", 5),
    ("Travel", 8),
    ("Religion & Spirituality", 13),
    ("Romance", 13),
];

impl TopicUniverse {
    pub fn new(topics: Vec<Topic>, version: impl Into<String>) -> Result<Self, TopicError> {
        let mut ids = BTreeSet::new();
        for t in &topics {
            if t.id.is_unclassified() {
                return Err(TopicError::ReservedId);
            }
            if !ids.insert(t.id) {
                return Err(TopicError::DuplicateId(t.id));
            }
        }
        let universe = TopicUniverse {
            topics,
            version: version.into(),
        };
        for t in &universe.topics {
            if let Some(p) = t.parent {
                if !ids.contains(&p) {
                    return Err(TopicError::UnknownParent { topic: t.id, parent: p });
                }
            }
            let mut cursor = t.parent;
            let mut steps = 0;
            while let Some(p) = cursor {
                steps += 1;
                if p == t.id || steps > universe.topics.len() {
                    return Err(TopicError::Cycle(t.id));
                }
                cursor = universe.get(p).and_then(|x| x.parent);
            }
        }
        Ok(universe)
    }

    /// Fourteen root directory categories plus seven miscellaneous
    /// sub-categories, ids 1..=21.
    pub fn default_universe() -> Self {
        let mut topics: Vec<Topic> = DEFAULT_ROOTS
            .iter()
            .enumerate()
            .map(|(i, name)| Topic {
                id: TopicId(i as u32 + 1),
                name: name.to_string(),
                parent: None,
            })
            .collect();
        for (j, (name, parent)) in DEFAULT_MISC.iter().enumerate() {
            topics.push(Topic {
                id: TopicId((DEFAULT_ROOTS.len() + j) as u32 + 1),
                name: name.to_string(),
                parent: Some(TopicId(*parent as u32 + 1)),
            });
        }
        TopicUniverse::new(topics, "directory-21").expect("default universe is valid")
    }

    pub fn topics(&self) -> &[Topic] {
        &self.topics
    }

    pub fn ids(&self) -> impl Iterator<Item = TopicId> + '_ {
        self.topics.iter().map(|t| t.id)
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    pub fn get(&self, id: TopicId) -> Option<&Topic> {
        self.topics.iter().find(|t| t.id == id)
    }

    pub fn contains(&self, id: TopicId) -> bool {
        self.get(id).is_some()
    }

    pub fn children(&self, id: TopicId) -> impl Iterator<Item = TopicId> + '_ {
        self.topics.iter().filter(move |t| t.parent == Some(id)).map(|t| t.id)
    }

    /// The topic itself and its direct sub-categories.
    pub fn subtree(&self, id: TopicId) -> BTreeSet<TopicId> {
        let mut set: BTreeSet<TopicId> = self.children(id).collect();
        if self.contains(id) {
            set.insert(id);
        }
        set
    }

    pub fn from_records<R: BufRead>(reader: R, version: &str) -> Result<Self, TopicError> {
        let mut topics = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: &str| TopicError::Record {
                line: i + 1,
                message: message.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(bad("expected `topic_id TAB name [TAB parent_id]`"));
            }
            let id: TopicId = fields[0].parse().map_err(|_| bad("topic id is not an integer"))?;
            let parent = match fields.get(2).map(|s| s.trim()) {
                None | Some("") => None,
                Some(p) => Some(p.parse::<TopicId>().map_err(|_| bad("parent id is not an integer"))?),
            };
            if fields[1].trim().is_empty() {
                return Err(bad("empty topic name"));
            }
            topics.push(Topic {
                id,
                name: fields[1].trim().to_string(),
                parent,
            });
        }
        TopicUniverse::new(topics, version)
    }

    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for t in &self.topics {
            match t.parent {
                Some(p) => out.push_str(&format!("{}\t{}\t{}\n", t.id, t.name, p)),
                None => out.push_str(&format!("{}\t{}\n", t.id, t.name)),
            }
        }
        out
    }
}

/// Normalized topic weights, optionally tied to the time window they were
/// learned over.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TopicProfile {
    pub weights: BTreeMap<TopicId, f64>,
    pub window: Option<(f64, f64)>,
}

impl TopicProfile {
    pub fn from_counts(counts: &BTreeMap<TopicId, f64>, window: Option<(f64, f64)>) -> Self {
        let total: f64 = counts.values().sum();
        let weights = if total > 0.0 {
            counts
                .iter()
                .filter(|(_, &c)| c > 0.0)
                .map(|(&t, &c)| (t, c / total))
                .collect()
        } else {
            BTreeMap::new()
        };
        TopicProfile { weights, window }
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, topic: TopicId) -> f64 {
        self.weights.get(&topic).copied().unwrap_or(0.0)
    }

    /// Topics with positive weight, in id order.
    pub fn topics(&self) -> Vec<TopicId> {
        self.weights.iter().filter(|(_, &w)| w > 0.0).map(|(&t, _)| t).collect()
    }

    pub fn to_records(&self) -> String {
        self.weights.iter().map(|(t, w)| format!("{t}\t{w}\n")).collect()
    }

    pub fn from_records<R: BufRead>(reader: R) -> Result<Self, TopicError> {
        let mut counts = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: &str| TopicError::Record {
                line: i + 1,
                message: message.to_string(),
            };
            let (t, w) = line.split_once('\t').ok_or_else(|| bad("expected `topic_id TAB weight`"))?;
            let t: TopicId = t.parse().map_err(|_| bad("topic id is not an integer"))?;
            let w: f64 = w.trim().parse().map_err(|_| bad("weight is not a number"))?;
            counts.insert(t, w);
        }
        Ok(TopicProfile::from_counts(&counts, None))
    }
}

/// A query text the user issued more than once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repetition {
    pub count: u32,
    pub topic: TopicId,
}

/// Per-topic keyword distributions, the n-gram length popularity of the
/// user's queries, and the repetition counts of re-issued queries.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KeywordFrequencyProfile {
    pub per_topic: BTreeMap<TopicId, BTreeMap<String, f64>>,
    pub ngram_popularity: BTreeMap<usize, f64>,
    /// Every query text the user repeated, most repeated first.
    pub repetitions: Vec<Repetition>,
    /// Number of queries the profile was learned from.
    pub sample_size: usize,
}

impl KeywordFrequencyProfile {
    pub fn learn(queries: &[Query]) -> Self {
        let mut per_topic: BTreeMap<TopicId, BTreeMap<String, f64>> = BTreeMap::new();
        let mut lengths: BTreeMap<usize, f64> = BTreeMap::new();
        let mut texts: BTreeMap<&str, (u32, TopicId)> = BTreeMap::new();
        for q in queries {
            let bucket = per_topic.entry(q.topic_id).or_default();
            for term in &q.terms {
                *bucket.entry(fold(term)).or_insert(0.0) += 1.0;
            }
            if !q.terms.is_empty() {
                *lengths.entry(q.terms.len()).or_insert(0.0) += 1.0;
            }
            texts.entry(q.text.as_str()).or_insert((0, q.topic_id)).0 += 1;
        }
        for dist in per_topic.values_mut() {
            normalize(dist);
        }
        per_topic.retain(|_, d| !d.is_empty());
        normalize(&mut lengths);
        let mut repetitions: Vec<Repetition> = texts
            .values()
            .filter(|(c, _)| *c >= 2)
            .map(|&(count, topic)| Repetition { count, topic })
            .collect();
        repetitions.sort_by(|a, b| b.count.cmp(&a.count).then(a.topic.cmp(&b.topic)));
        KeywordFrequencyProfile {
            per_topic,
            ngram_popularity: lengths,
            repetitions,
            sample_size: queries.len(),
        }
    }
}

fn normalize<K: Ord>(dist: &mut BTreeMap<K, f64>) {
    let total: f64 = dist.values().sum();
    if total > 0.0 {
        for v in dist.values_mut() {
            *v /= total;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub topic: TopicId,
    /// Pool weight mass matched by the query's words, in [0, 1].
    pub score: f64,
}

/// Assigns the topic whose pool gives the largest weight mass to the
/// query's distinct words. Ties go to the lowest topic id; no overlap at
/// all yields [`TopicId::UNCLASSIFIED`] with score 0. Topics outside the
/// universe are ignored.
pub fn classify(query_text: &str, universe: &TopicUniverse, pools: &PoolSet) -> Classification {
    let mut words: Vec<String> = tokenize(query_text).iter().map(|t| fold(t)).collect();
    words.sort();
    words.dedup();
    let mut mass: BTreeMap<TopicId, f64> = BTreeMap::new();
    for w in &words {
        for &(topic, weight) in pools.unigram_weights(w) {
            if universe.contains(topic) {
                *mass.entry(topic).or_insert(0.0) += weight;
            }
        }
    }
    let mut best = Classification {
        topic: TopicId::UNCLASSIFIED,
        score: 0.0,
    };
    // BTreeMap iteration is in id order, so strict > keeps the lowest id on ties
    for (topic, m) in mass {
        if m > best.score {
            best = Classification {
                topic,
                score: m.min(1.0),
            };
        }
    }
    best
}

/// Topic weights proportional to query counts over the trailing `window`
/// seconds (ending at the latest query). Unclassified queries and topics
/// outside the universe are ignored. `None` uses the whole history.
pub fn learn_profile(queries: &[Query], universe: &TopicUniverse, window: Option<f64>) -> TopicProfile {
    let Some(end) = queries.iter().map(|q| q.timestamp).reduce(f64::max) else {
        return TopicProfile::default();
    };
    let start = window.map(|w| end - w).unwrap_or(f64::NEG_INFINITY);
    let mut counts: BTreeMap<TopicId, f64> = BTreeMap::new();
    for q in queries {
        if q.timestamp < start || q.topic_id.is_unclassified() || !universe.contains(q.topic_id) {
            continue;
        }
        *counts.entry(q.topic_id).or_insert(0.0) += 1.0;
    }
    let first = queries
        .iter()
        .filter(|q| q.timestamp >= start)
        .map(|q| q.timestamp)
        .reduce(f64::min)
        .unwrap_or(end);
    TopicProfile::from_counts(&counts, Some((first, end)))
}

/// Frequency band of a topic weight: `ceil(-log2(w))`, so weight 1 is band
/// 0, (0.5, 1) band 1, (0.25, 0.5] band 2, and so on.
pub fn frequency_band(weight: f64) -> u32 {
    assert!(weight > 0.0 && weight <= 1.0, "weight out of range: {weight}");
    (-weight.log2()).ceil().max(0.0) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicSelection {
    /// User topics first (id order), then decoy topics in selection order.
    pub targets: Vec<TopicId>,
    /// Decoy topic -> the user topic whose frequency band it emulates.
    pub mirrors: BTreeMap<TopicId, TopicId>,
}

impl TopicSelection {
    /// Decoy weights copy the weight of the mirrored user topic; the result
    /// is renormalized.
    pub fn weights(&self, user: &TopicProfile) -> TopicProfile {
        let mut counts: BTreeMap<TopicId, f64> = user.weights.clone();
        for (decoy, mirrored) in &self.mirrors {
            counts.insert(*decoy, user.weight(*mirrored));
        }
        TopicProfile::from_counts(&counts, user.window)
    }

    /// Decoy weights for a stream with `ratio` decoys per user query,
    /// chosen so that in the merged stream each user topic and its mirrors
    /// carry equal weight and each group keeps the user topic's share.
    /// A user topic whose group share alone exceeds its merged share gets
    /// no extra decoys; the result is renormalized.
    pub fn equalized_weights(&self, user: &TopicProfile, ratio: f64) -> TopicProfile {
        let mut group_size: BTreeMap<TopicId, usize> = BTreeMap::new();
        for mirrored in self.mirrors.values() {
            *group_size.entry(*mirrored).or_insert(0) += 1;
        }
        let mut counts = BTreeMap::new();
        for (&t, &w) in &user.weights {
            let k = group_size.get(&t).copied().unwrap_or(0) as f64;
            let merged = (1.0 + ratio) * w / (1.0 + k);
            counts.insert(t, ((merged - w) / ratio).max(0.0));
        }
        for (decoy, mirrored) in &self.mirrors {
            let w = user.weight(*mirrored);
            let k = group_size[mirrored] as f64;
            counts.insert(*decoy, (1.0 + ratio) * w / (1.0 + k) / ratio);
        }
        counts.retain(|_, w| *w > 0.0);
        TopicProfile::from_counts(&counts, user.window)
    }

    pub fn decoy_topics(&self) -> impl Iterator<Item = TopicId> + '_ {
        self.mirrors.keys().copied()
    }
}

/// Chooses `n` target topics: every user topic plus `n - m` decoy topics
/// from the rest of the universe. Decoys are spread over the user's
/// frequency bands, heaviest band first, so each band gets a mirror before
/// any band gets a second one.
pub fn select_obfuscation_topics(
    user_profile: &TopicProfile,
    universe: &TopicUniverse,
    n: usize,
    seed: u64,
) -> Result<TopicSelection, TopicError> {
    let user_topics = user_profile.topics();
    for t in &user_topics {
        if !universe.contains(*t) {
            return Err(TopicError::UnknownTopic(*t));
        }
    }
    if n > universe.len() {
        return Err(TopicError::NotEnoughTopics {
            requested: n,
            available: universe.len(),
        });
    }
    if n < user_topics.len() {
        return Err(TopicError::FewerThanUserTopics {
            requested: n,
            user: user_topics.len(),
        });
    }

    // band -> user topics in it, heaviest first within the band
    let mut bands: BTreeMap<u32, Vec<TopicId>> = BTreeMap::new();
    for &t in &user_topics {
        bands.entry(frequency_band(user_profile.weight(t))).or_default().push(t);
    }
    for members in bands.values_mut() {
        members.sort_by(|a, b| {
            user_profile
                .weight(*b)
                .partial_cmp(&user_profile.weight(*a))
                .unwrap()
                .then(a.cmp(b))
        });
    }
    let band_list: Vec<&Vec<TopicId>> = bands.values().collect();

    let mut candidates: Vec<TopicId> = universe.ids().filter(|t| !user_topics.contains(t)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);

    let mut targets = user_topics.clone();
    let mut mirrors = BTreeMap::new();
    for (i, decoy) in candidates.into_iter().take(n - user_topics.len()).enumerate() {
        targets.push(decoy);
        if band_list.is_empty() {
            continue;
        }
        let band = band_list[i % band_list.len()];
        let round = i / band_list.len();
        mirrors.insert(decoy, band[round % band.len()]);
    }
    Ok(TopicSelection { targets, mirrors })
}
