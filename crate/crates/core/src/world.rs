//! Seeded synthetic world: a topic directory of news feeds built from
//! pseudo-words, and a user model that searches for what it reads.
//!
//! Every story entity (the capitalized names in titles) is minted once for
//! the whole world, so n-grams drawn from two different feeds never
//! coincide. Lowercase filler words are shared within a topic.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{build_pool, FeedItem, KeywordPool, PoolSet, DEFAULT_MAX_NGRAM};
use crate::obfuscator::{Origin, Query};
use crate::sidechannel::BrowserIdentity;
use crate::text::{fold, tokenize};
use crate::timing::WEEK_SECS;
use crate::topics::{TopicId, TopicUniverse};

/// Monday 2012-01-02 00:00 UTC.
pub const DEFAULT_EPOCH: f64 = 1_325_462_400.0;

const ONSETS: [&str; 18] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st", "kl",
];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
const CODAS: [&str; 6] = ["", "", "n", "r", "s", "l"];
const VERBS: [&str; 12] = [
    "says", "wins", "faces", "backs", "plans", "rejects", "joins", "warns", "opens", "seeks", "loses", "unveils",
];
const LINKS: [&str; 8] = ["over", "after", "in", "on", "for", "with", "against", "near"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub feeds_per_topic: usize,
    pub items_per_feed: usize,
    pub entities_per_feed: usize,
    /// Lowercase filler vocabulary per topic.
    pub filler_words: usize,
    /// Items are dated over the weeks before this instant.
    pub epoch: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 7,
            feeds_per_topic: 60,
            items_per_feed: 100,
            entities_per_feed: 150,
            filler_words: 200,
            epoch: DEFAULT_EPOCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feed {
    pub id: String,
    pub topic: TopicId,
    pub title: String,
    pub items: Vec<FeedItem>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub universe: TopicUniverse,
    /// Feeds grouped by topic, in feed index order.
    pub feeds: BTreeMap<TopicId, Vec<Feed>>,
}

struct Mint {
    seen: HashSet<String>,
}

impl Mint {
    fn word(&mut self, rng: &mut ChaCha8Rng, capitalized: bool) -> String {
        loop {
            let syllables = rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).unwrap());
                w.push_str(VOWELS.choose(rng).unwrap());
                w.push_str(CODAS.choose(rng).unwrap());
            }
            if self.seen.insert(w.clone()) {
                if capitalized {
                    let mut c = w.chars();
                    let first = c.next().unwrap().to_uppercase().collect::<String>();
                    return first + c.as_str();
                }
                return w;
            }
        }
    }
}

fn zipf_index(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|k| 1.0 / (k as f64).powf(s))).expect("nonempty")
}

impl World {
    pub fn generate(config: WorldConfig) -> Self {
        Self::generate_in(config, TopicUniverse::default_universe())
    }

    pub fn generate_in(config: WorldConfig, universe: TopicUniverse) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut mint = Mint { seen: HashSet::new() };
        let mut feeds = BTreeMap::new();
        let filler_index = zipf_index(config.filler_words.max(1), 1.0);
        let entity_index = zipf_index(config.entities_per_feed.max(1), 0.8);
        let name_len = WeightedIndex::new([0.25, 0.4, 0.35]).unwrap();
        for topic in universe.ids() {
            let filler: Vec<String> = (0..config.filler_words.max(1)).map(|_| mint.word(&mut rng, false)).collect();
            let mut topic_feeds = Vec::with_capacity(config.feeds_per_topic);
            for f in 0..config.feeds_per_topic {
                let entities: Vec<String> = (0..config.entities_per_feed.max(1))
                    .map(|_| {
                        let n = name_len.sample(&mut rng) + 1;
                        (0..n).map(|_| mint.word(&mut rng, true)).collect::<Vec<_>>().join(" ")
                    })
                    .collect();
                let id = format!("t{}-f{:02}", topic.0, f);
                let mut items = Vec::with_capacity(config.items_per_feed);
                for i in 0..config.items_per_feed {
                    let e1 = &entities[entity_index.sample(&mut rng)];
                    let e2 = &entities[entity_index.sample(&mut rng)];
                    let w = |rng: &mut ChaCha8Rng| filler[filler_index.sample(rng)].as_str();
                    let verb = VERBS.choose(&mut rng).unwrap();
                    let link = LINKS.choose(&mut rng).unwrap();
                    let title = match rng.gen_range(0..4) {
                        0 => format!("{e1} {verb} {} {link} {e2}", w(&mut rng)),
                        1 => format!("{e1} {verb} {} {}", w(&mut rng), w(&mut rng)),
                        2 => format!("{} {} {link} {e1}", w(&mut rng), w(&mut rng)),
                        _ => format!("{e1} {verb} {e2}"),
                    };
                    let mut body: Vec<&str> = (0..rng.gen_range(12..20)).map(|_| w(&mut rng)).collect();
                    let at = rng.gen_range(0..body.len());
                    body.insert(at, e1);
                    items.push(FeedItem {
                        feed_id: id.clone(),
                        title,
                        body: body.join(" "),
                        published_at: (config.epoch - (i as f64 + 1.0) * 3600.0 * 7.0).floor(),
                    });
                }
                topic_feeds.push(Feed {
                    title: format!("{} {}", universe.get(topic).map(|t| t.name.as_str()).unwrap_or(""), f),
                    id,
                    topic,
                    items,
                });
            }
            feeds.insert(topic, topic_feeds);
        }
        World { config, universe, feeds }
    }

    pub fn feed(&self, topic: TopicId, index: usize) -> Option<&Feed> {
        self.feeds.get(&topic).and_then(|f| f.get(index))
    }

    /// One n-gram pool per topic over the chosen feeds of that topic.
    pub fn pools_from(&self, choice: &BTreeMap<TopicId, Vec<usize>>) -> PoolSet {
        let mut set = PoolSet::default();
        for (&topic, idx) in choice {
            let items: Vec<FeedItem> = idx
                .iter()
                .filter_map(|&i| self.feed(topic, i))
                .flat_map(|f| f.items.iter().cloned())
                .collect();
            set.insert(build_pool(&items, topic, DEFAULT_MAX_NGRAM).expect("positive n-gram length"));
        }
        set
    }

    /// Pools over every feed, one per topic.
    pub fn directory_pools(&self) -> PoolSet {
        let all: BTreeMap<TopicId, Vec<usize>> = self
            .feeds
            .iter()
            .map(|(&t, f)| (t, (0..f.len()).collect()))
            .collect();
        self.pools_from(&all)
    }

    /// Case-folded word counts over every title: the stand-in for a
    /// general-language frequency table.
    pub fn word_frequencies(&self) -> BTreeMap<String, f64> {
        let mut table = BTreeMap::new();
        for item in self.feeds.values().flatten().flat_map(|f| &f.items) {
            for w in tokenize(&item.title) {
                *table.entry(fold(&w)).or_insert(0.0) += 1.0;
            }
        }
        table
    }

    /// Title plus body of every item, grouped by topic.
    pub fn documents(&self) -> BTreeMap<TopicId, Vec<String>> {
        self.feeds
            .iter()
            .map(|(&t, feeds)| {
                let docs = feeds
                    .iter()
                    .flat_map(|f| &f.items)
                    .map(|i| format!("{} {}", i.title, i.body))
                    .collect();
                (t, docs)
            })
            .collect()
    }
}

/// RSS 2.0 rendering of a feed.
pub fn render_rss(feed: &Feed) -> String {
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<rss version=\"2.0\">\n<channel>\n");
    out.push_str(&format!("<title>{}</title>\n", esc(&feed.title)));
    for item in &feed.items {
        out.push_str("<item>");
        out.push_str(&format!("<title>{}</title>", esc(&item.title)));
        out.push_str(&format!("<description>{}</description>", esc(&item.body)));
        if let Some(d) = chrono::DateTime::from_timestamp(item.published_at as i64, 0) {
            out.push_str(&format!("<pubDate>{}</pubDate>", d.to_rfc2822()));
        }
        out.push_str("</item>\n");
    }
    out.push_str("</channel>\n</rss>\n");
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UserConfig {
    pub topics: usize,
    pub reading_feeds_per_topic: usize,
    pub habitual_queries: usize,
    /// Share of queries that re-issue a habitual query.
    pub habitual_share: f64,
    /// Regular daily session slots; each runs on a given day with
    /// probability `slot_attendance`.
    pub daily_slots: usize,
    pub slot_attendance: f64,
    /// Expected number of extra sessions at random daytime hours per day.
    pub extra_sessions_per_day: f64,
    pub queries_per_week: f64,
    /// Median and log-scale spread of in-session gaps, seconds.
    pub median_gap: f64,
    pub gap_sigma: f64,
    pub max_gap: f64,
    /// Probability that a query keeps the previous query's topic.
    pub topic_coherence: f64,
    pub click_through: f64,
    /// Query length in words, weights for 1, 2, 3.
    pub length_weights: [f64; 3],
}

impl Default for UserConfig {
    fn default() -> Self {
        UserConfig {
            topics: 3,
            reading_feeds_per_topic: 12,
            habitual_queries: 5,
            habitual_share: 0.3,
            daily_slots: 3,
            slot_attendance: 0.9,
            extra_sessions_per_day: 0.3,
            queries_per_week: 500.0,
            median_gap: 60.0,
            gap_sigma: 0.9,
            max_gap: 1500.0,
            topic_coherence: 0.3,
            click_through: 0.3,
            length_weights: [0.2, 0.5, 0.3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct UserModel {
    pub config: UserConfig,
    pub topic_weights: BTreeMap<TopicId, f64>,
    /// Feed indices the user reads, per topic.
    pub reading: BTreeMap<TopicId, Vec<usize>>,
    pub habitual: Vec<(String, TopicId)>,
    /// Session start hours of day.
    pub slots: Vec<f64>,
    pub identity: BrowserIdentity,
    /// One n-gram pool per reading feed.
    reading_pools: BTreeMap<TopicId, Vec<KeywordPool>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserActivity {
    /// Browser-open intervals.
    pub sessions: Vec<(f64, f64)>,
    pub queries: Vec<Query>,
    /// Whether each query led to a result click.
    pub clicked: Vec<bool>,
}

const USER_AGENTS: [&str; 3] = [
    "Mozilla/5.0 (Windows NT 6.1; rv:10.0) Gecko/20100101 Firefox/10.0",
    "Mozilla/5.0 (X11; Linux x86_64; rv:10.0) Gecko/20100101 Firefox/10.0",
    "Mozilla/5.0 (Macintosh; Intel Mac OS X 10.7; rv:10.0) Gecko/20100101 Firefox/10.0",
];

impl UserModel {
    pub fn sample(world: &World, config: UserConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<TopicId> = world.feeds.keys().copied().collect();
        let chosen: Vec<TopicId> = ids.choose_multiple(&mut rng, config.topics.min(ids.len())).copied().collect();
        let raw: Vec<f64> = chosen.iter().map(|_| rng.gen_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let topic_weights: BTreeMap<TopicId, f64> = chosen.iter().zip(&raw).map(|(&t, &w)| (t, w / total)).collect();
        let mut reading = BTreeMap::new();
        for &t in &chosen {
            let n = world.feeds[&t].len();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(config.reading_feeds_per_topic.min(n));
            idx.sort_unstable();
            reading.insert(t, idx);
        }
        let reading_pools = reading
            .iter()
            .map(|(&t, idx)| {
                let pools = idx
                    .iter()
                    .map(|&i| build_pool(&world.feeds[&t][i].items, t, DEFAULT_MAX_NGRAM).expect("positive n-gram length"))
                    .collect();
                (t, pools)
            })
            .collect();
        let mut slots: Vec<f64> = Vec::new();
        while slots.len() < config.daily_slots {
            let h = rng.gen_range(7.0..22.0);
            if slots.iter().all(|s: &f64| (s - h).abs() >= 2.5) {
                slots.push(h);
            }
        }
        slots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let identity = BrowserIdentity {
            user_agent: USER_AGENTS.choose(&mut rng).unwrap().to_string(),
            accept_language: "en-US,en;q=0.5".into(),
            cookie_sid: format!("{:016x}", rng.gen::<u64>()),
        };
        let mut user = UserModel {
            config,
            topic_weights,
            reading,
            habitual: Vec::new(),
            slots,
            identity,
            reading_pools,
        };
        let mut used = HashSet::new();
        for _ in 0..user.config.habitual_queries {
            let t = user.draw_topic(&mut rng);
            let text = user.draw_text(t, &mut rng, &mut used);
            user.habitual.push((text, t));
        }
        user
    }

    pub fn topic_profile_weights(&self) -> &BTreeMap<TopicId, f64> {
        &self.topic_weights
    }

    fn draw_topic(&self, rng: &mut ChaCha8Rng) -> TopicId {
        let ids: Vec<TopicId> = self.topic_weights.keys().copied().collect();
        let idx = WeightedIndex::new(self.topic_weights.values()).expect("positive weights");
        ids[idx.sample(rng)]
    }

    fn draw_text(&self, topic: TopicId, rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
        let len_index = WeightedIndex::new(self.config.length_weights).expect("length weights");
        let feeds = &self.reading_pools[&topic];
        let want = len_index.sample(rng) + 1;
        let mut last = String::new();
        for _ in 0..20 {
            let pool = &feeds[rng.gen_range(0..feeds.len())];
            let candidates: Vec<&(String, f64)> = pool
                .entries
                .iter()
                .filter(|(t, _)| t.split_whitespace().count() == want)
                .collect();
            let candidates = if candidates.is_empty() {
                pool.entries.iter().collect()
            } else {
                candidates
            };
            let Ok(idx) = WeightedIndex::new(candidates.iter().map(|(_, w)| *w)) else {
                continue;
            };
            last = candidates[idx.sample(rng)].0.clone();
            if used.insert(last.clone()) {
                return last;
            }
        }
        last
    }

    /// Simulates `weeks` weeks of searching from `start`. Texts already in
    /// `used` are avoided, except for habitual queries.
    pub fn simulate(&self, start: f64, weeks: usize, seed: u64, used: &mut HashSet<String>) -> UserActivity {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &self.config;
        let days = weeks * 7;
        let jitter = Normal::new(0.0, 0.4).unwrap();
        let mut starts: Vec<f64> = Vec::new();
        for d in 0..days {
            let day = start + d as f64 * 86_400.0;
            for &s in &self.slots {
                if rng.gen::<f64>() < cfg.slot_attendance {
                    starts.push(day + (s + jitter.sample(&mut rng)).clamp(0.0, 23.5) * 3600.0);
                }
            }
            if cfg.extra_sessions_per_day > 0.0 {
                let extra = Poisson::new(cfg.extra_sessions_per_day).unwrap().sample(&mut rng) as usize;
                for _ in 0..extra {
                    starts.push(day + rng.gen_range(8.0..23.0) * 3600.0);
                }
            }
        }
        starts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected_sessions = 7.0 * (cfg.daily_slots as f64 * cfg.slot_attendance + cfg.extra_sessions_per_day);
        let per_session = (cfg.queries_per_week / expected_sessions.max(1e-9)).max(1.0);
        let count = Poisson::new(per_session).unwrap();
        let gap = LogNormal::new(cfg.median_gap.ln(), cfg.gap_sigma).unwrap();
        let end = start + weeks as f64 * WEEK_SECS;

        let mut activity = UserActivity::default();
        let mut next_free = f64::NEG_INFINITY;
        for s in starts {
            let open = s.max(next_free);
            if open >= end {
                break;
            }
            let n = (count.sample(&mut rng) as usize).max(1);
            let mut t = open + rng.gen_range(5.0..60.0);
            let mut prev_topic: Option<TopicId> = None;
            let first = activity.queries.len();
            for k in 0..n {
                if k > 0 {
                    t += gap.sample(&mut rng).min(cfg.max_gap);
                }
                if t >= end {
                    break;
                }
                let (text, topic) = if !self.habitual.is_empty() && rng.gen::<f64>() < cfg.habitual_share {
                    self.habitual[rng.gen_range(0..self.habitual.len())].clone()
                } else {
                    let topic = match prev_topic {
                        Some(p) if rng.gen::<f64>() < cfg.topic_coherence => p,
                        _ => self.draw_topic(&mut rng),
                    };
                    (self.draw_text(topic, &mut rng, used), topic)
                };
                prev_topic = Some(topic);
                activity.queries.push(Query::new(text, topic, (t * 1000.0).round() / 1000.0, Origin::User));
                activity.clicked.push(rng.gen::<f64>() < cfg.click_through);
            }
            if activity.queries.len() == first {
                continue;
            }
            let last = activity.queries.last().unwrap().timestamp;
            let close = (last + rng.gen_range(10.0..120.0)).min(end);
            activity.sessions.push((open, close));
            // sessions never overlap; a slot that starts early waits
            next_free = close + 1800.0;
        }
        activity
    }
}

/// Topics a set of users are interested in, for reporting.
pub fn interest_union(users: &[UserModel]) -> BTreeSet<TopicId> {
    users.iter().flat_map(|u| u.topic_weights.keys().copied()).collect()
}
