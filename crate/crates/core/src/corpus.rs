//! Feed ingestion and keyword pools.
//!
//! Feeds (RSS 2.0 or Atom) are reduced to [`FeedItem`]s, their titles mined
//! for capitalized keywords, and the keyword runs turned into weighted
//! n-gram pools from which decoy queries are drawn. A second pool builder
//! scores rare terms of a document collection by TF-IDF.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use chrono::DateTime;
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::nearest_rank_quantile;
use crate::text::{fold, has_uppercase, normalize_token, tokenize};
use crate::topics::TopicId;

pub const DEFAULT_MAX_NGRAM: usize = 3;
pub const DEFAULT_RARE_QUANTILE: f64 = 0.3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed feed XML at byte {offset}: {message}")]
    Malformed { offset: u64, message: String },
    #[error("unsupported feed dialect: root element <{root}>")]
    UnsupportedDialect { root: String },
    #[error("max_ngram must be at least 1")]
    InvalidNgram,
    #[error("rare_quantile must lie in (0, 1], got {0}")]
    InvalidQuantile(f64),
    #[error("pool record on line {line}: {message}")]
    PoolRecord { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedItem {
    pub feed_id: String,
    pub title: String,
    pub body: String,
    /// Seconds since the Unix epoch; 0 when the entry carries no date.
    pub published_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolSource {
    FeedExtracted,
    TfidfGenerated,
}

/// Weighted candidate queries for one topic. Weights sum to one unless the
/// pool is empty; entries are unique and sorted by term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordPool {
    pub topic_id: TopicId,
    pub entries: Vec<(String, f64)>,
    pub source: PoolSource,
}

impl KeywordPool {
    pub fn empty(topic_id: TopicId, source: PoolSource) -> Self {
        KeywordPool {
            topic_id,
            entries: Vec::new(),
            source,
        }
    }

    fn from_scores(topic_id: TopicId, scores: BTreeMap<String, f64>, source: PoolSource) -> Self {
        let total: f64 = scores.values().sum();
        let entries = if total > 0.0 {
            scores
                .into_iter()
                .filter(|(_, s)| *s > 0.0)
                .map(|(t, s)| (t, s / total))
                .collect()
        } else {
            Vec::new()
        };
        KeywordPool {
            topic_id,
            entries,
            source,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn weight_of(&self, term: &str) -> f64 {
        self.entries
            .binary_search_by(|(t, _)| t.as_str().cmp(term))
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    /// Serializes as `term TAB weight TAB topic_id` lines.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (term, weight) in &self.entries {
            let _ = writeln!(out, "{term}\t{weight}\t{}", self.topic_id);
        }
        out
    }
}

/// Reads pool records; each topic found in the file becomes one pool.
pub fn read_pool_records<R: BufRead>(reader: R, source: PoolSource) -> Result<Vec<KeywordPool>, CorpusError> {
    let mut pools: BTreeMap<TopicId, Vec<(String, f64)>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |message: &str| CorpusError::PoolRecord {
            line: i + 1,
            message: message.to_string(),
        };
        let mut fields = line.split('\t');
        let (Some(term), Some(weight), Some(topic), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(bad("expected three tab-separated fields"));
        };
        let weight: f64 = weight.parse().map_err(|_| bad("weight is not a number"))?;
        if !(weight >= 0.0) {
            return Err(bad("weight must be nonnegative"));
        }
        let topic: TopicId = topic.parse().map_err(|_| bad("topic id is not an integer"))?;
        if term.is_empty() {
            return Err(bad("empty term"));
        }
        pools.entry(topic).or_default().push((term.to_string(), weight));
    }
    Ok(pools
        .into_iter()
        .map(|(topic_id, mut entries)| {
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            KeywordPool {
                topic_id,
                entries,
                source,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dialect {
    Rss,
    Atom,
}

#[derive(Default)]
struct EntryBuilder {
    title: Option<String>,
    body: Option<String>,
    date: Option<String>,
}

fn parse_date(raw: &str) -> Option<f64> {
    let raw = raw.trim();
    DateTime::parse_from_rfc2822(raw)
        .or_else(|_| DateTime::parse_from_rfc3339(raw))
        .ok()
        .map(|d| d.timestamp() as f64)
}

/// Parses an RSS 2.0 or Atom document into feed items.
///
/// Entries without a usable title are skipped. Missing dates map to 0.
pub fn parse_feed(raw: &[u8], feed_id: &str) -> Result<Vec<FeedItem>, CorpusError> {
    let text = std::str::from_utf8(raw).map_err(|e| CorpusError::Malformed {
        offset: e.valid_up_to() as u64,
        message: "invalid UTF-8".into(),
    })?;
    let mut reader = Reader::from_str(text);
    let mut dialect: Option<Dialect> = None;
    let mut stack: Vec<String> = Vec::new();
    let mut entry: Option<EntryBuilder> = None;
    let mut field: Option<&'static str> = None;
    let mut items = Vec::new();

    loop {
        let event = reader.read_event().map_err(|e| CorpusError::Malformed {
            offset: reader.error_position(),
            message: e.to_string(),
        })?;
        match event {
            Event::Start(e) => {
                let name = e.local_name().as_ref().to_owned();
                if dialect.is_none() {
                    dialect = match name.as_str() {
                        "rss" => Some(Dialect::Rss),
                        "feed" => Some(Dialect::Atom),
                        other => {
                            return Err(CorpusError::UnsupportedDialect { root: other.to_string() });
                        }
                    };
                }
                let d = dialect.expect("dialect set on root");
                let entry_tag = if d == Dialect::Rss { "item" } else { "entry" };
                if name == entry_tag {
                    entry = Some(EntryBuilder::default());
                } else if entry.is_some() && stack.last().map(String::as_str) == Some(entry_tag) {
                    field = match (d, name.as_str()) {
                        (_, "title") => Some("title"),
                        (Dialect::Rss, "description") | (Dialect::Atom, "summary") | (Dialect::Atom, "content") => {
                            Some("body")
                        }
                        (Dialect::Rss, "pubDate") | (Dialect::Atom, "published") | (Dialect::Atom, "updated") => {
                            Some("date")
                        }
                        _ => None,
                    };
                }
                stack.push(name);
            }
            Event::Empty(e) => {
                if dialect.is_none() {
                    let name = e.local_name().as_ref().to_owned();
                    return match name.as_str() {
                        "rss" | "feed" => Ok(Vec::new()),
                        other => Err(CorpusError::UnsupportedDialect { root: other.to_string() }),
                    };
                }
            }
            Event::End(_) => {
                let name = stack.pop().unwrap_or_default();
                let entry_tag = match dialect {
                    Some(Dialect::Rss) => "item",
                    _ => "entry",
                };
                if name == entry_tag {
                    if let Some(b) = entry.take() {
                        let title = b.title.map(|t| t.trim().to_string()).unwrap_or_default();
                        if !title.is_empty() {
                            items.push(FeedItem {
                                feed_id: feed_id.to_string(),
                                title,
                                body: b.body.map(|t| t.trim().to_string()).unwrap_or_default(),
                                published_at: b.date.as_deref().and_then(parse_date).unwrap_or(0.0),
                            });
                        }
                    }
                }
                field = None;
            }
            Event::Text(t) => append_field(&mut entry, field, &t.xml10_content()),
            Event::CData(t) => append_field(&mut entry, field, &t.xml10_content()),
            Event::GeneralRef(r) => {
                let resolved = match r.resolve_char_ref() {
                    Ok(Some(c)) => c.to_string(),
                    _ => {
                        let name = r.xml10_content();
                        quick_xml::escape::resolve_predefined_entity(&name)
                            .map(str::to_string)
                            .unwrap_or_default()
                    }
                };
                append_field(&mut entry, field, &resolved);
            }
            Event::Eof => {
                if dialect.is_none() {
                    return Err(CorpusError::Malformed {
                        offset: reader.buffer_position(),
                        message: "document has no root element".into(),
                    });
                }
                if !stack.is_empty() {
                    return Err(CorpusError::Malformed {
                        offset: reader.buffer_position(),
                        message: format!("unexpected end of input inside <{}>", stack.last().unwrap()),
                    });
                }
                break;
            }
            _ => {}
        }
    }
    Ok(items)
}

fn append_field(entry: &mut Option<EntryBuilder>, field: Option<&'static str>, text: &str) {
    let (Some(b), Some(f)) = (entry.as_mut(), field) else {
        return;
    };
    let slot = match f {
        "title" => &mut b.title,
        "body" => &mut b.body,
        _ => &mut b.date,
    };
    slot.get_or_insert_with(String::new).push_str(text);
}

/// Capitalized words of the title, in title order.
pub fn extract_keywords(item: &FeedItem) -> Vec<String> {
    item.title
        .split_whitespace()
        .filter_map(normalize_token)
        .filter(|w| has_uppercase(w))
        .collect()
}

/// Runs of adjacent capitalized title words. Each run is a maximal
/// stretch of consecutive words that all qualify as keywords.
pub fn keyword_runs(title: &str) -> Vec<Vec<String>> {
    let mut runs = Vec::new();
    let mut current = Vec::new();
    for raw in title.split_whitespace() {
        match normalize_token(raw) {
            Some(w) if has_uppercase(&w) => current.push(w),
            _ => {
                if !current.is_empty() {
                    runs.push(std::mem::take(&mut current));
                }
            }
        }
    }
    if !current.is_empty() {
        runs.push(current);
    }
    runs
}

/// Builds an n-gram pool (lengths `1..=max_ngram`) over the keyword runs of
/// every title, weighting each n-gram by its occurrence count.
pub fn build_pool(items: &[FeedItem], topic_id: TopicId, max_ngram: usize) -> Result<KeywordPool, CorpusError> {
    if max_ngram == 0 {
        return Err(CorpusError::InvalidNgram);
    }
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    for item in items {
        for run in keyword_runs(&item.title) {
            for n in 1..=max_ngram.min(run.len()) {
                for window in run.windows(n) {
                    *counts.entry(window.join(" ")).or_insert(0.0) += 1.0;
                }
            }
        }
    }
    Ok(KeywordPool::from_scores(topic_id, counts, PoolSource::FeedExtracted))
}

/// Scores terms by raw-count TF times `ln(N/df)` and keeps the rare ones:
/// those whose document frequency is at most the `rare_quantile`
/// nearest-rank quantile of all document frequencies. Terms are case-folded.
pub fn build_tfidf_pool(documents: &[String], topic_id: TopicId, rare_quantile: f64) -> Result<KeywordPool, CorpusError> {
    if !(rare_quantile > 0.0 && rare_quantile <= 1.0) {
        return Err(CorpusError::InvalidQuantile(rare_quantile));
    }
    let docs: Vec<Vec<String>> = documents
        .iter()
        .map(|d| tokenize(d).iter().map(|t| fold(t)).collect())
        .collect();
    let n_docs = docs.len() as f64;
    let mut tf: HashMap<&str, f64> = HashMap::new();
    let mut df: HashMap<&str, f64> = HashMap::new();
    for doc in &docs {
        let mut seen: Vec<&str> = Vec::new();
        for term in doc {
            *tf.entry(term.as_str()).or_insert(0.0) += 1.0;
            if !seen.contains(&term.as_str()) {
                seen.push(term.as_str());
            }
        }
        for term in seen {
            *df.entry(term).or_insert(0.0) += 1.0;
        }
    }
    if df.is_empty() {
        return Ok(KeywordPool::empty(topic_id, PoolSource::TfidfGenerated));
    }
    let mut dfs: Vec<f64> = df.values().copied().collect();
    dfs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cutoff = nearest_rank_quantile(&dfs, rare_quantile);
    let scores: BTreeMap<String, f64> = df
        .iter()
        .filter(|(_, &d)| d <= cutoff)
        .map(|(&term, &d)| (term.to_string(), tf[term] * (n_docs / d).ln()))
        .collect();
    Ok(KeywordPool::from_scores(topic_id, scores, PoolSource::TfidfGenerated))
}

/// Pools indexed by topic, with a case-folded unigram lookup used by the
/// classifier and the adversary.
#[derive(Debug, Clone, Default)]
pub struct PoolSet {
    pools: BTreeMap<TopicId, KeywordPool>,
    unigrams: HashMap<String, Vec<(TopicId, f64)>>,
}

impl PoolSet {
    pub fn new<I: IntoIterator<Item = KeywordPool>>(pools: I) -> Self {
        let mut set = PoolSet::default();
        for pool in pools {
            set.insert(pool);
        }
        set
    }

    pub fn insert(&mut self, pool: KeywordPool) {
        if let Some(old) = self.pools.remove(&pool.topic_id) {
            for (term, _) in &old.entries {
                if let Some(v) = self.unigrams.get_mut(&fold(term)) {
                    v.retain(|(t, _)| *t != old.topic_id);
                }
            }
        }
        for (term, weight) in &pool.entries {
            if term.contains(' ') {
                continue;
            }
            let slot = self.unigrams.entry(fold(term)).or_default();
            match slot.iter_mut().find(|(t, _)| *t == pool.topic_id) {
                Some(existing) => existing.1 += weight,
                None => slot.push((pool.topic_id, *weight)),
            }
        }
        self.pools.insert(pool.topic_id, pool);
    }

    pub fn get(&self, topic: TopicId) -> Option<&KeywordPool> {
        self.pools.get(&topic)
    }

    pub fn topics(&self) -> impl Iterator<Item = TopicId> + '_ {
        self.pools.keys().copied()
    }

    pub fn pools(&self) -> impl Iterator<Item = &KeywordPool> {
        self.pools.values()
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }

    /// Topics whose pool holds `term` as a unigram, with that weight.
    pub fn unigram_weights(&self, term: &str) -> &[(TopicId, f64)] {
        self.unigrams.get(&fold(term)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Whether any pool holds the exact n-gram.
    pub fn contains_phrase(&self, phrase: &str) -> bool {
        self.pools.values().any(|p| p.weight_of(phrase) > 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(title: &str) -> FeedItem {
        FeedItem {
            feed_id: "f".into(),
            title: title.into(),
            body: String::new(),
            published_at: 0.0,
        }
    }

    const RSS_ONE: &str = r#"<?xml version="1.0"?>
<rss version="2.0"><channel><title>Space</title>
<item><title>NASA Delays Launch</title><description>Weather &amp; wind</description>
<pubDate>Mon, 02 Jan 2012 09:30:00 +0000</pubDate></item>
</channel></rss>"#;

    #[test]
    fn rss_single_item() {
        let items = parse_feed(RSS_ONE.as_bytes(), "space").unwrap();
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].title, "NASA Delays Launch");
        assert_eq!(items[0].body, "Weather & wind");
        assert_eq!(items[0].published_at, 1_325_496_600.0);
        assert_eq!(items[0].feed_id, "space");
    }

    #[test]
    fn rss_empty_channel() {
        let raw = r#"<rss version="2.0"><channel><title>x</title></channel></rss>"#;
        assert!(parse_feed(raw.as_bytes(), "f").unwrap().is_empty());
    }

    #[test]
    fn atom_entries() {
        let raw = r#"<?xml version="1.0" encoding="utf-8"?>
<feed xmlns="http://www.w3.org/2005/Atom"><title>t</title>
<entry><title type="text"><![CDATA[Obama Visits Berlin]]></title><updated>2012-01-02T10:00:00Z</updated>
<summary>short</summary></entry>
<entry><title>second</title></entry></feed>"#;
        let items = parse_feed(raw.as_bytes(), "a").unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].title, "Obama Visits Berlin");
        assert_eq!(items[0].published_at, 1_325_498_400.0);
        assert_eq!(items[1].published_at, 0.0);
    }

    #[test]
    fn truncated_xml_is_malformed() {
        let cut = &RSS_ONE[..RSS_ONE.len() - 30];
        match parse_feed(cut.as_bytes(), "f") {
            Err(CorpusError::Malformed { offset, .. }) => assert!(offset > 0),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_tags_are_malformed() {
        let raw = "<rss><channel><item><title>A</item></channel></rss>";
        assert!(matches!(parse_feed(raw.as_bytes(), "f"), Err(CorpusError::Malformed { .. })));
    }

    #[test]
    fn other_roots_are_unsupported() {
        let raw = "<html><body/></html>";
        assert!(matches!(
            parse_feed(raw.as_bytes(), "f"),
            Err(CorpusError::UnsupportedDialect { root }) if root == "html"
        ));
    }

    #[test]
    fn keyword_rule_applied_literally() {
        assert_eq!(extract_keywords(&item("NASA delays launch of new telescope")), vec!["NASA"]);
        assert!(extract_keywords(&item("no capitals here")).is_empty());
        assert_eq!(
            extract_keywords(&item("Obama Visits Berlin")),
            vec!["Obama", "Visits", "Berlin"]
        );
        assert_eq!(extract_keywords(&item("the iPhone, (eBay)!")), vec!["iPhone", "eBay"]);
    }

    #[test]
    fn pool_single_title() {
        let pool = build_pool(&[item("Obama Visits Berlin")], TopicId(3), 2).unwrap();
        let terms: Vec<&str> = pool.entries.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(terms, vec!["Berlin", "Obama", "Obama Visits", "Visits", "Visits Berlin"]);
        for (_, w) in &pool.entries {
            assert!((w - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_is_scale_invariant() {
        let one = build_pool(&[item("Obama Visits Berlin")], TopicId(3), 2).unwrap();
        let two = build_pool(&[item("Obama Visits Berlin"), item("Obama Visits Berlin")], TopicId(3), 2).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn pool_size_over_disjoint_titles() {
        // Counted by hand, max_ngram = 3:
        //   "Apple Unveils New iPad Today"      -> one run of 5: 5 + 4 + 3 = 12
        //   "rain hits Paris and Rome"          -> runs [Paris], [Rome]: 2
        //   "Senate Votes on Budget Deal"       -> runs [Senate Votes], [Budget Deal]: 2*(2+1) = 6
        let items = [
            item("Apple Unveils New iPad Today"),
            item("rain hits Paris and Rome"),
            item("Senate Votes on Budget Deal"),
        ];
        let pool = build_pool(&items, TopicId(1), 3).unwrap();
        assert_eq!(pool.len(), 20);
    }

    #[test]
    fn pool_rejects_zero_ngram() {
        assert!(matches!(build_pool(&[], TopicId(1), 0), Err(CorpusError::InvalidNgram)));
        assert!(build_pool(&[], TopicId(1), 2).unwrap().is_empty());
    }

    #[test]
    fn tfidf_excludes_ubiquitous_terms() {
        let docs = vec!["a b".to_string(), "a c".to_string()];
        let pool = build_tfidf_pool(&docs, TopicId(1), 0.3).unwrap();
        assert_eq!(pool.weight_of("a"), 0.0);
        let pool = build_tfidf_pool(&docs, TopicId(1), 1.0).unwrap();
        assert_eq!(pool.weight_of("a"), 0.0);
        assert!((pool.weight_of("b") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tfidf_symmetric_corpus() {
        let docs = vec!["x".to_string(), "y".to_string()];
        let pool = build_tfidf_pool(&docs, TopicId(1), 1.0).unwrap();
        assert_eq!(pool.len(), 2);
        assert!((pool.weight_of("x") - 0.5).abs() < 1e-12);
        assert!((pool.weight_of("y") - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tfidf_planted_rare_term_wins() {
        // Ten documents. "market" and "price" appear in all ten (idf 0).
        // "stock" appears once in each of docs 0..5 (df 5, tf 5: 5 ln 2 = 3.47).
        // "bond" appears once in docs 5..9 (df 5 as well, same score).
        // The planted "zyxor" appears three times in doc 9 only:
        // tf 3, df 1, score 3 ln 10 = 6.91, the maximum.
        let mut docs = Vec::new();
        for i in 0..10 {
            let mut d = String::from("market price");
            if i < 5 {
                d.push_str(" stock");
            } else {
                d.push_str(" bond");
            }
            if i == 9 {
                d.push_str(" zyxor zyxor zyxor");
            }
            docs.push(d);
        }
        let pool = build_tfidf_pool(&docs, TopicId(2), 1.0).unwrap();
        let best = pool
            .entries
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert_eq!(best.0, "zyxor");
        let expected = 3.0 * 10f64.ln() / (3.0 * 10f64.ln() + 2.0 * 5.0 * 2f64.ln());
        assert!((best.1 - expected).abs() < 1e-12);
        // dfs sorted: [1, 5, 5, 10, 10]; the 0.2 nearest-rank quantile is 1
        let rare = build_tfidf_pool(&docs, TopicId(2), 0.2).unwrap();
        assert_eq!(rare.entries, vec![("zyxor".to_string(), 1.0)]);
    }

    #[test]
    fn tfidf_all_empty_documents() {
        let docs = vec![String::new(), "  ".to_string()];
        assert!(build_tfidf_pool(&docs, TopicId(1), 0.3).unwrap().is_empty());
        assert!(build_tfidf_pool(&docs, TopicId(1), 0.0).is_err());
    }

    #[test]
    fn pool_records_round_trip() {
        let pool = build_pool(&[item("Obama Visits Berlin")], TopicId(3), 2).unwrap();
        let text = pool.to_records();
        assert!(text.lines().all(|l| l.split('\t').count() == 3));
        let back = read_pool_records(text.as_bytes(), PoolSource::FeedExtracted).unwrap();
        assert_eq!(back, vec![pool]);
        assert!(read_pool_records("a\tb\n".as_bytes(), PoolSource::FeedExtracted).is_err());
    }

    #[test]
    fn pool_set_unigram_index() {
        let a = build_pool(&[item("Obama Visits Berlin")], TopicId(1), 2).unwrap();
        let b = build_pool(&[item("Berlin Marathon")], TopicId(2), 1).unwrap();
        let set = PoolSet::new([a, b]);
        let hits = set.unigram_weights("berlin");
        assert_eq!(hits.len(), 2);
        assert!(set.contains_phrase("Obama Visits"));
        assert!(set.unigram_weights("Obama Visits").is_empty());
    }
}
