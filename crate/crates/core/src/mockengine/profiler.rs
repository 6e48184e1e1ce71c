//! Transparent interest profiler: classifies every logged query by keyword
//! overlap and reports the topics holding a minimum share of them.

use std::collections::{BTreeMap, BTreeSet};

use crate::corpus::PoolSet;
use crate::topics::{classify, TopicId, TopicUniverse};

pub const DEFAULT_MIN_SHARE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct MockProfiler {
    pub universe: TopicUniverse,
    pub pools: PoolSet,
    /// Fraction of classified queries a topic needs to count as an interest.
    pub min_share: f64,
}

impl MockProfiler {
    pub fn new(universe: TopicUniverse, pools: PoolSet) -> Self {
        MockProfiler {
            universe,
            pools,
            min_share: DEFAULT_MIN_SHARE,
        }
    }

    pub fn topic_counts<'a, I: IntoIterator<Item = &'a str>>(&self, texts: I) -> BTreeMap<TopicId, usize> {
        let mut counts = BTreeMap::new();
        for text in texts {
            let c = classify(text, &self.universe, &self.pools);
            if !c.topic.is_unclassified() {
                *counts.entry(c.topic).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn infer<'a, I: IntoIterator<Item = &'a str>>(&self, texts: I) -> BTreeSet<TopicId> {
        let counts = self.topic_counts(texts);
        let total: usize = counts.values().sum();
        counts
            .into_iter()
            .filter(|&(_, c)| total > 0 && c as f64 / total as f64 >= self.min_share)
            .map(|(t, _)| t)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{KeywordPool, PoolSource};

    #[test]
    fn infers_majority_topics() {
        let mk = |t: u32, terms: &[&str]| {
            let mut p = KeywordPool::empty(TopicId(t), PoolSource::FeedExtracted);
            p.entries = terms.iter().map(|s| (s.to_string(), 1.0 / terms.len() as f64)).collect();
            p.entries.sort_by(|a, b| a.0.cmp(&b.0));
            p
        };
        let pools = PoolSet::new([mk(6, &["Senate", "Vote"]), mk(13, &["Goal", "Match"])]);
        let mut profiler = MockProfiler::new(TopicUniverse::default_universe(), pools);
        profiler.min_share = 0.2;
        let mut texts = vec!["Senate vote"; 9];
        texts.push("Goal");
        texts.push("gibberish");
        let inferred = profiler.infer(texts.iter().copied());
        assert_eq!(inferred, [TopicId(6)].into());
        assert!(profiler.infer(["nothing"]).is_empty());
    }
}
