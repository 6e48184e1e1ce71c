//! Engine-side fingerprint audit over the request log.
//!
//! Flags are computed from log entries, the engine template and the
//! browser-activity periods only. Traces are used to align footprints with
//! queries and, in [`AuditReport::score`], to count flags by origin.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{segment_log, Endpoint, Footprint, RequestLogEntry};
use crate::obfuscator::Origin;
use crate::sidechannel::{query_param, query_params, result_page, suggestion_prefixes, EngineTemplate, SearchTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    Timing,
    Headers,
    Referrer,
    Subresources,
    Favicon,
    Suggestions,
    Clicks,
}

impl Channel {
    pub const ALL: [Channel; 7] = [
        Channel::Timing,
        Channel::Headers,
        Channel::Referrer,
        Channel::Subresources,
        Channel::Favicon,
        Channel::Suggestions,
        Channel::Clicks,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Timing => "timing",
            Channel::Headers => "headers",
            Channel::Referrer => "referrer",
            Channel::Subresources => "subresources",
            Channel::Favicon => "favicon",
            Channel::Suggestions => "suggestions",
            Channel::Clicks => "clicks",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("session {session}: {searches} searches logged but {traces} traces supplied")]
    CountMismatch {
        session: String,
        searches: usize,
        traces: usize,
    },
    #[error("session {session}: search #{index} logged `{logged}` but the trace says `{traced}`")]
    TextMismatch {
        session: String,
        index: usize,
        logged: String,
        traced: String,
    },
    #[error("{0} logged requests belong to no search")]
    Orphans(usize),
}

#[derive(Debug, Clone, Default)]
pub struct AuditContext {
    pub template: EngineTemplate,
    /// Browser-open periods per session key. Sessions without an entry are
    /// not checked on the timing channel.
    pub activity: BTreeMap<String, Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelFindings {
    /// Indices into the audited trace slice.
    pub flagged: BTreeSet<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub per_channel: BTreeMap<Channel, ChannelFindings>,
}

impl AuditReport {
    pub fn total_flags(&self) -> usize {
        self.per_channel.values().map(|f| f.flagged.len()).sum()
    }

    pub fn channels_flagging(&self, trace: usize) -> Vec<Channel> {
        self.per_channel
            .iter()
            .filter(|(_, f)| f.flagged.contains(&trace))
            .map(|(c, _)| *c)
            .collect()
    }

    /// Flag counts per channel split by true origin: `(decoy, user)`.
    pub fn score(&self, traces: &[SearchTrace]) -> BTreeMap<Channel, (usize, usize)> {
        self.per_channel
            .iter()
            .map(|(c, f)| {
                let decoys = f.flagged.iter().filter(|&&i| traces[i].query.origin == Origin::Decoy).count();
                (*c, (decoys, f.flagged.len() - decoys))
            })
            .collect()
    }
}

fn mode<'a, I: IntoIterator<Item = &'a str>>(values: I) -> Option<&'a str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_insert(0) += 1;
    }
    // first maximum in key order
    let mut best: Option<(&str, usize)> = None;
    for (v, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((v, c));
        }
    }
    best.map(|(v, _)| v)
}

/// Path and non-query parameters of a search URL.
fn url_shape(url: &str) -> String {
    let path = url.split_once('?').map(|(p, _)| p).unwrap_or(url);
    let mut params: Vec<(String, String)> = query_params(url).into_iter().filter(|(k, _)| k != "q").collect();
    params.sort();
    let rest: Vec<String> = params.into_iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{path}?{}", rest.join("&"))
}

pub fn audit(log: &[RequestLogEntry], traces: &[SearchTrace], ctx: &AuditContext) -> Result<AuditReport, AuditError> {
    let seg = segment_log(log);
    let orphans = seg
        .orphans
        .iter()
        .filter(|&&i| log[i].endpoint != Endpoint::NotFound)
        .count();
    if orphans > 0 {
        return Err(AuditError::Orphans(orphans));
    }

    let mut by_session: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in traces.iter().enumerate() {
        by_session.entry(t.session_key.as_str()).or_default().push(i);
    }
    let empty = Vec::new();
    let keys: BTreeSet<&str> = by_session.keys().copied().chain(seg.sessions.keys().map(String::as_str)).collect();
    for key in &keys {
        let fps = seg.sessions.get(*key).unwrap_or(&empty);
        let idx = by_session.get(*key).map(Vec::as_slice).unwrap_or(&[]);
        if fps.len() != idx.len() {
            return Err(AuditError::CountMismatch {
                session: key.to_string(),
                searches: fps.len(),
                traces: idx.len(),
            });
        }
        for (k, (f, &ti)) in fps.iter().zip(idx).enumerate() {
            let logged = query_param(&log[f.search].url, "q").unwrap_or_default();
            if logged != traces[ti].query.text {
                return Err(AuditError::TextMismatch {
                    session: key.to_string(),
                    index: k,
                    logged,
                    traced: traces[ti].query.text.clone(),
                });
            }
        }
    }

    let mut flags: BTreeMap<Channel, BTreeSet<usize>> = Channel::ALL.iter().map(|c| (*c, BTreeSet::new())).collect();
    let mut flag = |c: Channel, i: usize| {
        flags.get_mut(&c).expect("channel").insert(i);
    };
    let t = &ctx.template;
    let resource_set: HashMap<&str, usize> = t.resources.iter().map(|r| (r.as_str(), 0)).collect();

    for (key, fps) in &seg.sessions {
        let idx = &by_session[key.as_str()];

        // session baselines
        let all_entries = fps.iter().flat_map(footprint_entries);
        let mut modal_headers: BTreeMap<&str, Option<String>> = BTreeMap::new();
        for h in &t.audited_headers {
            let values: Vec<&str> = all_entries
                .clone()
                .map(|i| log[i].headers.get(h.as_str()).map(String::as_str).unwrap_or(""))
                .collect();
            modal_headers.insert(h.as_str(), mode(values).map(str::to_string));
        }
        let shapes: Vec<String> = fps.iter().map(|f| url_shape(&log[f.search].url)).collect();
        let modal_shape = mode(shapes.iter().map(String::as_str)).map(str::to_string);

        let mut visited: HashSet<String> = HashSet::new();
        let mut favicon_fetched_at: Option<f64> = None;
        let activity = ctx.activity.get(key);

        for (k, f) in fps.iter().enumerate() {
            let ti = idx[k];
            let search = &log[f.search];
            let text = query_param(&search.url, "q").unwrap_or_default();
            let ts = search.timestamp;

            if let Some(periods) = activity {
                if !periods.iter().any(|&(a, b)| ts >= a && ts <= b) {
                    flag(Channel::Timing, ti);
                }
            }

            let header_mismatch = footprint_entries(f).any(|i| {
                modal_headers.iter().any(|(h, m)| {
                    log[i].headers.get(*h).map(String::as_str).unwrap_or("") != m.as_deref().unwrap_or("")
                })
            });
            if header_mismatch || Some(&shapes[k]) != modal_shape.as_ref() {
                flag(Channel::Headers, ti);
            }

            if let Some(r) = search.headers.get("referer").filter(|r| !r.is_empty()) {
                if !visited.contains(r) {
                    flag(Channel::Referrer, ti);
                }
            }

            let mut seen = resource_set.clone();
            let mut extra = false;
            for &i in &f.resources {
                let path = log[i].url.split_once('?').map(|(p, _)| p).unwrap_or(&log[i].url);
                match seen.get_mut(path) {
                    Some(c) => *c += 1,
                    None => extra = true,
                }
            }
            if extra || seen.values().any(|&c| c != 1) {
                flag(Channel::Subresources, ti);
            }

            let valid = favicon_fetched_at.is_some_and(|at| ts < at + t.favicon_max_age);
            let fetched = !f.favicons.is_empty();
            if (fetched && valid) || (!fetched && !valid) || f.favicons.len() > 1 {
                flag(Channel::Favicon, ti);
            }
            if fetched {
                favicon_fetched_at = Some(ts);
            }

            let observed: Vec<String> = f
                .suggests
                .iter()
                .map(|&i| query_param(&log[i].url, "q").unwrap_or_default())
                .collect();
            let expected = match t.suggest_url {
                Some(_) => suggestion_prefixes(&text, t.suggest_min_chars),
                None => Vec::new(),
            };
            if observed != expected {
                flag(Channel::Suggestions, ti);
            }

            let page = result_page(t, &text);
            for &i in &f.clicks {
                let e = &log[i];
                let rank = query_param(&e.url, "rank").unwrap_or_default();
                let to = query_param(&e.url, "to").unwrap_or_default();
                let served = match rank.strip_prefix('s') {
                    Some(r) => r.parse::<usize>().ok().and_then(|r| page.sponsored.get(r.wrapping_sub(1))),
                    None => rank.parse::<usize>().ok().and_then(|r| page.organic.get(r.wrapping_sub(1))),
                };
                if served.is_none_or(|l| l.url != to) || e.timestamp < ts {
                    flag(Channel::Clicks, ti);
                }
                visited.insert(to);
            }
            visited.insert(t.absolute(&search.url));
        }
    }

    let searches: usize = seg.sessions.values().map(Vec::len).sum();
    let per_channel = flags
        .into_iter()
        .map(|(c, flagged)| {
            let detail = format!("{} of {searches} searches flagged", flagged.len());
            (c, ChannelFindings { flagged, detail })
        })
        .collect();
    Ok(AuditReport { per_channel })
}

fn footprint_entries(f: &Footprint) -> impl Iterator<Item = usize> + Clone + '_ {
    f.suggests
        .iter()
        .chain(std::iter::once(&f.search))
        .chain(&f.resources)
        .chain(&f.favicons)
        .chain(&f.clicks)
        .copied()
}
