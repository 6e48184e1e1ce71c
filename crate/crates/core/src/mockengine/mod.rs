//! A mock search engine: deterministic pages, suggestion completions, a
//! favicon with cache validity, click redirects, and an append-only
//! request log.

pub mod audit;
pub mod profiler;
pub mod server;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::corpus::PoolSet;
use crate::querylog::ObservedQuery;
use crate::sidechannel::{encode_component, query_param, render_result_page, EngineTemplate, SearchTrace, KEYSTROKE_INTERVAL};

pub use audit::{audit, AuditContext, AuditError, AuditReport, Channel};
pub use profiler::MockProfiler;
pub use server::{replay_http, EngineClient, EngineServer, ReplayError};

/// Header carrying the simulated time of a request.
pub const SIM_TIME_HEADER: &str = "x-sim-time";
/// Header the loopback server sets from the peer address.
pub const REMOTE_ADDR_HEADER: &str = "x-remote-addr";
pub const SUGGESTION_LIMIT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Search,
    Suggest,
    Resource,
    Favicon,
    ClickRedirect,
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub timestamp: f64,
    pub endpoint: Endpoint,
    pub url: String,
    pub headers: BTreeMap<String, String>,
    pub session_key: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Response {
    fn new(status: u16, content_type: &str, body: impl Into<Vec<u8>>) -> Self {
        Response {
            status,
            headers: vec![("Content-Type".into(), content_type.into())],
            body: body.into(),
        }
    }
}

fn path_of(url: &str) -> &str {
    url.split_once('?').map(|(p, _)| p).unwrap_or(url)
}

/// Session key from the `sid` cookie, else from the peer address.
pub fn session_key(headers: &BTreeMap<String, String>) -> String {
    if let Some(cookie) = headers.get("cookie") {
        for part in cookie.split(';') {
            if let Some(v) = part.trim().strip_prefix("sid=") {
                return v.to_string();
            }
        }
    }
    format!("ip:{}", headers.get(REMOTE_ADDR_HEADER).map(String::as_str).unwrap_or("unknown"))
}

pub struct MockEngine {
    template: EngineTemplate,
    completions: Vec<(String, String, f64)>,
    log: Mutex<Vec<RequestLogEntry>>,
    clock: Arc<dyn Clock>,
}

impl MockEngine {
    pub fn new(template: EngineTemplate, pools: &PoolSet) -> Self {
        let mut completions: BTreeMap<String, (String, f64)> = BTreeMap::new();
        for pool in pools.pools() {
            for (term, w) in &pool.entries {
                let e = completions.entry(term.to_lowercase()).or_insert((term.clone(), 0.0));
                e.1 += w;
            }
        }
        let mut completions: Vec<(String, String, f64)> =
            completions.into_iter().map(|(folded, (term, w))| (folded, term, w)).collect();
        completions.sort_by(|a, b| a.0.cmp(&b.0));
        MockEngine {
            template,
            completions,
            log: Mutex::new(Vec::new()),
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn template(&self) -> &EngineTemplate {
        &self.template
    }

    pub fn log(&self) -> Vec<RequestLogEntry> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("log lock").clear();
    }

    /// Top completions for a prefix, by pool weight, case-insensitive.
    pub fn suggestions(&self, prefix: &str) -> Vec<String> {
        let p = prefix.to_lowercase();
        let start = self.completions.partition_point(|c| c.0.as_str() < p.as_str());
        let mut hits: Vec<&(String, String, f64)> =
            self.completions[start..].iter().take_while(|c| c.0.starts_with(&p)).collect();
        hits.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then_with(|| a.0.cmp(&b.0)));
        hits.into_iter().take(SUGGESTION_LIMIT).map(|c| c.1.clone()).collect()
    }

    fn route(&self, url: &str) -> Endpoint {
        let path = path_of(url);
        let t = &self.template;
        if path == path_of(&t.search_url) {
            Endpoint::Search
        } else if t.suggest_url.as_deref().is_some_and(|s| path == path_of(s)) {
            Endpoint::Suggest
        } else if t.resources.iter().any(|r| r == path) {
            Endpoint::Resource
        } else if path == path_of(&t.favicon_url) {
            Endpoint::Favicon
        } else if path == "/click" {
            Endpoint::ClickRedirect
        } else {
            Endpoint::NotFound
        }
    }

    /// Serves one GET request and appends it to the log.
    pub fn handle(&self, url: &str, headers: &BTreeMap<String, String>) -> Response {
        let endpoint = self.route(url);
        let timestamp = headers
            .get(SIM_TIME_HEADER)
            .and_then(|v| v.parse::<f64>().ok())
            .unwrap_or_else(|| self.clock.now());
        let response = match endpoint {
            Endpoint::Search => {
                let q = query_param(url, "q").unwrap_or_default();
                Response::new(200, "text/html; charset=utf-8", render_result_page(&self.template, &q))
            }
            Endpoint::Suggest => {
                let q = query_param(url, "q").unwrap_or_default();
                let body = serde_json::to_vec(&(q.clone(), self.suggestions(&q))).expect("json");
                Response::new(200, "application/json", body)
            }
            Endpoint::Resource => Response::new(200, "application/octet-stream", path_of(url).as_bytes().to_vec()),
            Endpoint::Favicon => {
                let mut r = Response::new(200, "image/x-icon", vec![0u8, 0, 1, 0]);
                r.headers
                    .push(("Cache-Control".into(), format!("max-age={}", self.template.favicon_max_age as u64)));
                r
            }
            Endpoint::ClickRedirect => match query_param(url, "to") {
                Some(to) => {
                    let mut r = Response::new(302, "text/plain", Vec::new());
                    r.headers.push(("Location".into(), to));
                    r
                }
                None => Response::new(400, "text/plain", "missing `to`"),
            },
            Endpoint::NotFound => Response::new(404, "text/plain", "not found"),
        };
        let entry = RequestLogEntry {
            timestamp,
            endpoint,
            url: url.to_string(),
            headers: headers.clone(),
            session_key: session_key(headers),
        };
        self.log.lock().expect("log lock").push(entry);
        response
    }
}

/// One HTTP request a trace implies.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRequest {
    pub time: f64,
    pub url: String,
    pub headers: BTreeMap<String, String>,
}

/// The request sequence of a trace: keystroke suggestions, the search, its
/// page resources, the favicon when the cache missed, then clicks.
pub fn planned_requests(trace: &SearchTrace, template: &EngineTemplate) -> Vec<PlannedRequest> {
    let ts = trace.query.timestamp;
    let mut base = trace.headers.clone();
    base.remove("referer");
    let with_time = |h: &BTreeMap<String, String>, t: f64| {
        let mut h = h.clone();
        h.insert(SIM_TIME_HEADER.to_string(), format!("{t:.3}"));
        h
    };
    let mut page_headers = base.clone();
    page_headers.insert("referer".into(), template.absolute(&trace.request_url));

    let mut out = Vec::new();
    let k = trace.suggestion_urls.len();
    for (i, u) in trace.suggestion_urls.iter().enumerate() {
        let t = ts - (k - i) as f64 * KEYSTROKE_INTERVAL;
        out.push(PlannedRequest {
            time: t,
            url: u.clone(),
            headers: with_time(&base, t),
        });
    }
    out.push(PlannedRequest {
        time: ts,
        url: trace.request_url.clone(),
        headers: with_time(&trace.headers, ts),
    });
    for (i, r) in trace.subresources.iter().enumerate() {
        let t = ts + 0.05 * (i + 1) as f64;
        out.push(PlannedRequest {
            time: t,
            url: r.clone(),
            headers: with_time(&page_headers, t),
        });
    }
    if trace.favicon_fetched {
        let t = ts + 0.5;
        out.push(PlannedRequest {
            time: t,
            url: template.favicon_url.clone(),
            headers: with_time(&page_headers, t),
        });
    }
    for c in &trace.clicks {
        let rank = if c.sponsored { format!("s{}", c.rank) } else { c.rank.to_string() };
        out.push(PlannedRequest {
            time: c.time,
            url: format!("/click?rank={rank}&to={}", encode_component(&c.url)),
            headers: with_time(&page_headers, c.time),
        });
    }
    out
}

/// Replays traces straight into the engine handler, in order.
pub fn replay_in_process(engine: &MockEngine, traces: &[SearchTrace]) {
    for trace in traces {
        for req in planned_requests(trace, engine.template()) {
            engine.handle(&req.url, &req.headers);
        }
    }
}

/// Log entries of one search: preceding suggestions, the search, and the
/// resource, favicon and click requests that follow it. Indices point into
/// the log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Footprint {
    pub suggests: Vec<usize>,
    pub search: usize,
    pub resources: Vec<usize>,
    pub favicons: Vec<usize>,
    pub clicks: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segmentation {
    /// Footprints per session key, in log order.
    pub sessions: BTreeMap<String, Vec<Footprint>>,
    /// Entries that belong to no search.
    pub orphans: Vec<usize>,
}

pub fn segment_log(log: &[RequestLogEntry]) -> Segmentation {
    struct Open {
        pending: Vec<usize>,
        current: Option<Footprint>,
    }
    let mut open: BTreeMap<&str, Open> = BTreeMap::new();
    let mut seg = Segmentation::default();
    for (i, e) in log.iter().enumerate() {
        let s = open.entry(e.session_key.as_str()).or_insert(Open {
            pending: Vec::new(),
            current: None,
        });
        match e.endpoint {
            Endpoint::Suggest => s.pending.push(i),
            Endpoint::Search => {
                if let Some(f) = s.current.take() {
                    seg.sessions.entry(e.session_key.clone()).or_default().push(f);
                }
                s.current = Some(Footprint {
                    suggests: std::mem::take(&mut s.pending),
                    search: i,
                    ..Footprint::default()
                });
            }
            Endpoint::Resource | Endpoint::Favicon | Endpoint::ClickRedirect => match s.current.as_mut() {
                Some(f) => match e.endpoint {
                    Endpoint::Resource => f.resources.push(i),
                    Endpoint::Favicon => f.favicons.push(i),
                    _ => f.clicks.push(i),
                },
                None => seg.orphans.push(i),
            },
            Endpoint::NotFound => seg.orphans.push(i),
        }
    }
    for (key, s) in open {
        if let Some(f) = s.current {
            seg.sessions.entry(key.to_string()).or_default().push(f);
        }
        seg.orphans.extend(s.pending);
    }
    seg.orphans.sort_unstable();
    seg
}

/// The adversary-visible query log recovered from the request log.
pub fn observed_queries(log: &[RequestLogEntry]) -> Vec<ObservedQuery> {
    let seg = segment_log(log);
    let mut out: Vec<(usize, ObservedQuery)> = Vec::new();
    for (key, footprints) in &seg.sessions {
        for f in footprints {
            let e = &log[f.search];
            let ranks = f
                .clicks
                .iter()
                .filter_map(|&c| query_param(&log[c].url, "rank")?.parse::<u32>().ok())
                .collect();
            let text = query_param(&e.url, "q").unwrap_or_default();
            out.push((f.search, ObservedQuery::new(e.timestamp, key.clone(), text, ranks)));
        }
    }
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, q)| q).collect()
}
