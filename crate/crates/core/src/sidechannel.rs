//! Expansion of a query into its full HTTP footprint.
//!
//! User and decoy traces come out of the same [`synthesize_trace`] path;
//! only the referrer chain (kept per origin) and the click draw differ.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use url::form_urlencoded;

use crate::obfuscator::{Origin, Query};

/// Seconds between simulated keystrokes in the search box.
pub const KEYSTROKE_INTERVAL: f64 = 0.25;

#[derive(Debug, Error)]
pub enum SideChannelError {
    #[error("engine template has no search URL pattern containing `{{query}}`")]
    MissingUrlPattern,
    #[error("invalid engine template: {0}")]
    Template(String),
}

fn default_suggest_min_chars() -> usize {
    3
}
fn default_favicon_max_age() -> f64 {
    86_400.0
}
fn default_organic() -> usize {
    10
}

/// Declarative description of a search engine's observable behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineTemplate {
    pub name: String,
    /// Virtual host used for absolute URLs (referrers, favicon cache).
    pub host: String,
    /// Path and query with a `{query}` capture, e.g. `/search?q={query}&ie=utf-8`.
    #[serde(default)]
    pub search_url: String,
    /// Path and query with a `{prefix}` capture.
    #[serde(default)]
    pub suggest_url: Option<String>,
    #[serde(default = "default_suggest_min_chars")]
    pub suggest_min_chars: usize,
    /// Result-page resources, as paths.
    #[serde(default)]
    pub resources: Vec<String>,
    /// Named events of the page's interaction script.
    #[serde(default)]
    pub events: Vec<String>,
    pub favicon_url: String,
    #[serde(default = "default_favicon_max_age")]
    pub favicon_max_age: f64,
    #[serde(default = "default_organic")]
    pub organic_results: usize,
    #[serde(default)]
    pub sponsored_results: usize,
    #[serde(default)]
    pub sponsored_marker: String,
    /// Request headers the engine inspects for consistency.
    #[serde(default)]
    pub audited_headers: Vec<String>,
}

impl Default for EngineTemplate {
    fn default() -> Self {
        EngineTemplate {
            name: "mock".into(),
            host: "engine.test".into(),
            search_url: "/search?q={query}&ie=utf-8".into(),
            suggest_url: Some("/suggest?q={prefix}".into()),
            suggest_min_chars: 3,
            resources: (1..=7).map(|i| format!("/resource/r{i}")).collect(),
            events: vec!["focus".into(), "keydown".into(), "submit".into(), "load".into(), "scroll".into()],
            favicon_url: "/favicon.ico".into(),
            favicon_max_age: 86_400.0,
            organic_results: 10,
            sponsored_results: 2,
            sponsored_marker: "sponsored".into(),
            audited_headers: vec!["user-agent".into(), "accept-language".into()],
        }
    }
}

impl EngineTemplate {
    pub fn from_toml(text: &str) -> Result<Self, SideChannelError> {
        let t: EngineTemplate = toml::from_str(text).map_err(|e| SideChannelError::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("template serializes")
    }

    pub fn validate(&self) -> Result<(), SideChannelError> {
        if !self.search_url.contains("{query}") {
            return Err(SideChannelError::MissingUrlPattern);
        }
        if self.organic_results == 0 {
            return Err(SideChannelError::Template("organic_results must be positive".into()));
        }
        Ok(())
    }

    pub fn absolute(&self, path: &str) -> String {
        format!("http://{}{}", self.host, path)
    }
}

pub fn encode_component(s: &str) -> String {
    form_urlencoded::byte_serialize(s.as_bytes()).collect()
}

/// Query-string parameters of a path, decoded.
pub fn query_params(path: &str) -> Vec<(String, String)> {
    match path.split_once('?') {
        Some((_, q)) => form_urlencoded::parse(q.as_bytes()).into_owned().collect(),
        None => Vec::new(),
    }
}

pub fn query_param(path: &str, name: &str) -> Option<String> {
    query_params(path).into_iter().find(|(k, _)| k == name).map(|(_, v)| v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLink {
    pub rank: u32,
    pub url: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultPage {
    pub organic: Vec<ResultLink>,
    pub sponsored: Vec<ResultLink>,
}

fn text_seed(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Deterministic result page for a query text.
pub fn result_page(template: &EngineTemplate, text: &str) -> ResultPage {
    let mut rng = ChaCha8Rng::seed_from_u64(text_seed(text));
    let slug: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    let link = |rng: &mut ChaCha8Rng, rank: usize, kind: &str| ResultLink {
        rank: rank as u32,
        url: format!("http://{kind}{:04}.example/{slug}/{rank}", rng.gen_range(0..10_000)),
        title: format!("{text} ({kind} {rank})"),
    };
    let organic = (1..=template.organic_results).map(|r| link(&mut rng, r, "site")).collect();
    let sponsored = (1..=template.sponsored_results).map(|r| link(&mut rng, r, "ads")).collect();
    ResultPage { organic, sponsored }
}

pub fn render_result_page(template: &EngineTemplate, text: &str) -> String {
    let page = result_page(template, text);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut html = format!("<!doctype html><html><head><title>{}</title></head><body>\n", esc(text));
    for r in &template.resources {
        html.push_str(&format!("<link rel=\"preload\" href=\"{r}\">\n"));
    }
    for s in &page.sponsored {
        html.push_str(&format!(
            "<div class=\"{}\"><a href=\"/click?rank=s{}&amp;to={}\">{}</a></div>\n",
            template.sponsored_marker,
            s.rank,
            encode_component(&s.url),
            esc(&s.title)
        ));
    }
    for o in &page.organic {
        html.push_str(&format!(
            "<div class=\"result\"><a href=\"/click?rank={}&amp;to={}\">{}</a></div>\n",
            o.rank,
            encode_component(&o.url),
            esc(&o.title)
        ));
    }
    html.push_str("</body></html>\n");
    html
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaviconCache {
    /// host -> (expires_at, stored_at)
    pub entries: BTreeMap<String, (f64, f64)>,
}

impl FaviconCache {
    pub fn is_valid(&self, host: &str, now: f64) -> bool {
        self.entries.get(host).is_some_and(|&(expires, _)| now < expires)
    }
}

/// Downloads the icon only when the cache holds no valid entry; a download
/// stores a fresh entry valid for `max_age` seconds. Returns whether a
/// download happened.
pub fn fetch_favicon(cache: &mut FaviconCache, host: &str, now: f64, max_age: f64) -> bool {
    if cache.is_valid(host, now) {
        return false;
    }
    cache.entries.insert(host.to_string(), (now + max_age, now));
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrowserIdentity {
    pub user_agent: String,
    pub accept_language: String,
    pub cookie_sid: String,
}

/// One browser's state toward one engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub identity: BrowserIdentity,
    /// Search URL pattern of the user's last real search, `{query}` capture.
    pub captured_search: Option<String>,
    /// Last URL the decoy generator "visited".
    pub decoy_last: Option<String>,
    /// Last URL of the user's own search activity.
    pub user_last: Option<String>,
    pub favicon: FaviconCache,
}

impl SessionState {
    pub fn new(identity: BrowserIdentity) -> Self {
        SessionState {
            identity,
            captured_search: None,
            decoy_last: None,
            user_last: None,
            favicon: FaviconCache::default(),
        }
    }

    /// Advances the referrer chain of the trace's origin: the last click
    /// target if any, else the result page.
    pub fn observe(&mut self, template: &EngineTemplate, trace: &SearchTrace) {
        let last = trace
            .clicks
            .last()
            .map(|c| c.url.clone())
            .unwrap_or_else(|| template.absolute(&trace.request_url));
        match trace.query.origin {
            Origin::Decoy => self.decoy_last = Some(last),
            Origin::User => self.user_last = Some(last),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Click {
    pub rank: u32,
    pub url: String,
    pub content_fetched: bool,
    pub sponsored: bool,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub query: Query,
    pub session_key: String,
    /// Path and query of the search request.
    pub request_url: String,
    pub headers: BTreeMap<String, String>,
    pub subresources: Vec<String>,
    pub favicon_fetched: bool,
    pub suggestion_prefixes: Vec<String>,
    /// Paths of the suggestion requests, one per prefix.
    pub suggestion_urls: Vec<String>,
    pub interaction_events: Vec<String>,
    pub clicks: Vec<Click>,
}

/// Previous action of the same origin's chain, or empty on cold start. The
/// decoy chain never contains a URL the user visited.
pub fn compute_referrer(session: &SessionState, current: &Query) -> String {
    match current.origin {
        Origin::Decoy => session.decoy_last.clone().unwrap_or_default(),
        Origin::User => session.user_last.clone().unwrap_or_default(),
    }
}

/// Prefixes of `text` (by character) with at least `min_chars` characters.
pub fn suggestion_prefixes(text: &str, min_chars: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    (min_chars.max(1)..=chars.len())
        .map(|n| chars[..n].iter().collect())
        .collect()
}

pub fn synthesize_trace(
    query: &Query,
    template: &EngineTemplate,
    session: &mut SessionState,
) -> Result<SearchTrace, SideChannelError> {
    template.validate()?;
    let pattern = session.captured_search.clone().unwrap_or_else(|| template.search_url.clone());
    let request_url = pattern.replace("{query}", &encode_component(&query.text));
    if query.origin == Origin::User {
        session.captured_search = Some(pattern);
    }

    let mut headers = BTreeMap::new();
    headers.insert("user-agent".to_string(), session.identity.user_agent.clone());
    headers.insert("accept-language".to_string(), session.identity.accept_language.clone());
    headers.insert("cookie".to_string(), format!("sid={}", session.identity.cookie_sid));
    let referrer = compute_referrer(session, query);
    if !referrer.is_empty() {
        headers.insert("referer".to_string(), referrer);
    }

    let (suggestion_prefixes, suggestion_urls) = match &template.suggest_url {
        Some(pattern) => {
            let prefixes = suggestion_prefixes(&query.text, template.suggest_min_chars);
            let urls = prefixes
                .iter()
                .map(|p| pattern.replace("{prefix}", &encode_component(p)))
                .collect();
            (prefixes, urls)
        }
        None => (Vec::new(), Vec::new()),
    };

    let favicon_fetched = fetch_favicon(&mut session.favicon, &template.host, query.timestamp, template.favicon_max_age);

    Ok(SearchTrace {
        query: query.clone(),
        session_key: session.identity.cookie_sid.clone(),
        request_url,
        headers,
        subresources: template.resources.clone(),
        favicon_fetched,
        suggestion_prefixes,
        suggestion_urls,
        interaction_events: template.events.clone(),
        clicks: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RankBias {
    /// Zipf over the organic ranks with the given exponent.
    Zipf(f64),
    PointMass(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickModel {
    pub rate: f64,
    pub rank_bias: RankBias,
}

impl Default for ClickModel {
    fn default() -> Self {
        ClickModel {
            rate: crate::obfuscator::DEFAULT_CLICK_RATE,
            rank_bias: RankBias::Zipf(1.5),
        }
    }
}

/// With probability `rate`, appends one click on an organic result chosen
/// by the rank bias, a few seconds after the search. Sponsored results are
/// never clicked and clicked content is never fetched.
pub fn simulate_clicks(mut trace: SearchTrace, template: &EngineTemplate, model: &ClickModel, seed: u64) -> SearchTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if model.rate <= 0.0 || rng.gen::<f64>() >= model.rate {
        return trace;
    }
    let n = template.organic_results as u64;
    let rank = match model.rank_bias {
        RankBias::Zipf(s) => {
            let z = Zipf::new(n, s).expect("valid zipf parameters");
            z.sample(&mut rng) as u32
        }
        RankBias::PointMass(r) => r.clamp(1, n as u32),
    };
    let page = result_page(template, &trace.query.text);
    let link = &page.organic[rank as usize - 1];
    trace.clicks.push(Click {
        rank,
        url: link.url.clone(),
        content_fetched: false,
        sponsored: false,
        time: trace.query.timestamp + rng.gen_range(3.0..30.0),
    });
    trace
}

/// Runs the full client path for one query: trace, clicks, chain update.
pub fn issue_query(
    query: &Query,
    template: &EngineTemplate,
    session: &mut SessionState,
    clicks: &ClickModel,
    seed: u64,
) -> Result<SearchTrace, SideChannelError> {
    let trace = synthesize_trace(query, template, session)?;
    let trace = simulate_clicks(trace, template, clicks, seed);
    session.observe(template, &trace);
    Ok(trace)
}
