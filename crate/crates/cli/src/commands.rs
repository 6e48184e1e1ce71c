use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context as _};
use decoylab::adversary::{read_verdict, write_verdict, FilterVerdict};
use decoylab::config::RunConfig;
use decoylab::corpus::{build_pool, parse_feed, read_pool_records, FeedItem, KeywordPool, PoolSet, PoolSource, DEFAULT_MAX_NGRAM};
use decoylab::evaluation::{confusion, doubt_attained, read_metrics, resiliency, tnr, write_metrics, MetricRecord};
use decoylab::mockengine::audit::audit;
use decoylab::mockengine::server::{replay_http, EngineClient, EngineServer};
use decoylab::mockengine::{observed_queries, replay_in_process};
use decoylab::obfuscator::{GuaranteeParams, Origin};
use decoylab::querylog::{read_ground_truth, read_log, write_ground_truth, write_log, looks_like_ground_truth, ObservedQuery};
use decoylab::sim::{simulate as run_simulation, SimError};
use decoylab::topics::{TopicId, TopicUniverse};
use decoylab::world::{render_rss, World};

/// Exit code 1 for bad input, 2 for failures while running.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Runtime(e) => e,
        }
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub engine_addr: Option<String>,
}

impl Context {
    pub fn load(config: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>, engine_addr: Option<String>) -> Result<Self, Failure> {
        let mut cfg = match config {
            Some(p) => RunConfig::load(p).map_err(invalid)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let out = out.unwrap_or_else(|| cfg.out.clone());
        Ok(Context { cfg, out, engine_addr })
    }

    fn universe(&self) -> Result<TopicUniverse, Failure> {
        self.cfg.load_universe().map_err(invalid)
    }

    fn world(&self) -> Result<World, Failure> {
        Ok(World::generate_in(self.cfg.world, self.universe()?))
    }

    fn write(&self, rel: &str, contents: &str) -> Result<PathBuf, Failure> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))
                .map_err(runtime)?;
        }
        fs::write(&path, contents)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime)?;
        Ok(path)
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(invalid)
}

fn pool_file(topic: TopicId) -> String {
    format!("pools/topic-{topic}.tsv")
}

fn parse_feed_arg(arg: &str) -> Result<(TopicId, PathBuf), Failure> {
    let (topic, path) = arg
        .split_once('=')
        .ok_or_else(|| invalid(anyhow!("--feed expects TOPIC=PATH, got `{arg}`")))?;
    let topic: TopicId = topic
        .trim()
        .parse()
        .map_err(|_| invalid(anyhow!("--feed topic `{topic}` is not a topic id")))?;
    Ok((topic, PathBuf::from(path)))
}

pub fn corpus_build(ctx: &Context, feed_args: &[String], synthetic: bool) -> Result<(), Failure> {
    let mut feeds: Vec<(TopicId, PathBuf)> = ctx.cfg.feeds.iter().map(|f| (f.topic, f.path.clone())).collect();
    for arg in feed_args {
        feeds.push(parse_feed_arg(arg)?);
    }
    if feeds.is_empty() && !synthetic {
        return Err(invalid(anyhow!("no feeds given; pass --feed TOPIC=PATH or --synthetic")));
    }
    let universe = ctx.universe()?;
    let mut by_topic: BTreeMap<TopicId, Vec<FeedItem>> = BTreeMap::new();
    for (topic, path) in &feeds {
        if !universe.contains(*topic) {
            return Err(invalid(anyhow!("topic {topic} for {} is not in the universe", path.display())));
        }
        let raw = fs::read(path)
            .with_context(|| format!("reading feed {}", path.display()))
            .map_err(invalid)?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("feed");
        let items = parse_feed(&raw, id)
            .with_context(|| format!("parsing feed {}", path.display()))
            .map_err(invalid)?;
        if items.is_empty() {
            eprintln!("warning: feed {} has no items", path.display());
        }
        by_topic.entry(*topic).or_default().extend(items);
    }
    for (topic, items) in &by_topic {
        let pool = build_pool(items, *topic, DEFAULT_MAX_NGRAM).map_err(runtime)?;
        if pool.is_empty() {
            eprintln!("warning: pool for topic {topic} is empty");
        }
        let path = ctx.write(&pool_file(*topic), &pool.to_records())?;
        println!("pool {topic}: {} n-grams -> {}", pool.len(), path.display());
    }

    if synthetic {
        let world = ctx.world()?;
        for feed in world.feeds.values().flatten() {
            ctx.write(&format!("feeds/{}.xml", feed.id), &render_rss(feed))?;
        }
        let pools = world.directory_pools();
        for pool in pools.pools() {
            ctx.write(&format!("synthetic/{}", pool_file(pool.topic_id)), &pool.to_records())?;
        }
        let words: String = world
            .word_frequencies()
            .iter()
            .map(|(w, f)| format!("{w}\t{f}\n"))
            .collect();
        ctx.write("synthetic/words.tsv", &words)?;
        let n: usize = world.feeds.values().map(Vec::len).sum();
        println!("synthetic world: {n} feeds, {} pools -> {}", pools.len(), ctx.out.display());
    }
    Ok(())
}

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::InvalidRate(_) | SimError::EmptyHistory | SimError::Obfuscator(_) => invalid(e),
        _ => runtime(e),
    }
}

pub fn simulate(ctx: &Context) -> Result<(), Failure> {
    let template = ctx.cfg.load_template().map_err(invalid)?;
    let world = ctx.world()?;
    let sim_cfg = ctx.cfg.sim_config();
    let sim = run_simulation(&world, &sim_cfg, &template).map_err(sim_failure)?;

    let engine = Arc::new(sim.engine());
    match &ctx.engine_addr {
        Some(addr) => {
            let client = EngineClient::new(addr);
            client.ping().map_err(runtime)?;
            replay_http(&client, &sim.traces, &template).map_err(runtime)?;
            // the remote keeps its own log; mirror the replay locally
            replay_in_process(&engine, &sim.traces);
        }
        None => {
            let server = EngineServer::start(Arc::clone(&engine), "127.0.0.1:0", 2).map_err(runtime)?;
            let client = EngineClient::new(&server.addr().to_string());
            client.ping().map_err(runtime)?;
            engine.clear_log();
            replay_http(&client, &sim.traces, &template).map_err(runtime)?;
            server.shutdown();
        }
    }
    let log = engine.log();
    let observed = observed_queries(&log);
    if observed.len() != sim.traces.len() {
        return Err(runtime(anyhow!(
            "engine logged {} searches for {} issued",
            observed.len(),
            sim.traces.len()
        )));
    }
    let report = audit(&log, &sim.traces, &sim.audit_context()).map_err(runtime)?;

    let key = sim.session_key().to_string();
    let history: Vec<ObservedQuery> = sim
        .history
        .queries
        .iter()
        .zip(&sim.history.clicked)
        .map(|(q, &c)| ObservedQuery::new(q.timestamp, key.clone(), q.text.clone(), if c { vec![1] } else { Vec::new() }))
        .collect();
    let requests: String = log
        .iter()
        .map(|e| serde_json::to_string(e).map(|s| s + "\n"))
        .collect::<Result<_, _>>()
        .map_err(runtime)?;
    let traces: String = sim
        .traces
        .iter()
        .map(|t| serde_json::to_string(t).map(|s| s + "\n"))
        .collect::<Result<_, _>>()
        .map_err(runtime)?;

    ctx.write("queries.log", &write_log(&observed))?;
    ctx.write("history.log", &write_log(&history))?;
    ctx.write("requests.jsonl", &requests)?;
    ctx.write("truth/ground_truth.tsv", &write_ground_truth(&sim.ground_truth()))?;
    ctx.write("truth/traces.jsonl", &traces)?;

    let users = sim.activity.queries.len();
    println!("user queries: {users}");
    println!("decoys: {} ({:.2}/h)", sim.decoys.len(), sim.decoy_rate(sim_cfg.weeks));
    println!("engine requests: {}", log.len());
    println!("audit flags: {}", report.total_flags());
    println!("wrote {}", ctx.out.display());
    Ok(())
}

fn load_pools(dir: &Path) -> Result<PoolSet, Failure> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading pool directory {}", dir.display()))
        .map_err(invalid)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    entries.sort();
    let mut set = PoolSet::default();
    for p in entries {
        let file = fs::File::open(&p)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(invalid)?;
        let pools: Vec<KeywordPool> = read_pool_records(BufReader::new(file), PoolSource::FeedExtracted)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(invalid)?;
        for pool in pools {
            set.insert(pool);
        }
    }
    if set.is_empty() {
        return Err(invalid(anyhow!("no pools found in {}", dir.display())));
    }
    Ok(set)
}

fn read_adversary_log(path: &Path) -> Result<Vec<ObservedQuery>, Failure> {
    let text = read_text(path)?;
    if text.lines().next().is_some_and(looks_like_ground_truth) {
        return Err(invalid(anyhow!(
            "{} is a ground-truth file; attacks only take adversary-visible logs",
            path.display()
        )));
    }
    read_log(text.as_bytes())
        .with_context(|| format!("reading {}", path.display()))
        .map_err(invalid)
}

pub fn attack(
    ctx: &Context,
    log_path: &Path,
    attack_id: u8,
    history_path: Option<&Path>,
    threshold: Option<f64>,
    pools_dir: Option<&Path>,
) -> Result<(), Failure> {
    let log = read_adversary_log(log_path)?;
    let history = history_path.map(read_adversary_log).transpose()?;
    let threshold = threshold.unwrap_or(ctx.cfg.adversary.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(invalid(anyhow!("threshold must lie in [0, 1], got {threshold}")));
    }
    let universe = ctx.universe()?;
    let pools = match pools_dir {
        Some(dir) => load_pools(dir)?,
        None => World::generate_in(ctx.cfg.world, universe.clone()).directory_pools(),
    };
    let adversary = ctx.cfg.adversary.adversary(&universe, &pools);
    let verdict = match attack_id {
        1 => {
            let (_, profile) = adversary.learn_log_profile(history.as_deref().unwrap_or(&log));
            let scores = log.iter().map(|q| adversary.attack1_single_query(q, &profile)).collect();
            FilterVerdict::from_scores(scores, threshold)
        }
        2 => adversary.attack2_filter_set(&log, threshold),
        _ => {
            let history = history.ok_or_else(|| invalid(anyhow!("attack 3 needs --history")))?;
            let (_, profile) = adversary.learn_log_profile(&history);
            adversary
                .attack3_profile_filter(&log, &profile, threshold)
                .map_err(invalid)?
        }
    };
    let path = ctx.write("verdict.tsv", &write_verdict(&verdict))?;
    println!(
        "attack {attack_id}: {} of {} queries flagged at threshold {threshold} -> {}",
        verdict.flagged.len(),
        verdict.per_query.len(),
        path.display()
    );
    Ok(())
}

pub fn evaluate(ctx: &Context, verdict_path: &Path, truth_path: &Path, test_id: Option<String>) -> Result<(), Failure> {
    let verdict = read_verdict(&read_text(verdict_path)?)
        .with_context(|| format!("reading {}", verdict_path.display()))
        .map_err(invalid)?;
    let truth = read_ground_truth(read_text(truth_path)?.as_bytes())
        .with_context(|| format!("reading {}", truth_path.display()))
        .map_err(invalid)?;
    let origins: Vec<Origin> = truth.iter().map(|r| r.origin).collect();
    let counts = confusion(&verdict, &origins).map_err(invalid)?;
    let beta = ctx.cfg.adversary.beta;
    let res = resiliency(&verdict.sweep(), &origins, beta).map_err(invalid)?;
    let g = ctx.cfg.guarantee;
    let (y, x) = (counts.tn + counts.fp, counts.tp + counts.fn_);
    let params = GuaranteeParams::new(y, x, y, x, g.p_ob, g.epsilon).map_err(invalid)?;
    let doubt = doubt_attained(&verdict, &origins, &params).map_err(invalid)?;

    let id = test_id.unwrap_or_else(|| format!("seed{}", ctx.cfg.seed));
    let mut records = Vec::new();
    let mut put = |metric: &str, value: f64| {
        records.push(MetricRecord {
            metric: metric.to_string(),
            test_id: id.clone(),
            value,
        })
    };
    put("user_queries", y as f64);
    put("decoy_queries", x as f64);
    if let Ok(v) = tnr(&counts) {
        put("tnr", v);
    }
    if let Some(v) = counts.user_drop_rate() {
        put("user_drop_rate", v);
    }
    if let Some(v) = counts.decoy_precision() {
        put("decoy_precision", v);
    }
    if let Some(v) = counts.decoy_recall() {
        put("decoy_recall", v);
    }
    put("beta", beta);
    match res.alpha {
        Some(a) => put("alpha", a),
        None => put("alpha_unattainable", 1.0),
    }
    let best = res
        .curve
        .points
        .iter()
        .filter_map(|p| p.decoy_precision)
        .fold(0.0, f64::max);
    put("max_decoy_precision", best);
    let attained = doubt.per_query.iter().filter(|(_, a)| *a).count();
    put("epsilon", g.epsilon);
    put("p_ob", g.p_ob);
    put(
        "doubt_fraction",
        if doubt.per_query.is_empty() { 1.0 } else { attained as f64 / doubt.per_query.len() as f64 },
    );
    put("doubt_all", f64::from(u8::from(doubt.all)));

    ctx.write("metrics.tsv", &write_metrics(&records))?;
    let text = render_report(&records);
    ctx.write("report.txt", &text)?;
    print!("{text}");
    Ok(())
}

pub fn report(ctx: &Context, metrics: &[PathBuf]) -> Result<(), Failure> {
    let default = [ctx.out.join("metrics.tsv")];
    let paths = if metrics.is_empty() { &default[..] } else { metrics };
    let mut records = Vec::new();
    for p in paths {
        let parsed = read_metrics(&read_text(p)?)
            .map_err(|e| anyhow!(e))
            .with_context(|| format!("reading {}", p.display()))
            .map_err(invalid)?;
        records.extend(parsed);
    }
    let text = render_report(&records);
    ctx.write("report.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn value(records: &[&MetricRecord], metric: &str) -> Option<f64> {
    records.iter().find(|r| r.metric == metric).map(|r| r.value)
}

pub fn render_report(records: &[MetricRecord]) -> String {
    let mut by_test: BTreeMap<&str, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by_test.entry(&r.test_id).or_default().push(r);
    }
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
    let mut out = String::new();
    for (id, rs) in &by_test {
        out.push_str(&format!("[{id}]\n"));
        let (y, x) = (value(rs, "user_queries"), value(rs, "decoy_queries"));
        if let (Some(y), Some(x)) = (y, x) {
            out.push_str(&format!("queries: {y} user, {x} decoy\n"));
        }
        if value(rs, "tnr").is_some() || y.is_some() {
            out.push_str(&format!(
                "tnr: {} (user drop {}, decoy precision {}, decoy recall {})\n",
                fmt(value(rs, "tnr")),
                fmt(value(rs, "user_drop_rate")),
                fmt(value(rs, "decoy_precision")),
                fmt(value(rs, "decoy_recall"))
            ));
        }
        let beta = fmt(value(rs, "beta"));
        if let Some(a) = value(rs, "alpha") {
            out.push_str(&format!("alpha: {a:.4} at beta {beta}\n"));
        } else if value(rs, "alpha_unattainable").is_some() {
            out.push_str(&format!(
                "alpha: unattainable at beta {beta} (best decoy precision {})\n",
                fmt(value(rs, "max_decoy_precision"))
            ));
        }
        if let Some(f) = value(rs, "doubt_fraction") {
            let all = value(rs, "doubt_all") == Some(1.0);
            out.push_str(&format!(
                "doubt: {:.4} of user queries attain epsilon {} (all: {})\n",
                f,
                fmt(value(rs, "epsilon")),
                if all { "yes" } else { "no" }
            ));
        }
        for r in rs.iter().filter(|r| {
            ![
                "user_queries",
                "decoy_queries",
                "tnr",
                "user_drop_rate",
                "decoy_precision",
                "decoy_recall",
                "beta",
                "alpha",
                "alpha_unattainable",
                "max_decoy_precision",
                "doubt_fraction",
                "doubt_all",
                "epsilon",
                "p_ob",
            ]
            .contains(&r.metric.as_str())
        }) {
            out.push_str(&format!("{}: {}\n", r.metric, r.value));
        }
    }
    out
}
