use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use decoylab::corpus::PoolSet;
use decoylab::evaluation::read_metrics;
use decoylab::mockengine::server::EngineServer;
use decoylab::mockengine::MockEngine;
use decoylab::querylog::{looks_like_ground_truth, read_ground_truth};
use decoylab::sidechannel::EngineTemplate;

const SMALL: &str = r#"
seed = 5

[simulation]
rate = 0.5
history_weeks = 1

[simulation.user]
queries_per_week = 80
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decoylab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rss(titles: &[&str]) -> String {
    let items: String = titles
        .iter()
        .map(|t| format!("<item><title>{t}</title><pubDate>Mon, 02 Jan 2012 10:00:00 GMT</pubDate></item>"))
        .collect();
    format!("<?xml version=\"1.0\"?><rss version=\"2.0\"><channel><title>x</title>{items}</channel></rss>")
}

fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path
}

#[test]
fn corpus_build_is_deterministic_and_warns_on_empty_feeds() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("politics.xml");
    let b = dir.path().join("sports.xml");
    let empty = dir.path().join("empty.xml");
    fs::write(&a, rss(&["Senate Vote on Budget", "White House backs Senate Vote"])).unwrap();
    fs::write(&b, rss(&["Real Madrid wins Champions League"])).unwrap();
    fs::write(&empty, rss(&[])).unwrap();
    let build = |out: &Path| {
        run(&[
            "--out",
            s(out),
            "corpus-build",
            "--feed",
            &format!("6={}", s(&a)),
            "--feed",
            &format!("13={}", s(&b)),
            "--feed",
            &format!("14={}", s(&empty)),
        ])
    };
    let (o1, o2) = (dir.path().join("o1"), dir.path().join("o2"));
    let r1 = build(&o1);
    assert!(r1.status.success(), "{}", stderr(&r1));
    assert!(stderr(&r1).contains("warning"));
    assert!(build(&o2).status.success());
    for name in ["topic-6.tsv", "topic-13.tsv", "topic-14.tsv"] {
        let x = fs::read(o1.join("pools").join(name)).unwrap();
        let y = fs::read(o2.join("pools").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    let politics = fs::read_to_string(o1.join("pools/topic-6.tsv")).unwrap();
    assert!(politics.contains("Senate Vote\t"));
    assert!(fs::read_to_string(o1.join("pools/topic-14.tsv")).unwrap().is_empty());
}

#[test]
fn missing_feed_is_a_validation_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.xml");
    let o = run(&["--out", s(dir.path()), "corpus-build", "--feed", &format!("6={}", s(&missing))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere.xml"));
}

#[test]
fn synthetic_corpus_build_writes_feeds_and_pools() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[world]\nfeeds_per_topic = 2\nitems_per_feed = 5\n").unwrap();
    let o = run(&["--config", s(&cfg), "--out", s(dir.path()), "corpus-build", "--synthetic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("synthetic/words.tsv").exists());
    assert!(fs::read_dir(dir.path().join("feeds")).unwrap().count() > 10);
}

#[test]
fn default_week_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let sim = run(&["--out", s(out), "simulate"]);
    assert!(sim.status.success(), "{}", stderr(&sim));
    let text = stdout(&sim);
    let rate: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("decoys: "))
        .and_then(|l| l.split('(').nth(1))
        .and_then(|l| l.strip_suffix("/h)"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((rate - 3.0).abs() <= 0.6, "rate {rate}");
    assert!(text.contains("audit flags: 0"));

    let log = fs::read_to_string(out.join("queries.log")).unwrap();
    assert!(log.lines().all(|l| !looks_like_ground_truth(l)));
    assert!(!fs::read_to_string(out.join("requests.jsonl")).unwrap().contains("decoy"));

    let attack = run(&["--out", s(out), "attack", "--attack", "2", "--log", s(&out.join("queries.log"))]);
    assert!(attack.status.success(), "{}", stderr(&attack));
    let eval = run(&[
        "--out",
        s(out),
        "evaluate",
        "--verdict",
        s(&out.join("verdict.tsv")),
        "--ground-truth",
        s(&out.join("truth/ground_truth.tsv")),
    ]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let report = stdout(&eval);
    for key in ["tnr:", "alpha:", "doubt:"] {
        assert!(report.contains(key), "{report}");
    }
    let metrics = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    let parsed = read_metrics(&metrics).unwrap();
    assert!(parsed.iter().any(|m| m.metric == "tnr"));
    let again = run(&["--out", s(out), "report", "--metrics", s(&out.join("metrics.tsv"))]);
    assert_eq!(stdout(&again), report);

    let a3 = run(&[
        "--out",
        s(out),
        "attack",
        "--attack",
        "3",
        "--log",
        s(&out.join("queries.log")),
        "--history",
        s(&out.join("history.log")),
    ]);
    assert!(a3.status.success(), "{}", stderr(&a3));
}

#[test]
fn seeded_simulation_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let (o1, o2) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&o1, &o2] {
        let r = run(&["--config", s(&cfg), "--out", s(o), "simulate"]);
        assert!(r.status.success(), "{}", stderr(&r));
    }
    for f in ["queries.log", "history.log", "requests.jsonl", "truth/ground_truth.tsv", "truth/traces.jsonl"] {
        assert_eq!(fs::read(o1.join(f)).unwrap(), fs::read(o2.join(f)).unwrap(), "{f}");
    }
    let o3 = dir.path().join("c");
    assert!(run(&["--config", s(&cfg), "--seed", "6", "--out", s(&o3), "simulate"]).status.success());
    assert_ne!(fs::read(o1.join("queries.log")).unwrap(), fs::read(o3.join("queries.log")).unwrap());
}

#[test]
fn zero_rate_gives_a_user_only_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL.replace("rate = 0.5", "rate = 0.0")).unwrap();
    let r = run(&["--config", s(&cfg), "--out", s(dir.path()), "simulate"]);
    assert!(r.status.success(), "{}", stderr(&r));
    let truth = read_ground_truth(fs::read(dir.path().join("truth/ground_truth.tsv")).unwrap().as_slice()).unwrap();
    assert!(!truth.is_empty());
    assert!(truth.iter().all(|t| t.origin.as_str() == "user"));
}

#[test]
fn replays_against_a_running_engine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let engine = Arc::new(MockEngine::new(EngineTemplate::default(), &PoolSet::default()));
    let server = EngineServer::start(Arc::clone(&engine), "127.0.0.1:0", 2).unwrap();
    let addr = server.addr().to_string();
    let r = run(&["--config", s(&cfg), "--out", s(dir.path()), "--engine-addr", &addr, "simulate"]);
    server.shutdown();
    assert!(r.status.success(), "{}", stderr(&r));
    let local = fs::read_to_string(dir.path().join("requests.jsonl")).unwrap().lines().count();
    // one extra request: the reachability check
    assert_eq!(engine.log().len(), local + 1);
}

#[test]
fn unreachable_engine_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let r = run(&["--config", s(&cfg), "--out", s(dir.path()), "--engine-addr", "127.0.0.1:1", "simulate"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("unreachable"));
}

#[test]
fn adversary_commands_refuse_ground_truth_and_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = small_config(out, "");
    assert!(run(&["--config", s(&cfg), "--out", s(out), "simulate"]).status.success());
    let truth = out.join("truth/ground_truth.tsv");

    let refused = run(&["--out", s(out), "attack", "--log", s(&truth)]);
    assert_eq!(refused.status.code(), Some(1));
    assert!(stderr(&refused).contains("ground-truth"));
    let refused = run(&["--out", s(out), "attack", "--log", s(&out.join("queries.log")), "--history", s(&truth)]);
    assert_eq!(refused.status.code(), Some(1));
    let no_history = run(&["--out", s(out), "attack", "--attack", "3", "--log", s(&out.join("queries.log"))]);
    assert_eq!(no_history.status.code(), Some(1));

    assert!(run(&["--config", s(&cfg), "--out", s(out), "attack", "--log", s(&out.join("queries.log"))])
        .status
        .success());
    let text = fs::read_to_string(&truth).unwrap();
    let short = out.join("short.tsv");
    fs::write(&short, text.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    let mismatch = run(&["--out", s(out), "evaluate", "--verdict", s(&out.join("verdict.tsv")), "--ground-truth", s(&short)]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(stderr(&mismatch).contains("ground truth has"), "{}", stderr(&mismatch));
}

#[test]
fn invalid_configs_and_arguments_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[simulation]\nrate = -3.0\n").unwrap();
    assert_eq!(run(&["--config", s(&cfg), "simulate"]).status.code(), Some(1));
    assert_eq!(run(&["--config", s(&dir.path().join("absent.toml")), "simulate"]).status.code(), Some(1));
    assert_eq!(run(&["attack", "--attack", "4", "--log", "x"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
