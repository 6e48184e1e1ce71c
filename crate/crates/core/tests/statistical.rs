//! Seeded statistical checks on full simulations.

use std::collections::{BTreeMap, BTreeSet};

use decoylab::adversary::{query_set_jaccard, Adversary, FilterVerdict};
use decoylab::obfuscator::{generate_decoys, Origin, PlanMode};
use decoylab::querylog::ObservedQuery;
use decoylab::sidechannel::EngineTemplate;
use decoylab::sim::{simulate, SimConfig, Simulation};
use decoylab::stats::{chi_squared_gof, chi_squared_two_sample};
use decoylab::timing::{sample_schedule, ScheduleRequest};
use decoylab::topics::TopicId;
use decoylab::world::{World, WorldConfig};

fn world() -> World {
    World::generate(WorldConfig::default())
}

fn run(world: &World, cfg: &SimConfig) -> Simulation {
    simulate(world, cfg, &EngineTemplate::default()).unwrap()
}

fn histogram<K: Ord + Clone>(keys: impl IntoIterator<Item = K>) -> BTreeMap<K, u64> {
    let mut h = BTreeMap::new();
    for k in keys {
        *h.entry(k).or_insert(0) += 1;
    }
    h
}

#[test]
fn decoy_topics_converge_to_plan_weights() {
    let world = world();
    let sim = run(&world, &SimConfig::default());
    let plan = sim.plan.as_ref().unwrap();
    let profile = decoylab::timing::TimingProfile {
        sessions: sim.activity.sessions.clone(),
        ..sim.timing.clone()
    };
    // over ten thousand decoys in the same browser sessions
    let req = ScheduleRequest::new(sim.active_periods[0].0, 7.0 * 86_400.0, 11_800.0 / 168.0);
    let schedule = sample_schedule(&profile, &req, 11).unwrap();
    assert!(schedule.len() >= 10_000, "{}", schedule.len());
    let decoys = generate_decoys(plan, &schedule, &sim.decoy_pools, 12).unwrap();
    let observed = histogram(decoys.iter().map(|q| q.topic_id));
    let expected: BTreeMap<TopicId, f64> = plan.topic_weights.weights.clone();
    let gof = chi_squared_gof(&observed, &expected);
    println!("topic gof over {} decoys: {gof:?}", decoys.len());
    assert!(!gof.rejects(0.01));
}

#[test]
fn distinct_seeds_give_disjoint_decoy_streams() {
    let world = world();
    let sim = run(&world, &SimConfig::default());
    let plan = sim.plan.as_ref().unwrap();
    let schedule: Vec<f64> = (0..1000).map(|i| 1.0e9 + 60.0 * i as f64).collect();
    let logs: Vec<Vec<ObservedQuery>> = (0..4)
        .map(|s| {
            generate_decoys(plan, &schedule, &sim.decoy_pools, 100 + s)
                .unwrap()
                .into_iter()
                .map(|q| ObservedQuery::new(q.timestamp, "s", q.text, Vec::new()))
                .collect()
        })
        .collect();
    for i in 0..logs.len() {
        for j in i + 1..logs.len() {
            let jac = query_set_jaccard(&logs[i], &logs[j]);
            println!("seeds {i},{j}: jaccard {jac:.4}");
            assert!(jac < 0.05, "{jac}");
        }
    }
}

fn flag_rates(flagged: &BTreeSet<usize>, origins: &[Origin]) -> (f64, f64) {
    let rate = |o: Origin| {
        let idx: Vec<usize> = (0..origins.len()).filter(|&i| origins[i] == o).collect();
        idx.iter().filter(|i| flagged.contains(i)).count() as f64 / idx.len().max(1) as f64
    };
    (rate(Origin::Decoy), rate(Origin::User))
}

#[test]
fn flag_rates_match_across_origins() {
    let world = world();
    let cfg = SimConfig {
        weeks: 2,
        ..SimConfig::default()
    };
    let sim = run(&world, &cfg);
    let replay = sim.replay_in_process();
    let origins = sim.origins();
    assert!(origins.len() >= 2000, "{}", origins.len());
    let pools = world.directory_pools();
    let adv = Adversary::new(&world.universe, &pools);
    let (_, history_profile) = adv.learn_log_profile(
        &sim.history
            .queries
            .iter()
            .map(|q| ObservedQuery::new(q.timestamp, "s", q.text.clone(), Vec::new()))
            .collect::<Vec<_>>(),
    );
    let a1 = FilterVerdict::from_scores(
        replay
            .observed
            .iter()
            .map(|q| adv.attack1_single_query(q, &history_profile))
            .collect(),
        0.5,
    );
    let a2 = adv.attack2_filter_set(&replay.observed, 0.5);
    let gaps = |v: &FilterVerdict| -> (f64, f64) {
        v.sweep()
            .iter()
            .map(|v| {
                let (d, u) = flag_rates(&v.flagged, &origins);
                ((d - u).abs(), v.threshold)
            })
            .fold((0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a })
    };
    // single-query scoring: equal flag rates at every threshold
    let (worst, at) = gaps(&a1);
    println!("attack1: largest flag-rate gap {worst:.4} at {at:.4}");
    assert!(worst <= 0.05, "attack1: {worst}");
    // attack2 also sees session context, which independent decoys do not share
    let (worst, at) = gaps(&a2);
    let median = median_threshold(&a2.per_query);
    let (d, u) = flag_rates(&a2.with_threshold(median).flagged, &origins);
    println!("attack2: at median {median:.4} decoy {d:.4} user {u:.4}; largest gap {worst:.4} at {at:.4}");
    assert!(worst <= 0.10, "attack2: {worst}");
}

fn median_threshold(scores: &[f64]) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

#[test]
fn attack3_flags_the_same_topics_for_both_origins() {
    let world = world();
    let cfg = SimConfig {
        weeks: 5,
        mode: PlanMode::TopicObfuscated,
        ..SimConfig::default()
    };
    let sim = run(&world, &cfg);
    let replay = sim.replay_in_process();
    let origins = sim.origins();
    assert!(origins.len() >= 5000, "{}", origins.len());
    let pools = world.directory_pools();
    let adv = Adversary::new(&world.universe, &pools);
    // the adversary profiles the first two (already obfuscated) weeks
    let split = replay.observed.partition_point(|q| q.timestamp < cfg.start + 2.0 * 7.0 * 86_400.0);
    let (prior_log, new_log) = replay.observed.split_at(split);
    let (_, prior) = adv.learn_log_profile(prior_log);
    let scores = adv.attack3_profile_filter(new_log, &prior, 0.5).unwrap().per_query;
    let verdict = adv.attack3_profile_filter(new_log, &prior, median_threshold(&scores)).unwrap();
    let new_origins = &origins[split..];
    // decoy-only topics count as the user topic they stand in for
    let plan = sim.plan.as_ref().unwrap();
    let class = |q: &ObservedQuery| {
        let t = adv.topic_of(q);
        plan.mirrors.get(&t).copied().unwrap_or(t)
    };
    let mut by_origin: [BTreeMap<TopicId, u64>; 2] = Default::default();
    for &i in &verdict.flagged {
        *by_origin[usize::from(new_origins[i] == Origin::Decoy)].entry(class(&new_log[i])).or_insert(0) += 1;
    }
    let (u, d): (u64, u64) = (by_origin[0].values().sum(), by_origin[1].values().sum());
    let test = chi_squared_two_sample(&by_origin[0], &by_origin[1]);
    println!(
        "attack3: {} of {} flagged ({u} user, {d} decoy); {:?} {:?}; chi-squared {test:?}",
        verdict.flagged.len(),
        new_log.len(),
        by_origin[0],
        by_origin[1]
    );
    assert!(u > 0 && d > 0);
    assert!(!test.rejects(0.01));
}

#[test]
fn audited_fields_match_across_origins() {
    let world = world();
    let sim = run(&world, &SimConfig::default());
    let split = |f: &dyn Fn(&decoylab::sidechannel::SearchTrace) -> String| {
        let mut out: [BTreeMap<String, u64>; 2] = Default::default();
        for t in &sim.traces {
            *out[usize::from(t.query.origin == Origin::Decoy)].entry(f(t)).or_insert(0) += 1;
        }
        out
    };
    // deterministic fields: one shared value per field
    let header_names = split(&|t| t.headers.keys().filter(|k| *k != "referer").cloned().collect::<Vec<_>>().join(","));
    let header_values = split(&|t| {
        t.headers
            .iter()
            .filter(|(k, _)| *k != "referer")
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join("|")
    });
    let resources = split(&|t| t.subresources.join(","));
    let shape = split(&|t| t.request_url.split("q=").next().unwrap_or("").to_string());
    let suggests = split(&|t| (t.suggestion_prefixes.last() == Some(&t.query.text)).to_string());
    for (name, h) in [
        ("header names", &header_names),
        ("header values", &header_values),
        ("subresources", &resources),
        ("url shape", &shape),
        ("suggestions", &suggests),
    ] {
        assert_eq!(h[0].keys().collect::<Vec<_>>(), h[1].keys().collect::<Vec<_>>(), "{name}");
        assert_eq!(h[0].len(), 1, "{name}");
    }
    // sampled fields: same distribution at the 1% level
    let favicon = split(&|t| t.favicon_fetched.to_string());
    let clicks = split(&|t| t.clicks.len().min(2).to_string());
    let ranks = split(&|t| t.clicks.first().map(|c| c.rank.min(4).to_string()).unwrap_or_default());
    let referrer = split(&|t| t.headers.get("referer").is_some_and(|r| !r.is_empty()).to_string());
    for (name, h) in [("favicon", &favicon), ("clicks", &clicks), ("click rank", &ranks), ("referrer", &referrer)] {
        let test = chi_squared_two_sample(&h[0], &h[1]);
        println!("{name}: user {:?} decoy {:?} {test:?}", h[0], h[1]);
        assert!(!test.rejects(0.01), "{name}");
    }
}
