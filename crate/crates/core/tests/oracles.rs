//! Derived values checked against independent, deliberately naive oracles.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use decoylab::adversary::{Adversary, FilterVerdict};
use decoylab::evaluation::{
    doubt_attained, mean, mock_profile_experiment, precision, resiliency, round2, ExperimentConfig, ProfileComparison,
};
use decoylab::mockengine::profiler::MockProfiler;
use decoylab::obfuscator::{min_decoys, reasonable_doubt, GuaranteeParams, Origin};
use decoylab::querylog::ObservedQuery;
use decoylab::sidechannel::EngineTemplate;
use decoylab::topics::TopicProfile;
use decoylab::world::{World, WorldConfig};

/// Smallest X with `(X + Y - Y_est) * a >= b * (X + Y)` where p_ob = a/100
/// and epsilon = b/100, found by counting up.
fn brute_min_decoys(y_est: u64, a: u64, b: u64, y: u64) -> u64 {
    (0..)
        .find(|&x| {
            let total = x + y;
            if total == 0 {
                return y_est == 0;
            }
            (total as i128 - y_est as i128) * a as i128 >= (b * total) as i128
        })
        .unwrap()
}

#[test]
fn min_decoys_worked_example() {
    assert_eq!(brute_min_decoys(100, 50, 25, 50), 150);
    assert_eq!(min_decoys(100, 0.5, 0.25, 50).unwrap(), 150);
    // one fewer decoy breaks the bound
    assert!((149 + 50 - 100) as f64 / (149 + 50) as f64 * 0.5 < 0.25);
}

#[test]
fn conservative_substitution_gives_099() {
    // X = 0, Y = 100, the adversary assumes a single user query
    let p = GuaranteeParams::conservative(100, 0, 0.99).unwrap();
    assert_eq!((p.y_est, p.x_est), (1, 99));
    let doubt = reasonable_doubt(&p).unwrap();
    assert!((doubt - 99.0 / 100.0).abs() < 1e-12);
    assert!(doubt >= 0.99);
    assert_eq!(min_decoys(1, 1.0, 0.5, 10).unwrap(), 0);
}

#[test]
fn conservative_adversary_attains_up_to_the_bound() {
    let universe = decoylab::topics::TopicUniverse::default_universe();
    let pools = decoylab::corpus::PoolSet::default();
    for (x, y) in [(0u64, 2u64), (3, 5), (10, 1), (40, 60)] {
        let n = x + y;
        let adv = Adversary::new(&universe, &pools).with_estimates(n - 1, 1);
        let log: Vec<ObservedQuery> = (0..n).map(|i| ObservedQuery::new(i as f64, "s", "q", vec![])).collect();
        let scores = log.iter().map(|q| adv.attack1_single_query(q, &TopicProfile::default())).collect();
        let verdict = FilterVerdict::from_scores(scores, 0.5);
        let truth: Vec<Origin> = (0..n).map(|i| if i < y { Origin::User } else { Origin::Decoy }).collect();
        let bound = (n - 1) as f64 / n as f64;
        let at = |eps: f64| {
            let p = GuaranteeParams::new(y, x, 1, n - 1, 1.0, eps).unwrap();
            doubt_attained(&verdict, &truth, &p).unwrap().all
        };
        assert!(at(bound), "x={x} y={y}");
        assert!(at(bound / 2.0));
        assert!(!at(bound + 1e-6), "x={x} y={y}");
    }
}

/// Alpha by direct enumeration: try every score as a threshold (and one
/// above them all), keep the ones whose kept set is at least beta user
/// queries, return the least user-drop fraction.
fn enumerate_alpha(scores: &[f64], truth: &[Origin], beta: f64) -> Option<f64> {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    let users = truth.iter().filter(|o| **o == Origin::User).count() as f64;
    let mut best: Option<f64> = None;
    for t in thresholds {
        let mut dropped_users = 0.0;
        let mut kept_users = 0.0;
        let mut kept = 0.0;
        for (s, o) in scores.iter().zip(truth) {
            let flagged = *s >= t;
            match (o, flagged) {
                (Origin::User, true) => dropped_users += 1.0,
                (Origin::User, false) => {
                    kept_users += 1.0;
                    kept += 1.0
                }
                (Origin::Decoy, false) => kept += 1.0,
                (Origin::Decoy, true) => {}
            }
        }
        if kept > 0.0 && kept_users / kept >= beta {
            let a = dropped_users / users;
            best = Some(best.map_or(a, |b: f64| b.min(a)));
        }
    }
    best
}

#[test]
fn resiliency_matches_hand_enumeration_on_twenty_queries() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // scores drawn without looking at the origin
        let scores: Vec<f64> = (0..20).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
        let truth: Vec<Origin> = (0..20)
            .map(|_| if rng.gen_bool(0.5) { Origin::User } else { Origin::Decoy })
            .collect();
        if !truth.contains(&Origin::User) {
            continue;
        }
        let sweep = FilterVerdict::from_scores(scores.clone(), 0.5).sweep();
        for beta in [0.3, 0.5, 0.7, 0.9] {
            let got = resiliency(&sweep, &truth, beta).unwrap().alpha;
            let want = enumerate_alpha(&scores, &truth, beta);
            match (got, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12, "seed {seed} beta {beta}: {g} vs {w}"),
                (g, w) => assert_eq!(g, w, "seed {seed} beta {beta}"),
            }
        }
    }
}

#[test]
fn published_averages() {
    let impact = [0.47, 0.09, 0.50, 0.50, 0.57, 0.35, 0.43, 0.57];
    let prec = [0.41, 0.03, 0.11, 0.10, 0.12, 0.31, 0.08, 0.44];
    // hundredths as integers: 348 / 8 = 43.5, 160 / 8 = 20
    let hundredths = |v: &[f64]| v.iter().map(|x| (x * 100.0).round() as i64).sum::<i64>();
    assert_eq!(hundredths(&impact), 348);
    assert_eq!(hundredths(&prec), 160);
    assert_eq!(round2(mean(&impact).unwrap()), 0.44);
    assert_eq!(round2(mean(&prec).unwrap()), 0.20);
}

fn experiment_world() -> World {
    World::generate(WorldConfig {
        feeds_per_topic: 4,
        ..WorldConfig::default()
    })
}

#[test]
fn mock_profile_experiment_protocol() {
    let world = experiment_world();
    let profiler = MockProfiler::new(world.universe.clone(), world.directory_pools());
    let docs = world.documents();
    let cfg = ExperimentConfig::default();
    let template = EngineTemplate::default();
    let a = mock_profile_experiment(&cfg, &docs, &world.universe, &profiler, &template, 42).unwrap();
    assert_eq!(a.len(), 8);
    for c in &a {
        assert_eq!(c.targeted_topics.len(), 2);
        let p = precision(c, &world.universe).unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    let b = mock_profile_experiment(&cfg, &docs, &world.universe, &profiler, &template, 42).unwrap();
    assert_eq!(a, b);
}

#[test]
fn on_topic_queries_give_full_precision() {
    let world = experiment_world();
    let pools = world.directory_pools();
    let profiler = MockProfiler::new(world.universe.clone(), pools.clone());
    let roots: Vec<_> = world.universe.topics().iter().filter(|t| t.parent.is_none()).map(|t| t.id).collect();
    for pair in roots.chunks(2).filter(|c| c.len() == 2) {
        let targeted: BTreeSet<_> = pair.iter().copied().collect();
        let subtree: BTreeSet<_> = targeted.iter().flat_map(|&t| world.universe.subtree(t)).collect();
        let texts: Vec<&str> = subtree
            .iter()
            .filter_map(|t| pools.get(*t))
            .flat_map(|p| p.entries.iter().take(40).map(|(s, _)| s.as_str()))
            .collect();
        let cmp = ProfileComparison {
            inferred_interests: profiler.infer(texts.iter().copied()),
            targeted_topics: targeted,
        };
        assert_eq!(precision(&cmp, &world.universe).unwrap(), 1.0, "{pair:?}");
    }
}
