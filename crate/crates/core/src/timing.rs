//! User timing behavior: weekly activity, inter-arrival gaps, active
//! sessions and query bursts.
//!
//! The schedule sampler walks a "virtual active clock" made of the active
//! periods glued end to end, stepping by empirical inter-arrival gaps that
//! are perturbed multiplicatively so no gap is an exact replay. Gaps are
//! uniformly rescaled so the expected count meets the target rate.

use chrono::{DateTime, Datelike, Timelike};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::obfuscator::Query;

pub const HOURS_PER_WEEK: usize = 168;
pub const WEEK_SECS: f64 = 7.0 * 86_400.0;
pub const DEFAULT_SESSION_GAP: f64 = 30.0 * 60.0;
pub const DEFAULT_JITTER: f64 = 0.25;
pub const DEFAULT_RATE_TOLERANCE: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum TimingError {
    #[error("timing profile has no activity and no fallback is configured")]
    EmptyProfile,
    #[error("rate target must be positive, got {0}")]
    InvalidRate(f64),
    #[error("horizon must be positive, got {0}")]
    InvalidHorizon(f64),
    #[error("jitter must lie in [0, 1), got {0}")]
    InvalidJitter(f64),
    #[error("burst size distribution is empty or has no positive weight")]
    InvalidBurstSize,
    #[error("timing record on line {line}: {message}")]
    Record { line: usize, message: String },
}

/// Hour-of-week bin with Monday 00:00 UTC as bin 0.
pub fn hour_of_week(ts: f64) -> usize {
    let dt = DateTime::from_timestamp(ts.floor() as i64, 0).expect("timestamp in range");
    dt.weekday().num_days_from_monday() as usize * 24 + dt.hour() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingProfile {
    pub hour_of_week: Vec<u64>,
    /// Within-session gaps in seconds, all positive.
    pub interarrival: Vec<f64>,
    /// Ordered, non-overlapping `(start, end)` active periods.
    pub sessions: Vec<(f64, f64)>,
}

impl Default for TimingProfile {
    fn default() -> Self {
        TimingProfile {
            hour_of_week: vec![0; HOURS_PER_WEEK],
            interarrival: Vec::new(),
            sessions: Vec::new(),
        }
    }
}

impl TimingProfile {
    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty() && self.hour_of_week.iter().all(|&c| c == 0)
    }

    pub fn mean_gap(&self) -> Option<f64> {
        if self.interarrival.is_empty() {
            None
        } else {
            Some(self.interarrival.iter().sum::<f64>() / self.interarrival.len() as f64)
        }
    }

    /// Line records: `hour TAB bin TAB count` for all 168 bins, then
    /// `gap TAB seconds` per inter-arrival sample, then
    /// `session TAB start TAB end`.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (h, c) in self.hour_of_week.iter().enumerate() {
            out.push_str(&format!("hour\t{h}\t{c}\n"));
        }
        for g in &self.interarrival {
            out.push_str(&format!("gap\t{g}\n"));
        }
        for (s, e) in &self.sessions {
            out.push_str(&format!("session\t{s}\t{e}\n"));
        }
        out
    }

    pub fn from_records(text: &str) -> Result<Self, TimingError> {
        let mut p = TimingProfile::default();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |m: &str| TimingError::Record {
                line: i + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            match (f[0], f.len()) {
                ("hour", 3) => {
                    let h: usize = f[1].parse().map_err(|_| bad("bad hour index"))?;
                    let c: u64 = f[2].parse().map_err(|_| bad("bad hour count"))?;
                    *p.hour_of_week.get_mut(h).ok_or_else(|| bad("hour index out of range"))? = c;
                }
                ("gap", 2) => p.interarrival.push(f[1].parse().map_err(|_| bad("bad gap"))?),
                ("session", 3) => p.sessions.push((
                    f[1].parse().map_err(|_| bad("bad session start"))?,
                    f[2].parse().map_err(|_| bad("bad session end"))?,
                )),
                _ => return Err(bad("unknown record")),
            }
        }
        Ok(p)
    }
}

/// Learns a timing profile from query timestamps.
pub fn learn_timing(queries: &[Query], session_gap: f64) -> TimingProfile {
    let ts: Vec<f64> = queries.iter().map(|q| q.timestamp).collect();
    learn_timing_from_times(&ts, session_gap)
}

/// Splits timestamps (any order) into sessions of gaps `< session_gap`.
pub fn learn_timing_from_times(timestamps: &[f64], session_gap: f64) -> TimingProfile {
    let mut ts = timestamps.to_vec();
    ts.sort_by(|a, b| a.partial_cmp(b).expect("finite timestamps"));
    let mut profile = TimingProfile::default();
    let Some(&first) = ts.first() else {
        return profile;
    };
    let mut session_start = first;
    let mut prev = first;
    profile.hour_of_week[hour_of_week(first)] += 1;
    for &t in &ts[1..] {
        profile.hour_of_week[hour_of_week(t)] += 1;
        let gap = t - prev;
        if gap < session_gap {
            if gap > 0.0 {
                profile.interarrival.push(gap);
            }
        } else {
            profile.sessions.push((session_start, prev));
            session_start = t;
        }
        prev = t;
    }
    profile.sessions.push((session_start, prev));
    profile
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ScheduleFallback {
    /// Fail when the profile carries no sessions and an empty histogram.
    #[default]
    None,
    /// Treat the whole horizon as active.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRequest {
    pub start: f64,
    pub horizon: f64,
    /// Queries per hour, averaged over the whole horizon.
    pub rate_target: f64,
    /// Relative band around the target count inside which gaps keep their
    /// natural scale; outside it gaps are rescaled to the nearest edge.
    pub rate_tolerance: f64,
    pub jitter: f64,
    pub fallback: ScheduleFallback,
}

impl ScheduleRequest {
    pub fn new(start: f64, horizon: f64, rate_target: f64) -> Self {
        ScheduleRequest {
            start,
            horizon,
            rate_target,
            rate_tolerance: DEFAULT_RATE_TOLERANCE,
            jitter: DEFAULT_JITTER,
            fallback: ScheduleFallback::None,
        }
    }

    pub fn end(&self) -> f64 {
        self.start + self.horizon
    }
}

/// Active periods inside the request horizon.
///
/// Sessions intersecting the horizon are used as they are; otherwise the
/// sessions are shifted by whole weeks onto it. Each session is held open
/// for one mean gap after its last query. Without sessions, the nonzero
/// hour-of-week bins are active, and with an empty histogram the uniform
/// fallback makes the whole horizon active.
pub fn active_periods(profile: &TimingProfile, req: &ScheduleRequest) -> Result<Vec<(f64, f64)>, TimingError> {
    let (start, end) = (req.start, req.end());
    let tail = profile.mean_gap().unwrap_or(0.0);
    let mut periods: Vec<(f64, f64)> = Vec::new();
    if !profile.sessions.is_empty() {
        let direct: Vec<(f64, f64)> = profile
            .sessions
            .iter()
            .filter(|(s, e)| *e + tail >= start && *s < end)
            .copied()
            .collect();
        if !direct.is_empty() {
            periods = direct;
        } else {
            for &(s, e) in &profile.sessions {
                let k_min = ((start - (e + tail)) / WEEK_SECS).ceil() as i64;
                let k_max = ((end - s) / WEEK_SECS).floor() as i64;
                for k in k_min..=k_max {
                    periods.push((s + k as f64 * WEEK_SECS, e + k as f64 * WEEK_SECS));
                }
            }
        }
        periods = periods.into_iter().map(|(s, e)| (s, e + tail)).collect();
    } else if profile.hour_of_week.iter().any(|&c| c > 0) {
        let mut hour = (start / 3600.0).floor() * 3600.0;
        while hour < end {
            if profile.hour_of_week[hour_of_week(hour)] > 0 {
                periods.push((hour, hour + 3600.0));
            }
            hour += 3600.0;
        }
    } else if req.fallback == ScheduleFallback::Uniform {
        periods.push((start, end));
    } else {
        return Err(TimingError::EmptyProfile);
    }

    periods.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (s, e) in periods {
        let (s, e) = (s.max(start), e.min(end));
        if e <= s {
            continue;
        }
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    Ok(merged)
}

/// Samples decoy timestamps over the request horizon.
///
/// Gaps are empirical draws times a jitter factor. They keep their natural
/// scale while the expected count stays within `rate_tolerance` of the
/// target, and are stretched or shrunk to the nearest band edge otherwise.
pub fn sample_schedule(profile: &TimingProfile, req: &ScheduleRequest, seed: u64) -> Result<Vec<f64>, TimingError> {
    if !(req.rate_target > 0.0) {
        return Err(TimingError::InvalidRate(req.rate_target));
    }
    if !(req.horizon > 0.0) {
        return Err(TimingError::InvalidHorizon(req.horizon));
    }
    if !(0.0..1.0).contains(&req.jitter) {
        return Err(TimingError::InvalidJitter(req.jitter));
    }
    let periods = active_periods(profile, req)?;
    let active: f64 = periods.iter().map(|(s, e)| e - s).sum();
    let target = req.rate_target * req.horizon / 3600.0;
    if active <= 0.0 || target <= 0.0 {
        return Ok(Vec::new());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empirical = &profile.interarrival;
    let natural_mean = profile.mean_gap().unwrap_or(active / target);
    let natural = active / natural_mean;
    let tol = req.rate_tolerance.clamp(0.0, 0.5);
    let expected = natural.clamp(target * (1.0 - tol), target * (1.0 + tol));
    let scale = natural / expected;
    let exp = Exp::new(1.0 / natural_mean).expect("positive mean gap");
    let draw_gap = |rng: &mut ChaCha8Rng| -> f64 {
        let base = if empirical.is_empty() {
            exp.sample(rng)
        } else {
            empirical[rng.gen_range(0..empirical.len())]
        };
        let factor = if req.jitter > 0.0 {
            rng.gen_range(1.0 - req.jitter..1.0 + req.jitter)
        } else {
            1.0
        };
        base * factor * scale
    };

    let mut out = Vec::new();
    let mut virtual_t = rng.gen::<f64>() * draw_gap(&mut rng);
    let mut idx = 0;
    let mut offset = 0.0; // virtual time at the start of periods[idx]
    while virtual_t < active {
        while virtual_t >= offset + (periods[idx].1 - periods[idx].0) {
            offset += periods[idx].1 - periods[idx].0;
            idx += 1;
        }
        out.push(periods[idx].0 + (virtual_t - offset));
        virtual_t += draw_gap(&mut rng);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstPolicy {
    /// `(size, weight)` pairs.
    pub burst_size: Vec<(u32, f64)>,
    /// Seconds after the triggering query within which the burst lands.
    pub burst_spread: f64,
}

impl Default for BurstPolicy {
    fn default() -> Self {
        BurstPolicy {
            burst_size: vec![(1, 1.0), (2, 1.0), (3, 1.0)],
            burst_spread: 300.0,
        }
    }
}

impl BurstPolicy {
    pub fn deterministic(size: u32, spread: f64) -> Self {
        BurstPolicy {
            burst_size: vec![(size, 1.0)],
            burst_spread: spread,
        }
    }

    pub fn mean_size(&self) -> f64 {
        let total: f64 = self.burst_size.iter().map(|(_, w)| w).sum();
        if total <= 0.0 {
            return 0.0;
        }
        self.burst_size.iter().map(|(s, w)| *s as f64 * w).sum::<f64>() / total
    }
}

/// Burst timestamps in `(user_query_time, user_query_time + spread]`, sorted.
pub fn trigger_burst(policy: &BurstPolicy, user_query_time: f64, seed: u64) -> Result<Vec<f64>, TimingError> {
    let weights: Vec<f64> = policy.burst_size.iter().map(|(_, w)| *w).collect();
    let index = WeightedIndex::new(&weights).map_err(|_| TimingError::InvalidBurstSize)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = policy.burst_size[index.sample(&mut rng)].0;
    let mut out: Vec<f64> = (0..k)
        .map(|_| {
            // 1 - U[0,1) lies in (0, 1]
            let u: f64 = 1.0 - rng.gen::<f64>();
            user_query_time + u * policy.burst_spread
        })
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}
