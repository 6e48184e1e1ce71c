//! Injectable time source so a simulated week runs in milliseconds.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

/// Seconds since the Unix epoch.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0)
    }
}

/// Manually driven clock. Time never moves backwards.
#[derive(Debug)]
pub struct SimClock {
    bits: AtomicU64,
}

impl SimClock {
    pub fn new(start: f64) -> Self {
        SimClock {
            bits: AtomicU64::new(start.to_bits()),
        }
    }

    /// Moves the clock to `t` if `t` is later than the current time.
    pub fn advance_to(&self, t: f64) {
        let mut current = self.bits.load(Ordering::Acquire);
        while f64::from_bits(current) < t {
            match self
                .bits
                .compare_exchange_weak(current, t.to_bits(), Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => break,
                Err(seen) => current = seen,
            }
        }
    }

    pub fn advance_by(&self, dt: f64) {
        self.advance_to(self.now() + dt);
    }
}

impl Clock for SimClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::Acquire))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_clock_is_monotone() {
        let c = SimClock::new(100.0);
        c.advance_to(50.0);
        assert_eq!(c.now(), 100.0);
        c.advance_to(150.5);
        c.advance_by(0.5);
        assert_eq!(c.now(), 151.0);
    }
}
