//! Small statistical toolkit: goodness-of-fit tests and entropy.

use std::collections::BTreeMap;

use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
}

impl TestOutcome {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
///
/// Panics if either sample is empty or contains NaN.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> TestOutcome {
    assert!(!a.is_empty() && !b.is_empty(), "KS test needs two non-empty samples");
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).expect("NaN in KS sample"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("NaN in KS sample"));
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    TestOutcome {
        statistic: d,
        p_value: kolmogorov_survival(lambda),
    }
}

fn chi_squared_p(statistic: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(statistic)
}

/// Chi-squared test of homogeneity between two categorical samples.
///
/// Categories empty in both samples are ignored.
pub fn chi_squared_two_sample<K: Ord + Clone>(
    a: &BTreeMap<K, u64>,
    b: &BTreeMap<K, u64>,
) -> TestOutcome {
    let mut keys: Vec<K> = a.keys().chain(b.keys()).cloned().collect();
    keys.sort();
    keys.dedup();
    let total_a: u64 = a.values().sum();
    let total_b: u64 = b.values().sum();
    let total = (total_a + total_b) as f64;
    if total_a == 0 || total_b == 0 {
        return TestOutcome {
            statistic: 0.0,
            p_value: 1.0,
        };
    }
    let mut statistic = 0.0;
    let mut used = 0usize;
    for k in &keys {
        let oa = *a.get(k).unwrap_or(&0) as f64;
        let ob = *b.get(k).unwrap_or(&0) as f64;
        let col = oa + ob;
        if col == 0.0 {
            continue;
        }
        used += 1;
        let ea = col * total_a as f64 / total;
        let eb = col * total_b as f64 / total;
        statistic += (oa - ea).powi(2) / ea + (ob - eb).powi(2) / eb;
    }
    TestOutcome {
        statistic,
        p_value: chi_squared_p(statistic, used.saturating_sub(1)),
    }
}

/// Chi-squared goodness-of-fit of observed counts against expected
/// probabilities. Bins whose expected count is below 5 are pooled.
pub fn chi_squared_gof<K: Ord>(observed: &BTreeMap<K, u64>, expected: &BTreeMap<K, f64>) -> TestOutcome {
    let n: u64 = observed.values().sum();
    let n = n as f64;
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut pooled_o, mut pooled_e) = (0.0, 0.0);
    for (k, p) in expected {
        let e = p * n;
        let o = *observed.get(k).unwrap_or(&0) as f64;
        if e < 5.0 {
            pooled_o += o;
            pooled_e += e;
        } else {
            bins.push((o, e));
        }
    }
    // observations outside the expected support
    let stray: f64 = observed
        .iter()
        .filter(|(k, _)| !expected.contains_key(*k))
        .map(|(_, &c)| c as f64)
        .sum();
    pooled_o += stray;
    if pooled_e > 0.0 || pooled_o > 0.0 {
        bins.push((pooled_o, pooled_e.max(f64::MIN_POSITIVE)));
    }
    let statistic: f64 = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    TestOutcome {
        statistic,
        p_value: chi_squared_p(statistic, bins.len().saturating_sub(1)),
    }
}

/// Shannon entropy in bits of a histogram.
pub fn entropy_bits<I: IntoIterator<Item = u64>>(counts: I) -> f64 {
    let counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Nearest-rank quantile of a sample, `q` in (0, 1].
pub fn nearest_rank_quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_survival_reference_points() {
        // Tabulated: P(K > 1.36) ~ 0.049, P(K > 1.63) ~ 0.0098.
        assert!((kolmogorov_survival(1.36) - 0.0494).abs() < 1e-3);
        assert!((kolmogorov_survival(1.63) - 0.0098).abs() < 5e-4);
    }

    #[test]
    fn ks_identical_samples_do_not_reject() {
        let a: Vec<f64> = (0..500).map(|i| i as f64).collect();
        let out = ks_two_sample(&a, &a);
        assert_eq!(out.statistic, 0.0);
        assert!(!out.rejects(0.01));
    }

    #[test]
    fn ks_shifted_samples_reject() {
        let a: Vec<f64> = (0..500).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..500).map(|i| i as f64 + 250.0).collect();
        let out = ks_two_sample(&a, &b);
        assert!((out.statistic - 0.5).abs() < 1e-12);
        assert!(out.rejects(0.01));
    }

    #[test]
    fn chi_squared_homogeneity() {
        let a: BTreeMap<u32, u64> = [(1, 50), (2, 50)].into();
        let b: BTreeMap<u32, u64> = [(1, 50), (2, 50)].into();
        assert!(chi_squared_two_sample(&a, &b).statistic.abs() < 1e-12);
        let c: BTreeMap<u32, u64> = [(1, 100), (2, 0)].into();
        assert!(chi_squared_two_sample(&a, &c).rejects(0.01));
    }

    #[test]
    fn entropy_of_uniform_histogram() {
        assert!((entropy_bits([1, 1, 1, 1]) - 2.0).abs() < 1e-12);
        assert_eq!(entropy_bits([7]), 0.0);
        assert_eq!(entropy_bits(Vec::<u64>::new()), 0.0);
    }

    #[test]
    fn nearest_rank() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(nearest_rank_quantile(&s, 0.25), 1.0);
        assert_eq!(nearest_rank_quantile(&s, 0.3), 2.0);
        assert_eq!(nearest_rank_quantile(&s, 1.0), 4.0);
    }
}
