//! Small statistics toolbox: nearest-rank percentiles, Welch's t-test, and
//! IQR-based outlier trimming for experiment aggregation.

use statrs::distribution::{ContinuousCDF, StudentsT};

/// Nearest-rank percentile on an ascending-sorted slice. `p` in (0, 100].
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (n - 1 denominator).
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-tailed p-value.
    pub p: f64,
}

impl WelchResult {
    pub fn stars(&self) -> &'static str {
        if self.p < 0.001 {
            "***"
        } else if self.p < 0.01 {
            "**"
        } else if self.p < 0.05 {
            "*"
        } else {
            ""
        }
    }
}

/// Two-tailed Welch's t-test for unequal variances.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> WelchResult {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    assert!(na >= 2.0 && nb >= 2.0, "welch test needs >= 2 samples per side");
    let (va, vb) = (variance(a), variance(b));
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        let equal = mean(a) == mean(b);
        return WelchResult {
            t: if equal { 0.0 } else { f64::INFINITY },
            df: na + nb - 2.0,
            p: if equal { 1.0 } else { 0.0 },
        };
    }
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2
        / ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    WelchResult { t, df, p }
}

/// Remove values beyond 1.5x IQR from the quartiles. Returns the retained
/// values and the number removed.
pub fn iqr_filter(xs: &[f64]) -> (Vec<f64>, usize) {
    if xs.len() < 4 {
        return (xs.to_vec(), 0);
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = percentile_nearest_rank(&sorted, 25.0);
    let q3 = percentile_nearest_rank(&sorted, 75.0);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let kept: Vec<f64> = xs.iter().copied().filter(|&x| x >= lo && x <= hi).collect();
    let removed = xs.len() - kept.len();
    (kept, removed)
}
