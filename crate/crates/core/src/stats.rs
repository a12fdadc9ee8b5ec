//! Small numeric helpers shared across modules.

/// Empirical quantile with linear interpolation between closest ranks
/// (the "type-7" convention). `sorted` must be ascending and nonempty;
/// `q` must lie in [0, 1].
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&q), "quantile level outside [0,1]");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance (denominator n-1). NaN for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return f64::NAN;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

pub fn sample_std(values: &[f64]) -> f64 {
    sample_variance(values).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_matches_sort_and_index_rule() {
        let xs: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        // h = 9 * 0.2 = 1.8 -> 2 + 0.8 * (3 - 2)
        assert!((quantile_type7(&xs, 0.2) - 2.8).abs() < 1e-12);
        assert_eq!(quantile_type7(&xs, 0.0), 1.0);
        assert_eq!(quantile_type7(&xs, 1.0), 10.0);
    }

    #[test]
    fn type7_single_value() {
        assert_eq!(quantile_type7(&[0.7], 0.2), 0.7);
    }

    #[test]
    fn variance_of_constant_is_zero() {
        assert_eq!(sample_variance(&[2.0, 2.0, 2.0]), 0.0);
    }
}
