use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Result, SedError};

/// Single global mean / standard deviation over every training entry.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct NormalizationStats {
    pub mean: f64,
    #[serde(rename = "std")]
    pub std_dev: f64,
    pub n_clips: usize,
}

/// Neumaier-compensated sum, so the result does not depend on summation order
/// beyond rounding of the final value.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Two-pass population mean and standard deviation.
pub fn fit_normalization(features: &[FeatureMap]) -> Result<NormalizationStats> {
    let count: usize = features.iter().map(|f| f.values.len()).sum();
    if count == 0 {
        return Err(SedError::Data("cannot fit normalisation on no features".into()));
    }
    let all = || features.iter().flat_map(|f| f.values.data().iter().copied());
    let mean = compensated_sum(all()) / count as f64;
    let var = compensated_sum(all().map(|v| (v - mean) * (v - mean))) / count as f64;
    let std_dev = var.sqrt();
    if !(std_dev > 0.0) || !std_dev.is_finite() {
        return Err(SedError::Data("degenerate variance: all feature entries identical".into()));
    }
    Ok(NormalizationStats {
        mean,
        std_dev,
        n_clips: features.len(),
    })
}

pub fn normalize(map: &FeatureMap, stats: &NormalizationStats) -> FeatureMap {
    let mut out = map.clone();
    out.values
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v - stats.mean) / stats.std_dev);
    out
}

pub fn denormalize(map: &FeatureMap, stats: &NormalizationStats) -> FeatureMap {
    let mut out = map.clone();
    out.values
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = *v * stats.std_dev + stats.mean);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audiofeat::FeatureConfig;
    use crate::tensor::Array;
    use rand::{Rng, SeedableRng};

    fn map(values: Array) -> FeatureMap {
        FeatureMap::from_values(values, &FeatureConfig::default()).unwrap()
    }

    #[test]
    fn degenerate_variance_rejected() {
        let m = map(Array::full([4, 3], 3.0));
        assert!(matches!(fit_normalization(&[m]), Err(SedError::Data(_))));
    }

    #[test]
    fn two_point_population() {
        let s = fit_normalization(&[map(Array::full([2, 2], 0.0)), map(Array::full([2, 2], 2.0))]).unwrap();
        assert_eq!((s.mean, s.std_dev, s.n_clips), (1.0, 1.0, 2));
    }

    #[test]
    fn mean_map_normalises_to_zero_and_inverts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let maps: Vec<FeatureMap> = (0..5)
            .map(|_| map(Array::from_fn([7, 4], |_| rng.random_range(-20.0..5.0))))
            .collect();
        let s = fit_normalization(&maps).unwrap();
        let flat = map(Array::full([3, 3], s.mean));
        assert!(normalize(&flat, &s).values.data().iter().all(|&v| v == 0.0));
        let back = denormalize(&normalize(&maps[0], &s), &s);
        assert!(back.values.max_abs_diff(&maps[0].values) < 1e-12);
    }

    #[test]
    fn matches_streaming_oracle_and_is_order_independent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let maps: Vec<FeatureMap> = (0..6)
            .map(|i| map(Array::from_fn([10 + i, 5], |_| rng.random_range(-30.0..0.0))))
            .collect();
        let s = fit_normalization(&maps).unwrap();
        // Welford streaming oracle
        let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
        for v in maps.iter().flat_map(|m| m.values.data().iter()) {
            n += 1.0;
            let d = v - mean;
            mean += d / n;
            m2 += d * (v - mean);
        }
        let std = (m2 / n).sqrt();
        assert!((s.mean - mean).abs() <= 1e-9 * mean.abs());
        assert!((s.std_dev - std).abs() <= 1e-9 * std);
        let mut rev = maps.clone();
        rev.reverse();
        let r = fit_normalization(&rev).unwrap();
        assert!((r.mean - s.mean).abs() <= 1e-12 * s.mean.abs());
        assert!((r.std_dev - s.std_dev).abs() <= 1e-12 * s.std_dev);

        let normed: Vec<FeatureMap> = maps.iter().map(|m| normalize(m, &s)).collect();
        let again = fit_normalization(&normed).unwrap();
        assert!(again.mean.abs() < 1e-6);
        assert!((again.std_dev - 1.0).abs() < 1e-6);
    }
}
