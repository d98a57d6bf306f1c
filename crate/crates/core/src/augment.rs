//! Mixup and spectrogram masking with additive noise.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audiofeat::FeatureMap;
use crate::error::{Result, SedError};
use crate::ssl::TargetMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub mixup_enabled: bool,
    pub mixup_alpha: f64,
    pub n_time_masks: usize,
    pub n_freq_masks: usize,
    /// Frames.
    pub max_time_mask: usize,
    /// Mel bands.
    pub max_freq_mask: usize,
    pub noise_enabled: bool,
    /// Noise std as a multiple of the clip's feature std before masking.
    pub noise_gamma: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            mixup_enabled: true,
            mixup_alpha: 0.2,
            n_time_masks: 1,
            n_freq_masks: 1,
            max_time_mask: 50,
            max_freq_mask: 16,
            noise_enabled: true,
            noise_gamma: 0.1,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// Mask sizes scaled to the 64 × 32 toy features.
    pub fn toy() -> Self {
        Self {
            max_time_mask: 8,
            max_freq_mask: 4,
            ..Self::default()
        }
    }

    /// No transform at all.
    pub fn disabled() -> Self {
        Self {
            mixup_enabled: false,
            n_time_masks: 0,
            n_freq_masks: 0,
            noise_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, frames: usize, bands: usize) -> Result<()> {
        if !(self.mixup_alpha > 0.0) {
            return Err(SedError::Config(format!("mixup_alpha must be positive, got {}", self.mixup_alpha)));
        }
        if self.max_time_mask > frames || self.max_freq_mask > bands {
            return Err(SedError::Config(format!(
                "mask widths ({}, {}) exceed the {frames} × {bands} feature map",
                self.max_time_mask, self.max_freq_mask
            )));
        }
        if !(self.noise_gamma >= 0.0) {
            return Err(SedError::Config("noise_gamma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn draw_lambda<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let beta = Beta::new(self.mixup_alpha, self.mixup_alpha)
            .map_err(|e| SedError::Config(format!("mixup beta distribution: {e}")))?;
        Ok(beta.sample(rng))
    }
}

/// `λ·a + (1 − λ)·b` for both features and targets. The mixed target keeps
/// the source tag of the dominant item.
pub fn mixup(a: (&FeatureMap, &TargetMap), b: (&FeatureMap, &TargetMap), lambda: f64) -> Result<(FeatureMap, TargetMap)> {
    if a.0.values.shape() != b.0.values.shape() || a.1.values.shape() != b.1.values.shape() {
        return Err(SedError::Shape("mixup operands differ in shape".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SedError::Usage(format!("mixup weight {lambda} outside [0, 1]")));
    }
    let mix = |x: f64, y: f64| lambda * x + (1.0 - lambda) * y;
    let mut f = a.0.clone();
    f.values.data_mut().iter_mut().zip(b.0.values.data()).for_each(|(x, y)| *x = mix(*x, *y));
    let mut t = a.1.clone();
    t.values.data_mut().iter_mut().zip(b.1.values.data()).for_each(|(x, y)| *x = mix(*x, *y));
    if lambda < 0.5 {
        t.source = b.1.source;
    }
    Ok((f, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAxis {
    Time,
    Frequency,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskBand {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Random stripes: width uniform in `[0, max]` (clamped to the axis), start
/// uniform over valid positions.
pub fn draw_masks<R: Rng + ?Sized>(policy: &AugmentPolicy, frames: usize, bands: usize, rng: &mut R) -> Vec<MaskBand> {
    let mut out = Vec::with_capacity(policy.n_time_masks + policy.n_freq_masks);
    for (axis, count, max, len) in [
        (MaskAxis::Time, policy.n_time_masks, policy.max_time_mask, frames),
        (MaskAxis::Frequency, policy.n_freq_masks, policy.max_freq_mask, bands),
    ] {
        for _ in 0..count {
            let width = rng.random_range(0..=max.min(len));
            let start = rng.random_range(0..=len - width);
            out.push(MaskBand { axis, start, width });
        }
    }
    out
}

pub fn apply_masks(x: &mut FeatureMap, masks: &[MaskBand]) {
    let (t, f) = (x.frames(), x.bands());
    let d = x.values.data_mut();
    for m in masks {
        match m.axis {
            MaskAxis::Time => d[m.start * f..(m.start + m.width) * f].fill(0.0),
            MaskAxis::Frequency => {
                for row in 0..t {
                    d[row * f + m.start..row * f + m.start + m.width].fill(0.0);
                }
            }
        }
    }
}

/// Zeroes random time/frequency stripes, then adds Gaussian noise with std
/// `γ · std(x)` measured before masking.
pub fn spec_augment<R: Rng + ?Sized>(x: &FeatureMap, policy: &AugmentPolicy, rng: &mut R) -> FeatureMap {
    let sigma = if policy.noise_enabled {
        let v = x.values.data();
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        (v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt()
    } else {
        0.0
    };
    let mut out = x.clone();
    let masks = draw_masks(policy, x.frames(), x.bands(), rng);
    apply_masks(&mut out, &masks);
    if policy.noise_enabled && policy.noise_gamma > 0.0 {
        let s = policy.noise_gamma * sigma;
        for v in out.values.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += s * z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audiofeat::FeatureConfig;
    use crate::ssl::SourceTag;
    use crate::tensor::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fmap(values: Array) -> FeatureMap {
        FeatureMap::from_values(values, &FeatureConfig::default()).unwrap()
    }

    fn tmap(values: Array, s: SourceTag) -> TargetMap {
        TargetMap::new(values, s).unwrap()
    }

    #[test]
    fn mixup_definitional() {
        let fa = fmap(Array::from_fn([3, 2], |i| i as f64));
        let fb = fmap(Array::from_fn([3, 2], |i| 10.0 - i as f64));
        let ta = tmap(Array::from_fn([2, 2], |i| (i % 2) as f64), SourceTag::Strong);
        let tb = tmap(Array::full([2, 2], 1.0), SourceTag::Weak);
        let (f, t) = mixup((&fa, &ta), (&fb, &tb), 1.0).unwrap();
        assert_eq!((f, t), (fa.clone(), ta.clone()));
        let (f, _) = mixup((&fa, &ta), (&fa, &ta), 0.37).unwrap();
        assert!(f.values.max_abs_diff(&fa.values) < 1e-15);
        let (f, t) = mixup((&fa, &ta), (&fb, &tb), 0.25).unwrap();
        for i in 0..6 {
            assert_eq!(f.values.data()[i], 0.25 * fa.values.data()[i] + 0.75 * fb.values.data()[i]);
        }
        for i in 0..4 {
            assert_eq!(t.values.data()[i], 0.25 * ta.values.data()[i] + 0.75);
        }
        assert_eq!(t.source, SourceTag::Weak);
        let small = fmap(Array::zeros([2, 2]));
        assert!(matches!(mixup((&small, &ta), (&fb, &tb), 0.5), Err(SedError::Shape(_))));
    }

    #[test]
    fn no_masks_no_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = fmap(Array::from_fn([20, 8], |i| i as f64 * 0.1 - 3.0));
        let out = spec_augment(&x, &AugmentPolicy::disabled(), &mut rng);
        assert_eq!(out, x);
    }

    #[test]
    fn time_mask_zeroes_exact_count() {
        let x = fmap(Array::full([30, 8], 2.5));
        let m = [MaskBand {
            axis: MaskAxis::Time,
            start: 4,
            width: 6,
        }];
        let mut y = x.clone();
        apply_masks(&mut y, &m);
        assert_eq!(y.values.data().iter().filter(|&&v| v == 0.0).count(), 6 * 8);
        let policy = AugmentPolicy {
            n_freq_masks: 0,
            noise_enabled: false,
            max_time_mask: 10,
            ..AugmentPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let masks = draw_masks(&policy, 30, 8, &mut rng.clone());
            let out = spec_augment(&x, &policy, &mut rng);
            let zeros = out.values.data().iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, masks[0].width * 8);
            // unmasked entries untouched
            assert!(out.values.data().iter().all(|&v| v == 0.0 || v == 2.5));
        }
    }

    #[test]
    fn noise_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = fmap(Array::from_fn([628, 128], |_| rng.random_range(-5.0..5.0)));
        let policy = AugmentPolicy {
            n_time_masks: 0,
            n_freq_masks: 0,
            ..AugmentPolicy::default()
        };
        let v = x.values.data();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sigma = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        let out = spec_augment(&x, &policy, &mut rng);
        let diff: Vec<f64> = out.values.data().iter().zip(v).map(|(a, b)| a - b).collect();
        let dm = diff.iter().sum::<f64>() / n;
        let ds = (diff.iter().map(|d| (d - dm).powi(2)).sum::<f64>() / n).sqrt();
        let target = policy.noise_gamma * sigma;
        assert!(dm.abs() < 0.05 * target);
        assert!((ds - target).abs() < 0.05 * target);
    }

    #[test]
    fn seeded_transforms_repeat() {
        let x = fmap(Array::from_fn([64, 32], |i| (i % 7) as f64));
        let p = AugmentPolicy::toy();
        let a = spec_augment(&x, &p, &mut ChaCha8Rng::seed_from_u64(9));
        let b = spec_augment(&x, &p, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(p.validate(64, 32).is_ok());
        assert!(AugmentPolicy::default().validate(40, 32).is_err());
        let l = p.draw_lambda(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((0.0..=1.0).contains(&l));
    }
}
