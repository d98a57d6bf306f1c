//! Posterior decoding and detection metrics: collar-based event F1 / error
//! rate and the polyphonic sound detection score family.

mod events;
mod psds;
mod report;

use serde::{Deserialize, Serialize};

use crate::corpus::{Event, EventList};
use crate::crnn::PosteriorMap;
use crate::error::{Result, SedError};

pub use events::{event_f1_er, match_class, ClassCounts, Collars, EventMetrics};
pub use psds::{
    operating_point_counts, psds, psds_from_counts, psds_from_operating_points, thresholds, Criteria, OpCounts,
    PsdsParams, PsdsResult,
};
pub use report::{evaluate_posteriors, ClassReport, EvalConfig, MetricReport};

/// Running median with edge replication; `window` must be odd.
pub fn median_filter(x: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 || x.is_empty() {
        return x.to_vec();
    }
    let half = window / 2;
    let n = x.len() as isize;
    let mut buf = Vec::with_capacity(window);
    (0..n)
        .map(|i| {
            buf.clear();
            buf.extend((i - half as isize..=i + half as isize).map(|j| x[j.clamp(0, n - 1) as usize]));
            buf.sort_by(f64::total_cmp);
            buf[half]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodePolicy {
    pub threshold: f64,
    pub median_window: usize,
    /// Seconds per output frame (clip duration / K).
    pub frame_duration: f64,
}

impl Default for DecodePolicy {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            median_window: 7,
            frame_duration: 10.0 / 157.0,
        }
    }
}

impl DecodePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0)
            || self.median_window % 2 == 0
            || !(self.frame_duration > 0.0)
        {
            return Err(SedError::Config(format!("invalid decode policy {self:?}")));
        }
        Ok(())
    }
}

/// Per class: median filter, threshold (`> τ`), maximal runs become events.
pub fn decode_events(post: &PosteriorMap, policy: &DecodePolicy) -> EventList {
    let d = policy.frame_duration;
    let mut out = Vec::new();
    for c in 0..post.classes() {
        let col = median_filter(&post.column(c), policy.median_window);
        let mut start = None;
        for (k, v) in col.iter().chain(std::iter::once(&0.0)).enumerate() {
            let on = *v > policy.threshold && k < col.len();
            match (on, start) {
                (true, None) => start = Some(k),
                (false, Some(s)) => {
                    out.push(Event {
                        class_id: c,
                        onset: s as f64 * d,
                        offset: k as f64 * d,
                    });
                    start = None;
                }
                _ => {}
            }
        }
    }
    out.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.class_id.cmp(&b.class_id)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Array;

    fn post(k: usize, c: usize, mut f: impl FnMut(usize, usize) -> f64) -> PosteriorMap {
        PosteriorMap::new(Array::from_fn([k, c], |i| f(i / c, i % c))).unwrap()
    }

    #[test]
    fn median_filter_matches_direct_oracle() {
        let x = [0.1, 0.9, 0.2, 0.8, 0.7, 0.1, 0.5];
        assert_eq!(median_filter(&x, 1), x.to_vec());
        let m = median_filter(&x, 3);
        // edges replicate: window at 0 is (0.1, 0.1, 0.9)
        assert_eq!(m, vec![0.1, 0.2, 0.8, 0.7, 0.7, 0.5, 0.5]);
    }

    #[test]
    fn constant_posteriors() {
        let policy = DecodePolicy::default();
        let on = decode_events(&post(157, 10, |_, c| if c == 0 { 0.9 } else { 0.1 }), &policy);
        assert_eq!(on.len(), 1);
        assert_eq!((on[0].class_id, on[0].onset), (0, 0.0));
        assert!((on[0].offset - 10.0).abs() < 1e-9);
        assert!(decode_events(&post(157, 10, |_, _| 0.1), &policy).is_empty());
    }

    #[test]
    fn single_frame_spike() {
        let p = post(157, 1, |k, _| if k == 40 { 0.9 } else { 0.1 });
        let w3 = DecodePolicy {
            median_window: 3,
            ..DecodePolicy::default()
        };
        assert!(decode_events(&p, &w3).is_empty());
        let w1 = DecodePolicy {
            median_window: 1,
            ..DecodePolicy::default()
        };
        let e = decode_events(&p, &w1);
        assert_eq!(e.len(), 1);
        assert!((e[0].duration() - 0.0637).abs() < 1e-4);
    }

    #[test]
    fn raising_threshold_never_adds_frames() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = post(40, 3, |_, _| rng.random::<f64>());
        let frames = |tau: f64| {
            let events = decode_events(
                &p,
                &DecodePolicy {
                    threshold: tau,
                    median_window: 1,
                    frame_duration: 1.0,
                },
            );
            let mut set = std::collections::HashSet::new();
            for e in events {
                for k in e.onset as usize..e.offset as usize {
                    set.insert((e.class_id, k));
                }
            }
            set
        };
        for w in [0.1, 0.3, 0.5, 0.7, 0.9].windows(2) {
            assert!(frames(w[1]).is_subset(&frames(w[0])));
        }
    }
}
