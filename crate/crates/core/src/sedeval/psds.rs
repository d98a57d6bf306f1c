use serde::{Deserialize, Serialize};

use super::{decode_events, DecodePolicy};
use crate::corpus::{Event, EventList};
use crate::crnn::PosteriorMap;
use crate::error::{Result, SedError};

/// Intersection criteria shared by every PSDS variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Criteria {
    pub dtc: f64,
    pub gtc: f64,
    pub cttc: f64,
}

impl Default for Criteria {
    fn default() -> Self {
        Self {
            dtc: 0.5,
            gtc: 0.5,
            cttc: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsdsParams {
    pub criteria: Criteria,
    pub alpha_ct: f64,
    pub alpha_st: f64,
    /// False positives per hour.
    pub e_max: f64,
}

impl Default for PsdsParams {
    fn default() -> Self {
        Self::plain()
    }
}

impl PsdsParams {
    pub fn plain() -> Self {
        Self {
            criteria: Criteria::default(),
            alpha_ct: 0.0,
            alpha_st: 0.0,
            e_max: 100.0,
        }
    }

    pub fn cross_trigger() -> Self {
        Self {
            alpha_ct: 1.0,
            ..Self::plain()
        }
    }

    pub fn macro_() -> Self {
        Self {
            alpha_st: 1.0,
            ..Self::plain()
        }
    }
}

/// `n` evenly spaced thresholds from 0.01 to 0.99.
pub fn thresholds(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5],
        _ => (0..n).map(|i| 0.01 + 0.98 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Detection counts at one operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCounts {
    /// Reference events per class meeting the ground-truth coverage criterion.
    pub tp: Vec<usize>,
    /// Detections per class failing the detection tolerance criterion.
    pub fp: Vec<usize>,
    /// `ct[c][g]`: false detections of `c` that sit on references of `g`.
    pub ct: Vec<Vec<usize>>,
}

fn overlap(a: &Event, b: &Event) -> f64 {
    (a.offset.min(b.offset) - a.onset.max(b.onset)).max(0.0)
}

pub fn operating_point_counts(refs: &[EventList], dets: &[EventList], n_classes: usize, crit: &Criteria) -> OpCounts {
    let mut tp = vec![0; n_classes];
    let mut fp = vec![0; n_classes];
    let mut ct = vec![vec![0; n_classes]; n_classes];
    for (r, d) in refs.iter().zip(dets) {
        let mut valid: Vec<&Event> = Vec::new();
        for det in d {
            let same: f64 = r.iter().filter(|g| g.class_id == det.class_id).map(|g| overlap(det, g)).sum();
            if same >= crit.dtc * det.duration() {
                valid.push(det);
                continue;
            }
            fp[det.class_id] += 1;
            for g_class in 0..n_classes {
                if g_class == det.class_id {
                    continue;
                }
                let other: f64 = r.iter().filter(|g| g.class_id == g_class).map(|g| overlap(det, g)).sum();
                if other > 0.0 && other >= crit.cttc * det.duration() {
                    ct[det.class_id][g_class] += 1;
                }
            }
        }
        for g in r {
            let covered: f64 = valid.iter().filter(|v| v.class_id == g.class_id).map(|v| overlap(v, g)).sum();
            if covered >= crit.gtc * g.duration() {
                tp[g.class_id] += 1;
            }
        }
    }
    OpCounts { tp, fp, ct }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdsResult {
    pub value: f64,
    /// `(eFPR, effective TPR)` vertices of the summary curve.
    pub roc: Vec<(f64, f64)>,
}

/// Area under the effective-TPR step curve up to `e_max`, divided by `e_max`.
pub fn psds_from_counts(
    counts: &[OpCounts],
    refs: &[EventList],
    n_classes: usize,
    total_seconds: f64,
    params: &PsdsParams,
) -> Result<PsdsResult> {
    let n_ref: Vec<usize> = (0..n_classes).map(|c| refs.iter().flatten().filter(|e| e.class_id == c).count()).collect();
    let active: Vec<usize> = (0..n_classes).filter(|&c| n_ref[c] > 0).collect();
    if active.is_empty() {
        return Err(SedError::Data("PSDS needs at least one reference event".into()));
    }
    if !(total_seconds > 0.0) || !(params.e_max > 0.0) {
        return Err(SedError::Config("PSDS needs positive audio duration and e_max".into()));
    }
    let hours = total_seconds / 3600.0;
    let gt_hours: Vec<f64> = (0..n_classes)
        .map(|c| refs.iter().flatten().filter(|e| e.class_id == c).map(Event::duration).sum::<f64>() / 3600.0)
        .collect();
    // per class ROC points (eFPR, TPR)
    let curves: Vec<Vec<(f64, f64)>> = active
        .iter()
        .map(|&c| {
            let mut pts: Vec<(f64, f64)> = counts
                .iter()
                .map(|op| {
                    let fpr = op.fp[c] as f64 / hours;
                    let others: Vec<f64> = (0..n_classes)
                        .filter(|&g| g != c && gt_hours[g] > 0.0)
                        .map(|g| op.ct[c][g] as f64 / gt_hours[g])
                        .collect();
                    let ctr = if others.is_empty() {
                        0.0
                    } else {
                        others.iter().sum::<f64>() / others.len() as f64
                    };
                    (fpr + params.alpha_ct * ctr, op.tp[c] as f64 / n_ref[c] as f64)
                })
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            pts
        })
        .collect();
    // TPR of a class at rate x: best TPR among operating points with eFPR ≤ x
    let tpr_at = |curve: &[(f64, f64)], x: f64| {
        curve
            .iter()
            .take_while(|p| p.0 <= x)
            .map(|p| p.1)
            .fold(0.0f64, f64::max)
    };
    let mut xs: Vec<f64> = curves.iter().flatten().map(|p| p.0).filter(|&x| x < params.e_max).collect();
    xs.push(0.0);
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let roc: Vec<(f64, f64)> = xs
        .iter()
        .map(|&x| {
            let t: Vec<f64> = curves.iter().map(|c| tpr_at(c, x)).collect();
            let mean = t.iter().sum::<f64>() / t.len() as f64;
            let var = t.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64;
            (x, (mean - params.alpha_st * var.sqrt()).max(0.0))
        })
        .collect();
    let mut area = 0.0;
    for (i, &(x, y)) in roc.iter().enumerate() {
        let next = roc.get(i + 1).map_or(params.e_max, |p| p.0);
        area += (next - x) * y;
    }
    Ok(PsdsResult {
        value: (area / params.e_max).clamp(0.0, 1.0),
        roc,
    })
}

/// PSDS from detections already decoded at each operating point
/// (`dets[op][clip]`).
pub fn psds_from_operating_points(
    refs: &[EventList],
    dets: &[Vec<EventList>],
    n_classes: usize,
    total_seconds: f64,
    params: &PsdsParams,
) -> Result<PsdsResult> {
    let counts: Vec<OpCounts> = dets
        .iter()
        .map(|d| operating_point_counts(refs, d, n_classes, &params.criteria))
        .collect();
    psds_from_counts(&counts, refs, n_classes, total_seconds, params)
}

/// Decodes every posterior at each threshold (no median filtering) and scores.
pub fn psds(
    refs: &[EventList],
    posteriors: &[PosteriorMap],
    frame_duration: f64,
    clip_duration: f64,
    params: &PsdsParams,
    thresholds: &[f64],
) -> Result<PsdsResult> {
    if refs.len() != posteriors.len() {
        return Err(SedError::Data("reference and posterior corpora differ in size".into()));
    }
    let n_classes = posteriors.first().map_or(0, PosteriorMap::classes);
    let dets: Vec<Vec<EventList>> = thresholds
        .iter()
        .map(|&threshold| {
            let policy = DecodePolicy {
                threshold,
                median_window: 1,
                frame_duration,
            };
            posteriors.iter().map(|p| decode_events(p, &policy)).collect()
        })
        .collect();
    psds_from_operating_points(refs, &dets, n_classes, clip_duration * refs.len() as f64, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sedeval::events::tests::random_micro_corpus;
    use crate::tensor::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(c: usize, a: f64, b: f64) -> Event {
        Event::new(c, a, b).unwrap()
    }

    fn corpus() -> Vec<EventList> {
        vec![
            vec![ev(0, 0.5, 2.0), ev(1, 1.0, 3.0)],
            vec![ev(1, 4.0, 6.5)],
            vec![ev(0, 7.0, 9.0), ev(2, 2.0, 2.5)],
        ]
    }

    #[test]
    fn perfect_and_silent_detectors() {
        let refs = corpus();
        let ops = vec![refs.clone(); 50];
        for p in [PsdsParams::plain(), PsdsParams::cross_trigger(), PsdsParams::macro_()] {
            let r = psds_from_operating_points(&refs, &ops, 3, 30.0, &p).unwrap();
            assert!((r.value - 1.0).abs() < 1e-9);
        }
        let silent = vec![vec![vec![]; 3]; 50];
        let r = psds_from_operating_points(&refs, &silent, 3, 30.0, &PsdsParams::plain()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(psds_from_operating_points(&[vec![]], &[vec![vec![]]], 3, 10.0, &PsdsParams::plain()).is_err());
    }

    #[test]
    fn perfect_posteriors_through_decoding() {
        let k = 40;
        let refs = vec![vec![ev(0, 1.0, 3.0)], vec![ev(1, 5.0, 8.0)]];
        let posts: Vec<PosteriorMap> = refs
            .iter()
            .map(|r| {
                PosteriorMap::new(Array::from_fn([k, 2], |i| {
                    let (f, c) = (i / 2, i % 2);
                    let t = (f as f64 + 0.5) * 0.25;
                    if r.iter().any(|e| e.class_id == c && e.onset <= t && t < e.offset) {
                        1.0
                    } else {
                        0.0
                    }
                }))
                .unwrap()
            })
            .collect();
        let r = psds(&refs, &posts, 0.25, 10.0, &PsdsParams::plain(), &thresholds(50)).unwrap();
        assert!((r.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn std_penalty_when_one_class_missed() {
        let refs = vec![vec![ev(0, 0.0, 1.0), ev(1, 2.0, 3.0)]];
        let dets = vec![vec![vec![ev(0, 0.0, 1.0)]]];
        let plain = psds_from_operating_points(&refs, &dets, 2, 10.0, &PsdsParams::plain()).unwrap();
        let mac = psds_from_operating_points(&refs, &dets, 2, 10.0, &PsdsParams::macro_()).unwrap();
        assert!((plain.value - 0.5).abs() < 1e-12);
        assert!(mac.value < plain.value);
    }

    #[test]
    fn cross_triggers_cost_extra() {
        let refs = vec![vec![ev(0, 0.0, 2.0), ev(1, 5.0, 7.0)]];
        // class 0 fires on top of the class-1 reference as well
        let dets = vec![vec![vec![ev(0, 0.0, 2.0), ev(1, 5.0, 7.0), ev(0, 5.0, 7.0)]]];
        let counts = operating_point_counts(&refs, &dets[0], 2, &Criteria::default());
        assert_eq!((counts.fp[0], counts.ct[0][1]), (1, 1));
        let params = PsdsParams { e_max: 10_000.0, ..PsdsParams::plain() };
        let plain = psds_from_operating_points(&refs, &dets, 2, 3600.0, &params).unwrap();
        let ct = psds_from_operating_points(&refs, &dets, 2, 3600.0, &PsdsParams { alpha_ct: 1.0, ..params }).unwrap();
        assert!(ct.value < plain.value);
    }

    #[test]
    fn random_corpora_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let refs = random_micro_corpus(&mut rng, 4, 3);
            if refs.iter().all(Vec::is_empty) {
                continue;
            }
            let dets: Vec<Vec<EventList>> = (0..5).map(|_| random_micro_corpus(&mut rng, 4, 3)).collect();
            let total = 4.0 * rng.random_range(5.0..20.0);
            let vals: Vec<f64> = [PsdsParams::plain(), PsdsParams::cross_trigger(), PsdsParams::macro_()]
                .iter()
                .map(|p| psds_from_operating_points(&refs, &dets, 3, total, p).unwrap().value)
                .collect();
            assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(vals[2] <= vals[0] + 1e-12);
            assert!(vals[1] <= vals[0] + 1e-12);
        }
    }

    #[test]
    fn summary_curve_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let refs = vec![vec![ev(0, 1.0, 4.0), ev(1, 2.0, 6.0)], vec![ev(0, 5.0, 9.0)]];
        let posts: Vec<PosteriorMap> = (0..2)
            .map(|_| PosteriorMap::new(Array::from_fn([40, 2], |_| rng.random::<f64>())).unwrap())
            .collect();
        let params = PsdsParams { e_max: 5_000.0, ..PsdsParams::plain() };
        let r = psds(&refs, &posts, 0.25, 10.0, &params, &thresholds(50)).unwrap();
        assert!(r.roc.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        assert!((0.0..=1.0).contains(&r.value));
    }
}
