use serde::{Deserialize, Serialize};

use crate::corpus::{Event, EventList};
use crate::error::{Result, SedError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Collars {
    /// Seconds.
    pub onset: f64,
    /// Seconds; the offset collar is `max(offset, offset_ratio · ref duration)`.
    pub offset: f64,
    pub offset_ratio: f64,
}

impl Default for Collars {
    fn default() -> Self {
        Self {
            onset: 0.2,
            offset: 0.2,
            offset_ratio: 0.2,
        }
    }
}

impl Collars {
    pub fn matches(&self, r: &Event, h: &Event) -> bool {
        // small slack so that collars of exactly 200 ms survive float rounding
        let tol = 1e-9;
        (h.onset - r.onset).abs() <= self.onset + tol
            && (h.offset - r.offset).abs() <= self.offset.max(self.offset_ratio * r.duration()) + tol
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassCounts {
    /// Percent; `None` when the class has neither references nor hypotheses.
    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| 100.0 * 2.0 * self.tp as f64 / denom as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventMetrics {
    pub macro_f1: f64,
    pub error_rate: f64,
    pub per_class: Vec<ClassCounts>,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n_ref: usize,
}

/// Maximum one-to-one matching between same-class references and hypotheses
/// of one clip: a greedy pass, then augmenting paths, so the
/// count equals the optimum. Returns `ref → hyp` assignments.
pub fn match_class(refs: &[&Event], hyps: &[&Event], collars: &Collars) -> Vec<Option<usize>> {
    let adj: Vec<Vec<usize>> = refs
        .iter()
        .map(|r| (0..hyps.len()).filter(|&j| collars.matches(r, hyps[j])).collect())
        .collect();
    let mut ref_of: Vec<Option<usize>> = vec![None; hyps.len()];
    let mut hyp_of: Vec<Option<usize>> = vec![None; refs.len()];
    for (i, cands) in adj.iter().enumerate() {
        if let Some(&j) = cands.iter().find(|&&j| ref_of[j].is_none()) {
            ref_of[j] = Some(i);
            hyp_of[i] = Some(j);
        }
    }
    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], ref_of: &mut [Option<usize>], hyp_of: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if ref_of[j].is_none_or(|k| augment(k, adj, seen, ref_of, hyp_of)) {
                ref_of[j] = Some(i);
                hyp_of[i] = Some(j);
                return true;
            }
        }
        false
    }
    for i in 0..refs.len() {
        if hyp_of[i].is_none() {
            let mut seen = vec![false; hyps.len()];
            augment(i, &adj, &mut seen, &mut ref_of, &mut hyp_of);
        }
    }
    hyp_of
}

/// Event-based macro F1 (percent) and pooled error rate over a corpus of
/// clips. Leftover misses and false alarms of a clip pair up as substitutions.
pub fn event_f1_er(refs: &[EventList], hyps: &[EventList], n_classes: usize, collars: &Collars) -> Result<EventMetrics> {
    if refs.len() != hyps.len() {
        return Err(SedError::Data(format!("{} reference clips vs {} hypothesis clips", refs.len(), hyps.len())));
    }
    let mut per_class = vec![ClassCounts::default(); n_classes];
    let (mut s_total, mut d_total, mut i_total, mut n_total) = (0, 0, 0, 0);
    for (r, h) in refs.iter().zip(hyps) {
        for e in r.iter().chain(h) {
            e.validate()?;
            if e.class_id >= n_classes {
                return Err(SedError::Data(format!("event class {} outside {n_classes} classes", e.class_id)));
            }
        }
        let mut tp_clip = 0;
        for (c, counts) in per_class.iter_mut().enumerate() {
            let rc: Vec<&Event> = r.iter().filter(|e| e.class_id == c).collect();
            let hc: Vec<&Event> = h.iter().filter(|e| e.class_id == c).collect();
            let tp = match_class(&rc, &hc, collars).iter().flatten().count();
            counts.tp += tp;
            counts.fn_ += rc.len() - tp;
            counts.fp += hc.len() - tp;
            tp_clip += tp;
        }
        let (fn_clip, fp_clip) = (r.len() - tp_clip, h.len() - tp_clip);
        let s = fn_clip.min(fp_clip);
        s_total += s;
        d_total += fn_clip - s;
        i_total += fp_clip - s;
        n_total += r.len();
    }
    let scores: Vec<f64> = per_class.iter().filter_map(ClassCounts::f1).collect();
    let macro_f1 = if scores.is_empty() {
        100.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    Ok(EventMetrics {
        macro_f1,
        error_rate: (s_total + d_total + i_total) as f64 / n_total.max(1) as f64,
        per_class,
        substitutions: s_total,
        deletions: d_total,
        insertions: i_total,
        n_ref: n_total,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(c: usize, a: f64, b: f64) -> Event {
        Event::new(c, a, b).unwrap()
    }

    #[test]
    fn identical_and_empty() {
        let refs = vec![vec![ev(0, 0.0, 1.0), ev(1, 2.0, 3.5)], vec![ev(1, 0.5, 0.9)]];
        let m = event_f1_er(&refs, &refs, 2, &Collars::default()).unwrap();
        assert_eq!((m.macro_f1, m.error_rate), (100.0, 0.0));
        let none = vec![vec![], vec![]];
        let m = event_f1_er(&refs, &none, 2, &Collars::default()).unwrap();
        assert_eq!((m.macro_f1, m.error_rate, m.deletions), (0.0, 1.0, 3));
    }

    #[test]
    fn collar_arithmetic() {
        let r = vec![vec![ev(0, 0.0, 2.0)]];
        let h = vec![vec![ev(0, 0.15, 2.1)]];
        assert_eq!(event_f1_er(&r, &h, 1, &Collars::default()).unwrap().macro_f1, 100.0);
        let late = vec![vec![ev(0, 0.25, 2.0)]];
        let m = event_f1_er(&r, &late, 1, &Collars::default()).unwrap();
        assert_eq!((m.macro_f1, m.substitutions), (0.0, 1));
        // long reference: offset collar grows to 20% of its duration
        let r = vec![vec![ev(0, 0.0, 5.0)]];
        let h = vec![vec![ev(0, 0.0, 5.9)]];
        assert_eq!(event_f1_er(&r, &h, 1, &Collars::default()).unwrap().macro_f1, 100.0);
    }

    #[test]
    fn cross_class_substitution() {
        let r = vec![vec![ev(0, 1.0, 2.0)]];
        let h = vec![vec![ev(1, 1.0, 2.0), ev(1, 5.0, 6.0)]];
        let m = event_f1_er(&r, &h, 2, &Collars::default()).unwrap();
        assert_eq!((m.substitutions, m.deletions, m.insertions), (1, 0, 1));
        assert_eq!(m.error_rate, 2.0);
    }

    #[test]
    fn malformed_rejected() {
        let bad = vec![vec![Event {
            class_id: 0,
            onset: 2.0,
            offset: 1.0,
        }]];
        assert!(matches!(event_f1_er(&bad, &bad, 1, &Collars::default()), Err(SedError::Data(_))));
    }

    #[test]
    fn duplicate_hypothesis_for_unmatched_ref_adds_tp() {
        let r = vec![vec![ev(0, 0.0, 1.0), ev(0, 3.0, 4.0)]];
        let h = vec![vec![ev(0, 0.0, 1.0)]];
        let before = event_f1_er(&r, &h, 1, &Collars::default()).unwrap().per_class[0].tp;
        let h2 = vec![vec![ev(0, 0.0, 1.0), ev(0, 3.0, 4.0)]];
        let after = event_f1_er(&r, &h2, 1, &Collars::default()).unwrap().per_class[0].tp;
        assert_eq!(after, before + 1);
    }

    /// Exhaustive search over all one-to-one matchings.
    pub(crate) fn brute_force_tp(refs: &[&Event], hyps: &[&Event], collars: &Collars) -> usize {
        fn go(i: usize, refs: &[&Event], hyps: &[&Event], used: &mut Vec<bool>, c: &Collars) -> usize {
            if i == refs.len() {
                return 0;
            }
            let mut best = go(i + 1, refs, hyps, used, c);
            for j in 0..hyps.len() {
                if !used[j] && c.matches(refs[i], hyps[j]) {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, refs, hyps, used, c));
                    used[j] = false;
                }
            }
            best
        }
        go(0, refs, hyps, &mut vec![false; hyps.len()], collars)
    }

    pub(crate) fn random_micro_corpus(rng: &mut ChaCha8Rng, clips: usize, classes: usize) -> Vec<EventList> {
        (0..clips)
            .map(|_| {
                (0..rng.random_range(0..=4))
                    .map(|_| {
                        let on = (rng.random_range(0.0..3.0) * 20.0f64).round() / 20.0;
                        let dur = (rng.random_range(0.1..1.5) * 20.0f64).round() / 20.0;
                        ev(rng.random_range(0..classes), on, on + dur.max(0.05))
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn matcher_equals_brute_force_on_micro_corpora() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let collars = Collars::default();
        for _ in 0..100 {
            let refs = random_micro_corpus(&mut rng, 3, 3);
            let hyps = random_micro_corpus(&mut rng, 3, 3);
            for (r, h) in refs.iter().zip(&hyps) {
                for c in 0..3 {
                    let rc: Vec<&Event> = r.iter().filter(|e| e.class_id == c).collect();
                    let hc: Vec<&Event> = h.iter().filter(|e| e.class_id == c).collect();
                    let greedy = match_class(&rc, &hc, &collars).iter().flatten().count();
                    assert_eq!(greedy, brute_force_tp(&rc, &hc, &collars));
                }
            }
        }
    }
}
