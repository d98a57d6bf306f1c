use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{decode_events, event_f1_er, operating_point_counts, psds_from_counts, thresholds, Collars, Criteria};
use super::{DecodePolicy, OpCounts, PsdsParams};
use crate::corpus::EventList;
use crate::crnn::PosteriorMap;
use crate::error::{Result, SedError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub median_window: usize,
    pub collars: Collars,
    pub psds_criteria: Criteria,
    pub psds_e_max: f64,
    pub psds_thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            median_window: 7,
            collars: Collars::default(),
            psds_criteria: Criteria::default(),
            psds_e_max: 100.0,
            psds_thresholds: 50,
        }
    }
}

impl EvalConfig {
    pub fn decode_policy(&self, frame_duration: f64) -> DecodePolicy {
        DecodePolicy {
            threshold: self.threshold,
            median_window: self.median_window,
            frame_duration,
        }
    }

    pub fn presets(&self) -> [PsdsParams; 3] {
        [PsdsParams::plain(), PsdsParams::cross_trigger(), PsdsParams::macro_()].map(|p| PsdsParams {
            criteria: self.psds_criteria.clone(),
            e_max: self.psds_e_max,
            ..p
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.decode_policy(1.0).validate()?;
        if self.psds_thresholds == 0 || !(self.psds_e_max > 0.0) {
            return Err(SedError::Config("psds needs at least one threshold and e_max > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    /// Percent; absent when the class never occurs in references or output.
    pub f1: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub n_clips: usize,
    pub macro_f1: f64,
    pub error_rate: f64,
    pub psds: f64,
    pub psds_cross_trigger: f64,
    pub psds_macro: f64,
    pub per_class: Vec<ClassReport>,
    pub config: EvalConfig,
    pub psds_params: [PsdsParams; 3],
}

impl MetricReport {
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("model,class,f1,tp,fp,fn\n");
        for c in &self.per_class {
            let f1 = c.f1.map_or(String::new(), |v| format!("{v:.4}"));
            writeln!(out, "{},{},{},{},{},{}", self.model, c.name, f1, c.tp, c.fp, c.fn_).unwrap();
        }
        out
    }

    pub fn summary_csv(reports: &[MetricReport]) -> String {
        let mut out = String::from("model,macro_f1,error_rate,psds,psds_cross_trigger,psds_macro\n");
        for r in reports {
            writeln!(
                out,
                "{},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.model, r.macro_f1, r.error_rate, r.psds, r.psds_cross_trigger, r.psds_macro
            )
            .unwrap();
        }
        out
    }
}

/// Event metrics at the configured operating point plus all three PSDS presets.
pub fn evaluate_posteriors(
    model: &str,
    refs: &[EventList],
    posteriors: &[PosteriorMap],
    class_names: &[String],
    clip_duration: f64,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    cfg.validate()?;
    if refs.len() != posteriors.len() || refs.is_empty() {
        return Err(SedError::Data(format!(
            "evaluation needs matching, non-empty corpora ({} refs, {} posteriors)",
            refs.len(),
            posteriors.len()
        )));
    }
    let n_classes = class_names.len();
    if posteriors.iter().any(|p| p.classes() != n_classes) {
        return Err(SedError::Shape("posterior class count differs from the vocabulary".into()));
    }
    let frame_duration = clip_duration / posteriors[0].frames() as f64;
    let policy = cfg.decode_policy(frame_duration);
    let hyps: Vec<EventList> = posteriors.iter().map(|p| decode_events(p, &policy)).collect();
    let ev = event_f1_er(refs, &hyps, n_classes, &cfg.collars)?;
    let counts: Vec<OpCounts> = thresholds(cfg.psds_thresholds)
        .into_iter()
        .map(|threshold| {
            let op = DecodePolicy {
                threshold,
                median_window: 1,
                frame_duration,
            };
            let dets: Vec<EventList> = posteriors.iter().map(|p| decode_events(p, &op)).collect();
            operating_point_counts(refs, &dets, n_classes, &cfg.psds_criteria)
        })
        .collect();
    let total = clip_duration * refs.len() as f64;
    let presets = cfg.presets();
    let scores = presets
        .iter()
        .map(|p| psds_from_counts(&counts, refs, n_classes, total, p).map(|r| r.value))
        .collect::<Result<Vec<f64>>>()?;
    Ok(MetricReport {
        model: model.to_string(),
        n_clips: refs.len(),
        macro_f1: ev.macro_f1,
        error_rate: ev.error_rate,
        psds: scores[0],
        psds_cross_trigger: scores[1],
        psds_macro: scores[2],
        per_class: class_names
            .iter()
            .zip(&ev.per_class)
            .map(|(name, c)| ClassReport {
                name: name.clone(),
                f1: c.f1(),
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
            })
            .collect(),
        config: cfg.clone(),
        psds_params: presets,
    })
}
