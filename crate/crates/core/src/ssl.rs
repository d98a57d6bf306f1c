//! Soft-target semi-supervised loss, mean-teacher machinery and pseudo-label
//! decoding.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Event;
use crate::crnn::{Crnn, PosteriorMap};
use crate::error::{Result, SedError};
use crate::params::ParamStore;
use crate::sedeval::median_filter;
use crate::tensor::{Array, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceTag {
    #[serde(rename = "S")]
    Strong,
    #[serde(rename = "W")]
    Weak,
    #[serde(rename = "U")]
    Unlabeled,
}

impl SourceTag {
    pub fn byte(self) -> u8 {
        match self {
            SourceTag::Strong => b'S',
            SourceTag::Weak => b'W',
            SourceTag::Unlabeled => b'U',
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            b'S' => Ok(SourceTag::Strong),
            b'W' => Ok(SourceTag::Weak),
            b'U' => Ok(SourceTag::Unlabeled),
            _ => Err(SedError::Format(format!("unknown source tag byte {b:#04x}"))),
        }
    }
}

/// Frame-level `K × C` targets of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    pub values: Array,
    pub source: SourceTag,
}

impl TargetMap {
    pub fn new(values: Array, source: SourceTag) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(SedError::Shape(format!("target map must be 2-D, got {:?}", values.shape())));
        }
        if values.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SedError::Data("target values must lie in [0, 1]".into()));
        }
        Ok(Self { values, source })
    }

    /// Binary strong targets: frame `k` is active when its centre
    /// `(k + 0.5)·d` falls inside `[onset, offset)`.
    pub fn from_events(events: &[Event], frames: usize, n_classes: usize, frame_duration: f64) -> Result<Self> {
        let mut values = Array::zeros([frames, n_classes]);
        for e in events {
            if e.class_id >= n_classes {
                return Err(SedError::Data(format!("event class {} outside {n_classes} classes", e.class_id)));
            }
            for k in 0..frames {
                let centre = (k as f64 + 0.5) * frame_duration;
                if e.onset <= centre && centre < e.offset {
                    values.set2(k, e.class_id, 1.0);
                }
            }
        }
        Ok(Self {
            values,
            source: SourceTag::Strong,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_binary(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslLossConfig {
    pub beta_w: f64,
    pub beta_u: f64,
    /// Treat the prediction inside the soft target as a constant.
    pub detach_prediction_in_target: bool,
}

impl Default for SslLossConfig {
    fn default() -> Self {
        Self {
            beta_w: 0.5,
            beta_u: 0.5,
            detach_prediction_in_target: true,
        }
    }
}

impl SslLossConfig {
    pub fn beta(&self, source: SourceTag) -> f64 {
        match source {
            SourceTag::Strong => 1.0,
            SourceTag::Weak => self.beta_w,
            SourceTag::Unlabeled => self.beta_u,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta_w", self.beta_w), ("beta_u", self.beta_u)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(SedError::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// `ȳ = β·y + (1 − β)·ŷ` for one clip; `pred` is `[K, C]` or `[1, K, C]`.
pub fn soft_target(tape: &mut Tape, y: &TargetMap, pred: Tensor, beta: f64, detach: bool) -> Result<Tensor> {
    let ps = tape.shape(pred).to_vec();
    if ps.iter().product::<usize>() != y.values.len() || ps[ps.len() - 2..] != *y.values.shape() {
        return Err(SedError::Shape(format!("soft target: prediction {ps:?} vs target {:?}", y.values.shape())));
    }
    let p = if detach { tape.detach(pred) } else { pred };
    let mixed = tape.scale(p, 1.0 - beta);
    let fixed = Array::from_fn(ps, |i| beta * y.values.data()[i]);
    let fixed = tape.constant(fixed);
    tape.add(mixed, fixed)
}

/// Mean over the `M` batch items of the summed soft binary cross-entropy
/// `−Σ_{k,c} [ȳ log ŷ + (1 − ȳ) log(1 − ŷ)]`, where `pred` is `[M, K, C]`.
pub fn semi_supervised_loss(tape: &mut Tape, pred: Tensor, targets: &[&TargetMap], cfg: &SslLossConfig) -> Result<Tensor> {
    let ps = tape.shape(pred).to_vec();
    let m = targets.len();
    if m == 0 || ps.len() != 3 || ps[0] != m {
        return Err(SedError::Shape(format!("loss: prediction {ps:?} for {m} targets")));
    }
    let per_item = ps[1] * ps[2];
    let mut fixed = Vec::with_capacity(m * per_item);
    let mut keep = Vec::with_capacity(m);
    for t in targets {
        if t.values.shape() != &ps[1..] {
            return Err(SedError::Shape(format!("loss: target {:?} vs prediction {ps:?}", t.values.shape())));
        }
        let beta = cfg.beta(t.source);
        fixed.extend(t.values.data().iter().map(|v| beta * v));
        keep.push(1.0 - beta);
    }
    let target = if keep.iter().all(|&k| k == 0.0) {
        tape.constant(Array::new(ps.clone(), fixed)?)
    } else {
        let p = if cfg.detach_prediction_in_target { tape.detach(pred) } else { pred };
        let coef = tape.constant(Array::new([m, 1, 1], keep)?);
        let mixed = tape.mul(p, coef)?;
        let fixed = tape.constant(Array::new(ps.clone(), fixed)?);
        tape.add(mixed, fixed)?
    };
    let total = tape.soft_bce_sum(pred, target)?;
    Ok(tape.scale(total, 1.0 / m as f64))
}

/// Mean squared error between student and teacher posteriors; the teacher
/// branch is always treated as a constant.
pub fn consistency_loss(tape: &mut Tape, student: Tensor, teacher: Tensor) -> Result<Tensor> {
    if tape.shape(student) != tape.shape(teacher) {
        return Err(SedError::Shape(format!(
            "consistency: {:?} vs {:?}",
            tape.shape(student),
            tape.shape(teacher)
        )));
    }
    let t = tape.detach(teacher);
    let d = tape.sub(student, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Student parameters plus their exponential moving average.
#[derive(Clone, Debug)]
pub struct MeanTeacher {
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub ema_decay: f64,
    pub consistency_weight: f64,
}

impl MeanTeacher {
    pub fn new(student: ParamStore, ema_decay: f64, consistency_weight: f64) -> Self {
        Self {
            teacher: student.clone(),
            student,
            ema_decay,
            consistency_weight,
        }
    }

    /// `teacher ← α·teacher + (1 − α)·student`.
    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.ema_decay)
    }
}

pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(SedError::Shape("teacher and student layouts differ".into()));
    }
    for (t, (_, s)) in teacher.values_mut().zip(student.iter()) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}

/// Sigmoid-shaped ramp `exp(−5(1 − t)²)` from 0 to `max_weight` over `ramp_epochs`.
pub fn consistency_ramp(epoch: usize, ramp_epochs: usize, max_weight: f64) -> f64 {
    if ramp_epochs == 0 {
        return max_weight;
    }
    let t = (epoch as f64 / ramp_epochs as f64).clamp(0.0, 1.0);
    max_weight * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelPolicy {
    pub threshold: f64,
    /// Odd window, in output frames.
    pub median_window: usize,
    /// Zero classes outside a weak clip's label set.
    pub weak_mask: bool,
}

impl Default for PseudoLabelPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            median_window: 7,
            weak_mask: true,
        }
    }
}

impl PseudoLabelPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) || self.median_window % 2 == 0 {
            return Err(SedError::Config(format!("invalid pseudo-label policy {self:?}")));
        }
        Ok(())
    }
}

/// Median filter, threshold and optional weak-label mask on a posterior map.
pub fn binarize_posterior(post: &PosteriorMap, weak_labels: Option<&[usize]>, policy: &PseudoLabelPolicy) -> TargetMap {
    let (k, c) = (post.frames(), post.classes());
    let mut values = Array::zeros([k, c]);
    for class in 0..c {
        if policy.weak_mask && weak_labels.is_some_and(|w| !w.contains(&class)) {
            continue;
        }
        let smooth = median_filter(&post.column(class), policy.median_window);
        for (f, v) in smooth.iter().enumerate() {
            if *v > policy.threshold {
                values.set2(f, class, 1.0);
            }
        }
    }
    let source = if weak_labels.is_some() {
        SourceTag::Weak
    } else {
        SourceTag::Unlabeled
    };
    TargetMap { values, source }
}

/// Decodes a frozen teacher's posterior for one normalised clip into a binary map.
pub fn pseudo_label(
    model: &Crnn,
    teacher: &ParamStore,
    features: &Array,
    weak_labels: Option<&[usize]>,
    policy: &PseudoLabelPolicy,
) -> Result<TargetMap> {
    let post = model.predict(teacher, &[features])?.remove(0);
    Ok(binarize_posterior(&post, weak_labels, policy))
}

pub const TARGET_MAGIC: &[u8; 4] = b"SEDT";

/// `SEDT | u32 K | u32 C | K·C bytes of {0,1} | source byte`.
pub fn write_target(path: &Path, t: &TargetMap) -> Result<()> {
    if !t.is_binary() {
        return Err(SedError::Data("only binary target maps can be stored".into()));
    }
    let mut out = Vec::with_capacity(13 + t.values.len());
    out.write_all(TARGET_MAGIC).unwrap();
    out.write_all(&(t.frames() as u32).to_le_bytes()).unwrap();
    out.write_all(&(t.classes() as u32).to_le_bytes()).unwrap();
    out.extend(t.values.data().iter().map(|&v| v as u8));
    out.push(t.source.byte());
    fs::write(path, out).map_err(SedError::io(path))
}

pub fn read_target(path: &Path) -> Result<TargetMap> {
    let bytes = fs::read(path).map_err(SedError::io(path))?;
    let bad = |m: &str| SedError::Format(format!("{}: {m}", path.display()));
    let mut r = bytes.as_slice();
    let mut head = [0u8; 12];
    r.read_exact(&mut head).map_err(|_| bad("truncated"))?;
    if &head[..4] != TARGET_MAGIC {
        return Err(bad("not a target file"));
    }
    let k = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    if r.len() != k * c + 1 {
        return Err(bad("size does not match dimensions"));
    }
    if r[..k * c].iter().any(|&b| b > 1) {
        return Err(bad("non-binary entry"));
    }
    let values = Array::new([k, c], r[..k * c].iter().map(|&b| b as f64).collect())?;
    Ok(TargetMap {
        values,
        source: SourceTag::from_byte(r[k * c])?,
    })
}
