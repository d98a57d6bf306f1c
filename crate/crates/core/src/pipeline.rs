//! Training orchestration: batch composition, cross-validation folds, the
//! mean-teacher first stage, per-fold student training and fold ensembles.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audiofeat::FeatureMap;
use crate::augment::{mixup, spec_augment, AugmentPolicy};
use crate::corpus::CorpusManifest;
use crate::crnn::{stack, Crnn, PosteriorMap};
use crate::error::{Result, SedError};
use crate::params::{Adam, ParamStore};
use crate::ssl::{consistency_loss, consistency_ramp, ema_update, semi_supervised_loss, SourceTag, SslLossConfig, TargetMap};
use crate::synthgen::splitmix64;
use crate::tensor::{Array, Tape, PROB_EPS};

/// Split order used for sizes and portions everywhere in this module.
pub const SPLITS: [SourceTag; 3] = [SourceTag::Strong, SourceTag::Weak, SourceTag::Unlabeled];

#[cfg(test)]
fn split_index(tag: SourceTag) -> usize {
    match tag {
        SourceTag::Strong => 0,
        SourceTag::Weak => 1,
        SourceTag::Unlabeled => 2,
    }
}

pub(crate) fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SemiSupervised,
    /// Strong clips only; the weak and unlabeled splits are ignored.
    StrongOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Multiple of 4: a quarter unlabeled, half weak, a quarter strong.
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub beta_w: f64,
    pub beta_u: f64,
    /// Extra β values (applied to both β_W and β_U), one model set each.
    pub beta_sweep: Vec<f64>,
    pub n_folds: usize,
    /// Optimiser steps per student epoch; 0 means one natural epoch of the
    /// batch sampler. A fixed value gives every model set the same budget.
    pub steps_per_epoch: usize,
    /// Also train a strong-only model set for comparison.
    pub strong_only_baseline: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            lr: 0.0009,
            max_epochs: 100,
            early_stop_patience: 15,
            plateau_factor: 0.5,
            plateau_patience: 5,
            beta_w: 0.5,
            beta_u: 0.5,
            beta_sweep: Vec::new(),
            n_folds: 5,
            steps_per_epoch: 0,
            strong_only_baseline: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            batch_size: 8,
            max_epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SedError::Config(m));
        if self.batch_size == 0 || self.batch_size % 4 != 0 {
            return bad(format!("batch_size must be a positive multiple of 4, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.n_folds < 2 {
            return bad(format!("n_folds must be at least 2, got {}", self.n_folds));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        self.loss_config(true).validate()?;
        for &b in &self.beta_sweep {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("sweep β {b} outside (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn loss_config(&self, detach: bool) -> SslLossConfig {
        SslLossConfig {
            beta_w: self.beta_w,
            beta_u: self.beta_u,
            detach_prediction_in_target: detach,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub ema_decay: f64,
    pub consistency_weight: f64,
    pub consistency_ramp_epochs: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            ema_decay: 0.999,
            consistency_weight: 2.0,
            consistency_ramp_epochs: 10,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_decay) || !(self.consistency_weight >= 0.0) || self.epochs == 0 {
            return Err(SedError::Config(format!("invalid teacher config {self:?}")));
        }
        Ok(())
    }
}

// ----- batches -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BatchItem {
    pub source: SourceTag,
    pub index: usize,
}

/// Exact per-batch portions `[strong, weak, unlabeled] = [b/4, b/2, b/4]`.
pub fn batch_portions(batch_size: usize, sizes: [usize; 3]) -> Result<[usize; 3]> {
    if batch_size == 0 || batch_size % 4 != 0 {
        return Err(SedError::Config(format!("batch size {batch_size} is not a positive multiple of 4")));
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(SedError::Config(format!("{:?} split is empty", SPLITS[i])));
    }
    Ok([batch_size / 4, batch_size / 2, batch_size / 4])
}

/// Like [`batch_portions`], but an empty split's share goes to the strong
/// split (strong-only or partially labeled corpora).
pub fn lenient_portions(batch_size: usize, sizes: [usize; 3]) -> Result<[usize; 3]> {
    if batch_size == 0 || batch_size % 4 != 0 {
        return Err(SedError::Config(format!("batch size {batch_size} is not a positive multiple of 4")));
    }
    if sizes[0] == 0 {
        return Err(SedError::Config("strong split is empty".into()));
    }
    let weak = if sizes[1] > 0 { batch_size / 2 } else { 0 };
    let unl = if sizes[2] > 0 { batch_size / 4 } else { 0 };
    Ok([batch_size - weak - unl, weak, unl])
}

/// One batch drawn from the manifest's splits: exactly b/4 strong, b/2 weak
/// and b/4 unlabeled items, distinct within each split where possible.
pub fn compose_batch<R: RngCore + ?Sized>(manifest: &CorpusManifest, batch_size: usize, rng: &mut R) -> Result<Vec<BatchItem>> {
    let c = manifest.counts();
    let sizes = [c.strong, c.weak, c.unlabeled];
    let portions = batch_portions(batch_size, sizes)?;
    let mut out = Vec::with_capacity(batch_size);
    for ((tag, n), k) in SPLITS.into_iter().zip(sizes).zip(portions) {
        let mut drawn = 0;
        while drawn < k {
            let take = (k - drawn).min(n);
            for index in rand::seq::index::sample(rng, n, take) {
                out.push(BatchItem { source: tag, index });
            }
            drawn += take;
        }
    }
    Ok(out)
}

/// Epoch-wise sampler: each split is drawn without replacement from a fresh
/// shuffle, reshuffled whenever it runs out. An epoch is long enough for the
/// slowest-consumed split to be seen once.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    sizes: [usize; 3],
    portions: [usize; 3],
    order: [Vec<usize>; 3],
    cursor: [usize; 3],
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(sizes: [usize; 3], portions: [usize; 3], seed: u64) -> Result<Self> {
        if portions.iter().sum::<usize>() == 0 {
            return Err(SedError::Config("batch has no items".into()));
        }
        for i in 0..3 {
            if portions[i] > 0 && sizes[i] == 0 {
                return Err(SedError::Config(format!("{:?} split is empty", SPLITS[i])));
            }
        }
        let mut s = Self {
            sizes,
            portions,
            order: Default::default(),
            cursor: [0; 3],
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle_all();
        Ok(s)
    }

    /// Sampler with the standard exact portions.
    pub fn standard(sizes: [usize; 3], batch_size: usize, seed: u64) -> Result<Self> {
        Self::new(sizes, batch_portions(batch_size, sizes)?, seed)
    }

    pub fn portions(&self) -> [usize; 3] {
        self.portions
    }

    pub fn batches_per_epoch(&self) -> usize {
        (0..3)
            .filter(|&i| self.portions[i] > 0)
            .map(|i| self.sizes[i].div_ceil(self.portions[i]))
            .max()
            .unwrap_or(0)
    }

    fn reshuffle(&mut self, i: usize) {
        let mut v: Vec<usize> = (0..self.sizes[i]).collect();
        v.shuffle(&mut self.rng);
        self.order[i] = v;
        self.cursor[i] = 0;
    }

    fn reshuffle_all(&mut self) {
        (0..3).for_each(|i| self.reshuffle(i));
    }

    /// Items ordered strong, weak, unlabeled.
    pub fn next_batch(&mut self) -> Vec<BatchItem> {
        let mut out = Vec::with_capacity(self.portions.iter().sum());
        for i in 0..3 {
            for _ in 0..self.portions[i] {
                if self.cursor[i] == self.sizes[i] {
                    self.reshuffle(i);
                }
                out.push(BatchItem {
                    source: SPLITS[i],
                    index: self.order[i][self.cursor[i]],
                });
                self.cursor[i] += 1;
            }
        }
        out
    }

    /// A full epoch, starting from fresh shuffles of every split.
    pub fn epoch(&mut self) -> Vec<Vec<BatchItem>> {
        self.reshuffle_all();
        (0..self.batches_per_epoch()).map(|_| self.next_batch()).collect()
    }
}

// ----- data and folds ----------------------------------------------------

/// One training clip with normalised features and whatever labels it has.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub features: FeatureMap,
    /// Frame targets: ground truth for strong clips, pseudo labels otherwise.
    pub target: Option<TargetMap>,
    /// Clip-level label set of weak clips.
    pub classes: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub strong: Vec<Sample>,
    pub weak: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, tag: SourceTag) -> &[Sample] {
        match tag {
            SourceTag::Strong => &self.strong,
            SourceTag::Weak => &self.weak,
            SourceTag::Unlabeled => &self.unlabeled,
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.strong.len(), self.weak.len(), self.unlabeled.len()]
    }

    pub fn len(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, item: BatchItem) -> &Sample {
        &self.split(item.source)[item.index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.strong.iter().chain(&self.weak).chain(&self.unlabeled)
    }

    pub fn names(&self) -> [Vec<String>; 3] {
        SPLITS.map(|t| self.split(t).iter().map(|s| s.name.clone()).collect())
    }

    pub fn strong_only(&self) -> Dataset {
        Dataset {
            strong: self.strong.clone(),
            ..Dataset::default()
        }
    }

    /// `(training folds, held-out fold)`.
    pub fn partition(&self, plan: &FoldPlan, fold: usize) -> Result<(Dataset, Dataset)> {
        if fold >= plan.n_folds {
            return Err(SedError::Usage(format!("fold {fold} of {}", plan.n_folds)));
        }
        let mut train = Dataset::default();
        let mut held = Dataset::default();
        for tag in SPLITS {
            for s in self.split(tag) {
                let f = plan
                    .assignment
                    .get(&s.name)
                    .ok_or_else(|| SedError::Data(format!("clip {} has no fold assignment", s.name)))?;
                let dst = if *f == fold { &mut held } else { &mut train };
                dst.split_mut(tag).push(s.clone());
            }
        }
        Ok((train, held))
    }

    fn split_mut(&mut self, tag: SourceTag) -> &mut Vec<Sample> {
        match tag {
            SourceTag::Strong => &mut self.strong,
            SourceTag::Weak => &mut self.weak,
            SourceTag::Unlabeled => &mut self.unlabeled,
        }
    }

    fn require_targets(&self) -> Result<()> {
        match self.iter().find(|s| s.target.is_none()) {
            Some(s) => Err(SedError::Data(format!("clip {} has no frame targets (missing pseudo label?)", s.name))),
            None => Ok(()),
        }
    }
}

/// Assignment of every clip to one of `n_folds` folds, stratified by split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, clip: &str) -> Option<usize> {
        self.assignment.get(clip).copied()
    }

    pub fn fold_sizes<'a>(&self, clips: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for c in clips {
            if let Some(f) = self.fold_of(c) {
                sizes[f] += 1;
            }
        }
        sizes
    }
}

/// Shuffles each split separately and deals its clips round-robin, so
/// per-split fold sizes differ by at most one.
pub fn make_folds_for(splits: &[Vec<String>], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds == 0 {
        return Err(SedError::Config("n_folds must be positive".into()));
    }
    let mut assignment = BTreeMap::new();
    for (si, names) in splits.iter().enumerate() {
        if !names.is_empty() && names.len() < n_folds {
            return Err(SedError::Config(format!(
                "split {si} has {} clips, fewer than {n_folds} folds",
                names.len()
            )));
        }
        let mut order: Vec<usize> = (0..names.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, si as u64)));
        for (pos, &i) in order.iter().enumerate() {
            if assignment.insert(names[i].clone(), pos % n_folds).is_some() {
                return Err(SedError::Data(format!("clip {} appears twice", names[i])));
            }
        }
    }
    Ok(FoldPlan {
        n_folds,
        seed,
        assignment,
    })
}

pub fn make_folds(manifest: &CorpusManifest, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    let splits = [
        manifest.strong.iter().map(|c| c.name.clone()).collect(),
        manifest.weak.iter().map(|c| c.name.clone()).collect(),
        manifest.unlabeled.clone(),
    ];
    for (n, tag) in splits.iter().zip(SPLITS) {
        if n.len() < n_folds {
            return Err(SedError::Config(format!("{tag:?} split has {} clips, fewer than {n_folds} folds", n.len())));
        }
    }
    make_folds_for(&splits, n_folds, seed)
}

// ----- scheduling --------------------------------------------------------

/// Plateau learning-rate decay plus early stopping on a lower-is-better metric.
#[derive(Clone, Debug)]
pub struct Scheduler {
    pub lr: f64,
    factor: f64,
    plateau_patience: usize,
    stop_patience: usize,
    best: f64,
    since_best: usize,
    since_change: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchedulerStep {
    pub improved: bool,
    pub lr_reduced: bool,
    pub stop: bool,
}

impl Scheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            factor: cfg.plateau_factor,
            plateau_patience: cfg.plateau_patience,
            stop_patience: cfg.early_stop_patience,
            best: f64::INFINITY,
            since_best: 0,
            since_change: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, metric: f64) -> SchedulerStep {
        let mut step = SchedulerStep {
            improved: false,
            lr_reduced: false,
            stop: false,
        };
        if metric < self.best {
            self.best = metric;
            self.since_best = 0;
            self.since_change = 0;
            step.improved = true;
            return step;
        }
        self.since_best += 1;
        self.since_change += 1;
        if self.plateau_patience > 0 && self.since_change >= self.plateau_patience {
            self.lr *= self.factor;
            self.since_change = 0;
            step.lr_reduced = true;
        }
        step.stop = self.stop_patience > 0 && self.since_best >= self.stop_patience;
        step
    }
}

// ----- training ----------------------------------------------------------

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency_weight: Option<f64>,
}

fn check_finite(loss: f64, stage: &str, epoch: usize, step: usize, lr: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(SedError::Training(format!(
            "{stage}: loss became {loss} at epoch {epoch}, step {step} (lr {lr})"
        )))
    }
}

/// Evaluation-mode posteriors `[N, K, C]` for a list of feature matrices.
fn posteriors(model: &Crnn, params: &ParamStore, xs: &[&Array]) -> Result<Array> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let x = tape.constant(stack(xs)?);
    let y = model.forward(&mut tape, &p, x, None)?;
    Ok(tape.value(y).clone())
}

const EVAL_CHUNK: usize = 16;

fn eval_posteriors(model: &Crnn, params: &ParamStore, samples: &[&Sample]) -> Result<Vec<PosteriorMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let xs: Vec<&Array> = chunk.iter().map(|s| &s.features.values).collect();
        out.extend(model.predict(params, &xs)?);
    }
    Ok(out)
}

/// Mean squared error between posterior and target maps over every frame of
/// every clip.
pub fn validation_mse(model: &Crnn, params: &ParamStore, data: &Dataset) -> Result<f64> {
    data.require_targets()?;
    let samples: Vec<&Sample> = data.iter().collect();
    if samples.is_empty() {
        return Err(SedError::Data("validation set is empty".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (post, s) in eval_posteriors(model, params, &samples)?.iter().zip(&samples) {
        let t = s.target.as_ref().unwrap();
        if post.values.shape() != t.values.shape() {
            return Err(SedError::Shape(format!("{}: posterior vs target shape", s.name)));
        }
        sum += post.values.data().iter().zip(t.values.data()).map(|(p, y)| (p - y) * (p - y)).sum::<f64>();
        n += t.values.len();
    }
    Ok(sum / n as f64)
}

/// Element-mean binary cross-entropy of evaluation-mode posteriors against
/// the samples' frame targets.
pub fn mean_frame_bce(model: &Crnn, params: &ParamStore, samples: &[&Sample]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (post, s) in eval_posteriors(model, params, samples)?.iter().zip(samples) {
        let t = s
            .target
            .as_ref()
            .ok_or_else(|| SedError::Data(format!("clip {} has no frame targets", s.name)))?;
        for (&p, &y) in post.values.data().iter().zip(t.values.data()) {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        n += t.values.len();
    }
    Ok(sum / n.max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    /// The EMA teacher.
    pub params: ParamStore,
    pub history: Vec<EpochLog>,
}

/// Mean-teacher training on strong frame targets, weak clip labels and a
/// consistency term over every item. Returns the EMA weights.
pub fn train_teacher(
    model: &Crnn,
    data: &Dataset,
    train: &TrainConfig,
    teacher: &TeacherConfig,
    augment: &AugmentPolicy,
) -> Result<TeacherOutcome> {
    train.validate()?;
    teacher.validate()?;
    let sizes = data.sizes();
    let portions = lenient_portions(train.batch_size, sizes)?;
    for s in &data.strong {
        if s.target.is_none() {
            return Err(SedError::Data(format!("strong clip {} has no frame targets", s.name)));
        }
    }
    for s in &data.weak {
        if s.classes.is_none() {
            return Err(SedError::Data(format!("weak clip {} has no label set", s.name)));
        }
    }
    let seed = derive_seed(train.seed, 0x7eac);
    let mut sampler = BatchSampler::new(sizes, portions, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ augment.seed, 1));
    let mut student = model.init_params_with_seed(derive_seed(model.config().seed, 0x7eac));
    let mut ema = student.clone();
    let mut adam = Adam::new(train.lr);
    let (k, c) = (model.config().output_frames(), model.config().n_classes);
    let mut history = Vec::new();
    let mut step = 0usize;
    for epoch in 0..teacher.epochs {
        let w_cons = consistency_ramp(epoch, teacher.consistency_ramp_epochs, teacher.consistency_weight);
        let mut total = 0.0;
        let batches = sampler.epoch();
        for (bi, items) in batches.iter().enumerate() {
            let samples: Vec<&Sample> = items.iter().map(|&it| data.get(it)).collect();
            let n_s = items.iter().filter(|i| i.source == SourceTag::Strong).count();
            let n_w = items.iter().filter(|i| i.source == SourceTag::Weak).count();
            let xs: Vec<Array> = samples.iter().map(|s| spec_augment(&s.features, augment, &mut rng).values).collect();
            let xt: Vec<Array> = samples.iter().map(|s| spec_augment(&s.features, augment, &mut rng).values).collect();
            let teacher_pred = if w_cons > 0.0 {
                Some(posteriors(model, &ema, &xt.iter().collect::<Vec<_>>())?)
            } else {
                None
            };

            let mut tape = Tape::new();
            let p = student.bind(&mut tape, true);
            let x = tape.constant(stack(&xs.iter().collect::<Vec<_>>())?);
            let pred = model.forward(&mut tape, &p, x, Some(&mut rng))?;
            let mut terms = Vec::new();
            if n_s > 0 {
                let ps = tape.slice(pred, 0, 0, n_s)?;
                let tg: Vec<&Array> = samples[..n_s].iter().map(|s| &s.target.as_ref().unwrap().values).collect();
                let tg = tape.constant(stack(&tg)?);
                let l = tape.soft_bce_sum(ps, tg)?;
                terms.push(tape.scale(l, 1.0 / (n_s * k * c) as f64));
            }
            if n_w > 0 {
                let pw = tape.slice(pred, 0, n_s, n_w)?;
                let clip = tape.max_axis(pw, 1)?;
                let mut y = Array::zeros([n_w, 1, c]);
                for (i, s) in samples[n_s..n_s + n_w].iter().enumerate() {
                    for &cl in s.classes.as_ref().unwrap() {
                        y.data_mut()[i * c + cl] = 1.0;
                    }
                }
                let y = tape.constant(y);
                let l = tape.soft_bce_sum(clip, y)?;
                terms.push(tape.scale(l, 1.0 / (n_w * c) as f64));
            }
            if let Some(tp) = teacher_pred {
                let t = tape.constant(tp);
                let l = consistency_loss(&mut tape, pred, t)?;
                terms.push(tape.scale(l, w_cons));
            }
            let mut loss = terms[0];
            for &t in &terms[1..] {
                loss = tape.add(loss, t)?;
            }
            let lv = tape.value(loss).data()[0];
            check_finite(lv, "teacher", epoch, bi, adam.lr)?;
            total += lv;
            tape.backward(loss)?;
            let grads = p.grads(&tape);
            adam.step(&mut student, &grads)?;
            // EMA warm-up: early on the teacher tracks the student closely.
            let alpha = teacher.ema_decay.min(1.0 - 1.0 / (step as f64 + 1.0));
            ema_update(&mut ema, &student, alpha)?;
            step += 1;
        }
        history.push(EpochLog {
            stage: "teacher".into(),
            epoch,
            train_loss: total / batches.len().max(1) as f64,
            lr: adam.lr,
            val_mse: None,
            consistency_weight: Some(w_cons),
        });
    }
    Ok(TeacherOutcome { params: ema, history })
}

/// Everything [`train_student_fold`] needs besides the data.
#[derive(Clone, Debug)]
pub struct StudentSetup {
    pub train: TrainConfig,
    pub loss: SslLossConfig,
    pub augment: AugmentPolicy,
    pub mode: TrainMode,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    /// Parameters of the epoch with the lowest held-out MSE.
    pub params: ParamStore,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub history: Vec<EpochLog>,
}

impl FoldOutcome {
    pub fn lr_trace(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.lr).collect()
    }
}

/// Trains one student on every fold but `fold` and monitors MSE on `fold`.
pub fn train_student_fold(model: &Crnn, data: &Dataset, plan: &FoldPlan, fold: usize, setup: &StudentSetup) -> Result<FoldOutcome> {
    let (train_set, held) = data.partition(plan, fold)?;
    let (train_set, held) = match setup.mode {
        TrainMode::SemiSupervised => (train_set, held),
        TrainMode::StrongOnly => (train_set.strong_only(), held.strong_only()),
    };
    train_student(model, &train_set, &held, fold, setup)
}

/// Student training on `train_set` with early stopping on `held`.
pub fn train_student(model: &Crnn, train_set: &Dataset, held: &Dataset, fold: usize, setup: &StudentSetup) -> Result<FoldOutcome> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.loss.validate()?;
    train_set.require_targets()?;
    held.require_targets()?;
    let sizes = train_set.sizes();
    let portions = match setup.mode {
        TrainMode::StrongOnly => [cfg.batch_size, 0, 0],
        TrainMode::SemiSupervised if sizes.iter().all(|&n| n > 0) => batch_portions(cfg.batch_size, sizes)?,
        TrainMode::SemiSupervised => lenient_portions(cfg.batch_size, sizes)?,
    };
    let mode_salt = match setup.mode {
        TrainMode::SemiSupervised => 0,
        TrainMode::StrongOnly => 0x5700,
    };
    let seed = derive_seed(cfg.seed, 0x100 + fold as u64 + mode_salt);
    let mut sampler = BatchSampler::new(sizes, portions, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ setup.augment.seed, 1));
    let mut params = model.init_params_with_seed(derive_seed(model.config().seed, 0x100 + fold as u64));
    let mut adam = Adam::new(cfg.lr);
    let mut sched = Scheduler::new(cfg);
    let mut best = (params.clone(), 0usize, f64::INFINITY);
    let mut history = Vec::new();
    let stage = format!("fold{fold}");
    for epoch in 0..cfg.max_epochs {
        let batches = if cfg.steps_per_epoch == 0 {
            sampler.epoch()
        } else {
            (0..cfg.steps_per_epoch).map(|_| sampler.next_batch()).collect()
        };
        let mut total = 0.0;
        for (bi, items) in batches.iter().enumerate() {
            let samples: Vec<&Sample> = items.iter().map(|&it| train_set.get(it)).collect();
            let (feats, targets) = augmented_batch(&samples, &setup.augment, &mut rng)?;
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let x = tape.constant(stack(&feats.iter().map(|f| &f.values).collect::<Vec<_>>())?);
            let pred = model.forward(&mut tape, &p, x, Some(&mut rng))?;
            let loss = semi_supervised_loss(&mut tape, pred, &targets.iter().collect::<Vec<_>>(), &setup.loss)?;
            let lv = tape.value(loss).data()[0];
            check_finite(lv, &stage, epoch, bi, adam.lr)?;
            total += lv;
            tape.backward(loss)?;
            let grads = p.grads(&tape);
            adam.step(&mut params, &grads)?;
        }
        let val = validation_mse(model, &params, held)?;
        check_finite(val, &stage, epoch, batches.len(), adam.lr)?;
        history.push(EpochLog {
            stage: stage.clone(),
            epoch,
            train_loss: total / batches.len().max(1) as f64,
            lr: adam.lr,
            val_mse: Some(val),
            consistency_weight: None,
        });
        let step = sched.observe(val);
        if step.improved {
            best = (params.clone(), epoch, val);
        }
        adam.lr = sched.lr;
        if step.stop {
            break;
        }
    }
    Ok(FoldOutcome {
        fold,
        params: best.0,
        best_epoch: best.1,
        best_val_mse: best.2,
        history,
    })
}

/// Mixup over a shuffled pairing of the batch (one λ per batch), then
/// independent spec-augment per item.
fn augmented_batch(samples: &[&Sample], policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<(Vec<FeatureMap>, Vec<TargetMap>)> {
    let mut feats: Vec<FeatureMap> = samples.iter().map(|s| s.features.clone()).collect();
    let mut targets: Vec<TargetMap> = samples.iter().map(|s| s.target.clone().unwrap()).collect();
    if policy.mixup_enabled && samples.len() > 1 {
        let lambda = policy.draw_lambda(rng)?;
        let mut partner: Vec<usize> = (0..samples.len()).collect();
        partner.shuffle(rng);
        let mixed: Vec<(FeatureMap, TargetMap)> = (0..samples.len())
            .map(|i| {
                let j = partner[i];
                mixup((&feats[i], &targets[i]), (&feats[j], &targets[j]), lambda)
            })
            .collect::<Result<_>>()?;
        (feats, targets) = mixed.into_iter().unzip();
    }
    let feats = feats.iter().map(|f| spec_augment(f, policy, rng)).collect();
    Ok((feats, targets))
}

// ----- ensembles ---------------------------------------------------------

/// Fold models sharing one architecture, combined linearly.
#[derive(Clone, Debug)]
pub struct EnsembleModel {
    pub model: Crnn,
    pub members: Vec<ParamStore>,
    pub weights: Vec<f64>,
}

impl EnsembleModel {
    /// Uniform weights.
    pub fn new(model: Crnn, members: Vec<ParamStore>) -> Result<Self> {
        let n = members.len();
        Self::with_weights(model, members, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn with_weights(model: Crnn, members: Vec<ParamStore>, weights: Vec<f64>) -> Result<Self> {
        if members.is_empty() {
            return Err(SedError::Usage("ensemble has no members".into()));
        }
        if weights.len() != members.len() {
            return Err(SedError::Usage(format!("{} weights for {} members", weights.len(), members.len())));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(SedError::Usage("ensemble weights must be non-negative and sum to 1".into()));
        }
        for m in &members {
            model.check_params(m)?;
        }
        Ok(Self { model, members, weights })
    }
}

/// Weighted mean of the members' posterior maps.
pub fn ensemble_predict(ens: &EnsembleModel, features: &[&Array]) -> Result<Vec<PosteriorMap>> {
    if ens.members.is_empty() {
        return Err(SedError::Usage("ensemble has no members".into()));
    }
    let mut acc: Option<Vec<Array>> = None;
    for (params, &w) in ens.members.iter().zip(&ens.weights) {
        let mut preds = Vec::with_capacity(features.len());
        for chunk in features.chunks(EVAL_CHUNK) {
            preds.extend(ens.model.predict(params, chunk)?.into_iter().map(|p| p.values));
        }
        match acc.as_mut() {
            None => {
                acc = Some(
                    preds
                        .into_iter()
                        .map(|mut a| {
                            a.data_mut().iter_mut().for_each(|v| *v *= w);
                            a
                        })
                        .collect(),
                )
            }
            Some(acc) => {
                for (a, p) in acc.iter_mut().zip(&preds) {
                    a.data_mut().iter_mut().zip(p.data()).for_each(|(x, y)| *x += w * y);
                }
            }
        }
    }
    acc.unwrap_or_default().into_iter().map(PosteriorMap::new).collect()
}
