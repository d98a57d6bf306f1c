//! File-based run stages. Every stage reads its inputs from and writes its
//! outputs to one run directory, so any stage can be rerun in isolation.
//!
//! ```text
//! run/
//!   config.json            effective configuration
//!   log.jsonl              one line per finished stage
//!   corpus/  validation/   synthetic training and evaluation corpora
//!   features/              normalised log-mel features and stats.json
//!   teacher.ckpt           first-stage mean teacher
//!   pseudo/                binary target maps for weak and unlabeled clips
//!   folds.json fold{k}.ckpt             primary student set
//!   sweep/beta_X/fold{k}.ckpt          extra β values
//!   baseline/fold{k}.ckpt              strong-only comparison
//!   logs/                  per-model training logs (JSON lines)
//!   posteriors/ decoded/ reports/
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audiofeat::{clip_features, fit_normalization, normalize, read_features, read_wav, write_features};
use crate::audiofeat::{FeatureConfig, FeatureMap, LogMelExtractor, NormalizationStats};
use crate::augment::AugmentPolicy;
use crate::corpus::{format_strong_tsv, write_text, CorpusManifest, EventList, StrongClip, MANIFEST_NAME};
use crate::crnn::{Crnn, CrnnConfig, PosteriorMap};
use crate::error::{Result, SedError};
use crate::params::ParamStore;
use crate::pipeline::{derive_seed, ensemble_predict, make_folds, train_student_fold, train_teacher};
use crate::pipeline::{Dataset, EnsembleModel, EpochLog, FoldPlan, Sample, StudentSetup, TeacherConfig, TrainConfig, TrainMode};
use crate::sedeval::{decode_events, evaluate_posteriors, EvalConfig, MetricReport};
use crate::ssl::{pseudo_label, read_target, write_target, PseudoLabelPolicy, SslLossConfig, TargetMap};
use crate::synthgen::{emit_corpus, SoundscapeSpec};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub soundscape: SoundscapeSpec,
    pub n_strong: usize,
    pub n_weak: usize,
    pub n_unlabeled: usize,
    /// Strongly labeled clips of a separately seeded evaluation corpus.
    pub n_validation: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            soundscape: SoundscapeSpec::default(),
            n_strong: 200,
            n_weak: 600,
            n_unlabeled: 1200,
            n_validation: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslSection {
    pub detach_prediction_in_target: bool,
    pub teacher: TeacherConfig,
    pub pseudo: PseudoLabelPolicy,
}

impl Default for SslSection {
    fn default() -> Self {
        Self {
            detach_prediction_in_target: true,
            teacher: TeacherConfig::default(),
            pseudo: PseudoLabelPolicy::default(),
        }
    }
}

/// Every knob of a run. Section seeds are derived from the global seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub features: FeatureConfig,
    pub model: CrnnConfig,
    pub augment: AugmentPolicy,
    pub ssl: SslSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            synth: SynthSection::default(),
            features: FeatureConfig::default(),
            model: CrnnConfig::default(),
            augment: AugmentPolicy::default(),
            ssl: SslSection::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        };
        c.apply_seed(0);
        c
    }
}

impl RunConfig {
    /// Desk-scale run: 4 s clips, 64 × 32 features, the quarter-width model.
    pub fn toy() -> Self {
        let mut c = Self {
            seed: 0,
            synth: SynthSection {
                soundscape: SoundscapeSpec::toy(),
                n_strong: 40,
                n_weak: 120,
                n_unlabeled: 80,
                n_validation: 40,
            },
            features: FeatureConfig::toy(),
            model: CrnnConfig::toy(),
            augment: AugmentPolicy::toy(),
            ssl: SslSection {
                teacher: TeacherConfig {
                    epochs: 20,
                    ema_decay: 0.99,
                    consistency_weight: 2.0,
                    consistency_ramp_epochs: 5,
                },
                pseudo: PseudoLabelPolicy {
                    median_window: 3,
                    ..PseudoLabelPolicy::default()
                },
                ..SslSection::default()
            },
            train: TrainConfig::toy(),
            eval: EvalConfig {
                median_window: 3,
                ..EvalConfig::default()
            },
        };
        c.apply_seed(0);
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: RunConfig = serde_json::from_str(text).map_err(|e| SedError::Config(format!("config: {e}")))?;
        c.apply_seed(c.seed);
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(SedError::io(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    /// Sets the global seed and re-derives every section seed from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.soundscape.seed = seed;
        self.model.seed = derive_seed(seed, 1);
        self.augment.seed = derive_seed(seed, 2);
        self.train.seed = derive_seed(seed, 3);
    }

    pub fn frame_duration(&self) -> f64 {
        self.features.clip_seconds / self.model.output_frames() as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.soundscape.validate()?;
        self.features.validate()?;
        self.model.validate()?;
        self.augment.validate(self.model.input_frames, self.model.input_mels)?;
        self.ssl.teacher.validate()?;
        self.ssl.pseudo.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let bad = |m: String| Err(SedError::Config(m));
        if self.features.n_frames() != self.model.input_frames || self.features.n_mels != self.model.input_mels {
            return bad(format!(
                "features give {} × {} maps but the model expects {} × {}",
                self.features.n_frames(),
                self.features.n_mels,
                self.model.input_frames,
                self.model.input_mels
            ));
        }
        if self.synth.soundscape.n_classes() != self.model.n_classes {
            return bad(format!(
                "{} synthetic classes but the model predicts {}",
                self.synth.soundscape.n_classes(),
                self.model.n_classes
            ));
        }
        if (self.synth.soundscape.clip_duration - self.features.clip_seconds).abs() > 1e-9 {
            return bad("synthetic clip duration differs from features.clip_seconds".into());
        }
        if self.synth.n_validation == 0 {
            return bad("n_validation must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Features,
    TrainTeacher,
    PseudoLabel,
    Train,
    Ensemble,
    Decode,
    Evaluate,
    All,
}

impl Stage {
    pub const CHAIN: [Stage; 8] = [
        Stage::Synth,
        Stage::Features,
        Stage::TrainTeacher,
        Stage::PseudoLabel,
        Stage::Train,
        Stage::Ensemble,
        Stage::Decode,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Features => "features",
            Stage::TrainTeacher => "train-teacher",
            Stage::PseudoLabel => "pseudo-label",
            Stage::Train => "train",
            Stage::Ensemble => "ensemble",
            Stage::Decode => "decode",
            Stage::Evaluate => "evaluate",
            Stage::All => "all",
        }
    }
}

/// A family of fold models trained with one loss setting.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSet {
    pub name: String,
    pub dir: PathBuf,
    pub mode: TrainMode,
    pub loss: SslLossConfig,
}

impl ModelSet {
    pub fn checkpoint(&self, fold: usize) -> PathBuf {
        self.dir.join(format!("fold{fold}.ckpt"))
    }
}

fn stem(clip: &str) -> &str {
    clip.strip_suffix(".wav").unwrap_or(clip)
}

fn need(path: PathBuf, stage: Stage) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(SedError::MissingArtifact {
            path,
            stage: stage.name(),
        })
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(SedError::io(p))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text += &serde_json::to_string(r)?;
        text.push('\n');
    }
    write_text(path, &text)
}

/// One run directory plus the effective configuration driving it.
#[derive(Clone, Debug)]
pub struct Runner {
    pub dir: PathBuf,
    pub config: RunConfig,
}

impl Runner {
    pub fn new(dir: impl Into<PathBuf>, config: RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { dir: dir.into(), config })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.path("corpus")
    }

    pub fn validation_dir(&self) -> PathBuf {
        self.path("validation")
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.path("teacher.ckpt")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path("reports/metrics.json")
    }

    fn feature_path(&self, split: &str, clip: &str) -> PathBuf {
        self.dir.join("features").join(split).join(format!("{}.feat", stem(clip)))
    }

    fn pseudo_path(&self, clip: &str) -> PathBuf {
        self.dir.join("pseudo").join(format!("{}.sedt", stem(clip)))
    }

    fn posterior_dir(&self, set: &str, member: &str) -> PathBuf {
        self.dir.join("posteriors").join(set).join(member)
    }

    /// Primary set first, then sweep values, then the strong-only baseline.
    pub fn model_sets(&self) -> Vec<ModelSet> {
        let t = &self.config.train;
        let detach = self.config.ssl.detach_prediction_in_target;
        let mut sets = vec![ModelSet {
            name: "primary".into(),
            dir: self.dir.clone(),
            mode: TrainMode::SemiSupervised,
            loss: t.loss_config(detach),
        }];
        for &b in &t.beta_sweep {
            let name = format!("beta_{b:.2}");
            sets.push(ModelSet {
                dir: self.dir.join("sweep").join(&name),
                name,
                mode: TrainMode::SemiSupervised,
                loss: SslLossConfig {
                    beta_w: b,
                    beta_u: b,
                    detach_prediction_in_target: detach,
                },
            });
        }
        if t.strong_only_baseline {
            sets.push(ModelSet {
                name: "baseline".into(),
                dir: self.dir.join("baseline"),
                mode: TrainMode::StrongOnly,
                loss: t.loss_config(detach),
            });
        }
        sets
    }

    /// Runs one stage (or the whole chain), echoing the config first.
    pub fn run(&self, stage: Stage) -> Result<()> {
        mkdir(&self.dir)?;
        write_text(&self.path("config.json"), &self.config.to_json())?;
        if stage == Stage::All {
            return Stage::CHAIN.iter().try_for_each(|&s| self.run_one(s));
        }
        self.run_one(stage)
    }

    fn run_one(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Synth => self.synth(),
            Stage::Features => self.features(),
            Stage::TrainTeacher => self.train_teacher(),
            Stage::PseudoLabel => self.pseudo_label(),
            Stage::Train => self.train(),
            Stage::Ensemble => self.ensemble(),
            Stage::Decode => self.decode(),
            Stage::Evaluate => self.evaluate().map(|_| ()),
            Stage::All => unreachable!(),
        }?;
        self.log_stage(stage)
    }

    fn log_stage(&self, stage: Stage) -> Result<()> {
        let path = self.path("log.jsonl");
        let line = serde_json::json!({"stage": stage.name(), "status": "done"}).to_string() + "\n";
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(SedError::io(&path))
    }

    // ----- stages --------------------------------------------------------

    pub fn synth(&self) -> Result<()> {
        let s = &self.config.synth;
        emit_corpus(&s.soundscape, s.n_strong, s.n_weak, s.n_unlabeled, &self.corpus_dir())?;
        let val = SoundscapeSpec {
            seed: derive_seed(s.soundscape.seed, 0xe7a1),
            ..s.soundscape.clone()
        };
        emit_corpus(&val, s.n_validation, 0, 0, &self.validation_dir())?;
        Ok(())
    }

    pub fn corpus(&self) -> Result<CorpusManifest> {
        CorpusManifest::load(&need(self.corpus_dir().join(MANIFEST_NAME), Stage::Synth)?)
    }

    pub fn validation_corpus(&self) -> Result<CorpusManifest> {
        CorpusManifest::load(&need(self.validation_dir().join(MANIFEST_NAME), Stage::Synth)?)
    }

    pub fn features(&self) -> Result<()> {
        let train = self.corpus()?;
        let val = self.validation_corpus()?;
        let ex = LogMelExtractor::new(&self.config.features)?;
        let extract = |m: &CorpusManifest| -> Result<Vec<FeatureMap>> {
            let names: Vec<&str> = m.clip_names().collect();
            names.par_iter().map(|n| clip_features(&read_wav(&m.audio_path(n))?, &ex)).collect()
        };
        let train_feats = extract(&train)?;
        let val_feats = extract(&val)?;
        let stats = fit_normalization(&train_feats)?;
        for (split, m, feats) in [("train", &train, &train_feats), ("validation", &val, &val_feats)] {
            mkdir(&self.dir.join("features").join(split))?;
            for (name, f) in m.clip_names().zip(feats) {
                write_features(&self.feature_path(split, name), &normalize(f, &stats).values)?;
            }
        }
        write_text(&self.path("features/stats.json"), &(serde_json::to_string_pretty(&stats)? + "\n"))
    }

    pub fn normalization(&self) -> Result<NormalizationStats> {
        let p = need(self.path("features/stats.json"), Stage::Features)?;
        Ok(serde_json::from_str(&fs::read_to_string(&p).map_err(SedError::io(&p))?)?)
    }

    fn load_feature(&self, split: &str, clip: &str) -> Result<FeatureMap> {
        let p = need(self.feature_path(split, clip), Stage::Features)?;
        FeatureMap::from_values(read_features(&p)?, &self.config.features)
    }

    /// Training corpus with features and strong targets; pseudo labels are
    /// attached when `with_pseudo`.
    pub fn dataset(&self, with_pseudo: bool) -> Result<Dataset> {
        let m = self.corpus()?;
        let (k, c) = (self.config.model.output_frames(), self.config.model.n_classes);
        let fd = self.config.frame_duration();
        let pseudo = |name: &str| -> Result<Option<TargetMap>> {
            if with_pseudo {
                Ok(Some(read_target(&need(self.pseudo_path(name), Stage::PseudoLabel)?)?))
            } else {
                Ok(None)
            }
        };
        let mut data = Dataset::default();
        for clip in &m.strong {
            data.strong.push(Sample {
                name: clip.name.clone(),
                features: self.load_feature("train", &clip.name)?,
                target: Some(TargetMap::from_events(&clip.events, k, c, fd)?),
                classes: None,
            });
        }
        for clip in &m.weak {
            data.weak.push(Sample {
                name: clip.name.clone(),
                features: self.load_feature("train", &clip.name)?,
                target: pseudo(&clip.name)?,
                classes: Some(clip.classes.clone()),
            });
        }
        for name in &m.unlabeled {
            data.unlabeled.push(Sample {
                name: name.clone(),
                features: self.load_feature("train", name)?,
                target: pseudo(name)?,
                classes: None,
            });
        }
        Ok(data)
    }

    pub fn train_teacher(&self) -> Result<()> {
        let data = self.dataset(false)?;
        let model = Crnn::new(self.config.model.clone())?;
        let out = train_teacher(&model, &data, &self.config.train, &self.config.ssl.teacher, &self.config.augment)?;
        mkdir(&self.path("logs"))?;
        write_jsonl(&self.path("logs/teacher.jsonl"), &out.history)?;
        model.save(&self.teacher_path(), &out.params)
    }

    pub fn pseudo_label(&self) -> Result<()> {
        let (model, teacher) = Crnn::load(&need(self.teacher_path(), Stage::TrainTeacher)?)?;
        let m = self.corpus()?;
        let policy = &self.config.ssl.pseudo;
        mkdir(&self.path("pseudo"))?;
        let jobs: Vec<(&str, Option<&[usize]>)> = m
            .weak
            .iter()
            .map(|w| (w.name.as_str(), Some(w.classes.as_slice())))
            .chain(m.unlabeled.iter().map(|u| (u.as_str(), None)))
            .collect();
        jobs.par_iter().try_for_each(|&(name, weak)| {
            let f = self.load_feature("train", name)?;
            let t = pseudo_label(&model, &teacher, &f.values, weak, policy)?;
            write_target(&self.pseudo_path(name), &t)
        })
    }

    pub fn fold_plan(&self) -> Result<FoldPlan> {
        let p = need(self.path("folds.json"), Stage::Train)?;
        Ok(serde_json::from_str(&fs::read_to_string(&p).map_err(SedError::io(&p))?)?)
    }

    pub fn train(&self) -> Result<()> {
        let m = self.corpus()?;
        let data = self.dataset(true)?;
        let t = &self.config.train;
        let plan = make_folds(&m, t.n_folds, derive_seed(t.seed, 0xf01d))?;
        write_text(&self.path("folds.json"), &(serde_json::to_string_pretty(&plan)? + "\n"))?;
        let model = Crnn::new(self.config.model.clone())?;
        mkdir(&self.path("logs"))?;
        for set in self.model_sets() {
            mkdir(&set.dir)?;
            let setup = StudentSetup {
                train: t.clone(),
                loss: set.loss.clone(),
                augment: self.config.augment.clone(),
                mode: set.mode,
            };
            let outcomes: Vec<_> = (0..t.n_folds)
                .into_par_iter()
                .map(|k| train_student_fold(&model, &data, &plan, k, &setup))
                .collect::<Result<_>>()?;
            for o in outcomes {
                model.save(&set.checkpoint(o.fold), &o.params)?;
                let log: Vec<EpochLog> = o.history;
                write_jsonl(&self.path(&format!("logs/{}_fold{}.jsonl", set.name, o.fold)), &log)?;
            }
        }
        Ok(())
    }

    fn load_set(&self, set: &ModelSet) -> Result<(Crnn, Vec<ParamStore>)> {
        let mut model = None;
        let mut members = Vec::new();
        for k in 0..self.config.train.n_folds {
            let (m, p) = Crnn::load(&need(set.checkpoint(k), Stage::Train)?)?;
            if m.config() != &self.config.model {
                return Err(SedError::Config(format!("{}: checkpoint config differs from the run config", set.name)));
            }
            model = Some(m);
            members.push(p);
        }
        Ok((model.expect("at least two folds"), members))
    }

    /// Member names of every set: `ensemble`, then `fold0..`.
    fn members(&self) -> Vec<String> {
        std::iter::once("ensemble".to_string())
            .chain((0..self.config.train.n_folds).map(|k| format!("fold{k}")))
            .collect()
    }

    pub fn ensemble(&self) -> Result<()> {
        let val = self.validation_corpus()?;
        let names: Vec<&str> = val.clip_names().collect();
        let feats: Vec<Array> = names
            .iter()
            .map(|n| self.load_feature("validation", n).map(|f| f.values))
            .collect::<Result<_>>()?;
        let xs: Vec<&Array> = feats.iter().collect();
        for set in self.model_sets() {
            let (model, members) = self.load_set(&set)?;
            let mut outputs = vec![ensemble_predict(&EnsembleModel::new(model.clone(), members.clone())?, &xs)?];
            for p in &members {
                outputs.push(ensemble_predict(&EnsembleModel::new(model.clone(), vec![p.clone()])?, &xs)?);
            }
            for (member, posts) in self.members().iter().zip(outputs) {
                let dir = self.posterior_dir(&set.name, member);
                mkdir(&dir)?;
                for (n, p) in names.iter().zip(&posts) {
                    write_features(&dir.join(format!("{}.post", stem(n))), &p.values)?;
                }
            }
        }
        Ok(())
    }

    fn load_posteriors(&self, set: &str, member: &str, names: &[&str]) -> Result<Vec<PosteriorMap>> {
        let dir = self.posterior_dir(set, member);
        names
            .iter()
            .map(|n| PosteriorMap::new(read_features(&need(dir.join(format!("{}.post", stem(n))), Stage::Ensemble)?)?))
            .collect()
    }

    pub fn decode(&self) -> Result<()> {
        let val = self.validation_corpus()?;
        let names: Vec<&str> = val.clip_names().collect();
        let policy = self.config.eval.decode_policy(self.config.frame_duration());
        for set in self.model_sets() {
            let dir = self.dir.join("decoded").join(&set.name);
            mkdir(&dir)?;
            for member in self.members() {
                let clips: Vec<StrongClip> = self
                    .load_posteriors(&set.name, &member, &names)?
                    .iter()
                    .zip(&names)
                    .map(|(p, n)| StrongClip {
                        name: n.to_string(),
                        events: decode_events(p, &policy),
                    })
                    .collect();
                write_text(&dir.join(format!("{member}.tsv")), &format_strong_tsv(&clips, &val.class_names))?;
            }
        }
        Ok(())
    }

    /// Scores every set and member on the validation corpus; writes
    /// `reports/metrics.json`, `summary.csv` and per-class tables.
    pub fn evaluate(&self) -> Result<Vec<MetricReport>> {
        let val = self.validation_corpus()?;
        let names: Vec<&str> = val.clip_names().collect();
        let refs: Vec<EventList> = val.strong.iter().map(|c| c.events.clone()).collect();
        let mut reports = Vec::new();
        for set in self.model_sets() {
            for member in self.members() {
                let posts = self.load_posteriors(&set.name, &member, &names)?;
                reports.push(evaluate_posteriors(
                    &format!("{}/{member}", set.name),
                    &refs,
                    &posts,
                    &val.class_names,
                    val.clip_duration,
                    &self.config.eval,
                )?);
            }
        }
        mkdir(&self.path("reports/per_class"))?;
        write_text(&self.metrics_path(), &(serde_json::to_string_pretty(&reports)? + "\n"))?;
        write_text(&self.path("reports/summary.csv"), &MetricReport::summary_csv(&reports))?;
        for r in &reports {
            let file = r.model.replace('/', "_");
            write_text(&self.path(&format!("reports/per_class/{file}.csv")), &r.per_class_csv())?;
        }
        Ok(reports)
    }
}
