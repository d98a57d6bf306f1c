//! Deterministic toy soundscapes: one narrow-band template per class placed
//! on a pink-ish noise bed, rendered at 44.1 kHz with exact ground truth.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audiofeat::AudioClip;
use crate::corpus::{weak_projection, CorpusManifest, Event, EventList, StrongClip, WeakClip, CLASS_NAMES};
use crate::error::{Result, SedError};

pub const SYNTH_RATE: u32 = 44_100;
/// RMS of the background bed; event levels are set relative to it.
pub const BACKGROUND_RMS: f64 = 0.02;
const FADE_SECONDS: f64 = 0.01;
const MAX_PLACEMENT_TRIES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Tone,
    Chirp,
    NoiseBurst,
    AmTone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventTemplate {
    pub class_id: usize,
    pub kind: EventKind,
    pub base_frequency: f64,
    pub min_duration: f64,
    pub max_duration: f64,
}

/// `n_classes` templates with base frequencies 600 Hz apart from 500 Hz;
/// kinds cycle through the four waveform families.
pub fn default_templates(n_classes: usize, min_duration: f64, max_duration: f64) -> Vec<EventTemplate> {
    const KINDS: [EventKind; 4] = [EventKind::Tone, EventKind::Chirp, EventKind::NoiseBurst, EventKind::AmTone];
    (0..n_classes)
        .map(|i| EventTemplate {
            class_id: i,
            kind: KINDS[i % 4],
            base_frequency: 500.0 + 600.0 * i as f64,
            min_duration,
            max_duration,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Silence,
    PinkNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoundscapeSpec {
    pub seed: u64,
    pub clip_duration: f64,
    /// Inclusive range.
    pub events_per_clip: (usize, usize),
    /// Per-event SNR against [`BACKGROUND_RMS`], inclusive range.
    pub snr_db: (f64, f64),
    pub background: Background,
    pub templates: Vec<EventTemplate>,
}

impl Default for SoundscapeSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            clip_duration: 10.0,
            events_per_clip: (1, 3),
            snr_db: (6.0, 18.0),
            background: Background::PinkNoise,
            templates: default_templates(CLASS_NAMES.len(), 0.5, 3.0),
        }
    }
}

impl SoundscapeSpec {
    /// 4 s clips with 0.5–1.5 s events.
    pub fn toy() -> Self {
        Self {
            clip_duration: 4.0,
            templates: default_templates(CLASS_NAMES.len(), 0.5, 1.5),
            ..Self::default()
        }
    }

    pub fn n_classes(&self) -> usize {
        self.templates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SedError::Config(m));
        if !(self.clip_duration > 0.0 && self.clip_duration.is_finite()) {
            return bad(format!("clip_duration must be positive, got {}", self.clip_duration));
        }
        if self.events_per_clip.0 > self.events_per_clip.1 {
            return bad(format!("events_per_clip range {:?} is inverted", self.events_per_clip));
        }
        let (lo, hi) = self.snr_db;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return bad(format!("snr_db range {:?} is inverted or not finite", self.snr_db));
        }
        if self.templates.is_empty() && self.events_per_clip.1 > 0 {
            return bad("events requested but no templates configured".into());
        }
        if self.templates.len() > CLASS_NAMES.len() {
            return bad(format!("at most {} classes are supported", CLASS_NAMES.len()));
        }
        let nyquist = 8_000.0;
        for (i, t) in self.templates.iter().enumerate() {
            if t.class_id != i {
                return bad(format!("template {i} has class_id {}", t.class_id));
            }
            if !(t.min_duration > 0.0 && t.min_duration <= t.max_duration && t.max_duration <= self.clip_duration) {
                return bad(format!(
                    "template {i}: duration range ({}, {}) must lie in (0, {}]",
                    t.min_duration, t.max_duration, self.clip_duration
                ));
            }
            if !(t.base_frequency > 200.0 && t.base_frequency < nyquist - 500.0) {
                return bad(format!("template {i}: base frequency {} Hz out of range", t.base_frequency));
            }
        }
        Ok(())
    }

    fn clip_rng(&self, clip_index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(clip_index.wrapping_add(0x5ed))))
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A scheduled event with its level and waveform seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedEvent {
    pub event: Event,
    pub snr_db: f64,
    pub phase_seed: u64,
}

fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

fn place_events(spec: &SoundscapeSpec, rng: &mut ChaCha8Rng) -> Vec<PlacedEvent> {
    let (lo, hi) = spec.events_per_clip;
    let n = if hi == 0 { 0 } else { rng.random_range(lo..=hi) };
    let mut placed: Vec<PlacedEvent> = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..MAX_PLACEMENT_TRIES {
            let t = &spec.templates[rng.random_range(0..spec.templates.len())];
            let dur = if t.max_duration > t.min_duration {
                rng.random_range(t.min_duration..=t.max_duration)
            } else {
                t.min_duration
            };
            let onset = round_ms(rng.random_range(0.0..=(spec.clip_duration - dur)));
            let offset = round_ms(onset + dur).min(spec.clip_duration);
            let snr_db = if spec.snr_db.1 > spec.snr_db.0 {
                rng.random_range(spec.snr_db.0..=spec.snr_db.1)
            } else {
                spec.snr_db.0
            };
            let phase_seed = rng.random();
            if offset <= onset {
                continue;
            }
            // same-class events never overlap, so strong labels stay unambiguous
            let clash = placed
                .iter()
                .any(|p| p.event.class_id == t.class_id && p.event.onset < offset && onset < p.event.offset);
            if !clash {
                placed.push(PlacedEvent {
                    event: Event {
                        class_id: t.class_id,
                        onset,
                        offset,
                    },
                    snr_db,
                    phase_seed,
                });
                break;
            }
        }
    }
    placed.sort_by(|a, b| a.event.onset.total_cmp(&b.event.onset).then(a.event.class_id.cmp(&b.event.class_id)));
    placed
}

/// Paul Kellet's pink filter on Gaussian white noise, scaled to [`BACKGROUND_RMS`].
fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let y = b.iter().sum::<f64>() + w * 0.5362;
            b[6] = w * 0.115926;
            y
        })
        .collect();
    scale_to_rms(&mut out, BACKGROUND_RMS);
    out
}

fn scale_to_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

fn event_waveform(t: &EventTemplate, n: usize, seed: u64) -> Vec<f64> {
    let sr = SYNTH_RATE as f64;
    let dur = n as f64 / sr;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.random_range(0.0..2.0 * PI);
    let f = t.base_frequency;
    let mut x: Vec<f64> = match t.kind {
        EventKind::Tone => (0..n).map(|i| (2.0 * PI * f * i as f64 / sr + phase).sin()).collect(),
        EventKind::Chirp => {
            let (f0, k) = (f - 150.0, 300.0 / dur);
            (0..n)
                .map(|i| {
                    let tau = i as f64 / sr;
                    (2.0 * PI * (f0 * tau + 0.5 * k * tau * tau) + phase).sin()
                })
                .collect()
        }
        EventKind::NoiseBurst => {
            let partials: Vec<(f64, f64)> = (0..8)
                .map(|_| (rng.random_range(f - 150.0..f + 150.0), rng.random_range(0.0..2.0 * PI)))
                .collect();
            (0..n)
                .map(|i| {
                    let tau = i as f64 / sr;
                    partials.iter().map(|(fp, ph)| (2.0 * PI * fp * tau + ph).sin()).sum()
                })
                .collect()
        }
        EventKind::AmTone => (0..n)
            .map(|i| {
                let tau = i as f64 / sr;
                (1.0 + 0.8 * (2.0 * PI * 4.0 * tau).sin()) * (2.0 * PI * f * tau + phase).sin()
            })
            .collect(),
    };
    scale_to_rms(&mut x, 1.0);
    let fade = ((FADE_SECONDS * sr) as usize).min(n / 2);
    for i in 0..fade {
        let g = 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        x[i] *= g;
        x[n - 1 - i] *= g;
    }
    x
}

/// Renders a clip from an explicit event schedule.
pub fn render_scene(spec: &SoundscapeSpec, events: &[PlacedEvent], bg_seed: u64, name: &str) -> Result<AudioClip> {
    let sr = SYNTH_RATE as f64;
    let n = (spec.clip_duration * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(bg_seed);
    let mut mix = match spec.background {
        Background::Silence => vec![0.0; n],
        Background::PinkNoise => pink_noise(n, &mut rng),
    };
    for p in events {
        let e = &p.event;
        let t = spec
            .templates
            .get(e.class_id)
            .ok_or_else(|| SedError::Config(format!("no template for class {}", e.class_id)))?;
        let start = (e.onset * sr).round() as usize;
        let end = ((e.offset * sr).round() as usize).min(n);
        if end <= start {
            continue;
        }
        let amp = BACKGROUND_RMS * 10f64.powf(p.snr_db / 20.0);
        let w = event_waveform(t, end - start, p.phase_seed);
        for (m, v) in mix[start..end].iter_mut().zip(w) {
            *m += amp * v;
        }
    }
    let peak = mix.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.99 {
        mix.iter_mut().for_each(|v| *v *= 0.99 / peak);
    }
    // store exactly what the PCM16 file will hold
    mix.iter_mut().for_each(|v| *v = quantize_i16(*v) as f64 / 32768.0);
    AudioClip::new(mix, SYNTH_RATE, name)
}

fn quantize_i16(v: f64) -> i16 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Renders clip `clip_index` of the soundscape defined by `spec`.
pub fn render_clip(spec: &SoundscapeSpec, clip_index: u64) -> Result<(AudioClip, EventList)> {
    spec.validate()?;
    let mut rng = spec.clip_rng(clip_index);
    let placed = place_events(spec, &mut rng);
    let clip = render_scene(spec, &placed, rng.random(), &format!("clip{clip_index}"))?;
    Ok((clip, placed.iter().map(|p| p.event).collect()))
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let wav_spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, wav_spec)?;
    for &s in &clip.samples {
        w.write_sample(quantize_i16(s))?;
    }
    w.finalize()?;
    Ok(())
}

/// Renders and writes a full corpus under `out_dir`; clip indices run over
/// strong, then weak, then unlabeled clips.
pub fn emit_corpus(
    spec: &SoundscapeSpec,
    n_strong: usize,
    n_weak: usize,
    n_unlabeled: usize,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    spec.validate()?;
    let audio = out_dir.join("audio");
    fs::create_dir_all(&audio).map_err(SedError::io(&audio))?;
    let names: Vec<String> = (0..n_strong)
        .map(|i| format!("strong_{i:04}.wav"))
        .chain((0..n_weak).map(|i| format!("weak_{i:04}.wav")))
        .chain((0..n_unlabeled).map(|i| format!("unlabeled_{i:04}.wav")))
        .collect();
    let labels: Vec<EventList> = names
        .par_iter()
        .enumerate()
        .map(|(i, name)| {
            let (clip, events) = render_clip(spec, i as u64)?;
            write_wav(&audio.join(name), &clip)?;
            Ok(events)
        })
        .collect::<Result<_>>()?;
    let strong = (0..n_strong)
        .map(|i| StrongClip {
            name: names[i].clone(),
            events: labels[i].clone(),
        })
        .collect();
    let weak = (n_strong..n_strong + n_weak)
        .map(|i| WeakClip {
            name: names[i].clone(),
            classes: weak_projection(&labels[i]),
        })
        .collect();
    let manifest = CorpusManifest {
        root: out_dir.to_path_buf(),
        seed: spec.seed,
        sample_rate: SYNTH_RATE,
        clip_duration: spec.clip_duration,
        class_names: CLASS_NAMES[..spec.n_classes()].iter().map(|s| s.to_string()).collect(),
        strong,
        weak,
        unlabeled: names[n_strong + n_weak..].to_vec(),
    };
    manifest.save()?;
    Ok(manifest)
}

/// Ground-truth events of every clip, in manifest order, for corpora built by
/// [`emit_corpus`] (used to score pseudo labels against the truth).
pub fn ground_truth(spec: &SoundscapeSpec, n_clips: usize) -> Result<Vec<EventList>> {
    (0..n_clips as u64).map(|i| render_clip(spec, i).map(|(_, e)| e)).collect()
}
