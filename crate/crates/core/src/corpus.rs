//! Clip/event bookkeeping shared by the generator, trainer and evaluator,
//! plus the DCASE-style TSV label formats.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SedError};

/// Class vocabulary of the synthetic corpus, in class-id order.
pub const CLASS_NAMES: [&str; 10] = [
    "Alarm_bell_ringing",
    "Blender",
    "Cat",
    "Dishes",
    "Dog",
    "Electric_shaver_toothbrush",
    "Frying",
    "Running_water",
    "Speech",
    "Vacuum_cleaner",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub class_id: usize,
    /// Seconds.
    pub onset: f64,
    /// Seconds.
    pub offset: f64,
}

impl Event {
    pub fn new(class_id: usize, onset: f64, offset: f64) -> Result<Self> {
        if !(onset.is_finite() && offset.is_finite()) || onset < 0.0 || onset >= offset {
            return Err(SedError::Data(format!(
                "malformed event: class {class_id}, onset {onset}, offset {offset}"
            )));
        }
        Ok(Self {
            class_id,
            onset,
            offset,
        })
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }

    pub fn validate(&self) -> Result<()> {
        Event::new(self.class_id, self.onset, self.offset).map(|_| ())
    }
}

pub type EventList = Vec<Event>;

/// Clip-level label set: distinct classes of `events` in order of first onset.
pub fn weak_projection(events: &[Event]) -> Vec<usize> {
    let mut sorted: Vec<&Event> = events.iter().collect();
    sorted.sort_by(|a, b| a.onset.total_cmp(&b.onset));
    let mut seen = HashSet::new();
    sorted
        .into_iter()
        .filter(|e| seen.insert(e.class_id))
        .map(|e| e.class_id)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrongClip {
    pub name: String,
    pub events: EventList,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeakClip {
    pub name: String,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct SplitCounts {
    pub strong: usize,
    pub weak: usize,
    pub unlabeled: usize,
}

/// On-disk manifest; paths are relative to the manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestFile {
    pub seed: u64,
    pub sample_rate: u32,
    pub clip_duration: f64,
    pub class_names: Vec<String>,
    pub counts: SplitCounts,
    pub audio_dir: String,
    pub strong_tsv: String,
    pub weak_tsv: String,
    pub unlabeled_list: String,
}

/// A corpus split into strong, weak and unlabeled clips.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub sample_rate: u32,
    pub clip_duration: f64,
    pub class_names: Vec<String>,
    pub strong: Vec<StrongClip>,
    pub weak: Vec<WeakClip>,
    pub unlabeled: Vec<String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";
const AUDIO_DIR: &str = "audio";
const STRONG_TSV: &str = "strong.tsv";
const WEAK_TSV: &str = "weak.tsv";
const UNLABELED_LIST: &str = "unlabeled.txt";

impl CorpusManifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn audio_path(&self, clip: &str) -> PathBuf {
        self.root.join(AUDIO_DIR).join(clip)
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            strong: self.strong.len(),
            weak: self.weak.len(),
            unlabeled: self.unlabeled.len(),
        }
    }

    /// Every clip name, strong first, then weak, then unlabeled.
    pub fn clip_names(&self) -> impl Iterator<Item = &str> {
        self.strong
            .iter()
            .map(|c| c.name.as_str())
            .chain(self.weak.iter().map(|c| c.name.as_str()))
            .chain(self.unlabeled.iter().map(String::as_str))
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for n in self.clip_names() {
            if !names.insert(n) {
                return Err(SedError::Data(format!("clip {n} listed twice")));
            }
        }
        let c = self.n_classes();
        for clip in &self.strong {
            for e in &clip.events {
                e.validate()?;
                if e.class_id >= c || e.offset > self.clip_duration + 1e-9 {
                    return Err(SedError::Data(format!("{}: event {e:?} out of range", clip.name)));
                }
            }
        }
        if self.weak.iter().flat_map(|w| &w.classes).any(|&k| k >= c) {
            return Err(SedError::Data("weak label outside class vocabulary".into()));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_NAME)
    }

    /// Writes manifest JSON and the label files into `root`.
    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(SedError::io(&self.root))?;
        let file = ManifestFile {
            seed: self.seed,
            sample_rate: self.sample_rate,
            clip_duration: self.clip_duration,
            class_names: self.class_names.clone(),
            counts: self.counts(),
            audio_dir: AUDIO_DIR.into(),
            strong_tsv: STRONG_TSV.into(),
            weak_tsv: WEAK_TSV.into(),
            unlabeled_list: UNLABELED_LIST.into(),
        };
        write_text(&self.root.join(STRONG_TSV), &format_strong_tsv(&self.strong, &self.class_names))?;
        write_text(&self.root.join(WEAK_TSV), &format_weak_tsv(&self.weak, &self.class_names))?;
        let mut unl = String::new();
        for n in &self.unlabeled {
            writeln!(unl, "{n}").unwrap();
        }
        write_text(&self.root.join(UNLABELED_LIST), &unl)?;
        let json = serde_json::to_string_pretty(&file)?;
        write_text(&self.manifest_path(), &(json + "\n"))
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest).map_err(SedError::io(manifest))?;
        let file: ManifestFile = serde_json::from_str(&text)?;
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let read = |rel: &str| {
            let p = root.join(rel);
            fs::read_to_string(&p).map_err(SedError::io(&p))
        };
        let strong = parse_strong_tsv(&read(&file.strong_tsv)?, &file.class_names)?;
        let weak = parse_weak_tsv(&read(&file.weak_tsv)?, &file.class_names)?;
        let unlabeled = read(&file.unlabeled_list)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let m = CorpusManifest {
            root,
            seed: file.seed,
            sample_rate: file.sample_rate,
            clip_duration: file.clip_duration,
            class_names: file.class_names,
            strong,
            weak,
            unlabeled,
        };
        if m.counts() != file.counts {
            return Err(SedError::Data(format!(
                "{}: counts {:?} disagree with label files {:?}",
                manifest.display(),
                file.counts,
                m.counts()
            )));
        }
        m.validate()?;
        Ok(m)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(SedError::io(path))
}

fn class_index(names: &[String], label: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == label)
        .ok_or_else(|| SedError::Data(format!("unknown event label {label:?}")))
}

/// `filename<TAB>onset<TAB>offset<TAB>event_label`, seconds with 3 decimals.
/// Clips without events get a row with empty fields.
pub fn format_strong_tsv(clips: &[StrongClip], class_names: &[String]) -> String {
    let mut out = String::from("filename\tonset\toffset\tevent_label\n");
    for clip in clips {
        if clip.events.is_empty() {
            writeln!(out, "{}\t\t\t", clip.name).unwrap();
        }
        for e in &clip.events {
            writeln!(
                out,
                "{}\t{:.3}\t{:.3}\t{}",
                clip.name, e.onset, e.offset, class_names[e.class_id]
            )
            .unwrap();
        }
    }
    out
}

pub fn parse_strong_tsv(text: &str, class_names: &[String]) -> Result<Vec<StrongClip>> {
    let mut clips: Vec<StrongClip> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (lineno == 0 && line.starts_with("filename")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(SedError::Data(format!("strong tsv line {}: expected 4 fields", lineno + 1)));
        }
        let name = fields[0].to_string();
        let idx = match clips.iter().position(|c| c.name == name) {
            Some(i) => i,
            None => {
                clips.push(StrongClip {
                    name,
                    events: Vec::new(),
                });
                clips.len() - 1
            }
        };
        if fields[3].is_empty() {
            continue;
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| SedError::Data(format!("strong tsv line {}: bad time {s:?}", lineno + 1)))
        };
        let event = Event::new(class_index(class_names, fields[3])?, num(fields[1])?, num(fields[2])?)?;
        clips[idx].events.push(event);
    }
    Ok(clips)
}

/// `filename<TAB>label1,label2`.
pub fn format_weak_tsv(clips: &[WeakClip], class_names: &[String]) -> String {
    let mut out = String::from("filename\tevent_labels\n");
    for clip in clips {
        let labels: Vec<&str> = clip.classes.iter().map(|&c| class_names[c].as_str()).collect();
        writeln!(out, "{}\t{}", clip.name, labels.join(",")).unwrap();
    }
    out
}

pub fn parse_weak_tsv(text: &str, class_names: &[String]) -> Result<Vec<WeakClip>> {
    let mut clips = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (lineno == 0 && line.starts_with("filename")) {
            continue;
        }
        let (name, labels) = line
            .split_once('\t')
            .ok_or_else(|| SedError::Data(format!("weak tsv line {}: missing tab", lineno + 1)))?;
        let classes = labels
            .split(',')
            .filter(|l| !l.is_empty())
            .map(|l| class_index(class_names, l))
            .collect::<Result<Vec<_>>>()?;
        clips.push(WeakClip {
            name: name.to_string(),
            classes,
        });
    }
    Ok(clips)
}
