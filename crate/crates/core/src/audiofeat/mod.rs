//! Audio front end: 16 kHz resampling, framed FFT, log-mel energies and
//! corpus-level normalisation.

mod io;
mod mel;
mod normalize;
mod resample;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SedError};
use crate::tensor::Array;

pub use io::{read_features, read_wav, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use mel::{hz_to_mel, mel_to_hz, MelFilterbank};
pub use normalize::{denormalize, fit_normalization, normalize, NormalizationStats};
pub use resample::{resample_to_16k, Resampler};

/// Mono waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source_path: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source_path: impl Into<String>) -> Result<Self> {
        if sample_rate != 44_100 && sample_rate != 16_000 {
            return Err(SedError::Format(format!("unsupported sample rate {sample_rate} Hz")));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(SedError::Format("non-finite audio sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_path: source_path.into(),
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    /// Clips are zero-padded (or truncated) to this length before framing.
    pub clip_seconds: f64,
    pub log_eps: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 512,
            hop_length: 255,
            n_mels: 128,
            f_min: 0.0,
            f_max: 8_000.0,
            clip_seconds: 10.0,
            log_eps: 1e-10,
        }
    }
}

impl FeatureConfig {
    /// Desk-scale settings: 4 s clips, 64 frames, 32 mel bands.
    pub fn toy() -> Self {
        Self {
            hop_length: 1010,
            n_mels: 32,
            clip_seconds: 4.0,
            ..Self::default()
        }
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    /// Frame count under centred framing: `floor(L / hop) + 1`.
    pub fn n_frames(&self) -> usize {
        self.clip_samples() / self.hop_length + 1
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sample_rate == 16_000
            && self.n_fft >= 2
            && self.n_fft % 2 == 0
            && self.hop_length > 0
            && self.n_mels > 0
            && self.f_min >= 0.0
            && self.f_min < self.f_max
            && self.f_max <= self.sample_rate as f64 / 2.0
            && self.clip_seconds > 0.0
            && self.log_eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SedError::Config(format!("invalid feature config {self:?}")))
        }
    }
}

/// `T × F` matrix of log-mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Array,
    pub frame_hop: usize,
    pub n_fft: usize,
    pub sample_rate: u32,
}

impl FeatureMap {
    pub fn from_values(values: Array, config: &FeatureConfig) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(SedError::Shape(format!("feature map must be 2-D, got {:?}", values.shape())));
        }
        Ok(Self {
            values,
            frame_hop: config.hop_length,
            n_fft: config.n_fft,
            sample_rate: config.sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bands(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Framed STFT → power spectrum → mel filterbank → `ln(· + ε)`.
pub struct LogMelExtractor {
    config: FeatureConfig,
    window: Vec<f64>,
    filters: MelFilterbank,
    fft: Arc<dyn Fft<f64>>,
}

impl LogMelExtractor {
    pub fn new(config: &FeatureConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_fft;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let filters = MelFilterbank::new(config.n_mels, n, config.sample_rate, config.f_min, config.f_max);
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            config: config.clone(),
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filters
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Pads or truncates to the configured clip length, then adds `n_fft/2`
    /// zeros on both sides for centred framing.
    pub fn padded_signal(&self, samples: &[f64]) -> Vec<f64> {
        let len = self.config.clip_samples();
        let half = self.config.n_fft / 2;
        let mut out = vec![0.0; len + 2 * half];
        let take = samples.len().min(len);
        out[half..half + take].copy_from_slice(&samples[..take]);
        out
    }

    /// `|DFT|²` of one windowed frame, `n_fft/2 + 1` bins.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .zip(&self.window)
            .map(|(x, w)| Complex::new(x * w, 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf[..self.config.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    /// Linear mel energies for each frame (before the log).
    pub fn mel_energies(&self, samples: &[f64]) -> Array {
        let padded = self.padded_signal(samples);
        let (t, f) = (self.config.n_frames(), self.config.n_mels);
        let mut out = Array::zeros([t, f]);
        for (i, row) in out.data_mut().chunks_mut(f).enumerate() {
            let start = i * self.config.hop_length;
            let power = self.power_spectrum(&padded[start..start + self.config.n_fft]);
            self.filters.apply(&power, row);
        }
        out
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMap> {
        if clip.samples.is_empty() {
            return Err(SedError::Format(format!("empty clip {}", clip.source_path)));
        }
        if clip.sample_rate != self.config.sample_rate {
            return Err(SedError::Format(format!(
                "feature extraction expects {} Hz audio, got {} Hz",
                self.config.sample_rate, clip.sample_rate
            )));
        }
        let mut values = self.mel_energies(&clip.samples);
        let eps = self.config.log_eps;
        values.data_mut().iter_mut().for_each(|v| *v = (*v + eps).ln());
        FeatureMap::from_values(values, &self.config)
    }
}

/// One-shot log-mel extraction of a 16 kHz clip.
pub fn extract_logmel(clip: &AudioClip, config: &FeatureConfig) -> Result<FeatureMap> {
    LogMelExtractor::new(config)?.extract(clip)
}

/// Full front end for a clip at either supported rate.
pub fn clip_features(clip: &AudioClip, extractor: &LogMelExtractor) -> Result<FeatureMap> {
    extractor.extract(&resample_to_16k(clip)?)
}
