use super::AudioClip;
use crate::error::{Result, SedError};

/// Polyphase windowed-sinc rational resampler.
#[derive(Clone, Debug)]
pub struct Resampler {
    up: usize,
    down: usize,
    taps: usize,
    /// `up` phases × `taps` weights, each phase normalised to unit DC gain.
    table: Vec<f64>,
}

pub const KAISER_BETA: f64 = 8.6;

impl Resampler {
    pub fn new(in_rate: u32, out_rate: u32, taps: usize, cutoff_hz: f64) -> Result<Self> {
        if in_rate == 0 || out_rate == 0 || taps < 2 || taps % 2 != 0 {
            return Err(SedError::Config(format!(
                "resampler {in_rate}->{out_rate} Hz with {taps} taps"
            )));
        }
        if cutoff_hz <= 0.0 || cutoff_hz > 0.5 * in_rate.min(out_rate) as f64 {
            return Err(SedError::Config(format!("resampler cutoff {cutoff_hz} Hz above Nyquist")));
        }
        let g = gcd(in_rate as usize, out_rate as usize);
        let (up, down) = (out_rate as usize / g, in_rate as usize / g);
        let fc = cutoff_hz / in_rate as f64;
        let half = (taps / 2) as f64;
        let centre = taps / 2 - 1;
        let i0_beta = bessel_i0(KAISER_BETA);
        let mut table = vec![0.0; up * taps];
        for phase in 0..up {
            let row = &mut table[phase * taps..(phase + 1) * taps];
            for (i, w) in row.iter_mut().enumerate() {
                // distance, in input samples, from output instant to input tap
                let t = phase as f64 / up as f64 + centre as f64 - i as f64;
                let u = t / half;
                let window = if u.abs() <= 1.0 {
                    bessel_i0(KAISER_BETA * (1.0 - u * u).sqrt()) / i0_beta
                } else {
                    0.0
                };
                *w = 2.0 * fc * sinc(2.0 * fc * t) * window;
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|w| *w /= sum);
        }
        Ok(Self {
            up,
            down,
            taps,
            table,
        })
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        (input_len * self.up + self.down / 2) / self.down
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let centre = self.taps / 2 - 1;
        (0..self.output_len(input.len()))
            .map(|n| {
                let pos = n * self.down;
                let (base, phase) = (pos / self.up, pos % self.up);
                let row = &self.table[phase * self.taps..(phase + 1) * self.taps];
                let mut acc = 0.0;
                for (i, w) in row.iter().enumerate() {
                    let j = base as isize - centre as isize + i as isize;
                    if j >= 0 && (j as usize) < input.len() {
                        acc += w * input[j as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Converts a 44.1 kHz clip to 16 kHz; 16 kHz clips pass through unchanged.
pub fn resample_to_16k(clip: &AudioClip) -> Result<AudioClip> {
    match clip.sample_rate {
        16_000 => Ok(clip.clone()),
        44_100 => {
            let r = Resampler::new(44_100, 16_000, 64, 7_200.0)?;
            Ok(AudioClip {
                samples: r.process(&clip.samples),
                sample_rate: 16_000,
                source_path: clip.source_path.clone(),
            })
        }
        other => Err(SedError::Format(format!("unsupported sample rate {other} Hz"))),
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
