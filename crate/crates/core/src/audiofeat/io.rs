use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::AudioClip;
use crate::error::{Result, SedError};
use crate::tensor::Array;

pub const FEATURE_MAGIC: &[u8; 4] = b"SEDF";
pub const FEATURE_VERSION: u16 = 1;

/// Writes a `T × F` matrix as `SEDF | u16 version | u32 T | u32 F | f32 LE row-major`.
pub fn write_features(path: &Path, values: &Array) -> Result<()> {
    if values.ndim() != 2 {
        return Err(SedError::Shape(format!("feature file needs a 2-D map, got {:?}", values.shape())));
    }
    let mut out = Vec::with_capacity(14 + 4 * values.len());
    out.write_all(FEATURE_MAGIC).unwrap();
    out.write_u16::<LittleEndian>(FEATURE_VERSION).unwrap();
    out.write_u32::<LittleEndian>(values.shape()[0] as u32).unwrap();
    out.write_u32::<LittleEndian>(values.shape()[1] as u32).unwrap();
    for &v in values.data() {
        out.write_f32::<LittleEndian>(v as f32).unwrap();
    }
    fs::write(path, out).map_err(SedError::io(path))
}

pub fn read_features(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).map_err(SedError::io(path))?;
    let bad = |m: &str| SedError::Format(format!("{}: {m}", path.display()));
    let mut r = Cursor::new(&bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    if r.read_u16::<LittleEndian>().map_err(|_| bad("truncated"))? != FEATURE_VERSION {
        return Err(bad("unsupported version"));
    }
    let t = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
    let f = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
    if bytes.len() != 14 + 4 * t * f {
        return Err(bad("size does not match dimensions"));
    }
    let data = (0..t * f)
        .map(|_| r.read_f32::<LittleEndian>().map(f64::from))
        .collect::<std::io::Result<Vec<f64>>>()
        .map_err(|_| bad("truncated"))?;
    Array::new([t, f], data)
}

/// Reads a PCM16 mono WAV.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(SedError::Format(format!(
            "{}: expected 16-bit mono PCM, got {:?}",
            path.display(),
            spec
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<f64>, _>>()?;
    AudioClip::new(samples, spec.sample_rate, path.display().to_string())
}
