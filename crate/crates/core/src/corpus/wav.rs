//! 16-bit PCM mono RIFF/WAVE reading and writing.

use std::fs;
use std::path::Path;

use crate::dsp::AudioClip;
use crate::error::{Error, Result};

const PCM: u16 = 1;
const SCALE: f64 = 32768.0;

fn format_err(field: &str, detail: impl Into<String>) -> Error {
    Error::Format {
        field: field.to_string(),
        detail: detail.into(),
    }
}

fn quantize(v: f64) -> i16 {
    (v * SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Encodes a clip as a complete WAV byte stream.
pub fn wav_bytes(clip: &AudioClip) -> Result<Vec<u8>> {
    if let Some(bad) = clip.samples.iter().find(|v| !v.is_finite()) {
        return Err(Error::Argument(format!("cannot encode non-finite sample {bad}")));
    }
    let data_len = clip.samples.len() * 2;
    let riff_len = u32::try_from(36 + data_len)
        .map_err(|_| Error::Argument(format!("{} samples exceed the WAV size limit", clip.len())))?;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&riff_len.to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &v in &clip.samples {
        out.extend_from_slice(&quantize(v).to_le_bytes());
    }
    Ok(out)
}

pub fn wav_write(path: &Path, clip: &AudioClip) -> Result<()> {
    let bytes = wav_bytes(clip)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a WAV byte stream. Chunks other than `fmt ` and `data` are skipped.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 {
        return Err(format_err("RIFF header", format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(format_err("RIFF id", "missing `RIFF` signature"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(format_err("WAVE id", "RIFF form type is not `WAVE`"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let available = bytes.len() - body;
        if id == b"fmt " {
            if len < 16 || available < 16 {
                return Err(format_err("fmt chunk", format!("chunk is truncated ({len} bytes declared)")));
            }
            let format = u16_at(bytes, body);
            let channels = u16_at(bytes, body + 2);
            let rate = u32_at(bytes, body + 4);
            let bits = u16_at(bytes, body + 14);
            if format != PCM {
                return Err(format_err("audio_format", format!("{format} is not PCM (1)")));
            }
            if channels != 1 {
                return Err(format_err("num_channels", format!("{channels} channels, expected mono")));
            }
            if bits != 16 {
                return Err(format_err("bits_per_sample", format!("{bits}, expected 16")));
            }
            if rate == 0 {
                return Err(format_err("sample_rate", "zero sample rate"));
            }
            fmt = Some((format, channels, rate, bits));
        } else if id == b"data" {
            let (_, _, rate, _) =
                fmt.ok_or_else(|| format_err("fmt chunk", "`data` chunk precedes `fmt `"))?;
            if available < len {
                return Err(format_err(
                    "data chunk",
                    format!("declares {len} bytes but only {available} remain (truncated file)"),
                ));
            }
            if len % 2 != 0 {
                return Err(format_err("data chunk", format!("odd length {len} for 16-bit samples")));
            }
            let samples = bytes[body..body + len]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / SCALE)
                .collect();
            return Ok(AudioClip::new(samples, rate));
        }
        pos = body + len + (len & 1);
    }
    Err(format_err(
        if fmt.is_none() { "fmt chunk" } else { "data chunk" },
        "chunk not found (truncated file?)",
    ))
}

pub fn wav_read(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Format { field, detail } => Error::Format {
            field,
            detail: format!("{detail} in {}", path.display()),
        },
        other => other,
    })
}
