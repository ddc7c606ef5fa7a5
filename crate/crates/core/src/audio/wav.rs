//! RIFF/WAVE PCM16 mono reader and writer.

use std::fs;
use std::path::Path;

use super::{AudioClip, AudioError, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes([b[i], b[i + 1], b[i + 2], b[i + 3]])
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let bytes = fs::read(path)?;
    parse_wav(&bytes)
}

pub(crate) fn parse_wav(bytes: &[u8]) -> Result<AudioClip> {
    let bad = |m: &str| AudioError::MalformedHeader(m.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("missing RIFF/WAVE signature"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("chunk overruns file"))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("fmt chunk too short"));
                }
                fmt = Some((
                    u16_at(bytes, body),
                    u16_at(bytes, body + 2),
                    u32_at(bytes, body + 4),
                    u16_at(bytes, body + 14),
                ));
            }
            b"data" => {
                let (format, channels, rate, bits) = fmt.ok_or_else(|| bad("data before fmt"))?;
                if channels != 1 {
                    return Err(AudioError::UnsupportedChannels(channels));
                }
                if (format != FORMAT_PCM && format != FORMAT_EXTENSIBLE) || bits != 16 {
                    return Err(AudioError::UnsupportedEncoding(format!(
                        "format tag {format}, {bits} bits"
                    )));
                }
                if rate == 0 {
                    return Err(bad("zero sample rate"));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return AudioClip::new(samples, rate);
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    Err(bad("no data chunk"))
}

/// Quantizes one sample: clamp to `[-1, 1]`, scale by 32768, round to
/// nearest, saturate to the i16 range.
fn quantize(s: f64) -> i16 {
    let v = (s.clamp(-1.0, 1.0) * 32768.0).round();
    v.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub(crate) fn encode_wav(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        out.extend_from_slice(&quantize(s).to_le_bytes());
    }
    out
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_wav(clip.samples(), clip.sample_rate()))?;
    Ok(())
}
