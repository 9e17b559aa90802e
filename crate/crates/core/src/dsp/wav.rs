//! RIFF/WAVE reading and writing.
//!
//! Decoding accepts PCM 16-bit and IEEE float 32-bit data (including the
//! `WAVE_FORMAT_EXTENSIBLE` wrapper around either) with any channel count,
//! and always produces a mono [`Waveform`] by averaging channels.

use super::Waveform;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BitDepth {
    #[serde(rename = "16")]
    Pcm16,
    #[serde(rename = "32f")]
    Float32,
}

#[derive(Debug, Clone, Copy)]
struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

fn wav_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Wav(msg.into()))
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn parse_fmt(body: &[u8]) -> Result<FmtChunk> {
    if body.len() < 16 {
        return wav_err("malformed header: fmt chunk shorter than 16 bytes");
    }
    let mut fmt = FmtChunk {
        format: read_u16(body, 0),
        channels: read_u16(body, 2),
        sample_rate: read_u32(body, 4),
        bits: read_u16(body, 14),
    };
    if fmt.format == FORMAT_EXTENSIBLE {
        if body.len() < 26 {
            return wav_err("malformed header: extensible fmt chunk too short");
        }
        // first two bytes of the sub-format GUID carry the actual format tag
        fmt.format = read_u16(body, 24);
    }
    if fmt.channels == 0 {
        return wav_err("malformed header: zero channels");
    }
    if fmt.sample_rate == 0 {
        return wav_err("malformed header: zero sample rate");
    }
    match (fmt.format, fmt.bits) {
        (FORMAT_PCM, 16) | (FORMAT_FLOAT, 32) => Ok(fmt),
        (f, b) => wav_err(format!(
            "unsupported encoding: format tag {f} with {b} bits (expected PCM16 or float32)"
        )),
    }
}

/// Decodes a WAV container into a mono waveform with samples in `[-1, 1]`.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return wav_err("malformed header: missing RIFF/WAVE signature");
    }
    let mut pos = 12;
    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let start = pos + 8;
        let end = start.saturating_add(size);
        match id {
            b"fmt " => {
                if end > bytes.len() {
                    return wav_err("malformed header: truncated fmt chunk");
                }
                fmt = Some(parse_fmt(&bytes[start..end])?);
            }
            b"data" => {
                if end > bytes.len() {
                    return wav_err("truncated data");
                }
                data = Some(&bytes[start..end]);
                break;
            }
            _ => {}
        }
        // chunks are word aligned
        pos = end.saturating_add(size & 1);
    }
    let fmt = fmt.ok_or_else(|| Error::Wav("malformed header: no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Wav("malformed header: no data chunk".into()))?;

    let channels = fmt.channels as usize;
    let sample_bytes = (fmt.bits / 8) as usize;
    let frame_bytes = channels * sample_bytes;
    if data.len() % frame_bytes != 0 {
        return wav_err("truncated data");
    }
    let frames = data.len() / frame_bytes;
    if frames == 0 {
        return wav_err("empty data chunk");
    }
    let mut mono = Vec::with_capacity(frames);
    for frame in data.chunks_exact(frame_bytes) {
        let mut acc = 0.0f64;
        for ch in frame.chunks_exact(sample_bytes) {
            acc += match fmt.format {
                FORMAT_PCM => i16::from_le_bytes([ch[0], ch[1]]) as f64 / 32768.0,
                _ => f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]) as f64,
            };
        }
        mono.push((acc / channels as f64) as f32);
    }
    Waveform::new(mono, fmt.sample_rate)
}

/// Encodes a mono waveform. Samples outside `[-1, 1]` are clamped.
pub fn encode_wav(w: &Waveform, depth: BitDepth) -> Result<Vec<u8>> {
    if w.samples.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty waveform".into()));
    }
    let (tag, bits) = match depth {
        BitDepth::Pcm16 => (FORMAT_PCM, 16u16),
        BitDepth::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let block_align = bits / 8;
    let data_len = w.samples.len() * block_align as usize;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * block_align as u32).to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &w.samples {
        let s = s.clamp(-1.0, 1.0);
        match depth {
            BitDepth::Pcm16 => {
                let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            BitDepth::Float32 => out.extend_from_slice(&s.to_le_bytes()),
        }
    }
    Ok(out)
}
