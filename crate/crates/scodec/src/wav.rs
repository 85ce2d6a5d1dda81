//! Minimal WAV support: mono, 16-bit integer PCM or 32-bit float, read and
//! write. No resampling; sample-rate policy belongs to the caller.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CodecError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

#[derive(Debug, Clone)]
pub struct WavData {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
    pub format: SampleFormat,
}

pub fn read_wav<P: AsRef<Path>>(path: P) -> Result<WavData> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<WavData> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(CodecError::Corruption("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes")) as usize;
        let body_start = pos + 8;
        let body_end = (body_start + size).min(bytes.len());
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(CodecError::Corruption("fmt chunk too short".into()));
                }
                let audio_format = u16::from_le_bytes(body[0..2].try_into().expect("2 bytes"));
                let channels = u16::from_le_bytes(body[2..4].try_into().expect("2 bytes"));
                let sample_rate = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
                let bits = u16::from_le_bytes(body[14..16].try_into().expect("2 bytes"));
                format = Some((audio_format, channels, sample_rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_start + size + (size % 2);
    }
    let (audio_format, channels, sample_rate, bits) =
        format.ok_or_else(|| CodecError::Corruption("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| CodecError::Corruption("missing data chunk".into()))?;
    if channels != 1 {
        return Err(CodecError::Config(format!(
            "only mono audio is supported, file has {channels} channels"
        )));
    }
    match (audio_format, bits) {
        (1, 16) => {
            let samples = data
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes(c.try_into().expect("2 bytes")) as f64 / 32768.0)
                .collect();
            Ok(WavData {
                sample_rate,
                samples,
                format: SampleFormat::Pcm16,
            })
        }
        (3, 32) => {
            let samples = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            Ok(WavData {
                sample_rate,
                samples,
                format: SampleFormat::Float32,
            })
        }
        other => Err(CodecError::Config(format!(
            "unsupported WAV format {other:?}; expected mono 16-bit PCM or 32-bit float"
        ))),
    }
}

pub fn write_wav<P: AsRef<Path>>(
    path: P,
    samples: &[f64],
    sample_rate: u32,
    format: SampleFormat,
) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    let bytes = encode_wav(samples, sample_rate, format);
    file.write_all(&bytes)?;
    Ok(())
}

pub fn encode_wav(samples: &[f64], sample_rate: u32, format: SampleFormat) -> Vec<u8> {
    let (audio_format, bits): (u16, u16) = match format {
        SampleFormat::Pcm16 => (1, 16),
        SampleFormat::Float32 => (3, 32),
    };
    let bytes_per_sample = bits as u32 / 8;
    let data_len = samples.len() as u32 * bytes_per_sample;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&audio_format.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * bytes_per_sample).to_le_bytes());
    out.extend_from_slice(&(bytes_per_sample as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    match format {
        SampleFormat::Pcm16 => {
            for &s in samples {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        SampleFormat::Float32 => {
            for &s in samples {
                out.extend_from_slice(&(s as f32).to_le_bytes());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_wav_round_trips_to_f32_precision() {
        let samples: Vec<f64> = (0..100).map(|i| ((i as f64) * 0.13).sin() * 0.7).collect();
        let bytes = encode_wav(&samples, 16000, SampleFormat::Float32);
        let parsed = parse_wav(&bytes).unwrap();
        assert_eq!(parsed.sample_rate, 16000);
        assert_eq!(parsed.format, SampleFormat::Float32);
        for (a, b) in parsed.samples.iter().zip(&samples) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn pcm16_wav_round_trips_to_quantized_values() {
        let samples: Vec<f64> = (0..50).map(|i| (i as f64 / 50.0) - 0.5).collect();
        let bytes = encode_wav(&samples, 48000, SampleFormat::Pcm16);
        let parsed = parse_wav(&bytes).unwrap();
        assert_eq!(parsed.sample_rate, 48000);
        for (a, b) in parsed.samples.iter().zip(&samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn stereo_and_garbage_are_rejected() {
        let mut bytes = encode_wav(&[0.0; 10], 16000, SampleFormat::Pcm16);
        bytes[22] = 2; // channel count
        assert!(matches!(parse_wav(&bytes), Err(CodecError::Config(_))));
        assert!(matches!(
            parse_wav(b"not yet audio"),
            Err(CodecError::Corruption(_))
        ));
    }
}
