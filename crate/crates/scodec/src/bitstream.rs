//! Bit-exact token bitstream and bitrate accounting.
//!
//! Tokens are packed fixed-width: each scalar stage occupies
//! `ceil(log2(prod levels))` bits, each vector stage `ceil(log2 K)` bits,
//! scalar stages first, most significant bit first. Frames are bit-packed
//! contiguously with no per-frame alignment; the payload is zero-padded to a
//! byte boundary at the end of the stream.
//!
//! The theoretical rate uses ceiling-free arithmetic,
//! `f_s / (w_s * R) * (sum_i sum_b log2 l_b + sum_j log2 K_j)` bits per
//! second, while the effective rate reports what the fixed-width payload
//! actually spends.

use std::io::{Read, Write};

use crate::error::{CodecError, Result};
use crate::rsvq::{QuantizerSchedule, TokenFrame};

pub const MAGIC: [u8; 4] = *b"SCBS";
pub const VERSION: u32 = 1;
/// Frame-count sentinel for open-ended streams.
pub const STREAMING_SENTINEL: u64 = u64::MAX;

/// Bitstream preamble; round-trips bit-exactly through write/read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u32,
    /// Waveform sampling rate in Hz.
    pub sample_rate: u32,
    /// MDCT frame shift in samples.
    pub frame_shift: u32,
    /// Down/upsampling rate of the convolutional stacks.
    pub resample: u32,
    /// Fixed algorithmic delay in samples (`frame_shift * resample`),
    /// recorded so callers may trim it.
    pub delay_samples: u32,
    pub schedule: QuantizerSchedule,
    /// Number of token frames, or [`STREAMING_SENTINEL`].
    pub frame_count: u64,
}

impl StreamHeader {
    pub fn new(sample_rate: u32, frame_shift: u32, resample: u32, schedule: QuantizerSchedule) -> Self {
        Self {
            version: VERSION,
            sample_rate,
            frame_shift,
            resample,
            delay_samples: frame_shift * resample,
            schedule,
            frame_count: STREAMING_SENTINEL,
        }
    }

    /// Token frames per second of audio.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / (self.frame_shift as f64 * self.resample as f64)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.sample_rate.to_le_bytes())?;
        w.write_all(&self.frame_shift.to_le_bytes())?;
        w.write_all(&self.resample.to_le_bytes())?;
        w.write_all(&self.delay_samples.to_le_bytes())?;
        w.write_all(&(self.schedule.latent_dim as u32).to_le_bytes())?;
        w.write_all(&(self.schedule.sq.len() as u32).to_le_bytes())?;
        for stage in &self.schedule.sq {
            w.write_all(&(stage.levels.len() as u32).to_le_bytes())?;
            for &l in &stage.levels {
                w.write_all(&l.to_le_bytes())?;
            }
        }
        w.write_all(&(self.schedule.ivq.len() as u32).to_le_bytes())?;
        for stage in &self.schedule.ivq {
            w.write_all(&(stage.code_dim as u32).to_le_bytes())?;
            w.write_all(&(stage.codebook_size as u32).to_le_bytes())?;
        }
        w.write_all(&self.frame_count.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| CodecError::Corruption("stream too short for magic".into()))?;
        if magic != MAGIC {
            return Err(CodecError::Corruption(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CodecError::Corruption(format!(
                "unsupported stream version {version}, expected {VERSION}"
            )));
        }
        let sample_rate = read_u32(r)?;
        let frame_shift = read_u32(r)?;
        let resample = read_u32(r)?;
        let delay_samples = read_u32(r)?;
        let latent_dim = read_u32(r)? as usize;
        let n_sq = read_u32(r)? as usize;
        if n_sq > 1024 {
            return Err(CodecError::Corruption(format!("implausible SQ count {n_sq}")));
        }
        let mut sq = Vec::with_capacity(n_sq);
        for _ in 0..n_sq {
            let b = read_u32(r)? as usize;
            if b > 4096 {
                return Err(CodecError::Corruption(format!("implausible SQ width {b}")));
            }
            let mut levels = Vec::with_capacity(b);
            for _ in 0..b {
                levels.push(read_u32(r)?);
            }
            sq.push(crate::rsvq::SqSchedule { levels });
        }
        let n_ivq = read_u32(r)? as usize;
        if n_ivq > 1024 {
            return Err(CodecError::Corruption(format!("implausible IVQ count {n_ivq}")));
        }
        let mut ivq = Vec::with_capacity(n_ivq);
        for _ in 0..n_ivq {
            let code_dim = read_u32(r)? as usize;
            let codebook_size = read_u32(r)? as usize;
            ivq.push(crate::rsvq::IvqSchedule {
                code_dim,
                codebook_size,
            });
        }
        let mut count_bytes = [0u8; 8];
        r.read_exact(&mut count_bytes)
            .map_err(|_| CodecError::Corruption("stream too short for frame count".into()))?;
        let schedule = QuantizerSchedule {
            latent_dim,
            sq,
            ivq,
        };
        schedule
            .validate()
            .map_err(|e| CodecError::Corruption(format!("invalid schedule in header: {e}")))?;
        Ok(Self {
            version,
            sample_rate,
            frame_shift,
            resample,
            delay_samples,
            schedule,
            frame_count: u64::from_le_bytes(count_bytes),
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut bytes = [0u8; 4];
    r.read_exact(&mut bytes)
        .map_err(|_| CodecError::Corruption("stream truncated in header".into()))?;
    Ok(u32::from_le_bytes(bytes))
}

/// Bit widths of one packed frame for a schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLayout {
    pub sq_widths: Vec<u32>,
    pub ivq_widths: Vec<u32>,
}

fn ceil_log2(capacity: u64) -> u32 {
    debug_assert!(capacity >= 2);
    64 - (capacity - 1).leading_zeros() as u32
}

impl FrameLayout {
    pub fn for_schedule(schedule: &QuantizerSchedule) -> Self {
        Self {
            sq_widths: schedule.sq_capacities().iter().map(|&c| ceil_log2(c)).collect(),
            ivq_widths: schedule.ivq_capacities().iter().map(|&c| ceil_log2(c)).collect(),
        }
    }

    /// Constant width of every packed frame, in bits.
    pub fn frame_bits(&self) -> u32 {
        self.sq_widths.iter().sum::<u32>() + self.ivq_widths.iter().sum::<u32>()
    }
}

/// MSB-first bit accumulator.
#[derive(Debug, Default, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    /// Bits already used in the trailing partial byte.
    used: u8,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bit_len(&self) -> u64 {
        if self.used == 0 {
            self.bytes.len() as u64 * 8
        } else {
            (self.bytes.len() as u64 - 1) * 8 + self.used as u64
        }
    }

    pub fn write_bits(&mut self, value: u64, width: u32) {
        debug_assert!(width <= 64);
        debug_assert!(width == 64 || value < (1u64 << width));
        for i in (0..width).rev() {
            let bit = (value >> i) & 1;
            if self.used == 0 {
                self.bytes.push(0);
            }
            let last = self.bytes.last_mut().expect("push above");
            *last |= (bit as u8) << (7 - self.used);
            self.used = (self.used + 1) % 8;
        }
    }

    /// Zero-pad to a byte boundary and return the buffer.
    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

/// MSB-first bit cursor over a byte slice.
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    position: u64,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, position: 0 }
    }

    pub fn remaining_bits(&self) -> u64 {
        self.bytes.len() as u64 * 8 - self.position
    }

    pub fn read_bits(&mut self, width: u32) -> Result<u64> {
        if self.remaining_bits() < width as u64 {
            return Err(CodecError::Stream(format!(
                "truncated frame: needed {width} bits, {} left",
                self.remaining_bits()
            )));
        }
        let mut value = 0u64;
        for _ in 0..width {
            let byte = self.bytes[(self.position / 8) as usize];
            let bit = (byte >> (7 - (self.position % 8))) & 1;
            value = (value << 1) | bit as u64;
            self.position += 1;
        }
        Ok(value)
    }
}

/// Pack one token frame into the writer; scalar tokens first, MSB first.
pub fn pack_frame(tokens: &TokenFrame, schedule: &QuantizerSchedule, out: &mut BitWriter) -> Result<()> {
    tokens.validate(schedule)?;
    let layout = FrameLayout::for_schedule(schedule);
    for (&t, &w) in tokens.sq.iter().zip(&layout.sq_widths) {
        out.write_bits(t as u64, w);
    }
    for (&t, &w) in tokens.ivq.iter().zip(&layout.ivq_widths) {
        out.write_bits(t as u64, w);
    }
    Ok(())
}

/// Exact inverse of [`pack_frame`]. Decoded tokens are range-checked against
/// the schedule: fixed-width fields can encode values past the capacity of
/// non-power-of-two stages, and those indicate corruption.
pub fn unpack_frame(reader: &mut BitReader, schedule: &QuantizerSchedule) -> Result<TokenFrame> {
    let layout = FrameLayout::for_schedule(schedule);
    let sq_caps = schedule.sq_capacities();
    let ivq_caps = schedule.ivq_capacities();
    let mut sq = Vec::with_capacity(layout.sq_widths.len());
    for (&w, &cap) in layout.sq_widths.iter().zip(&sq_caps) {
        let value = reader.read_bits(w)?;
        if value >= cap {
            return Err(CodecError::Corruption(format!(
                "scalar token {value} exceeds capacity {cap}"
            )));
        }
        sq.push(value as u32);
    }
    let mut ivq = Vec::with_capacity(layout.ivq_widths.len());
    for (&w, &cap) in layout.ivq_widths.iter().zip(&ivq_caps) {
        let value = reader.read_bits(w)?;
        if value >= cap {
            return Err(CodecError::Corruption(format!(
                "vector token {value} exceeds capacity {cap}"
            )));
        }
        ivq.push(value as u32);
    }
    Ok(TokenFrame { sq, ivq })
}

/// Ceiling-free rate of a schedule in bits per second:
/// `f_s/(w_s*R) * (sum log2 l + sum log2 K)`.
pub fn theoretical_bitrate(schedule: &QuantizerSchedule, header: &StreamHeader) -> f64 {
    let mut bits_per_frame = 0.0;
    for stage in &schedule.sq {
        for &l in &stage.levels {
            bits_per_frame += (l as f64).log2();
        }
    }
    for stage in &schedule.ivq {
        bits_per_frame += (stage.codebook_size as f64).log2();
    }
    header.frame_rate() * bits_per_frame
}

/// Actual fixed-width payload rate in bits per second.
pub fn effective_bitrate(header: &StreamHeader, frame_count: u64) -> Result<f64> {
    if frame_count == 0 {
        return Err(CodecError::Metric("effective bitrate needs at least one frame".into()));
    }
    let layout = FrameLayout::for_schedule(&header.schedule);
    let payload_bits = layout.frame_bits() as f64 * frame_count as f64;
    let duration = frame_count as f64 / header.frame_rate();
    Ok(payload_bits / duration)
}

/// Serialize a whole stream: header, then bit-packed frames, then padding.
pub fn write_stream<W: Write>(header: &StreamHeader, frames: &[TokenFrame], w: &mut W) -> Result<()> {
    let mut header = header.clone();
    header.frame_count = frames.len() as u64;
    header.write_to(w)?;
    let mut bits = BitWriter::new();
    for frame in frames {
        pack_frame(frame, &header.schedule, &mut bits)?;
    }
    w.write_all(&bits.finish())?;
    Ok(())
}

/// Parse a whole stream produced by [`write_stream`].
pub fn read_stream<R: Read>(r: &mut R) -> Result<(StreamHeader, Vec<TokenFrame>)> {
    let header = StreamHeader::read_from(r)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let layout = FrameLayout::for_schedule(&header.schedule);
    let frame_bits = layout.frame_bits() as u64;
    let mut reader = BitReader::new(&payload);
    let count = if header.frame_count == STREAMING_SENTINEL {
        reader.remaining_bits() / frame_bits
    } else {
        if reader.remaining_bits() < header.frame_count * frame_bits {
            return Err(CodecError::Stream(format!(
                "payload holds {} bits, header promises {} frames of {} bits",
                reader.remaining_bits(),
                header.frame_count,
                frame_bits
            )));
        }
        header.frame_count
    };
    let mut frames = Vec::with_capacity(count as usize);
    for _ in 0..count {
        frames.push(unpack_frame(&mut reader, &header.schedule)?);
    }
    Ok((header, frames))
}
