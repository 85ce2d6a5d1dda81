//! Streaming MDCT analysis and IMDCT synthesis with overlap-add.
//!
//! The transform is the type-IV lapped cosine transform with 50% overlap:
//! a block of `2*w_s` windowed samples maps to `w_s` coefficients, and
//! overlap-added inverse blocks cancel time-domain aliasing exactly when
//! the window satisfies the Princen-Bradley condition
//! `w[n]^2 + w[n + w_s]^2 = 1`.
//!
//! Forward transform of one block:
//!
//! ```text
//! X[k] = sum_n x[n] * w[n] * cos(pi/w_s * (n + 1/2 + w_s/2) * (k + 1/2))
//! ```
//!
//! and the inverse applies the same basis scaled by `2/w_s` and the window
//! again, leaving alias terms that cancel under overlap-add.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::error::{CodecError, Result};

/// Transform geometry plus analysis/synthesis window.
#[derive(Debug, Clone)]
pub struct MdctConfig {
    frame_shift: usize,
    window: Vec<f64>,
    /// Cosine basis, `frame_shift` rows of `2*frame_shift` entries each.
    basis: Vec<f64>,
}

impl MdctConfig {
    /// Sine-window configuration: `w[n] = sin(pi * (n + 1/2) / (2 * w_s))`.
    pub fn new(frame_shift: usize) -> Result<Self> {
        let n2 = 2 * frame_shift;
        let window = (0..n2)
            .map(|n| (PI * (n as f64 + 0.5) / n2 as f64).sin())
            .collect();
        Self::with_window(frame_shift, window)
    }

    /// Configuration with an explicit window, checked against the
    /// Princen-Bradley condition within 1e-12.
    pub fn with_window(frame_shift: usize, window: Vec<f64>) -> Result<Self> {
        if frame_shift == 0 {
            return Err(CodecError::Config("frame shift must be positive".into()));
        }
        if window.len() != 2 * frame_shift {
            return Err(CodecError::Config(format!(
                "window length {} != 2 * frame shift {}",
                window.len(),
                frame_shift
            )));
        }
        for n in 0..frame_shift {
            let s = window[n] * window[n] + window[n + frame_shift] * window[n + frame_shift];
            if (s - 1.0).abs() > 1e-12 {
                return Err(CodecError::Config(format!(
                    "window violates the Princen-Bradley condition at {n}: {s}"
                )));
            }
        }
        let basis = build_basis(frame_shift);
        Ok(Self {
            frame_shift,
            window,
            basis,
        })
    }

    /// Frame shift `w_s` in samples.
    pub fn frame_shift(&self) -> usize {
        self.frame_shift
    }

    /// Block length `2 * w_s` in samples.
    pub fn frame_length(&self) -> usize {
        2 * self.frame_shift
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }
}

fn build_basis(ws: usize) -> Vec<f64> {
    let n2 = 2 * ws;
    let mut basis = vec![0.0; ws * n2];
    for k in 0..ws {
        for n in 0..n2 {
            let angle = PI / ws as f64 * (n as f64 + 0.5 + ws as f64 / 2.0) * (k as f64 + 0.5);
            basis[k * n2 + n] = angle.cos();
        }
    }
    basis
}

/// One frame of `w_s` MDCT coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MdctFrame {
    pub coefficients: Vec<f64>,
    pub frame_index: u64,
}

impl MdctFrame {
    fn check(&self, ws: usize) -> Result<()> {
        if self.coefficients.len() != ws {
            return Err(CodecError::Config(format!(
                "frame has {} coefficients, expected {}",
                self.coefficients.len(),
                ws
            )));
        }
        if self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(CodecError::Numeric(
                "frame contains non-finite coefficients".into(),
            ));
        }
        Ok(())
    }
}

/// Forward MDCT of one `2*w_s`-sample block.
pub fn mdct_forward(samples: &[f64], cfg: &MdctConfig) -> Result<MdctFrame> {
    let ws = cfg.frame_shift;
    let n2 = 2 * ws;
    if samples.len() != n2 {
        return Err(CodecError::Config(format!(
            "analysis block has {} samples, expected {}",
            samples.len(),
            n2
        )));
    }
    let mut coefficients = vec![0.0; ws];
    for k in 0..ws {
        let row = &cfg.basis[k * n2..(k + 1) * n2];
        let mut acc = 0.0;
        for n in 0..n2 {
            acc += samples[n] * cfg.window[n] * row[n];
        }
        coefficients[k] = acc;
    }
    Ok(MdctFrame {
        coefficients,
        frame_index: 0,
    })
}

/// Inverse transform of one frame. The returned `2*w_s` windowed block must
/// be overlap-added with its neighbours by the caller.
pub fn imdct_frame(frame: &MdctFrame, cfg: &MdctConfig) -> Result<Vec<f64>> {
    let ws = cfg.frame_shift;
    let n2 = 2 * ws;
    frame.check(ws)?;
    let scale = 2.0 / ws as f64;
    let mut block = vec![0.0; n2];
    for n in 0..n2 {
        let mut acc = 0.0;
        for k in 0..ws {
            acc += frame.coefficients[k] * cfg.basis[k * n2 + n];
        }
        block[n] = acc * scale * cfg.window[n];
    }
    Ok(block)
}

/// Streaming analysis: retains the previous `w_s` samples so each push of
/// `w_s` fresh samples yields one frame.
#[derive(Debug, Clone)]
pub struct AnalysisState {
    history: Vec<f64>,
    next_index: u64,
}

impl AnalysisState {
    pub fn new(cfg: &MdctConfig) -> Self {
        Self {
            history: vec![0.0; cfg.frame_shift],
            next_index: 0,
        }
    }

    pub fn frames_emitted(&self) -> u64 {
        self.next_index
    }

    /// Push exactly `w_s` new samples and receive the frame for the block
    /// `[previous chunk, new chunk]`.
    pub fn push(&mut self, new_samples: &[f64], cfg: &MdctConfig) -> Result<MdctFrame> {
        let ws = cfg.frame_shift;
        if new_samples.len() != ws {
            return Err(CodecError::Stream(format!(
                "analysis push expects {} samples, got {}",
                ws,
                new_samples.len()
            )));
        }
        let mut block = Vec::with_capacity(2 * ws);
        block.extend_from_slice(&self.history);
        block.extend_from_slice(new_samples);
        let mut frame = mdct_forward(&block, cfg)?;
        frame.frame_index = self.next_index;
        self.next_index += 1;
        self.history.copy_from_slice(new_samples);
        Ok(frame)
    }
}

/// Streaming synthesis: overlap-add state carrying the pending tail.
#[derive(Debug, Clone)]
pub struct OlaState {
    carry: Vec<f64>,
    frames_emitted: u64,
}

impl OlaState {
    pub fn new(cfg: &MdctConfig) -> Self {
        Self {
            carry: vec![0.0; cfg.frame_shift],
            frames_emitted: 0,
        }
    }

    pub fn frames_emitted(&self) -> u64 {
        self.frames_emitted
    }

    /// Push the next frame (indices must be consecutive) and receive `w_s`
    /// fully overlapped output samples, one frame behind the analysis input.
    pub fn push(&mut self, frame: &MdctFrame, cfg: &MdctConfig) -> Result<Vec<f64>> {
        if frame.frame_index != self.frames_emitted {
            return Err(CodecError::Stream(format!(
                "out-of-order frame: got index {}, expected {}",
                frame.frame_index, self.frames_emitted
            )));
        }
        let ws = cfg.frame_shift;
        let block = imdct_frame(frame, cfg)?;
        let mut out = vec![0.0; ws];
        for n in 0..ws {
            out[n] = self.carry[n] + block[n];
        }
        self.carry.copy_from_slice(&block[ws..]);
        self.frames_emitted += 1;
        Ok(out)
    }
}

/// Batch analysis of a whole signal, zero-padded by one frame at each end.
///
/// The signal length must be a multiple of `w_s`; `len/w_s + 1` frames are
/// returned so that synthesis recovers every input sample.
pub fn analyze_signal(signal: &[f64], cfg: &MdctConfig) -> Result<Vec<MdctFrame>> {
    let ws = cfg.frame_shift;
    if signal.len() % ws != 0 {
        return Err(CodecError::Config(format!(
            "signal length {} is not a multiple of the frame shift {}",
            signal.len(),
            ws
        )));
    }
    let mut state = AnalysisState::new(cfg);
    let mut frames = Vec::with_capacity(signal.len() / ws + 1);
    for chunk in signal.chunks(ws) {
        frames.push(state.push(chunk, cfg)?);
    }
    let flush = vec![0.0; ws];
    frames.push(state.push(&flush, cfg)?);
    Ok(frames)
}

/// Batch synthesis matching [`analyze_signal`]: the leading zero-history
/// chunk is dropped, so the output aligns with the analyzed signal.
pub fn synthesize_frames(frames: &[MdctFrame], cfg: &MdctConfig) -> Result<Vec<f64>> {
    let ws = cfg.frame_shift;
    let mut state = OlaState::new(cfg);
    let mut out = Vec::with_capacity(frames.len().saturating_sub(1) * ws);
    for (i, frame) in frames.iter().enumerate() {
        let chunk = state.push(frame, cfg)?;
        if i > 0 {
            out.extend_from_slice(&chunk);
        }
    }
    Ok(out)
}

/// Debug export: one CSV row of coefficients per frame.
pub fn write_frames_csv<P: AsRef<Path>>(frames: &[MdctFrame], path: P) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for frame in frames {
        let row: Vec<String> = frame.coefficients.iter().map(|c| format!("{c}")).collect();
        writeln!(file, "{}", row.join(","))?;
    }
    Ok(())
}
