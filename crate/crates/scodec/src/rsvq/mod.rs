//! Residual scalar-vector quantizer.
//!
//! Scalar stages code the coarse contour of a latent vector; vector stages
//! refine what is left. Stages are chained residually: each one quantizes
//! the running residual, its output is added to the running reconstruction,
//! and the residual shrinks by the same amount. Tokens round-trip exactly:
//! decoding the token frame reproduces the encoder's reconstruction bit for
//! bit, because both sides read stage outputs from the same grids and
//! codebooks and accumulate them in the same order.

mod ivq;
mod sq;
pub mod train;

pub use ivq::IvqParams;
pub use sq::{half_width, sq_bound_round, sq_detokenize, sq_tokenize, OffsetMode, SqParams};

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};

/// Shape-only description of a quantizer: what the config file stores and
/// what the bitstream header echoes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerSchedule {
    pub latent_dim: usize,
    #[serde(default)]
    pub sq: Vec<SqSchedule>,
    #[serde(default)]
    pub ivq: Vec<IvqSchedule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqSchedule {
    pub levels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IvqSchedule {
    pub code_dim: usize,
    pub codebook_size: usize,
}

impl QuantizerSchedule {
    /// Low-rate profile: one scalar stage with five 4-level coordinates and
    /// two 1024-entry vector stages over a 32-dimensional latent.
    pub fn profile_low() -> Self {
        Self {
            latent_dim: 32,
            sq: vec![SqSchedule {
                levels: vec![4, 4, 4, 4, 4],
            }],
            ivq: vec![
                IvqSchedule {
                    code_dim: 32,
                    codebook_size: 1024,
                },
                IvqSchedule {
                    code_dim: 32,
                    codebook_size: 1024,
                },
            ],
        }
    }

    /// High-rate profile: the scalar stage widens to levels (11,11,10,10,10,9).
    pub fn profile_high() -> Self {
        Self {
            sq: vec![SqSchedule {
                levels: vec![11, 11, 10, 10, 10, 9],
            }],
            ..Self::profile_low()
        }
    }

    /// Named profile lookup used by the CLI.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "low" => Ok(Self::profile_low()),
            "high" => Ok(Self::profile_high()),
            other => Err(CodecError::Config(format!(
                "unknown profile {other:?}; expected \"low\" or \"high\""
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(CodecError::Config("latent dimension must be positive".into()));
        }
        if self.sq.is_empty() && self.ivq.is_empty() {
            return Err(CodecError::Config("quantizer needs at least one stage".into()));
        }
        for stage in &self.sq {
            if stage.levels.is_empty() {
                return Err(CodecError::Config("scalar stage has no levels".into()));
            }
            if stage.levels.iter().any(|&l| !(2..=1000).contains(&l)) {
                return Err(CodecError::Config(
                    "scalar level counts must lie in [2, 1000]".into(),
                ));
            }
        }
        for stage in &self.ivq {
            if stage.code_dim == 0 {
                return Err(CodecError::Config("codevector dimension must be positive".into()));
            }
            if stage.codebook_size < 2 {
                return Err(CodecError::Config("codebook size must be at least 2".into()));
            }
        }
        Ok(())
    }

    /// Token capacity per scalar stage (product of level counts).
    pub fn sq_capacities(&self) -> Vec<u64> {
        self.sq
            .iter()
            .map(|s| s.levels.iter().map(|&l| l as u64).product())
            .collect()
    }

    /// Token capacity per vector stage (codebook size).
    pub fn ivq_capacities(&self) -> Vec<u64> {
        self.ivq.iter().map(|s| s.codebook_size as u64).collect()
    }

    pub fn stage_count(&self) -> usize {
        self.sq.len() + self.ivq.len()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("schedule serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let schedule: Self = toml::from_str(text)
            .map_err(|e| CodecError::Config(format!("cannot parse quantizer config: {e}")))?;
        schedule.validate()?;
        Ok(schedule)
    }
}

/// One frame's discrete code: scalar tokens first, vector tokens after.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFrame {
    pub sq: Vec<u32>,
    pub ivq: Vec<u32>,
}

impl TokenFrame {
    pub fn validate(&self, schedule: &QuantizerSchedule) -> Result<()> {
        let sq_caps = schedule.sq_capacities();
        let ivq_caps = schedule.ivq_capacities();
        if self.sq.len() != sq_caps.len() || self.ivq.len() != ivq_caps.len() {
            return Err(CodecError::Token(format!(
                "token frame has {}+{} tokens, schedule expects {}+{}",
                self.sq.len(),
                self.ivq.len(),
                sq_caps.len(),
                ivq_caps.len()
            )));
        }
        for (t, cap) in self.sq.iter().zip(&sq_caps) {
            if (*t as u64) >= *cap {
                return Err(CodecError::Token(format!(
                    "scalar token {t} out of range for capacity {cap}"
                )));
            }
        }
        for (t, cap) in self.ivq.iter().zip(&ivq_caps) {
            if (*t as u64) >= *cap {
                return Err(CodecError::Token(format!(
                    "vector token {t} out of range for capacity {cap}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything produced by quantizing one latent vector.
#[derive(Debug, Clone)]
pub struct QuantizeResult {
    /// Sum of all stage outputs, accumulated in stage order.
    pub z_hat: Array1<f64>,
    pub tokens: TokenFrame,
    /// Scalar stage outputs first, vector stage outputs after.
    pub stage_outputs: Vec<Array1<f64>>,
    /// Residual after each stage, in the same order.
    pub residuals: Vec<Array1<f64>>,
}

/// Fully parameterized residual scalar-vector quantizer.
#[derive(Debug, Clone)]
pub struct QuantizerConfig {
    latent_dim: usize,
    pub sq_stages: Vec<SqParams>,
    pub ivq_stages: Vec<IvqParams>,
}

impl QuantizerConfig {
    pub fn new(latent_dim: usize, sq_stages: Vec<SqParams>, ivq_stages: Vec<IvqParams>) -> Result<Self> {
        if sq_stages.is_empty() && ivq_stages.is_empty() {
            return Err(CodecError::Config("quantizer needs at least one stage".into()));
        }
        for s in &sq_stages {
            if s.latent_dim() != latent_dim || s.up_proj.nrows() != latent_dim {
                return Err(CodecError::Config(
                    "scalar stage dimensions do not match the latent dimension".into(),
                ));
            }
        }
        for v in &ivq_stages {
            if v.latent_dim() != latent_dim || v.up_proj.nrows() != latent_dim {
                return Err(CodecError::Config(
                    "vector stage dimensions do not match the latent dimension".into(),
                ));
            }
        }
        Ok(Self {
            latent_dim,
            sq_stages,
            ivq_stages,
        })
    }

    /// Materialize projections and codebooks for a schedule, deterministically
    /// from a seed. Weights are uniform in `±1/sqrt(fan_in)`.
    pub fn init(schedule: &QuantizerSchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = schedule.latent_dim;
        let mut sq_stages = Vec::with_capacity(schedule.sq.len());
        for stage in &schedule.sq {
            let b = stage.levels.len();
            let down = uniform_matrix(&mut rng, b, d);
            let up = uniform_matrix(&mut rng, d, b);
            sq_stages.push(SqParams::new(stage.levels.clone(), down, up)?);
        }
        let mut ivq_stages = Vec::with_capacity(schedule.ivq.len());
        for stage in &schedule.ivq {
            let m = stage.code_dim;
            let down = uniform_matrix(&mut rng, m, d);
            let up = uniform_matrix(&mut rng, d, m);
            let codebook = uniform_matrix(&mut rng, stage.codebook_size, m);
            ivq_stages.push(IvqParams::new(down, up, codebook)?);
        }
        Self::new(d, sq_stages, ivq_stages)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Shape-only view of this quantizer.
    pub fn schedule(&self) -> QuantizerSchedule {
        QuantizerSchedule {
            latent_dim: self.latent_dim,
            sq: self
                .sq_stages
                .iter()
                .map(|s| SqSchedule {
                    levels: s.levels().to_vec(),
                })
                .collect(),
            ivq: self
                .ivq_stages
                .iter()
                .map(|v| IvqSchedule {
                    code_dim: v.code_dim(),
                    codebook_size: v.codebook_size(),
                })
                .collect(),
        }
    }

    /// Run all stages over a latent vector: scalar stages in order, vector
    /// stages after, each consuming the running residual.
    pub fn quantize(&self, z: &Array1<f64>) -> Result<QuantizeResult> {
        if z.len() != self.latent_dim {
            return Err(CodecError::Config(format!(
                "latent has dimension {}, expected {}",
                z.len(),
                self.latent_dim
            )));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(CodecError::Numeric("latent is not finite".into()));
        }
        let mut z_hat = Array1::zeros(self.latent_dim);
        let mut residual = z.clone();
        let mut stage_outputs = Vec::with_capacity(self.sq_stages.len() + self.ivq_stages.len());
        let mut residuals = Vec::with_capacity(stage_outputs.capacity());
        let mut sq_tokens = Vec::with_capacity(self.sq_stages.len());
        let mut ivq_tokens = Vec::with_capacity(self.ivq_stages.len());
        for stage in &self.sq_stages {
            let (s_hat, _, token) = stage.quantize(&residual)?;
            z_hat += &s_hat;
            residual -= &s_hat;
            sq_tokens.push(token);
            stage_outputs.push(s_hat);
            residuals.push(residual.clone());
        }
        for stage in &self.ivq_stages {
            let (v_hat, token) = stage.quantize(&residual)?;
            z_hat += &v_hat;
            residual -= &v_hat;
            ivq_tokens.push(token);
            stage_outputs.push(v_hat);
            residuals.push(residual.clone());
        }
        Ok(QuantizeResult {
            z_hat,
            tokens: TokenFrame {
                sq: sq_tokens,
                ivq: ivq_tokens,
            },
            stage_outputs,
            residuals,
        })
    }

    /// Reconstruct the latent from tokens; bit-identical to the encoder's
    /// `z_hat` because stage outputs come from the same lookups and are
    /// summed in the same order.
    pub fn dequantize(&self, tokens: &TokenFrame) -> Result<Array1<f64>> {
        self.dequantize_partial(tokens, self.sq_stages.len() + self.ivq_stages.len())
    }

    /// Reconstruct from the first `stages` stages only; later tokens are
    /// ignored. Used for coarse-to-refined comparisons.
    pub fn dequantize_partial(&self, tokens: &TokenFrame, stages: usize) -> Result<Array1<f64>> {
        tokens.validate(&self.schedule())?;
        let total = self.sq_stages.len() + self.ivq_stages.len();
        if stages > total {
            return Err(CodecError::Config(format!(
                "requested {stages} stages, quantizer has {total}"
            )));
        }
        let mut z_hat = Array1::zeros(self.latent_dim);
        for (i, stage) in self.sq_stages.iter().enumerate() {
            if i >= stages {
                return Ok(z_hat);
            }
            z_hat += &stage.dequantize(tokens.sq[i])?;
        }
        for (j, stage) in self.ivq_stages.iter().enumerate() {
            if self.sq_stages.len() + j >= stages {
                return Ok(z_hat);
            }
            z_hat += &stage.dequantize(tokens.ivq[j])?;
        }
        Ok(z_hat)
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}
