//! Causal encoder and decoder stacks.
//!
//! Encoder: input conv (bins -> hidden) -> 8 causal residual blocks ->
//! per-step linear -> strided causal conv (rate `R`) -> output conv
//! (hidden -> latent). The decoder mirrors it with the strided convolution
//! replaced by a causal transposed convolution.
//!
//! Latent frame `u` depends only on spectrum frames up to `(u+1)*R - 1`;
//! decoded frame `t` depends only on latent frames up to `floor(t/R)`.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CodecError, Result};
use crate::neural::block::{BlockCache, BlockGrads, Mcnx2Block};
use crate::neural::conv::{
    CausalConv1d, CausalConvTranspose1d, ChannelLinear, ConvCache, ConvGrads, ConvStreamState,
    ConvTransposeCache, ConvTransposeGrads, ConvTransposeStreamState, LinearCache, LinearGrads,
};

/// Network geometry; everything is config-exposed, defaults are desk-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecNetConfig {
    /// Spectrum bins per frame (the MDCT frame shift).
    pub bins: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    /// Down/upsampling rate between frame rate and latent rate.
    pub resample: usize,
    pub num_blocks: usize,
    /// Kernel of the input/output convolutions.
    pub io_kernel: usize,
    /// Depthwise kernel inside the residual blocks.
    pub dw_kernel: usize,
    /// Hidden expansion factor inside the residual blocks.
    pub expansion: usize,
    /// Resampling kernel = `resample_kernel_factor * resample`.
    pub resample_kernel_factor: usize,
    pub norm_eps: f64,
}

impl Default for CodecNetConfig {
    fn default() -> Self {
        Self {
            bins: 40,
            hidden: 64,
            latent_dim: 32,
            resample: 8,
            num_blocks: 8,
            io_kernel: 7,
            dw_kernel: 7,
            expansion: 3,
            resample_kernel_factor: 2,
            norm_eps: 1e-6,
        }
    }
}

impl CodecNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || self.hidden == 0 || self.latent_dim == 0 {
            return Err(CodecError::Config("network dimensions must be positive".into()));
        }
        if self.resample == 0 || self.io_kernel == 0 || self.dw_kernel == 0 {
            return Err(CodecError::Config("kernel and resample sizes must be positive".into()));
        }
        if self.resample_kernel_factor == 0 {
            return Err(CodecError::Config("resampling kernel factor must be positive".into()));
        }
        Ok(())
    }

    fn resample_kernel(&self) -> usize {
        self.resample_kernel_factor * self.resample
    }
}

fn init_uniform(rng: &mut ChaCha8Rng, weight: &mut Array2<f64>, fan_in: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    weight.map_inplace(|v| *v = rng.gen_range(-bound..bound));
}

fn init_block(block: &mut Mcnx2Block, rng: &mut ChaCha8Rng) {
    let k = block.dw.kernel_size;
    init_uniform(rng, &mut block.dw.weight, k);
    let c_in = block.expand.weight.ncols();
    init_uniform(rng, &mut block.expand.weight, c_in);
    let hidden = block.project.weight.ncols();
    init_uniform(rng, &mut block.project.weight, hidden);
    // Norm affine parameters and biases keep their identity defaults.
}

/// The causal encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub in_conv: CausalConv1d,
    pub blocks: Vec<Mcnx2Block>,
    pub linear: ChannelLinear,
    pub down: CausalConv1d,
    pub out_conv: CausalConv1d,
    cfg: CodecNetConfig,
}

pub struct EncoderCache {
    in_conv: ConvCache,
    blocks: Vec<BlockCache>,
    linear: LinearCache,
    down: ConvCache,
    out_conv: ConvCache,
}

impl Encoder {
    pub fn init(cfg: &CodecNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut in_conv = CausalConv1d::new(cfg.bins, cfg.hidden, cfg.io_kernel, 1, 1);
        init_uniform(rng, &mut in_conv.weight, cfg.bins * cfg.io_kernel);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for _ in 0..cfg.num_blocks {
            let mut block = Mcnx2Block::new(cfg.hidden, cfg.dw_kernel, cfg.expansion, cfg.norm_eps);
            init_block(&mut block, rng);
            blocks.push(block);
        }
        let mut linear = ChannelLinear::new(cfg.hidden, cfg.hidden);
        init_uniform(rng, &mut linear.weight, cfg.hidden);
        let mut down = CausalConv1d::new(cfg.hidden, cfg.hidden, cfg.resample_kernel(), cfg.resample, 1);
        init_uniform(rng, &mut down.weight, cfg.hidden * cfg.resample_kernel());
        let mut out_conv = CausalConv1d::new(cfg.hidden, cfg.latent_dim, cfg.io_kernel, 1, 1);
        init_uniform(rng, &mut out_conv.weight, cfg.hidden * cfg.io_kernel);
        Ok(Self {
            in_conv,
            blocks,
            linear,
            down,
            out_conv,
            cfg: cfg.clone(),
        })
    }

    /// Batch forward: spectrum frames `(bins, T)` to latents `(D, T/R)`.
    pub fn forward(&self, frames: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(frames)?.0)
    }

    pub fn forward_cached(&self, frames: &Array2<f64>) -> Result<(Array2<f64>, EncoderCache)> {
        if frames.ncols() % self.cfg.resample != 0 {
            return Err(CodecError::Config(format!(
                "encoder needs a multiple of {} frames, got {}",
                self.cfg.resample,
                frames.ncols()
            )));
        }
        let (mut h, in_conv) = self.in_conv.forward_cached(frames)?;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward_cached(&h);
            h = next;
            block_caches.push(cache);
        }
        let (h2, linear) = self.linear.forward_cached(&h);
        let (h3, down) = self.down.forward_cached(&h2)?;
        let (latents, out_conv) = self.out_conv.forward_cached(&h3)?;
        Ok((
            latents,
            EncoderCache {
                in_conv,
                blocks: block_caches,
                linear,
                down,
                out_conv,
            },
        ))
    }

    pub fn backward(&self, cache: &EncoderCache, d_latents: &Array2<f64>, grads: &mut EncoderGrads) -> Array2<f64> {
        let d = self.out_conv.backward(&cache.out_conv, d_latents, &mut grads.out_conv);
        let d = self.down.backward(&cache.down, &d, &mut grads.down);
        let mut d = self.linear.backward(&cache.linear, &d, &mut grads.linear);
        for ((block, bc), bg) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(&mut grads.blocks)
            .rev()
        {
            d = block.backward(bc, &d, bg);
        }
        self.in_conv.backward(&cache.in_conv, &d, &mut grads.in_conv)
    }

    pub fn stream_state(&self) -> EncoderStreamState {
        EncoderStreamState {
            in_conv: self.in_conv.stream_state(),
            blocks: self.blocks.iter().map(|b| b.stream_state()).collect(),
            down: self.down.stream_state(),
            out_conv: self.out_conv.stream_state(),
        }
    }

    /// Push a multiple of `R` frames, receive one latent column per group.
    /// Bit-identical to the batch forward on the same prefix.
    pub fn stream(&self, state: &mut EncoderStreamState, frames: &Array2<f64>) -> Result<Array2<f64>> {
        if frames.ncols() % self.cfg.resample != 0 {
            return Err(CodecError::Stream(format!(
                "encoder stream expects a multiple of {} frames, got {}",
                self.cfg.resample,
                frames.ncols()
            )));
        }
        let mut h = self.in_conv.stream(&mut state.in_conv, frames)?;
        for (block, bstate) in self.blocks.iter().zip(&mut state.blocks) {
            h = block.stream(bstate, &h)?;
        }
        let h = self.linear.forward(&h);
        let h = self.down.stream(&mut state.down, &h)?;
        self.out_conv.stream(&mut state.out_conv, &h)
    }

    /// Analytic left receptive field of one latent frame, in spectrum frames:
    /// the newest frame it reads is `(u+1)*R - 1`, the oldest is that minus
    /// this extent. The strided window ends at its group end, so each layer
    /// contributes exactly its kernel tail (scaled to frame rate for layers
    /// past the downsampling).
    pub fn left_receptive_frames(&self) -> usize {
        let pre = self.in_conv.context() + self.blocks.iter().map(|b| b.context()).sum::<usize>();
        let down = self.down.context();
        let out = self.out_conv.context() * self.cfg.resample;
        pre + down + out
    }

    pub fn config(&self) -> &CodecNetConfig {
        &self.cfg
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStreamState {
    in_conv: ConvStreamState,
    blocks: Vec<ConvStreamState>,
    down: ConvStreamState,
    out_conv: ConvStreamState,
}

impl EncoderStreamState {
    /// Total retained context columns; constant over the stream's life.
    pub fn context_len(&self) -> usize {
        self.in_conv.context_len()
            + self.blocks.iter().map(|b| b.context_len()).sum::<usize>()
            + self.down.context_len()
            + self.out_conv.context_len()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub in_conv: ConvGrads,
    pub blocks: Vec<BlockGrads>,
    pub linear: LinearGrads,
    pub down: ConvGrads,
    pub out_conv: ConvGrads,
}

impl EncoderGrads {
    pub fn zeros(encoder: &Encoder) -> Self {
        Self {
            in_conv: ConvGrads::zeros(&encoder.in_conv),
            blocks: encoder.blocks.iter().map(BlockGrads::zeros).collect(),
            linear: LinearGrads::zeros(&encoder.linear),
            down: ConvGrads::zeros(&encoder.down),
            out_conv: ConvGrads::zeros(&encoder.out_conv),
        }
    }
}

/// The causal decoder, mirroring the encoder.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub in_conv: CausalConv1d,
    pub up: CausalConvTranspose1d,
    pub linear: ChannelLinear,
    pub blocks: Vec<Mcnx2Block>,
    pub out_conv: CausalConv1d,
    cfg: CodecNetConfig,
}

pub struct DecoderCache {
    in_conv: ConvCache,
    up: ConvTransposeCache,
    linear: LinearCache,
    blocks: Vec<BlockCache>,
    out_conv: ConvCache,
}

impl Decoder {
    pub fn init(cfg: &CodecNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut in_conv = CausalConv1d::new(cfg.latent_dim, cfg.hidden, cfg.io_kernel, 1, 1);
        init_uniform(rng, &mut in_conv.weight, cfg.latent_dim * cfg.io_kernel);
        let mut up = CausalConvTranspose1d::new(cfg.hidden, cfg.hidden, cfg.resample_kernel(), cfg.resample);
        init_uniform(rng, &mut up.weight, cfg.hidden);
        let mut linear = ChannelLinear::new(cfg.hidden, cfg.hidden);
        init_uniform(rng, &mut linear.weight, cfg.hidden);
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for _ in 0..cfg.num_blocks {
            let mut block = Mcnx2Block::new(cfg.hidden, cfg.dw_kernel, cfg.expansion, cfg.norm_eps);
            init_block(&mut block, rng);
            blocks.push(block);
        }
        let mut out_conv = CausalConv1d::new(cfg.hidden, cfg.bins, cfg.io_kernel, 1, 1);
        init_uniform(rng, &mut out_conv.weight, cfg.hidden * cfg.io_kernel);
        Ok(Self {
            in_conv,
            up,
            linear,
            blocks,
            out_conv,
            cfg: cfg.clone(),
        })
    }

    /// Batch forward: latents `(D, U)` to spectrum frames `(bins, U*R)`.
    pub fn forward(&self, latents: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(latents)?.0)
    }

    pub fn forward_cached(&self, latents: &Array2<f64>) -> Result<(Array2<f64>, DecoderCache)> {
        let (h, in_conv) = self.in_conv.forward_cached(latents)?;
        let (h, up) = self.up.forward_cached(&h)?;
        let (mut h, linear) = self.linear.forward_cached(&h);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward_cached(&h);
            h = next;
            block_caches.push(cache);
        }
        let (frames, out_conv) = self.out_conv.forward_cached(&h)?;
        Ok((
            frames,
            DecoderCache {
                in_conv,
                up,
                linear,
                blocks: block_caches,
                out_conv,
            },
        ))
    }

    pub fn backward(&self, cache: &DecoderCache, d_frames: &Array2<f64>, grads: &mut DecoderGrads) -> Array2<f64> {
        let mut d = self.out_conv.backward(&cache.out_conv, d_frames, &mut grads.out_conv);
        for ((block, bc), bg) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(&mut grads.blocks)
            .rev()
        {
            d = block.backward(bc, &d, bg);
        }
        let d = self.linear.backward(&cache.linear, &d, &mut grads.linear);
        let d = self.up.backward(&cache.up, &d, &mut grads.up);
        self.in_conv.backward(&cache.in_conv, &d, &mut grads.in_conv)
    }

    pub fn stream_state(&self) -> DecoderStreamState {
        DecoderStreamState {
            in_conv: self.in_conv.stream_state(),
            up: self.up.stream_state(),
            blocks: self.blocks.iter().map(|b| b.stream_state()).collect(),
            out_conv: self.out_conv.stream_state(),
        }
    }

    /// Push latent columns, receive `R` spectrum frames per column.
    pub fn stream(&self, state: &mut DecoderStreamState, latents: &Array2<f64>) -> Result<Array2<f64>> {
        let h = self.in_conv.stream(&mut state.in_conv, latents)?;
        let h = self.up.stream(&mut state.up, &h)?;
        let mut h = self.linear.forward(&h);
        for (block, bstate) in self.blocks.iter().zip(&mut state.blocks) {
            h = block.stream(bstate, &h)?;
        }
        self.out_conv.stream(&mut state.out_conv, &h)
    }

    pub fn config(&self) -> &CodecNetConfig {
        &self.cfg
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStreamState {
    in_conv: ConvStreamState,
    up: ConvTransposeStreamState,
    blocks: Vec<ConvStreamState>,
    out_conv: ConvStreamState,
}

impl DecoderStreamState {
    pub fn context_len(&self) -> usize {
        self.in_conv.context_len()
            + self.up.context_len()
            + self.blocks.iter().map(|b| b.context_len()).sum::<usize>()
            + self.out_conv.context_len()
    }
}

#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub in_conv: ConvGrads,
    pub up: ConvTransposeGrads,
    pub linear: LinearGrads,
    pub blocks: Vec<BlockGrads>,
    pub out_conv: ConvGrads,
}

impl DecoderGrads {
    pub fn zeros(decoder: &Decoder) -> Self {
        Self {
            in_conv: ConvGrads::zeros(&decoder.in_conv),
            up: ConvTransposeGrads::zeros(&decoder.up),
            linear: LinearGrads::zeros(&decoder.linear),
            blocks: decoder.blocks.iter().map(BlockGrads::zeros).collect(),
            out_conv: ConvGrads::zeros(&decoder.out_conv),
        }
    }
}
