//! Desk-scale training: the assembled model, an Adam optimizer over a flat
//! parameter registry, and the training loop with codebook-health machinery.
//!
//! One step runs spectrum frames through encoder, quantizer and decoder,
//! takes `L = mse + commit_weight * commitment + balancing_weight *
//! balancing`, applies one Adam update, and folds token usage into the
//! per-codebook statistics. Every `reinit_window` steps, codevectors whose
//! running usage stayed below a fraction of the uniform share are
//! re-clustered into the window's feature reservoir.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::codebook::{self, UsageStats};
use crate::config::CodecConfig;
use crate::corpus::{self, CorpusConfig};
use crate::error::{CodecError, Result};
use crate::mdct::{AnalysisState, MdctConfig};
use crate::neural::checkpoint::{Checkpoint, Precision, TensorEntry};
use crate::neural::model::{Decoder, DecoderGrads, Encoder, EncoderGrads};
use crate::rsvq::train::{forward as rsvq_forward, AuxWeights, RsvqGrads};
use crate::rsvq::QuantizerConfig;

/// Encoder, decoder and quantizer with everything training needs.
#[derive(Clone)]
pub struct CodecModel {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub quantizer: QuantizerConfig,
    pub config: CodecConfig,
}

impl CodecModel {
    /// Deterministic initialization from a seed.
    pub fn init(config: &CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(&config.net, &mut rng)?;
        let decoder = Decoder::init(&config.net, &mut rng)?;
        let quantizer = QuantizerConfig::init(&config.schedule, seed.wrapping_add(1))?;
        Ok(Self {
            encoder,
            decoder,
            quantizer,
            config: config.clone(),
        })
    }

    /// Mutable views of every trainable tensor, in the canonical registry
    /// order shared with [`ModelGrads::slices`].
    pub fn param_slices(&mut self) -> Vec<&mut [f64]> {
        let CodecModel {
            encoder,
            decoder,
            quantizer,
            ..
        } = self;
        let mut params: Vec<&mut [f64]> = Vec::new();
        params.push(encoder.in_conv.weight.as_slice_mut().expect("standard layout"));
        params.push(encoder.in_conv.bias.as_slice_mut().expect("standard layout"));
        for block in &mut encoder.blocks {
            params.push(block.dw.weight.as_slice_mut().expect("standard layout"));
            params.push(block.dw.bias.as_slice_mut().expect("standard layout"));
            params.push(block.norm.gamma.as_slice_mut().expect("standard layout"));
            params.push(block.norm.beta.as_slice_mut().expect("standard layout"));
            params.push(block.expand.weight.as_slice_mut().expect("standard layout"));
            params.push(block.expand.bias.as_slice_mut().expect("standard layout"));
            params.push(block.grn.gamma.as_slice_mut().expect("standard layout"));
            params.push(block.grn.beta.as_slice_mut().expect("standard layout"));
            params.push(block.project.weight.as_slice_mut().expect("standard layout"));
            params.push(block.project.bias.as_slice_mut().expect("standard layout"));
        }
        params.push(encoder.linear.weight.as_slice_mut().expect("standard layout"));
        params.push(encoder.linear.bias.as_slice_mut().expect("standard layout"));
        params.push(encoder.down.weight.as_slice_mut().expect("standard layout"));
        params.push(encoder.down.bias.as_slice_mut().expect("standard layout"));
        params.push(encoder.out_conv.weight.as_slice_mut().expect("standard layout"));
        params.push(encoder.out_conv.bias.as_slice_mut().expect("standard layout"));

        params.push(decoder.in_conv.weight.as_slice_mut().expect("standard layout"));
        params.push(decoder.in_conv.bias.as_slice_mut().expect("standard layout"));
        params.push(decoder.up.weight.as_slice_mut().expect("standard layout"));
        params.push(decoder.up.bias.as_slice_mut().expect("standard layout"));
        params.push(decoder.linear.weight.as_slice_mut().expect("standard layout"));
        params.push(decoder.linear.bias.as_slice_mut().expect("standard layout"));
        for block in &mut decoder.blocks {
            params.push(block.dw.weight.as_slice_mut().expect("standard layout"));
            params.push(block.dw.bias.as_slice_mut().expect("standard layout"));
            params.push(block.norm.gamma.as_slice_mut().expect("standard layout"));
            params.push(block.norm.beta.as_slice_mut().expect("standard layout"));
            params.push(block.expand.weight.as_slice_mut().expect("standard layout"));
            params.push(block.expand.bias.as_slice_mut().expect("standard layout"));
            params.push(block.grn.gamma.as_slice_mut().expect("standard layout"));
            params.push(block.grn.beta.as_slice_mut().expect("standard layout"));
            params.push(block.project.weight.as_slice_mut().expect("standard layout"));
            params.push(block.project.bias.as_slice_mut().expect("standard layout"));
        }
        params.push(decoder.out_conv.weight.as_slice_mut().expect("standard layout"));
        params.push(decoder.out_conv.bias.as_slice_mut().expect("standard layout"));

        for stage in &mut quantizer.sq_stages {
            params.push(stage.down_proj.as_slice_mut().expect("standard layout"));
            params.push(stage.up_proj.as_slice_mut().expect("standard layout"));
        }
        for stage in &mut quantizer.ivq_stages {
            params.push(stage.down_proj.as_slice_mut().expect("standard layout"));
            params.push(stage.up_proj.as_slice_mut().expect("standard layout"));
            params.push(stage.codebook.as_slice_mut().expect("standard layout"));
        }
        params
    }

    /// Registry index of the codebook tensor of vector stage `j`, for
    /// optimizer state resets after reinitialization.
    pub fn codebook_tensor_index(&self, j: usize) -> usize {
        let per_block = 10;
        let encoder_count = 2 + per_block * self.encoder.blocks.len() + 2 + 2 + 2;
        let decoder_count = 2 + 2 + 2 + per_block * self.decoder.blocks.len() + 2;
        encoder_count + decoder_count + 2 * self.quantizer.sq_stages.len() + 3 * j + 2
    }

    /// Named tensors for checkpointing, same order as the registry.
    pub fn named_tensors(&self) -> Vec<TensorEntry> {
        let mut out = Vec::new();
        let push2 = |name: String, a: &Array2<f64>| TensorEntry {
            name,
            dims: vec![a.nrows(), a.ncols()],
            data: a.iter().cloned().collect(),
        };
        let push1 = |name: String, a: &Array1<f64>| TensorEntry {
            name,
            dims: vec![a.len()],
            data: a.iter().cloned().collect(),
        };
        let block_tensors = |prefix: &str, block: &crate::neural::block::Mcnx2Block, out: &mut Vec<TensorEntry>| {
            out.push(TensorEntry {
                name: format!("{prefix}.dw.weight"),
                dims: vec![block.dw.weight.nrows(), block.dw.weight.ncols()],
                data: block.dw.weight.iter().cloned().collect(),
            });
            out.push(TensorEntry {
                name: format!("{prefix}.dw.bias"),
                dims: vec![block.dw.bias.len()],
                data: block.dw.bias.iter().cloned().collect(),
            });
            out.push(TensorEntry {
                name: format!("{prefix}.norm.gamma"),
                dims: vec![block.norm.gamma.len()],
                data: block.norm.gamma.iter().cloned().collect(),
            });
            out.push(TensorEntry {
                name: format!("{prefix}.norm.beta"),
                dims: vec![block.norm.beta.len()],
                data: block.norm.beta.iter().cloned().collect(),
            });
            out.push(TensorEntry {
                name: format!("{prefix}.expand.weight"),
                dims: vec![block.expand.weight.nrows(), block.expand.weight.ncols()],
                data: block.expand.weight.iter().cloned().collect(),
            });
            out.push(TensorEntry {
                name: format!("{prefix}.expand.bias"),
                dims: vec![block.expand.bias.len()],
                data: block.expand.bias.iter().cloned().collect(),
            });
            out.push(TensorEntry {
                name: format!("{prefix}.grn.gamma"),
                dims: vec![block.grn.gamma.len()],
                data: block.grn.gamma.iter().cloned().collect(),
            });
            out.push(TensorEntry {
                name: format!("{prefix}.grn.beta"),
                dims: vec![block.grn.beta.len()],
                data: block.grn.beta.iter().cloned().collect(),
            });
            out.push(TensorEntry {
                name: format!("{prefix}.project.weight"),
                dims: vec![block.project.weight.nrows(), block.project.weight.ncols()],
                data: block.project.weight.iter().cloned().collect(),
            });
            out.push(TensorEntry {
                name: format!("{prefix}.project.bias"),
                dims: vec![block.project.bias.len()],
                data: block.project.bias.iter().cloned().collect(),
            });
        };
        out.push(push2("encoder.in_conv.weight".into(), &self.encoder.in_conv.weight));
        out.push(push1("encoder.in_conv.bias".into(), &self.encoder.in_conv.bias));
        for (i, block) in self.encoder.blocks.iter().enumerate() {
            block_tensors(&format!("encoder.block{i}"), block, &mut out);
        }
        out.push(push2("encoder.linear.weight".into(), &self.encoder.linear.weight));
        out.push(push1("encoder.linear.bias".into(), &self.encoder.linear.bias));
        out.push(push2("encoder.down.weight".into(), &self.encoder.down.weight));
        out.push(push1("encoder.down.bias".into(), &self.encoder.down.bias));
        out.push(push2("encoder.out_conv.weight".into(), &self.encoder.out_conv.weight));
        out.push(push1("encoder.out_conv.bias".into(), &self.encoder.out_conv.bias));

        out.push(push2("decoder.in_conv.weight".into(), &self.decoder.in_conv.weight));
        out.push(push1("decoder.in_conv.bias".into(), &self.decoder.in_conv.bias));
        out.push(push2("decoder.up.weight".into(), &self.decoder.up.weight));
        out.push(push1("decoder.up.bias".into(), &self.decoder.up.bias));
        out.push(push2("decoder.linear.weight".into(), &self.decoder.linear.weight));
        out.push(push1("decoder.linear.bias".into(), &self.decoder.linear.bias));
        for (i, block) in self.decoder.blocks.iter().enumerate() {
            block_tensors(&format!("decoder.block{i}"), block, &mut out);
        }
        out.push(push2("decoder.out_conv.weight".into(), &self.decoder.out_conv.weight));
        out.push(push1("decoder.out_conv.bias".into(), &self.decoder.out_conv.bias));

        for (i, stage) in self.quantizer.sq_stages.iter().enumerate() {
            out.push(push2(format!("quantizer.sq{i}.down"), &stage.down_proj));
            out.push(push2(format!("quantizer.sq{i}.up"), &stage.up_proj));
        }
        for (j, stage) in self.quantizer.ivq_stages.iter().enumerate() {
            out.push(push2(format!("quantizer.ivq{j}.down"), &stage.down_proj));
            out.push(push2(format!("quantizer.ivq{j}.up"), &stage.up_proj));
            out.push(push2(format!("quantizer.ivq{j}.codebook"), &stage.codebook));
        }
        out
    }

    /// Serialize into the checkpoint container.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_echo: self.config.to_toml(),
            tensors: self.named_tensors(),
        }
    }

    pub fn save<W: std::io::Write>(&self, w: &mut W, precision: Precision) -> Result<()> {
        self.to_checkpoint().write_to(w, precision)
    }

    pub fn save_file<P: AsRef<std::path::Path>>(&self, path: P, precision: Precision) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        self.save(&mut file, precision)
    }

    /// Rebuild a model from a checkpoint: the config echo fixes the
    /// geometry, then every named tensor overwrites the seed-initialized
    /// parameters.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = CodecConfig::from_toml(&ckpt.config_echo)
            .map_err(|e| CodecError::Corruption(format!("bad config echo in checkpoint: {e}")))?;
        let mut model = Self::init(&config, 0)?;
        let expected = model.named_tensors();
        for entry in &expected {
            let stored = ckpt.tensor(&entry.name)?;
            if stored.dims != entry.dims {
                return Err(CodecError::Corruption(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    entry.name, stored.dims, entry.dims
                )));
            }
        }
        {
            let slices = model.param_slices();
            let mut cursor = 0usize;
            let mut stored_values: Vec<Vec<f64>> = Vec::new();
            for entry in &expected {
                stored_values.push(ckpt.tensor(&entry.name)?.data.clone());
            }
            for (slice, values) in slices.into_iter().zip(stored_values) {
                if slice.len() != values.len() {
                    return Err(CodecError::Corruption(format!(
                        "tensor length mismatch at registry position {cursor}"
                    )));
                }
                slice.copy_from_slice(&values);
                cursor += 1;
            }
        }
        Ok(model)
    }

    pub fn load_file<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let ckpt = Checkpoint::read_from(&mut file)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Gradients of every registered tensor, in registry order.
pub struct ModelGrads {
    pub encoder: EncoderGrads,
    pub decoder: DecoderGrads,
    pub rsvq: RsvqGrads,
}

impl ModelGrads {
    pub fn zeros(model: &CodecModel) -> Self {
        Self {
            encoder: EncoderGrads::zeros(&model.encoder),
            decoder: DecoderGrads::zeros(&model.decoder),
            rsvq: RsvqGrads::zeros(&model.quantizer),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut grads: Vec<&[f64]> = Vec::new();
        let enc = &self.encoder;
        grads.push(enc.in_conv.weight.as_slice().expect("standard layout"));
        grads.push(enc.in_conv.bias.as_slice().expect("standard layout"));
        for block in &enc.blocks {
            grads.push(block.dw.weight.as_slice().expect("standard layout"));
            grads.push(block.dw.bias.as_slice().expect("standard layout"));
            grads.push(block.norm.gamma.as_slice().expect("standard layout"));
            grads.push(block.norm.beta.as_slice().expect("standard layout"));
            grads.push(block.expand.weight.as_slice().expect("standard layout"));
            grads.push(block.expand.bias.as_slice().expect("standard layout"));
            grads.push(block.grn.gamma.as_slice().expect("standard layout"));
            grads.push(block.grn.beta.as_slice().expect("standard layout"));
            grads.push(block.project.weight.as_slice().expect("standard layout"));
            grads.push(block.project.bias.as_slice().expect("standard layout"));
        }
        grads.push(enc.linear.weight.as_slice().expect("standard layout"));
        grads.push(enc.linear.bias.as_slice().expect("standard layout"));
        grads.push(enc.down.weight.as_slice().expect("standard layout"));
        grads.push(enc.down.bias.as_slice().expect("standard layout"));
        grads.push(enc.out_conv.weight.as_slice().expect("standard layout"));
        grads.push(enc.out_conv.bias.as_slice().expect("standard layout"));

        let dec = &self.decoder;
        grads.push(dec.in_conv.weight.as_slice().expect("standard layout"));
        grads.push(dec.in_conv.bias.as_slice().expect("standard layout"));
        grads.push(dec.up.weight.as_slice().expect("standard layout"));
        grads.push(dec.up.bias.as_slice().expect("standard layout"));
        grads.push(dec.linear.weight.as_slice().expect("standard layout"));
        grads.push(dec.linear.bias.as_slice().expect("standard layout"));
        for block in &dec.blocks {
            grads.push(block.dw.weight.as_slice().expect("standard layout"));
            grads.push(block.dw.bias.as_slice().expect("standard layout"));
            grads.push(block.norm.gamma.as_slice().expect("standard layout"));
            grads.push(block.norm.beta.as_slice().expect("standard layout"));
            grads.push(block.expand.weight.as_slice().expect("standard layout"));
            grads.push(block.expand.bias.as_slice().expect("standard layout"));
            grads.push(block.grn.gamma.as_slice().expect("standard layout"));
            grads.push(block.grn.beta.as_slice().expect("standard layout"));
            grads.push(block.project.weight.as_slice().expect("standard layout"));
            grads.push(block.project.bias.as_slice().expect("standard layout"));
        }
        grads.push(dec.out_conv.weight.as_slice().expect("standard layout"));
        grads.push(dec.out_conv.bias.as_slice().expect("standard layout"));

        for i in 0..self.rsvq.sq_down.len() {
            grads.push(self.rsvq.sq_down[i].as_slice().expect("standard layout"));
            grads.push(self.rsvq.sq_up[i].as_slice().expect("standard layout"));
        }
        for j in 0..self.rsvq.ivq_down.len() {
            grads.push(self.rsvq.ivq_down[j].as_slice().expect("standard layout"));
            grads.push(self.rsvq.ivq_up[j].as_slice().expect("standard layout"));
            grads.push(self.rsvq.codebooks[j].as_slice().expect("standard layout"));
        }
        grads
    }
}

/// Adam with bias correction; per-tensor moment buffers in registry order.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "registry order mismatch");
        if self.moments.is_empty() {
            self.moments = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let correction1 = 1.0 - self.beta1.powf(t);
        let correction2 = 1.0 - self.beta2.powf(t);
        for ((param, grad), (m, v)) in params.into_iter().zip(grads).zip(&mut self.moments) {
            assert_eq!(param.len(), grad.len());
            for i in 0..param.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                param[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Clear the moment buffers of specific rows of a matrix-shaped tensor;
    /// used when codevectors are forcibly reinitialized.
    pub fn reset_rows(&mut self, tensor_index: usize, row_width: usize, rows: &[usize]) {
        if let Some((m, v)) = self.moments.get_mut(tensor_index) {
            for &row in rows {
                let start = row * row_width;
                for i in start..start + row_width {
                    if i < m.len() {
                        m[i] = 0.0;
                        v[i] = 0.0;
                    }
                }
            }
        }
    }
}

/// Knobs of the toy training loop.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Outer weight of the commitment pair.
    pub commitment_weight: f64,
    /// Encoder-half weight inside the commitment pair.
    pub commitment_beta: f64,
    pub balancing_weight: f64,
    /// Dead-code reinitialization by clustering.
    pub clustering: bool,
    /// Balancing loss on the vector stages.
    pub balancing: bool,
    /// Steps per reinitialization / logging window.
    pub reinit_window: usize,
    /// Dead threshold as a fraction of the uniform usage share.
    pub dead_fraction: f64,
    pub ema_decay: f64,
    /// Seconds of audio per step (cropped from corpus clips).
    pub crop_seconds: f64,
    /// Feature reservoir capacity per vector stage.
    pub feature_reservoir: usize,
    pub corpus: CorpusConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            steps: 2000,
            learning_rate: 2e-4,
            commitment_weight: 1.0,
            commitment_beta: 0.25,
            balancing_weight: 1.0,
            clustering: true,
            balancing: true,
            reinit_window: 100,
            dead_fraction: 0.01,
            ema_decay: 0.99,
            crop_seconds: 1.0,
            feature_reservoir: 4096,
            corpus: CorpusConfig::default(),
        }
    }
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepLosses {
    pub total: f64,
    pub mse: f64,
    pub commitment: f64,
    pub balancing: f64,
}

/// One structured record per logging window.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub step: usize,
    pub mse: f64,
    pub commitment: f64,
    pub balancing: f64,
    /// Cross-entropy of the running usage posterior per vector stage.
    pub codebook_balance: Vec<f64>,
    /// CUR per vector stage over the window token log.
    pub cur: Vec<f64>,
    /// Empirical entropy in bits per stage (scalar stages first).
    pub entropy_bits: Vec<f64>,
    /// Bitrate efficiency over all stages.
    pub be: f64,
    /// Codevectors reinitialized at this window boundary, per vector stage.
    pub reinitialized: Vec<usize>,
}

struct Reservoir {
    items: Vec<Vec<f64>>,
    dim: usize,
    capacity: usize,
    seen: usize,
    rng: ChaCha8Rng,
}

impl Reservoir {
    fn new(dim: usize, capacity: usize, seed: u64) -> Self {
        Self {
            items: Vec::new(),
            dim,
            capacity,
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, feature: &[f64]) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(feature.to_vec());
        } else {
            let slot = self.rng.gen_range(0..self.seen);
            if slot < self.capacity {
                self.items[slot].copy_from_slice(feature);
            }
        }
    }

    fn matrix(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.items.len(), self.dim));
        for (i, item) in self.items.iter().enumerate() {
            for (j, &v) in item.iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }

    fn clear(&mut self) {
        self.items.clear();
        self.seen = 0;
    }
}

/// The training loop.
pub struct Trainer {
    pub model: CodecModel,
    pub cfg: TrainerConfig,
    mdct: MdctConfig,
    optimizer: Adam,
    pub usage: Vec<UsageStats>,
    window_sq_tokens: Vec<Vec<u32>>,
    window_ivq_tokens: Vec<Vec<u32>>,
    reservoirs: Vec<Reservoir>,
    crop_rng: ChaCha8Rng,
    clips: Vec<Vec<f64>>,
    step_index: usize,
    pub log: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(codec: &CodecConfig, cfg: TrainerConfig) -> Result<Self> {
        if cfg.corpus.sample_rate != codec.sample_rate {
            return Err(CodecError::Config(format!(
                "corpus sample rate {} does not match codec rate {}",
                cfg.corpus.sample_rate, codec.sample_rate
            )));
        }
        let model = CodecModel::init(codec, cfg.seed)?;
        let mdct = codec.mdct()?;
        let usage = model
            .quantizer
            .ivq_stages
            .iter()
            .map(|s| UsageStats::new(s.codebook_size(), cfg.ema_decay))
            .collect::<Result<Vec<_>>>()?;
        let reservoirs = model
            .quantizer
            .ivq_stages
            .iter()
            .enumerate()
            .map(|(j, s)| Reservoir::new(s.code_dim(), cfg.feature_reservoir, cfg.seed ^ (0xBEEF + j as u64)))
            .collect();
        let clips = corpus::generate(&cfg.corpus);
        let window_sq = vec![Vec::new(); model.quantizer.sq_stages.len()];
        let window_ivq = vec![Vec::new(); model.quantizer.ivq_stages.len()];
        Ok(Self {
            optimizer: Adam::new(cfg.learning_rate),
            crop_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0FFEE),
            usage,
            window_sq_tokens: window_sq,
            window_ivq_tokens: window_ivq,
            reservoirs,
            clips,
            step_index: 0,
            log: Vec::new(),
            mdct,
            model,
            cfg,
        })
    }

    /// Spectrum frames of a signal whose length is a multiple of the group
    /// size, as a `(bins, T)` matrix.
    pub fn frames_matrix(&self, samples: &[f64]) -> Result<Array2<f64>> {
        frames_matrix(samples, &self.mdct)
    }

    fn aux_weights(&self) -> AuxWeights {
        AuxWeights {
            commit: self.cfg.commitment_weight,
            beta: self.cfg.commitment_beta,
            balancing: if self.cfg.balancing {
                self.cfg.balancing_weight
            } else {
                0.0
            },
        }
    }

    /// One optimization step on a batch of waveforms.
    pub fn train_step(&mut self, batch: &[Vec<f64>]) -> Result<StepLosses> {
        let mut grads = ModelGrads::zeros(&self.model);
        let mut mse_total = 0.0;
        let mut commit_total = 0.0;
        let mut balancing_total = 0.0;
        for samples in batch {
            let frames = self.frames_matrix(samples)?;
            let (latents, enc_cache) = self.model.encoder.forward_cached(&frames)?;
            let fwd = rsvq_forward(&self.model.quantizer, &latents, self.cfg.balancing)?;
            let (decoded, dec_cache) = self.model.decoder.forward_cached(&fwd.z_hat)?;
            let count = decoded.len() as f64;
            let diff = &decoded - &frames;
            let mse = diff.iter().map(|d| d * d).sum::<f64>() / count;
            let commitment = fwd.commitment_value(self.cfg.commitment_beta);
            let balancing = if self.cfg.balancing { fwd.balancing_value() } else { 0.0 };
            mse_total += mse;
            commit_total += commitment;
            balancing_total += balancing;
            let d_decoded = diff.mapv(|d| 2.0 * d / count);
            let d_z_hat = self.model.decoder.backward(&dec_cache, &d_decoded, &mut grads.decoder);
            let rsvq_back = fwd.backward(&self.model.quantizer, &d_z_hat, &self.aux_weights());
            accumulate_rsvq(&mut grads.rsvq, &rsvq_back.grads);
            self.model
                .encoder
                .backward(&enc_cache, &rsvq_back.d_latent, &mut grads.encoder);
            // Usage statistics and window logs.
            for (j, log) in fwd.ivq_token_logs().into_iter().enumerate() {
                self.usage[j].update(&log)?;
                self.window_ivq_tokens[j].extend_from_slice(&log);
            }
            for (i, log) in fwd.sq_token_logs().into_iter().enumerate() {
                self.window_sq_tokens[i].extend_from_slice(&log);
            }
            for (j, features) in fwd.ivq_features().iter().enumerate() {
                for t in 0..features.ncols() {
                    let column: Vec<f64> = features.column(t).iter().cloned().collect();
                    self.reservoirs[j].push(&column);
                }
            }
        }
        let n = batch.len().max(1) as f64;
        let losses = StepLosses {
            total: mse_total / n
                + self.cfg.commitment_weight * commit_total / n
                + self.aux_weights().balancing * balancing_total / n,
            mse: mse_total / n,
            commitment: commit_total / n,
            balancing: balancing_total / n,
        };
        if !losses.total.is_finite() {
            return Err(CodecError::Training(format!(
                "non-finite loss at step {}: mse = {}, commitment = {}, balancing = {}",
                self.step_index, losses.mse, losses.commitment, losses.balancing
            )));
        }
        self.optimizer.step(self.model.param_slices(), grads.slices());
        self.step_index += 1;
        if self.step_index % self.cfg.reinit_window == 0 {
            self.close_window(losses)?;
        }
        Ok(losses)
    }

    /// Window boundary: record an epoch, then reinitialize dead codes.
    fn close_window(&mut self, losses: StepLosses) -> Result<()> {
        let mut cur = Vec::new();
        let mut entropy_bits = Vec::new();
        let mut capacities = Vec::new();
        let mut logs: Vec<Vec<u32>> = Vec::new();
        for (i, log) in self.window_sq_tokens.iter().enumerate() {
            entropy_bits.push(codebook::empirical_entropy_bits(log).unwrap_or(0.0));
            capacities.push(self.model.quantizer.sq_stages[i].capacity());
            logs.push(log.clone());
        }
        for (j, log) in self.window_ivq_tokens.iter().enumerate() {
            entropy_bits.push(codebook::empirical_entropy_bits(log).unwrap_or(0.0));
            capacities.push(self.model.quantizer.ivq_stages[j].codebook_size() as u64);
            logs.push(log.clone());
            cur.push(codebook::cur(&self.usage[j], log).unwrap_or(0.0));
        }
        let be = codebook::bitrate_efficiency(&logs, &capacities).unwrap_or(0.0);
        let mut reinitialized = vec![0usize; self.model.quantizer.ivq_stages.len()];
        if self.cfg.clustering {
            for j in 0..self.model.quantizer.ivq_stages.len() {
                let stage = &mut self.model.quantizer.ivq_stages[j];
                let threshold = self.cfg.dead_fraction * self.usage[j].total() / stage.codebook_size() as f64;
                let features = self.reservoirs[j].matrix();
                if features.nrows() == 0 {
                    continue;
                }
                let seed = self.cfg.seed ^ ((self.step_index as u64) << 8) ^ j as u64;
                let replaced_rows: Vec<usize> = stage_dead_rows(&self.usage[j], threshold);
                let count = codebook::reinit_dead_codes(
                    &mut stage.codebook,
                    &self.usage[j],
                    &features,
                    threshold,
                    seed,
                )?;
                debug_assert_eq!(count, replaced_rows.len());
                if count > 0 {
                    let width = stage.code_dim();
                    let index = self.model.codebook_tensor_index(j);
                    self.optimizer.reset_rows(index, width, &replaced_rows);
                }
                reinitialized[j] = count;
            }
        }
        self.log.push(EpochRecord {
            step: self.step_index,
            mse: losses.mse,
            commitment: losses.commitment,
            balancing: losses.balancing,
            codebook_balance: self.usage.iter().map(codebook::balancing_loss).collect(),
            cur,
            entropy_bits,
            be,
            reinitialized,
        });
        for log in &mut self.window_sq_tokens {
            log.clear();
        }
        for log in &mut self.window_ivq_tokens {
            log.clear();
        }
        for reservoir in &mut self.reservoirs {
            reservoir.clear();
        }
        Ok(())
    }

    /// Deterministic crop of the corpus clip for a step.
    fn crop_for_step(&mut self, step: usize) -> Vec<f64> {
        let clip = &self.clips[step % self.clips.len()];
        let group = self.model.config.group_samples();
        let crop_len = ((self.cfg.crop_seconds * self.model.config.sample_rate as f64) as usize / group).max(1) * group;
        if crop_len >= clip.len() {
            return clip.clone();
        }
        let offset = self.crop_rng.gen_range(0..=(clip.len() - crop_len));
        clip[offset..offset + crop_len].to_vec()
    }

    /// Run the configured number of steps; returns the per-step losses.
    pub fn train(&mut self) -> Result<Vec<StepLosses>> {
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for step in 0..self.cfg.steps {
            let crop = self.crop_for_step(step);
            losses.push(self.train_step(&[crop])?);
        }
        Ok(losses)
    }

    pub fn steps_done(&self) -> usize {
        self.step_index
    }
}

fn stage_dead_rows(stats: &UsageStats, threshold: f64) -> Vec<usize> {
    stats
        .counts()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c < threshold)
        .map(|(k, _)| k)
        .collect()
}

fn accumulate_rsvq(into: &mut RsvqGrads, from: &RsvqGrads) {
    for (a, b) in into.sq_down.iter_mut().zip(&from.sq_down) {
        *a += b;
    }
    for (a, b) in into.sq_up.iter_mut().zip(&from.sq_up) {
        *a += b;
    }
    for (a, b) in into.ivq_down.iter_mut().zip(&from.ivq_down) {
        *a += b;
    }
    for (a, b) in into.ivq_up.iter_mut().zip(&from.ivq_up) {
        *a += b;
    }
    for (a, b) in into.codebooks.iter_mut().zip(&from.codebooks) {
        *a += b;
    }
}

/// Spectrum frames of a signal as a `(bins, T)` matrix; the signal length
/// must be a multiple of the frame shift.
pub fn frames_matrix(samples: &[f64], mdct: &MdctConfig) -> Result<Array2<f64>> {
    let ws = mdct.frame_shift();
    if samples.len() % ws != 0 {
        return Err(CodecError::Config(format!(
            "signal length {} is not a multiple of the frame shift {ws}",
            samples.len()
        )));
    }
    let t = samples.len() / ws;
    let mut out = Array2::zeros((ws, t));
    let mut state = AnalysisState::new(mdct);
    for (i, chunk) in samples.chunks(ws).enumerate() {
        let frame = state.push(chunk, mdct)?;
        for (k, &c) in frame.coefficients.iter().enumerate() {
            out[[k, i]] = c;
        }
    }
    Ok(out)
}

/// Token logs over a set of clips with a frozen model: scalar stage logs
/// first, then vector stage logs.
pub fn token_logs_on_clips(
    model: &CodecModel,
    mdct: &MdctConfig,
    clips: &[Vec<f64>],
) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
    let mut sq_logs = vec![Vec::new(); model.quantizer.sq_stages.len()];
    let mut ivq_logs = vec![Vec::new(); model.quantizer.ivq_stages.len()];
    for clip in clips {
        let group = model.config.group_samples();
        let usable = clip.len() / group * group;
        let frames = frames_matrix(&clip[..usable], mdct)?;
        let latents = model.encoder.forward(&frames)?;
        let fwd = rsvq_forward(&model.quantizer, &latents, false)?;
        for (i, log) in fwd.sq_token_logs().into_iter().enumerate() {
            sq_logs[i].extend_from_slice(&log);
        }
        for (j, log) in fwd.ivq_token_logs().into_iter().enumerate() {
            ivq_logs[j].extend_from_slice(&log);
        }
    }
    Ok((sq_logs, ivq_logs))
}
