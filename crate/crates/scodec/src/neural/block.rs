//! The causal residual block: depthwise causal convolution, per-step
//! LayerNorm, pointwise expansion, GELU, per-step global response
//! normalization, pointwise projection, residual add.
//!
//! All normalization statistics are taken over channels at each time step
//! separately; nothing aggregates over time, which is what keeps the block
//! streamable with only the depthwise convolution carrying state.

use ndarray::{Array1, Array2};

use crate::error::Result;
use crate::neural::conv::{
    ChannelLinear, ConvStreamState, DepthwiseCache, DepthwiseCausalConv, DepthwiseGrads, LinearCache,
    LinearGrads,
};

/// Per-time-step layer normalization over channels.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(channels: usize, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            eps,
        }
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let c = x.nrows();
        let t_len = x.ncols();
        let mut y = Array2::zeros((c, t_len));
        let mut normalized = Array2::zeros((c, t_len));
        let mut inv_std = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut mean = 0.0;
            for i in 0..c {
                mean += x[[i, t]];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for i in 0..c {
                let d = x[[i, t]] - mean;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std.push(inv);
            for i in 0..c {
                let n = (x[[i, t]] - mean) * inv;
                normalized[[i, t]] = n;
                y[[i, t]] = self.gamma[i] * n + self.beta[i];
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, d_out: &Array2<f64>, grads: &mut LayerNormGrads) -> Array2<f64> {
        let c = d_out.nrows();
        let t_len = d_out.ncols();
        let mut d_x = Array2::zeros((c, t_len));
        for t in 0..t_len {
            let inv = cache.inv_std[t];
            let mut sum_dn = 0.0;
            let mut sum_dn_n = 0.0;
            for i in 0..c {
                let dn = d_out[[i, t]] * self.gamma[i];
                sum_dn += dn;
                sum_dn_n += dn * cache.normalized[[i, t]];
                grads.gamma[i] += d_out[[i, t]] * cache.normalized[[i, t]];
                grads.beta[i] += d_out[[i, t]];
            }
            for i in 0..c {
                let dn = d_out[[i, t]] * self.gamma[i];
                d_x[[i, t]] = inv
                    * (dn - sum_dn / c as f64 - cache.normalized[[i, t]] * sum_dn_n / c as f64);
            }
        }
        d_x
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormGrads {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNormGrads {
    pub fn zeros(layer: &LayerNorm) -> Self {
        Self {
            gamma: Array1::zeros(layer.gamma.len()),
            beta: Array1::zeros(layer.beta.len()),
        }
    }
}

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub struct GeluCache {
    input: Array2<f64>,
}

pub fn gelu_forward_cached(x: &Array2<f64>) -> (Array2<f64>, GeluCache) {
    (x.mapv(gelu), GeluCache { input: x.clone() })
}

pub fn gelu_backward(cache: &GeluCache, d_out: &Array2<f64>) -> Array2<f64> {
    let mut d_x = cache.input.mapv(gelu_prime);
    d_x *= d_out;
    d_x
}

/// Per-time-step global response normalization: each channel is scaled by
/// its magnitude relative to the mean channel magnitude at that step,
/// `y = x + gamma * x * (|x| / (mean|x| + eps)) + beta`.
#[derive(Debug, Clone)]
pub struct Grn {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
}

pub struct GrnCache {
    input: Array2<f64>,
    mean_abs: Vec<f64>,
}

impl Grn {
    pub fn new(channels: usize, eps: f64) -> Self {
        // Zero gamma/beta start the block as a pure residual branch.
        Self {
            gamma: Array1::zeros(channels),
            beta: Array1::zeros(channels),
            eps,
        }
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, GrnCache) {
        let c = x.nrows();
        let t_len = x.ncols();
        let mut y = Array2::zeros((c, t_len));
        let mut mean_abs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut m = 0.0;
            for i in 0..c {
                m += x[[i, t]].abs();
            }
            m /= c as f64;
            mean_abs.push(m);
            for i in 0..c {
                let n = x[[i, t]].abs() / (m + self.eps);
                y[[i, t]] = x[[i, t]] + self.gamma[i] * x[[i, t]] * n + self.beta[i];
            }
        }
        (
            y,
            GrnCache {
                input: x.clone(),
                mean_abs,
            },
        )
    }

    pub fn backward(&self, cache: &GrnCache, d_out: &Array2<f64>, grads: &mut GrnGrads) -> Array2<f64> {
        let c = cache.input.nrows();
        let t_len = cache.input.ncols();
        let mut d_x = Array2::zeros((c, t_len));
        for t in 0..t_len {
            let m = cache.mean_abs[t] + self.eps;
            // sum_i g_i * gamma_i * x_i * |x_i| feeds the mean-term gradient.
            let mut weighted = 0.0;
            for i in 0..c {
                let x = cache.input[[i, t]];
                weighted += d_out[[i, t]] * self.gamma[i] * x * x.abs();
            }
            for i in 0..c {
                let x = cache.input[[i, t]];
                let n = x.abs() / m;
                grads.gamma[i] += d_out[[i, t]] * x * n;
                grads.beta[i] += d_out[[i, t]];
                let sign = if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                d_x[[i, t]] = d_out[[i, t]] * (1.0 + self.gamma[i] * n)
                    + sign
                        * (self.gamma[i] * x * d_out[[i, t]] * m - weighted / c as f64)
                        / (m * m);
            }
        }
        d_x
    }
}

#[derive(Debug, Clone)]
pub struct GrnGrads {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl GrnGrads {
    pub fn zeros(layer: &Grn) -> Self {
        Self {
            gamma: Array1::zeros(layer.gamma.len()),
            beta: Array1::zeros(layer.beta.len()),
        }
    }
}

/// One causal residual block.
#[derive(Debug, Clone)]
pub struct Mcnx2Block {
    pub dw: DepthwiseCausalConv,
    pub norm: LayerNorm,
    pub expand: ChannelLinear,
    pub grn: Grn,
    pub project: ChannelLinear,
}

pub struct BlockCache {
    dw: DepthwiseCache,
    norm: LayerNormCache,
    expand: LinearCache,
    gelu: GeluCache,
    grn: GrnCache,
    project: LinearCache,
}

impl Mcnx2Block {
    pub fn new(channels: usize, dw_kernel: usize, expansion: usize, eps: f64) -> Self {
        let hidden = channels * expansion;
        Self {
            dw: DepthwiseCausalConv::new(channels, dw_kernel),
            norm: LayerNorm::new(channels, eps),
            expand: ChannelLinear::new(channels, hidden),
            grn: Grn::new(hidden, eps),
            project: ChannelLinear::new(hidden, channels),
        }
    }

    /// Left context the block needs: the depthwise kernel tail.
    pub fn context(&self) -> usize {
        self.dw.context()
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (h0, dw) = self.dw.forward_cached(x);
        let (h1, norm) = self.norm.forward_cached(&h0);
        let (h2, expand) = self.expand.forward_cached(&h1);
        let (h3, gelu) = gelu_forward_cached(&h2);
        let (h4, grn) = self.grn.forward_cached(&h3);
        let (h5, project) = self.project.forward_cached(&h4);
        let y = x + &h5;
        (
            y,
            BlockCache {
                dw,
                norm,
                expand,
                gelu,
                grn,
                project,
            },
        )
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    /// Streaming step; only the depthwise convolution carries state.
    pub fn stream(&self, state: &mut ConvStreamState, chunk: &Array2<f64>) -> Result<Array2<f64>> {
        let h0 = self.dw.stream(state, chunk);
        let (h1, _) = self.norm.forward_cached(&h0);
        let h2 = self.expand.forward(&h1);
        let h3 = h2.mapv(gelu);
        let (h4, _) = self.grn.forward_cached(&h3);
        let h5 = self.project.forward(&h4);
        Ok(chunk + &h5)
    }

    pub fn stream_state(&self) -> ConvStreamState {
        self.dw.stream_state()
    }

    pub fn backward(&self, cache: &BlockCache, d_out: &Array2<f64>, grads: &mut BlockGrads) -> Array2<f64> {
        let d_h4 = self.project.backward(&cache.project, d_out, &mut grads.project);
        let d_h3 = self.grn.backward(&cache.grn, &d_h4, &mut grads.grn);
        let d_h2 = gelu_backward(&cache.gelu, &d_h3);
        let d_h1 = self.expand.backward(&cache.expand, &d_h2, &mut grads.expand);
        let d_h0 = self.norm.backward(&cache.norm, &d_h1, &mut grads.norm);
        let d_branch = self.dw.backward(&cache.dw, &d_h0, &mut grads.dw);
        d_out + &d_branch
    }
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub dw: DepthwiseGrads,
    pub norm: LayerNormGrads,
    pub expand: LinearGrads,
    pub grn: GrnGrads,
    pub project: LinearGrads,
}

impl BlockGrads {
    pub fn zeros(block: &Mcnx2Block) -> Self {
        Self {
            dw: DepthwiseGrads::zeros(&block.dw),
            norm: LayerNormGrads::zeros(&block.norm),
            expand: LinearGrads::zeros(&block.expand),
            grn: GrnGrads::zeros(&block.grn),
            project: LinearGrads::zeros(&block.project),
        }
    }
}
