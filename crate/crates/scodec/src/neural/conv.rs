//! Causal 1D convolution primitives with reverse-mode backward passes.
//!
//! Sequences are `(channels, time)` arrays of `f64`. Every operation is
//! strictly causal: output step `t` of a stride-`s` layer reads inputs up to
//! `t*s + s - 1` and nothing later; the transposed (upsampling) layer's
//! output step `p` reads input steps up to `floor(p / s)`.
//!
//! Batch and streaming evaluation share the same column layout and the same
//! matrix kernels, so a stream fed in chunks reproduces the batch output bit
//! for bit.

use ndarray::{Array1, Array2};

use crate::error::{CodecError, Result};

/// Causal convolution, optionally strided (downsampling).
#[derive(Debug, Clone)]
pub struct CausalConv1d {
    /// `(out_channels, in_channels * kernel)`; tap index `i * k + j` with
    /// `j` ascending in time (oldest to newest).
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dilation: usize,
}

/// Cached activations for the backward pass of [`CausalConv1d`].
pub struct ConvCache {
    col: Array2<f64>,
    input_len: usize,
}

impl CausalConv1d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        Self {
            weight: Array2::zeros((out_channels, in_channels * kernel_size)),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel_size,
            stride,
            dilation,
        }
    }

    /// Samples of left context a streaming state must retain; also the
    /// layer's left receptive extent before the newest input it reads.
    pub fn context(&self) -> usize {
        self.dilation * (self.kernel_size - 1)
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.nrows() != self.in_channels {
            return Err(CodecError::Config(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.nrows()
            )));
        }
        if x.ncols() % self.stride != 0 {
            return Err(CodecError::Config(format!(
                "conv with stride {} needs input length divisible by it, got {}",
                self.stride,
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Column matrix for the causal window of every output step.
    /// `history` leading columns of `x` are context, not new input.
    fn columns(&self, x: &Array2<f64>, history: usize) -> Array2<f64> {
        let k = self.kernel_size;
        let t_out = (x.ncols() - history) / self.stride;
        let mut col = Array2::zeros((self.in_channels * k, t_out));
        for t in 0..t_out {
            let newest = (history + t * self.stride + self.stride - 1) as isize;
            for j in 0..k {
                let src = newest - ((k - 1 - j) * self.dilation) as isize;
                if src >= 0 {
                    for i in 0..self.in_channels {
                        col[[i * k + j, t]] = x[[i, src as usize]];
                    }
                }
            }
        }
        col
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ConvCache)> {
        self.check_input(x)?;
        let col = self.columns(x, 0);
        let y = self.apply(&col);
        Ok((
            y,
            ConvCache {
                col,
                input_len: x.ncols(),
            },
        ))
    }

    fn apply(&self, col: &Array2<f64>) -> Array2<f64> {
        let mut y = self.weight.dot(col);
        for (mut row, &b) in y.rows_mut().into_iter().zip(self.bias.iter()) {
            row.map_inplace(|v| *v += b);
        }
        y
    }

    /// One streaming step over a chunk whose length is a stride multiple.
    pub fn stream(&self, state: &mut ConvStreamState, chunk: &Array2<f64>) -> Result<Array2<f64>> {
        if chunk.nrows() != self.in_channels {
            return Err(CodecError::Config(format!(
                "conv stream expects {} channels, got {}",
                self.in_channels,
                chunk.nrows()
            )));
        }
        if chunk.ncols() % self.stride != 0 {
            return Err(CodecError::Stream(format!(
                "conv stream chunk length {} is not a multiple of stride {}",
                chunk.ncols(),
                self.stride
            )));
        }
        let context = self.context();
        debug_assert_eq!(state.tail.ncols(), context);
        let mut extended = Array2::zeros((self.in_channels, context + chunk.ncols()));
        extended
            .slice_mut(ndarray::s![.., ..context])
            .assign(&state.tail);
        extended
            .slice_mut(ndarray::s![.., context..])
            .assign(chunk);
        let col = self.columns(&extended, context);
        let y = self.apply(&col);
        let keep = extended.ncols() - context;
        state
            .tail
            .assign(&extended.slice(ndarray::s![.., keep..]));
        Ok(y)
    }

    pub fn stream_state(&self) -> ConvStreamState {
        ConvStreamState {
            tail: Array2::zeros((self.in_channels, self.context())),
        }
    }

    /// Backward pass: returns the input gradient and accumulates parameter
    /// gradients into `grads`.
    pub fn backward(&self, cache: &ConvCache, d_out: &Array2<f64>, grads: &mut ConvGrads) -> Array2<f64> {
        grads.weight += &d_out.dot(&cache.col.t());
        for (o, g) in grads.bias.iter_mut().enumerate() {
            *g += d_out.row(o).sum();
        }
        let d_col = self.weight.t().dot(d_out);
        let mut d_x = Array2::zeros((self.in_channels, cache.input_len));
        let k = self.kernel_size;
        for t in 0..d_out.ncols() {
            let newest = (t * self.stride + self.stride - 1) as isize;
            for j in 0..k {
                let src = newest - ((k - 1 - j) * self.dilation) as isize;
                if src >= 0 {
                    for i in 0..self.in_channels {
                        d_x[[i, src as usize]] += d_col[[i * k + j, t]];
                    }
                }
            }
        }
        d_x
    }
}

/// Ring of retained input columns for streaming convolution.
#[derive(Debug, Clone)]
pub struct ConvStreamState {
    tail: Array2<f64>,
}

impl ConvStreamState {
    /// Bytes of retained context; bounded by the receptive field, not the
    /// stream length.
    pub fn context_len(&self) -> usize {
        self.tail.ncols()
    }
}

/// Gradients of a [`CausalConv1d`].
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvGrads {
    pub fn zeros(layer: &CausalConv1d) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.dim()),
            bias: Array1::zeros(layer.bias.len()),
        }
    }
}

/// Causal transposed convolution (upsampling by `factor`).
///
/// Output step `p` accumulates `W_j . x_u` over all `(u, j)` with
/// `u * factor + j = p`, so it depends only on inputs `u <= floor(p/factor)`.
#[derive(Debug, Clone)]
pub struct CausalConvTranspose1d {
    /// `(out_channels * kernel, in_channels)`; row `o * k + j`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub factor: usize,
}

pub struct ConvTransposeCache {
    input: Array2<f64>,
}

impl CausalConvTranspose1d {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize, factor: usize) -> Self {
        assert!(kernel_size >= factor, "kernel must cover the upsampling factor");
        Self {
            weight: Array2::zeros((out_channels * kernel_size, in_channels)),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel_size,
            factor,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> Result<(Array2<f64>, ConvTransposeCache)> {
        if x.nrows() != self.in_channels {
            return Err(CodecError::Config(format!(
                "transposed conv expects {} channels, got {}",
                self.in_channels,
                x.nrows()
            )));
        }
        let t_out = x.ncols() * self.factor;
        // Tap contributions for every input step, then causal scatter.
        let taps = self.weight.dot(x);
        let mut y = Array2::zeros((self.out_channels, t_out));
        for u in 0..x.ncols() {
            for j in 0..self.kernel_size {
                let p = u * self.factor + j;
                if p < t_out {
                    for o in 0..self.out_channels {
                        y[[o, p]] += taps[[o * self.kernel_size + j, u]];
                    }
                }
            }
        }
        for o in 0..self.out_channels {
            for p in 0..t_out {
                y[[o, p]] += self.bias[o];
            }
        }
        Ok((y, ConvTransposeCache { input: x.clone() }))
    }

    /// One streaming step: push input columns, receive `factor` output
    /// columns per input column.
    pub fn stream(&self, state: &mut ConvTransposeStreamState, chunk: &Array2<f64>) -> Result<Array2<f64>> {
        if chunk.nrows() != self.in_channels {
            return Err(CodecError::Config(format!(
                "transposed conv stream expects {} channels, got {}",
                self.in_channels,
                chunk.nrows()
            )));
        }
        let taps = self.weight.dot(chunk);
        let mut out = Array2::zeros((self.out_channels, chunk.ncols() * self.factor));
        for u in 0..chunk.ncols() {
            // Accumulate this step's taps into the pending window.
            for j in 0..self.kernel_size {
                for o in 0..self.out_channels {
                    state.pending[[o, j]] += taps[[o * self.kernel_size + j, u]];
                }
            }
            // Emit the first `factor` columns and slide the window.
            for e in 0..self.factor {
                for o in 0..self.out_channels {
                    out[[o, u * self.factor + e]] = state.pending[[o, e]] + self.bias[o];
                }
            }
            let k = self.kernel_size;
            for j in 0..k {
                for o in 0..self.out_channels {
                    let shifted = if j + self.factor < k {
                        state.pending[[o, j + self.factor]]
                    } else {
                        0.0
                    };
                    state.pending[[o, j]] = shifted;
                }
            }
        }
        Ok(out)
    }

    pub fn stream_state(&self) -> ConvTransposeStreamState {
        ConvTransposeStreamState {
            pending: Array2::zeros((self.out_channels, self.kernel_size)),
        }
    }

    pub fn backward(
        &self,
        cache: &ConvTransposeCache,
        d_out: &Array2<f64>,
        grads: &mut ConvTransposeGrads,
    ) -> Array2<f64> {
        let t_out = d_out.ncols();
        let u_len = cache.input.ncols();
        // Gather output gradients back onto tap positions.
        let mut d_taps = Array2::zeros((self.out_channels * self.kernel_size, u_len));
        for u in 0..u_len {
            for j in 0..self.kernel_size {
                let p = u * self.factor + j;
                if p < t_out {
                    for o in 0..self.out_channels {
                        d_taps[[o * self.kernel_size + j, u]] = d_out[[o, p]];
                    }
                }
            }
        }
        grads.weight += &d_taps.dot(&cache.input.t());
        for o in 0..self.out_channels {
            grads.bias[o] += d_out.row(o).sum();
        }
        self.weight.t().dot(&d_taps)
    }
}

/// Pending overlap window for streaming transposed convolution.
#[derive(Debug, Clone)]
pub struct ConvTransposeStreamState {
    pending: Array2<f64>,
}

impl ConvTransposeStreamState {
    pub fn context_len(&self) -> usize {
        self.pending.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct ConvTransposeGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvTransposeGrads {
    pub fn zeros(layer: &CausalConvTranspose1d) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.dim()),
            bias: Array1::zeros(layer.bias.len()),
        }
    }
}

/// Per-step channel mix (a linear layer applied at every time step).
#[derive(Debug, Clone)]
pub struct ChannelLinear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub struct LinearCache {
    input: Array2<f64>,
}

impl ChannelLinear {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            weight: Array2::zeros((out_channels, in_channels)),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = self.weight.dot(x);
        for (o, &b) in self.bias.iter().enumerate() {
            for t in 0..y.ncols() {
                y[[o, t]] += b;
            }
        }
        y
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        (self.forward(x), LinearCache { input: x.clone() })
    }

    pub fn backward(&self, cache: &LinearCache, d_out: &Array2<f64>, grads: &mut LinearGrads) -> Array2<f64> {
        grads.weight += &d_out.dot(&cache.input.t());
        for o in 0..self.bias.len() {
            grads.bias[o] += d_out.row(o).sum();
        }
        self.weight.t().dot(d_out)
    }
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearGrads {
    pub fn zeros(layer: &ChannelLinear) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.dim()),
            bias: Array1::zeros(layer.bias.len()),
        }
    }
}

/// Depthwise causal convolution: a `k`-tap FIR per channel with left padding.
#[derive(Debug, Clone)]
pub struct DepthwiseCausalConv {
    /// `(channels, kernel)`; tap `j` ascending in time.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel_size: usize,
}

pub struct DepthwiseCache {
    input: Array2<f64>,
}

impl DepthwiseCausalConv {
    pub fn new(channels: usize, kernel_size: usize) -> Self {
        Self {
            weight: Array2::zeros((channels, kernel_size)),
            bias: Array1::zeros(channels),
            kernel_size,
        }
    }

    pub fn context(&self) -> usize {
        self.kernel_size - 1
    }

    fn apply(&self, x: &Array2<f64>, history: usize) -> Array2<f64> {
        let channels = x.nrows();
        let k = self.kernel_size;
        let t_out = x.ncols() - history;
        let mut y = Array2::zeros((channels, t_out));
        for c in 0..channels {
            for t in 0..t_out {
                let newest = (history + t) as isize;
                let mut acc = 0.0;
                for j in 0..k {
                    let src = newest - (k - 1 - j) as isize;
                    if src >= 0 {
                        acc += self.weight[[c, j]] * x[[c, src as usize]];
                    }
                }
                y[[c, t]] = acc + self.bias[c];
            }
        }
        y
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, DepthwiseCache) {
        (self.apply(x, 0), DepthwiseCache { input: x.clone() })
    }

    pub fn stream(&self, state: &mut ConvStreamState, chunk: &Array2<f64>) -> Array2<f64> {
        let context = self.context();
        let mut extended = Array2::zeros((chunk.nrows(), context + chunk.ncols()));
        extended
            .slice_mut(ndarray::s![.., ..context])
            .assign(&state.tail);
        extended.slice_mut(ndarray::s![.., context..]).assign(chunk);
        let y = self.apply(&extended, context);
        let keep = extended.ncols() - context;
        state.tail.assign(&extended.slice(ndarray::s![.., keep..]));
        y
    }

    pub fn stream_state(&self) -> ConvStreamState {
        ConvStreamState {
            tail: Array2::zeros((self.weight.nrows(), self.context())),
        }
    }

    pub fn backward(&self, cache: &DepthwiseCache, d_out: &Array2<f64>, grads: &mut DepthwiseGrads) -> Array2<f64> {
        let channels = cache.input.nrows();
        let t_len = cache.input.ncols();
        let k = self.kernel_size;
        let mut d_x = Array2::zeros((channels, t_len));
        for c in 0..channels {
            for t in 0..t_len {
                for j in 0..k {
                    let src = t as isize - (k - 1 - j) as isize;
                    if src >= 0 {
                        grads.weight[[c, j]] += d_out[[c, t]] * cache.input[[c, src as usize]];
                        d_x[[c, src as usize]] += d_out[[c, t]] * self.weight[[c, j]];
                    }
                }
                grads.bias[c] += d_out[[c, t]];
            }
        }
        d_x
    }
}

#[derive(Debug, Clone)]
pub struct DepthwiseGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DepthwiseGrads {
    pub fn zeros(layer: &DepthwiseCausalConv) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.dim()),
            bias: Array1::zeros(layer.bias.len()),
        }
    }
}
