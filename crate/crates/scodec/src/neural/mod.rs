//! Causal neural encoder/decoder with a minimal reverse-mode backward pass
//! covering exactly the operations the codec uses.

pub mod block;
pub mod checkpoint;
pub mod conv;
pub mod model;
pub mod train;

pub use model::{CodecNetConfig, Decoder, DecoderStreamState, Encoder, EncoderStreamState};

use ndarray::{Array1, Array2};

/// Sequence of latent vectors at the downsampled frame rate.
///
/// Stored as `(latent_dim, frames)`, one column per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    data: Array2<f64>,
}

impl LatentSequence {
    pub fn new(data: Array2<f64>) -> Self {
        Self { data }
    }

    pub fn from_frames(frames: &[Array1<f64>], dim: usize) -> Self {
        let mut data = Array2::zeros((dim, frames.len()));
        for (u, frame) in frames.iter().enumerate() {
            data.column_mut(u).assign(frame);
        }
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn frame(&self, u: usize) -> Array1<f64> {
        self.data.column(u).to_owned()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }
}
