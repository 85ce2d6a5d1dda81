//! Vector quantizer stage: nearest-codevector lookup in a trainable codebook.

use ndarray::{Array1, Array2};

use crate::error::{CodecError, Result};

/// Parameters of one vector quantizer stage.
#[derive(Debug, Clone)]
pub struct IvqParams {
    /// Down projection, `M x D`.
    pub down_proj: Array2<f64>,
    /// Up projection, `D x M`.
    pub up_proj: Array2<f64>,
    /// Codebook, `K x M`; one codevector per row.
    pub codebook: Array2<f64>,
}

impl IvqParams {
    pub fn new(down_proj: Array2<f64>, up_proj: Array2<f64>, codebook: Array2<f64>) -> Result<Self> {
        if codebook.nrows() < 2 {
            return Err(CodecError::Config("codebook needs at least two codevectors".into()));
        }
        let m = codebook.ncols();
        if down_proj.nrows() != m || up_proj.ncols() != m {
            return Err(CodecError::Config(format!(
                "projection shapes {:?}/{:?} do not match codevector dimension {}",
                down_proj.dim(),
                up_proj.dim(),
                m
            )));
        }
        if down_proj.ncols() != up_proj.nrows() {
            return Err(CodecError::Config(
                "vector stage projections disagree on the latent dimension".into(),
            ));
        }
        if codebook.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::Numeric("codebook contains non-finite entries".into()));
        }
        Ok(Self {
            down_proj,
            up_proj,
            codebook,
        })
    }

    pub fn code_dim(&self) -> usize {
        self.codebook.ncols()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.down_proj.ncols()
    }

    /// Index of the nearest codevector to a projected input; equal distances
    /// resolve to the lowest index.
    pub fn nearest(&self, projected: &Array1<f64>) -> usize {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (k, row) in self.codebook.rows().into_iter().enumerate() {
            let mut dist = 0.0;
            for (a, b) in projected.iter().zip(row.iter()) {
                let d = a - b;
                dist += d * d;
            }
            if dist < best_dist {
                best_dist = dist;
                best = k;
            }
        }
        best
    }

    /// Quantize a latent vector: project down, pick the nearest codevector,
    /// and project it back up. Returns the stage output and the token.
    pub fn quantize(&self, v: &Array1<f64>) -> Result<(Array1<f64>, u32)> {
        let (v_hat, token, _) = self.quantize_detailed(v)?;
        Ok((v_hat, token))
    }

    /// As [`IvqParams::quantize`], additionally returning the projected
    /// pre-quantization vector.
    pub fn quantize_detailed(&self, v: &Array1<f64>) -> Result<(Array1<f64>, u32, Array1<f64>)> {
        if v.len() != self.latent_dim() {
            return Err(CodecError::Config(format!(
                "vector stage expects dimension {}, got {}",
                self.latent_dim(),
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(CodecError::Numeric("vector stage input is not finite".into()));
        }
        let projected = self.down_proj.dot(v);
        let k = self.nearest(&projected);
        let v_hat = self.up_proj.dot(&self.codebook.row(k).to_owned());
        Ok((v_hat, k as u32, projected))
    }

    /// Reconstruct the stage output from a token.
    pub fn dequantize(&self, token: u32) -> Result<Array1<f64>> {
        let k = token as usize;
        if k >= self.codebook_size() {
            return Err(CodecError::Token(format!(
                "vector token {} out of range for codebook size {}",
                token,
                self.codebook_size()
            )));
        }
        Ok(self.up_proj.dot(&self.codebook.row(k).to_owned()))
    }
}
