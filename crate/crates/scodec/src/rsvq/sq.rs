//! Scalar quantizer stage: bounded rounding onto a fixed per-coordinate grid.
//!
//! Each coordinate of the projected input is squashed through `tanh`, scaled
//! to cover the grid, rounded, and rescaled by `2 / levels`:
//!
//! ```text
//! q(x) = 2 * round(tanh(x + atanh(o / h)) * h - o) / l
//! ```
//!
//! with half-width `h = 1.001 * (l - 1) / 2`. The grid for each coordinate
//! is the image of that map; the stage's implicit codebook is the Cartesian
//! product of the per-coordinate grids, indexed by a mixed-radix token.

use ndarray::{Array1, Array2};

use crate::error::{CodecError, Result};

/// How the rounding offset `o` is derived from the level count.
///
/// `Parity` keeps grids symmetric for odd level counts (offset 0) and uses
/// 1/2 for even counts, matching the finite-scalar-quantization convention.
/// `AlwaysHalf` applies the offset 1/2 to every level count; for odd counts
/// this produces one extra grid point and values slightly outside [-1, 1],
/// so it is kept only as an evaluation knob and is never used by the wire
/// format or the shipped profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OffsetMode {
    #[default]
    Parity,
    AlwaysHalf,
}

impl OffsetMode {
    pub fn offset(self, levels: u32) -> f64 {
        match self {
            OffsetMode::Parity => {
                if levels % 2 == 0 {
                    0.5
                } else {
                    0.0
                }
            }
            OffsetMode::AlwaysHalf => 0.5,
        }
    }
}

/// Half-width of the rounding range for a level count.
pub fn half_width(levels: u32) -> f64 {
    1.001 * (levels as f64 - 1.0) / 2.0
}

/// Bounded rounding of one coordinate. Returns a value from the finite grid;
/// a step function of `x`, monotone non-decreasing.
pub fn sq_bound_round(x: f64, levels: u32, h: f64, o: f64) -> Result<f64> {
    let (_, value) = bound_round_parts(x, levels, h, o)?;
    Ok(value)
}

/// Integer rounding output plus grid value, shared by quantization and
/// tokenization so both always agree.
pub(crate) fn bound_round_parts(x: f64, levels: u32, h: f64, o: f64) -> Result<(i64, f64)> {
    if !x.is_finite() {
        return Err(CodecError::Numeric(format!(
            "scalar quantizer input is not finite: {x}"
        )));
    }
    let center = (o / h).atanh();
    let q = ((x + center).tanh() * h - o).round() as i64;
    Ok((q, 2.0 * q as f64 / levels as f64))
}

/// Inclusive integer rounding range of the bounded map for one coordinate.
///
/// Valid for level counts below 1001, where `0.0005 * (l - 1) < 0.5` keeps
/// the open interval endpoints strictly inside their rounding cells.
fn rounding_range(levels: u32, mode: OffsetMode) -> (i64, i64) {
    let l = levels as i64;
    match (mode, levels % 2 == 0) {
        (_, true) => (-l / 2, l / 2 - 1),
        (OffsetMode::Parity, false) => (-(l - 1) / 2, (l - 1) / 2),
        (OffsetMode::AlwaysHalf, false) => (-(l + 1) / 2, (l - 1) / 2),
    }
}

/// Parameters of one scalar quantizer stage.
#[derive(Debug, Clone)]
pub struct SqParams {
    levels: Vec<u32>,
    offset_mode: OffsetMode,
    /// Down projection, `B x D`.
    pub down_proj: Array2<f64>,
    /// Up projection, `D x B`.
    pub up_proj: Array2<f64>,
    half_widths: Vec<f64>,
    offsets: Vec<f64>,
    /// Per-coordinate grid, indexed by digit.
    grid: Vec<Vec<f64>>,
    q_min: Vec<i64>,
}

impl SqParams {
    pub fn new(levels: Vec<u32>, down_proj: Array2<f64>, up_proj: Array2<f64>) -> Result<Self> {
        Self::with_offset_mode(levels, down_proj, up_proj, OffsetMode::Parity)
    }

    pub fn with_offset_mode(
        levels: Vec<u32>,
        down_proj: Array2<f64>,
        up_proj: Array2<f64>,
        offset_mode: OffsetMode,
    ) -> Result<Self> {
        if levels.is_empty() {
            return Err(CodecError::Config("scalar stage needs at least one level".into()));
        }
        if levels.iter().any(|&l| !(2..=1000).contains(&l)) {
            return Err(CodecError::Config(
                "scalar level counts must lie in [2, 1000]".into(),
            ));
        }
        let b = levels.len();
        if down_proj.nrows() != b || up_proj.ncols() != b {
            return Err(CodecError::Config(format!(
                "projection shapes {:?}/{:?} do not match {} scalar coordinates",
                down_proj.dim(),
                up_proj.dim(),
                b
            )));
        }
        if down_proj.ncols() != up_proj.nrows() {
            return Err(CodecError::Config(
                "scalar stage projections disagree on the latent dimension".into(),
            ));
        }
        let half_widths: Vec<f64> = levels.iter().map(|&l| half_width(l)).collect();
        let offsets: Vec<f64> = levels.iter().map(|&l| offset_mode.offset(l)).collect();
        let mut grid = Vec::with_capacity(b);
        let mut q_min = Vec::with_capacity(b);
        for &l in &levels {
            let (lo, hi) = rounding_range(l, offset_mode);
            grid.push((lo..=hi).map(|q| 2.0 * q as f64 / l as f64).collect());
            q_min.push(lo);
        }
        Ok(Self {
            levels,
            offset_mode,
            down_proj,
            up_proj,
            half_widths,
            offsets,
            grid,
            q_min,
        })
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn offset_mode(&self) -> OffsetMode {
        self.offset_mode
    }

    pub fn coordinate_count(&self) -> usize {
        self.levels.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.down_proj.ncols()
    }

    pub fn half_widths(&self) -> &[f64] {
        &self.half_widths
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// Token radix per coordinate: the grid size, equal to the level count
    /// under [`OffsetMode::Parity`].
    pub fn radices(&self) -> Vec<u32> {
        self.grid.iter().map(|g| g.len() as u32).collect()
    }

    /// Number of points in the implicit Cartesian-product codebook.
    pub fn capacity(&self) -> u64 {
        self.grid.iter().map(|g| g.len() as u64).product()
    }

    /// Grid value for a digit of one coordinate.
    pub fn grid_value(&self, coordinate: usize, digit: u32) -> f64 {
        self.grid[coordinate][digit as usize]
    }

    /// Quantize a latent vector: project down, round each coordinate, and
    /// project the grid point back up. Returns the stage output, the digit
    /// vector and the mixed-radix token.
    pub fn quantize(&self, s: &Array1<f64>) -> Result<(Array1<f64>, Vec<u32>, u32)> {
        let (s_hat, digits, token, _) = self.quantize_detailed(s)?;
        Ok((s_hat, digits, token))
    }

    /// As [`SqParams::quantize`], additionally returning the projected
    /// pre-quantization coordinates.
    pub fn quantize_detailed(
        &self,
        s: &Array1<f64>,
    ) -> Result<(Array1<f64>, Vec<u32>, u32, Array1<f64>)> {
        if s.len() != self.latent_dim() {
            return Err(CodecError::Config(format!(
                "scalar stage expects dimension {}, got {}",
                self.latent_dim(),
                s.len()
            )));
        }
        let projected = self.down_proj.dot(s);
        let mut digits = Vec::with_capacity(self.levels.len());
        let mut rounded = Array1::zeros(self.levels.len());
        for (b, &l) in self.levels.iter().enumerate() {
            let (q, _) = bound_round_parts(projected[b], l, self.half_widths[b], self.offsets[b])?;
            let digit = (q - self.q_min[b]) as u32;
            // The grid is the single source of the quantized value, so the
            // encoder and the token decoder agree bit for bit.
            rounded[b] = self.grid[b][digit as usize];
            digits.push(digit);
        }
        let token = sq_tokenize(&digits, &self.radices())?;
        let s_hat = self.up_proj.dot(&rounded);
        Ok((s_hat, digits, token, projected))
    }

    /// Reconstruct the stage output from a token.
    pub fn dequantize(&self, token: u32) -> Result<Array1<f64>> {
        let digits = sq_detokenize(token, &self.radices())?;
        Ok(self.up_proj.dot(&self.grid_point(&digits)))
    }

    /// Grid point selected by a digit vector.
    pub fn grid_point(&self, digits: &[u32]) -> Array1<f64> {
        Array1::from_iter(
            digits
                .iter()
                .enumerate()
                .map(|(b, &d)| self.grid[b][d as usize]),
        )
    }
}

/// Mixed-radix digits to token: `T = sum_b d_b * prod_{b' < b} r_{b'}`.
pub fn sq_tokenize(digits: &[u32], radices: &[u32]) -> Result<u32> {
    if digits.len() != radices.len() {
        return Err(CodecError::Token(format!(
            "{} digits for {} radices",
            digits.len(),
            radices.len()
        )));
    }
    let mut token: u64 = 0;
    let mut base: u64 = 1;
    for (&d, &r) in digits.iter().zip(radices) {
        if d >= r {
            return Err(CodecError::Token(format!("digit {d} out of range for radix {r}")));
        }
        token += d as u64 * base;
        base *= r as u64;
    }
    u32::try_from(token)
        .map_err(|_| CodecError::Token(format!("token {token} exceeds the 32-bit token range")))
}

/// Exact inverse of [`sq_tokenize`].
pub fn sq_detokenize(token: u32, radices: &[u32]) -> Result<Vec<u32>> {
    let capacity: u64 = radices.iter().map(|&r| r as u64).product();
    if (token as u64) >= capacity {
        return Err(CodecError::Token(format!(
            "token {token} out of range for capacity {capacity}"
        )));
    }
    let mut rest = token as u64;
    let mut digits = Vec::with_capacity(radices.len());
    for &r in radices {
        digits.push((rest % r as u64) as u32);
        rest /= r as u64;
    }
    Ok(digits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn identity_params(levels: Vec<u32>) -> SqParams {
        let b = levels.len();
        SqParams::new(levels, Array2::eye(b), Array2::eye(b)).unwrap()
    }

    #[test]
    fn bound_round_even_levels_reference_points() {
        let h = half_width(4);
        // Zero input lands exactly on the zero grid point.
        assert_eq!(sq_bound_round(0.0, 4, h, 0.5).unwrap(), 0.0);
        // Saturated inputs reach the extreme grid points.
        assert_eq!(sq_bound_round(100.0, 4, h, 0.5).unwrap(), 0.5);
        assert_eq!(sq_bound_round(-100.0, 4, h, 0.5).unwrap(), -1.0);
    }

    #[test]
    fn bound_round_odd_levels_symmetric_at_zero() {
        let h = half_width(5);
        assert_eq!(sq_bound_round(0.0, 5, h, 0.0).unwrap(), 0.0);
        assert_eq!(sq_bound_round(100.0, 5, h, 0.0).unwrap(), 0.8);
        assert_eq!(sq_bound_round(-100.0, 5, h, 0.0).unwrap(), -0.8);
    }

    #[test]
    fn bound_round_rejects_non_finite() {
        let h = half_width(4);
        assert!(sq_bound_round(f64::NAN, 4, h, 0.5).is_err());
    }

    #[test]
    fn bound_round_is_monotone_step_function() {
        let h = half_width(9);
        let mut last = f64::NEG_INFINITY;
        for i in 0..2000 {
            let x = -10.0 + i as f64 * 0.01;
            let y = sq_bound_round(x, 9, h, 0.0).unwrap();
            assert!(y >= last);
            last = y;
        }
    }

    #[test]
    fn grid_has_level_count_points_and_bounded_magnitude() {
        for levels in [2u32, 4, 5, 9, 10, 11] {
            let p = identity_params(vec![levels]);
            assert_eq!(p.radices(), vec![levels]);
            let h = half_width(levels);
            let o = OffsetMode::Parity.offset(levels);
            for i in -4000..4000 {
                let x = i as f64 * 0.005;
                let y = sq_bound_round(x, levels, h, o).unwrap();
                assert!((0..levels).any(|d| p.grid_value(0, d) == y));
                assert!(y.abs() <= 1.0 + 2.0 / levels as f64);
            }
        }
    }

    #[test]
    fn always_half_offset_extends_odd_grids() {
        let p = SqParams::with_offset_mode(
            vec![5],
            Array2::eye(1),
            Array2::eye(1),
            OffsetMode::AlwaysHalf,
        )
        .unwrap();
        assert_eq!(p.radices(), vec![6]);
        assert_eq!(p.capacity(), 6);
        let h = half_width(5);
        let lo = sq_bound_round(-100.0, 5, h, 0.5).unwrap();
        assert!((lo - (-1.2)).abs() < 1e-12);
        assert!(lo.abs() <= 1.0 + 2.0 / 5.0);
        // Even level counts are unaffected by the offset mode.
        assert_eq!(
            sq_bound_round(0.3, 4, half_width(4), OffsetMode::AlwaysHalf.offset(4)).unwrap(),
            sq_bound_round(0.3, 4, half_width(4), OffsetMode::Parity.offset(4)).unwrap()
        );
    }

    #[test]
    fn quantize_zero_vector_gives_center_digits() {
        let p = identity_params(vec![4, 4, 4]);
        let (s_hat, digits, token) = p.quantize(&Array1::zeros(3)).unwrap();
        assert!(s_hat.iter().all(|&v| v == 0.0));
        assert_eq!(digits, vec![2, 2, 2]);
        // Center digit for even levels is l / 2.
        assert_eq!(token, 2 + 2 * 4 + 2 * 16);
    }

    #[test]
    fn quantize_is_deterministic() {
        let p = identity_params(vec![4, 9]);
        let s = Array1::from(vec![0.3, -1.2]);
        let a = p.quantize(&s).unwrap();
        let b = p.quantize(&s).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn low_profile_tokens_stay_in_range() {
        let p = identity_params(vec![4, 4, 4, 4, 4]);
        assert_eq!(p.capacity(), 1024);
        for i in 0..200 {
            let s = Array1::from(vec![
                (i as f64 * 0.37).sin() * 3.0,
                (i as f64 * 0.11).cos() * 2.0,
                i as f64 * 0.01 - 1.0,
                -(i as f64) * 0.02,
                (i as f64 * 0.5).sin(),
            ]);
            let (_, _, token) = p.quantize(&s).unwrap();
            assert!(token < 1024);
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(sq_tokenize(&[0, 0, 0, 0, 0], &[4, 4, 4, 4, 4]).unwrap(), 0);
        assert_eq!(
            sq_tokenize(&[3, 2, 1, 0, 3], &[4, 4, 4, 4, 4]).unwrap(),
            3 + 2 * 4 + 16 + 768
        );
        // Max digits map to capacity - 1 for the mixed-radix high schedule.
        assert_eq!(
            sq_tokenize(&[10, 10, 9, 9, 9, 8], &[11, 11, 10, 10, 10, 9]).unwrap(),
            1_088_999
        );
    }

    #[test]
    fn detokenize_inverts_tokenize_exhaustively() {
        let radices = [4u32, 4, 4, 4, 4];
        for token in 0..1024u32 {
            let digits = sq_detokenize(token, &radices).unwrap();
            assert_eq!(sq_tokenize(&digits, &radices).unwrap(), token);
        }
        assert_eq!(sq_detokenize(0, &radices).unwrap(), vec![0; 5]);
        assert_eq!(
            sq_detokenize(795, &radices).unwrap(),
            vec![3, 2, 1, 0, 3]
        );
    }

    #[test]
    fn out_of_range_digit_and_token_are_token_errors() {
        assert!(matches!(
            sq_tokenize(&[4, 0], &[4, 4]),
            Err(CodecError::Token(_))
        ));
        assert!(matches!(
            sq_detokenize(16, &[4, 4]),
            Err(CodecError::Token(_))
        ));
    }

    #[test]
    fn dequantize_matches_quantize_output_bitwise() {
        let p = identity_params(vec![4, 9, 10]);
        for i in 0..50 {
            let s = Array1::from(vec![
                (i as f64 * 0.7).sin() * 2.0,
                (i as f64 * 0.3).cos(),
                i as f64 * 0.04 - 1.0,
            ]);
            let (s_hat, _, token) = p.quantize(&s).unwrap();
            let back = p.dequantize(token).unwrap();
            assert_eq!(s_hat, back);
        }
    }
}
