//! Training-time pass over the residual quantizer.
//!
//! Forward values equal the plain quantize path. The backward treats the
//! discretizations as straight-through: rounding has identity gradient (the
//! bounding `tanh` stays analytic) and codevector selection passes gradients
//! from the stage output to the projected input unchanged. Codebooks receive
//! gradients only from the commitment term and from the soft-assignment
//! surrogate that makes the balancing loss differentiable.
//!
//! For finite-difference checking, [`RsvqForward::snapshot`] captures the
//! discretization decisions so [`forward_frozen`] can evaluate the exact
//! differentiable function the backward pass differentiates.

use ndarray::{Array1, Array2};

use crate::error::{CodecError, Result};
use crate::rsvq::{QuantizerConfig, TokenFrame};

/// Numerical floor inside `sqrt` when converting squared distances to
/// distances for the soft assignment.
const DIST_EPS: f64 = 1e-12;
/// Floor inside the balancing logarithm.
const LOG_EPS: f64 = 1e-10;

/// Weights of the auxiliary loss terms.
#[derive(Debug, Clone, Copy)]
pub struct AuxWeights {
    /// Outer weight of the commitment pair.
    pub commit: f64,
    /// Weight of the encoder-side half within the commitment pair.
    pub beta: f64,
    /// Outer weight of the balancing surrogate.
    pub balancing: f64,
}

impl Default for AuxWeights {
    fn default() -> Self {
        Self {
            commit: 1.0,
            beta: 0.25,
            balancing: 1.0,
        }
    }
}

struct SqCache {
    input: Array2<f64>,
    tanh_u: Array2<f64>,
    value: Array2<f64>,
    g: Array2<f64>,
    tokens: Vec<u32>,
}

struct IvqCache {
    input: Array2<f64>,
    projected: Array2<f64>,
    selected: Vec<usize>,
    selected_value: Array2<f64>,
    /// Guarded Euclidean distances to every codevector, `K x T`.
    distances: Option<Array2<f64>>,
    /// Soft assignment probabilities, `K x T`.
    posterior: Option<Array2<f64>>,
}

/// Cached forward pass over a latent sequence (`D x T`, one column per frame).
pub struct RsvqForward {
    pub z_hat: Array2<f64>,
    pub final_residual: Array2<f64>,
    sq: Vec<SqCache>,
    ivq: Vec<IvqCache>,
    frames: usize,
}

/// Gradients for every trainable quantizer parameter.
#[derive(Debug, Clone)]
pub struct RsvqGrads {
    pub sq_down: Vec<Array2<f64>>,
    pub sq_up: Vec<Array2<f64>>,
    pub ivq_down: Vec<Array2<f64>>,
    pub ivq_up: Vec<Array2<f64>>,
    pub codebooks: Vec<Array2<f64>>,
}

impl RsvqGrads {
    pub fn zeros(cfg: &QuantizerConfig) -> Self {
        Self {
            sq_down: cfg.sq_stages.iter().map(|s| Array2::zeros(s.down_proj.dim())).collect(),
            sq_up: cfg.sq_stages.iter().map(|s| Array2::zeros(s.up_proj.dim())).collect(),
            ivq_down: cfg.ivq_stages.iter().map(|v| Array2::zeros(v.down_proj.dim())).collect(),
            ivq_up: cfg.ivq_stages.iter().map(|v| Array2::zeros(v.up_proj.dim())).collect(),
            codebooks: cfg.ivq_stages.iter().map(|v| Array2::zeros(v.codebook.dim())).collect(),
        }
    }
}

/// Result of the backward pass.
pub struct RsvqBackward {
    /// Gradient with respect to the latent sequence.
    pub d_latent: Array2<f64>,
    pub grads: RsvqGrads,
}

/// Run the quantizer over a latent sequence, keeping everything the backward
/// pass and the loss terms need. `with_posterior` additionally caches the
/// soft assignment for the balancing surrogate.
pub fn forward(cfg: &QuantizerConfig, latents: &Array2<f64>, with_posterior: bool) -> Result<RsvqForward> {
    let d = cfg.latent_dim();
    if latents.nrows() != d {
        return Err(CodecError::Config(format!(
            "latent sequence has {} rows, expected {}",
            latents.nrows(),
            d
        )));
    }
    if latents.iter().any(|x| !x.is_finite()) {
        return Err(CodecError::Numeric("latent sequence is not finite".into()));
    }
    let frames = latents.ncols();
    let mut residual = latents.clone();
    let mut z_hat: Array2<f64> = Array2::zeros((d, frames));
    let mut sq_caches = Vec::with_capacity(cfg.sq_stages.len());
    // Stage outputs are computed frame by frame with the same matrix-vector
    // kernel as the plain quantize path, so values match it bit for bit.
    for stage in &cfg.sq_stages {
        let input = residual.clone();
        let b = stage.coordinate_count();
        let mut tanh_u = Array2::zeros((b, frames));
        let mut value = Array2::zeros((b, frames));
        let mut g = Array2::zeros((b, frames));
        let mut s_hat = Array2::zeros((d, frames));
        let mut digits = vec![0u32; b];
        let mut tokens = Vec::with_capacity(frames);
        let radices = stage.radices();
        for t in 0..frames {
            let r_t = input.column(t).to_owned();
            let projected = stage.down_proj.dot(&r_t);
            let mut value_col = Array1::zeros(b);
            for (bi, &l) in stage.levels().iter().enumerate() {
                let h = stage.half_widths()[bi];
                let o = stage.offsets()[bi];
                let center = (o / h).atanh();
                let tu = (projected[bi] + center).tanh();
                let gv = tu * h - o;
                let q = gv.round() as i64;
                let digit = (q - grid_min(l)) as u32;
                tanh_u[[bi, t]] = tu;
                g[[bi, t]] = gv;
                value_col[bi] = stage.grid_value(bi, digit);
                value[[bi, t]] = value_col[bi];
                digits[bi] = digit;
            }
            tokens.push(super::sq_tokenize(&digits, &radices)?);
            s_hat.column_mut(t).assign(&stage.up_proj.dot(&value_col));
        }
        z_hat += &s_hat;
        residual -= &s_hat;
        sq_caches.push(SqCache {
            input,
            tanh_u,
            value,
            g,
            tokens,
        });
    }
    let mut ivq_caches = Vec::with_capacity(cfg.ivq_stages.len());
    for stage in &cfg.ivq_stages {
        let input = residual.clone();
        let m = stage.code_dim();
        let k_size = stage.codebook_size();
        let mut projected = Array2::zeros((m, frames));
        let mut selected = Vec::with_capacity(frames);
        let mut selected_value = Array2::zeros((m, frames));
        let mut v_hat = Array2::zeros((d, frames));
        let mut distances = if with_posterior {
            Some(Array2::zeros((k_size, frames)))
        } else {
            None
        };
        let mut posterior = if with_posterior {
            Some(Array2::zeros((k_size, frames)))
        } else {
            None
        };
        for t in 0..frames {
            let r_t = input.column(t).to_owned();
            let proj = stage.down_proj.dot(&r_t);
            let best = stage.nearest(&proj);
            selected.push(best);
            let row = stage.codebook.row(best).to_owned();
            selected_value.column_mut(t).assign(&row);
            v_hat.column_mut(t).assign(&stage.up_proj.dot(&row));
            if let (Some(dist), Some(post)) = (distances.as_mut(), posterior.as_mut()) {
                let mut max_a = f64::NEG_INFINITY;
                for k in 0..k_size {
                    let mut d2 = 0.0;
                    for mi in 0..m {
                        let diff = proj[mi] - stage.codebook[[k, mi]];
                        d2 += diff * diff;
                    }
                    dist[[k, t]] = (d2 + DIST_EPS).sqrt();
                    max_a = max_a.max(-dist[[k, t]]);
                }
                let mut total = 0.0;
                for k in 0..k_size {
                    let e = (-dist[[k, t]] - max_a).exp();
                    post[[k, t]] = e;
                    total += e;
                }
                for k in 0..k_size {
                    post[[k, t]] /= total;
                }
            }
            projected.column_mut(t).assign(&proj);
        }
        z_hat += &v_hat;
        residual -= &v_hat;
        ivq_caches.push(IvqCache {
            input,
            projected,
            selected,
            selected_value,
            distances,
            posterior,
        });
    }
    Ok(RsvqForward {
        z_hat,
        final_residual: residual,
        sq: sq_caches,
        ivq: ivq_caches,
        frames,
    })
}

fn grid_min(levels: u32) -> i64 {
    // Parity mode is the only mode reachable through QuantizerConfig.
    let l = levels as i64;
    if levels % 2 == 0 {
        -l / 2
    } else {
        -(l - 1) / 2
    }
}

impl RsvqForward {
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Token frame for one time step.
    pub fn tokens_at(&self, t: usize) -> TokenFrame {
        TokenFrame {
            sq: self.sq.iter().map(|s| s.tokens[t]).collect(),
            ivq: self.ivq.iter().map(|v| v.selected[t] as u32).collect(),
        }
    }

    /// Scalar stage tokens, one `Vec<u32>` per stage.
    pub fn sq_token_logs(&self) -> Vec<Vec<u32>> {
        self.sq.iter().map(|s| s.tokens.clone()).collect()
    }

    /// Vector stage tokens, one `Vec<u32>` per stage.
    pub fn ivq_token_logs(&self) -> Vec<Vec<u32>> {
        self.ivq
            .iter()
            .map(|v| v.selected.iter().map(|&k| k as u32).collect())
            .collect()
    }

    /// Projected features entering each vector stage, `M x T` per stage.
    pub fn ivq_features(&self) -> Vec<&Array2<f64>> {
        self.ivq.iter().map(|v| &v.projected).collect()
    }

    /// Mean commitment value per frame over all vector stages:
    /// `(beta + 1) * |v' - v_k|^2` averaged over time.
    pub fn commitment_value(&self, beta: f64) -> f64 {
        if self.frames == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for cache in &self.ivq {
            for t in 0..self.frames {
                let mut d2 = 0.0;
                for mi in 0..cache.projected.nrows() {
                    let diff = cache.projected[[mi, t]] - cache.selected_value[[mi, t]];
                    d2 += diff * diff;
                }
                total += (beta + 1.0) * d2;
            }
        }
        total / self.frames as f64
    }

    /// Balancing surrogate value: cross-entropy between the uniform prior and
    /// the batch-mean soft posterior, summed over vector stages.
    pub fn balancing_value(&self) -> f64 {
        let mut total = 0.0;
        for cache in &self.ivq {
            let Some(post) = cache.posterior.as_ref() else {
                continue;
            };
            let k_size = post.nrows();
            for k in 0..k_size {
                let mean_p = post.row(k).sum() / self.frames as f64;
                total -= (mean_p + LOG_EPS).ln() / k_size as f64;
            }
        }
        total
    }

    /// Smallest distance of any rounding argument to a rounding boundary and
    /// of any frame to a Voronoi boundary; finite-difference tests reject
    /// base points where this is small.
    pub fn boundary_margin(&self, cfg: &QuantizerConfig) -> f64 {
        let mut margin = f64::INFINITY;
        for cache in &self.sq {
            for &gv in cache.g.iter() {
                let to_boundary = (0.5 - (gv - gv.round()).abs()).abs();
                margin = margin.min(to_boundary);
            }
        }
        for (cache, stage) in self.ivq.iter().zip(&cfg.ivq_stages) {
            for t in 0..self.frames {
                let best = cache.selected[t];
                let mut best_d2 = f64::INFINITY;
                let mut second = f64::INFINITY;
                for k in 0..stage.codebook_size() {
                    let mut d2 = 0.0;
                    for mi in 0..stage.code_dim() {
                        let diff = cache.projected[[mi, t]] - stage.codebook[[k, mi]];
                        d2 += diff * diff;
                    }
                    if k == best {
                        best_d2 = d2;
                    } else {
                        second = second.min(d2);
                    }
                }
                margin = margin.min(second.sqrt() - best_d2.sqrt());
            }
        }
        margin
    }

    /// Capture the discretization decisions for [`forward_frozen`].
    pub fn snapshot(&self) -> RsvqSnapshot {
        RsvqSnapshot {
            sq_g_base: self.sq.iter().map(|s| s.g.clone()).collect(),
            sq_value_base: self.sq.iter().map(|s| s.value.clone()).collect(),
            ivq_projected_base: self.ivq.iter().map(|v| v.projected.clone()).collect(),
            ivq_selected_value: self.ivq.iter().map(|v| v.selected_value.clone()).collect(),
        }
    }

    /// Straight-through backward pass. `d_z_hat` is the loss gradient with
    /// respect to the quantized sequence; auxiliary-loss gradients are added
    /// according to `weights`.
    pub fn backward(
        &self,
        cfg: &QuantizerConfig,
        d_z_hat: &Array2<f64>,
        weights: &AuxWeights,
    ) -> RsvqBackward {
        let frames = self.frames.max(1) as f64;
        let mut grads = RsvqGrads::zeros(cfg);
        // Gradient flowing into the residual produced after the current stage.
        let mut g_residual: Array2<f64> = Array2::zeros(d_z_hat.dim());
        for (j, (stage, cache)) in cfg.ivq_stages.iter().zip(&self.ivq).enumerate().rev() {
            let d_out = d_z_hat - &g_residual;
            grads.ivq_up[j] += &d_out.dot(&cache.selected_value.t());
            // Straight-through: the selection step copies the output gradient
            // onto the projected input.
            let mut d_proj = stage.up_proj.t().dot(&d_out);
            if weights.commit != 0.0 {
                let scale = weights.commit * 2.0 / frames;
                for t in 0..self.frames {
                    let k = cache.selected[t];
                    for mi in 0..stage.code_dim() {
                        let diff = cache.projected[[mi, t]] - cache.selected_value[[mi, t]];
                        d_proj[[mi, t]] += weights.beta * scale * diff;
                        grads.codebooks[j][[k, mi]] -= scale * diff;
                    }
                }
            }
            if weights.balancing != 0.0 {
                if let (Some(dist), Some(post)) = (cache.distances.as_ref(), cache.posterior.as_ref()) {
                    let k_size = post.nrows();
                    // d loss / d mean posterior
                    let mut d_mean = vec![0.0; k_size];
                    for (k, dm) in d_mean.iter_mut().enumerate() {
                        let mean_p = post.row(k).sum() / frames;
                        *dm = -weights.balancing / (k_size as f64 * (mean_p + LOG_EPS));
                    }
                    for t in 0..self.frames {
                        // Softmax backward over a_k = -dist_k.
                        let mut inner = 0.0;
                        for k in 0..k_size {
                            inner += d_mean[k] / frames * post[[k, t]];
                        }
                        for k in 0..k_size {
                            let da = post[[k, t]] * (d_mean[k] / frames - inner);
                            let ddist = -da;
                            let scale = ddist / dist[[k, t]];
                            for mi in 0..stage.code_dim() {
                                let diff = cache.projected[[mi, t]] - stage.codebook[[k, mi]];
                                d_proj[[mi, t]] += scale * diff;
                                grads.codebooks[j][[k, mi]] -= scale * diff;
                            }
                        }
                    }
                }
            }
            grads.ivq_down[j] += &d_proj.dot(&cache.input.t());
            g_residual += &stage.down_proj.t().dot(&d_proj);
        }
        for (i, (stage, cache)) in cfg.sq_stages.iter().zip(&self.sq).enumerate().rev() {
            let d_out = d_z_hat - &g_residual;
            grads.sq_up[i] += &d_out.dot(&cache.value.t());
            let mut d_proj = stage.up_proj.t().dot(&d_out);
            // Rounding is straight-through; tanh and the grid scale are exact.
            for t in 0..self.frames {
                for (bi, &l) in stage.levels().iter().enumerate() {
                    let h = stage.half_widths()[bi];
                    let tu = cache.tanh_u[[bi, t]];
                    d_proj[[bi, t]] *= 2.0 / l as f64 * h * (1.0 - tu * tu);
                }
            }
            grads.sq_down[i] += &d_proj.dot(&cache.input.t());
            g_residual += &stage.down_proj.t().dot(&d_proj);
        }
        RsvqBackward {
            d_latent: g_residual,
            grads,
        }
    }
}

/// Frozen discretization decisions captured at a base point.
pub struct RsvqSnapshot {
    sq_g_base: Vec<Array2<f64>>,
    sq_value_base: Vec<Array2<f64>>,
    ivq_projected_base: Vec<Array2<f64>>,
    ivq_selected_value: Vec<Array2<f64>>,
}

/// Output of [`forward_frozen`].
pub struct FrozenOut {
    pub z_hat: Array2<f64>,
    pub commitment: f64,
    pub balancing: f64,
}

/// Differentiable surrogate the straight-through backward differentiates:
/// each discretization is replaced by `continuous + frozen offset`, and the
/// stop-gradient sides of the commitment pair read from the snapshot. At the
/// base point the output equals the hard forward bit for bit.
pub fn forward_frozen(
    cfg: &QuantizerConfig,
    latents: &Array2<f64>,
    snapshot: &RsvqSnapshot,
    beta: f64,
) -> FrozenOut {
    let frames = latents.ncols();
    let mut residual = latents.clone();
    let mut z_hat: Array2<f64> = Array2::zeros(latents.dim());
    for (i, stage) in cfg.sq_stages.iter().enumerate() {
        let input = residual.clone();
        for t in 0..frames {
            let r_t = input.column(t).to_owned();
            let projected = stage.down_proj.dot(&r_t);
            let mut value_col = Array1::zeros(stage.coordinate_count());
            for (bi, &l) in stage.levels().iter().enumerate() {
                let h = stage.half_widths()[bi];
                let o = stage.offsets()[bi];
                let center = (o / h).atanh();
                let g = (projected[bi] + center).tanh() * h - o;
                value_col[bi] = snapshot.sq_value_base[i][[bi, t]]
                    + 2.0 / l as f64 * (g - snapshot.sq_g_base[i][[bi, t]]);
            }
            let s_hat = stage.up_proj.dot(&value_col);
            for di in 0..z_hat.nrows() {
                z_hat[[di, t]] += s_hat[di];
                residual[[di, t]] -= s_hat[di];
            }
        }
    }
    let mut commitment = 0.0;
    let mut balancing = 0.0;
    for (j, stage) in cfg.ivq_stages.iter().enumerate() {
        let input = residual.clone();
        let frozen_proj = &snapshot.ivq_projected_base[j];
        let frozen_sel = &snapshot.ivq_selected_value[j];
        let k_size = stage.codebook_size();
        let mut mean_post = vec![0.0; k_size];
        for t in 0..frames {
            let r_t = input.column(t).to_owned();
            let projected = stage.down_proj.dot(&r_t);
            // Straight-through value: frozen selection plus the live shift of
            // the projection; equals the selected codevector at the base point.
            let mut value_col = Array1::zeros(stage.code_dim());
            for mi in 0..stage.code_dim() {
                value_col[mi] =
                    frozen_sel[[mi, t]] + (projected[mi] - frozen_proj[[mi, t]]);
            }
            let v_hat = stage.up_proj.dot(&value_col);
            for di in 0..z_hat.nrows() {
                z_hat[[di, t]] += v_hat[di];
                residual[[di, t]] -= v_hat[di];
            }
            for mi in 0..stage.code_dim() {
                // Encoder half: live projection against the frozen selection.
                let d_enc = projected[mi] - frozen_sel[[mi, t]];
                commitment += beta * d_enc * d_enc;
            }
            // Codebook half: frozen projection against the live codevector
            // nearest at the base point.
            let k_base = nearest_row(frozen_sel, t, stage);
            for mi in 0..stage.code_dim() {
                let d_cb = frozen_proj[[mi, t]] - stage.codebook[[k_base, mi]];
                commitment += d_cb * d_cb;
            }
            // Soft posterior over live distances.
            let mut dists = vec![0.0; k_size];
            let mut max_a = f64::NEG_INFINITY;
            for (k, dk) in dists.iter_mut().enumerate() {
                let mut d2 = 0.0;
                for mi in 0..stage.code_dim() {
                    let diff = projected[mi] - stage.codebook[[k, mi]];
                    d2 += diff * diff;
                }
                *dk = (d2 + DIST_EPS).sqrt();
                max_a = max_a.max(-*dk);
            }
            let mut total = 0.0;
            let mut exps = vec![0.0; k_size];
            for k in 0..k_size {
                exps[k] = (-dists[k] - max_a).exp();
                total += exps[k];
            }
            for k in 0..k_size {
                mean_post[k] += exps[k] / total / frames as f64;
            }
        }
        for p in mean_post {
            balancing -= (p + LOG_EPS).ln() / k_size as f64;
        }
    }
    FrozenOut {
        z_hat,
        commitment: commitment / frames.max(1) as f64,
        balancing,
    }
}

/// Recover the frozen selection index by matching the stored codevector.
fn nearest_row(frozen_sel: &Array2<f64>, t: usize, stage: &crate::rsvq::IvqParams) -> usize {
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for k in 0..stage.codebook_size() {
        let mut d2 = 0.0;
        for mi in 0..stage.code_dim() {
            let diff = frozen_sel[[mi, t]] - stage.codebook[[k, mi]];
            d2 += diff * diff;
        }
        if d2 < best_d2 {
            best_d2 = d2;
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rsvq::{IvqSchedule, QuantizerSchedule, SqSchedule};
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(seed: u64) -> QuantizerConfig {
        let schedule = QuantizerSchedule {
            latent_dim: 6,
            sq: vec![SqSchedule {
                levels: vec![4, 5, 4],
            }],
            ivq: vec![IvqSchedule {
                code_dim: 3,
                codebook_size: 8,
            }],
        };
        QuantizerConfig::init(&schedule, seed).unwrap()
    }

    #[test]
    fn training_forward_matches_plain_quantize() {
        let cfg = tiny_config(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let latents = Array2::from_shape_fn((6, 20), |_| rng.gen_range(-1.5..1.5));
        let fwd = forward(&cfg, &latents, true).unwrap();
        for t in 0..20 {
            let z = latents.column(t).to_owned();
            let result = cfg.quantize(&z).unwrap();
            assert_eq!(fwd.z_hat.column(t), result.z_hat);
            assert_eq!(fwd.tokens_at(t), result.tokens);
            assert_eq!(
                fwd.final_residual.column(t),
                *result.residuals.last().unwrap()
            );
        }
    }

    #[test]
    fn frozen_forward_equals_hard_forward_at_base_point() {
        let cfg = tiny_config(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let latents = Array2::from_shape_fn((6, 10), |_| rng.gen_range(-1.5..1.5));
        let fwd = forward(&cfg, &latents, true).unwrap();
        let frozen = forward_frozen(&cfg, &latents, &fwd.snapshot(), 0.25);
        assert_eq!(frozen.z_hat, fwd.z_hat);
        assert!((frozen.commitment - fwd.commitment_value(0.25)).abs() < 1e-12);
        assert!((frozen.balancing - fwd.balancing_value()).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradient() {
        let cfg = tiny_config(6);
        let latents = Array2::from_elem((6, 4), 0.37);
        let fwd = forward(&cfg, &latents, false).unwrap();
        let back = fwd.backward(
            &cfg,
            &Array2::zeros((6, 4)),
            &AuxWeights {
                commit: 0.0,
                beta: 0.25,
                balancing: 0.0,
            },
        );
        assert!(back.d_latent.iter().all(|&g| g == 0.0));
        assert!(back.grads.sq_down[0].iter().all(|&g| g == 0.0));
        assert!(back.grads.codebooks[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn balancing_value_matches_uniform_bound() {
        // A posterior that is exactly uniform gives ln K.
        let cfg = tiny_config(7);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let latents = Array2::from_shape_fn((6, 30), |_| rng.gen_range(-1.0..1.0));
        let fwd = forward(&cfg, &latents, true).unwrap();
        let k = cfg.ivq_stages[0].codebook_size() as f64;
        assert!(fwd.balancing_value() >= k.ln() - 1e-9);
    }
}
