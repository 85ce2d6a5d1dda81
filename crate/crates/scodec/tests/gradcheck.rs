//! Finite-difference checks for every analytic gradient path.
//!
//! Each check evaluates the differentiable surrogate that the backward pass
//! actually differentiates (discretizations frozen at the base point),
//! compares central differences at step 1e-5 against the analytic gradient
//! at relative tolerance 1e-4, and rejects base points that sit within 1e-3
//! of a rounding or Voronoi boundary.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use scodec::rsvq::train::{forward, forward_frozen, AuxWeights};
use scodec::rsvq::{IvqSchedule, QuantizerConfig, QuantizerSchedule, SqSchedule};

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const BOUNDARY_MARGIN: f64 = 1e-3;

fn check_close(analytic: f64, numeric: f64, what: &str) {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        assert!(
            (analytic - numeric).abs() < 1e-7,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
        return;
    }
    let rel = (analytic - numeric).abs() / scale;
    assert!(
        rel < REL_TOL,
        "{what}: analytic {analytic} vs numeric {numeric} (rel {rel:.2e})"
    );
}

fn rsvq_test_config(seed: u64) -> QuantizerConfig {
    let schedule = QuantizerSchedule {
        latent_dim: 5,
        sq: vec![SqSchedule {
            levels: vec![4, 5, 9],
        }],
        ivq: vec![
            IvqSchedule {
                code_dim: 3,
                codebook_size: 7,
            },
            IvqSchedule {
                code_dim: 4,
                codebook_size: 5,
            },
        ],
    };
    QuantizerConfig::init(&schedule, seed).unwrap()
}

/// Scalar loss over the frozen surrogate: a fixed linear functional of the
/// quantized sequence plus the auxiliary terms.
fn frozen_loss(
    cfg: &QuantizerConfig,
    latents: &Array2<f64>,
    snapshot: &scodec::rsvq::train::RsvqSnapshot,
    probe: &Array2<f64>,
    weights: &AuxWeights,
) -> f64 {
    let out = forward_frozen(cfg, latents, snapshot, weights.beta);
    let mut loss = 0.0;
    for (a, b) in out.z_hat.iter().zip(probe.iter()) {
        loss += a * b;
    }
    loss + weights.commit * out.commitment + weights.balancing * out.balancing
}

/// Draw a base point whose rounding arguments and Voronoi margins stay clear
/// of their boundaries.
fn clear_base_point(
    cfg: &QuantizerConfig,
    rng: &mut ChaCha8Rng,
    frames: usize,
) -> (Array2<f64>, scodec::rsvq::train::RsvqForward) {
    loop {
        let latents = Array2::from_shape_fn((cfg.latent_dim(), frames), |_| rng.gen_range(-1.5..1.5));
        let fwd = forward(cfg, &latents, true).unwrap();
        if fwd.boundary_margin(cfg) > BOUNDARY_MARGIN {
            return (latents, fwd);
        }
    }
}

#[test]
fn rsvq_full_gradient_matches_finite_differences() {
    let cfg = rsvq_test_config(11);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let weights = AuxWeights {
        commit: 0.7,
        beta: 0.25,
        balancing: 0.9,
    };
    let (latents, fwd) = clear_base_point(&cfg, &mut rng, 3);
    let snapshot = fwd.snapshot();
    let probe = Array2::from_shape_fn(fwd.z_hat.dim(), |_| rng.gen_range(-1.0..1.0));
    let back = fwd.backward(&cfg, &probe, &weights);

    // Latent gradient.
    let mut latents_fd = latents.clone();
    for idx in 0..latents.len() {
        let (r, c) = (idx / latents.ncols(), idx % latents.ncols());
        let orig = latents_fd[[r, c]];
        latents_fd[[r, c]] = orig + FD_STEP;
        let plus = frozen_loss(&cfg, &latents_fd, &snapshot, &probe, &weights);
        latents_fd[[r, c]] = orig - FD_STEP;
        let minus = frozen_loss(&cfg, &latents_fd, &snapshot, &probe, &weights);
        latents_fd[[r, c]] = orig;
        check_close(
            back.d_latent[[r, c]],
            (plus - minus) / (2.0 * FD_STEP),
            &format!("latent[{r},{c}]"),
        );
    }

    // Parameter gradients, via a perturbed copy of the whole quantizer.
    let fd_param = |mutate: &dyn Fn(&mut QuantizerConfig, f64)| -> (f64, f64) {
        let mut plus_cfg = cfg.clone();
        mutate(&mut plus_cfg, FD_STEP);
        let plus = frozen_loss(&plus_cfg, &latents, &snapshot, &probe, &weights);
        let mut minus_cfg = cfg.clone();
        mutate(&mut minus_cfg, -FD_STEP);
        let minus = frozen_loss(&minus_cfg, &latents, &snapshot, &probe, &weights);
        (plus, minus)
    };

    for i in 0..cfg.sq_stages.len() {
        let (rows, cols) = cfg.sq_stages[i].down_proj.dim();
        for r in 0..rows {
            for c in 0..cols {
                let fd = fd_param(&|q: &mut QuantizerConfig, eps: f64| {
                    q.sq_stages[i].down_proj[[r, c]] += eps;
                });
                check_close(
                    back.grads.sq_down[i][[r, c]],
                    (fd.0 - fd.1) / (2.0 * FD_STEP),
                    &format!("sq{i}.down[{r},{c}]"),
                );
            }
        }
        let (rows, cols) = cfg.sq_stages[i].up_proj.dim();
        for r in 0..rows {
            for c in 0..cols {
                let fd = fd_param(&|q: &mut QuantizerConfig, eps: f64| {
                    q.sq_stages[i].up_proj[[r, c]] += eps;
                });
                check_close(
                    back.grads.sq_up[i][[r, c]],
                    (fd.0 - fd.1) / (2.0 * FD_STEP),
                    &format!("sq{i}.up[{r},{c}]"),
                );
            }
        }
    }
    for j in 0..cfg.ivq_stages.len() {
        let (rows, cols) = cfg.ivq_stages[j].down_proj.dim();
        for r in 0..rows {
            for c in 0..cols {
                let fd = fd_param(&|q: &mut QuantizerConfig, eps: f64| {
                    q.ivq_stages[j].down_proj[[r, c]] += eps;
                });
                check_close(
                    back.grads.ivq_down[j][[r, c]],
                    (fd.0 - fd.1) / (2.0 * FD_STEP),
                    &format!("ivq{j}.down[{r},{c}]"),
                );
            }
        }
        let (rows, cols) = cfg.ivq_stages[j].up_proj.dim();
        for r in 0..rows {
            for c in 0..cols {
                let fd = fd_param(&|q: &mut QuantizerConfig, eps: f64| {
                    q.ivq_stages[j].up_proj[[r, c]] += eps;
                });
                check_close(
                    back.grads.ivq_up[j][[r, c]],
                    (fd.0 - fd.1) / (2.0 * FD_STEP),
                    &format!("ivq{j}.up[{r},{c}]"),
                );
            }
        }
        let (rows, cols) = cfg.ivq_stages[j].codebook.dim();
        for r in 0..rows {
            for c in 0..cols {
                let fd = fd_param(&|q: &mut QuantizerConfig, eps: f64| {
                    q.ivq_stages[j].codebook[[r, c]] += eps;
                });
                check_close(
                    back.grads.codebooks[j][[r, c]],
                    (fd.0 - fd.1) / (2.0 * FD_STEP),
                    &format!("ivq{j}.codebook[{r},{c}]"),
                );
            }
        }
    }
}

#[test]
fn single_sq_stage_jacobian_is_projection_sandwich() {
    // With the rounding frozen, the stage Jacobian is
    // U * diag(2/l * h * tanh') * W; finite differences over the frozen
    // surrogate must reproduce it.
    let schedule = QuantizerSchedule {
        latent_dim: 4,
        sq: vec![SqSchedule {
            levels: vec![4, 9],
        }],
        ivq: vec![],
    };
    let cfg = QuantizerConfig::init(&schedule, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (latents, fwd) = clear_base_point(&cfg, &mut rng, 1);
    let snapshot = fwd.snapshot();
    let weights = AuxWeights {
        commit: 0.0,
        beta: 0.0,
        balancing: 0.0,
    };
    for out_dim in 0..4 {
        let mut probe = Array2::zeros((4, 1));
        probe[[out_dim, 0]] = 1.0;
        let back = fwd.backward(&cfg, &probe, &weights);
        for in_dim in 0..4 {
            let mut shifted = latents.clone();
            let orig = shifted[[in_dim, 0]];
            shifted[[in_dim, 0]] = orig + FD_STEP;
            let plus = frozen_loss(&cfg, &shifted, &snapshot, &probe, &weights);
            shifted[[in_dim, 0]] = orig - FD_STEP;
            let minus = frozen_loss(&cfg, &shifted, &snapshot, &probe, &weights);
            check_close(
                back.d_latent[[in_dim, 0]],
                (plus - minus) / (2.0 * FD_STEP),
                &format!("jacobian[{out_dim},{in_dim}]"),
            );
        }
    }
}

#[test]
fn ivq_straight_through_jacobian_is_up_dot_down() {
    // Inside a Voronoi cell the straight-through Jacobian of a single vector
    // stage is exactly U_v * W_v.
    let schedule = QuantizerSchedule {
        latent_dim: 3,
        sq: vec![],
        ivq: vec![IvqSchedule {
            code_dim: 2,
            codebook_size: 6,
        }],
    };
    let cfg = QuantizerConfig::init(&schedule, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (latents, fwd) = clear_base_point(&cfg, &mut rng, 1);
    let snapshot = fwd.snapshot();
    let weights = AuxWeights {
        commit: 0.0,
        beta: 0.0,
        balancing: 0.0,
    };
    let expected = cfg.ivq_stages[0].up_proj.dot(&cfg.ivq_stages[0].down_proj);
    for out_dim in 0..3 {
        let mut probe = Array2::zeros((3, 1));
        probe[[out_dim, 0]] = 1.0;
        let back = fwd.backward(&cfg, &probe, &weights);
        for in_dim in 0..3 {
            check_close(
                back.d_latent[[in_dim, 0]],
                expected[[out_dim, in_dim]],
                &format!("ste[{out_dim},{in_dim}] analytic vs U.W"),
            );
            let mut shifted = latents.clone();
            let orig = shifted[[in_dim, 0]];
            shifted[[in_dim, 0]] = orig + FD_STEP;
            let plus = frozen_loss(&cfg, &shifted, &snapshot, &probe, &weights);
            shifted[[in_dim, 0]] = orig - FD_STEP;
            let minus = frozen_loss(&cfg, &shifted, &snapshot, &probe, &weights);
            check_close(
                expected[[out_dim, in_dim]],
                (plus - minus) / (2.0 * FD_STEP),
                &format!("ste[{out_dim},{in_dim}] U.W vs fd"),
            );
        }
    }
}

#[test]
fn gradcheck_at_many_random_clear_points() {
    // 100 base points, latent gradient only, with boundary rejection.
    let cfg = rsvq_test_config(13);
    let mut rng = ChaCha8Rng::seed_from_u64(555);
    let weights = AuxWeights::default();
    for trial in 0..100 {
        let (latents, fwd) = clear_base_point(&cfg, &mut rng, 1);
        let snapshot = fwd.snapshot();
        let probe = Array2::from_shape_fn(fwd.z_hat.dim(), |_| rng.gen_range(-1.0..1.0));
        let back = fwd.backward(&cfg, &probe, &weights);
        let r = rng.gen_range(0..latents.nrows());
        let mut shifted = latents.clone();
        let orig = shifted[[r, 0]];
        shifted[[r, 0]] = orig + FD_STEP;
        let plus = frozen_loss(&cfg, &shifted, &snapshot, &probe, &weights);
        shifted[[r, 0]] = orig - FD_STEP;
        let minus = frozen_loss(&cfg, &shifted, &snapshot, &probe, &weights);
        check_close(
            back.d_latent[[r, 0]],
            (plus - minus) / (2.0 * FD_STEP),
            &format!("trial {trial} latent[{r}]"),
        );
    }
}

// ---------------------------------------------------------------------------
// Neural layers
// ---------------------------------------------------------------------------

use scodec::neural::block::{gelu_backward, gelu_forward_cached, Grn, GrnGrads, LayerNorm, LayerNormGrads, Mcnx2Block, BlockGrads};
use scodec::neural::conv::{
    CausalConv1d, CausalConvTranspose1d, ChannelLinear, ConvGrads, ConvTransposeGrads, DepthwiseCausalConv,
    DepthwiseGrads, LinearGrads,
};
use scodec::neural::train::{CodecModel, ModelGrads};
use scodec::CodecConfig;

/// Linear probe loss over an output matrix.
fn probe_loss(y: &Array2<f64>, probe: &Array2<f64>) -> f64 {
    y.iter().zip(probe.iter()).map(|(a, b)| a * b).sum()
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

/// Inputs kept away from zero so the |x| kink in the response norm never
/// sits within a finite-difference step.
fn rand_mat_nonzero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.gen_range(0.2..1.0)
    })
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for (k, s, d) in [(3usize, 1usize, 1usize), (4, 2, 1), (3, 1, 2)] {
        let mut layer = CausalConv1d::new(3, 2, k, s, d);
        layer.weight.map_inplace(|v| *v = rng.gen_range(-1.0..1.0));
        layer.bias.map_inplace(|v| *v = rng.gen_range(-0.5..0.5));
        let x = rand_mat(&mut rng, 3, 8);
        let probe = rand_mat(&mut rng, 2, 8 / s);
        let (y, cache) = layer.forward_cached(&x).unwrap();
        assert_eq!(y.ncols(), 8 / s);
        let mut grads = ConvGrads::zeros(&layer);
        let d_x = layer.backward(&cache, &probe, &mut grads);
        // Input gradient.
        for r in 0..3 {
            for c in 0..8 {
                let mut plus = x.clone();
                plus[[r, c]] += FD_STEP;
                let mut minus = x.clone();
                minus[[r, c]] -= FD_STEP;
                let fd = (probe_loss(&layer.forward(&plus).unwrap(), &probe)
                    - probe_loss(&layer.forward(&minus).unwrap(), &probe))
                    / (2.0 * FD_STEP);
                check_close(d_x[[r, c]], fd, &format!("conv dx[{r},{c}] k={k} s={s} d={d}"));
            }
        }
        // Weight gradient (sampled).
        for idx in 0..layer.weight.len() {
            let (r, c) = (idx / layer.weight.ncols(), idx % layer.weight.ncols());
            let mut plus = layer.clone();
            plus.weight[[r, c]] += FD_STEP;
            let mut minus = layer.clone();
            minus.weight[[r, c]] -= FD_STEP;
            let fd = (probe_loss(&plus.forward(&x).unwrap(), &probe)
                - probe_loss(&minus.forward(&x).unwrap(), &probe))
                / (2.0 * FD_STEP);
            check_close(grads.weight[[r, c]], fd, &format!("conv dw[{r},{c}]"));
        }
        for b in 0..2 {
            let mut plus = layer.clone();
            plus.bias[b] += FD_STEP;
            let mut minus = layer.clone();
            minus.bias[b] -= FD_STEP;
            let fd = (probe_loss(&plus.forward(&x).unwrap(), &probe)
                - probe_loss(&minus.forward(&x).unwrap(), &probe))
                / (2.0 * FD_STEP);
            check_close(grads.bias[b], fd, &format!("conv db[{b}]"));
        }
    }
}

#[test]
fn transposed_conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut layer = CausalConvTranspose1d::new(2, 3, 4, 2);
    layer.weight.map_inplace(|v| *v = rng.gen_range(-1.0..1.0));
    layer.bias.map_inplace(|v| *v = rng.gen_range(-0.5..0.5));
    let x = rand_mat(&mut rng, 2, 5);
    let probe = rand_mat(&mut rng, 3, 10);
    let (_, cache) = layer.forward_cached(&x).unwrap();
    let mut grads = ConvTransposeGrads::zeros(&layer);
    let d_x = layer.backward(&cache, &probe, &mut grads);
    for r in 0..2 {
        for c in 0..5 {
            let mut plus = x.clone();
            plus[[r, c]] += FD_STEP;
            let mut minus = x.clone();
            minus[[r, c]] -= FD_STEP;
            let fd = (probe_loss(&layer.forward(&plus).unwrap(), &probe)
                - probe_loss(&layer.forward(&minus).unwrap(), &probe))
                / (2.0 * FD_STEP);
            check_close(d_x[[r, c]], fd, &format!("tconv dx[{r},{c}]"));
        }
    }
    for idx in 0..layer.weight.len() {
        let (r, c) = (idx / layer.weight.ncols(), idx % layer.weight.ncols());
        let mut plus = layer.clone();
        plus.weight[[r, c]] += FD_STEP;
        let mut minus = layer.clone();
        minus.weight[[r, c]] -= FD_STEP;
        let fd = (probe_loss(&plus.forward(&x).unwrap(), &probe)
            - probe_loss(&minus.forward(&x).unwrap(), &probe))
            / (2.0 * FD_STEP);
        check_close(grads.weight[[r, c]], fd, &format!("tconv dw[{r},{c}]"));
    }
}

#[test]
fn depthwise_linear_and_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    // Depthwise.
    let mut dw = DepthwiseCausalConv::new(3, 4);
    dw.weight.map_inplace(|v| *v = rng.gen_range(-1.0..1.0));
    dw.bias.map_inplace(|v| *v = rng.gen_range(-0.5..0.5));
    let x = rand_mat(&mut rng, 3, 6);
    let probe = rand_mat(&mut rng, 3, 6);
    let (_, cache) = dw.forward_cached(&x);
    let mut grads = DepthwiseGrads::zeros(&dw);
    let d_x = dw.backward(&cache, &probe, &mut grads);
    for r in 0..3 {
        for c in 0..6 {
            let mut plus = x.clone();
            plus[[r, c]] += FD_STEP;
            let mut minus = x.clone();
            minus[[r, c]] -= FD_STEP;
            let fd = (probe_loss(&dw.forward_cached(&plus).0, &probe)
                - probe_loss(&dw.forward_cached(&minus).0, &probe))
                / (2.0 * FD_STEP);
            check_close(d_x[[r, c]], fd, &format!("dw dx[{r},{c}]"));
        }
    }
    for idx in 0..dw.weight.len() {
        let (r, c) = (idx / 4, idx % 4);
        let mut plus = dw.clone();
        plus.weight[[r, c]] += FD_STEP;
        let mut minus = dw.clone();
        minus.weight[[r, c]] -= FD_STEP;
        let fd = (probe_loss(&plus.forward_cached(&x).0, &probe)
            - probe_loss(&minus.forward_cached(&x).0, &probe))
            / (2.0 * FD_STEP);
        check_close(grads.weight[[r, c]], fd, &format!("dw dw[{r},{c}]"));
    }
    // Channel linear.
    let mut lin = ChannelLinear::new(3, 2);
    lin.weight.map_inplace(|v| *v = rng.gen_range(-1.0..1.0));
    lin.bias.map_inplace(|v| *v = rng.gen_range(-0.5..0.5));
    let probe2 = rand_mat(&mut rng, 2, 6);
    let (_, lcache) = lin.forward_cached(&x);
    let mut lgrads = LinearGrads::zeros(&lin);
    let d_x = lin.backward(&lcache, &probe2, &mut lgrads);
    for r in 0..3 {
        for c in 0..6 {
            let mut plus = x.clone();
            plus[[r, c]] += FD_STEP;
            let mut minus = x.clone();
            minus[[r, c]] -= FD_STEP;
            let fd = (probe_loss(&lin.forward(&plus), &probe2)
                - probe_loss(&lin.forward(&minus), &probe2))
                / (2.0 * FD_STEP);
            check_close(d_x[[r, c]], fd, &format!("linear dx[{r},{c}]"));
        }
    }
    // LayerNorm.
    let ln = LayerNorm::new(3, 1e-6);
    let (_, ncache) = ln.forward_cached(&x);
    let mut ngrads = LayerNormGrads::zeros(&ln);
    let d_x = ln.backward(&ncache, &probe, &mut ngrads);
    for r in 0..3 {
        for c in 0..6 {
            let mut plus = x.clone();
            plus[[r, c]] += FD_STEP;
            let mut minus = x.clone();
            minus[[r, c]] -= FD_STEP;
            let fd = (probe_loss(&ln.forward_cached(&plus).0, &probe)
                - probe_loss(&ln.forward_cached(&minus).0, &probe))
                / (2.0 * FD_STEP);
            check_close(d_x[[r, c]], fd, &format!("ln dx[{r},{c}]"));
        }
    }
    // GELU.
    let (_, gcache) = gelu_forward_cached(&x);
    let d_x = gelu_backward(&gcache, &probe);
    for r in 0..3 {
        for c in 0..6 {
            let mut plus = x.clone();
            plus[[r, c]] += FD_STEP;
            let mut minus = x.clone();
            minus[[r, c]] -= FD_STEP;
            let fd = (probe_loss(&gelu_forward_cached(&plus).0, &probe)
                - probe_loss(&gelu_forward_cached(&minus).0, &probe))
                / (2.0 * FD_STEP);
            check_close(d_x[[r, c]], fd, &format!("gelu dx[{r},{c}]"));
        }
    }
    // Response norm, away from the |x| kink.
    let mut grn = Grn::new(3, 1e-6);
    grn.gamma.map_inplace(|v| *v = rng.gen_range(-0.5..0.5));
    grn.beta.map_inplace(|v| *v = rng.gen_range(-0.2..0.2));
    let xg = rand_mat_nonzero(&mut rng, 3, 6);
    let (_, gc) = grn.forward_cached(&xg);
    let mut ggrads = GrnGrads::zeros(&grn);
    let d_x = grn.backward(&gc, &probe, &mut ggrads);
    for r in 0..3 {
        for c in 0..6 {
            let mut plus = xg.clone();
            plus[[r, c]] += FD_STEP;
            let mut minus = xg.clone();
            minus[[r, c]] -= FD_STEP;
            let fd = (probe_loss(&grn.forward_cached(&plus).0, &probe)
                - probe_loss(&grn.forward_cached(&minus).0, &probe))
                / (2.0 * FD_STEP);
            check_close(d_x[[r, c]], fd, &format!("grn dx[{r},{c}]"));
        }
    }
    for r in 0..3 {
        let mut plus = grn.clone();
        plus.gamma[r] += FD_STEP;
        let mut minus = grn.clone();
        minus.gamma[r] -= FD_STEP;
        let fd = (probe_loss(&plus.forward_cached(&xg).0, &probe)
            - probe_loss(&minus.forward_cached(&xg).0, &probe))
            / (2.0 * FD_STEP);
        check_close(ggrads.gamma[r], fd, &format!("grn dgamma[{r}]"));
    }
}

#[test]
fn residual_block_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut block = Mcnx2Block::new(2, 3, 2, 1e-6);
    block.dw.weight.map_inplace(|v| *v = rng.gen_range(-0.5..0.5));
    block.dw.bias.map_inplace(|v| *v = rng.gen_range(-0.2..0.2));
    block.expand.weight.map_inplace(|v| *v = rng.gen_range(-0.5..0.5));
    block.expand.bias.map_inplace(|v| *v = rng.gen_range(0.3..0.6));
    block.grn.gamma.map_inplace(|v| *v = rng.gen_range(-0.5..0.5));
    block.project.weight.map_inplace(|v| *v = rng.gen_range(-0.5..0.5));
    let x = rand_mat(&mut rng, 2, 8);
    let probe = rand_mat(&mut rng, 2, 8);
    let (_, cache) = block.forward_cached(&x);
    let mut grads = BlockGrads::zeros(&block);
    let d_x = block.backward(&cache, &probe, &mut grads);
    for r in 0..2 {
        for c in 0..8 {
            let mut plus = x.clone();
            plus[[r, c]] += FD_STEP;
            let mut minus = x.clone();
            minus[[r, c]] -= FD_STEP;
            let fd = (probe_loss(&block.forward(&plus), &probe)
                - probe_loss(&block.forward(&minus), &probe))
                / (2.0 * FD_STEP);
            check_close(d_x[[r, c]], fd, &format!("block dx[{r},{c}]"));
        }
    }
    for idx in 0..block.expand.weight.len() {
        let (r, c) = (idx / 2, idx % 2);
        let mut plus = block.clone();
        plus.expand.weight[[r, c]] += FD_STEP;
        let mut minus = block.clone();
        minus.expand.weight[[r, c]] -= FD_STEP;
        let fd = (probe_loss(&plus.forward(&x), &probe)
            - probe_loss(&minus.forward(&x), &probe))
            / (2.0 * FD_STEP);
        check_close(grads.expand.weight[[r, c]], fd, &format!("block expand dw[{r},{c}]"));
    }
}

// ---------------------------------------------------------------------------
// End-to-end micro model
// ---------------------------------------------------------------------------

fn micro_codec() -> CodecConfig {
    let mut cfg = CodecConfig::profile("low", 16000).unwrap();
    cfg.net.bins = 6;
    cfg.net.hidden = 6;
    cfg.net.latent_dim = 4;
    cfg.net.resample = 4;
    cfg.net.num_blocks = 2;
    cfg.net.io_kernel = 3;
    cfg.net.dw_kernel = 3;
    cfg.net.expansion = 2;
    cfg.schedule.latent_dim = 4;
    cfg.schedule.sq[0].levels = vec![4, 5];
    cfg.schedule.ivq[0].code_dim = 3;
    cfg.schedule.ivq[0].codebook_size = 7;
    cfg.schedule.ivq[1].code_dim = 3;
    cfg.schedule.ivq[1].codebook_size = 5;
    cfg
}

/// End-to-end loss with discretizations frozen at the base point:
/// mse + commit * commitment + balancing * balancing.
fn e2e_frozen_loss(
    model: &CodecModel,
    frames: &Array2<f64>,
    snapshot: &scodec::rsvq::train::RsvqSnapshot,
    weights: &AuxWeights,
) -> f64 {
    let z = model.encoder.forward(frames).unwrap();
    let out = forward_frozen(&model.quantizer, &z, snapshot, weights.beta);
    let decoded = model.decoder.forward(&out.z_hat).unwrap();
    let count = decoded.len() as f64;
    let mse = decoded
        .iter()
        .zip(frames.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / count;
    mse + weights.commit * out.commitment + weights.balancing * out.balancing
}

#[test]
fn end_to_end_toy_loss_gradient_matches_finite_differences() {
    let cfg = micro_codec();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let weights = AuxWeights {
        commit: 0.8,
        beta: 0.25,
        balancing: 0.6,
    };
    // Find a base point clear of rounding and Voronoi boundaries.
    let (model, frames, fwd, z) = loop {
        let seed = rng.gen::<u64>();
        let model = CodecModel::init(&cfg, seed).unwrap();
        let frames = rand_mat(&mut rng, 6, 8);
        let z = model.encoder.forward(&frames).unwrap();
        let fwd = forward(&model.quantizer, &z, true).unwrap();
        if fwd.boundary_margin(&model.quantizer) > BOUNDARY_MARGIN {
            break (model, frames, fwd, z);
        }
    };
    let snapshot = fwd.snapshot();

    // Analytic gradients via the full backward chain.
    let (_, enc_cache) = model.encoder.forward_cached(&frames).unwrap();
    let (decoded, dec_cache) = model.decoder.forward_cached(&fwd.z_hat).unwrap();
    let count = decoded.len() as f64;
    let d_decoded = (&decoded - &frames).mapv(|d| 2.0 * d / count);
    let mut grads = ModelGrads::zeros(&model);
    let d_z_hat = model.decoder.backward(&dec_cache, &d_decoded, &mut grads.decoder);
    let rsvq_back = fwd.backward(&model.quantizer, &d_z_hat, &weights);
    grads.rsvq = rsvq_back.grads;
    model
        .encoder
        .backward(&enc_cache, &rsvq_back.d_latent, &mut grads.encoder);
    let _ = z;

    let base_loss = e2e_frozen_loss(&model, &frames, &snapshot, &weights);
    let check_base = {
        // Sanity: frozen loss at base equals the hard loss at base.
        let hard_mse = {
            let dec = model.decoder.forward(&fwd.z_hat).unwrap();
            dec.iter()
                .zip(frames.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / dec.len() as f64
        };
        hard_mse + weights.commit * fwd.commitment_value(weights.beta)
            + weights.balancing * fwd.balancing_value()
    };
    assert!((base_loss - check_base).abs() < 1e-12);

    // Compare a deterministic sample of parameter coordinates per tensor.
    let grad_slices = grads.slices();
    let tensor_count = grad_slices.len();
    let mut sampler = ChaCha8Rng::seed_from_u64(99);
    for ti in 0..tensor_count {
        let len = grad_slices[ti].len();
        let picks = if len <= 2 { len } else { 2 };
        for _ in 0..picks {
            let i = sampler.gen_range(0..len);
            let analytic = grad_slices[ti][i];
            let mut plus = model.clone();
            plus.param_slices()[ti][i] += FD_STEP;
            let mut minus = model.clone();
            minus.param_slices()[ti][i] -= FD_STEP;
            let fd = (e2e_frozen_loss(&plus, &frames, &snapshot, &weights)
                - e2e_frozen_loss(&minus, &frames, &snapshot, &weights))
                / (2.0 * FD_STEP);
            check_close(analytic, fd, &format!("e2e tensor {ti} elem {i}"));
        }
    }
}

#[test]
fn mse_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3001);
    let target = rand_mat(&mut rng, 3, 5);
    let x = rand_mat(&mut rng, 3, 5);
    let count = x.len() as f64;
    let mse = |m: &Array2<f64>| -> f64 {
        m.iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / count
    };
    for r in 0..3 {
        for c in 0..5 {
            let analytic = 2.0 * (x[[r, c]] - target[[r, c]]) / count;
            let mut plus = x.clone();
            plus[[r, c]] += FD_STEP;
            let mut minus = x.clone();
            minus[[r, c]] -= FD_STEP;
            let fd = (mse(&plus) - mse(&minus)) / (2.0 * FD_STEP);
            check_close(analytic, fd, &format!("mse[{r},{c}]"));
        }
    }
}
