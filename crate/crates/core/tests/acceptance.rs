//! Acceptance suite: the nine headline guarantees of this workspace, one
//! pass/fail line each, with every tolerance pinned as a named constant.
//!
//! The tests serialize on a shared lock so the latency measurements are not
//! distorted by concurrent work on the single benchmark core.

mod common;

use std::sync::Mutex;

use slak_core::bench::{bench_variant, flops_sweep, BenchConfig, BenchVariant};
use slak_core::conv::{
    conv2d_backward, conv2d_forward, conv2d_forward_reference, ConvSpec, Padding,
};
use slak_core::counting::{
    count_flops, count_params, plan_width, scaled_config, sparse_aware_flops, sparse_aware_params,
};
use slak_core::erf::{contribution_map, linear_stack_support, stack_contribution, ErfOptions};
use slak_core::gradcheck::check_grad;
use slak_core::model::{DwVariant, ForwardMode, Model, ModelConfig, ParamKind};
use slak_core::norm::{
    batchnorm_backward, batchnorm_forward, layernorm_backward, layernorm_forward, BatchNormState,
    LayerNormState, Mode,
};
use slak_core::rng::RngStream;
use slak_core::sparsity::{
    build_masks_global_topk, clamped_adaptation_step, cosine_adaptation_rate, snip_scores, Mask,
};
use slak_core::tensor::{norm_max_err, Tensor};
use slak_core::trainer::{metrics_csv, train, SyntheticTask, TrainConfig};

use common::{
    brute_force_global_topk, embed_center, fit_relative_residual, rand_tensor, random_conv_case,
};

/// Budget targets and tolerances.
const PARAMS_DENSE: f64 = 29e6;
const MACS_DENSE: f64 = 4.5e9;
const PARAMS_DECOMPOSED: f64 = 31e6;
const MACS_DECOMPOSED: f64 = 5.4e9;
const PARAMS_SPARSE_WIDE: f64 = 30e6;
const MACS_SPARSE_WIDE: f64 = 5.0e9;
const BUDGET_TOL: f64 = 0.05;
const SPARSE_BUDGET_TOL: f64 = 0.08;

/// Scaling-law fit quality.
const FIT_RESIDUAL_TOL: f64 = 0.05;

/// Latency thresholds at kernel 51, R = 64.
const MIN_DECOMPOSED_SPEEDUP: f64 = 2.5;
const LATENCY_PARITY_TOL: f64 = 0.25;

/// Finite-difference settings (64-bit probes).
const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
// Below this gradient magnitude the central-difference probe is dominated
// by f64 roundoff of the loss itself.
const FD_FLOOR: f64 = 1e-5;

/// Optimized-vs-reference convolution agreement.
const CONV_ORACLE_TOL: f64 = 1e-6;
const MIN_RANDOM_SHAPES: usize = 200;

/// Structural identities.
const STRUCTURE_TOL: f64 = 1e-6;

/// Training smoke thresholds.
const SMOKE_TARGET_ACC: f64 = 0.90;
const SMOKE_MAX_STEPS: usize = 2000;
const SMOKE_SPARSITY_TOL: f64 = 1e-5;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(slot: usize, name: &str, ok: bool, detail: &str) {
    println!("[{slot}/9] {name}: {} - {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "[{slot}/9] {name}: {detail}");
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

#[test]
fn a1_flop_and_param_budgets() {
    let _g = serial();
    let at = (224, 224);
    let dense = ModelConfig::convnext_t_shaped();
    let p_dense = count_params(&dense, None).unwrap() as f64;
    let m_dense = count_flops(&dense, at, None).unwrap();

    let deco = ModelConfig::slak_t();
    let p_deco = count_params(&deco, None).unwrap() as f64;
    let m_deco = count_flops(&deco, at, None).unwrap();

    let (_, wide_dims) = plan_width(&deco, 0.4).unwrap();
    let wide = scaled_config(&deco, &wide_dims);
    let p_wide = sparse_aware_params(&wide, 0.4).unwrap();
    let m_wide = sparse_aware_flops(&wide, at, 0.4).unwrap();

    let ok = within(p_dense, PARAMS_DENSE, BUDGET_TOL)
        && within(m_dense, MACS_DENSE, BUDGET_TOL)
        && within(p_deco, PARAMS_DECOMPOSED, BUDGET_TOL)
        && within(m_deco, MACS_DECOMPOSED, BUDGET_TOL)
        && within(p_wide, PARAMS_SPARSE_WIDE, SPARSE_BUDGET_TOL)
        && within(m_wide, MACS_SPARSE_WIDE, SPARSE_BUDGET_TOL);
    verdict(
        1,
        "flop/param budgets",
        ok,
        &format!(
            "dense {:.3}M/{:.3}G, decomposed {:.3}M/{:.3}G, sparse+wide {:.3}M/{:.3}G \
             (tol {:.0}%/{:.0}%)",
            p_dense / 1e6,
            m_dense / 1e9,
            p_deco / 1e6,
            m_deco / 1e9,
            p_wide / 1e6,
            m_wide / 1e9,
            BUDGET_TOL * 100.0,
            SPARSE_BUDGET_TOL * 100.0
        ),
    );
}

#[test]
fn a2_scaling_law_shape() {
    let _g = serial();
    let sizes = [7usize, 31, 51, 101, 151];
    let xs: Vec<f64> = sizes.iter().map(|&k| k as f64).collect();
    let dw = |variant: DwVariant| -> Vec<f64> {
        let template = ModelConfig { dw_variant: variant, ..ModelConfig::slak_t() };
        flops_sweep(&template, &sizes)
            .unwrap()
            .into_iter()
            .map(|r| r.dw_macs as f64)
            .collect()
    };
    let quadratic: [fn(f64) -> f64; 2] = [|x| x * x, |_| 1.0];
    let linear: [fn(f64) -> f64; 2] = [|x| x, |_| 1.0];

    let full = dw(DwVariant::Full);
    let deco = dw(DwVariant::DecomposedParallel);
    let full_quad = fit_relative_residual(&xs, &full, &quadratic);
    let full_lin = fit_relative_residual(&xs, &full, &linear);
    let deco_lin = fit_relative_residual(&xs, &deco, &linear);

    // The full variant must be quadratic and clearly not linear; the
    // decomposed variant must be linear.
    let ok = full_quad < FIT_RESIDUAL_TOL
        && deco_lin < FIT_RESIDUAL_TOL
        && full_lin > FIT_RESIDUAL_TOL;
    verdict(
        2,
        "scaling-law shape",
        ok,
        &format!(
            "full quadratic residual {full_quad:.2e} (linear {full_lin:.2e}), \
             decomposed linear residual {deco_lin:.2e} (tol {FIT_RESIDUAL_TOL})"
        ),
    );
}

#[test]
fn a3_latency_trend() {
    let _g = serial();
    let point = |variant| BenchConfig {
        variant,
        channels: 64,
        resolution: 64,
        kernel: 51,
        short_edge: 5,
        sparsity: 0.4,
        reps: 5,
        warmup: 1,
        batch: 8,
        seed: 0,
    };
    let dense = bench_variant(&point(BenchVariant::DenseSquare)).unwrap();
    let masked = bench_variant(&point(BenchVariant::SparseMaskedSquare)).unwrap();
    let skip =
        bench_variant(&point(BenchVariant::SparseDecomposedPair { zero_skip: true })).unwrap();

    let speedup = dense.latency_median_s / skip.latency_median_s;
    let parity = masked.latency_median_s / dense.latency_median_s;
    let ok = speedup >= MIN_DECOMPOSED_SPEEDUP && (parity - 1.0).abs() <= LATENCY_PARITY_TOL;
    verdict(
        3,
        "latency trend",
        ok,
        &format!(
            "sparse-decomposed speedup {speedup:.2}x (need >= {MIN_DECOMPOSED_SPEEDUP}), \
             masked/dense {parity:.2} (need within {LATENCY_PARITY_TOL}); \
             medians dense {:.1} ms, masked {:.1} ms, zero-skip {:.1} ms",
            dense.latency_median_s * 1e3,
            masked.latency_median_s * 1e3,
            skip.latency_median_s * 1e3
        ),
    );
}

#[test]
fn a4_adaptation_invariants() {
    let _g = serial();
    let mut rng = RngStream::new(11);

    // 100 randomized prune/grow cycles across multi-layer mask sets.
    let mut cycles = 0;
    while cycles < 100 {
        let layers = 1 + rng.below(3);
        let mut scores = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..layers {
            let n = 40 + rng.below(400);
            scores.push(rand_tensor::<f32>(&[n], &mut rng));
            weights.push(rand_tensor::<f32>(&[n], &mut rng));
        }
        let s = 0.2 + rng.uniform() * 0.6;
        let Ok(mut masks) = build_masks_global_topk(&scores, s) else { continue };
        let before_total: usize = masks.iter().map(Mask::nnz).sum();
        let p_t = rng.uniform();
        for (w, mask) in weights.iter_mut().zip(&mut masks) {
            let before = mask.nnz();
            let out = clamped_adaptation_step(w, mask, p_t, &mut rng).unwrap();
            assert_eq!(out.mask.nnz(), before, "per-layer nnz must be conserved");
            assert_eq!(out.pruned.len(), out.grown.len());
            assert!(out.pruned.iter().all(|i| !out.grown.contains(i)));
            *mask = out.mask;
        }
        let after_total: usize = masks.iter().map(Mask::nnz).sum();
        assert_eq!(before_total, after_total, "global sparsity must be constant");
        cycles += 1;
    }

    // Cosine endpoints, exactly.
    let p0 = 0.3;
    let horizon = 1000;
    let endpoints_exact = cosine_adaptation_rate(p0, 0, horizon).unwrap() == p0
        && cosine_adaptation_rate(p0, horizon, horizon).unwrap() == 0.0
        && cosine_adaptation_rate(p0, horizon / 2, horizon).unwrap() == p0 / 2.0;

    // Top-k mask seeding against the quadratic oracle, including one
    // instance at the 1e4-weight bound.
    let mut oracle_ok = true;
    let layouts: [&[usize]; 4] = [&[400, 900], &[1000, 2000, 100], &[64, 64, 64], &[10_000]];
    for (i, layout) in layouts.iter().enumerate() {
        let mut rng = RngStream::new(100 + i as u64);
        let ws: Vec<Tensor<f32>> =
            layout.iter().map(|&n| rand_tensor(&[n], &mut rng)).collect();
        let gs: Vec<Tensor<f32>> =
            layout.iter().map(|&n| rand_tensor(&[n], &mut rng)).collect();
        let scores: Vec<Tensor<f32>> =
            ws.iter().zip(&gs).map(|(w, g)| snip_scores(w, g).unwrap()).collect();
        let s = 0.3 + 0.1 * i as f64;
        let masks = build_masks_global_topk(&scores, s).unwrap();
        let expect = brute_force_global_topk(&scores, s);
        for (mask, bits) in masks.iter().zip(&expect) {
            if mask.bits() != bits.as_slice() {
                oracle_ok = false;
            }
        }
    }

    let ok = endpoints_exact && oracle_ok;
    verdict(
        4,
        "adaptation invariants",
        ok,
        &format!(
            "100 cycles conserve nnz; cosine endpoints exact: {endpoints_exact}; \
             top-k equals brute-force oracle on {} instances: {oracle_ok}",
            layouts.len()
        ),
    );
}

/// Worst relative FD error over the weights and input of one convolution.
fn conv_fd(seed: u64, spec: &ConvSpec, xshape: &[usize]) -> f64 {
    let mut s = RngStream::new(seed);
    let x = rand_tensor::<f64>(xshape, &mut s);
    let w = rand_tensor::<f64>(&spec.weight_shape(), &mut s);
    let y = conv2d_forward(&x, &w, None, spec).unwrap();
    let probe = rand_tensor::<f64>(y.shape(), &mut s);
    let loss = |yy: &Tensor<f64>| -> f64 {
        yy.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let (dx, dw, _) = conv2d_backward(&x, &w, spec, &probe).unwrap();

    let f_w = |v: &[f64]| {
        let wt = Tensor::from_values(w.shape(), v).unwrap();
        loss(&conv2d_forward(&x, &wt, None, spec).unwrap())
    };
    let err_w = check_grad("conv.w", f_w, w.data(), dw.data(), FD_EPS, FD_TOL, FD_FLOOR).unwrap();
    let f_x = |v: &[f64]| {
        let xt = Tensor::from_values(x.shape(), v).unwrap();
        loss(&conv2d_forward(&xt, &w, None, spec).unwrap())
    };
    let err_x = check_grad("conv.x", f_x, x.data(), dx.data(), FD_EPS, FD_TOL, FD_FLOOR).unwrap();
    err_w.max(err_x)
}

/// Worst relative FD error over every trainable parameter and the input of
/// a small end-to-end model.
fn model_fd(variant: DwVariant, mode: ForwardMode) -> f64 {
    let config = ModelConfig {
        stage_blocks: vec![1, 1],
        stage_dims: vec![4, 6],
        stage_kernels: vec![5, 5],
        short_edge: 3,
        dw_variant: variant,
        layer_scale_init: 0.8,
        drop_path_rate: 0.0,
        num_classes: 3,
        in_channels: 2,
        input_size: 16,
    };
    let mut model = Model::<f64>::build(&config, 5).unwrap();
    let mut s = RngStream::new(21);
    let x = rand_tensor::<f64>(&[2, 2, 16, 16], &mut s);
    let probe = rand_tensor::<f64>(&[2, 3], &mut s);
    let loss_of = |logits: &Tensor<f64>| -> f64 {
        logits.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };

    let (_, cache) = model.forward(&x, mode).unwrap();
    let (grads, dx) = model.backward(&cache, &probe).unwrap();

    let mut analytic = Vec::new();
    model.visit(&mut |id, kind, t| {
        if kind == ParamKind::Trainable {
            let g = grads.get(id);
            match g {
                Some(g) => analytic.extend(g.data().iter().copied()),
                None => analytic.extend(std::iter::repeat(0.0).take(t.len())),
            }
        }
    });
    let theta = model.trainable_vector();
    let cell = std::cell::RefCell::new(model);
    let f_theta = |v: &[f64]| {
        let mut m = cell.borrow_mut();
        m.set_trainable_vector(v).unwrap();
        let (logits, _) = m.forward(&x, mode).unwrap();
        loss_of(&logits)
    };
    let err_p =
        check_grad("model.params", f_theta, &theta, &analytic, FD_EPS, FD_TOL, FD_FLOOR).unwrap();
    cell.borrow_mut().set_trainable_vector(&theta).unwrap();

    let f_x = |v: &[f64]| {
        let xt = Tensor::from_values(x.shape(), v).unwrap();
        let (logits, _) = cell.borrow_mut().forward(&xt, mode).unwrap();
        loss_of(&logits)
    };
    let err_x = check_grad("model.input", f_x, x.data(), dx.data(), FD_EPS, FD_TOL, FD_FLOOR)
        .unwrap();
    err_p.max(err_x)
}

#[test]
fn a5_numerical_correctness() {
    let _g = serial();
    let mut worst_fd = 0.0f64;

    // Convolution variants: full strided, depthwise dilated, grouped.
    for (seed, spec, xshape) in [
        (
            1,
            ConvSpec {
                in_channels: 3,
                out_channels: 4,
                groups: 1,
                kernel_h: 3,
                kernel_w: 2,
                stride: 2,
                dilation: 1,
                padding: Padding::Explicit { top: 1, bottom: 0, left: 1, right: 1 },
            },
            vec![2usize, 3, 7, 6],
        ),
        (2, ConvSpec::dilated_depthwise(3, 5, 3, 2), vec![1, 3, 9, 9]),
        (
            3,
            ConvSpec {
                in_channels: 4,
                out_channels: 6,
                groups: 2,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                dilation: 1,
                padding: Padding::Same,
            },
            vec![2, 4, 6, 6],
        ),
    ] {
        worst_fd = worst_fd.max(conv_fd(seed, &spec, &xshape));
    }

    // Batch norm (both modes), layer norm, GELU.
    let mut s = RngStream::new(31);
    let x = rand_tensor::<f64>(&[3, 4, 5, 5], &mut s);
    let probe = rand_tensor::<f64>(&[3, 4, 5, 5], &mut s);
    for mode in [Mode::Train, Mode::Eval] {
        let state = BatchNormState::<f64>::new(4, 1e-5, 0.1);
        let (dx, _, _) = batchnorm_backward(&x, &state, mode, &probe).unwrap();
        let f = |v: &[f64]| {
            let xt = Tensor::from_values(x.shape(), v).unwrap();
            let mut st = state.clone();
            batchnorm_forward(&xt, &mut st, mode)
                .unwrap()
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        worst_fd = worst_fd
            .max(check_grad("bn.x", f, x.data(), dx.data(), FD_EPS, FD_TOL, FD_FLOOR).unwrap());
    }
    {
        let state = LayerNormState::<f64>::identity(4);
        let (dx, _, _) = layernorm_backward(&x, &state, &probe).unwrap();
        let f = |v: &[f64]| {
            let xt = Tensor::from_values(x.shape(), v).unwrap();
            layernorm_forward(&xt, &state)
                .unwrap()
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        worst_fd = worst_fd
            .max(check_grad("ln.x", f, x.data(), dx.data(), FD_EPS, FD_TOL, FD_FLOOR).unwrap());
    }
    {
        use slak_core::act::{gelu_backward, gelu_forward};
        let dx = gelu_backward(&x, &probe).unwrap();
        let f = |v: &[f64]| {
            let xt = Tensor::from_values(x.shape(), v).unwrap();
            gelu_forward(&xt).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        worst_fd = worst_fd
            .max(check_grad("gelu.x", f, x.data(), dx.data(), FD_EPS, FD_TOL, FD_FLOOR).unwrap());
    }

    // Whole small models (blocks, downsampling, head) across modes.
    worst_fd = worst_fd.max(model_fd(DwVariant::DecomposedParallel, ForwardMode::Train));
    worst_fd = worst_fd.max(model_fd(DwVariant::Full, ForwardMode::Eval));
    worst_fd = worst_fd.max(model_fd(DwVariant::StackedSmall { count: 2 }, ForwardMode::Eval));

    // Optimized convolution against the naive reference on random shapes.
    let mut usable = 0;
    let mut worst_ref = 0.0f64;
    let mut seed = 0u64;
    while usable < MIN_RANDOM_SHAPES && seed < 900 {
        if let Some((x, w, bias, spec)) = random_conv_case(seed) {
            let fast = conv2d_forward(&x, &w, bias.as_ref(), &spec).unwrap();
            let slow = conv2d_forward_reference(&x, &w, bias.as_ref(), &spec).unwrap();
            worst_ref = worst_ref.max(norm_max_err(&fast, &slow));
            usable += 1;
        }
        seed += 1;
    }

    let ok = worst_fd < FD_TOL && usable >= MIN_RANDOM_SHAPES && worst_ref < CONV_ORACLE_TOL;
    verdict(
        5,
        "numerical correctness",
        ok,
        &format!(
            "worst FD rel err {worst_fd:.2e} (tol {FD_TOL:.0e}); \
             {usable} random shapes vs reference, worst rel err {worst_ref:.2e} \
             (tol {CONV_ORACLE_TOL:.0e})"
        ),
    );
}

#[test]
fn a6_decomposition_structure() {
    let _g = serial();
    let mut s = RngStream::new(41);

    // Parallel rectangular + small branches equal one dense convolution of
    // the zero-embedded kernel sum.
    let (c, m, n) = (4usize, 9usize, 3usize);
    let x = rand_tensor::<f32>(&[2, c, 12, 12], &mut s);
    let wa = rand_tensor::<f32>(&[c, 1, m, n], &mut s);
    let wb = rand_tensor::<f32>(&[c, 1, n, m], &mut s);
    let wc = rand_tensor::<f32>(&[c, 1, 5, 5], &mut s);
    let mut branch_sum = conv2d_forward(&x, &wa, None, &ConvSpec::depthwise(c, m, n)).unwrap();
    branch_sum
        .axpy(1.0, &conv2d_forward(&x, &wb, None, &ConvSpec::depthwise(c, n, m)).unwrap())
        .unwrap();
    branch_sum
        .axpy(1.0, &conv2d_forward(&x, &wc, None, &ConvSpec::depthwise(c, 5, 5)).unwrap())
        .unwrap();
    let mut dense_kernel = embed_center(&wa, m, m);
    dense_kernel.axpy(1.0, &embed_center(&wb, m, m)).unwrap();
    dense_kernel.axpy(1.0, &embed_center(&wc, m, m)).unwrap();
    let dense_out =
        conv2d_forward(&x, &dense_kernel, None, &ConvSpec::depthwise(c, m, m)).unwrap();
    let embed_err = norm_max_err(&branch_sum, &dense_out);

    // One decomposed layer's receptive support is exactly the cross of the
    // two rectangles.
    let grid = 15usize;
    let center = grid / 2;
    let nonzero = |shape: &[usize], s: &mut RngStream| -> Tensor<f64> {
        let vals: Vec<f64> =
            (0..shape.iter().product::<usize>()).map(|_| 0.5 + s.uniform()).collect();
        Tensor::from_values(shape, &vals).unwrap()
    };
    let ka = nonzero(&[1, 1, m, n], &mut s);
    let kb = nonzero(&[1, 1, n, m], &mut s);
    let map_a = stack_contribution(&[(ka, 1)], grid).unwrap();
    let map_b = stack_contribution(&[(kb, 1)], grid).unwrap();
    let mut cross_ok = true;
    for r in 0..grid {
        for q in 0..grid {
            let dr = r.abs_diff(center);
            let dq = q.abs_diff(center);
            let in_a = dr <= m / 2 && dq <= n / 2;
            let in_b = dr <= n / 2 && dq <= m / 2;
            let measured = map_a.at(r, q) > 0.0 || map_b.at(r, q) > 0.0;
            if measured != (in_a || in_b) {
                cross_ok = false;
            }
        }
    }

    // Linear stacks hit the closed-form support exactly.
    let mut stack_ok = true;
    for chain in [vec![(3usize, 1usize), (3, 1)], vec![(5, 2), (3, 1)], vec![(7, 1), (5, 3)]] {
        let expected = linear_stack_support(&chain);
        let grid = expected + 6;
        let grid = if grid % 2 == 0 { grid + 1 } else { grid };
        let layers: Vec<(Tensor<f64>, usize)> = chain
            .iter()
            .map(|&(k, d)| (nonzero(&[1, 1, k, k], &mut s), d))
            .collect();
        let map = stack_contribution(&layers, grid).unwrap();
        let mut lo = grid;
        let mut hi = 0;
        for r in 0..grid {
            for q in 0..grid {
                if map.at(r, q) > 0.0 {
                    lo = lo.min(r).min(q);
                    hi = hi.max(r).max(q);
                }
            }
        }
        if hi - lo + 1 != expected {
            stack_ok = false;
        }
    }

    let ok = embed_err < STRUCTURE_TOL && cross_ok && stack_ok;
    verdict(
        6,
        "decomposition structure",
        ok,
        &format!(
            "branch-sum vs embedded dense rel err {embed_err:.2e} (tol {STRUCTURE_TOL:.0e}); \
             rectangular support is the exact cross: {cross_ok}; \
             stack supports match 1 + sum (k-1)d: {stack_ok}"
        ),
    );
}

#[test]
fn a7_erf_ordering() {
    let _g = serial();
    let mut ratios = Vec::new();
    for m in [7usize, 31, 51] {
        let config = ModelConfig {
            stage_kernels: vec![m, 29, 13],
            // Branch-dominant residual scaling: at the default 0.02 weight
            // sigma the conv branches carry ~1% of each block's output, so
            // the map would collapse onto the stem/downsample support and
            // the kernel size would be invisible. Scaling the residual
            // branches up makes the measured area track the kernels.
            layer_scale_init: 1e3,
            ..ModelConfig::micro()
        };
        let mut model = Model::<f32>::build(&config, 0).unwrap();
        let opts = ErfOptions {
            grid: 224,
            images: 4,
            seed: 0,
            linearized: true,
            per_image_normalization: false,
        };
        let map = contribution_map(&mut model, &opts).unwrap();
        ratios.push(map.area_ratio(0.2).unwrap());
    }
    let ok = ratios.windows(2).all(|w| w[0] <= w[1]);
    verdict(
        7,
        "erf ordering",
        ok,
        &format!(
            "area ratio at t=0.2 for first-stage kernels 7/31/51: \
             {:.4} <= {:.4} <= {:.4}",
            ratios[0], ratios[1], ratios[2]
        ),
    );
}

#[test]
fn a8_training_smoke() {
    let _g = serial();
    let task = SyntheticTask::default();
    let recipe = TrainConfig {
        total_steps: SMOKE_MAX_STEPS,
        warmup_steps: 100,
        peak_lr: 2e-3,
        weight_decay: 0.05,
        label_smoothing: 0.1,
        batch: 64,
        seed: 0,
        sparsity: 0.4,
        adapt_every: 100,
        initial_prune_rate: 0.3,
        early_stop_acc: Some(0.93),
    };
    // The distance label only becomes visible to the pooled head through
    // nonlinear pair interactions, so the run has to climb out of a plateau
    // first; batch 64 keeps that gradient above the noise floor. A 1e-6
    // layer scale never wakes the trunk inside 2000 steps, so the recipe
    // starts the residual branches at full strength.
    let model_config = ModelConfig { layer_scale_init: 1.0, ..ModelConfig::micro() };

    let run = |steps: usize| -> (String, f64, f64, Vec<f64>) {
        let mut config = recipe.clone();
        config.total_steps = steps;
        // Shorter horizons keep the 5% warmup convention so warmup < total holds.
        config.warmup_steps = config.warmup_steps.min((steps / 20).max(1));
        let mut model = Model::<f32>::build(&model_config, config.seed).unwrap();
        let (mut masks, _) =
            slak_core::trainer::build_snip_masks(&mut model, &task, &config).unwrap();
        let result = train(&mut model, &task, &config, Some(&mut masks)).unwrap();
        let accs = result.rows.iter().map(|r| r.acc).collect();
        (metrics_csv(&result), result.max_masked_weight_abs, result.final_global_sparsity, accs)
    };

    let (csv, max_masked, final_s, accs) = run(SMOKE_MAX_STEPS);
    let window = 20.min(accs.len());
    let tail_mean = accs[accs.len() - window..].iter().sum::<f64>() / window as f64;
    let reached = tail_mean >= SMOKE_TARGET_ACC && accs.len() <= SMOKE_MAX_STEPS;

    // Same seed, same recipe, shorter horizon: byte-identical metrics.
    let (short_a, _, _, _) = run(40);
    let (short_b, _, _, _) = run(40);
    let deterministic = short_a == short_b;

    // The seeded keep budget is round((1 - s) * N), so the realized global
    // level sits within O(1/N) of the requested s; conservation across
    // adaptations is exact and covered by criterion 4.
    let ok = reached && max_masked == 0.0 && (final_s - 0.4).abs() < SMOKE_SPARSITY_TOL && deterministic;
    verdict(
        8,
        "training smoke",
        ok,
        &format!(
            "rolling accuracy {tail_mean:.3} (need >= {SMOKE_TARGET_ACC}) after {} steps; \
             max |masked weight| {max_masked:.1e}; final sparsity {final_s:.6}; \
             deterministic replay: {deterministic}; csv rows {}",
            accs.len(),
            csv.lines().count() - 1
        ),
    );
}

#[test]
fn a9_width_planner() {
    let _g = serial();
    let base = ModelConfig::slak_t();
    let (f04, dims04) = plan_width(&base, 0.4).unwrap();
    let (f055, _) = plan_width(&base, 0.55).unwrap();
    let dense = count_params(&base, None).unwrap() as f64;
    let matched = sparse_aware_params(&scaled_config(&base, &dims04), 0.4).unwrap();
    let deviation = (matched - dense).abs() / dense;
    let ok = f04 == 1.3 && f055 == 1.5 && deviation < 0.05;
    verdict(
        9,
        "width planner",
        ok,
        &format!(
            "factor(0.4) = {f04}, factor(0.55) = {f055}, widened dims {dims04:?}, \
             param match deviation {:.2}% (tol 5%)",
            deviation * 100.0
        ),
    );
}
