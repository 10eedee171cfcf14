//! Wall-clock latency of depthwise convolution variants, measured on the
//! monotonic clock with warmup, and summarized as percentiles (never means).
//!
//! Before anything is timed, the candidate's output is checked against the
//! naive reference on the exact shapes being benchmarked; a kernel that is
//! fast but wrong never produces a latency number.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conv::{conv2d_forward, conv2d_forward_reference, sparse_dw_conv_forward, ConvSpec};
use crate::counting::{count_flops, dw_flops, layer_table, scaled_config};
use crate::error::{Result, SlakError};
use crate::model::ModelConfig;
use crate::rng::{RngStream, StreamId};
use crate::sparsity::{build_masks_global_topk, Mask};
use crate::tensor::{norm_max_err, Tensor};

/// Which depthwise realization is under the stopwatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchVariant {
    /// Dense M x M kernel.
    DenseSquare,
    /// M x M kernel with a sparsity mask multiplied in but executed densely;
    /// the control showing masking alone buys nothing.
    SparseMaskedSquare,
    /// M x N plus N x M sparse pair. `zero_skip` selects the kernel that
    /// walks only active taps; off, the masked weights run the dense path.
    SparseDecomposedPair { zero_skip: bool },
}

impl BenchVariant {
    pub fn label(&self) -> String {
        match self {
            BenchVariant::DenseSquare => "dense_square".into(),
            BenchVariant::SparseMaskedSquare => "sparse_masked_square".into(),
            BenchVariant::SparseDecomposedPair { zero_skip: true } => {
                "sparse_decomposed_pair_skip".into()
            }
            BenchVariant::SparseDecomposedPair { zero_skip: false } => {
                "sparse_decomposed_pair_masked".into()
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub variant: BenchVariant,
    pub channels: usize,
    pub resolution: usize,
    pub kernel: usize,
    pub short_edge: usize,
    pub sparsity: f64,
    pub reps: usize,
    pub warmup: usize,
    pub batch: usize,
    pub seed: u64,
}

impl BenchConfig {
    /// Desk-scale operating point: batch 8, 64 channels.
    pub fn desk(variant: BenchVariant, kernel: usize, resolution: usize) -> Self {
        BenchConfig {
            variant,
            channels: 64,
            resolution,
            kernel,
            short_edge: 5,
            sparsity: 0.4,
            reps: 5,
            warmup: 1,
            batch: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(SlakError::invalid_config(
                "reps",
                format!("{} repetitions cannot support percentiles, need at least 3", self.reps),
            ));
        }
        if self.channels == 0 || self.resolution == 0 || self.batch == 0 {
            return Err(SlakError::invalid_config("channels", "zero-sized benchmark"));
        }
        if self.kernel == 0 {
            return Err(SlakError::invalid_config("kernel", "zero kernel edge"));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(SlakError::invalid_config("sparsity", "must lie in [0, 1)"));
        }
        if matches!(self.variant, BenchVariant::SparseDecomposedPair { .. })
            && (self.short_edge % 2 == 0 || self.short_edge > self.kernel)
        {
            return Err(SlakError::invalid_config(
                "short_edge",
                "must be odd and no larger than the kernel edge",
            ));
        }
        Ok(())
    }
}

/// One benchmark outcome. Latencies are seconds on the monotonic clock.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRecord {
    pub variant: String,
    pub kernel: usize,
    pub short_edge: usize,
    pub channels: usize,
    pub resolution: usize,
    pub sparsity: f64,
    pub reps: usize,
    pub warmup: usize,
    pub latency_median_s: f64,
    pub latency_p10_s: f64,
    pub latency_p90_s: f64,
}

/// Nearest-rank percentile of a sorted slice: index round(q * (n - 1)).
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

/// Tolerance of the pre-timing equivalence gate; generous enough for f32
/// accumulation-order differences at millions of output sites.
const GATE_TOL: f64 = 1e-5;

fn gate(label: &str, got: &Tensor<f32>, want: &Tensor<f32>) -> Result<()> {
    let err = norm_max_err(got, want);
    if err > GATE_TOL {
        return Err(SlakError::numeric(
            label,
            format!("variant output deviates from reference by {err:.3e}"),
        ));
    }
    Ok(())
}

fn masked(w: &Tensor<f32>, mask: &Mask) -> Tensor<f32> {
    let mut out = w.clone();
    crate::sparsity::apply_mask(&mut out, mask).expect("mask matches weight shape");
    out
}

/// Builds the workload, proves the candidate against the reference on these
/// exact shapes, then times `reps` forward passes after `warmup` unrecorded
/// ones.
pub fn bench_variant(config: &BenchConfig) -> Result<BenchRecord> {
    config.validate()?;
    let c = config.channels;
    let r = config.resolution;
    let m = config.kernel;
    let n = config.short_edge;
    let mut stream = RngStream::for_purpose(config.seed, StreamId::Bench);
    let x = Tensor::<f32>::trunc_normal(&[config.batch, c, r, r], 1.0, &mut stream);

    // The closure runs one forward of the variant; `reference` is the naive
    // answer it must reproduce before the clock starts.
    let (run, reference): (Box<dyn Fn() -> Tensor<f32>>, Tensor<f32>) = match config.variant {
        BenchVariant::DenseSquare => {
            let spec = ConvSpec::depthwise(c, m, m);
            let w = Tensor::<f32>::trunc_normal(&spec.weight_shape(), 0.1, &mut stream);
            let reference = conv2d_forward_reference(&x, &w, None, &spec)?;
            let x = x.clone();
            (
                Box::new(move || conv2d_forward(&x, &w, None, &spec).expect("validated shapes")),
                reference,
            )
        }
        BenchVariant::SparseMaskedSquare => {
            let spec = ConvSpec::depthwise(c, m, m);
            let dense = Tensor::<f32>::trunc_normal(&spec.weight_shape(), 0.1, &mut stream);
            let mask = random_mask(&dense, config.sparsity, &mut stream)?;
            let w = masked(&dense, &mask);
            let reference = conv2d_forward_reference(&x, &w, None, &spec)?;
            let x = x.clone();
            (
                Box::new(move || conv2d_forward(&x, &w, None, &spec).expect("validated shapes")),
                reference,
            )
        }
        BenchVariant::SparseDecomposedPair { zero_skip } => {
            let spec_a = ConvSpec::depthwise(c, m, n);
            let spec_b = ConvSpec::depthwise(c, n, m);
            let wa = Tensor::<f32>::trunc_normal(&spec_a.weight_shape(), 0.1, &mut stream);
            let wb = Tensor::<f32>::trunc_normal(&spec_b.weight_shape(), 0.1, &mut stream);
            // One global budget across the pair, like the training masks.
            let scores = [
                uniform_scores(&wa, &mut stream),
                uniform_scores(&wb, &mut stream),
            ];
            let masks = build_masks_global_topk(&scores, config.sparsity)?;
            let (ma, mb) = (masks[0].clone(), masks[1].clone());
            let wa_masked = masked(&wa, &ma);
            let wb_masked = masked(&wb, &mb);
            let mut reference = conv2d_forward_reference(&x, &wa_masked, None, &spec_a)?;
            reference.axpy(1.0, &conv2d_forward_reference(&x, &wb_masked, None, &spec_b)?)?;
            let x = x.clone();
            let run: Box<dyn Fn() -> Tensor<f32>> = if zero_skip {
                let mask_a = ma.to_tensor::<f32>();
                let mask_b = mb.to_tensor::<f32>();
                Box::new(move || {
                    let mut y = sparse_dw_conv_forward(&x, &wa_masked, &mask_a, &spec_a)
                        .expect("validated shapes");
                    y.axpy(
                        1.0,
                        &sparse_dw_conv_forward(&x, &wb_masked, &mask_b, &spec_b)
                            .expect("validated shapes"),
                    )
                    .expect("same shape");
                    y
                })
            } else {
                Box::new(move || {
                    let mut y =
                        conv2d_forward(&x, &wa_masked, None, &spec_a).expect("validated shapes");
                    y.axpy(
                        1.0,
                        &conv2d_forward(&x, &wb_masked, None, &spec_b).expect("validated shapes"),
                    )
                    .expect("same shape");
                    y
                })
            };
            (run, reference)
        }
    };

    gate(&config.variant.label(), &run(), &reference)?;

    for _ in 0..config.warmup {
        std::hint::black_box(run());
    }
    let mut samples = Vec::with_capacity(config.reps);
    for _ in 0..config.reps {
        let start = Instant::now();
        std::hint::black_box(run());
        samples.push(start.elapsed().as_secs_f64());
    }
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));

    Ok(BenchRecord {
        variant: config.variant.label(),
        kernel: m,
        short_edge: n,
        channels: c,
        resolution: r,
        sparsity: config.sparsity,
        reps: config.reps,
        warmup: config.warmup,
        latency_median_s: percentile(&samples, 0.5),
        latency_p10_s: percentile(&samples, 0.1),
        latency_p90_s: percentile(&samples, 0.9),
    })
}

fn uniform_scores(w: &Tensor<f32>, stream: &mut RngStream) -> Tensor<f32> {
    let vals: Vec<f32> = (0..w.len()).map(|_| stream.uniform() as f32).collect();
    Tensor::from_values(w.shape(), &vals).expect("same shape")
}

fn random_mask(w: &Tensor<f32>, sparsity: f64, stream: &mut RngStream) -> Result<Mask> {
    let scores = [uniform_scores(w, stream)];
    Ok(build_masks_global_topk(&scores, sparsity)?.remove(0))
}

/// `variant,M,N,C,R,median_s,speedup_vs_dense`, one row per record, with the
/// dense square at matching kernel/channels/resolution as the baseline.
pub fn speedup_report(records: &[BenchRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(SlakError::invalid_config("records", "nothing to report"));
    }
    let dense_label = BenchVariant::DenseSquare.label();
    let baseline = |r: &BenchRecord| -> Option<f64> {
        records
            .iter()
            .find(|d| {
                d.variant == dense_label
                    && d.kernel == r.kernel
                    && d.channels == r.channels
                    && d.resolution == r.resolution
            })
            .map(|d| d.latency_median_s)
    };
    let mut out = String::from("variant,M,N,C,R,median_s,speedup_vs_dense\n");
    for r in records {
        let dense = baseline(r).ok_or_else(|| {
            SlakError::invalid_config(
                "records",
                format!(
                    "no dense baseline for kernel {} at C={} R={}",
                    r.kernel, r.channels, r.resolution
                ),
            )
        })?;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.kernel,
            r.short_edge,
            r.channels,
            r.resolution,
            r.latency_median_s,
            dense / r.latency_median_s
        )
        .expect("string write");
    }
    Ok(out)
}

/// Analytic MAC/parameter budgets of the architecture as its kernels sweep a
/// size range; pure accounting, nothing is executed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlopRecord {
    pub kernel: usize,
    pub variant: String,
    pub params: usize,
    pub total_macs: f64,
    pub dw_macs: u64,
}

/// Bounds on the swept kernel edge.
pub const SWEEP_MIN: usize = 3;
pub const SWEEP_MAX: usize = 151;

/// Re-kernels the template architecture at each size and tabulates budgets.
pub fn flops_sweep(template: &ModelConfig, sizes: &[usize]) -> Result<Vec<FlopRecord>> {
    if sizes.is_empty() {
        return Err(SlakError::invalid_config("sizes", "empty sweep"));
    }
    let mut out = Vec::with_capacity(sizes.len());
    for &k in sizes {
        if !(SWEEP_MIN..=SWEEP_MAX).contains(&k) {
            return Err(SlakError::invalid_config(
                "sizes",
                format!("kernel edge {k} outside [{SWEEP_MIN}, {SWEEP_MAX}]"),
            ));
        }
        let cfg = ModelConfig {
            stage_kernels: vec![k; template.num_stages()],
            ..scaled_config(template, &template.stage_dims)
        };
        let input = (cfg.input_size, cfg.input_size);
        // Counting validates the re-kerneled config (short edges, branches).
        let _ = layer_table(&cfg, input)?;
        out.push(FlopRecord {
            kernel: k,
            variant: format!("{:?}", cfg.dw_variant),
            params: crate::counting::count_params(&cfg, None)?,
            total_macs: count_flops(&cfg, input, None)?,
            dw_macs: dw_flops(&cfg, input)?,
        });
    }
    Ok(out)
}
