//! Model assembly: patchify stem, stages of residual blocks with large
//! depthwise kernels, and a pooled classifier head.
//!
//! Every parameter tensor has a stable dotted id (`stages.1.blocks.0.pw1.weight`)
//! and is reachable through [`Model::visit`] / [`Model::visit_params_mut`] in a
//! fixed order. That order is load-bearing: initialization draws follow it, the
//! checkpoint payload is laid out in it, and the sparsity engine uses the
//! position of a layer in it to break score ties.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::act::{gelu_backward, gelu_forward};
use crate::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::error::{Result, SlakError};
use crate::norm::{
    batchnorm_backward, batchnorm_forward, layernorm_backward, layernorm_forward, BatchNormState,
    LayerNormState, Mode,
};
use crate::rng::{RngStream, StreamId};
use crate::tensor::{Scalar, Tensor};

/// How a block realizes its large depthwise convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DwVariant {
    /// Single dense M x M depthwise kernel with bias.
    Full,
    /// M x N and N x M rectangular kernels plus a 5x5 kernel, each feeding its
    /// own batch norm, summed. Convolutions carry no bias (batch norm has one).
    DecomposedParallel,
    /// M x N followed by N x M, no norm in between, bias-free.
    DecomposedSequential,
    /// Square M x M kernel with the given dilation rate.
    Dilated { rate: usize },
    /// A chain of `count` 3x3 depthwise kernels with biases, no nonlinearity
    /// in between.
    StackedSmall { count: usize },
}

/// Static architecture description; everything a build or a parameter/FLOP
/// count needs, with no tensor data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Blocks per stage.
    pub stage_blocks: Vec<usize>,
    /// Channel width per stage.
    pub stage_dims: Vec<usize>,
    /// Large-kernel edge M per stage.
    pub stage_kernels: Vec<usize>,
    /// Short edge N shared by both rectangular kernels of a decomposed unit.
    pub short_edge: usize,
    pub dw_variant: DwVariant,
    /// Initial value of the per-channel residual branch scale.
    pub layer_scale_init: f64,
    /// Peak stochastic-depth drop rate; block i of n uses rate * i / (n - 1).
    pub drop_path_rate: f64,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Nominal square input edge; forward accepts any size that survives the
    /// stem and the downsample chain.
    pub input_size: usize,
}

impl ModelConfig {
    /// Four-stage large-kernel configuration with decomposed 51-49-47-13
    /// depthwise units.
    pub fn slak_t() -> Self {
        ModelConfig {
            stage_blocks: vec![3, 3, 9, 3],
            stage_dims: vec![96, 192, 384, 768],
            stage_kernels: vec![51, 49, 47, 13],
            short_edge: 5,
            dw_variant: DwVariant::DecomposedParallel,
            layer_scale_init: 1e-6,
            drop_path_rate: 0.0,
            num_classes: 1000,
            in_channels: 3,
            input_size: 224,
        }
    }

    /// Same skeleton with dense 7x7 depthwise units throughout; the dense
    /// reference point for parameter and FLOP comparisons.
    pub fn convnext_t_shaped() -> Self {
        ModelConfig {
            stage_kernels: vec![7, 7, 7, 7],
            dw_variant: DwVariant::Full,
            ..ModelConfig::slak_t()
        }
    }

    /// Three-stage desk-scale model for 64x64 inputs and the two-class
    /// synthetic task.
    pub fn micro() -> Self {
        ModelConfig {
            stage_blocks: vec![2, 2, 2],
            stage_dims: vec![32, 64, 128],
            stage_kernels: vec![31, 29, 13],
            short_edge: 5,
            dw_variant: DwVariant::DecomposedParallel,
            layer_scale_init: 1e-6,
            drop_path_rate: 0.0,
            num_classes: 2,
            in_channels: 3,
            input_size: 64,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_blocks.len()
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stage_blocks.len();
        if s == 0 {
            return Err(SlakError::invalid_config("stage_blocks", "needs at least one stage"));
        }
        if self.stage_dims.len() != s || self.stage_kernels.len() != s {
            return Err(SlakError::invalid_config(
                "stage_dims",
                format!(
                    "per-stage lists disagree: {} blocks, {} dims, {} kernels",
                    s,
                    self.stage_dims.len(),
                    self.stage_kernels.len()
                ),
            ));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(SlakError::invalid_config("stage_blocks", "empty stage"));
        }
        if self.stage_dims.iter().any(|&d| d == 0) {
            return Err(SlakError::invalid_config("stage_dims", "zero-width stage"));
        }
        if self.stage_kernels.iter().any(|&k| k == 0) {
            return Err(SlakError::invalid_config("stage_kernels", "zero kernel edge"));
        }
        let min_kernel = *self.stage_kernels.iter().min().expect("non-empty");
        match self.dw_variant {
            DwVariant::DecomposedParallel | DwVariant::DecomposedSequential => {
                if self.short_edge % 2 == 0 {
                    return Err(SlakError::invalid_config(
                        "short_edge",
                        "rectangular kernels use an odd short edge",
                    ));
                }
                if self.short_edge > min_kernel {
                    return Err(SlakError::invalid_config(
                        "short_edge",
                        format!(
                            "short edge {} exceeds smallest stage kernel {min_kernel}",
                            self.short_edge
                        ),
                    ));
                }
                if self.dw_variant == DwVariant::DecomposedParallel && min_kernel < SMALL_BRANCH {
                    return Err(SlakError::invalid_config(
                        "stage_kernels",
                        format!(
                            "parallel decomposition adds a {SMALL_BRANCH}x{SMALL_BRANCH} branch; \
                             every stage kernel must be at least that"
                        ),
                    ));
                }
            }
            DwVariant::Dilated { rate } => {
                if rate == 0 {
                    return Err(SlakError::invalid_config("dw_variant", "dilation rate of zero"));
                }
            }
            DwVariant::StackedSmall { count } => {
                if count == 0 {
                    return Err(SlakError::invalid_config("dw_variant", "empty stack"));
                }
            }
            DwVariant::Full => {}
        }
        if !self.layer_scale_init.is_finite() || self.layer_scale_init < 0.0 {
            return Err(SlakError::invalid_config(
                "layer_scale_init",
                "must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(SlakError::invalid_config("drop_path_rate", "must lie in [0, 1)"));
        }
        if self.num_classes < 2 {
            return Err(SlakError::invalid_config("num_classes", "needs at least two classes"));
        }
        if self.in_channels == 0 {
            return Err(SlakError::invalid_config("in_channels", "zero input channels"));
        }
        check_spatial(self, self.input_size, self.input_size).map_err(|_| {
            SlakError::invalid_config(
                "input_size",
                format!(
                    "{} does not survive the stem and {} downsample steps",
                    self.input_size,
                    s - 1
                ),
            )
        })?;
        Ok(())
    }
}

/// Edge of the always-present small branch in the parallel decomposition.
pub const SMALL_BRANCH: usize = 5;

/// Spatial sizes must divide through the stride-4 stem and every later
/// stride-2 downsample.
fn check_spatial(config: &ModelConfig, h: usize, w: usize) -> Result<()> {
    let halvings = config.num_stages() - 1;
    let need = 4usize << halvings;
    if h == 0 || w == 0 || h % need != 0 || w % need != 0 {
        return Err(SlakError::invalid_shape(format!(
            "spatial size {h}x{w} is not a multiple of {need} (stem stride 4, {halvings} downsamples)"
        )));
    }
    Ok(())
}

/// Forward flavor.
///
/// `Linearized` turns the network into a linear map of its input: layer norms
/// become identities, the activation becomes identity, batch norms run from
/// their running statistics (an affine map), and stochastic depth is off. Used
/// when the receptive-field analysis needs contribution supports to equal the
/// exact algebraic support of the stacked kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
    Linearized,
}

impl ForwardMode {
    fn norm_mode(self) -> Mode {
        match self {
            ForwardMode::Train => Mode::Train,
            _ => Mode::Eval,
        }
    }

    fn keeps_norms(self) -> bool {
        !matches!(self, ForwardMode::Linearized)
    }
}

/// Whether a visited tensor receives gradient updates or is a running
/// statistic maintained by the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    RunningStat,
}

struct Stem<T: Scalar> {
    conv_w: Tensor<T>,
    conv_b: Tensor<T>,
    norm: LayerNormState<T>,
}

struct Downsample<T: Scalar> {
    norm: LayerNormState<T>,
    conv_w: Tensor<T>,
    conv_b: Tensor<T>,
}

enum DwUnit<T: Scalar> {
    Full {
        w: Tensor<T>,
        b: Tensor<T>,
        kernel: usize,
    },
    Parallel {
        wa: Tensor<T>,
        wb: Tensor<T>,
        wc: Tensor<T>,
        bn_a: BatchNormState<T>,
        bn_b: BatchNormState<T>,
        bn_c: BatchNormState<T>,
        kernel: usize,
        short: usize,
    },
    Sequential {
        wa: Tensor<T>,
        wb: Tensor<T>,
        kernel: usize,
        short: usize,
    },
    Dilated {
        w: Tensor<T>,
        b: Tensor<T>,
        kernel: usize,
        rate: usize,
    },
    Stacked {
        ws: Vec<Tensor<T>>,
        bs: Vec<Tensor<T>>,
    },
}

struct Block<T: Scalar> {
    dw: DwUnit<T>,
    norm: LayerNormState<T>,
    pw1_w: Tensor<T>,
    pw1_b: Tensor<T>,
    pw2_w: Tensor<T>,
    pw2_b: Tensor<T>,
    layer_scale: Tensor<T>,
}

struct Stage<T: Scalar> {
    downsample: Option<Downsample<T>>,
    blocks: Vec<Block<T>>,
}

struct Head<T: Scalar> {
    norm: LayerNormState<T>,
    fc_w: Tensor<T>,
    fc_b: Tensor<T>,
}

/// A built network. `T` is `f32` in normal operation and `f64` under the
/// gradient-check oracle.
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    stem: Stem<T>,
    stages: Vec<Stage<T>>,
    head: Head<T>,
    drop_stream: RngStream,
    version: u64,
}

const INIT_SIGMA: f64 = 0.02;

impl<T: Scalar> Model<T> {
    /// Builds with truncated-normal (sigma 0.02) conv and linear weights drawn
    /// in visit order, unit norm gains, zero biases, and the configured
    /// layer-scale constant. Two builds from the same config and seed are
    /// bit-identical.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = RngStream::for_purpose(seed, StreamId::Init);
        let s = &mut init;

        let c0 = config.stage_dims[0];
        let stem = Stem {
            conv_w: Tensor::trunc_normal(&[c0, config.in_channels, 4, 4], INIT_SIGMA, s),
            conv_b: Tensor::zeros(&[c0]),
            norm: LayerNormState::identity(c0),
        };

        let mut stages = Vec::with_capacity(config.num_stages());
        for si in 0..config.num_stages() {
            let c = config.stage_dims[si];
            let downsample = if si == 0 {
                None
            } else {
                let prev = config.stage_dims[si - 1];
                Some(Downsample {
                    norm: LayerNormState::identity(prev),
                    conv_w: Tensor::trunc_normal(&[c, prev, 2, 2], INIT_SIGMA, s),
                    conv_b: Tensor::zeros(&[c]),
                })
            };
            let k = config.stage_kernels[si];
            let n = config.short_edge;
            let mut blocks = Vec::with_capacity(config.stage_blocks[si]);
            for _ in 0..config.stage_blocks[si] {
                let dw = match config.dw_variant {
                    DwVariant::Full => DwUnit::Full {
                        w: Tensor::trunc_normal(&[c, 1, k, k], INIT_SIGMA, s),
                        b: Tensor::zeros(&[c]),
                        kernel: k,
                    },
                    DwVariant::DecomposedParallel => DwUnit::Parallel {
                        wa: Tensor::trunc_normal(&[c, 1, k, n], INIT_SIGMA, s),
                        wb: Tensor::trunc_normal(&[c, 1, n, k], INIT_SIGMA, s),
                        wc: Tensor::trunc_normal(
                            &[c, 1, SMALL_BRANCH, SMALL_BRANCH],
                            INIT_SIGMA,
                            s,
                        ),
                        bn_a: BatchNormState::new(c, 1e-5, 0.1),
                        bn_b: BatchNormState::new(c, 1e-5, 0.1),
                        bn_c: BatchNormState::new(c, 1e-5, 0.1),
                        kernel: k,
                        short: n,
                    },
                    DwVariant::DecomposedSequential => DwUnit::Sequential {
                        wa: Tensor::trunc_normal(&[c, 1, k, n], INIT_SIGMA, s),
                        wb: Tensor::trunc_normal(&[c, 1, n, k], INIT_SIGMA, s),
                        kernel: k,
                        short: n,
                    },
                    DwVariant::Dilated { rate } => DwUnit::Dilated {
                        w: Tensor::trunc_normal(&[c, 1, k, k], INIT_SIGMA, s),
                        b: Tensor::zeros(&[c]),
                        kernel: k,
                        rate,
                    },
                    DwVariant::StackedSmall { count } => DwUnit::Stacked {
                        ws: (0..count)
                            .map(|_| Tensor::trunc_normal(&[c, 1, 3, 3], INIT_SIGMA, s))
                            .collect(),
                        bs: (0..count).map(|_| Tensor::zeros(&[c])).collect(),
                    },
                };
                blocks.push(Block {
                    dw,
                    norm: LayerNormState::identity(c),
                    pw1_w: Tensor::trunc_normal(&[4 * c, c, 1, 1], INIT_SIGMA, s),
                    pw1_b: Tensor::zeros(&[4 * c]),
                    pw2_w: Tensor::trunc_normal(&[c, 4 * c, 1, 1], INIT_SIGMA, s),
                    pw2_b: Tensor::zeros(&[c]),
                    layer_scale: Tensor::full(&[c], T::from_f64(config.layer_scale_init)),
                });
            }
            stages.push(Stage { downsample, blocks });
        }

        let c_last = *config.stage_dims.last().expect("non-empty");
        let head = Head {
            norm: LayerNormState::identity(c_last),
            fc_w: Tensor::trunc_normal(&[config.num_classes, c_last, 1, 1], INIT_SIGMA, s),
            fc_b: Tensor::zeros(&[config.num_classes]),
        };

        Ok(Model {
            config: config.clone(),
            stem,
            stages,
            head,
            drop_stream: RngStream::for_purpose(seed, StreamId::DropPath),
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Monotone counter bumped by every mutable parameter visit; caches carry
    /// the value they were produced under so a stale backward is caught.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Walks every state tensor in the canonical order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        use ParamKind::{RunningStat, Trainable};
        f("stem.conv.weight", Trainable, &self.stem.conv_w);
        f("stem.conv.bias", Trainable, &self.stem.conv_b);
        f("stem.norm.gamma", Trainable, &self.stem.norm.gamma);
        f("stem.norm.beta", Trainable, &self.stem.norm.beta);
        for (si, stage) in self.stages.iter().enumerate() {
            if let Some(ds) = &stage.downsample {
                f(&format!("stages.{si}.downsample.norm.gamma"), Trainable, &ds.norm.gamma);
                f(&format!("stages.{si}.downsample.norm.beta"), Trainable, &ds.norm.beta);
                f(&format!("stages.{si}.downsample.conv.weight"), Trainable, &ds.conv_w);
                f(&format!("stages.{si}.downsample.conv.bias"), Trainable, &ds.conv_b);
            }
            for (bi, block) in stage.blocks.iter().enumerate() {
                let p = format!("stages.{si}.blocks.{bi}");
                match &block.dw {
                    DwUnit::Full { w, b, .. } | DwUnit::Dilated { w, b, .. } => {
                        f(&format!("{p}.dw.weight"), Trainable, w);
                        f(&format!("{p}.dw.bias"), Trainable, b);
                    }
                    DwUnit::Parallel { wa, wb, wc, bn_a, bn_b, bn_c, .. } => {
                        for (tag, w, bn) in
                            [("a", wa, bn_a), ("b", wb, bn_b), ("c", wc, bn_c)]
                        {
                            f(&format!("{p}.dw.{tag}.weight"), Trainable, w);
                            f(&format!("{p}.dw.{tag}.bn.gamma"), Trainable, &bn.gamma);
                            f(&format!("{p}.dw.{tag}.bn.beta"), Trainable, &bn.beta);
                            f(&format!("{p}.dw.{tag}.bn.running_mean"), RunningStat, &bn.running_mean);
                            f(&format!("{p}.dw.{tag}.bn.running_var"), RunningStat, &bn.running_var);
                        }
                    }
                    DwUnit::Sequential { wa, wb, .. } => {
                        f(&format!("{p}.dw.a.weight"), Trainable, wa);
                        f(&format!("{p}.dw.b.weight"), Trainable, wb);
                    }
                    DwUnit::Stacked { ws, bs } => {
                        for (i, (w, b)) in ws.iter().zip(bs).enumerate() {
                            f(&format!("{p}.dw.{i}.weight"), Trainable, w);
                            f(&format!("{p}.dw.{i}.bias"), Trainable, b);
                        }
                    }
                }
                f(&format!("{p}.norm.gamma"), Trainable, &block.norm.gamma);
                f(&format!("{p}.norm.beta"), Trainable, &block.norm.beta);
                f(&format!("{p}.pw1.weight"), Trainable, &block.pw1_w);
                f(&format!("{p}.pw1.bias"), Trainable, &block.pw1_b);
                f(&format!("{p}.pw2.weight"), Trainable, &block.pw2_w);
                f(&format!("{p}.pw2.bias"), Trainable, &block.pw2_b);
                f(&format!("{p}.gamma"), Trainable, &block.layer_scale);
            }
        }
        f("head.norm.gamma", Trainable, &self.head.norm.gamma);
        f("head.norm.beta", Trainable, &self.head.norm.beta);
        f("head.fc.weight", Trainable, &self.head.fc_w);
        f("head.fc.bias", Trainable, &self.head.fc_b);
    }

    /// Mutable twin of [`Model::visit`]; bumps the version counter, so any
    /// forward cache taken before the call is invalidated.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        use ParamKind::{RunningStat, Trainable};
        self.version += 1;
        f("stem.conv.weight", Trainable, &mut self.stem.conv_w);
        f("stem.conv.bias", Trainable, &mut self.stem.conv_b);
        f("stem.norm.gamma", Trainable, &mut self.stem.norm.gamma);
        f("stem.norm.beta", Trainable, &mut self.stem.norm.beta);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            if let Some(ds) = &mut stage.downsample {
                f(&format!("stages.{si}.downsample.norm.gamma"), Trainable, &mut ds.norm.gamma);
                f(&format!("stages.{si}.downsample.norm.beta"), Trainable, &mut ds.norm.beta);
                f(&format!("stages.{si}.downsample.conv.weight"), Trainable, &mut ds.conv_w);
                f(&format!("stages.{si}.downsample.conv.bias"), Trainable, &mut ds.conv_b);
            }
            for (bi, block) in stage.blocks.iter_mut().enumerate() {
                let p = format!("stages.{si}.blocks.{bi}");
                match &mut block.dw {
                    DwUnit::Full { w, b, .. } | DwUnit::Dilated { w, b, .. } => {
                        f(&format!("{p}.dw.weight"), Trainable, w);
                        f(&format!("{p}.dw.bias"), Trainable, b);
                    }
                    DwUnit::Parallel { wa, wb, wc, bn_a, bn_b, bn_c, .. } => {
                        for (tag, w, bn) in
                            [("a", wa, bn_a), ("b", wb, bn_b), ("c", wc, bn_c)]
                        {
                            f(&format!("{p}.dw.{tag}.weight"), Trainable, w);
                            f(&format!("{p}.dw.{tag}.bn.gamma"), Trainable, &mut bn.gamma);
                            f(&format!("{p}.dw.{tag}.bn.beta"), Trainable, &mut bn.beta);
                            f(
                                &format!("{p}.dw.{tag}.bn.running_mean"),
                                RunningStat,
                                &mut bn.running_mean,
                            );
                            f(
                                &format!("{p}.dw.{tag}.bn.running_var"),
                                RunningStat,
                                &mut bn.running_var,
                            );
                        }
                    }
                    DwUnit::Sequential { wa, wb, .. } => {
                        f(&format!("{p}.dw.a.weight"), Trainable, wa);
                        f(&format!("{p}.dw.b.weight"), Trainable, wb);
                    }
                    DwUnit::Stacked { ws, bs } => {
                        for (i, (w, b)) in ws.iter_mut().zip(bs).enumerate() {
                            f(&format!("{p}.dw.{i}.weight"), Trainable, w);
                            f(&format!("{p}.dw.{i}.bias"), Trainable, b);
                        }
                    }
                }
                f(&format!("{p}.norm.gamma"), Trainable, &mut block.norm.gamma);
                f(&format!("{p}.norm.beta"), Trainable, &mut block.norm.beta);
                f(&format!("{p}.pw1.weight"), Trainable, &mut block.pw1_w);
                f(&format!("{p}.pw1.bias"), Trainable, &mut block.pw1_b);
                f(&format!("{p}.pw2.weight"), Trainable, &mut block.pw2_w);
                f(&format!("{p}.pw2.bias"), Trainable, &mut block.pw2_b);
                f(&format!("{p}.gamma"), Trainable, &mut block.layer_scale);
            }
        }
        f("head.norm.gamma", Trainable, &mut self.head.norm.gamma);
        f("head.norm.beta", Trainable, &mut self.head.norm.beta);
        f("head.fc.weight", Trainable, &mut self.head.fc_w);
        f("head.fc.bias", Trainable, &mut self.head.fc_b);
    }

    /// All parameter ids in visit order.
    pub fn param_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        self.visit(&mut |id, _, _| ids.push(id.to_string()));
        ids
    }

    /// Clone of a single tensor by id.
    pub fn param(&self, id: &str) -> Result<Tensor<T>> {
        let mut found = None;
        self.visit(&mut |pid, _, t| {
            if pid == id {
                found = Some(t.clone());
            }
        });
        found.ok_or_else(|| SlakError::invalid_config("param", format!("no tensor named {id}")))
    }

    /// Overwrites a single tensor by id; the new values must match its shape.
    pub fn set_param(&mut self, id: &str, values: &Tensor<T>) -> Result<()> {
        let mut outcome = None;
        self.visit_params_mut(&mut |pid, _, t| {
            if pid == id {
                outcome = Some(if t.shape() == values.shape() {
                    t.data_mut().copy_from_slice(values.data());
                    Ok(())
                } else {
                    Err(SlakError::invalid_shape(format!(
                        "{id}: expected {:?}, got {:?}",
                        t.shape(),
                        values.shape()
                    )))
                });
            }
        });
        outcome.unwrap_or_else(|| {
            Err(SlakError::invalid_config("param", format!("no tensor named {id}")))
        })
    }

    /// Every trainable element, flattened in visit order; the coordinate
    /// system which the finite-difference oracle perturbs.
    pub fn trainable_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |_, kind, t| {
            if kind == ParamKind::Trainable {
                out.extend(t.data().iter().map(|&v| v.to_f64()));
            }
        });
        out
    }

    /// Inverse of [`Model::trainable_vector`].
    pub fn set_trainable_vector(&mut self, flat: &[f64]) -> Result<()> {
        let mut pos = 0usize;
        let mut overrun = false;
        self.visit_params_mut(&mut |_, kind, t| {
            if kind != ParamKind::Trainable {
                return;
            }
            let n = t.len();
            if pos + n > flat.len() {
                overrun = true;
                return;
            }
            for (dst, src) in t.data_mut().iter_mut().zip(&flat[pos..pos + n]) {
                *dst = T::from_f64(*src);
            }
            pos += n;
        });
        if overrun || pos != flat.len() {
            return Err(SlakError::invalid_shape(format!(
                "trainable vector holds {} values, model needs {pos}",
                flat.len()
            )));
        }
        Ok(())
    }

    /// Ids of the tensors the sparsity engine operates on: every depthwise
    /// kernel and both pointwise weights of every block, in visit order.
    pub fn sparsifiable_ids(&self) -> Vec<String> {
        sparsifiable_ids(&self.config)
    }
}

/// Same as [`Model::sparsifiable_ids`] but derived from the config alone.
pub fn sparsifiable_ids(config: &ModelConfig) -> Vec<String> {
    let mut ids = Vec::new();
    for (si, &nb) in config.stage_blocks.iter().enumerate() {
        for bi in 0..nb {
            let p = format!("stages.{si}.blocks.{bi}");
            match config.dw_variant {
                DwVariant::Full | DwVariant::Dilated { .. } => ids.push(format!("{p}.dw.weight")),
                DwVariant::DecomposedParallel => {
                    ids.push(format!("{p}.dw.a.weight"));
                    ids.push(format!("{p}.dw.b.weight"));
                    ids.push(format!("{p}.dw.c.weight"));
                }
                DwVariant::DecomposedSequential => {
                    ids.push(format!("{p}.dw.a.weight"));
                    ids.push(format!("{p}.dw.b.weight"));
                }
                DwVariant::StackedSmall { count } => {
                    for i in 0..count {
                        ids.push(format!("{p}.dw.{i}.weight"));
                    }
                }
            }
            ids.push(format!("{p}.pw1.weight"));
            ids.push(format!("{p}.pw2.weight"));
        }
    }
    ids
}

// ---------------------------------------------------------------------------
// Forward caches.

enum DwCache<T: Scalar> {
    Plain,
    Parallel {
        ya: Tensor<T>,
        yb: Tensor<T>,
        yc: Tensor<T>,
    },
    Sequential {
        mid: Tensor<T>,
    },
    Stacked {
        /// Inputs to convs 1..n; conv 0 reads the block input.
        mids: Vec<Tensor<T>>,
    },
}

struct BlockCache<T: Scalar> {
    x: Tensor<T>,
    dw: DwCache<T>,
    dw_out: Tensor<T>,
    ln_out: Tensor<T>,
    pw1_out: Tensor<T>,
    act: Tensor<T>,
    pw2_out: Tensor<T>,
    /// Per-sample stochastic-depth survival, with the survivor rescale factor.
    keep: Option<(Vec<bool>, f64)>,
}

struct DsCache<T: Scalar> {
    x: Tensor<T>,
    ln_out: Tensor<T>,
}

struct StageCache<T: Scalar> {
    downsample: Option<DsCache<T>>,
    blocks: Vec<BlockCache<T>>,
}

/// Everything the feature backward needs; produced by
/// [`Model::forward_features`] and tied to the producing model version.
pub struct FeatureCache<T: Scalar> {
    version: u64,
    mode: ForwardMode,
    x: Tensor<T>,
    stem_conv: Tensor<T>,
    stages: Vec<StageCache<T>>,
}

impl<T: Scalar> FeatureCache<T> {
    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    /// Stem convolution output, before its norm.
    pub fn stem_out_shape(&self) -> &[usize] {
        self.stem_conv.shape()
    }
}

/// Head-side cache from [`Model::forward_head`].
pub struct HeadCache<T: Scalar> {
    version: u64,
    mode: ForwardMode,
    pooled: Tensor<T>,
    ln_out: Tensor<T>,
    feat_hw: (usize, usize),
}

/// Cache for a full forward pass.
pub struct ModelCache<T: Scalar> {
    pub features: FeatureCache<T>,
    pub head: HeadCache<T>,
}

/// Named gradients keyed by parameter id.
#[derive(Debug)]
pub struct GradStore<T: Scalar> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    fn new() -> Self {
        GradStore { grads: BTreeMap::new() }
    }

    fn insert(&mut self, id: String, g: Tensor<T>) {
        let prev = self.grads.insert(id, g);
        debug_assert!(prev.is_none(), "duplicate gradient id");
    }

    fn merge(&mut self, other: GradStore<T>) {
        for (id, g) in other.grads {
            self.insert(id, g);
        }
    }

    pub fn get(&self, id: &str) -> Option<&Tensor<T>> {
        self.grads.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Forward / backward.

fn channel_scale<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.dims4();
    let plane = h * w;
    let mut y = x.clone();
    let yd = y.data_mut();
    let gd = g.data();
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let s = gd[ci];
            for v in &mut yd[base..base + plane] {
                *v *= s;
            }
        }
    }
    y
}

/// Returns (dx, dg) for y = x * g[c].
fn channel_scale_backward<T: Scalar>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [b, c, h, w] = x.dims4();
    let plane = h * w;
    let mut dx = dy.clone();
    let mut dg = Tensor::zeros(&[c]);
    {
        let dxd = dx.data_mut();
        let dgd = dg.data_mut();
        let xd = x.data();
        let gd = g.data();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let s = gd[ci];
                let mut acc = T::zero();
                for i in base..base + plane {
                    acc += xd[i] * dxd[i];
                    dxd[i] *= s;
                }
                dgd[ci] += acc;
            }
        }
    }
    (dx, dg)
}

impl<T: Scalar> DwUnit<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: ForwardMode) -> Result<(Tensor<T>, DwCache<T>)> {
        let c = x.dims4()[1];
        match self {
            DwUnit::Full { w, b, kernel } => {
                let spec = ConvSpec::depthwise(c, *kernel, *kernel);
                Ok((conv2d_forward(x, w, Some(b), &spec)?, DwCache::Plain))
            }
            DwUnit::Dilated { w, b, kernel, rate } => {
                let spec = ConvSpec::dilated_depthwise(c, *kernel, *kernel, *rate);
                Ok((conv2d_forward(x, w, Some(b), &spec)?, DwCache::Plain))
            }
            DwUnit::Parallel { wa, wb, wc, bn_a, bn_b, bn_c, kernel, short } => {
                let nm = mode.norm_mode();
                let ya = conv2d_forward(x, wa, None, &ConvSpec::depthwise(c, *kernel, *short))?;
                let yb = conv2d_forward(x, wb, None, &ConvSpec::depthwise(c, *short, *kernel))?;
                let yc = conv2d_forward(
                    x,
                    wc,
                    None,
                    &ConvSpec::depthwise(c, SMALL_BRANCH, SMALL_BRANCH),
                )?;
                let mut y = batchnorm_forward(&ya, bn_a, nm)?;
                y.axpy(T::one(), &batchnorm_forward(&yb, bn_b, nm)?)?;
                y.axpy(T::one(), &batchnorm_forward(&yc, bn_c, nm)?)?;
                Ok((y, DwCache::Parallel { ya, yb, yc }))
            }
            DwUnit::Sequential { wa, wb, kernel, short } => {
                let mid = conv2d_forward(x, wa, None, &ConvSpec::depthwise(c, *kernel, *short))?;
                let y = conv2d_forward(&mid, wb, None, &ConvSpec::depthwise(c, *short, *kernel))?;
                Ok((y, DwCache::Sequential { mid }))
            }
            DwUnit::Stacked { ws, bs } => {
                let spec = ConvSpec::depthwise(c, 3, 3);
                let mut mids = Vec::new();
                let mut h = conv2d_forward(x, &ws[0], Some(&bs[0]), &spec)?;
                for (w, b) in ws.iter().zip(bs.iter()).skip(1) {
                    mids.push(h.clone());
                    h = conv2d_forward(&h, w, Some(b), &spec)?;
                }
                Ok((h, DwCache::Stacked { mids }))
            }
        }
    }

    /// Accumulates weight gradients under `prefix` and returns dx.
    fn backward(
        &self,
        x: &Tensor<T>,
        cache: &DwCache<T>,
        mode: ForwardMode,
        dy: &Tensor<T>,
        prefix: &str,
        grads: &mut GradStore<T>,
    ) -> Result<Tensor<T>> {
        let c = x.dims4()[1];
        match (self, cache) {
            (DwUnit::Full { w, kernel, .. }, DwCache::Plain) => {
                let spec = ConvSpec::depthwise(c, *kernel, *kernel);
                let (dx, dw, db) = conv2d_backward(x, w, &spec, dy)?;
                grads.insert(format!("{prefix}.dw.weight"), dw);
                grads.insert(format!("{prefix}.dw.bias"), db);
                Ok(dx)
            }
            (DwUnit::Dilated { w, kernel, rate, .. }, DwCache::Plain) => {
                let spec = ConvSpec::dilated_depthwise(c, *kernel, *kernel, *rate);
                let (dx, dw, db) = conv2d_backward(x, w, &spec, dy)?;
                grads.insert(format!("{prefix}.dw.weight"), dw);
                grads.insert(format!("{prefix}.dw.bias"), db);
                Ok(dx)
            }
            (
                DwUnit::Parallel { wa, wb, wc, bn_a, bn_b, bn_c, kernel, short },
                DwCache::Parallel { ya, yb, yc },
            ) => {
                let nm = mode.norm_mode();
                let mut dx: Option<Tensor<T>> = None;
                let branches: [(&str, &Tensor<T>, &BatchNormState<T>, &Tensor<T>, ConvSpec); 3] = [
                    ("a", wa, bn_a, ya, ConvSpec::depthwise(c, *kernel, *short)),
                    ("b", wb, bn_b, yb, ConvSpec::depthwise(c, *short, *kernel)),
                    ("c", wc, bn_c, yc, ConvSpec::depthwise(c, SMALL_BRANCH, SMALL_BRANCH)),
                ];
                for (tag, w, bn, y_pre, spec) in branches {
                    let (d_pre, dgamma, dbeta) = batchnorm_backward(y_pre, bn, nm, dy)?;
                    let (dxi, dw, _) = conv2d_backward(x, w, &spec, &d_pre)?;
                    grads.insert(format!("{prefix}.dw.{tag}.weight"), dw);
                    grads.insert(format!("{prefix}.dw.{tag}.bn.gamma"), dgamma);
                    grads.insert(format!("{prefix}.dw.{tag}.bn.beta"), dbeta);
                    match &mut dx {
                        None => dx = Some(dxi),
                        Some(acc) => acc.axpy(T::one(), &dxi)?,
                    }
                }
                Ok(dx.expect("three branches"))
            }
            (DwUnit::Sequential { wa, wb, kernel, short }, DwCache::Sequential { mid }) => {
                let spec_a = ConvSpec::depthwise(c, *kernel, *short);
                let spec_b = ConvSpec::depthwise(c, *short, *kernel);
                let (d_mid, dwb, _) = conv2d_backward(mid, wb, &spec_b, dy)?;
                let (dx, dwa, _) = conv2d_backward(x, wa, &spec_a, &d_mid)?;
                grads.insert(format!("{prefix}.dw.a.weight"), dwa);
                grads.insert(format!("{prefix}.dw.b.weight"), dwb);
                Ok(dx)
            }
            (DwUnit::Stacked { ws, .. }, DwCache::Stacked { mids }) => {
                let spec = ConvSpec::depthwise(c, 3, 3);
                let mut d = dy.clone();
                for i in (0..ws.len()).rev() {
                    let input = if i == 0 { x } else { &mids[i - 1] };
                    let (dx, dw, db) = conv2d_backward(input, &ws[i], &spec, &d)?;
                    grads.insert(format!("{prefix}.dw.{i}.weight"), dw);
                    grads.insert(format!("{prefix}.dw.{i}.bias"), db);
                    d = dx;
                }
                Ok(d)
            }
            _ => Err(SlakError::State("depthwise cache does not match unit".into())),
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Runs stem, stages, and blocks; returns final-stage features and the
    /// cache the backward pass consumes.
    pub fn forward_features(
        &mut self,
        x: &Tensor<T>,
        mode: ForwardMode,
    ) -> Result<(Tensor<T>, FeatureCache<T>)> {
        let [_, c, h, w] = x.dims4();
        if x.rank() != 4 || c != self.config.in_channels {
            return Err(SlakError::invalid_shape(format!(
                "input {:?} does not match {} input channels",
                x.shape(),
                self.config.in_channels
            )));
        }
        check_spatial(&self.config, h, w)?;

        let stem_spec =
            ConvSpec::full_square(self.config.in_channels, self.config.stage_dims[0], 4, 4);
        let stem_conv = conv2d_forward(x, &self.stem.conv_w, Some(&self.stem.conv_b), &stem_spec)?;
        let mut cur = if mode.keeps_norms() {
            layernorm_forward(&stem_conv, &self.stem.norm)?
        } else {
            stem_conv.clone()
        };

        let total_blocks = self.config.total_blocks();
        let mut block_index = 0usize;
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        let drop_rate = self.config.drop_path_rate;
        for (si, stage) in self.stages.iter_mut().enumerate() {
            let ds_cache = if let Some(ds) = &mut stage.downsample {
                let x_in = cur;
                let ln_out = if mode.keeps_norms() {
                    layernorm_forward(&x_in, &ds.norm)?
                } else {
                    x_in.clone()
                };
                let spec = ConvSpec::full_square(
                    self.config.stage_dims[si - 1],
                    self.config.stage_dims[si],
                    2,
                    2,
                );
                cur = conv2d_forward(&ln_out, &ds.conv_w, Some(&ds.conv_b), &spec)?;
                Some(DsCache { x: x_in, ln_out })
            } else {
                None
            };

            let mut block_caches = Vec::with_capacity(stage.blocks.len());
            for block in &mut stage.blocks {
                let bx = cur.clone();
                let (dw_out, dw_cache) = block.dw.forward(&bx, mode)?;
                let ln_out = if mode.keeps_norms() {
                    layernorm_forward(&dw_out, &block.norm)?
                } else {
                    dw_out.clone()
                };
                let cdim = self.config.stage_dims[si];
                let pw1_out = conv2d_forward(
                    &ln_out,
                    &block.pw1_w,
                    Some(&block.pw1_b),
                    &ConvSpec::pointwise(cdim, 4 * cdim),
                )?;
                let act = if mode.keeps_norms() {
                    gelu_forward(&pw1_out)
                } else {
                    pw1_out.clone()
                };
                let pw2_out = conv2d_forward(
                    &act,
                    &block.pw2_w,
                    Some(&block.pw2_b),
                    &ConvSpec::pointwise(4 * cdim, cdim),
                )?;
                let mut branch = channel_scale(&pw2_out, &block.layer_scale);

                // Stochastic depth: per-sample drop with survivor rescale.
                let p = if total_blocks > 1 {
                    drop_rate * block_index as f64 / (total_blocks - 1) as f64
                } else {
                    0.0
                };
                let keep = if mode == ForwardMode::Train && p > 0.0 {
                    let bsz = branch.dims4()[0];
                    let flags: Vec<bool> =
                        (0..bsz).map(|_| self.drop_stream.uniform() >= p).collect();
                    let scale = 1.0 / (1.0 - p);
                    apply_drop(&mut branch, &flags, T::from_f64(scale));
                    Some((flags, scale))
                } else {
                    None
                };

                let mut y = bx.clone();
                y.axpy(T::one(), &branch)?;
                block_caches.push(BlockCache {
                    x: bx,
                    dw: dw_cache,
                    dw_out,
                    ln_out,
                    pw1_out,
                    act,
                    pw2_out,
                    keep,
                });
                cur = y;
                block_index += 1;
            }
            stage_caches.push(StageCache { downsample: ds_cache, blocks: block_caches });
        }

        let cache = FeatureCache {
            version: self.version,
            mode,
            x: x.clone(),
            stem_conv,
            stages: stage_caches,
        };
        Ok((cur, cache))
    }

    /// Global average pool, norm, linear classifier. Returns (batch, classes)
    /// logits.
    pub fn forward_head(
        &self,
        features: &Tensor<T>,
        mode: ForwardMode,
    ) -> Result<(Tensor<T>, HeadCache<T>)> {
        let [b, c, h, w] = features.dims4();
        if features.rank() != 4 || c != self.head.norm.channels() {
            return Err(SlakError::invalid_shape(format!(
                "features {:?} do not match head width {}",
                features.shape(),
                self.head.norm.channels()
            )));
        }
        let plane = h * w;
        let inv = T::from_f64(1.0 / plane as f64);
        let mut pooled = Tensor::zeros(&[b, c, 1, 1]);
        {
            let pd = pooled.data_mut();
            let fd = features.data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let mut acc = T::zero();
                    for &v in &fd[base..base + plane] {
                        acc += v;
                    }
                    pd[bi * c + ci] = acc * inv;
                }
            }
        }
        let ln_out = if mode.keeps_norms() {
            layernorm_forward(&pooled, &self.head.norm)?
        } else {
            pooled.clone()
        };
        let spec = ConvSpec::pointwise(c, self.config.num_classes);
        let logits4 = conv2d_forward(&ln_out, &self.head.fc_w, Some(&self.head.fc_b), &spec)?;
        let logits = logits4.reshaped(&[b, self.config.num_classes])?;
        Ok((
            logits,
            HeadCache { version: self.version, mode, pooled, ln_out, feat_hw: (h, w) },
        ))
    }

    /// Features plus head in one call.
    pub fn forward(&mut self, x: &Tensor<T>, mode: ForwardMode) -> Result<(Tensor<T>, ModelCache<T>)> {
        let (features, fcache) = self.forward_features(x, mode)?;
        let (logits, hcache) = self.forward_head(&features, mode)?;
        Ok((logits, ModelCache { features: fcache, head: hcache }))
    }

    fn check_version(&self, version: u64) -> Result<()> {
        if version != self.version {
            return Err(SlakError::State(
                "forward cache is stale: parameters changed since it was built".into(),
            ));
        }
        Ok(())
    }

    /// Gradient of the head; returns d(features).
    pub fn backward_head(
        &self,
        cache: &HeadCache<T>,
        dlogits: &Tensor<T>,
    ) -> Result<(GradStore<T>, Tensor<T>)> {
        self.check_version(cache.version)?;
        let [b, c, _, _] = cache.pooled.dims4();
        let k = self.config.num_classes;
        if dlogits.shape() != [b, k] {
            return Err(SlakError::invalid_shape(format!(
                "logit gradient {:?} vs [{b}, {k}]",
                dlogits.shape()
            )));
        }
        let mut grads = GradStore::new();
        let dlogits4 = dlogits.reshaped(&[b, k, 1, 1])?;
        let spec = ConvSpec::pointwise(c, k);
        let (d_ln, d_fcw, d_fcb) = conv2d_backward(&cache.ln_out, &self.head.fc_w, &spec, &dlogits4)?;
        grads.insert("head.fc.weight".into(), d_fcw);
        grads.insert("head.fc.bias".into(), d_fcb);
        let d_pooled = if cache.mode.keeps_norms() {
            let (d_pooled, dg, db) = layernorm_backward(&cache.pooled, &self.head.norm, &d_ln)?;
            grads.insert("head.norm.gamma".into(), dg);
            grads.insert("head.norm.beta".into(), db);
            d_pooled
        } else {
            d_ln
        };
        let (fh, fw) = cache.feat_hw;
        let plane = fh * fw;
        let inv = T::from_f64(1.0 / plane as f64);
        let mut d_feat = Tensor::zeros(&[b, c, fh, fw]);
        {
            let dd = d_feat.data_mut();
            let pd = d_pooled.data();
            for bi in 0..b {
                for ci in 0..c {
                    let g = pd[bi * c + ci] * inv;
                    let base = (bi * c + ci) * plane;
                    for v in &mut dd[base..base + plane] {
                        *v = g;
                    }
                }
            }
        }
        Ok((grads, d_feat))
    }

    /// Gradient of stem and stages; returns d(input).
    pub fn backward_features(
        &self,
        cache: &FeatureCache<T>,
        d_features: &Tensor<T>,
    ) -> Result<(GradStore<T>, Tensor<T>)> {
        self.check_version(cache.version)?;
        let mode = cache.mode;
        let mut grads = GradStore::new();
        let mut d = d_features.clone();

        for (si, stage) in self.stages.iter().enumerate().rev() {
            let scache = &cache.stages[si];
            let cdim = self.config.stage_dims[si];
            for (bi, block) in stage.blocks.iter().enumerate().rev() {
                let bc = &scache.blocks[bi];
                let p = format!("stages.{si}.blocks.{bi}");

                // Residual: d flows to both the skip and the branch.
                let mut d_branch = d.clone();
                if let Some((flags, scale)) = &bc.keep {
                    apply_drop(&mut d_branch, flags, T::from_f64(*scale));
                }
                let (d_pw2out, d_gamma) =
                    channel_scale_backward(&bc.pw2_out, &block.layer_scale, &d_branch);
                grads.insert(format!("{p}.gamma"), d_gamma);

                let (d_act, d_pw2w, d_pw2b) = conv2d_backward(
                    &bc.act,
                    &block.pw2_w,
                    &ConvSpec::pointwise(4 * cdim, cdim),
                    &d_pw2out,
                )?;
                grads.insert(format!("{p}.pw2.weight"), d_pw2w);
                grads.insert(format!("{p}.pw2.bias"), d_pw2b);

                let d_pw1out = if mode.keeps_norms() {
                    gelu_backward(&bc.pw1_out, &d_act)?
                } else {
                    d_act
                };

                let (d_lnout, d_pw1w, d_pw1b) = conv2d_backward(
                    &bc.ln_out,
                    &block.pw1_w,
                    &ConvSpec::pointwise(cdim, 4 * cdim),
                    &d_pw1out,
                )?;
                grads.insert(format!("{p}.pw1.weight"), d_pw1w);
                grads.insert(format!("{p}.pw1.bias"), d_pw1b);

                let d_dwout = if mode.keeps_norms() {
                    let (d_dwout, dg, db) = layernorm_backward(&bc.dw_out, &block.norm, &d_lnout)?;
                    grads.insert(format!("{p}.norm.gamma"), dg);
                    grads.insert(format!("{p}.norm.beta"), db);
                    d_dwout
                } else {
                    d_lnout
                };

                let dx_branch = block.dw.backward(&bc.x, &bc.dw, mode, &d_dwout, &p, &mut grads)?;
                d.axpy(T::one(), &dx_branch)?;
            }

            if let (Some(ds), Some(dsc)) = (&stage.downsample, &scache.downsample) {
                let spec = ConvSpec::full_square(
                    self.config.stage_dims[si - 1],
                    self.config.stage_dims[si],
                    2,
                    2,
                );
                let (d_ln, dw, db) = conv2d_backward(&dsc.ln_out, &ds.conv_w, &spec, &d)?;
                grads.insert(format!("stages.{si}.downsample.conv.weight"), dw);
                grads.insert(format!("stages.{si}.downsample.conv.bias"), db);
                d = if mode.keeps_norms() {
                    let (dx, dg, dbeta) = layernorm_backward(&dsc.x, &ds.norm, &d_ln)?;
                    grads.insert(format!("stages.{si}.downsample.norm.gamma"), dg);
                    grads.insert(format!("stages.{si}.downsample.norm.beta"), dbeta);
                    dx
                } else {
                    d_ln
                };
            }
        }

        let d_stemconv = if mode.keeps_norms() {
            let (dx, dg, db) = layernorm_backward(&cache.stem_conv, &self.stem.norm, &d)?;
            grads.insert("stem.norm.gamma".into(), dg);
            grads.insert("stem.norm.beta".into(), db);
            dx
        } else {
            d
        };
        let stem_spec =
            ConvSpec::full_square(self.config.in_channels, self.config.stage_dims[0], 4, 4);
        let (dx, dw, db) = conv2d_backward(&cache.x, &self.stem.conv_w, &stem_spec, &d_stemconv)?;
        grads.insert("stem.conv.weight".into(), dw);
        grads.insert("stem.conv.bias".into(), db);
        Ok((grads, dx))
    }

    /// Full backward from logit gradients; returns d(input image).
    pub fn backward(
        &self,
        cache: &ModelCache<T>,
        dlogits: &Tensor<T>,
    ) -> Result<(GradStore<T>, Tensor<T>)> {
        let (mut grads, d_feat) = self.backward_head(&cache.head, dlogits)?;
        let (fgrads, dx) = self.backward_features(&cache.features, &d_feat)?;
        grads.merge(fgrads);
        Ok((grads, dx))
    }
}

fn apply_drop<T: Scalar>(t: &mut Tensor<T>, flags: &[bool], scale: T) {
    let [b, c, h, w] = t.dims4();
    let sample = c * h * w;
    let data = t.data_mut();
    for (bi, &kept) in flags.iter().enumerate().take(b) {
        let seg = &mut data[bi * sample..(bi + 1) * sample];
        if kept {
            for v in seg.iter_mut() {
                *v *= scale;
            }
        } else {
            for v in seg.iter_mut() {
                *v = T::zero();
            }
        }
    }
}
