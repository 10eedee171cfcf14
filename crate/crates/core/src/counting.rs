//! Parameter and MAC accounting, walked off a [`ModelConfig`] without building
//! any tensors.
//!
//! The convention throughout: one multiply-accumulate is one FLOP, and only
//! convolution / linear weight multiplies count toward MACs (weight elements
//! times output positions, per image). Biases, norms, activations, and the
//! layer scale contribute parameters but no MACs. Batch-norm running
//! statistics are state, not parameters, and count toward neither.

use crate::error::{Result, SlakError};
use crate::model::{sparsifiable_ids, DwVariant, ModelConfig, SMALL_BRANCH};
use crate::sparsity::SparsityPlan;

/// Role of a tensor in the accounting tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Stem,
    Downsample,
    DwConv,
    PwConv,
    Norm,
    LayerScale,
    Head,
}

/// One state tensor: its id (matching the model visit order), shape, and
/// the parameter / MAC budget it carries at the given input size.
#[derive(Debug, Clone)]
pub struct LayerEntry {
    pub id: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub params: usize,
    pub macs: u64,
    pub trainable: bool,
}

impl LayerEntry {
    fn new(id: String, kind: LayerKind, shape: &[usize], macs: u64, trainable: bool) -> Self {
        LayerEntry {
            id,
            kind,
            shape: shape.to_vec(),
            params: shape.iter().product(),
            macs,
            trainable,
        }
    }
}

fn push_norm(out: &mut Vec<LayerEntry>, prefix: &str, c: usize) {
    out.push(LayerEntry::new(format!("{prefix}.gamma"), LayerKind::Norm, &[c], 0, true));
    out.push(LayerEntry::new(format!("{prefix}.beta"), LayerKind::Norm, &[c], 0, true));
}

fn push_bn(out: &mut Vec<LayerEntry>, prefix: &str, c: usize) {
    push_norm(out, prefix, c);
    out.push(LayerEntry::new(
        format!("{prefix}.running_mean"),
        LayerKind::Norm,
        &[c],
        0,
        false,
    ));
    out.push(LayerEntry::new(
        format!("{prefix}.running_var"),
        LayerKind::Norm,
        &[c],
        0,
        false,
    ));
}

/// Per-tensor accounting table at the given input size. Ids, shapes, and
/// order match [`crate::model::Model::visit`] exactly.
pub fn layer_table(config: &ModelConfig, input: (usize, usize)) -> Result<Vec<LayerEntry>> {
    config.validate()?;
    let (h, w) = input;
    if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
        return Err(SlakError::invalid_shape(format!(
            "input {h}x{w} does not survive the stride-4 stem"
        )));
    }
    let mut out = Vec::new();
    let c0 = config.stage_dims[0];
    let (mut sh, mut sw) = (h / 4, w / 4);
    let stem_pos = (sh * sw) as u64;
    let stem_shape = [c0, config.in_channels, 4, 4];
    out.push(LayerEntry::new(
        "stem.conv.weight".into(),
        LayerKind::Stem,
        &stem_shape,
        stem_shape.iter().product::<usize>() as u64 * stem_pos,
        true,
    ));
    out.push(LayerEntry::new("stem.conv.bias".into(), LayerKind::Stem, &[c0], 0, true));
    push_norm(&mut out, "stem.norm", c0);

    for si in 0..config.num_stages() {
        let c = config.stage_dims[si];
        if si > 0 {
            let prev = config.stage_dims[si - 1];
            sh /= 2;
            sw /= 2;
            let pos = (sh * sw) as u64;
            let p = format!("stages.{si}.downsample");
            push_norm(&mut out, &format!("{p}.norm"), prev);
            let shape = [c, prev, 2, 2];
            out.push(LayerEntry::new(
                format!("{p}.conv.weight"),
                LayerKind::Downsample,
                &shape,
                shape.iter().product::<usize>() as u64 * pos,
                true,
            ));
            out.push(LayerEntry::new(format!("{p}.conv.bias"), LayerKind::Downsample, &[c], 0, true));
        }
        let pos = (sh * sw) as u64;
        let k = config.stage_kernels[si];
        let n = config.short_edge;
        for bi in 0..config.stage_blocks[si] {
            let p = format!("stages.{si}.blocks.{bi}");
            let dw = |shape: &[usize]| shape.iter().product::<usize>() as u64 * pos;
            match config.dw_variant {
                DwVariant::Full => {
                    let shape = [c, 1, k, k];
                    out.push(LayerEntry::new(
                        format!("{p}.dw.weight"),
                        LayerKind::DwConv,
                        &shape,
                        dw(&shape),
                        true,
                    ));
                    out.push(LayerEntry::new(format!("{p}.dw.bias"), LayerKind::DwConv, &[c], 0, true));
                }
                DwVariant::Dilated { .. } => {
                    let shape = [c, 1, k, k];
                    out.push(LayerEntry::new(
                        format!("{p}.dw.weight"),
                        LayerKind::DwConv,
                        &shape,
                        dw(&shape),
                        true,
                    ));
                    out.push(LayerEntry::new(format!("{p}.dw.bias"), LayerKind::DwConv, &[c], 0, true));
                }
                DwVariant::DecomposedParallel => {
                    for (tag, shape) in [
                        ("a", [c, 1, k, n]),
                        ("b", [c, 1, n, k]),
                        ("c", [c, 1, SMALL_BRANCH, SMALL_BRANCH]),
                    ] {
                        out.push(LayerEntry::new(
                            format!("{p}.dw.{tag}.weight"),
                            LayerKind::DwConv,
                            &shape,
                            dw(&shape),
                            true,
                        ));
                        push_bn(&mut out, &format!("{p}.dw.{tag}.bn"), c);
                    }
                }
                DwVariant::DecomposedSequential => {
                    for (tag, shape) in [("a", [c, 1, k, n]), ("b", [c, 1, n, k])] {
                        out.push(LayerEntry::new(
                            format!("{p}.dw.{tag}.weight"),
                            LayerKind::DwConv,
                            &shape,
                            dw(&shape),
                            true,
                        ));
                    }
                }
                DwVariant::StackedSmall { count } => {
                    for i in 0..count {
                        let shape = [c, 1, 3, 3];
                        out.push(LayerEntry::new(
                            format!("{p}.dw.{i}.weight"),
                            LayerKind::DwConv,
                            &shape,
                            dw(&shape),
                            true,
                        ));
                        out.push(LayerEntry::new(
                            format!("{p}.dw.{i}.bias"),
                            LayerKind::DwConv,
                            &[c],
                            0,
                            true,
                        ));
                    }
                }
            }
            push_norm(&mut out, &format!("{p}.norm"), c);
            let pw1 = [4 * c, c, 1, 1];
            out.push(LayerEntry::new(
                format!("{p}.pw1.weight"),
                LayerKind::PwConv,
                &pw1,
                pw1.iter().product::<usize>() as u64 * pos,
                true,
            ));
            out.push(LayerEntry::new(format!("{p}.pw1.bias"), LayerKind::PwConv, &[4 * c], 0, true));
            let pw2 = [c, 4 * c, 1, 1];
            out.push(LayerEntry::new(
                format!("{p}.pw2.weight"),
                LayerKind::PwConv,
                &pw2,
                pw2.iter().product::<usize>() as u64 * pos,
                true,
            ));
            out.push(LayerEntry::new(format!("{p}.pw2.bias"), LayerKind::PwConv, &[c], 0, true));
            out.push(LayerEntry::new(format!("{p}.gamma"), LayerKind::LayerScale, &[c], 0, true));
        }
    }

    let c_last = *config.stage_dims.last().expect("non-empty");
    push_norm(&mut out, "head.norm", c_last);
    let fc = [config.num_classes, c_last, 1, 1];
    out.push(LayerEntry::new(
        "head.fc.weight".into(),
        LayerKind::Head,
        &fc,
        fc.iter().product::<usize>() as u64,
        true,
    ));
    out.push(LayerEntry::new(
        "head.fc.bias".into(),
        LayerKind::Head,
        &[config.num_classes],
        0,
        true,
    ));
    Ok(out)
}

/// Looks up the active count a plan assigns to each table row.
fn plan_lookup<'a>(plan: &'a SparsityPlan, id: &str) -> Option<usize> {
    plan.included_layers
        .iter()
        .position(|l| l == id)
        .map(|i| plan.per_layer_nnz[i])
}

fn check_plan_ids(table: &[LayerEntry], plan: &SparsityPlan) -> Result<()> {
    for id in &plan.included_layers {
        if !table.iter().any(|e| &e.id == id) {
            return Err(SlakError::ConfigMismatch(format!(
                "sparsity plan names {id}, which this architecture does not have"
            )));
        }
    }
    Ok(())
}

/// Trainable parameter count. With a plan, a planned layer contributes its
/// active weights instead of its dense size.
pub fn count_params(config: &ModelConfig, plan: Option<&SparsityPlan>) -> Result<usize> {
    let table = layer_table(config, (config.input_size, config.input_size))?;
    if let Some(p) = plan {
        check_plan_ids(&table, p)?;
    }
    Ok(table
        .iter()
        .filter(|e| e.trainable)
        .map(|e| {
            plan.and_then(|p| plan_lookup(p, &e.id))
                .map_or(e.params, |nnz| nnz.min(e.params))
        })
        .sum())
}

/// Per-image MACs at the given input size. With a plan, a planned layer's
/// MACs scale by its density nnz / weights.
pub fn count_flops(
    config: &ModelConfig,
    input: (usize, usize),
    plan: Option<&SparsityPlan>,
) -> Result<f64> {
    let table = layer_table(config, input)?;
    if let Some(p) = plan {
        check_plan_ids(&table, p)?;
    }
    Ok(table
        .iter()
        .map(|e| match plan.and_then(|p| plan_lookup(p, &e.id)) {
            Some(nnz) if e.params > 0 => e.macs as f64 * nnz as f64 / e.params as f64,
            _ => e.macs as f64,
        })
        .sum())
}

/// MACs of the depthwise layers alone; the quantity whose growth in the
/// kernel edge separates dense from decomposed units.
pub fn dw_flops(config: &ModelConfig, input: (usize, usize)) -> Result<u64> {
    Ok(layer_table(config, input)?
        .iter()
        .filter(|e| e.kind == LayerKind::DwConv)
        .map(|e| e.macs)
        .sum())
}

/// Same config with the stage widths swapped out.
pub fn scaled_config(base: &ModelConfig, dims: &[usize]) -> ModelConfig {
    ModelConfig { stage_dims: dims.to_vec(), ..base.clone() }
}

/// Continuous sparsity-aware parameter count: sparsifiable layers contribute
/// the fraction (1 - s) of their weights, everything else its dense size.
/// This is the objective the width planner minimizes against, so it stays
/// fractional instead of rounding to whole weights.
pub fn sparse_aware_params(config: &ModelConfig, sparsity: f64) -> Result<f64> {
    let table = layer_table(config, (config.input_size, config.input_size))?;
    let sparse: std::collections::BTreeSet<String> = sparsifiable_ids(config).into_iter().collect();
    Ok(table
        .iter()
        .filter(|e| e.trainable)
        .map(|e| {
            if sparse.contains(&e.id) {
                e.params as f64 * (1.0 - sparsity)
            } else {
                e.params as f64
            }
        })
        .sum())
}

/// Continuous sparsity-aware MAC count under the same convention.
pub fn sparse_aware_flops(config: &ModelConfig, input: (usize, usize), sparsity: f64) -> Result<f64> {
    let table = layer_table(config, input)?;
    let sparse: std::collections::BTreeSet<String> = sparsifiable_ids(config).into_iter().collect();
    Ok(table
        .iter()
        .map(|e| {
            if sparse.contains(&e.id) {
                e.macs as f64 * (1.0 - sparsity)
            } else {
                e.macs as f64
            }
        })
        .sum())
}

/// A plan that spreads the global budget uniformly: every sparsifiable layer
/// keeps round((1 - s) * weights), with the largest layer absorbing the
/// rounding remainder so the global invariant holds exactly.
pub fn uniform_plan(config: &ModelConfig, sparsity: f64) -> Result<SparsityPlan> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(SlakError::invalid_config(
            "sparsity",
            format!("{sparsity} outside [0, 1)"),
        ));
    }
    let table = layer_table(config, (config.input_size, config.input_size))?;
    let ids = sparsifiable_ids(config);
    let sizes: Vec<usize> = ids
        .iter()
        .map(|id| {
            table
                .iter()
                .find(|e| &e.id == id)
                .map(|e| e.params)
                .expect("sparsifiable id present in table")
        })
        .collect();
    let total: usize = sizes.iter().sum();
    let budget = ((1.0 - sparsity) * total as f64).round() as usize;
    let mut nnz: Vec<usize> = sizes
        .iter()
        .map(|&n| ((1.0 - sparsity) * n as f64).round() as usize)
        .collect();
    let have: usize = nnz.iter().sum();
    let largest = sizes
        .iter()
        .enumerate()
        .max_by_key(|(_, &n)| n)
        .map(|(i, _)| i)
        .expect("at least one sparsifiable layer");
    if have > budget {
        nnz[largest] -= have - budget;
    } else {
        nnz[largest] += budget - have;
        if nnz[largest] > sizes[largest] {
            return Err(SlakError::DegeneratePlan(format!(
                "uniform plan cannot place {} active weights into a layer of {}",
                nnz[largest], sizes[largest]
            )));
        }
    }
    let plan = SparsityPlan {
        target_sparsity: sparsity,
        included_layers: ids,
        per_layer_nnz: nnz,
    };
    plan.validate(total)?;
    Ok(plan)
}

/// Width planning against this architecture: widen stage dims on the tenths
/// grid until the sparsity-aware parameter count best matches the dense
/// baseline of the unwidened config.
pub fn plan_width(base: &ModelConfig, sparsity: f64) -> Result<(f64, Vec<usize>)> {
    let counter = |dims: &[usize], s: f64| -> f64 {
        sparse_aware_params(&scaled_config(base, dims), s).unwrap_or(f64::NAN)
    };
    crate::sparsity::width_plan(&base.stage_dims, sparsity, &counter)
}
