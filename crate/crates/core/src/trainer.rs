//! Training loop: AdamW with warmup-cosine learning rate, label-smoothed
//! cross entropy, a synthetic two-marker task, and the sparse-training
//! discipline (saliency-seeded masks, prune-and-grow adaptation, masks
//! re-applied after every optimizer step).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlakError};
use crate::model::{ForwardMode, GradStore, Model, ParamKind};
use crate::rng::{RngStream, StreamId};
use crate::sparsity::{
    apply_mask, build_masks_global_topk, clamped_adaptation_step, cosine_adaptation_rate,
    snip_scores, AdaptationConfig, Mask, SparsityPlan,
};
use crate::tensor::{Scalar, Tensor};

/// Reference batch size the peak learning rate is quoted against.
const LR_REFERENCE_BATCH: f64 = 4096.0;

/// Rolling window (in steps) for the early-stop accuracy signal.
const EARLY_STOP_WINDOW: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub batch: usize,
    pub seed: u64,
    /// Global sparsity target; 0 trains dense.
    pub sparsity: f64,
    /// Steps between prune/grow adaptations.
    pub adapt_every: usize,
    /// Initial prune/grow fraction, decayed along the cosine.
    pub initial_prune_rate: f64,
    /// Stop once the rolling train accuracy reaches this value.
    pub early_stop_acc: Option<f64>,
}

/// 4e-3 at the reference batch of 4096, scaled linearly down to the actual
/// batch.
pub fn default_peak_lr(batch: usize) -> f64 {
    4e-3 * batch as f64 / LR_REFERENCE_BATCH
}

impl TrainConfig {
    /// Desk-scale defaults for a given run length: batch 64, warmup 5% of the
    /// run, the batch-scaled peak rate, and dense training.
    pub fn desk(total_steps: usize) -> Self {
        TrainConfig {
            total_steps,
            warmup_steps: total_steps / 20,
            peak_lr: default_peak_lr(64),
            weight_decay: 0.05,
            label_smoothing: 0.1,
            batch: 64,
            seed: 0,
            sparsity: 0.0,
            adapt_every: 100,
            initial_prune_rate: 0.3,
            early_stop_acc: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(SlakError::invalid_config(
                "warmup_steps",
                format!("{} does not precede total_steps {}", self.warmup_steps, self.total_steps),
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(SlakError::invalid_config("peak_lr", "must be positive and finite"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(SlakError::invalid_config("weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(SlakError::invalid_config("label_smoothing", "must lie in [0, 1)"));
        }
        if self.batch == 0 {
            return Err(SlakError::invalid_config("batch", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(SlakError::invalid_config("sparsity", "must lie in [0, 1)"));
        }
        if self.adapt_every == 0 {
            return Err(SlakError::invalid_config("adapt_every", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.initial_prune_rate) {
            return Err(SlakError::invalid_config("initial_prune_rate", "must lie in [0, 1]"));
        }
        if let Some(a) = self.early_stop_acc {
            if !(0.0..=1.0).contains(&a) {
                return Err(SlakError::invalid_config("early_stop_acc", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    fn adaptation(&self) -> AdaptationConfig {
        AdaptationConfig {
            frequency: self.adapt_every,
            initial_rate: self.initial_prune_rate,
            horizon: self.total_steps,
            seed: self.seed,
        }
    }
}

/// Linear warmup from zero to the peak over `warmup_steps`, then a cosine
/// decay to zero at `total_steps`. Steps outside [0, total] are a schedule
/// range error.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> Result<f64> {
    let total = config.total_steps;
    if step > total {
        return Err(SlakError::ScheduleRange { step, horizon: total });
    }
    if step < config.warmup_steps {
        return Ok(config.peak_lr * step as f64 / config.warmup_steps as f64);
    }
    let span = (total - config.warmup_steps) as f64;
    if span == 0.0 {
        return Ok(0.0);
    }
    let progress = (step - config.warmup_steps) as f64 / span;
    Ok(config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Mean label-smoothed cross entropy over the batch and its logit gradient.
/// Targets are (1 - eps) on the label plus eps / K everywhere.
pub fn cross_entropy_ls<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    eps: f64,
) -> Result<(f64, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(SlakError::invalid_shape(format!(
            "logits must be (batch, classes), got {:?}",
            logits.shape()
        )));
    }
    let b = logits.shape()[0];
    let k = logits.shape()[1];
    if labels.len() != b {
        return Err(SlakError::invalid_shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(SlakError::invalid_config("label_smoothing", "must lie in [0, 1)"));
    }
    let ld = logits.data();
    let mut dlogits = Tensor::zeros(logits.shape());
    let dd = dlogits.data_mut();
    let mut loss = 0.0f64;
    let uniform = eps / k as f64;
    let inv_b = 1.0 / b as f64;
    for (bi, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(SlakError::invalid_config(
                "labels",
                format!("label {label} out of range for {k} classes"),
            ));
        }
        let row = &ld[bi * k..(bi + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
        let mut z = 0.0f64;
        for &v in row {
            z += (v.to_f64() - max).exp();
        }
        let log_z = z.ln() + max;
        for (ki, &v) in row.iter().enumerate() {
            let log_p = v.to_f64() - log_z;
            let q = uniform + if ki == label { 1.0 - eps } else { 0.0 };
            loss -= q * log_p;
            dd[bi * k + ki] = T::from_f64((log_p.exp() - q) * inv_b);
        }
    }
    loss *= inv_b;
    if !loss.is_finite() {
        return Err(SlakError::numeric("cross_entropy", "non-finite loss"));
    }
    Ok((loss, dlogits))
}

// ---------------------------------------------------------------------------
// Optimizer.

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Decoupled AdamW update on one tensor. `step` is the 1-indexed update
/// count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: usize,
    lr: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad[i].to_f64();
        let mi = BETA1 * m[i].to_f64() + (1.0 - BETA1) * g;
        let vi = BETA2 * v[i].to_f64() + (1.0 - BETA2) * g * g;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        let t = theta[i].to_f64();
        theta[i] = T::from_f64(t - lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * t));
    }
}

/// First and second moments per parameter id, plus the shared step counter.
pub struct OptimState<T: Scalar = f32> {
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
    pub step: usize,
}

impl<T: Scalar> Default for OptimState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> OptimState<T> {
    pub fn new() -> Self {
        OptimState { m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }

    /// One optimizer step over every trainable tensor. Weight decay applies
    /// to `.weight` tensors only; biases, norm parameters, and the layer
    /// scale are not decayed. A non-finite gradient is a numeric error
    /// naming the offending tensor.
    pub fn step_model(
        &mut self,
        model: &mut Model<T>,
        grads: &GradStore<T>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.step += 1;
        let step = self.step;
        let mut problem: Option<SlakError> = None;
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |id, kind, theta| {
            if problem.is_some() || kind != ParamKind::Trainable {
                return;
            }
            let Some(g) = grads.get(id) else {
                problem = Some(SlakError::numeric(id, "no gradient for trainable tensor"));
                return;
            };
            if g.data().iter().any(|&x| !x.to_f64().is_finite()) {
                problem = Some(SlakError::numeric(id, "non-finite gradient"));
                return;
            }
            let m = m_map.entry(id.to_string()).or_insert_with(|| Tensor::zeros(theta.shape()));
            let v = v_map.entry(id.to_string()).or_insert_with(|| Tensor::zeros(theta.shape()));
            let wd = if id.ends_with(".weight") { weight_decay } else { 0.0 };
            adamw_update(theta.data_mut(), g.data(), m.data_mut(), v.data_mut(), step, lr, wd);
        });
        match problem {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Clears the moments of specific positions of one tensor, used after a
    /// prune/grow step so stale momentum does not drag fresh connections.
    pub fn reset_positions(&mut self, id: &str, positions: &[usize]) {
        for map in [&mut self.m, &mut self.v] {
            if let Some(t) = map.get_mut(id) {
                let data = t.data_mut();
                for &i in positions {
                    if i < data.len() {
                        data[i] = T::zero();
                    }
                }
            }
        }
    }

    pub fn moment(&self, id: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match (self.m.get(id), self.v.get(id)) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic task.

/// Two bright 3x3 markers on a noisy background; the class is whether their
/// Chebyshev distance exceeds the threshold. The default threshold splits
/// the two classes nearly evenly on a 64x64 canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub image_size: usize,
    pub marker_count: usize,
    pub threshold: usize,
    pub noise: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask { image_size: 64, marker_count: 2, threshold: 29, noise: 0.1 }
    }
}

pub const TASK_CHANNELS: usize = 3;

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(SlakError::invalid_config("image_size", "too small to place markers"));
        }
        if self.marker_count != 2 {
            return Err(SlakError::invalid_config(
                "marker_count",
                "the distance task is defined for exactly two markers",
            ));
        }
        if self.threshold >= self.image_size {
            return Err(SlakError::invalid_config(
                "threshold",
                "no marker pair can be further apart than the canvas",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(SlakError::invalid_config("noise", "must be non-negative"));
        }
        Ok(())
    }
}

fn render_marker(data: &mut [f32], size: usize, r: usize, c: usize) {
    let lo_r = r.saturating_sub(1);
    let hi_r = (r + 1).min(size - 1);
    let lo_c = c.saturating_sub(1);
    let hi_c = (c + 1).min(size - 1);
    for ch in 0..TASK_CHANNELS {
        for rr in lo_r..=hi_r {
            for cc in lo_c..=hi_c {
                data[(ch * size + rr) * size + cc] = 1.0;
            }
        }
    }
}

/// Draws one batch. Per sample the stream yields the two marker positions
/// (row, col, row, col), then one uniform per pixel when noise is on.
pub fn synth_batch(
    task: &SyntheticTask,
    batch: usize,
    stream: &mut RngStream,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    task.validate()?;
    if batch == 0 {
        return Err(SlakError::invalid_config("batch", "must be at least 1"));
    }
    let s = task.image_size;
    let sample = TASK_CHANNELS * s * s;
    let mut x = Tensor::zeros(&[batch, TASK_CHANNELS, s, s]);
    let mut labels = Vec::with_capacity(batch);
    let data = x.data_mut();
    for bi in 0..batch {
        let r1 = stream.below(s);
        let c1 = stream.below(s);
        let r2 = stream.below(s);
        let c2 = stream.below(s);
        let seg = &mut data[bi * sample..(bi + 1) * sample];
        if task.noise > 0.0 {
            for v in seg.iter_mut() {
                *v = (task.noise * stream.uniform()) as f32;
            }
        }
        render_marker(seg, s, r1, c1);
        render_marker(seg, s, r2, c2);
        let cheb = r1.abs_diff(r2).max(c1.abs_diff(c2));
        labels.push(usize::from(cheb > task.threshold));
    }
    Ok((x, labels))
}

// ---------------------------------------------------------------------------
// Sparse bookkeeping.

/// Zeroes every masked weight in place.
pub fn apply_masks(model: &mut Model, masks: &BTreeMap<String, Mask>) -> Result<()> {
    let mut problem: Option<SlakError> = None;
    let mut used = 0usize;
    model.visit_params_mut(&mut |id, _, t| {
        if problem.is_some() {
            return;
        }
        if let Some(mask) = masks.get(id) {
            used += 1;
            if let Err(e) = apply_mask(t, mask) {
                problem = Some(e);
            }
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if used != masks.len() {
        return Err(SlakError::ConfigMismatch(format!(
            "{} masks given, only {used} matched a model tensor",
            masks.len()
        )));
    }
    Ok(())
}

/// Largest |weight| found at a masked-off position; exactly 0.0 when the
/// masking discipline holds.
pub fn max_masked_weight(model: &Model, masks: &BTreeMap<String, Mask>) -> f64 {
    let mut worst = 0.0f64;
    model.visit(&mut |id, _, t| {
        if let Some(mask) = masks.get(id) {
            for (i, &v) in t.data().iter().enumerate() {
                if !mask.is_active(i) {
                    worst = worst.max(v.to_f64().abs());
                }
            }
        }
    });
    worst
}

fn global_sparsity(masks: &BTreeMap<String, Mask>) -> f64 {
    let total: usize = masks.values().map(Mask::len).sum();
    if total == 0 {
        return 0.0;
    }
    let nnz: usize = masks.values().map(Mask::nnz).sum();
    1.0 - nnz as f64 / total as f64
}

/// Scores every sparsifiable tensor with |w * dL/dw| on one seeded batch
/// (the same batch the training loop will see first), then cuts a single
/// global top-k mask set at the requested sparsity.
pub fn build_snip_masks(
    model: &mut Model,
    task: &SyntheticTask,
    config: &TrainConfig,
) -> Result<(BTreeMap<String, Mask>, SparsityPlan)> {
    config.validate()?;
    let mut data_stream = RngStream::for_purpose(config.seed, StreamId::Data);
    let (x, labels) = synth_batch(task, config.batch, &mut data_stream)?;
    let (logits, cache) = model.forward(&x, ForwardMode::Train)?;
    let (_, dlogits) = cross_entropy_ls(&logits, &labels, config.label_smoothing)?;
    let (grads, _) = model.backward(&cache, &dlogits)?;

    let ids = model.sparsifiable_ids();
    let mut scores = Vec::with_capacity(ids.len());
    for id in &ids {
        let w = model.param(id)?;
        let g = grads
            .get(id)
            .ok_or_else(|| SlakError::numeric(id, "no gradient for saliency scoring"))?;
        scores.push(snip_scores(&w, g)?);
    }
    let mask_list = build_masks_global_topk(&scores, config.sparsity)?;
    let plan = SparsityPlan::from_masks(config.sparsity, ids.clone(), &mask_list);
    let total: usize = scores.iter().map(Tensor::len).sum();
    plan.validate(total)?;
    Ok((ids.into_iter().zip(mask_list).collect(), plan))
}

// ---------------------------------------------------------------------------
// Metrics.

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
    pub p_t: f64,
    pub global_sparsity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptationEvent {
    pub step: usize,
    pub pruned: usize,
    pub grown: usize,
    /// (layer id, layer sparsity) after this adaptation.
    pub per_layer: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainResult {
    pub rows: Vec<MetricsRow>,
    pub adaptations: Vec<AdaptationEvent>,
    /// Running max over all steps of |weight| at masked positions; stays 0.0
    /// when the masking discipline holds.
    pub max_masked_weight_abs: f64,
    pub final_global_sparsity: f64,
    /// Last executed step; less than total_steps when early stop fired.
    pub stopped_at: usize,
}

/// `step,loss,acc,lr,p_t,global_sparsity` with one row per executed step.
pub fn write_metrics_csv(path: &Path, result: &TrainResult) -> Result<()> {
    std::fs::write(path, metrics_csv(result))?;
    Ok(())
}

pub fn metrics_csv(result: &TrainResult) -> String {
    let mut out = String::from("step,loss,acc,lr,p_t,global_sparsity\n");
    for r in &result.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.loss, r.acc, r.lr, r.p_t, r.global_sparsity
        ));
    }
    out
}

fn batch_accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let b = logits.shape()[0];
    let k = logits.shape()[1];
    let ld = logits.data();
    let mut hits = 0usize;
    for (bi, &label) in labels.iter().enumerate() {
        let row = &ld[bi * k..(bi + 1) * k];
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v.to_f64() > row[best].to_f64() {
                best = i;
            }
        }
        hits += usize::from(best == label);
    }
    hits as f64 / b as f64
}

/// Runs the loop. With sparsity on, `masks` carries the initial mask set in
/// and the final one out; it must cover exactly the sparsifiable tensors.
/// With `total_steps == 0` the function validates, applies masks, and
/// returns an empty log.
pub fn train(
    model: &mut Model,
    task: &SyntheticTask,
    config: &TrainConfig,
    mut masks: Option<&mut BTreeMap<String, Mask>>,
) -> Result<TrainResult> {
    config.validate()?;
    task.validate()?;
    let sparse = config.sparsity > 0.0;
    if sparse && masks.is_none() {
        return Err(SlakError::invalid_config(
            "sparsity",
            "sparse training needs an initial mask set",
        ));
    }
    if let Some(m) = masks.as_deref() {
        let ids = model.sparsifiable_ids();
        if m.len() != ids.len() || !ids.iter().all(|id| m.contains_key(id)) {
            return Err(SlakError::ConfigMismatch(
                "mask set does not cover exactly the sparsifiable tensors".into(),
            ));
        }
        let budget: usize = m.values().map(Mask::nnz).sum();
        assert!(budget > 0, "empty mask budget");
    }
    let adaptation = config.adaptation();
    if config.total_steps > 0 {
        adaptation.validate()?;
    }

    if let Some(m) = masks.as_deref() {
        apply_masks(model, m)?;
    }

    let mut data_stream = RngStream::for_purpose(config.seed, StreamId::Data);
    let mut growth_stream = RngStream::for_purpose(config.seed, StreamId::Growth);
    let mut optim: OptimState = OptimState::new();
    let mut result = TrainResult {
        rows: Vec::new(),
        adaptations: Vec::new(),
        max_masked_weight_abs: 0.0,
        final_global_sparsity: masks.as_deref().map_or(0.0, |m| global_sparsity(m)),
        stopped_at: 0,
    };

    for t in 1..=config.total_steps {
        let lr = lr_schedule(t, config)?;
        let (x, labels) = synth_batch(task, config.batch, &mut data_stream)?;
        let (logits, cache) = model.forward(&x, ForwardMode::Train)?;
        let (loss, dlogits) = cross_entropy_ls(&logits, &labels, config.label_smoothing)?;
        let acc = batch_accuracy(&logits, &labels);
        let (mut grads, _) = model.backward(&cache, &dlogits)?;

        // Inactive weights take no part in the update; their gradient is
        // zeroed so the moments stay clean for the day they are grown.
        if let Some(m) = masks.as_deref() {
            for (id, mask) in m {
                if let Some(g) = grads.get_mut(id) {
                    apply_mask(g, mask)?;
                }
            }
        }
        optim.step_model(model, &grads, lr, config.weight_decay)?;
        if let Some(m) = masks.as_deref() {
            apply_masks(model, m)?;
        }

        let p_t = if sparse {
            cosine_adaptation_rate(config.initial_prune_rate, t, config.total_steps)?
        } else {
            0.0
        };

        if sparse && adaptation.adapts_at(t) {
            let m = masks.as_deref_mut().expect("checked above");
            let nnz_before: usize = m.values().map(Mask::nnz).sum();
            let mut event = AdaptationEvent {
                step: t,
                pruned: 0,
                grown: 0,
                per_layer: Vec::new(),
            };
            let mut problem: Option<SlakError> = None;
            model.visit_params_mut(&mut |id, _, w| {
                if problem.is_some() {
                    return;
                }
                let Some(mask) = m.get_mut(id) else { return };
                // Clamped: top-k seeding can leave a layer nearly dense,
                // with fewer free slots than the cosine rate asks for.
                match clamped_adaptation_step(w, mask, p_t, &mut growth_stream) {
                    Ok(outcome) => {
                        let mut touched = outcome.pruned.clone();
                        touched.extend_from_slice(&outcome.grown);
                        optim.reset_positions(id, &touched);
                        event.pruned += outcome.pruned.len();
                        event.grown += outcome.grown.len();
                        event
                            .per_layer
                            .push((id.to_string(), outcome.mask.sparsity()));
                        *mask = outcome.mask;
                    }
                    Err(e) => problem = Some(e),
                }
            });
            if let Some(e) = problem {
                return Err(e);
            }
            let nnz_after: usize = m.values().map(Mask::nnz).sum();
            debug_assert_eq!(nnz_before, nnz_after, "adaptation must conserve the budget");
            apply_masks(model, m)?;
            result.adaptations.push(event);
        }

        if let Some(m) = masks.as_deref() {
            result.max_masked_weight_abs =
                result.max_masked_weight_abs.max(max_masked_weight(model, m));
            result.final_global_sparsity = global_sparsity(m);
        }
        result.rows.push(MetricsRow {
            step: t,
            loss,
            acc,
            lr,
            p_t,
            global_sparsity: result.final_global_sparsity,
        });
        result.stopped_at = t;

        if let Some(target) = config.early_stop_acc {
            let n = result.rows.len();
            if n >= EARLY_STOP_WINDOW {
                let tail = &result.rows[n - EARLY_STOP_WINDOW..];
                let mean: f64 = tail.iter().map(|r| r.acc).sum::<f64>() / EARLY_STOP_WINDOW as f64;
                if mean >= target {
                    break;
                }
            }
        }
    }

    Ok(result)
}
