//! Dynamic sparsity: SNIP-seeded mask construction, magnitude prune plus
//! random regrowth on a cosine-decayed rate, and the width-for-sparsity
//! planner that trades parameters freed by sparsity for extra channels.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlakError};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Binary occupancy pattern congruent to one weight tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
    nnz: usize,
}

impl Mask {
    pub fn dense(shape: &[usize]) -> Mask {
        let n: usize = shape.iter().product();
        Mask {
            shape: shape.to_vec(),
            bits: vec![true; n],
            nnz: n,
        }
    }

    pub fn from_bits(shape: &[usize], bits: Vec<bool>) -> Result<Mask> {
        let n: usize = shape.iter().product();
        if bits.len() != n {
            return Err(SlakError::InvalidMask(format!(
                "mask shape {shape:?} wants {n} bits, got {}",
                bits.len()
            )));
        }
        let nnz = bits.iter().filter(|&&b| b).count();
        Ok(Mask {
            shape: shape.to_vec(),
            bits,
            nnz,
        })
    }

    /// Interpret a float tensor as a mask; values must be exactly 0 or 1.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Mask> {
        let mut bits = Vec::with_capacity(t.len());
        for (i, &v) in t.data().iter().enumerate() {
            if v == T::one() {
                bits.push(true);
            } else if v == T::zero() {
                bits.push(false);
            } else {
                return Err(SlakError::InvalidMask(format!(
                    "non-binary value {v} at flat index {i}"
                )));
            }
        }
        Mask::from_bits(t.shape(), bits)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let vals: Vec<T> = self
            .bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        Tensor::from_values(&self.shape, &vals).expect("congruent by construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.nnz as f64 / self.bits.len() as f64
    }

    #[inline]
    pub fn is_active(&self, flat: usize) -> bool {
        self.bits[flat]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Row-major bitset, LSB first, zero-padded to whole bytes.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(shape: &[usize], bytes: &[u8]) -> Result<Mask> {
        let n: usize = shape.iter().product();
        if bytes.len() != n.div_ceil(8) {
            return Err(SlakError::InvalidMask(format!(
                "packed mask for shape {shape:?} wants {} bytes, got {}",
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let bits: Vec<bool> = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Mask::from_bits(shape, bits)
    }
}

/// Where the parameter budget sits after global SNIP allocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub target_sparsity: f64,
    pub included_layers: Vec<String>,
    pub per_layer_nnz: Vec<usize>,
}

impl SparsityPlan {
    pub fn from_masks(target_sparsity: f64, ids: Vec<String>, masks: &[Mask]) -> SparsityPlan {
        SparsityPlan {
            target_sparsity,
            included_layers: ids,
            per_layer_nnz: masks.iter().map(Mask::nnz).collect(),
        }
    }

    pub fn total_nnz(&self) -> usize {
        self.per_layer_nnz.iter().sum()
    }

    /// Check the global budget: active count must equal
    /// round((1 - s) * total included weights).
    pub fn validate(&self, total_weights: usize) -> Result<()> {
        if self.included_layers.len() != self.per_layer_nnz.len() {
            return Err(SlakError::DegeneratePlan(format!(
                "{} layer ids vs {} nnz entries",
                self.included_layers.len(),
                self.per_layer_nnz.len()
            )));
        }
        let want = ((1.0 - self.target_sparsity) * total_weights as f64).round() as usize;
        if self.total_nnz() != want {
            return Err(SlakError::DegeneratePlan(format!(
                "plan keeps {} of {total_weights} weights, budget is {want}",
                self.total_nnz()
            )));
        }
        Ok(())
    }
}

/// Prune/grow cadence for dynamic sparsity.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// Steps between adaptations (ΔT).
    pub frequency: usize,
    /// Initial prune/grow fraction p0.
    pub initial_rate: f64,
    /// Final training step T; the rate decays to zero here.
    pub horizon: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            frequency: 100,
            initial_rate: 0.3,
            horizon: 1000,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frequency == 0 {
            return Err(SlakError::invalid_config("frequency", "must be at least 1"));
        }
        if !(self.initial_rate > 0.0 && self.initial_rate <= 1.0) {
            return Err(SlakError::invalid_config(
                "initial_rate",
                format!("{} outside (0, 1]", self.initial_rate),
            ));
        }
        if self.horizon == 0 {
            return Err(SlakError::invalid_config("horizon", "must be positive"));
        }
        Ok(())
    }

    /// Whether step `t` (1-indexed) performs prune/grow.
    pub fn adapts_at(&self, t: usize) -> bool {
        t % self.frequency == 0 && t < self.horizon
    }
}

/// Connection sensitivity |g ⊙ w|.
pub fn snip_scores<T: Scalar>(w: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    if w.shape() != g.shape() {
        return Err(SlakError::invalid_shape(format!(
            "weights {:?} vs gradients {:?}",
            w.shape(),
            g.shape()
        )));
    }
    Ok(w.zip_map(g, |a, b| (a * b).abs())?)
}

/// Keep the globally highest-scoring K = round((1-s) * N) positions across
/// all layers; ties broken by ascending (layer, flat) index. Returns one
/// mask per score tensor, in input order.
pub fn build_masks_global_topk<T: Scalar>(scores: &[Tensor<T>], s: f64) -> Result<Vec<Mask>> {
    if !(0.0..1.0).contains(&s) {
        return Err(SlakError::invalid_config(
            "sparsity",
            format!("{s} outside [0, 1)"),
        ));
    }
    let total: usize = scores.iter().map(|t| t.len()).sum();
    let keep = ((1.0 - s) * total as f64).round() as usize;
    if keep == 0 {
        return Err(SlakError::DegeneratePlan(format!(
            "top-k budget is zero for {total} weights at sparsity {s}"
        )));
    }
    let mut entries: Vec<(f64, u32, u32)> = Vec::with_capacity(total);
    for (li, t) in scores.iter().enumerate() {
        for (fi, &v) in t.data().iter().enumerate() {
            let sv = v.to_f64();
            if !sv.is_finite() {
                return Err(SlakError::numeric(
                    "build_masks_global_topk",
                    format!("non-finite score {sv} in layer {li} at flat index {fi}"),
                ));
            }
            entries.push((sv, li as u32, fi as u32));
        }
    }
    entries.sort_unstable_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("scores checked finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut bit_sets: Vec<Vec<bool>> = scores.iter().map(|t| vec![false; t.len()]).collect();
    for &(_, li, fi) in &entries[..keep] {
        bit_sets[li as usize][fi as usize] = true;
    }
    scores
        .iter()
        .zip(bit_sets)
        .map(|(t, bits)| Mask::from_bits(t.shape(), bits))
        .collect()
}

/// Deactivate the k active positions with smallest |w|; ties broken by
/// ascending flat index.
pub fn magnitude_prune<T: Scalar>(w: &Tensor<T>, mask: &Mask, k: usize) -> Result<Mask> {
    if w.shape() != mask.shape() {
        return Err(SlakError::invalid_shape(format!(
            "weights {:?} vs mask {:?}",
            w.shape(),
            mask.shape()
        )));
    }
    if k > mask.nnz() {
        return Err(SlakError::InvalidCount(format!(
            "cannot prune {k} of {} active weights",
            mask.nnz()
        )));
    }
    let mut active: Vec<(f64, usize)> = mask
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| (w.data()[i].to_f64().abs(), i))
        .collect();
    active.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let mut bits = mask.bits().to_vec();
    for &(_, i) in &active[..k] {
        bits[i] = false;
    }
    Mask::from_bits(mask.shape(), bits)
}

/// Activate k inactive positions chosen uniformly without replacement.
/// Returns the new mask and the grown flat indices (ascending).
pub fn random_grow(mask: &Mask, k: usize, stream: &mut RngStream) -> Result<(Mask, Vec<usize>)> {
    let inactive: Vec<usize> = mask
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| !b)
        .map(|(i, _)| i)
        .collect();
    if k > inactive.len() {
        return Err(SlakError::InvalidCount(format!(
            "cannot grow {k} positions with only {} inactive",
            inactive.len()
        )));
    }
    let picks = stream.sample_indices(inactive.len(), k);
    let mut grown: Vec<usize> = picks.into_iter().map(|i| inactive[i]).collect();
    grown.sort_unstable();
    let mut bits = mask.bits().to_vec();
    for &i in &grown {
        bits[i] = true;
    }
    Ok((Mask::from_bits(mask.shape(), bits)?, grown))
}

/// One prune/grow cycle on a single layer.
#[derive(Clone, Debug)]
pub struct AdaptationOutcome {
    pub mask: Mask,
    /// Flat indices deactivated this step (ascending).
    pub pruned: Vec<usize>,
    /// Flat indices activated this step (ascending); their weights are
    /// zeroed in place.
    pub grown: Vec<usize>,
}

/// Prune floor(p_t * nnz) weights by magnitude, then grow the same count
/// at random positions that were inactive before the step (a position is
/// never pruned and regrown in the same step). Grown weights are set to 0.
/// Errors when the layer has fewer inactive positions than the grow count;
/// see [`clamped_adaptation_step`] for the variant training uses.
pub fn adaptation_step<T: Scalar>(
    w: &mut Tensor<T>,
    mask: &Mask,
    p_t: f64,
    stream: &mut RngStream,
) -> Result<AdaptationOutcome> {
    adapt_by_count(w, mask, check_rate(p_t, mask)?, stream)
}

/// [`adaptation_step`] with the swap count capped at the layer's inactive
/// capacity. Global top-k seeding leaves some layers nearly dense; those
/// layers have almost no room to grow, and without the cap any sizeable
/// rate would be unsatisfiable there. nnz is still conserved exactly.
pub fn clamped_adaptation_step<T: Scalar>(
    w: &mut Tensor<T>,
    mask: &Mask,
    p_t: f64,
    stream: &mut RngStream,
) -> Result<AdaptationOutcome> {
    let k = check_rate(p_t, mask)?.min(mask.len() - mask.nnz());
    adapt_by_count(w, mask, k, stream)
}

fn check_rate(p_t: f64, mask: &Mask) -> Result<usize> {
    if !(0.0..=1.0).contains(&p_t) {
        return Err(SlakError::invalid_config(
            "adaptation rate",
            format!("{p_t} outside [0, 1]"),
        ));
    }
    Ok((p_t * mask.nnz() as f64).floor() as usize)
}

fn adapt_by_count<T: Scalar>(
    w: &mut Tensor<T>,
    mask: &Mask,
    k: usize,
    stream: &mut RngStream,
) -> Result<AdaptationOutcome> {
    let pruned_mask = magnitude_prune(w, mask, k)?;
    let pruned: Vec<usize> = (0..mask.len())
        .filter(|&i| mask.is_active(i) && !pruned_mask.is_active(i))
        .collect();
    // Grow from positions inactive before the step, so prune and grow sets
    // stay disjoint.
    let (_, grown) = random_grow(mask, k, stream)?;
    let mut bits = pruned_mask.bits().to_vec();
    for &i in &grown {
        bits[i] = true;
        w.data_mut()[i] = T::zero();
    }
    let mask = Mask::from_bits(mask.shape(), bits)?;
    debug_assert_eq!(mask.nnz(), pruned_mask.nnz() + grown.len());
    Ok(AdaptationOutcome {
        mask,
        pruned,
        grown,
    })
}

/// p_t = (p0 / 2) * (1 + cos(pi * t / T)).
pub fn cosine_adaptation_rate(p0: f64, t: usize, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(SlakError::invalid_config("horizon", "must be positive"));
    }
    if t > horizon {
        return Err(SlakError::ScheduleRange {
            step: t,
            horizon,
        });
    }
    Ok(p0 / 2.0 * (1.0 + (std::f64::consts::PI * t as f64 / horizon as f64).cos()))
}

/// Zero the masked-out entries of one weight tensor in place.
pub fn apply_mask<T: Scalar>(w: &mut Tensor<T>, mask: &Mask) -> Result<()> {
    if w.shape() != mask.shape() {
        return Err(SlakError::invalid_shape(format!(
            "weights {:?} vs mask {:?}",
            w.shape(),
            mask.shape()
        )));
    }
    for (v, &b) in w.data_mut().iter_mut().zip(mask.bits()) {
        if !b {
            *v = T::zero();
        }
    }
    Ok(())
}

/// Round to the nearest multiple of 8 (ties upward), floor 8.
pub fn round_channels(x: f64) -> usize {
    let r = x.round() as i64;
    (((r + 4) / 8) * 8).max(8) as usize
}

/// Pick the width factor from {1.0, 1.1, ..., 3.0} whose widened dims give
/// a sparse-aware parameter count closest to the dense baseline at the
/// original dims. `counter(dims, sparsity)` must return the model's
/// sparsity-aware parameter count. Ties go to the smaller factor.
pub fn width_plan(
    base_dims: &[usize],
    s: f64,
    counter: &dyn Fn(&[usize], f64) -> f64,
) -> Result<(f64, Vec<usize>)> {
    if !(0.0..1.0).contains(&s) {
        return Err(SlakError::invalid_config(
            "sparsity",
            format!("{s} outside [0, 1)"),
        ));
    }
    let baseline = counter(base_dims, 0.0);
    let mut best: Option<(f64, f64, Vec<usize>)> = None;
    for tenths in 10..=30u32 {
        let f = tenths as f64 / 10.0;
        let dims: Vec<usize> = base_dims.iter().map(|&d| round_channels(d as f64 * f)).collect();
        let diff = (counter(&dims, s) - baseline).abs();
        if best.as_ref().is_none_or(|(bd, _, _)| diff < *bd) {
            best = Some((diff, f, dims));
        }
    }
    let (_, f, dims) = best.expect("non-empty grid");
    Ok((f, dims))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(vals: &[f32]) -> Tensor<f32> {
        Tensor::from_values(&[vals.len()], vals).unwrap()
    }

    #[test]
    fn snip_elementwise_example() {
        let s = snip_scores(&t1(&[1.0, -2.0]), &t1(&[3.0, 0.5])).unwrap();
        assert_eq!(s.data(), &[3.0, 1.0]);
    }

    #[test]
    fn snip_zero_gradients_zero_scores() {
        let s = snip_scores(&t1(&[1.0, -2.0, 5.0]), &t1(&[0.0, 0.0, 0.0])).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn snip_matches_elementwise_oracle_in_bulk() {
        let mut rng = RngStream::new(1);
        let w: Vec<f32> = (0..1000).map(|_| (rng.uniform() * 4.0 - 2.0) as f32).collect();
        let g: Vec<f32> = (0..1000).map(|_| (rng.uniform() * 4.0 - 2.0) as f32).collect();
        let s = snip_scores(&t1(&w), &t1(&g)).unwrap();
        for i in 0..1000 {
            assert_eq!(s.data()[i], (w[i] * g[i]).abs());
        }
    }

    #[test]
    fn snip_rejects_shape_mismatch() {
        assert!(snip_scores(&t1(&[1.0]), &t1(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn global_topk_picks_highest_across_layers() {
        let masks =
            build_masks_global_topk(&[t1(&[3.0, 1.0]), t1(&[2.0, 0.0])], 0.5).unwrap();
        assert_eq!(masks[0].bits(), &[true, false]);
        assert_eq!(masks[1].bits(), &[true, false]);
    }

    #[test]
    fn global_topk_zero_sparsity_keeps_all() {
        let masks = build_masks_global_topk(&[t1(&[0.0, 5.0, 1.0])], 0.0).unwrap();
        assert_eq!(masks[0].nnz(), 3);
    }

    #[test]
    fn global_topk_ties_prefer_low_layer_then_flat_index() {
        let masks =
            build_masks_global_topk(&[t1(&[1.0, 1.0]), t1(&[1.0, 1.0])], 0.5).unwrap();
        assert_eq!(masks[0].bits(), &[true, true]);
        assert_eq!(masks[1].bits(), &[false, false]);
    }

    #[test]
    fn global_topk_empty_budget_errors() {
        let err = build_masks_global_topk(&[t1(&[1.0, 2.0])], 0.99).unwrap_err();
        assert!(matches!(err, SlakError::DegeneratePlan(_)));
    }

    #[test]
    fn global_topk_achieved_sparsity_within_one_slot() {
        let mut rng = RngStream::new(7);
        for &s in &[0.1, 0.37, 0.5, 0.73, 0.9] {
            let scores: Vec<Tensor<f32>> = (0..3)
                .map(|_| {
                    let v: Vec<f32> =
                        (0..57).map(|_| rng.uniform() as f32).collect();
                    t1(&v)
                })
                .collect();
            let total: usize = scores.iter().map(|t| t.len()).sum();
            let masks = build_masks_global_topk(&scores, s).unwrap();
            let nnz: usize = masks.iter().map(Mask::nnz).sum();
            let achieved = 1.0 - nnz as f64 / total as f64;
            assert!(
                (achieved - s).abs() <= 1.0 / total as f64 + 1e-12,
                "s {s} achieved {achieved}"
            );
        }
    }

    #[test]
    fn plan_budget_validates() {
        let masks =
            build_masks_global_topk(&[t1(&[3.0, 1.0]), t1(&[2.0, 0.0])], 0.5).unwrap();
        let plan = SparsityPlan::from_masks(0.5, vec!["a".into(), "b".into()], &masks);
        plan.validate(4).unwrap();
        assert!(plan.validate(6).is_err());
    }

    #[test]
    fn prune_smallest_magnitude() {
        let w = t1(&[0.5, -0.1, 0.3]);
        let m = magnitude_prune(&w, &Mask::dense(&[3]), 1).unwrap();
        assert_eq!(m.bits(), &[true, false, true]);
    }

    #[test]
    fn prune_zero_count_is_identity() {
        let w = t1(&[0.5, -0.1]);
        let m0 = Mask::dense(&[2]);
        assert_eq!(magnitude_prune(&w, &m0, 0).unwrap(), m0);
    }

    #[test]
    fn prune_breaks_ties_by_flat_index() {
        let w = t1(&[0.2, -0.2, 0.2]);
        let m = magnitude_prune(&w, &Mask::dense(&[3]), 1).unwrap();
        assert_eq!(m.bits(), &[false, true, true]);
    }

    #[test]
    fn prune_overflow_errors() {
        let w = t1(&[1.0, 2.0]);
        let err = magnitude_prune(&w, &Mask::dense(&[2]), 3).unwrap_err();
        assert!(matches!(err, SlakError::InvalidCount(_)));
    }

    #[test]
    fn prune_only_considers_active_entries() {
        let w = t1(&[0.01, 0.5, 0.3]);
        let m = Mask::from_bits(&[3], vec![false, true, true]).unwrap();
        let out = magnitude_prune(&w, &m, 1).unwrap();
        assert_eq!(out.bits(), &[false, true, false]);
    }

    #[test]
    fn grow_zero_is_identity() {
        let m = Mask::from_bits(&[3], vec![true, false, false]).unwrap();
        let mut s = RngStream::new(42);
        let (out, grown) = random_grow(&m, 0, &mut s).unwrap();
        assert_eq!(out, m);
        assert!(grown.is_empty());
    }

    #[test]
    fn grow_fills_everything_when_asked() {
        let m = Mask::from_bits(&[3], vec![false, false, false]).unwrap();
        let mut s = RngStream::new(42);
        let (out, grown) = random_grow(&m, 3, &mut s).unwrap();
        assert_eq!(out.nnz(), 3);
        assert_eq!(grown, vec![0, 1, 2]);
    }

    #[test]
    fn grow_is_deterministic_on_replay() {
        let m = Mask::from_bits(&[4], vec![true, false, true, false]).unwrap();
        let (a, ga) = random_grow(&m, 1, &mut RngStream::new(42)).unwrap();
        let (b, gb) = random_grow(&m, 1, &mut RngStream::new(42)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn grow_overflow_errors() {
        let m = Mask::dense(&[3]);
        let err = random_grow(&m, 1, &mut RngStream::new(1)).unwrap_err();
        assert!(matches!(err, SlakError::InvalidCount(_)));
    }

    #[test]
    fn adaptation_zero_rate_is_identity() {
        let mut w = t1(&[0.5, -0.1, 0.3, 0.0]);
        let m = Mask::from_bits(&[4], vec![true, true, false, true]).unwrap();
        let out = adaptation_step(&mut w, &m, 0.0, &mut RngStream::new(1)).unwrap();
        assert_eq!(out.mask, m);
        assert!(out.pruned.is_empty() && out.grown.is_empty());
    }

    #[test]
    fn adaptation_conserves_nnz_and_separates_prune_from_grow() {
        let mut rng = RngStream::new(3);
        for trial in 0..50u64 {
            let n = 20 + rng.below(30);
            let vals: Vec<f32> = (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) as f32).collect();
            let mut w = t1(&vals);
            let bits: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.6).collect();
            let m = Mask::from_bits(&[n], bits).unwrap();
            if m.nnz() == 0 {
                continue;
            }
            // Keep the grow request within the inactive population.
            let headroom = (n - m.nnz()) as f64 / m.nnz() as f64;
            let p = (rng.uniform() * 0.5).min(0.99 * headroom);
            let mut stream = RngStream::new(trial);
            let before = m.nnz();
            let out = adaptation_step(&mut w, &m, p, &mut stream).unwrap();
            assert_eq!(out.mask.nnz(), before, "trial {trial}");
            for &g in &out.grown {
                assert!(!out.pruned.contains(&g), "position {g} pruned and grown");
                assert!(!m.is_active(g), "grown position {g} was active");
                assert_eq!(w.data()[g], 0.0, "grown weight not zeroed");
            }
            for &pidx in &out.pruned {
                assert!(m.is_active(pidx) && !out.mask.is_active(pidx));
            }
        }
    }

    #[test]
    fn clamped_adaptation_caps_at_inactive_capacity() {
        // 9 of 10 active: a 0.5 rate asks for 4 swaps but only one slot is
        // free. The strict step refuses; the clamped one swaps exactly one.
        let vals: Vec<f32> = (0..10).map(|i| 0.1 + i as f32 * 0.1).collect();
        let mut bits = vec![true; 10];
        bits[7] = false;
        let m = Mask::from_bits(&[10], bits).unwrap();

        let mut w = t1(&vals);
        let err = adaptation_step(&mut w, &m, 0.5, &mut RngStream::new(4)).unwrap_err();
        assert!(matches!(err, SlakError::InvalidCount(_)));

        let mut w = t1(&vals);
        let out = clamped_adaptation_step(&mut w, &m, 0.5, &mut RngStream::new(4)).unwrap();
        assert_eq!(out.mask.nnz(), 9);
        assert_eq!(out.pruned, vec![0], "smallest-magnitude active weight");
        assert_eq!(out.grown, vec![7], "the only free slot");
        assert_eq!(w.data()[7], 0.0);
    }

    #[test]
    fn clamped_adaptation_matches_strict_when_room_exists() {
        let vals: Vec<f32> = (0..12).map(|i| (i as f32 - 6.0) * 0.2).collect();
        let bits: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();
        let m = Mask::from_bits(&[12], bits).unwrap();
        let mut w1 = t1(&vals);
        let mut w2 = t1(&vals);
        let a = adaptation_step(&mut w1, &m, 0.4, &mut RngStream::new(9)).unwrap();
        let b = clamped_adaptation_step(&mut w2, &m, 0.4, &mut RngStream::new(9)).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.pruned, b.pruned);
        assert_eq!(a.grown, b.grown);
        assert_eq!(w1.data(), w2.data());
    }

    #[test]
    fn cosine_rate_endpoints_and_midpoint() {
        assert!((cosine_adaptation_rate(0.3, 0, 1000).unwrap() - 0.3).abs() < 1e-12);
        assert!(cosine_adaptation_rate(0.3, 1000, 1000).unwrap().abs() < 1e-12);
        assert!((cosine_adaptation_rate(0.3, 500, 1000).unwrap() - 0.15).abs() < 1e-12);
    }

    #[test]
    fn cosine_rate_is_monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for t in 0..=200 {
            let p = cosine_adaptation_rate(0.3, t, 200).unwrap();
            assert!(p <= prev + 1e-15);
            prev = p;
        }
    }

    #[test]
    fn cosine_rate_rejects_out_of_range_step() {
        let err = cosine_adaptation_rate(0.3, 1001, 1000).unwrap_err();
        assert!(matches!(err, SlakError::ScheduleRange { .. }));
    }

    #[test]
    fn apply_mask_zeroes_only_inactive() {
        let mut w = t1(&[1.0, 2.0, 3.0]);
        let m = Mask::from_bits(&[3], vec![true, false, true]).unwrap();
        apply_mask(&mut w, &m).unwrap();
        assert_eq!(w.data(), &[1.0, 0.0, 3.0]);
        let mut w2 = t1(&[1.0, 2.0]);
        apply_mask(&mut w2, &Mask::dense(&[2])).unwrap();
        assert_eq!(w2.data(), &[1.0, 2.0]);
    }

    #[test]
    fn channel_rounding_snaps_to_multiples_of_eight() {
        assert_eq!(round_channels(3.0), 8);
        assert_eq!(round_channels(11.0), 8);
        // Two-stage rounding: 11.9 -> 12, then the tie between 8 and 16
        // resolves upward.
        assert_eq!(round_channels(11.9), 16);
        assert_eq!(round_channels(124.8), 128);
        assert_eq!(round_channels(249.6), 248);
        assert_eq!(round_channels(96.0), 96);
    }

    #[test]
    fn width_plan_identity_at_zero_sparsity() {
        let counter = |dims: &[usize], s: f64| -> f64 {
            dims.iter().map(|&d| (d * d) as f64).sum::<f64>() * (1.0 - s)
        };
        let (f, dims) = width_plan(&[32, 64, 128], 0.0, &counter).unwrap();
        assert_eq!(f, 1.0);
        assert_eq!(dims, vec![32, 64, 128]);
    }

    #[test]
    fn width_plan_tracks_inverse_sqrt_law_for_pointwise_dominated_counts() {
        // A purely quadratic (pointwise-style) count: params ∝ d^2 (1 - s),
        // so the ideal factor is 1/sqrt(1 - s).
        let counter = |dims: &[usize], s: f64| -> f64 {
            dims.iter().map(|&d| (d * d) as f64).sum::<f64>() * (1.0 - s)
        };
        for &s in &[0.2, 0.4, 0.55, 0.7, 0.82] {
            let (f, _) = width_plan(&[96, 192, 384, 768], s, &counter).unwrap();
            let ideal = 1.0 / (1.0 - s).sqrt();
            assert!(
                (f - ideal).abs() <= 0.1 + 1e-9,
                "s {s}: factor {f} vs ideal {ideal}"
            );
        }
    }

    #[test]
    fn mask_bitset_roundtrip() {
        let bits = vec![true, false, false, true, true, false, true, false, true, true];
        let m = Mask::from_bits(&[2, 5], bits.clone()).unwrap();
        let packed = m.pack();
        assert_eq!(packed.len(), 2);
        let back = Mask::unpack(&[2, 5], &packed).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.nnz(), 6);
    }
}
