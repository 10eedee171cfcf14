//! Effective receptive field measurement.
//!
//! The contribution of input pixel (i, j) is the absolute gradient of the
//! summed center feature response with respect to that pixel, accumulated
//! over input channels and over a handful of random images. The resulting
//! map is max-normalized once at the end, and its concentration is summarized
//! by the smallest centered square holding a given fraction of the total
//! mass.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::conv::{conv2d_backward, ConvSpec};
use crate::error::{Result, SlakError};
use crate::model::{ForwardMode, Model};
use crate::rng::{RngStream, StreamId};
use crate::tensor::{Scalar, Tensor};

/// Thresholds reported by the standard area summary.
pub const AREA_THRESHOLDS: [f64; 4] = [0.2, 0.3, 0.5, 0.99];

/// A square non-negative contribution field over the input plane.
#[derive(Debug, Clone)]
pub struct ContributionMap {
    size: usize,
    values: Vec<f64>,
}

impl ContributionMap {
    pub fn from_raw(size: usize, values: Vec<f64>) -> Result<Self> {
        if size == 0 || values.len() != size * size {
            return Err(SlakError::invalid_shape(format!(
                "{} values for a {size}x{size} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SlakError::numeric("contribution map", "negative or non-finite entry"));
        }
        Ok(ContributionMap { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size + col]
    }

    fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Scales the peak to 1. An identically zero field carries no receptive
    /// field information and is refused.
    pub fn max_normalized(&self) -> Result<ContributionMap> {
        let max = self.values.iter().fold(0.0f64, |m, &v| m.max(v));
        if max == 0.0 {
            return Err(SlakError::DegenerateMap(
                "contribution map is identically zero".into(),
            ));
        }
        Ok(ContributionMap {
            size: self.size,
            values: self.values.iter().map(|v| v / max).collect(),
        })
    }

    /// Squared side fraction (A / G)^2 of the smallest centered square window
    /// holding at least `threshold` of the total mass. A window of side A
    /// spans rows and columns [G/2 - ceil(A/2) + 1, G/2 + floor(A/2)], which
    /// for A = 1 is exactly the center cell (G/2, G/2).
    pub fn area_ratio(&self, threshold: f64) -> Result<f64> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(SlakError::invalid_config(
                "threshold",
                format!("{threshold} outside (0, 1]"),
            ));
        }
        let total = self.total();
        if total == 0.0 {
            return Err(SlakError::DegenerateMap(
                "contribution map is identically zero".into(),
            ));
        }
        let g = self.size;
        let c = g / 2;
        // Prefix sums with a zero border: sums[r][q] covers rows < r, cols < q.
        let mut sums = vec![0.0f64; (g + 1) * (g + 1)];
        for r in 0..g {
            for q in 0..g {
                sums[(r + 1) * (g + 1) + q + 1] = self.values[r * g + q]
                    + sums[r * (g + 1) + q + 1]
                    + sums[(r + 1) * (g + 1) + q]
                    - sums[r * (g + 1) + q];
            }
        }
        let window = |lo: usize, hi: usize| -> f64 {
            // Inclusive [lo, hi] on both axes.
            sums[(hi + 1) * (g + 1) + hi + 1] - sums[lo * (g + 1) + hi + 1]
                - sums[(hi + 1) * (g + 1) + lo]
                + sums[lo * (g + 1) + lo]
        };
        for a in 1..=g {
            let lo = c + 1 - a.div_ceil(2);
            // For even G the nominal side-G window pokes one row past the
            // grid; clip it. The full-grid answer is the fallthrough below.
            let hi = (c + a / 2).min(g - 1);
            if window(lo, hi) >= threshold * total - 1e-12 * total {
                return Ok((a as f64 / g as f64).powi(2));
            }
        }
        Ok(1.0)
    }

    /// Ratios at the standard thresholds, keyed by the threshold's decimal
    /// form.
    pub fn area_report(&self) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for t in AREA_THRESHOLDS {
            out.insert(format!("{t}"), self.area_ratio(t)?);
        }
        Ok(out)
    }

    /// One row per line, comma-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.size) {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(',');
                }
                write!(out, "{v}").expect("string write");
                first = false;
            }
            out.push('\n');
        }
        out
    }

    /// Grayscale heatmap; intensities are log-scaled so the long faint tail
    /// of a large kernel stays visible.
    pub fn to_svg(&self) -> String {
        let g = self.size;
        let max = self.values.iter().fold(0.0f64, |m, &v| m.max(v));
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {g} {g}\" \
             shape-rendering=\"crispEdges\">\n<rect width=\"{g}\" height=\"{g}\" fill=\"#000\"/>\n"
        );
        if max > 0.0 {
            let floor = 1e-6f64;
            for r in 0..g {
                for q in 0..g {
                    let v = self.values[r * g + q] / max;
                    if v <= floor {
                        continue;
                    }
                    let shade = (1.0 - v.ln() / floor.ln()).clamp(0.0, 1.0);
                    let byte = (shade * 255.0).round() as u8;
                    let _ = write!(
                        out,
                        "<rect x=\"{q}\" y=\"{r}\" width=\"1\" height=\"1\" \
                         fill=\"#{byte:02x}{byte:02x}{byte:02x}\"/>\n"
                    );
                }
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Closed-form support edge of a stack of stride-1 linear convolutions:
/// 1 + sum (k_i - 1) * d_i.
pub fn linear_stack_support(layers: &[(usize, usize)]) -> usize {
    1 + layers.iter().map(|&(k, d)| (k - 1) * d).sum::<usize>()
}

/// Contribution map of a stack of single-channel stride-1 depthwise kernels,
/// each given as a (1, 1, kh, kw) tensor with its dilation. The stack is
/// linear, so the map is the exact gradient field of the center output.
pub fn stack_contribution(layers: &[(Tensor<f64>, usize)], grid: usize) -> Result<ContributionMap> {
    if layers.is_empty() {
        return Err(SlakError::invalid_config("layers", "empty stack"));
    }
    if grid == 0 {
        return Err(SlakError::invalid_config("grid", "zero grid"));
    }
    let x = Tensor::<f64>::zeros(&[1, 1, grid, grid]);
    let mut d = Tensor::<f64>::zeros(&[1, 1, grid, grid]);
    d.set4(0, 0, grid / 2, grid / 2, 1.0);
    for (w, dilation) in layers.iter().rev() {
        let shape = w.dims4();
        if shape[0] != 1 || shape[1] != 1 {
            return Err(SlakError::invalid_shape(format!(
                "stack kernels are single-channel, got {:?}",
                w.shape()
            )));
        }
        let spec = ConvSpec::dilated_depthwise(1, shape[2], shape[3], *dilation);
        let (dx, _, _) = conv2d_backward(&x, w, &spec, &d)?;
        d = dx;
    }
    ContributionMap::from_raw(grid, d.data().iter().map(|v| v.abs()).collect())?.max_normalized()
}

/// Settings for measuring a built model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ErfOptions {
    /// Input edge G; the map is G x G.
    pub grid: usize,
    /// Random images accumulated into one map.
    pub images: usize,
    pub seed: u64,
    /// Measure the linearized network (exact kernel supports) instead of the
    /// eval-mode one.
    pub linearized: bool,
    /// Normalize each image's gradient field before accumulating, instead of
    /// accumulating raw fields and normalizing once at the end.
    pub per_image_normalization: bool,
}

impl Default for ErfOptions {
    fn default() -> Self {
        ErfOptions {
            grid: 224,
            images: 8,
            seed: 0,
            linearized: false,
            per_image_normalization: false,
        }
    }
}

impl ErfOptions {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(SlakError::invalid_config("grid", "zero grid"));
        }
        if self.images == 0 {
            return Err(SlakError::invalid_config("images", "needs at least one image"));
        }
        Ok(())
    }

    pub fn mode(&self) -> ForwardMode {
        if self.linearized {
            ForwardMode::Linearized
        } else {
            ForwardMode::Eval
        }
    }
}

/// Accumulates |d(sum of center features)/d(input)| over random normal
/// images and channels, then max-normalizes.
pub fn contribution_map(model: &mut Model, opts: &ErfOptions) -> Result<ContributionMap> {
    opts.validate()?;
    let g = opts.grid;
    let in_ch = model.config().in_channels;
    let mut stream = RngStream::for_purpose(opts.seed, StreamId::Data);
    let mut acc = vec![0.0f64; g * g];
    for _ in 0..opts.images {
        let x = Tensor::<f32>::trunc_normal(&[1, in_ch, g, g], 1.0, &mut stream);
        let (features, cache) = model.forward_features(&x, opts.mode())?;
        let [_, c, fh, fw] = features.dims4();
        let mut d_feat = Tensor::<f32>::zeros(features.shape());
        for ci in 0..c {
            d_feat.set4(0, ci, fh / 2, fw / 2, 1.0);
        }
        let (_, dx) = model.backward_features(&cache, &d_feat)?;
        let mut field = vec![0.0f64; g * g];
        let dxd = dx.data();
        for ci in 0..in_ch {
            let base = ci * g * g;
            for i in 0..g * g {
                field[i] += dxd[base + i].to_f64().abs();
            }
        }
        if opts.per_image_normalization {
            let max = field.iter().fold(0.0f64, |m, &v| m.max(v));
            if max == 0.0 {
                return Err(SlakError::DegenerateMap(
                    "image contributed an identically zero field".into(),
                ));
            }
            for v in &mut field {
                *v /= max;
            }
        }
        for (a, v) in acc.iter_mut().zip(&field) {
            *a += v;
        }
    }
    ContributionMap::from_raw(g, acc)?.max_normalized()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DwVariant, ModelConfig};

    fn kernel(kh: usize, kw: usize, values: &[f64]) -> Tensor<f64> {
        Tensor::from_values(&[1, 1, kh, kw], values).unwrap()
    }

    fn ones_kernel(kh: usize, kw: usize) -> Tensor<f64> {
        Tensor::ones(&[1, 1, kh, kw])
    }

    fn support(map: &ContributionMap) -> Vec<(usize, usize)> {
        let g = map.size();
        let mut out = Vec::new();
        for r in 0..g {
            for q in 0..g {
                if map.at(r, q) > 0.0 {
                    out.push((r, q));
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_kernel_gives_a_delta() {
        let map = stack_contribution(&[(kernel(1, 1, &[3.0]), 1)], 9).unwrap();
        assert_eq!(support(&map), vec![(4, 4)]);
        assert_eq!(map.at(4, 4), 1.0);
    }

    #[test]
    fn single_kernel_map_reproduces_the_kernel() {
        // Distinct entries so orientation is visible. The engine correlates
        // (no kernel flip), so d(center output)/dx at offset (dr, dc) is
        // w[1 + dr][1 + dc] directly; a flipping convolution engine would
        // show the mirrored kernel instead.
        let w = kernel(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, -9.0]);
        let map = stack_contribution(&[(w.clone(), 1)], 9).unwrap();
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let expect = w.at4(0, 0, (1 + dr) as usize, (1 + dc) as usize).abs() / 9.0;
                let got = map.at((4 + dr) as usize, (4 + dc) as usize);
                assert!((got - expect).abs() < 1e-12, "({dr},{dc}): {got} vs {expect}");
            }
        }
        assert_eq!(support(&map).len(), 9);
    }

    #[test]
    fn stacked_kernels_compose_supports() {
        let map =
            stack_contribution(&[(ones_kernel(3, 3), 1), (ones_kernel(3, 3), 1)], 13).unwrap();
        let edge = linear_stack_support(&[(3, 1), (3, 1)]);
        assert_eq!(edge, 5);
        let sup = support(&map);
        assert_eq!(sup.len(), edge * edge);
        assert!(sup.iter().all(|&(r, q)| (4..=8).contains(&r) && (4..=8).contains(&q)));
    }

    #[test]
    fn dilation_widens_and_perforates_the_support() {
        let map = stack_contribution(&[(ones_kernel(3, 3), 2)], 11).unwrap();
        assert_eq!(linear_stack_support(&[(3, 2)]), 5);
        let sup = support(&map);
        // Taps land at offsets {-2, 0, 2} on each axis: nine points, not 25.
        assert_eq!(sup.len(), 9);
        for (r, q) in sup {
            assert!([3, 5, 7].contains(&r) && [3, 5, 7].contains(&q));
        }
    }

    #[test]
    fn rectangular_pair_union_is_a_cross() {
        let g = 15;
        let a = stack_contribution(&[(ones_kernel(9, 3), 1)], g).unwrap();
        let b = stack_contribution(&[(ones_kernel(3, 9), 1)], g).unwrap();
        let mut union: Vec<(usize, usize)> = support(&a);
        for p in support(&b) {
            if !union.contains(&p) {
                union.push(p);
            }
        }
        let c = (g / 2) as i64;
        let mut expect = Vec::new();
        for r in 0..g as i64 {
            for q in 0..g as i64 {
                let tall = (r - c).abs() <= 4 && (q - c).abs() <= 1;
                let wide = (r - c).abs() <= 1 && (q - c).abs() <= 4;
                if tall || wide {
                    expect.push((r as usize, q as usize));
                }
            }
        }
        union.sort_unstable();
        expect.sort_unstable();
        assert_eq!(union, expect);
    }

    #[test]
    fn area_ratio_window_convention() {
        // 2x2 map with all mass at (1,1): side-1 window must be exactly the
        // center cell G/2 = (1,1), so the ratio is (1/2)^2 at any threshold.
        let map = ContributionMap::from_raw(2, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(map.area_ratio(0.2).unwrap(), 0.25);
        assert_eq!(map.area_ratio(1.0).unwrap(), 0.25);

        // Uniform 4x4: one cell holds 1/16 of the mass, the full grid all of it.
        let uni = ContributionMap::from_raw(4, vec![1.0; 16]).unwrap();
        assert_eq!(uni.area_ratio(0.05).unwrap(), (0.25f64).powi(2));
        assert_eq!(uni.area_ratio(1.0).unwrap(), 1.0);
        // Side 2 covers rows/cols [2 - 1, 2 + 1]... side 3 -> 9/16 of the mass.
        assert_eq!(uni.area_ratio(0.5).unwrap(), (3.0f64 / 4.0).powi(2));
    }

    #[test]
    fn area_ratio_is_monotone_in_threshold() {
        let mut st = crate::rng::RngStream::new(17);
        let vals: Vec<f64> = (0..49).map(|_| st.uniform()).collect();
        let map = ContributionMap::from_raw(7, vals).unwrap();
        let mut last = 0.0;
        for t in [0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 0.99, 1.0] {
            let r = map.area_ratio(t).unwrap();
            assert!(r >= last, "r({t}) = {r} < {last}");
            last = r;
        }
    }

    #[test]
    fn zero_map_is_degenerate() {
        let map = ContributionMap::from_raw(3, vec![0.0; 9]).unwrap();
        assert!(matches!(map.area_ratio(0.5), Err(SlakError::DegenerateMap(_))));
        assert!(matches!(map.max_normalized(), Err(SlakError::DegenerateMap(_))));
        assert!(ContributionMap::from_raw(3, vec![-1.0; 9]).is_err());
    }

    #[test]
    fn model_map_accumulates_and_normalizes() {
        let cfg = ModelConfig {
            stage_blocks: vec![1],
            stage_dims: vec![6],
            stage_kernels: vec![7],
            short_edge: 3,
            dw_variant: DwVariant::DecomposedParallel,
            layer_scale_init: 1.0,
            drop_path_rate: 0.0,
            num_classes: 2,
            in_channels: 3,
            input_size: 16,
        };
        let mut model: Model = Model::build(&cfg, 13).unwrap();
        let opts = ErfOptions { grid: 16, images: 2, seed: 5, linearized: true, ..Default::default() };
        let map = contribution_map(&mut model, &opts).unwrap();
        assert_eq!(map.size(), 16);
        let max = map.values().iter().fold(0.0f64, |m, &v| m.max(v));
        assert_eq!(max, 1.0);
        assert!(map.area_ratio(0.5).unwrap() > 0.0);

        // Per-image normalization changes the weighting but not validity.
        let mut model2: Model = Model::build(&cfg, 13).unwrap();
        let opts2 = ErfOptions { per_image_normalization: true, ..opts };
        let map2 = contribution_map(&mut model2, &opts2).unwrap();
        assert_eq!(map2.values().iter().fold(0.0f64, |m, &v| m.max(v)), 1.0);
    }

    #[test]
    fn exports_have_the_expected_shape() {
        let map = ContributionMap::from_raw(3, vec![0.0, 0.5, 0.0, 0.5, 1.0, 0.5, 0.0, 0.5, 0.0])
            .unwrap();
        let csv = map.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next(), Some("0,0.5,0"));
        let svg = map.to_svg();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("viewBox=\"0 0 3 3\""));
        assert!(svg.trim_end().ends_with("</svg>"));
        let report = map.area_report().unwrap();
        assert_eq!(report.len(), AREA_THRESHOLDS.len());
        assert!(report.contains_key("0.99"));
    }
}
