//! Convolution forward/backward for every kernel layout under study:
//! dense square, rectangular, decomposed-parallel, decomposed-sequential,
//! dilated, and sparse-masked depthwise.
//!
//! Activations are (batch, channel, height, width); kernels are
//! (out_channels, in_channels/groups, kernel_h, kernel_w). Convolution is
//! cross-correlation (no kernel flip). Two execution paths exist: a naive
//! reference with a fixed accumulation order (input channel, then kernel
//! row-major) and optimized paths (axpy-style depthwise, GEMM elsewhere)
//! that may reorder accumulation; they agree to about 1e-6 relative in f32.

use crate::error::{Result, SlakError};
use crate::norm::{batchnorm_forward, BatchNormState, Mode};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial extent equals input extent (stride 1 only). For even
    /// kernel edges the surplus cell goes to the bottom/right side.
    Same,
    Explicit {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
}

pub const NO_PADDING: Padding = Padding::Explicit {
    top: 0,
    bottom: 0,
    left: 0,
    right: 0,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// 1 = full convolution, `in_channels` = depthwise.
    pub groups: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Depthwise kernel_h x kernel_w, stride 1, same padding.
    pub fn depthwise(channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            groups: channels,
            kernel_h,
            kernel_w,
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
        }
    }

    pub fn dilated_depthwise(
        channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        dilation: usize,
    ) -> Self {
        ConvSpec {
            dilation,
            ..ConvSpec::depthwise(channels, kernel_h, kernel_w)
        }
    }

    /// 1x1 full convolution (a per-pixel linear layer).
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            groups: 1,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            dilation: 1,
            padding: NO_PADDING,
        }
    }

    /// Full square convolution with no padding (stem / downsample shape).
    pub fn full_square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            groups: 1,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            dilation: 1,
            padding: NO_PADDING,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(SlakError::invalid_shape(format!(
                "channel/group counts must be positive: {self:?}"
            )));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(SlakError::invalid_shape(format!(
                "in_channels {} and out_channels {} must divide by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(SlakError::invalid_shape(format!(
                "kernel must be at least 1x1: {}x{}",
                self.kernel_h, self.kernel_w
            )));
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(SlakError::invalid_config(
                "stride/dilation",
                "must be at least 1",
            ));
        }
        if matches!(self.padding, Padding::Same) && self.stride != 1 {
            return Err(SlakError::invalid_config(
                "padding",
                "same padding requires stride 1",
            ));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.out_channels == self.in_channels
    }

    /// Span of the dilated kernel in input cells.
    pub fn extent(&self) -> (usize, usize) {
        (
            (self.kernel_h - 1) * self.dilation + 1,
            (self.kernel_w - 1) * self.dilation + 1,
        )
    }

    /// (top, bottom, left, right) in input cells.
    pub fn resolve_padding(&self) -> (usize, usize, usize, usize) {
        match self.padding {
            Padding::Explicit {
                top,
                bottom,
                left,
                right,
            } => (top, bottom, left, right),
            Padding::Same => {
                let (eh, ew) = self.extent();
                let (th, tw) = (eh - 1, ew - 1);
                (th / 2, th - th / 2, tw / 2, tw - tw / 2)
            }
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (pt, pb, pl, pr) = self.resolve_padding();
        let (eh, ew) = self.extent();
        let (ah, aw) = (h + pt + pb, w + pl + pr);
        if ah < eh || aw < ew {
            return Err(SlakError::invalid_shape(format!(
                "padded input {ah}x{aw} smaller than dilated kernel {eh}x{ew}"
            )));
        }
        Ok(((ah - eh) / self.stride + 1, (aw - ew) / self.stride + 1))
    }

    /// Expected kernel tensor shape.
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }
}

/// Resolved geometry shared by the execution paths.
#[derive(Clone, Copy)]
struct Geom {
    bsz: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pt: isize,
    pl: isize,
}

fn check_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Geom> {
    spec.validate()?;
    if x.rank() != 4 {
        return Err(SlakError::invalid_shape(format!(
            "input must be rank 4 (b,c,h,w), got {:?}",
            x.shape()
        )));
    }
    let [bsz, c, h, wd] = x.dims4();
    if c != spec.in_channels {
        return Err(SlakError::invalid_shape(format!(
            "input shape {:?} has {} channels but spec expects {}",
            x.shape(),
            c,
            spec.in_channels
        )));
    }
    if w.shape() != spec.weight_shape() {
        return Err(SlakError::invalid_shape(format!(
            "kernel shape {:?} does not match spec shape {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(SlakError::invalid_shape(format!(
                "bias shape {:?} does not match out_channels {}",
                b.shape(),
                spec.out_channels
            )));
        }
    }
    let (oh, ow) = spec.out_hw(h, wd)?;
    let (pt, _, pl, _) = spec.resolve_padding();
    Ok(Geom {
        bsz,
        h,
        w: wd,
        oh,
        ow,
        pt: pt as isize,
        pl: pl as isize,
    })
}

/// Naive path. Accumulation order per output element is fixed: bias first,
/// then input channels ascending, kernel rows ascending, kernel columns
/// ascending. Oracle for everything else in this module.
pub fn conv2d_forward_reference<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = check_forward(x, w, bias, spec)?;
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    let (kh, kw, s, d) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.dilation);
    let xd = x.data();
    let wd_ = w.data();
    let mut y = Tensor::zeros(&[g.bsz, spec.out_channels, g.oh, g.ow]);
    let yd = y.data_mut();
    for bi in 0..g.bsz {
        for oc in 0..spec.out_channels {
            let grp = oc / ocg;
            let b0 = bias.map_or(T::zero(), |b| b.data()[oc]);
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = b0;
                    for ci in 0..icg {
                        let ic = grp * icg + ci;
                        for ky in 0..kh {
                            let iy = (oy * s) as isize + (ky * d) as isize - g.pt;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * s) as isize + (kx * d) as isize - g.pl;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = xd[((bi * spec.in_channels + ic) * g.h
                                    + iy as usize)
                                    * g.w
                                    + ix as usize];
                                let wv = wd_[((oc * icg + ci) * kh + ky) * kw + kx];
                                acc += wv * xv;
                            }
                        }
                    }
                    yd[((bi * spec.out_channels + oc) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    Ok(y)
}

/// Optimized forward. Depthwise stride-1 kernels run the axpy path,
/// group-1 convolutions run im2col + GEMM, anything else falls back to the
/// reference loops.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = check_forward(x, w, bias, spec)?;
    let y = if spec.is_depthwise() && spec.stride == 1 {
        dw_forward_s1(x, w, bias, spec, &g, None)
    } else if spec.groups == 1 {
        gemm_forward(x, w, bias, spec, &g)
    } else {
        return conv2d_forward_reference(x, w, bias, spec);
    };
    y.debug_assert_finite("conv2d_forward");
    Ok(y)
}

/// Row range of valid output positions for one kernel tap: positions oy
/// with 0 <= oy + off < limit, clipped to [0, out_extent).
#[inline]
fn tap_range(off: isize, limit: usize, out_extent: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi_signed = (limit as isize - off).min(out_extent as isize);
    if hi_signed <= lo as isize {
        (0, 0)
    } else {
        (lo, hi_signed as usize)
    }
}

/// Depthwise stride-1 forward. When `mask` is given, taps whose mask entry
/// is zero are skipped entirely (sparse execution).
fn dw_forward_s1<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
    g: &Geom,
    mask: Option<&Tensor<T>>,
) -> Tensor<T> {
    let c = spec.in_channels;
    let (kh, kw, d) = (spec.kernel_h, spec.kernel_w, spec.dilation);
    let mut y = Tensor::zeros(&[g.bsz, c, g.oh, g.ow]);
    let (xd, wd_, yd) = (x.data(), w.data(), y.data_mut());
    let md = mask.map(|m| m.data());
    let mut taps: Vec<(isize, isize, T)> = Vec::with_capacity(kh * kw);
    for ci in 0..c {
        taps.clear();
        for ky in 0..kh {
            for kx in 0..kw {
                let wi = (ci * kh + ky) * kw + kx;
                if md.is_some_and(|m| m[wi] == T::zero()) {
                    continue;
                }
                taps.push((
                    (ky * d) as isize - g.pt,
                    (kx * d) as isize - g.pl,
                    wd_[wi],
                ));
            }
        }
        for bi in 0..g.bsz {
            let xb = (bi * c + ci) * g.h * g.w;
            let yb = (bi * c + ci) * g.oh * g.ow;
            if let Some(b) = bias {
                let b0 = b.data()[ci];
                yd[yb..yb + g.oh * g.ow].iter_mut().for_each(|v| *v = b0);
            }
            for &(off_h, off_w, v) in &taps {
                let (oy_lo, oy_hi) = tap_range(off_h, g.h, g.oh);
                let (ox_lo, ox_hi) = tap_range(off_w, g.w, g.ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let len = ox_hi - ox_lo;
                for oy in oy_lo..oy_hi {
                    let iy = (oy as isize + off_h) as usize;
                    let ix0 = (ox_lo as isize + off_w) as usize;
                    let xr = &xd[xb + iy * g.w + ix0..][..len];
                    let yr = &mut yd[yb + oy * g.ow + ox_lo..][..len];
                    for (o, &xv) in yr.iter_mut().zip(xr) {
                        *o += v * xv;
                    }
                }
            }
        }
    }
    y
}

/// Scatter one input plane into im2col layout: row (ci*kh+ky)*kw+kx holds
/// the input values each kernel tap sees, one column per output position.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(xp: &[T], ic: usize, spec: &ConvSpec, g: &Geom, col: &mut [T]) {
    let (kh, kw, s, d) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.dilation);
    let cols = g.oh * g.ow;
    for ci in 0..ic {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let out = &mut col[r * cols..(r + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * s) as isize + (ky * d) as isize - g.pt;
                    let row = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let xrow = &xp[(ci * g.h + iy as usize) * g.w..][..g.w];
                    if s == 1 {
                        let off = (kx * d) as isize - g.pl;
                        let (lo, hi) = tap_range(off, g.w, g.ow);
                        row[..lo].iter_mut().for_each(|v| *v = T::zero());
                        row[hi..].iter_mut().for_each(|v| *v = T::zero());
                        if lo < hi {
                            let ix0 = (lo as isize + off) as usize;
                            row[lo..hi].copy_from_slice(&xrow[ix0..ix0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in row.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + (kx * d) as isize - g.pl;
                            *v = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                xrow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: accumulate column-layout gradients back into the
/// input plane.
fn col2im_add<T: Scalar>(col: &[T], ic: usize, spec: &ConvSpec, g: &Geom, xp: &mut [T]) {
    let (kh, kw, s, d) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.dilation);
    let cols = g.oh * g.ow;
    for ci in 0..ic {
        for ky in 0..kh {
            for kx in 0..kw {
                let r = (ci * kh + ky) * kw + kx;
                let src = &col[r * cols..(r + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * s) as isize + (ky * d) as isize - g.pt;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &mut xp[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * s) as isize + (kx * d) as isize - g.pl;
                        if ix >= 0 && ix < g.w as isize {
                            xrow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Group-1 forward as one GEMM per batch element. 1x1 stride-1 unpadded
/// kernels multiply the input directly; everything else goes through im2col.
fn gemm_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
    g: &Geom,
) -> Tensor<T> {
    let (ic, oc) = (spec.in_channels, spec.out_channels);
    let cols = g.oh * g.ow;
    let k = ic * spec.kernel_h * spec.kernel_w;
    let direct = spec.kernel_h == 1
        && spec.kernel_w == 1
        && spec.stride == 1
        && g.pt == 0
        && g.pl == 0
        && g.oh == g.h
        && g.ow == g.w;
    let mut y = Tensor::zeros(&[g.bsz, oc, g.oh, g.ow]);
    let mut col = if direct { Vec::new() } else { vec![T::zero(); k * cols] };
    for bi in 0..g.bsz {
        let xp = &x.data()[bi * ic * g.h * g.w..][..ic * g.h * g.w];
        let b_mat: *const T = if direct {
            xp.as_ptr()
        } else {
            im2col(xp, ic, spec, g, &mut col);
            col.as_ptr()
        };
        let yp = &mut y.data_mut()[bi * oc * cols..][..oc * cols];
        unsafe {
            T::gemm_rowmajor(
                oc,
                k,
                cols,
                T::one(),
                w.data().as_ptr(),
                b_mat,
                T::zero(),
                yp.as_mut_ptr(),
            );
        }
        if let Some(b) = bias {
            for (c, row) in yp.chunks_exact_mut(cols).enumerate() {
                let b0 = b.data()[c];
                row.iter_mut().for_each(|v| *v += b0);
            }
        }
    }
    y
}

/// Dot product with four independent accumulators: deterministic order for
/// a given length, enough instruction-level parallelism to keep one core
/// busy.
#[inline]
fn dot4<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let (mut s0, mut s1, mut s2, mut s3) = (T::zero(), T::zero(), T::zero(), T::zero());
    let quads = n / 4 * 4;
    let mut i = 0;
    while i < quads {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    for j in quads..n {
        s0 += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3)
}

/// Gradients of [`conv2d_forward`]. Returns (dx, dw, db); db is always
/// populated and simply unused by bias-free layers.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = check_forward(x, w, None, spec)?;
    if dy.shape() != [g.bsz, spec.out_channels, g.oh, g.ow] {
        return Err(SlakError::invalid_shape(format!(
            "output gradient shape {:?} does not match forward output [{}, {}, {}, {}]",
            dy.shape(),
            g.bsz,
            spec.out_channels,
            g.oh,
            g.ow
        )));
    }
    let out = if spec.is_depthwise() && spec.stride == 1 {
        dw_backward_s1(x, w, spec, dy, &g)
    } else if spec.groups == 1 {
        gemm_backward(x, w, spec, dy, &g)
    } else {
        backward_reference(x, w, spec, dy, &g)
    };
    out.0.debug_assert_finite("conv2d_backward/dx");
    out.1.debug_assert_finite("conv2d_backward/dw");
    Ok(out)
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>, oc: usize) -> Tensor<T> {
    let [bsz, _, oh, ow] = dy.dims4();
    let mut db = Tensor::zeros(&[oc]);
    let plane = oh * ow;
    for bi in 0..bsz {
        for c in 0..oc {
            let s = &dy.data()[(bi * oc + c) * plane..][..plane];
            let mut acc = T::zero();
            for &v in s {
                acc += v;
            }
            db.data_mut()[c] += acc;
        }
    }
    db
}

fn dw_backward_s1<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    g: &Geom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = spec.in_channels;
    let (kh, kw, d) = (spec.kernel_h, spec.kernel_w, spec.dilation);
    let mut dx = Tensor::zeros(x.shape());
    let mut dwt = Tensor::zeros(w.shape());
    let db = bias_grad(dy, c);
    let (xd, wd_, dyd) = (x.data(), w.data(), dy.data());
    let dxd = dx.data_mut();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let off_h = (ky * d) as isize - g.pt;
                let off_w = (kx * d) as isize - g.pl;
                let (oy_lo, oy_hi) = tap_range(off_h, g.h, g.oh);
                let (ox_lo, ox_hi) = tap_range(off_w, g.w, g.ow);
                if ox_lo >= ox_hi || oy_lo >= oy_hi {
                    continue;
                }
                let len = ox_hi - ox_lo;
                let wi = (ci * kh + ky) * kw + kx;
                let v = wd_[wi];
                let mut wacc = T::zero();
                for bi in 0..g.bsz {
                    let xb = (bi * c + ci) * g.h * g.w;
                    let yb = (bi * c + ci) * g.oh * g.ow;
                    for oy in oy_lo..oy_hi {
                        let iy = (oy as isize + off_h) as usize;
                        let ix0 = (ox_lo as isize + off_w) as usize;
                        let dyr = &dyd[yb + oy * g.ow + ox_lo..][..len];
                        let xr = &xd[xb + iy * g.w + ix0..][..len];
                        wacc += dot4(dyr, xr);
                        let dxr = &mut dxd[xb + iy * g.w + ix0..][..len];
                        for (o, &gv) in dxr.iter_mut().zip(dyr) {
                            *o += v * gv;
                        }
                    }
                }
                dwt.data_mut()[wi] = wacc;
            }
        }
    }
    (dx, dwt, db)
}

fn gemm_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    g: &Geom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (ic, oc) = (spec.in_channels, spec.out_channels);
    let cols = g.oh * g.ow;
    let k = ic * spec.kernel_h * spec.kernel_w;
    let db = bias_grad(dy, oc);
    let mut dx = Tensor::zeros(x.shape());
    let mut dwt = Tensor::zeros(w.shape());
    let direct = spec.kernel_h == 1
        && spec.kernel_w == 1
        && spec.stride == 1
        && g.pt == 0
        && g.pl == 0
        && g.oh == g.h
        && g.ow == g.w;
    let mut col = if direct { Vec::new() } else { vec![T::zero(); k * cols] };
    let mut col_grad = if direct { Vec::new() } else { vec![T::zero(); k * cols] };
    for bi in 0..g.bsz {
        let xp = &x.data()[bi * ic * g.h * g.w..][..ic * g.h * g.w];
        let dyp = &dy.data()[bi * oc * cols..][..oc * cols];
        let x_mat: *const T = if direct {
            xp.as_ptr()
        } else {
            im2col(xp, ic, spec, g, &mut col);
            col.as_ptr()
        };
        unsafe {
            // dW (oc x k) += dY (oc x cols) * col^T (cols x k)
            T::gemm_strided(
                oc,
                cols,
                k,
                T::one(),
                dyp.as_ptr(),
                cols as isize,
                1,
                x_mat,
                1,
                cols as isize,
                T::one(),
                dwt.data_mut().as_mut_ptr(),
                k as isize,
                1,
            );
        }
        let dxp = &mut dx.data_mut()[bi * ic * g.h * g.w..][..ic * g.h * g.w];
        if direct {
            unsafe {
                // dX (ic x cols) = W^T (ic x oc) * dY (oc x cols)
                T::gemm_strided(
                    ic,
                    oc,
                    cols,
                    T::one(),
                    w.data().as_ptr(),
                    1,
                    ic as isize,
                    dyp.as_ptr(),
                    cols as isize,
                    1,
                    T::zero(),
                    dxp.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
        } else {
            unsafe {
                T::gemm_strided(
                    k,
                    oc,
                    cols,
                    T::one(),
                    w.data().as_ptr(),
                    1,
                    k as isize,
                    dyp.as_ptr(),
                    cols as isize,
                    1,
                    T::zero(),
                    col_grad.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
            col2im_add(&col_grad, ic, spec, g, dxp);
        }
    }
    (dx, dwt, db)
}

fn backward_reference<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    g: &Geom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let icg = spec.in_channels / spec.groups;
    let ocg = spec.out_channels / spec.groups;
    let (kh, kw, s, d) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.dilation);
    let db = bias_grad(dy, spec.out_channels);
    let mut dx = Tensor::zeros(x.shape());
    let mut dwt = Tensor::zeros(w.shape());
    let (xd, wd_, dyd) = (x.data(), w.data(), dy.data());
    for bi in 0..g.bsz {
        for oc in 0..spec.out_channels {
            let grp = oc / ocg;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gv = dyd[((bi * spec.out_channels + oc) * g.oh + oy) * g.ow + ox];
                    if gv == T::zero() {
                        continue;
                    }
                    for ci in 0..icg {
                        let ic = grp * icg + ci;
                        for ky in 0..kh {
                            let iy = (oy * s) as isize + (ky * d) as isize - g.pt;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * s) as isize + (kx * d) as isize - g.pl;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xi = ((bi * spec.in_channels + ic) * g.h + iy as usize)
                                    * g.w
                                    + ix as usize;
                                let wi = ((oc * icg + ci) * kh + ky) * kw + kx;
                                dwt.data_mut()[wi] += gv * xd[xi];
                                dx.data_mut()[xi] += gv * wd_[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dwt, db)
}

/// Depthwise convolution with a binary mask over the kernel. Equals
/// `conv2d_forward(x, w ⊙ mask, ...)` but skips masked taps instead of
/// multiplying by zero.
pub fn sparse_dw_conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    mask: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    if !spec.is_depthwise() || spec.stride != 1 {
        return Err(SlakError::invalid_config(
            "spec",
            "sparse convolution is defined for stride-1 depthwise kernels",
        ));
    }
    let g = check_forward(x, w, None, spec)?;
    if mask.shape() != w.shape() {
        return Err(SlakError::InvalidMask(format!(
            "mask shape {:?} does not match kernel shape {:?}",
            mask.shape(),
            w.shape()
        )));
    }
    for (i, &m) in mask.data().iter().enumerate() {
        if m != T::zero() && m != T::one() {
            return Err(SlakError::InvalidMask(format!(
                "mask must be binary; found {m} at flat index {i}"
            )));
        }
    }
    Ok(dw_forward_s1(x, w, None, spec, &g, Some(mask)))
}

/// Parallel decomposed depthwise unit: BN_a(conv MxN) + BN_b(conv NxM) +
/// BN_c(conv 5x5-shaped small kernel), all stride-1 same-padded, bias-free
/// (each BN beta is the only additive term).
pub fn decomposed_dw_forward<T: Scalar>(
    x: &Tensor<T>,
    w_mxn: &Tensor<T>,
    w_nxm: &Tensor<T>,
    w_small: &Tensor<T>,
    bn_a: &mut BatchNormState<T>,
    bn_b: &mut BatchNormState<T>,
    bn_c: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    let [_, c, _, _] = x.dims4();
    for (name, wt) in [("MxN", w_mxn), ("NxM", w_nxm), ("small", w_small)] {
        let [wc, one, _, _] = wt.dims4();
        if wt.rank() != 4 || one != 1 || wc != c {
            return Err(SlakError::invalid_shape(format!(
                "{name} kernel {:?} is not depthwise over {c} channels",
                wt.shape()
            )));
        }
    }
    let mut sum: Option<Tensor<T>> = None;
    for (wt, bn) in [(w_mxn, bn_a), (w_nxm, bn_b), (w_small, bn_c)] {
        let [_, _, kh, kw] = wt.dims4();
        let spec = ConvSpec::depthwise(c, kh, kw);
        let y = conv2d_forward(x, wt, None, &spec)?;
        let y = batchnorm_forward(&y, bn, mode)?;
        match &mut sum {
            None => sum = Some(y),
            Some(acc) => acc.axpy(T::one(), &y)?,
        }
    }
    Ok(sum.expect("three branches"))
}

/// Sequential decomposed unit: conv(conv(x, MxN), NxM), both stride-1
/// same-padded depthwise. `mode` is accepted for signature parity with the
/// parallel unit; the sequential variant carries no normalization.
pub fn seq_decomposed_dw_forward<T: Scalar>(
    x: &Tensor<T>,
    w_mxn: &Tensor<T>,
    w_nxm: &Tensor<T>,
    _mode: Mode,
) -> Result<Tensor<T>> {
    let [_, c, _, _] = x.dims4();
    let [_, _, ah, aw] = w_mxn.dims4();
    let [_, _, bh, bw] = w_nxm.dims4();
    let mid = conv2d_forward(x, w_mxn, None, &ConvSpec::depthwise(c, ah, aw))?;
    conv2d_forward(&mid, w_nxm, None, &ConvSpec::depthwise(c, bh, bw))
}
