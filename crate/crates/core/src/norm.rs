//! Batch and layer normalization.
//!
//! BatchNorm follows each decomposed kernel branch; LayerNorm sits in the
//! block interior and after the stem/downsample convs. Both operate on
//! (batch, channel, height, width) activations: BatchNorm normalizes each
//! channel over batch and space, LayerNorm normalizes over channels at
//! each spatial site.

use crate::error::{Result, SlakError};
use crate::tensor::{Scalar, Tensor};

/// Whether stateful layers use batch statistics (and update running stats)
/// or frozen running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNormState<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    /// Fraction of the fresh batch statistic blended into the running one.
    pub momentum: f64,
}

impl<T: Scalar> BatchNormState<T> {
    /// gamma = 1, beta = 0, running stats (0, 1): eval-mode identity up to eps.
    pub fn identity(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: 0.0,
            momentum: 0.1,
        }
    }

    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNormState {
            eps,
            momentum,
            ..BatchNormState::identity(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.len() != c {
                return Err(SlakError::invalid_shape(format!(
                    "batchnorm {name} has {} channels, gamma has {c}",
                    t.len()
                )));
            }
        }
        if let Some((i, &v)) = self
            .running_var
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| **v < T::zero())
        {
            return Err(SlakError::invalid_config(
                "running_var",
                format!("negative variance {v} at channel {i}"),
            ));
        }
        Ok(())
    }
}

fn check_channels<T: Scalar>(x: &Tensor<T>, c: usize, what: &str) -> Result<[usize; 4]> {
    if x.rank() != 4 {
        return Err(SlakError::invalid_shape(format!(
            "{what} input must be rank 4, got {:?}",
            x.shape()
        )));
    }
    let dims = x.dims4();
    if dims[1] != c {
        return Err(SlakError::invalid_shape(format!(
            "{what} input {:?} has {} channels, state has {c}",
            x.shape(),
            dims[1]
        )));
    }
    Ok(dims)
}

/// Per-channel mean and biased variance over batch and space.
fn batch_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let [bsz, c, h, w] = x.dims4();
    let plane = h * w;
    let n = (bsz * plane) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..bsz {
            for &v in &x.data()[(bi * c + ci) * plane..][..plane] {
                s += v.to_f64();
            }
        }
        mean[ci] = s / n;
        let mut sq = 0.0;
        for bi in 0..bsz {
            for &v in &x.data()[(bi * c + ci) * plane..][..plane] {
                let d = v.to_f64() - mean[ci];
                sq += d * d;
            }
        }
        var[ci] = sq / n;
    }
    (mean, var)
}

/// Train mode normalizes with batch statistics and folds them into the
/// running stats (running variance uses the unbiased estimate); eval mode
/// is a per-channel affine map built from the running stats.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    state.validate()?;
    let [bsz, c, h, w] = check_channels(x, state.channels(), "batchnorm")?;
    let plane = h * w;
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let n = bsz * plane;
            if n == 1 {
                return Err(SlakError::DegenerateStats(
                    "batchnorm in train mode needs more than one value per channel \
                     (batch size 1 with 1x1 spatial extent)"
                        .into(),
                ));
            }
            let (m, v) = batch_stats(x);
            let mom = state.momentum;
            let unbias = n as f64 / (n as f64 - 1.0);
            for ci in 0..c {
                let rm = state.running_mean.data()[ci].to_f64();
                let rv = state.running_var.data()[ci].to_f64();
                state.running_mean.data_mut()[ci] =
                    T::from_f64((1.0 - mom) * rm + mom * m[ci]);
                state.running_var.data_mut()[ci] =
                    T::from_f64((1.0 - mom) * rv + mom * v[ci] * unbias);
            }
            (m, v)
        }
        Mode::Eval => (
            state.running_mean.data().iter().map(|&v| v.to_f64()).collect(),
            state.running_var.data().iter().map(|&v| v.to_f64()).collect(),
        ),
    };
    let mut y = Tensor::zeros(x.shape());
    for ci in 0..c {
        let scale = T::from_f64(state.gamma.data()[ci].to_f64() / (var[ci] + state.eps).sqrt());
        let shift = T::from_f64(
            state.beta.data()[ci].to_f64()
                - mean[ci] * state.gamma.data()[ci].to_f64() / (var[ci] + state.eps).sqrt(),
        );
        for bi in 0..bsz {
            let src = &x.data()[(bi * c + ci) * plane..][..plane];
            let dst = &mut y.data_mut()[(bi * c + ci) * plane..][..plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v * scale + shift;
            }
        }
    }
    y.debug_assert_finite("batchnorm_forward");
    Ok(y)
}

/// Gradients of [`batchnorm_forward`]; batch statistics are recomputed from
/// `x`, so the same (x, state, mode) triple must be passed as in forward.
/// Returns (dx, dgamma, dbeta).
pub fn batchnorm_backward<T: Scalar>(
    x: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    state.validate()?;
    let [bsz, c, h, w] = check_channels(x, state.channels(), "batchnorm")?;
    if dy.shape() != x.shape() {
        return Err(SlakError::invalid_shape(format!(
            "batchnorm gradient {:?} vs input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let plane = h * w;
    let n = (bsz * plane) as f64;
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            if bsz * plane == 1 {
                return Err(SlakError::DegenerateStats(
                    "batchnorm backward in train mode needs more than one value per channel"
                        .into(),
                ));
            }
            batch_stats(x)
        }
        Mode::Eval => (
            state.running_mean.data().iter().map(|&v| v.to_f64()).collect(),
            state.running_var.data().iter().map(|&v| v.to_f64()).collect(),
        ),
    };
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ci in 0..c {
        let inv_std = 1.0 / (var[ci] + state.eps).sqrt();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for bi in 0..bsz {
            let xs = &x.data()[(bi * c + ci) * plane..][..plane];
            let gs = &dy.data()[(bi * c + ci) * plane..][..plane];
            for (&xv, &gv) in xs.iter().zip(gs) {
                let xhat = (xv.to_f64() - mean[ci]) * inv_std;
                sum_dy += gv.to_f64();
                sum_dy_xhat += gv.to_f64() * xhat;
            }
        }
        dgamma.data_mut()[ci] = T::from_f64(sum_dy_xhat);
        dbeta.data_mut()[ci] = T::from_f64(sum_dy);
        let gamma = state.gamma.data()[ci].to_f64();
        for bi in 0..bsz {
            let xs = &x.data()[(bi * c + ci) * plane..][..plane];
            let gs = &dy.data()[(bi * c + ci) * plane..][..plane];
            let ds = &mut dx.data_mut()[(bi * c + ci) * plane..][..plane];
            match mode {
                Mode::Train => {
                    for ((&xv, &gv), o) in xs.iter().zip(gs).zip(ds.iter_mut()) {
                        let xhat = (xv.to_f64() - mean[ci]) * inv_std;
                        let d = gamma * inv_std
                            * (gv.to_f64() - sum_dy / n - xhat * sum_dy_xhat / n);
                        *o = T::from_f64(d);
                    }
                }
                Mode::Eval => {
                    let k = T::from_f64(gamma * inv_std);
                    for (&gv, o) in gs.iter().zip(ds.iter_mut()) {
                        *o = gv * k;
                    }
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[derive(Clone, Debug)]
pub struct LayerNormState<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNormState<T> {
    pub fn identity(channels: usize) -> Self {
        LayerNormState {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            eps: 1e-6,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Normalize over the channel axis at each (batch, y, x) site, then apply
/// the per-channel affine. Train and eval behave identically.
pub fn layernorm_forward<T: Scalar>(x: &Tensor<T>, state: &LayerNormState<T>) -> Result<Tensor<T>> {
    let [bsz, c, h, w] = check_channels(x, state.channels(), "layernorm")?;
    let plane = h * w;
    let xd = x.data();
    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    let inv_c = 1.0 / c as f64;
    for bi in 0..bsz {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut mean = 0.0f64;
            for ci in 0..c {
                mean += xd[base + ci * plane + p].to_f64();
            }
            mean *= inv_c;
            let mut var = 0.0f64;
            for ci in 0..c {
                let d = xd[base + ci * plane + p].to_f64() - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = 1.0 / (var + state.eps).sqrt();
            for ci in 0..c {
                let xhat = (xd[base + ci * plane + p].to_f64() - mean) * inv_std;
                yd[base + ci * plane + p] = T::from_f64(
                    xhat * state.gamma.data()[ci].to_f64() + state.beta.data()[ci].to_f64(),
                );
            }
        }
    }
    y.debug_assert_finite("layernorm_forward");
    Ok(y)
}

/// Gradients of [`layernorm_forward`]; returns (dx, dgamma, dbeta).
pub fn layernorm_backward<T: Scalar>(
    x: &Tensor<T>,
    state: &LayerNormState<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [bsz, c, h, w] = check_channels(x, state.channels(), "layernorm")?;
    if dy.shape() != x.shape() {
        return Err(SlakError::invalid_shape(format!(
            "layernorm gradient {:?} vs input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    let plane = h * w;
    let xd = x.data();
    let dyd = dy.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let inv_c = 1.0 / c as f64;
    for bi in 0..bsz {
        let base = bi * c * plane;
        for p in 0..plane {
            let mut mean = 0.0f64;
            for ci in 0..c {
                mean += xd[base + ci * plane + p].to_f64();
            }
            mean *= inv_c;
            let mut var = 0.0f64;
            for ci in 0..c {
                let d = xd[base + ci * plane + p].to_f64() - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = 1.0 / (var + state.eps).sqrt();
            // g = dy * gamma; dx = (g - mean_c(g) - xhat * mean_c(g*xhat)) / std
            let mut sum_g = 0.0f64;
            let mut sum_g_xhat = 0.0f64;
            for ci in 0..c {
                let idx = base + ci * plane + p;
                let xhat = (xd[idx].to_f64() - mean) * inv_std;
                let g = dyd[idx].to_f64() * state.gamma.data()[ci].to_f64();
                sum_g += g;
                sum_g_xhat += g * xhat;
                dgamma.data_mut()[ci] += T::from_f64(dyd[idx].to_f64() * xhat);
                dbeta.data_mut()[ci] += dyd[idx];
            }
            for ci in 0..c {
                let idx = base + ci * plane + p;
                let xhat = (xd[idx].to_f64() - mean) * inv_std;
                let g = dyd[idx].to_f64() * state.gamma.data()[ci].to_f64();
                dx.data_mut()[idx] =
                    T::from_f64((g - sum_g * inv_c - xhat * sum_g_xhat * inv_c) * inv_std);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}
