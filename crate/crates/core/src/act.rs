//! GELU activation in the exact Gaussian-CDF form: gelu(x) = x * Phi(x)
//! with Phi the standard normal CDF, evaluated through erf rather than the
//! tanh approximation.

use crate::error::{Result, SlakError};
use crate::tensor::{Scalar, Tensor};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

#[inline]
fn phi_cdf<T: Scalar>(x: T) -> f64 {
    0.5 * (1.0 + (T::from_f64(x.to_f64() * FRAC_1_SQRT_2)).erf().to_f64())
}

pub fn gelu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let y = x.map(|v| T::from_f64(v.to_f64() * phi_cdf(v)));
    y.debug_assert_finite("gelu_forward");
    y
}

/// dy ⊙ gelu'(x), with gelu'(x) = Phi(x) + x * phi(x).
pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(SlakError::invalid_shape(format!(
            "gelu gradient {:?} vs input {:?}",
            dy.shape(),
            x.shape()
        )));
    }
    x.zip_map(dy, |v, g| {
        let vf = v.to_f64();
        let pdf = (-0.5 * vf * vf).exp() * INV_SQRT_2PI;
        T::from_f64(g.to_f64() * (phi_cdf(v) + vf * pdf))
    })
}
