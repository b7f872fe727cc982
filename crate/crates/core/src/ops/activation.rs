//! Pointwise nonlinearities and their derivatives.

use crate::tensor::{Real, Tensor4};

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus_scalar<T: Real>(x: T) -> T {
    x.max(T::ZERO) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

/// VJP of [`sigmoid`] from its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor4<T>, grad: &Tensor4<T>) -> Tensor4<T> {
    y.zip_map(grad, |y, g| g * y * (T::ONE - y))
        .expect("sigmoid_backward: shapes")
}

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v.max(T::ZERO))
}

pub fn relu_backward<T: Real>(x: &Tensor4<T>, grad: &Tensor4<T>) -> Tensor4<T> {
    x.zip_map(grad, |x, g| if x > T::ZERO { g } else { T::ZERO })
        .expect("relu_backward: shapes")
}

/// `x * sigmoid(x)`.
pub fn silu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| v * sigmoid_scalar(v))
}

pub fn silu_backward<T: Real>(x: &Tensor4<T>, grad: &Tensor4<T>) -> Tensor4<T> {
    x.zip_map(grad, |x, g| {
        let s = sigmoid_scalar(x);
        g * s * (T::ONE + x * (T::ONE - s))
    })
    .expect("silu_backward: shapes")
}

pub fn softplus<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(softplus_scalar)
}

pub fn softplus_backward<T: Real>(x: &Tensor4<T>, grad: &Tensor4<T>) -> Tensor4<T> {
    x.zip_map(grad, |x, g| g * sigmoid_scalar(x))
        .expect("softplus_backward: shapes")
}
