//! Element-wise products with broadcasting over spatial positions or channels.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

fn weight_shape_error(op: &'static str, f: &Tensor4<impl Real>, w: &Tensor4<impl Real>) -> Error {
    Error::ShapeMismatch {
        op,
        left: f.shape(),
        right: w.shape(),
    }
}

/// `f ⊙ w` with `w` of shape `b x c x 1 x 1` broadcast over `h x w`.
pub fn mul_channel<T: Real>(f: &Tensor4<T>, w: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (s, ws) = (f.shape(), w.shape());
    if ws.b != s.b || ws.c != s.c || ws.h != 1 || ws.w != 1 {
        return Err(weight_shape_error("mul_channel", f, w));
    }
    let mut out = f.clone();
    for b in 0..s.b {
        for c in 0..s.c {
            let g = w.at(b, c, 0, 0);
            for v in out.plane_mut(b, c) {
                *v *= g;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`mul_channel`] with respect to `(f, w)`.
pub fn mul_channel_backward<T: Real>(
    f: &Tensor4<T>,
    w: &Tensor4<T>,
    grad: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let s = f.shape();
    let gf = mul_channel(grad, w).expect("mul_channel_backward: shapes");
    let gw = Tensor4::from_fn(w.shape(), |b, c, _, _| {
        f.plane(b, c)
            .iter()
            .zip(grad.plane(b, c))
            .fold(T::ZERO, |a, (&x, &g)| a + x * g)
    });
    debug_assert_eq!(gf.shape(), s);
    (gf, gw)
}

/// `f ⊙ w` with `w` of shape `b x 1 x h x w` broadcast over channels.
pub fn mul_spatial<T: Real>(f: &Tensor4<T>, w: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (s, ws) = (f.shape(), w.shape());
    if ws.b != s.b || ws.c != 1 || ws.h != s.h || ws.w != s.w {
        return Err(weight_shape_error("mul_spatial", f, w));
    }
    let mut out = f.clone();
    for b in 0..s.b {
        let weights = w.plane(b, 0).to_vec();
        for c in 0..s.c {
            for (v, &g) in out.plane_mut(b, c).iter_mut().zip(&weights) {
                *v *= g;
            }
        }
    }
    Ok(out)
}

pub fn mul_spatial_backward<T: Real>(
    f: &Tensor4<T>,
    w: &Tensor4<T>,
    grad: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let s = f.shape();
    let gf = mul_spatial(grad, w).expect("mul_spatial_backward: shapes");
    let mut gw = Tensor4::zeros(w.shape());
    for b in 0..s.b {
        for c in 0..s.c {
            let (fp, gp) = (f.plane(b, c), grad.plane(b, c));
            for ((d, &x), &g) in gw.plane_mut(b, 0).iter_mut().zip(fp).zip(gp) {
                *d += x * g;
            }
        }
    }
    (gf, gw)
}

/// Same-shape element-wise product.
pub fn mul<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    a.zip_map(b, |x, y| x * y)
}

pub fn mul_backward<T: Real>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    grad: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let ga = b.zip_map(grad, |y, g| y * g).expect("mul_backward: shapes");
    let gb = a.zip_map(grad, |x, g| x * g).expect("mul_backward: shapes");
    (ga, gb)
}
