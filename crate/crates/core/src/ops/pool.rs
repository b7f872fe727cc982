use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

/// Mean over `h*w` per channel: `b x c x h x w -> b x c x 1 x 1`.
pub fn global_avg_pool<T: Real>(f: &Tensor4<T>) -> Tensor4<T> {
    let s = f.shape();
    let n = T::from_f64(s.plane() as f64);
    Tensor4::from_fn((s.b, s.c, 1, 1), |b, c, _, _| {
        f.plane(b, c).iter().fold(T::ZERO, |a, &v| a + v) / n
    })
}

pub fn global_avg_pool_backward<T: Real>(input_shape: Shape4, grad: &Tensor4<T>) -> Tensor4<T> {
    let n = T::from_f64(input_shape.plane() as f64);
    let mut out = Tensor4::zeros(input_shape);
    for b in 0..input_shape.b {
        for c in 0..input_shape.c {
            let g = grad.at(b, c, 0, 0) / n;
            out.plane_mut(b, c).fill(g);
        }
    }
    out
}

/// Non-overlapping 2x2 mean pooling. Requires even spatial dims.
pub fn avg_pool2x2<T: Real>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "avg_pool2x2",
            shape: s,
            reason: "height and width must be even".into(),
        });
    }
    let quarter = T::from_f64(0.25);
    Ok(Tensor4::from_fn((s.b, s.c, s.h / 2, s.w / 2), |b, c, y, xx| {
        (x.at(b, c, 2 * y, 2 * xx)
            + x.at(b, c, 2 * y, 2 * xx + 1)
            + x.at(b, c, 2 * y + 1, 2 * xx)
            + x.at(b, c, 2 * y + 1, 2 * xx + 1))
            * quarter
    }))
}

pub fn avg_pool2x2_backward<T: Real>(input_shape: Shape4, grad: &Tensor4<T>) -> Tensor4<T> {
    let quarter = T::from_f64(0.25);
    Tensor4::from_fn(input_shape, |b, c, y, x| grad.at(b, c, y / 2, x / 2) * quarter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_constant_and_mean() {
        let y = global_avg_pool(&Tensor4::<f64>::full((2, 3, 4, 5), 7.0));
        assert!(y.data().iter().all(|&v| v == 7.0));
        let x = Tensor4::from_vec((1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).data(), &[2.5]);
    }

    #[test]
    fn pool2x2_rejects_odd() {
        assert!(avg_pool2x2(&Tensor4::<f64>::zeros((1, 1, 3, 4))).is_err());
        let x = Tensor4::from_fn((1, 1, 2, 4), |_, _, y, x| (y * 4 + x) as f64);
        assert_eq!(avg_pool2x2(&x).unwrap().data(), &[2.5, 4.5]);
    }
}
