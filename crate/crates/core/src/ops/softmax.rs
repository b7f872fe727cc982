//! Numerically stable softmax over the channel axis or over spatial positions.

use crate::tensor::{Real, Tensor4};

/// Softmax over channels at every `(batch, y, x)`; on `b x c x 1 x 1` channel
/// weights this normalises each batch element's `c` values.
pub fn softmax_channel<T: Real>(w: &Tensor4<T>) -> Tensor4<T> {
    let s = w.shape();
    let plane = s.plane();
    let mut out = Tensor4::zeros(s);
    for b in 0..s.b {
        let src = w.sample(b);
        let dst = out.sample_mut(b);
        for pos in 0..plane {
            let max = (0..s.c)
                .map(|c| src[c * plane + pos])
                .fold(src[pos], T::max);
            let mut total = T::ZERO;
            for c in 0..s.c {
                let e = (src[c * plane + pos] - max).exp();
                dst[c * plane + pos] = e;
                total += e;
            }
            for c in 0..s.c {
                dst[c * plane + pos] = dst[c * plane + pos] / total;
            }
        }
    }
    out
}

/// VJP of [`softmax_channel`] from its output `y`.
pub fn softmax_channel_backward<T: Real>(y: &Tensor4<T>, grad: &Tensor4<T>) -> Tensor4<T> {
    let s = y.shape();
    let plane = s.plane();
    let mut out = Tensor4::zeros(s);
    for b in 0..s.b {
        let (ys, gs) = (y.sample(b), grad.sample(b));
        let dst = out.sample_mut(b);
        for pos in 0..plane {
            let inner = (0..s.c).fold(T::ZERO, |acc, c| {
                acc + ys[c * plane + pos] * gs[c * plane + pos]
            });
            for c in 0..s.c {
                let i = c * plane + pos;
                dst[i] = ys[i] * (gs[i] - inner);
            }
        }
    }
    out
}

/// Softmax over all `h*w` positions of each `(batch, channel)` plane.
pub fn softmax_spatial<T: Real>(w: &Tensor4<T>) -> Tensor4<T> {
    let s = w.shape();
    let mut out = w.clone();
    for b in 0..s.b {
        for c in 0..s.c {
            let plane = out.plane_mut(b, c);
            let max = plane.iter().copied().fold(plane[0], T::max);
            let mut total = T::ZERO;
            for v in plane.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in plane.iter_mut() {
                *v = *v / total;
            }
        }
    }
    out
}

/// VJP of [`softmax_spatial`] from its output `y`.
pub fn softmax_spatial_backward<T: Real>(y: &Tensor4<T>, grad: &Tensor4<T>) -> Tensor4<T> {
    let s = y.shape();
    let mut out = Tensor4::zeros(s);
    for b in 0..s.b {
        for c in 0..s.c {
            let (ys, gs) = (y.plane(b, c), grad.plane(b, c));
            let inner = ys.iter().zip(gs).fold(T::ZERO, |acc, (&a, &g)| acc + a * g);
            for ((d, &yv), &gv) in out.plane_mut(b, c).iter_mut().zip(ys).zip(gs) {
                *d = yv * (gv - inner);
            }
        }
    }
    out
}
