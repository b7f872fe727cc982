//! Per-sample group normalisation with a learnable per-channel affine map.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// Saved statistics for the backward pass.
#[derive(Clone, Debug)]
pub struct GroupNormCache<T> {
    pub normalized: Tensor4<T>,
    /// `1 / sqrt(var + eps)` per `(batch, group)`.
    pub inv_std: Vec<T>,
}

/// Normalises each `(batch, group)` slab to zero mean and unit variance, then
/// applies `gamma * x + beta` per channel.
pub fn group_norm<T: Real>(
    x: &Tensor4<T>,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor4<T>, GroupNormCache<T>)> {
    let s = x.shape();
    if groups == 0 || s.c % groups != 0 || gamma.len() != s.c || beta.len() != s.c {
        return Err(Error::InvalidShape {
            op: "group_norm",
            shape: s,
            reason: format!(
                "{groups} groups with {} gamma / {} beta entries",
                gamma.len(),
                beta.len()
            ),
        });
    }
    let slab = s.c / groups * s.plane();
    let n = T::from_f64(slab as f64);
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(s.b * groups);
    for b in 0..s.b {
        for chunk in normalized.sample_mut(b).chunks_mut(slab) {
            let mean = chunk.iter().fold(T::ZERO, |a, &v| a + v) / n;
            let var = chunk
                .iter()
                .fold(T::ZERO, |a, &v| a + (v - mean) * (v - mean))
                / n;
            let r = T::ONE / (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
    }
    let mut out = normalized.clone();
    for b in 0..s.b {
        for c in 0..s.c {
            for v in out.plane_mut(b, c) {
                *v = *v * gamma[c] + beta[c];
            }
        }
    }
    Ok((out, GroupNormCache { normalized, inv_std }))
}

pub struct GroupNormGrads<T> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn group_norm_backward<T: Real>(
    cache: &GroupNormCache<T>,
    groups: usize,
    gamma: &[T],
    grad: &Tensor4<T>,
) -> GroupNormGrads<T> {
    let s = grad.shape();
    let mut g_gamma = vec![T::ZERO; s.c];
    let mut g_beta = vec![T::ZERO; s.c];
    let mut gxhat = grad.clone();
    for b in 0..s.b {
        for c in 0..s.c {
            let (xh, g) = (cache.normalized.plane(b, c), grad.plane(b, c));
            for (&xv, &gv) in xh.iter().zip(g) {
                g_gamma[c] += gv * xv;
                g_beta[c] += gv;
            }
            for v in gxhat.plane_mut(b, c) {
                *v *= gamma[c];
            }
        }
    }
    let slab = s.c / groups * s.plane();
    let n = T::from_f64(slab as f64);
    let mut input = gxhat;
    for b in 0..s.b {
        let xh_sample = cache.normalized.sample(b);
        for (gi, (chunk, xh)) in input
            .sample_mut(b)
            .chunks_mut(slab)
            .zip(xh_sample.chunks(slab))
            .enumerate()
        {
            let r = cache.inv_std[b * groups + gi];
            let mean_g = chunk.iter().fold(T::ZERO, |a, &v| a + v) / n;
            let mean_gx = chunk
                .iter()
                .zip(xh)
                .fold(T::ZERO, |a, (&g, &x)| a + g * x)
                / n;
            for (g, &x) in chunk.iter_mut().zip(xh) {
                *g = r * (*g - mean_g - x * mean_gx);
            }
        }
    }
    GroupNormGrads {
        input,
        gamma: g_gamma,
        beta: g_beta,
    }
}
