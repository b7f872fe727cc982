//! Parameterised building blocks: convolution and group normalisation.

use crate::error::Result;
use crate::ops::{self, ConvSpec, GroupNormCache};
use crate::params::{Grads, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor4};

/// Square-kernel convolution whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let fan_in = c_in / spec.groups * kernel * kernel;
        let weight = store.add_uniform(
            format!("{name}.weight"),
            (c_out, c_in / spec.groups, kernel, kernel),
            fan_in,
            rng,
        )?;
        let bias = if bias {
            Some(store.add_uniform(format!("{name}.bias"), (1, c_out, 1, 1), fan_in, rng)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            spec,
            c_in,
            c_out,
            kernel,
        })
    }

    /// 1x1 convolution, stride 1, no padding.
    pub fn pointwise<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Self::new(store, name, c_in, c_out, 1, ConvSpec::new(1, 0, 1), bias, rng)
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        ops::conv2d(
            x,
            store.value(self.weight),
            self.bias.map(|b| store.value(b).data()),
            self.spec,
        )
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor4<T>,
        grad_out: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let g = ops::conv2d_backward(x, store.value(self.weight), self.spec, grad_out)?;
        grads.add_to(self.weight, g.kernel.data());
        if let Some(b) = self.bias {
            grads.add_to(b, &g.bias);
        }
        Ok(g.input)
    }
}

/// Group normalisation with per-channel affine parameters (gamma = 1, beta = 0 at init).
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        groups: usize,
        eps: f64,
    ) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor4::full((1, channels, 1, 1), T::ONE))?;
        let beta = store.add(format!("{name}.beta"), Tensor4::zeros((1, channels, 1, 1)))?;
        Ok(Self {
            gamma,
            beta,
            groups,
            eps,
        })
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, GroupNormCache<T>)> {
        ops::group_norm(
            x,
            self.groups,
            store.value(self.gamma).data(),
            store.value(self.beta).data(),
            T::from_f64(self.eps),
        )
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &GroupNormCache<T>,
        grad_out: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Tensor4<T> {
        let g = ops::group_norm_backward(
            cache,
            self.groups,
            store.value(self.gamma).data(),
            grad_out,
        );
        grads.add_to(self.gamma, &g.gamma);
        grads.add_to(self.beta, &g.beta);
        g.input
    }
}
