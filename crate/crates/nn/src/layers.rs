use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{he_uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Convolution with "same" zero padding for odd kernels.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub pad: [usize; 3],
}

impl Conv {
    /// `kernel` is `[kd, kh, kw]`; use `kd = 1` for 2-d inputs.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel.iter().product::<usize>();
        let w = he_uniform(&[out_ch, in_ch, kernel[0], kernel[1], kernel[2]], fan_in, gain, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            weight,
            bias,
            pad: kernel.map(|k| k / 2),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Var {
        let w = g.param(store, self.weight, trainable);
        let b = g.param(store, self.bias, trainable);
        g.conv(x, w, b, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(&[out_dim, in_dim], in_dim, gain, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Var {
        let w = g.param(store, self.weight, trainable);
        let b = g.param(store, self.bias, trainable);
        g.linear(x, w, b)
    }
}
