//! Parameterised building blocks shared by the model modules.

use numcore::{Tensor, Var};
use rand::Rng;

use crate::params::{init, Group, ParamId, ParamStore, Session};
use crate::Result;

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` over the last axis, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, group: Group, rng: &mut impl Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init::xavier(&[fan_in, fan_out], fan_in, fan_out, rng),
            group,
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]), group, false);
        Self {
            weight,
            bias: Some(bias),
        }
    }

    /// He-initialised, for layers feeding a ReLU.
    pub fn relu_input(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: Group,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init::he(&[fan_in, fan_out], fan_in, rng),
            group,
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]), group, false);
        Self {
            weight,
            bias: Some(bias),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let b = self.bias.map(|b| s.p(b));
        Ok(s.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: Group) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0), group, false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]), group, false),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        Ok(s.layer_norm(x, g, b, LN_EPS)?)
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, group: Group, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::relu_input(store, &format!("{name}.fc1"), dim, hidden, group, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, group, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.relu(h);
        self.fc2.forward(s, h)
    }
}

/// Square convolution over `[B, H, W, C]` maps, weights `[k, k, in, out]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        group: Group,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                init::he(&[k, k, cin, cout], k * k * cin, rng),
                group,
                true,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout]), group, false),
            stride,
            pad: k / 2,
        }
    }

    /// A zero-initialised convolution.
    pub fn zeros(store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, group: Group) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::zeros([k, k, cin, cout]), group, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout]), group, false),
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.weight), s.p(self.bias));
        Ok(s.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

/// Repeats a `[L, C]` tensor `times` times along the rows.
pub fn tile_rows(t: &Tensor, times: usize) -> Tensor {
    let mut shape = t.shape().to_vec();
    shape[0] *= times;
    Tensor::from_parts(shape, t.data().repeat(times))
}
