use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamGroup, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Affine map `x · W + b` with `W: [in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), [in_dim, out_dim], in_dim, group, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), [out_dim], in_dim, group, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Output layer whose weights and bias start at exactly zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, group: ParamGroup) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros([in_dim, out_dim]), group);
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([out_dim]), group));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Evaluates on plain values without recording.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.value(self.weight).data();
        let mut out = match self.bias {
            Some(b) => store.value(b).data().to_vec(),
            None => vec![0.0; self.out_dim],
        };
        for (i, xi) in x.iter().enumerate() {
            let row = &w[i * self.out_dim..(i + 1) * self.out_dim];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += xi * w);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], 1.0), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]), group),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Shared perceptron: every layer is linear followed by ReLU.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                // He-uniform weights: every layer feeds a ReLU.
                let l = Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, group, rng);
                store.value_mut(l.weight).data_mut().iter_mut().for_each(|v| *v *= 6f64.sqrt());
                l
            })
            .collect();
        Self { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        for l in &self.layers {
            let y = l.forward(g, store, x)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        for l in &self.layers {
            v = l.apply(store, &v);
            v.iter_mut().for_each(|x| *x = x.max(0.0));
        }
        v
    }
}
