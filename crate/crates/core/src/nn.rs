//! Affine + nonlinearity stacks used by every toy network in the crate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::init::glorot_uniform;
use crate::tensor::{Adam, AdamState, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Self::Identity => Ok(x),
            Self::Relu => g.relu(x),
            Self::Tanh => g.tanh(x),
            Self::Sigmoid => g.sigmoid(x),
        }
    }
}

/// `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot_uniform(fan_in, fan_out, rng),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[1]] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: ws.to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Multilayer perceptron: `hidden` after every layer but the last, `output`
/// after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

/// An [`Mlp`] whose parameters have been placed on a graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    params: Vec<(Var, Var)>,
    hidden: Activation,
    output: Activation,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(invalid(format!("bad layer sizes {sizes:?}")));
        }
        let layers = sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Ok(Self { layers, hidden, output })
    }

    pub fn from_layers(layers: Vec<Linear>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty { what: "layers" });
        }
        for w in layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(invalid("consecutive layer sizes disagree"));
            }
        }
        Ok(Self { layers, hidden, output })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// Places parameters on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let params = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.param(&l.weight), g.param(&l.bias))
                } else {
                    (g.constant(&l.weight), g.constant(&l.bias))
                }
            })
            .collect();
        BoundMlp {
            params,
            hidden: self.hidden,
            output: self.output,
        }
    }

    /// Evaluates on a `[batch, in]` tensor without recording gradients.
    pub fn forward_value(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x);
        let y = b.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Parameters with stable names `{prefix}.{layer}.weight|bias`.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weight));
            out.push((format!("{prefix}.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &mut l.weight));
            out.push((format!("{prefix}.{i}.bias"), &mut l.bias));
        }
        out
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.params.len() - 1;
        for (i, &(w, b)) in self.params.iter().enumerate() {
            h = g.affine(h, w, b)?;
            let act = if i == last { self.output } else { self.hidden };
            h = act.apply(g, h)?;
        }
        Ok(h)
    }

    /// Parameter nodes in the order of [`Mlp::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Gradients of `vars` after a backward pass; unreached vars get zeros.
pub fn collect_grads(g: &Graph, vars: &[Var]) -> Result<Vec<Vec<f64>>> {
    vars.iter()
        .enumerate()
        .map(|(i, &v)| {
            let grad = g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec);
            if grad.iter().all(|x| x.is_finite()) {
                Ok(grad)
            } else {
                Err(Error::NonFiniteGradient { param: i })
            }
        })
        .collect()
}

/// One Adam step on `params` using previously collected gradients.
pub fn apply_adam(adam: &Adam, state: &mut AdamState, mut params: Vec<&mut Tensor>, grads: &[Vec<f64>]) -> Result<()> {
    let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    adam.step(&mut params, &refs, state)
}
