//! Layer primitives built on [`Graph`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Parameter, Tensor};

/// Anything that owns parameters.
pub trait Module {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.frozen = frozen;
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.tensor.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Parameter::init_uniform(format!("{name}/w"), &[fan_in, fan_out], fan_in, rng),
            bias: Parameter::init_uniform(format!("{name}/b"), &[fan_out], fan_in, rng),
        }
    }

    pub fn from_tensors(name: &str, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.shape()[1] != bias.shape()[0] {
            return Err(Error::dim(format!(
                "linear {name}: weight {:?} and bias {:?} disagree",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            weight: Parameter::new(format!("{name}/w"), weight),
            bias: Parameter::new(format!("{name}/b"), bias),
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.linear(x, w, b)
    }

    /// Set weight and bias to zero.
    pub fn zero(&mut self) {
        self.weight.tensor.data_mut().fill(0.0);
        self.bias.tensor.data_mut().fill(0.0);
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stack of `Linear -> ReLU` blocks.
#[derive(Debug, Clone, Default)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(name: &str, input: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(&format!("{name}.{i}"), fan_in, h, rng));
            fan_in = h;
        }
        Self { layers }
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(Linear::fan_out)
    }

    pub fn forward(&self, g: &mut Graph, mut x: NodeId) -> Result<NodeId> {
        for l in &self.layers {
            let y = l.forward(g, x)?;
            x = g.relu(y);
        }
        Ok(x)
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(Module::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(Module::params_mut).collect()
    }
}

/// Standard multi-head self-attention without positional encoding.
///
/// Input and output are `[batch, tokens, dim]`. Each head attends with scale
/// `1/sqrt(dim/heads)`; head outputs are concatenated and projected by `out`.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadSelfAttention {
    pub fn new(name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            dim,
            query: Linear::new(&format!("{name}/q"), dim, dim, rng),
            key: Linear::new(&format!("{name}/k"), dim, dim, rng),
            value: Linear::new(&format!("{name}/v"), dim, dim, rng),
            out: Linear::new(&format!("{name}/o"), dim, dim, rng),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[batch, tokens, heads * hd] -> [batch * heads, tokens, hd]`
    fn split_heads(&self, g: &mut Graph, x: NodeId, batch: usize, tokens: usize) -> Result<NodeId> {
        let hd = self.head_dim();
        let x = g.reshape(x, &[batch, tokens, self.heads, hd])?;
        let x = g.permute_0213(x)?;
        g.reshape(x, &[batch * self.heads, tokens, hd])
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::dim(format!(
                "attention expects [batch, tokens, {}], got {shape:?}",
                self.dim
            )));
        }
        let (batch, tokens) = (shape[0], shape[1]);
        let flat = g.reshape(x, &[batch * tokens, self.dim])?;
        let q = self.query.forward(g, flat)?;
        let k = self.key.forward(g, flat)?;
        let v = self.value.forward(g, flat)?;
        let q = self.split_heads(g, q, batch, tokens)?;
        let k = self.split_heads(g, k, batch, tokens)?;
        let v = self.split_heads(g, v, batch, tokens)?;

        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (self.head_dim() as f32).sqrt());
        let attn = g.softmax(scores, 1.0)?;
        let ctx = g.batch_matmul(attn, v, false)?;

        let ctx = g.reshape(ctx, &[batch, self.heads, tokens, self.head_dim()])?;
        let ctx = g.permute_0213(ctx)?;
        let ctx = g.reshape(ctx, &[batch * tokens, self.dim])?;
        let y = self.out.forward(g, ctx)?;
        g.reshape(y, &[batch, tokens, self.dim])
    }
}

impl Module for MultiHeadSelfAttention {
    fn params(&self) -> Vec<&Parameter> {
        [&self.query, &self.key, &self.value, &self.out]
            .into_iter()
            .flat_map(Module::params)
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        [&mut self.query, &mut self.key, &mut self.value, &mut self.out]
            .into_iter()
            .flat_map(Module::params_mut)
            .collect()
    }
}
