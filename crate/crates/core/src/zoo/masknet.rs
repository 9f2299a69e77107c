use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Linear, Module, MultiHeadSelfAttention};
use crate::tensor::Parameter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskNetConfig {
    /// Width of the tapped feature.
    pub d_m: usize,
    /// Token width inside the attention block.
    pub d_h: usize,
    pub heads: usize,
}

impl MaskNetConfig {
    pub fn new(d_m: usize, d_h: usize, heads: usize) -> Result<Self> {
        let cfg = Self { d_m, d_h, heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_m == 0 || self.d_h == 0 || self.heads == 0 || !self.d_h.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "MaskNet hidden width {} must be a positive multiple of {} heads (d_m = {})",
                self.d_h, self.heads, self.d_m
            )));
        }
        Ok(())
    }
}

/// Soft feature mask: the feature vector is projected to `d_m` tokens of width
/// `d_h`, mixed by self-attention, scored per token, squashed by a sigmoid and
/// multiplied into the input.
#[derive(Debug, Clone)]
pub struct MaskNet {
    pub cfg: MaskNetConfig,
    pub projector: Linear,
    pub attention: MultiHeadSelfAttention,
    pub score: Linear,
}

impl MaskNet {
    pub fn new(name: &str, cfg: MaskNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            projector: Linear::new(&format!("{name}/proj"), cfg.d_m, cfg.d_m * cfg.d_h, rng),
            attention: MultiHeadSelfAttention::new(&format!("{name}/attn"), cfg.d_h, cfg.heads, rng)?,
            score: Linear::new(&format!("{name}/score"), cfg.d_h, 1, rng),
        })
    }

    /// The mask `m ∈ (0,1)^{d_m}` for each row of `z: [batch, d_m]`.
    pub fn mask(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let shape = g.shape(z).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.d_m {
            return Err(Error::config(format!(
                "MaskNet expects [batch, {}], got {shape:?}",
                self.cfg.d_m
            )));
        }
        let (batch, d_m, d_h) = (shape[0], self.cfg.d_m, self.cfg.d_h);
        let tokens = self.projector.forward(g, z)?;
        let tokens = g.reshape(tokens, &[batch, d_m, d_h])?;
        let mixed = self.attention.forward(g, tokens)?;
        let mixed = g.reshape(mixed, &[batch * d_m, d_h])?;
        let s = self.score.forward(g, mixed)?;
        let s = g.reshape(s, &[batch, d_m])?;
        Ok(g.sigmoid(s))
    }

    pub fn forward(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let m = self.mask(g, z)?;
        g.mul(z, m)
    }
}

pub fn masknet_forward(g: &mut Graph, z: NodeId, net: &MaskNet) -> Result<NodeId> {
    net.forward(g, z)
}

impl Module for MaskNet {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.projector.params();
        v.extend(self.attention.params());
        v.extend(self.score.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.projector.params_mut();
        v.extend(self.attention.params_mut());
        v.extend(self.score.params_mut());
        v
    }
}
