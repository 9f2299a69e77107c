use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Linear, Module};
use crate::tensor::Parameter;

/// Router from student logits to a confidence distribution over `N` teachers.
#[derive(Debug, Clone)]
pub struct GateNet {
    pub hidden: Linear,
    pub out: Linear,
}

impl GateNet {
    /// One hidden ReLU layer; width defaults to `4·N` when `hidden` is `None`.
    pub fn new(classes: usize, teachers: usize, hidden: Option<usize>, rng: &mut impl Rng) -> Result<Self> {
        if teachers < 2 {
            return Err(Error::config(format!(
                "routing needs at least 2 teachers, got {teachers}"
            )));
        }
        let h = hidden.unwrap_or(4 * teachers);
        Ok(Self {
            hidden: Linear::new("gate/hidden", classes, h, rng),
            out: Linear::new("gate/out", h, teachers, rng),
        })
    }

    pub fn teachers(&self) -> usize {
        self.out.fan_out()
    }

    /// Logits `[batch, classes]` → confidences `[batch, N]`.
    pub fn forward(&self, g: &mut Graph, z_out: NodeId) -> Result<NodeId> {
        let h = self.hidden.forward(g, z_out)?;
        let h = g.relu(h);
        let s = self.out.forward(g, h)?;
        g.softmax(s, 1.0)
    }
}

pub fn gatenet_forward(g: &mut Graph, z_out: NodeId, net: &GateNet) -> Result<NodeId> {
    net.forward(g, z_out)
}

impl Module for GateNet {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.hidden.params();
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.hidden.params_mut();
        v.extend(self.out.params_mut());
        v
    }
}
