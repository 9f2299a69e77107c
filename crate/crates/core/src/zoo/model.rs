use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Linear, Mlp, Module};
use crate::tensor::{Parameter, Tensor};

/// Index of a tapped trunk layer. The tap reads the layer's post-ReLU output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct TapId(pub usize);

/// A classifier for one modality index. Index 0 is the multimodal fusion
/// model, which runs one encoder per modality, concatenates their outputs and
/// feeds the fusion trunk. Unimodal models have no encoders.
///
/// Taps are exposed on trunk layers only, so multimodal taps are post-fusion.
#[derive(Debug, Clone)]
pub struct ModalityModel {
    modality_index: usize,
    pub encoders: Vec<Mlp>,
    pub trunk: Mlp,
    pub head: Linear,
}

pub fn build_unimodal(
    modality_index: usize,
    modality_dim: usize,
    hidden: &[usize],
    classes: usize,
    rng: &mut impl Rng,
) -> Result<ModalityModel> {
    if hidden.is_empty() {
        return Err(Error::config("unimodal model needs at least one hidden layer"));
    }
    if modality_index == 0 {
        return Err(Error::config("modality index 0 is reserved for the fusion model"));
    }
    let prefix = format!("m{modality_index}");
    let trunk = Mlp::new(&format!("{prefix}/trunk"), modality_dim, hidden, rng);
    let head = Linear::new(&format!("{prefix}/head"), *hidden.last().unwrap(), classes, rng);
    Ok(ModalityModel {
        modality_index,
        encoders: Vec::new(),
        trunk,
        head,
    })
}

/// Concatenation fusion over headless unimodal encoders, in modality order.
pub fn build_multimodal(
    encoders: Vec<ModalityModel>,
    fusion_hidden: &[usize],
    classes: usize,
    rng: &mut impl Rng,
) -> Result<ModalityModel> {
    if encoders.len() < 2 {
        return Err(Error::config(format!(
            "fusion model needs at least 2 modalities, got {}",
            encoders.len()
        )));
    }
    if fusion_hidden.is_empty() {
        return Err(Error::config("fusion model needs at least one fusion layer"));
    }
    let mut branches = Vec::with_capacity(encoders.len());
    for (k, e) in encoders.into_iter().enumerate() {
        let mut trunk = e.trunk;
        for (l, layer) in trunk.layers.iter_mut().enumerate() {
            layer.weight.name = format!("m0/enc{k}.{l}/w");
            layer.bias.name = format!("m0/enc{k}.{l}/b");
        }
        branches.push(trunk);
    }
    let fused: usize = branches.iter().map(|b| b.out_dim().unwrap()).sum();
    let trunk = Mlp::new("m0/trunk", fused, fusion_hidden, rng);
    let head = Linear::new("m0/head", *fusion_hidden.last().unwrap(), classes, rng);
    Ok(ModalityModel {
        modality_index: 0,
        encoders: branches,
        trunk,
        head,
    })
}

impl ModalityModel {
    pub fn modality_index(&self) -> usize {
        self.modality_index
    }

    pub fn is_multimodal(&self) -> bool {
        self.modality_index == 0
    }

    pub fn classes(&self) -> usize {
        self.head.fan_out()
    }

    /// Number of input tensors `forward` expects.
    pub fn input_count(&self) -> usize {
        self.encoders.len().max(1)
    }

    pub fn fusion_width(&self) -> usize {
        self.trunk.layers[0].fan_in()
    }

    pub fn taps(&self) -> Vec<TapId> {
        (0..self.trunk.layers.len()).map(TapId).collect()
    }

    /// Middle hidden layer and penultimate layer (the one feeding the head).
    pub fn default_taps(&self) -> Vec<TapId> {
        let last = self.trunk.layers.len() - 1;
        let mut t = vec![TapId(last / 2), TapId(last)];
        t.dedup();
        t
    }

    pub fn tap_dim(&self, tap: TapId) -> Result<usize> {
        self.trunk
            .layers
            .get(tap.0)
            .map(Linear::fan_out)
            .ok_or_else(|| {
                Error::config(format!(
                    "model m{} has no tap {} (taps 0..{})",
                    self.modality_index,
                    tap.0,
                    self.trunk.layers.len()
                ))
            })
    }

    fn trunk_input(&self, g: &mut Graph, xs: &[NodeId]) -> Result<NodeId> {
        if xs.len() != self.input_count() {
            return Err(Error::dim(format!(
                "model m{} takes {} inputs, got {}",
                self.modality_index,
                self.input_count(),
                xs.len()
            )));
        }
        if self.encoders.is_empty() {
            return Ok(xs[0]);
        }
        let feats = self
            .encoders
            .iter()
            .zip(xs)
            .map(|(e, &x)| e.forward(g, x))
            .collect::<Result<Vec<_>>>()?;
        g.concat(&feats)
    }

    fn run_trunk(&self, g: &mut Graph, mut z: NodeId, layers: std::ops::Range<usize>) -> Result<NodeId> {
        for l in &self.trunk.layers[layers] {
            let y = l.forward(g, z)?;
            z = g.relu(y);
        }
        Ok(z)
    }

    pub fn forward(&self, g: &mut Graph, xs: &[NodeId]) -> Result<NodeId> {
        let z = self.trunk_input(g, xs)?;
        let z = self.run_trunk(g, z, 0..self.trunk.layers.len())?;
        self.head.forward(g, z)
    }

    /// Output of trunk layer `tap`.
    pub fn features_at(&self, g: &mut Graph, xs: &[NodeId], tap: TapId) -> Result<NodeId> {
        self.tap_dim(tap)?;
        let z = self.trunk_input(g, xs)?;
        self.run_trunk(g, z, 0..tap.0 + 1)
    }

    /// Continue from a feature at `tap` to logits.
    pub fn forward_from(&self, g: &mut Graph, z: NodeId, tap: TapId) -> Result<NodeId> {
        let d = self.tap_dim(tap)?;
        if g.shape(z).last() != Some(&d) {
            return Err(Error::dim(format!(
                "feature {:?} does not match tap {} width {d}",
                g.shape(z),
                tap.0
            )));
        }
        let z = self.run_trunk(g, z, tap.0 + 1..self.trunk.layers.len())?;
        self.head.forward(g, z)
    }

    /// Rebuild a model from named checkpoint entries.
    pub fn from_named(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut modality: Option<usize> = None;
        let mut enc: BTreeMap<(usize, usize), [Option<Tensor>; 2]> = BTreeMap::new();
        let mut trunk: BTreeMap<usize, [Option<Tensor>; 2]> = BTreeMap::new();
        let mut head: [Option<Tensor>; 2] = [None, None];
        let bad = |n: &str| Error::format(0, format!("unrecognised model parameter `{n}`"));

        for (name, t) in entries {
            let (prefix, rest) = name.split_once('/').ok_or_else(|| bad(&name))?;
            let idx: usize = prefix
                .strip_prefix('m')
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(&name))?;
            if *modality.get_or_insert(idx) != idx {
                return Err(Error::format(0, format!("mixed model prefixes at `{name}`")));
            }
            let (layer, kind) = rest.rsplit_once('/').ok_or_else(|| bad(&name))?;
            let slot = match kind {
                "w" => 0,
                "b" => 1,
                _ => return Err(bad(&name)),
            };
            let target = if layer == "head" {
                &mut head
            } else if let Some(l) = layer.strip_prefix("trunk.") {
                trunk.entry(l.parse().map_err(|_| bad(&name))?).or_default()
            } else if let Some(e) = layer.strip_prefix("enc") {
                let (k, l) = e.split_once('.').ok_or_else(|| bad(&name))?;
                let k = k.parse().map_err(|_| bad(&name))?;
                let l = l.parse().map_err(|_| bad(&name))?;
                enc.entry((k, l)).or_default()
            } else {
                return Err(bad(&name));
            };
            target[slot] = Some(t);
        }

        let modality_index = modality.ok_or_else(|| Error::format(0, "checkpoint has no parameters"))?;
        let take = |name: String, pair: [Option<Tensor>; 2]| -> Result<Linear> {
            match pair {
                [Some(w), Some(b)] => Linear::from_tensors(&name, w, b),
                _ => Err(Error::format(0, format!("layer `{name}` is missing a weight or bias"))),
            }
        };
        let mlp_from = |layers: Vec<Linear>| -> Result<Mlp> {
            for pair in layers.windows(2) {
                if pair[0].fan_out() != pair[1].fan_in() {
                    return Err(Error::format(0, "consecutive layers have mismatched widths"));
                }
            }
            Ok(Mlp { layers })
        };

        let trunk_layers = trunk
            .into_iter()
            .enumerate()
            .map(|(pos, (l, pair))| {
                if pos != l {
                    return Err(Error::format(0, format!("trunk layer {pos} missing")));
                }
                take(format!("m{modality_index}/trunk.{l}"), pair)
            })
            .collect::<Result<Vec<_>>>()?;
        if trunk_layers.is_empty() {
            return Err(Error::format(0, "model has no trunk layers"));
        }
        let mut encoders: Vec<Vec<Linear>> = Vec::new();
        for ((k, l), pair) in enc {
            if k == encoders.len() {
                encoders.push(Vec::new());
            }
            if k + 1 != encoders.len() || l != encoders[k].len() {
                return Err(Error::format(0, format!("encoder {k} layer {l} out of order")));
            }
            encoders[k].push(take(format!("m0/enc{k}.{l}"), pair)?);
        }
        let head = take(format!("m{modality_index}/head"), head)?;
        let model = ModalityModel {
            modality_index,
            encoders: encoders.into_iter().map(mlp_from).collect::<Result<_>>()?,
            trunk: mlp_from(trunk_layers)?,
            head,
        };
        if model.trunk.out_dim() != Some(model.head.fan_in()) {
            return Err(Error::format(0, "head width does not match trunk"));
        }
        if model.is_multimodal() != !model.encoders.is_empty() {
            return Err(Error::format(0, "encoders present only on the fusion model"));
        }
        if model.is_multimodal() {
            let fused: usize = model.encoders.iter().map(|e| e.out_dim().unwrap_or(0)).sum();
            if fused != model.fusion_width() {
                return Err(Error::format(0, "fusion width does not match encoders"));
            }
        }
        Ok(model)
    }
}

impl Module for ModalityModel {
    fn params(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.encoders.iter().flat_map(Module::params).collect();
        v.extend(self.trunk.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> =
            self.encoders.iter_mut().flat_map(Module::params_mut).collect();
        v.extend(self.trunk.params_mut());
        v.extend(self.head.params_mut());
        v
    }
}
