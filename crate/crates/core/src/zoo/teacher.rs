use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::Module;
use crate::rng;
use crate::tensor::Tensor;

use super::masknet::{MaskNet, MaskNetConfig};
use super::model::{ModalityModel, TapId};

/// Per-modality teacher counts `N_{m_i}` for a chosen target modality.
///
/// Teacher ids `j = 1..=N` are laid out in contiguous blocks by ascending
/// modality index, skipping the target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapLayout {
    /// `counts[i]` for modality `i` in `0..=M`; the target's entry is ignored.
    pub counts: Vec<usize>,
    pub target: usize,
}

impl TapLayout {
    pub fn new(counts: Vec<usize>, target: usize) -> Result<Self> {
        if target == 0 || target >= counts.len() {
            return Err(Error::config(format!(
                "target modality must be in 1..={}, got {target}",
                counts.len().saturating_sub(1)
            )));
        }
        Ok(Self { counts, target })
    }

    pub fn count(&self, modality: usize) -> usize {
        if modality == self.target {
            0
        } else {
            self.counts.get(modality).copied().unwrap_or(0)
        }
    }

    /// `N = Σ_{i≠t} N_{m_i}`.
    pub fn total(&self) -> usize {
        (0..self.counts.len()).map(|i| self.count(i)).sum()
    }

    /// Source modality of teacher `j` (1-based).
    pub fn delta(&self, j: usize) -> Result<usize> {
        let n = self.total();
        if j == 0 || j > n {
            return Err(Error::usage(format!("teacher id {j} outside 1..={n}")));
        }
        let mut cumulative = 0;
        for i in 0..self.counts.len() {
            cumulative += self.count(i);
            if j <= cumulative {
                return Ok(i);
            }
        }
        unreachable!("j <= N guarantees a block")
    }
}

/// A frozen base model with one MaskNet applied at a tapped layer.
#[derive(Debug, Clone)]
pub struct SpecializedTeacher {
    /// 1-based teacher id.
    pub id: usize,
    pub tap: TapId,
    pub masknet: MaskNet,
    base: Arc<ModalityModel>,
}

impl SpecializedTeacher {
    pub fn base(&self) -> &ModalityModel {
        &self.base
    }

    pub fn source(&self) -> usize {
        self.base.modality_index()
    }

    /// `MM@L1`, `CM m2@L0`, ...
    pub fn label(&self) -> String {
        if self.base.is_multimodal() {
            format!("MM@L{}", self.tap.0)
        } else {
            format!("CM m{}@L{}", self.source(), self.tap.0)
        }
    }

    /// Base features at the tap; constant because the base is frozen.
    pub fn tap_features(&self, g: &mut Graph, xs: &[NodeId]) -> Result<NodeId> {
        self.base.features_at(g, xs, self.tap)
    }

    /// Mask the tapped feature, then finish the base forward pass.
    pub fn forward_from_features(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let masked = self.masknet.forward(g, z)?;
        self.base.forward_from(g, masked, self.tap)
    }

    pub fn forward(&self, g: &mut Graph, xs: &[NodeId]) -> Result<NodeId> {
        let z = self.tap_features(g, xs)?;
        self.forward_from_features(g, z)
    }

    /// Forward pass with the MaskNet output replaced by a fixed mask.
    pub fn forward_with_mask(&self, g: &mut Graph, xs: &[NodeId], mask: Tensor) -> Result<NodeId> {
        let z = self.tap_features(g, xs)?;
        let m = g.input(mask);
        let masked = g.mul(z, m)?;
        self.base.forward_from(g, masked, self.tap)
    }
}

/// Wrap `base` as teacher `id` with a fresh MaskNet at `tap`.
pub fn specialize(
    base: &Arc<ModalityModel>,
    id: usize,
    tap: TapId,
    d_h: usize,
    heads: usize,
    rng: &mut impl rand::Rng,
) -> Result<SpecializedTeacher> {
    if base.params().iter().any(|p| !p.frozen) {
        return Err(Error::usage(format!(
            "base model m{} must be frozen before specialization",
            base.modality_index()
        )));
    }
    let cfg = MaskNetConfig::new(base.tap_dim(tap)?, d_h, heads)?;
    Ok(SpecializedTeacher {
        id,
        tap,
        masknet: MaskNet::new(&format!("mn{id}"), cfg, rng)?,
        base: Arc::clone(base),
    })
}

/// Ordered set of specialized teachers for one target modality.
#[derive(Debug, Clone)]
pub struct TeacherRegistry {
    pub layout: TapLayout,
    pub teachers: Vec<SpecializedTeacher>,
}

impl TeacherRegistry {
    /// `bases[i]` is the frozen model of modality `i` (ignored at the target),
    /// `taps[i]` its selected layers. MaskNet `j` draws its initial weights
    /// from the stream `init/masknet{j}` of `seed`.
    pub fn build(
        bases: &[Arc<ModalityModel>],
        taps: &[Vec<TapId>],
        target: usize,
        d_h: usize,
        heads: usize,
        seed: u64,
    ) -> Result<Self> {
        if taps.len() != bases.len() {
            return Err(Error::config(format!(
                "{} tap lists for {} models",
                taps.len(),
                bases.len()
            )));
        }
        let layout = TapLayout::new(taps.iter().map(Vec::len).collect(), target)?;
        let mut teachers = Vec::with_capacity(layout.total());
        for (i, base) in bases.iter().enumerate() {
            if i == target {
                continue;
            }
            if base.modality_index() != i {
                return Err(Error::config(format!(
                    "model at position {i} has modality index {}",
                    base.modality_index()
                )));
            }
            for &tap in &taps[i] {
                let id = teachers.len() + 1;
                let mut r = rng::stream(seed, &format!("init/masknet{id}"));
                teachers.push(specialize(base, id, tap, d_h, heads, &mut r)?);
            }
        }
        if teachers.is_empty() {
            return Err(Error::config("teacher registry is empty"));
        }
        let reg = Self { layout, teachers };
        reg.check()?;
        Ok(reg)
    }

    fn check(&self) -> Result<()> {
        if self.teachers.len() != self.layout.total() {
            return Err(Error::Invariant("teacher count differs from tap layout".into()));
        }
        for t in &self.teachers {
            if self.layout.delta(t.id)? != t.source() {
                return Err(Error::Invariant(format!(
                    "teacher {} sits in the block of modality {} but wraps m{}",
                    t.id,
                    self.layout.delta(t.id)?,
                    t.source()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn delta(&self, j: usize) -> Result<usize> {
        self.layout.delta(j)
    }

    pub fn labels(&self) -> Vec<String> {
        self.teachers.iter().map(SpecializedTeacher::label).collect()
    }
}

/// Indices of the `k` largest entries, by descending value; ties go to the
/// lower index.
pub fn topk_select(row: &[f32], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > row.len() {
        return Err(Error::config(format!(
            "top-k with k = {k} over {} teachers",
            row.len()
        )));
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}
