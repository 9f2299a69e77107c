//! Paired multimodal datasets: synthetic generation, splitting and file I/O.

mod format;
mod probe;
mod split;
mod synthetic;

pub use format::{decode_bundle, encode_bundle, load_external, save_bundle, DATA_MAGIC, DATA_VERSION};
pub use probe::linear_probe_accuracy;
pub use split::{split, Splits};
pub use synthetic::{generate, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

/// `M` aligned modality matrices `[samples, dim_i]` with shared labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub modalities: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub splits: Option<Splits>,
}

/// Rows of a bundle gathered for one step.
#[derive(Debug, Clone)]
pub struct Batch {
    /// One tensor per modality, modality `i` at position `i - 1`.
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl DatasetBundle {
    pub fn new(modalities: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if modalities.len() < 2 {
            return Err(Error::config(format!(
                "need at least 2 modalities, got {}",
                modalities.len()
            )));
        }
        for (i, m) in modalities.iter().enumerate() {
            if m.rank() != 2 || m.shape()[0] != labels.len() {
                return Err(Error::dim(format!(
                    "modality {} has shape {:?} for {} labels",
                    i + 1,
                    m.shape(),
                    labels.len()
                )));
            }
        }
        if let Some((s, y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::Data(format!(
                "label {y} of sample {s} is outside [0, {classes})"
            )));
        }
        Ok(Self {
            modalities,
            labels,
            classes,
            splits: None,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.shape()[1]).collect()
    }

    pub fn split_indices(&self, which: SplitName) -> Result<&[usize]> {
        let s = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::config("dataset has not been split"))?;
        Ok(match which {
            SplitName::Train => &s.train,
            SplitName::Val => &s.val,
            SplitName::Test => &s.test,
        })
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.modalities.iter().map(|m| m.select_rows(idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &i in idx {
            c[self.labels[i]] += 1;
        }
        c
    }
}
