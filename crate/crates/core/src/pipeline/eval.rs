use serde::{Deserialize, Serialize};

use super::common::{argmax, feed, EVAL_CHUNK};
use crate::data::{DatasetBundle, SplitName};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::cross_entropy;
use crate::zoo::ModalityModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    /// `NaN` (serialized as `null`) for classes absent from the split.
    pub per_class_accuracy: Vec<f64>,
    /// Mean cross-entropy at temperature 1.
    pub loss: f64,
}

pub fn evaluate(model: &ModalityModel, data: &DatasetBundle, split: SplitName) -> Result<Metrics> {
    evaluate_rows(model, data, data.split_indices(split)?)
}

pub fn evaluate_rows(model: &ModalityModel, data: &DatasetBundle, idx: &[usize]) -> Result<Metrics> {
    if idx.is_empty() {
        return Err(Error::config("cannot evaluate an empty split"));
    }
    let classes = model.classes();
    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    let mut loss_sum = 0.0f64;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk);
        let mut g = Graph::new();
        let xs = feed(&mut g, model, &batch.inputs);
        let z = model.forward(&mut g, &xs)?;
        let ce = cross_entropy(&mut g, z, &batch.labels)?;
        loss_sum += f64::from(g.value(ce).data()[0]) * chunk.len() as f64;
        let logits = g.value(z);
        for (r, &y) in batch.labels.iter().enumerate() {
            seen[y] += 1;
            if argmax(logits.row(r)) == y {
                hits[y] += 1;
            }
        }
    }
    let total_hits: usize = hits.iter().sum();
    Ok(Metrics {
        overall_accuracy: total_hits as f64 / idx.len() as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&seen)
            .map(|(&h, &n)| if n == 0 { f64::NAN } else { h as f64 / n as f64 })
            .collect(),
        loss: loss_sum / idx.len() as f64,
    })
}
