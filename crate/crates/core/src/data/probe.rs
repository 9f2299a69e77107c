use rand::seq::SliceRandom;

use super::{DatasetBundle, SplitName};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::cross_entropy;
use crate::nn::{Linear, Module};
use crate::optim::Optimizer;
use crate::rng;

/// Test accuracy of a softmax-regression probe on one modality (1-based),
/// trained on the train split.
pub fn linear_probe_accuracy(bundle: &DatasetBundle, modality: usize, seed: u64) -> Result<f64> {
    if modality == 0 || modality > bundle.num_modalities() {
        return Err(Error::usage(format!("no modality {modality}")));
    }
    let x = &bundle.modalities[modality - 1];
    let dim = x.shape()[1];
    let mut probe = Linear::new("probe", dim, bundle.classes, &mut rng::stream(seed, "probe/init"));
    let mut opt = Optimizer::adam(1e-2);
    let mut order = bundle.split_indices(SplitName::Train)?.to_vec();
    let mut shuffle = rng::stream(seed, "probe/shuffle");
    for _ in 0..40 {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(64) {
            let mut g = Graph::new();
            let xb = g.input(x.select_rows(chunk));
            let labels: Vec<usize> = chunk.iter().map(|&i| bundle.labels[i]).collect();
            let z = probe.forward(&mut g, xb)?;
            let loss = cross_entropy(&mut g, z, &labels)?;
            g.backward(loss)?.apply(probe.params_mut());
            opt.step(probe.params_mut())?;
        }
    }
    let test = bundle.split_indices(SplitName::Test)?;
    let mut g = Graph::new();
    let xb = g.input(x.select_rows(test));
    let z = probe.forward(&mut g, xb)?;
    let logits = g.value(z);
    let correct = test
        .iter()
        .enumerate()
        .filter(|(r, &i)| argmax(logits.row(*r)) == bundle.labels[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
