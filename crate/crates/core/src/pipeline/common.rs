use rand::seq::SliceRandom;

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::Module;
use crate::tensor::{Parameter, Tensor};
use crate::zoo::ModalityModel;

/// Rows processed per graph when no gradient is needed.
pub(crate) const EVAL_CHUNK: usize = 256;

/// Graph inputs of `model` for a batch holding every modality.
pub(crate) fn feed(g: &mut Graph, model: &ModalityModel, inputs: &[Tensor]) -> Vec<NodeId> {
    if model.is_multimodal() {
        inputs.iter().map(|x| g.input(x.clone())).collect()
    } else {
        vec![g.input(inputs[model.modality_index() - 1].clone())]
    }
}

/// One epoch's minibatches: the running order is reshuffled in place so the
/// stream advances identically for every consumer of the same stream.
pub(crate) fn next_epoch(order: &mut [usize], rng: &mut impl rand::Rng, batch: usize) -> Vec<Vec<usize>> {
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
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

pub(crate) fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(logits.row(*r)) == y)
        .count()
}

pub(crate) fn scalar(g: &Graph, id: NodeId) -> f32 {
    g.value(id).data()[0]
}

/// Parameter values for best-checkpoint tracking.
pub(crate) fn snapshot(m: &impl Module) -> Vec<Tensor> {
    m.params()
        .iter()
        .map(|p| Tensor::new(p.shape().to_vec(), p.tensor.data().to_vec()).expect("valid shape"))
        .collect()
}

pub(crate) fn restore(m: &mut impl Module, snap: &[Tensor]) -> Result<()> {
    for (p, t) in m.params_mut().into_iter().zip(snap) {
        p.copy_values_from(t)?;
    }
    Ok(())
}

/// Divergence error naming the first non-finite parameter, if any.
pub(crate) fn check_finite<'a>(
    stage: &str,
    loss: f32,
    params: impl IntoIterator<Item = &'a Parameter>,
) -> Result<()> {
    let bad = params
        .into_iter()
        .find(|p| !p.tensor.all_finite())
        .map(|p| p.name.clone());
    match bad {
        Some(name) => Err(Error::Divergence(format!(
            "{stage}: parameter `{name}` became non-finite (loss {loss})"
        ))),
        None if !loss.is_finite() => Err(Error::Divergence(format!(
            "{stage}: loss is {loss} while all parameters are finite"
        ))),
        None => Ok(()),
    }
}

/// Softened predictions of a frozen model over the rows `idx`.
pub(crate) fn predict_probs(
    model: &ModalityModel,
    data: &DatasetBundle,
    idx: &[usize],
    temperature: f32,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(idx.len() * model.classes());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk);
        let mut g = Graph::new();
        let xs = feed(&mut g, model, &batch.inputs);
        let z = model.forward(&mut g, &xs)?;
        let p = g.softmax(z, temperature)?;
        out.extend_from_slice(g.value(p).data());
    }
    Tensor::new(vec![idx.len(), model.classes()], out)
}

pub(crate) fn all_rows(data: &DatasetBundle) -> Vec<usize> {
    (0..data.samples()).collect()
}

pub(crate) fn require_frozen(what: &str, m: &impl Module) -> Result<()> {
    if let Some(p) = m.params().iter().find(|p| !p.frozen) {
        return Err(Error::usage(format!(
            "{what} must be frozen, but `{}` is trainable",
            p.name
        )));
    }
    Ok(())
}
