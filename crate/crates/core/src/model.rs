//! Traits shared by every trainable classifier.

use rayon::prelude::*;

use crate::autodiff::{BackwardFault, HasParams, ParamStore};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn predict(&self, image: &Tensor) -> Result<usize>;
}

/// Loss and predicted class for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOutcome {
    pub loss: f64,
    pub predicted: usize,
}

/// Batch-mean loss and gradients.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub grads: Vec<Tensor>,
}

/// A classifier trained by gradient descent.
pub trait NeuralModel: Classifier + HasParams + Send {
    /// Mean loss and gradient over `batch`, in training mode.
    fn batch_gradient(&mut self, batch: &[&Sample], fault: Option<BackwardFault>) -> Result<BatchResult>;

    /// Loss of one sample in inference mode.
    fn evaluate(&self, sample: &Sample) -> Result<SampleOutcome>;

    /// Non-trainable state persisted alongside parameters.
    fn buffers(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }

    fn load_buffers(&mut self, _blobs: &[(String, Tensor)]) -> Result<()> {
        Ok(())
    }
}

/// Runs `f` over every sample and averages the per-sample gradients.
///
/// Samples are processed in waves of one per worker thread; the running sum
/// is always accumulated in batch order, so the result does not depend on
/// the thread count.
pub fn per_sample_batch<M, F>(model: &M, params: &ParamStore, batch: &[&Sample], f: F) -> Result<BatchResult>
where
    M: Sync,
    F: Fn(&M, &Sample) -> Result<(SampleOutcome, Vec<Tensor>)> + Sync,
{
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(batch.len());
    let wave = rayon::current_num_threads().max(1);
    for chunk in batch.chunks(wave) {
        let results: Vec<Result<(SampleOutcome, Vec<Tensor>)>> = if chunk.len() == 1 {
            vec![f(model, chunk[0])]
        } else {
            chunk.par_iter().map(|s| f(model, s)).collect()
        };
        for r in results {
            let (outcome, grads) = r?;
            loss += outcome.loss;
            predictions.push(outcome.predicted);
            for (acc, g) in total.iter_mut().zip(&grads) {
                acc.add_assign(g)?;
            }
        }
    }
    let inv = 1.0 / batch.len().max(1) as f64;
    for g in &mut total {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    Ok(BatchResult {
        loss: loss * inv,
        predictions,
        grads: total,
    })
}

/// Stacks same-shape sample images into one `N x H x W x C` tensor.
pub fn stack_images(batch: &[&Sample]) -> Result<Tensor> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
        .image
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(batch.len() * batch[0].image.len());
    for s in batch {
        if s.image.shape() != first {
            return Err(Error::shape("batch", format!("{first:?}"), format!("{:?}", s.image.shape())));
        }
        data.extend_from_slice(s.image.data());
    }
    let mut shape = vec![batch.len()];
    shape.extend_from_slice(&first);
    Tensor::new(&shape, data)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::argmax;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
