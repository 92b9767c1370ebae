use rayon::prelude::*;

use super::{Forward, Gradients, Optimizer, TransducerModel};
use crate::error::{Error, Result};
use crate::lattice::LatticeGrad;

/// What a loss function reports for one utterance: its loss, the gradient
/// with respect to each lattice it evaluated, and caller-defined metrics.
pub struct UtteranceGrad<M> {
    pub utt_id: String,
    pub loss: f64,
    pub lattices: Vec<(Forward, LatticeGrad)>,
    pub metrics: M,
}

#[derive(Debug, Clone)]
pub struct StepResult<M> {
    /// Mean loss over the batch, before the update.
    pub loss: f64,
    pub metrics: Vec<M>,
}

/// One optimizer step on the batch mean of `loss_fn`.
///
/// Utterances are evaluated in parallel; their gradients are summed in
/// batch order, so the update does not depend on the thread count. A
/// non-finite loss or gradient aborts the step before any parameter
/// changes.
pub fn train_step<I, M, F>(
    model: &mut TransducerModel,
    optimizer: &mut Optimizer,
    batch: &[I],
    loss_fn: F,
) -> Result<StepResult<M>>
where
    I: Sync,
    M: Send,
    F: Fn(&TransducerModel, &I) -> Result<UtteranceGrad<M>> + Sync,
{
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let frozen: &TransducerModel = model;
    let results: Vec<Result<(f64, Gradients, M)>> = batch
        .par_iter()
        .map(|item| {
            let out = loss_fn(frozen, item)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    utt_id: out.utt_id,
                    value: out.loss,
                });
            }
            let mut grads = frozen.zero_grads();
            for (fwd, dlat) in &out.lattices {
                frozen.backward(fwd, dlat, &mut grads)?;
            }
            if !grads.norm().is_finite() {
                return Err(Error::NonFiniteGradient {
                    utt_id: out.utt_id,
                });
            }
            Ok((out.loss, grads, out.metrics))
        })
        .collect();

    let mut total = model.zero_grads();
    let mut loss = 0.0;
    let mut metrics = Vec::with_capacity(batch.len());
    for r in results {
        let (l, g, m) = r?;
        loss += l;
        total.add_assign(&g);
        metrics.push(m);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    optimizer.apply(model.params_mut(), &total);
    Ok(StepResult {
        loss: loss / n,
        metrics,
    })
}
