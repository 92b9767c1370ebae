#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use transducer_distill::lattice::{LabelSeq, Lattice, LatticeGrad, Vocab};
use transducer_distill::logspace::log_softmax_in_place;
use transducer_distill::model::{EncoderConfig, FeatureSeq, ModelConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Log-softmax of N(0, scale²) logits at every node.
pub fn random_lattice(rng: &mut impl Rng, frames: usize, label_len: usize, k: usize, scale: f64) -> Lattice {
    let vocab = Vocab::new(k).unwrap();
    Lattice::from_fn(frames, label_len, vocab, |_, _| {
        let mut v: Vec<f64> = (0..=k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                scale * z
            })
            .collect();
        log_softmax_in_place(&mut v);
        v
    })
    .unwrap()
}

pub fn random_labels(rng: &mut impl Rng, len: usize, k: usize) -> LabelSeq {
    LabelSeq::from((0..len).map(|_| rng.random_range(0..k)).collect::<Vec<_>>())
}

/// A random shape with T <= max_t, U <= max_u, K <= max_k.
pub fn random_shape(rng: &mut impl Rng, max_t: usize, max_u: usize, max_k: usize) -> (usize, usize, usize) {
    (
        rng.random_range(1..=max_t),
        rng.random_range(0..=max_u),
        rng.random_range(1..=max_k),
    )
}

/// Normwise relative error `max|n - a| / max(max|a|, floor)`.
pub fn rel_error(numeric: &[f64], analytic: &[f64], floor: f64) -> f64 {
    assert_eq!(numeric.len(), analytic.len());
    let diff = numeric
        .iter()
        .zip(analytic)
        .map(|(n, a)| (n - a).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().map(|a| a.abs()).fold(floor, f64::max);
    diff / scale
}

/// Central differences of `f` with respect to every raw lattice entry.
pub fn lattice_fd(lat: &Lattice, h: f64, f: impl Fn(&Lattice) -> f64) -> Vec<f64> {
    let [t, rows, _] = lat.shape();
    (0..lat.as_slice().len())
        .map(|i| {
            let bump = |d: f64| {
                let mut v = lat.as_slice().to_vec();
                v[i] += d;
                Lattice::from_raw(t, rows - 1, lat.vocab(), v).unwrap()
            };
            (f(&bump(h)) - f(&bump(-h))) / (2.0 * h)
        })
        .collect()
}

pub fn grad_slice(g: &LatticeGrad) -> Vec<f64> {
    g.as_slice().to_vec()
}

/// D=2, H=3, K=3 model used by the gradient and causality checks.
pub fn micro_config(causal: bool, subsample: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 3,
        feature_dim: 2,
        encoder: EncoderConfig {
            causal,
            left_context: 1,
            right_context: if causal { 0 } else { 1 },
            subsample,
            hidden: 3,
        },
        pred_dim: 3,
        joint_dim: 4,
    }
}

pub fn random_features(rng: &mut impl Rng, frames: usize, dim: usize) -> FeatureSeq {
    let data = (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureSeq::new(frames, dim, data).unwrap()
}

use transducer_distill::lattice::{rnnt_loss, rnnt_loss_and_grad};
use transducer_distill::model::{train_step, Optimizer, OptimizerConfig, TransducerModel, UtteranceGrad};

/// Largest per-tensor normwise relative error between the backpropagated
/// gradient of the transducer loss and central differences. Parameters are
/// single precision, so the step actually taken is measured after rounding.
pub fn model_fd_error(m: &TransducerModel, x: &FeatureSeq, y: &LabelSeq) -> f64 {
    let fwd = m.forward(x, y).unwrap();
    let (_, dlat) = rnnt_loss_and_grad(&fwd.lattice, y).unwrap();
    let mut grads = m.zero_grads();
    m.backward(&fwd, &dlat, &mut grads).unwrap();
    let loss = |m: &TransducerModel| rnnt_loss(&m.build_lattice(x, y).unwrap(), y).unwrap();
    let mut worst: f64 = 0.0;
    for ti in 0..m.params().tensors().len() {
        let n = m.params().tensors()[ti].data.len();
        let numeric: Vec<f64> = (0..n)
            .map(|i| {
                let orig = m.params().tensors()[ti].data[i];
                let h = 1e-3f32;
                let mut plus = m.clone();
                let mut minus = m.clone();
                plus.params_mut().tensors_mut()[ti].data[i] = orig + h;
                minus.params_mut().tensors_mut()[ti].data[i] = orig - h;
                let step = (orig + h) as f64 - (orig - h) as f64;
                (loss(&plus) - loss(&minus)) / step
            })
            .collect();
        worst = worst.max(rel_error(&numeric, &grads.buffers()[ti], 1e-8));
    }
    worst
}

/// Trains on one utterance with the transducer loss; returns the loss
/// before each step and after the last.
pub fn overfit(m: &mut TransducerModel, x: &FeatureSeq, y: &LabelSeq, steps: usize, lr: f64) -> Vec<f64> {
    let mut opt = Optimizer::new(OptimizerConfig {
        learning_rate: lr,
        ..OptimizerConfig::default()
    })
    .unwrap();
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let r = train_step(m, &mut opt, &[()], |m, _| {
            let fwd = m.forward(x, y)?;
            let (loss, g) = rnnt_loss_and_grad(&fwd.lattice, y)?;
            Ok(UtteranceGrad {
                utt_id: "u".into(),
                loss,
                lattices: vec![(fwd, g)],
                metrics: (),
            })
        })
        .unwrap();
        losses.push(r.loss);
    }
    losses.push(rnnt_loss(&m.build_lattice(x, y).unwrap(), y).unwrap());
    losses
}
