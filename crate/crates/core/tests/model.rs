mod common;

use common::*;
use proptest::prelude::*;

use transducer_distill::lattice::{LabelSeq, LatticeGrad};
use transducer_distill::model::{
    decode_checkpoint, encode_checkpoint, train_step, Optimizer, OptimizerConfig, TransducerModel,
    UtteranceGrad,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn parameter_gradients_match_finite_differences(
        seed in any::<u64>(),
        causal in any::<bool>(),
        subsample in 1usize..3,
    ) {
        let mut r = rng(seed);
        let m = TransducerModel::new(micro_config(causal, subsample), seed).unwrap();
        let x = random_features(&mut r, 3 * subsample, 2);
        let y = random_labels(&mut r, 2, 3);
        let err = model_fd_error(&m, &x, &y);
        prop_assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn causal_outputs_ignore_later_frames(seed in any::<u64>(), subsample in 1usize..4, frame in 0usize..9) {
        let mut r = rng(seed);
        let m = TransducerModel::new(micro_config(true, subsample), seed).unwrap();
        let x = random_features(&mut r, 9, 2);
        let mut x2 = x.clone();
        x2.frame_mut(frame)[0] += 3.0;
        let (a, b) = (m.encode(&x).unwrap(), m.encode(&x2).unwrap());
        for t in 0..a.frames() {
            if frame >= (t + 1) * subsample {
                prop_assert_eq!(a.state(t), b.state(t));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), causal in any::<bool>(), subsample in 1usize..4) {
        let m = TransducerModel::new(micro_config(causal, subsample), seed).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.config(), m.config());
        for (a, b) in back.params().tensors().iter().zip(m.params().tensors()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }
}

#[test]
fn output_frames_are_ceil_of_subsampling() {
    let mut r = rng(1);
    let x = random_features(&mut r, 5, 2);
    for (s, want) in [(1, 5), (2, 3), (3, 2), (5, 1), (7, 1)] {
        let m = TransducerModel::new(micro_config(false, s), 0).unwrap();
        assert_eq!(m.encode(&x).unwrap().frames(), want);
    }
}

#[test]
fn lattices_are_normalized_and_deterministic() {
    let mut r = rng(2);
    let m = TransducerModel::new(micro_config(false, 1), 3).unwrap();
    let x = random_features(&mut r, 4, 2);
    for y in [LabelSeq::empty(), LabelSeq::from(vec![2, 0, 1])] {
        let a = m.build_lattice(&x, &y).unwrap();
        a.check_normalized(1e-6).unwrap();
        assert_eq!(a.label_len(), y.len());
        let b = m.build_lattice(&x, &y).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn zero_lattice_gradient_leaves_parameters_unchanged() {
    let mut r = rng(3);
    let mut m = TransducerModel::new(micro_config(false, 1), 4).unwrap();
    let before = m.clone();
    let x = random_features(&mut r, 3, 2);
    let y = LabelSeq::from(vec![1]);
    let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
    for _ in 0..3 {
        train_step(&mut m, &mut opt, &[()], |m, _| {
            let fwd = m.forward(&x, &y)?;
            let g = LatticeGrad::zeros_like(&fwd.lattice);
            Ok(UtteranceGrad {
                utt_id: "z".into(),
                loss: 1.0,
                lattices: vec![(fwd, g)],
                metrics: (),
            })
        })
        .unwrap();
    }
    assert_eq!(m.params(), before.params());
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let mut r = rng(4);
    let mut m = TransducerModel::new(micro_config(false, 1), 5).unwrap();
    let before = m.clone();
    let x = random_features(&mut r, 3, 2);
    let y = LabelSeq::from(vec![1]);
    let mut opt = Optimizer::new(OptimizerConfig::default()).unwrap();
    let err = train_step(&mut m, &mut opt, &["good", "bad"], |m, id| {
        let fwd = m.forward(&x, &y)?;
        let g = LatticeGrad::zeros_like(&fwd.lattice);
        Ok(UtteranceGrad {
            utt_id: id.to_string(),
            loss: if *id == "bad" { f64::NAN } else { 1.0 },
            lattices: vec![(fwd, g)],
            metrics: (),
        })
    })
    .unwrap_err();
    assert!(err.to_string().contains("bad"), "{err}");
    assert_eq!(m.params(), before.params());
}

#[test]
fn memorizes_one_utterance() {
    let mut r = rng(5);
    let mut m = TransducerModel::new(micro_config(false, 1), 6).unwrap();
    let x = random_features(&mut r, 3, 2);
    let y = LabelSeq::from(vec![0, 2]);
    let losses = overfit(&mut m, &x, &y, 200, 0.1);
    assert!(*losses.last().unwrap() < 0.1, "{:?}", &losses[190..]);
    assert!(losses.last() < losses.first());
}

#[test]
fn training_is_reproducible() {
    let mut r = rng(6);
    let x = random_features(&mut r, 4, 2);
    let y = LabelSeq::from(vec![1, 1]);
    let run = || {
        let mut m = TransducerModel::new(micro_config(true, 2), 7).unwrap();
        overfit(&mut m, &x, &y, 20, 0.05);
        encode_checkpoint(&m).unwrap()
    };
    assert_eq!(run(), run());
}
