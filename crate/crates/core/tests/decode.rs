mod common;

use common::*;
use proptest::prelude::*;

use transducer_distill::decode::{
    beam_search, greedy_decode, lattice_for, pseudo_label, read_pseudo_labels, rescore_nbest,
    write_pseudo_labels, DecodeFailure, ModelScorer, PseudoLabelRecord,
};
use transducer_distill::lattice::brute_force_log_prob;
use transducer_distill::model::TransducerModel;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn nbest_lists_are_sorted_unique_and_bounded(seed in any::<u64>(), beam in 1usize..9) {
        let mut r = rng(seed);
        let m = TransducerModel::new(micro_config(false, 1), seed).unwrap();
        let x = random_features(&mut r, 4, 2);
        let scorer = ModelScorer::new(&m, &x).unwrap();
        let list = beam_search(&scorer, beam, 2).unwrap();
        let h = list.hypotheses();
        prop_assert!(!h.is_empty() && h.len() <= beam);
        prop_assert!(h.windows(2).all(|w| w[0].score >= w[1].score));
        for (i, a) in h.iter().enumerate() {
            prop_assert!(a.score <= 0.0);
            prop_assert!(h[i + 1..].iter().all(|b| b.labels != a.labels));
        }
    }

    #[test]
    fn wider_beams_never_find_worse_best_scores(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = TransducerModel::new(micro_config(true, 1), seed).unwrap();
        let x = random_features(&mut r, 5, 2);
        let scorer = ModelScorer::new(&m, &x).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for beam in 1..=8 {
            let best = beam_search(&scorer, beam, 3).unwrap().best().unwrap().score;
            prop_assert!(best >= prev - 1e-12, "beam {beam}: {best} < {prev}");
            prev = best;
        }
    }

    #[test]
    fn beam_one_is_greedy(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = TransducerModel::new(micro_config(false, 1), seed).unwrap();
        let x = random_features(&mut r, 4, 2);
        let scorer = ModelScorer::new(&m, &x).unwrap();
        let g = greedy_decode(&scorer, 2).unwrap();
        let b = beam_search(&scorer, 1, 2).unwrap();
        prop_assert_eq!(&b.best().unwrap().labels, &g.labels);
    }

    #[test]
    fn rescored_scores_match_enumeration(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = TransducerModel::new(micro_config(false, 1), seed).unwrap();
        let x = random_features(&mut r, 3, 2);
        let scorer = ModelScorer::new(&m, &x).unwrap();
        let list = beam_search(&scorer, 8, 1).unwrap();
        let exact = rescore_nbest(&scorer, &list).unwrap();
        for (h, s) in list.hypotheses().iter().zip(&exact) {
            let lat = lattice_for(&scorer, &h.labels).unwrap();
            let brute = brute_force_log_prob(&lat, &h.labels).unwrap().value();
            prop_assert!((s.value() - brute).abs() < 1e-9);
            // The model's own lattice along the hypothesis agrees.
            let direct = m.build_lattice(&x, &h.labels).unwrap();
            prop_assert!((brute_force_log_prob(&direct, &h.labels).unwrap().value() - brute).abs() < 1e-9);
        }
    }

    #[test]
    fn pseudo_label_files_round_trip_exactly(seed in any::<u64>(), nbest in 1usize..5) {
        let mut r = rng(seed);
        let m = TransducerModel::new(micro_config(false, 1), seed).unwrap();
        let mut records: Vec<PseudoLabelRecord> = (0..3)
            .map(|i| {
                let x = random_features(&mut r, 4, 2);
                PseudoLabelRecord::Labeled(pseudo_label(&m, &format!("u{i}"), &x, 4, nbest).unwrap())
            })
            .collect();
        records.push(PseudoLabelRecord::Failed(DecodeFailure {
            utt_id: "u3".into(),
            error: "no frames".into(),
        }));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_pseudo_labels(&path, &records).unwrap();
        let back = read_pseudo_labels(&path).unwrap();
        prop_assert_eq!(&back, &records);
        let path2 = dir.path().join("q.jsonl");
        write_pseudo_labels(&path2, &back).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}

#[test]
fn pseudo_label_scores_are_exact_full_sum() {
    let mut r = rng(9);
    let m = TransducerModel::new(micro_config(false, 1), 9).unwrap();
    let x = random_features(&mut r, 4, 2);
    let p = pseudo_label(&m, "u", &x, 8, 4).unwrap();
    assert_eq!(p.labels, p.nbest[0].labels);
    assert_eq!(p.score, p.nbest[0].score);
    for e in &p.nbest {
        let lat = m.build_lattice(&x, &e.labels).unwrap();
        let exact = brute_force_log_prob(&lat, &e.labels).unwrap().value();
        assert!((e.score - exact).abs() < 1e-9);
    }
    assert!(pseudo_label(&m, "u", &x, 2, 3).is_err());
}
