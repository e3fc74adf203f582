mod common;

use std::collections::{BTreeMap, HashSet};

use common::{eer_oracle, monotone_map, random_scores, renyi_oracle, renyi_value};
use finder_core::data::{stratified_kfold, FeatureBank};
use finder_core::losses::{RdNormalization, RenyiParams};
use finder_core::metrics::{accuracy, binary_eer, confusion_matrix, one_vs_all_eer, ScoreSet};
use finder_core::nn::{ConvBlock, Model, ModelConfig};
use finder_core::tensor::{Padding, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-4.0f64..4.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    (1usize..4, 2usize..12).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn divergence_of_normalized_inputs_is_nonnegative((a, b) in pair(), alpha in 1.01f64..6.0, eps in 0.0f64..0.5) {
        let p = RenyiParams { alpha, epsilon: eps, lambda: 0.4 };
        let d = renyi_value(&a, &b, &p, RdNormalization::Softmax);
        prop_assert!(d >= -1e-12, "D = {d}");
    }

    #[test]
    fn self_divergence_vanishes_without_stabilizer(a in (1usize..4, 2usize..12).prop_flat_map(|(r, c)| matrix(r, c)), alpha in 1.01f64..6.0) {
        let p = RenyiParams { alpha, epsilon: 0.0, lambda: 0.4 };
        prop_assert!(renyi_value(&a, &a, &p, RdNormalization::Softmax).abs() < 1e-12);
    }

    #[test]
    fn divergence_matches_direct_formula((a, b) in pair(), alpha in 1.01f64..6.0, eps in 0.01f64..0.5, softmax in any::<bool>()) {
        let norm = if softmax { RdNormalization::Softmax } else { RdNormalization::ReluEps };
        let p = RenyiParams { alpha, epsilon: eps, lambda: 0.4 };
        let cols = a.shape()[1];
        let expected = renyi_oracle(a.data(), b.data(), cols, alpha, eps, norm);
        let got = renyi_value(&a, &b, &p, norm);
        prop_assert!((got - expected).abs() <= 1e-9 * expected.abs().max(1.0), "{got} vs {expected}");
    }

    #[test]
    fn eer_matches_brute_force_and_is_rank_invariant(
        pos in prop::collection::vec(-3.0f64..3.0, 1..40),
        neg in prop::collection::vec(-3.0f64..3.0, 1..40),
        seed in any::<u64>(),
    ) {
        let e = binary_eer(&pos, &neg).unwrap();
        prop_assert!((e.eer - eer_oracle(&pos, &neg)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&e.eer));
        let f = monotone_map(&mut ChaCha8Rng::seed_from_u64(seed));
        let pos2: Vec<f64> = pos.iter().map(|&x| f(x)).collect();
        let neg2: Vec<f64> = neg.iter().map(|&x| f(x)).collect();
        prop_assert_eq!(binary_eer(&pos2, &neg2).unwrap().eer, e.eer);
    }

    #[test]
    fn separable_scores_have_zero_eer(
        pos in prop::collection::vec(0.51f64..1.0, 1..30),
        neg in prop::collection::vec(0.0f64..0.5, 1..30),
    ) {
        prop_assert_eq!(binary_eer(&pos, &neg).unwrap().eer, 0.0);
    }

    #[test]
    fn accuracy_agrees_with_confusion_trace(seed in any::<u64>(), n in 1usize..80, c in 2usize..6, q in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (probs, labels) = random_scores(&mut rng, n, c, q);
        let s = ScoreSet::new(probs, labels.clone(), (0..c).map(|i| i.to_string()).collect()).unwrap();
        let m = confusion_matrix(&s).unwrap();
        let trace: u64 = (0..c).map(|i| m[i][i]).sum();
        prop_assert_eq!(accuracy(&s).unwrap(), trace as f64 / n as f64);
        for (k, row) in m.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<u64>() as usize, labels.iter().filter(|&&l| l == k).count());
        }
        let ova = one_vs_all_eer(&s).unwrap();
        let defined: Vec<f64> = ova.per_class.iter().flatten().copied().collect();
        if !defined.is_empty() {
            prop_assert!((ova.mean - defined.iter().sum::<f64>() / defined.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn kfold_partitions_and_stratifies(counts in prop::collection::vec(5usize..30, 2..5), k in 2usize..6, seed in any::<u64>()) {
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                ids.push(format!("c{c}_{i:03}"));
                labels.push(c as u16);
            }
        }
        let names: Vec<String> = (0..counts.len()).map(|c| format!("A{c}")).collect();
        let folds = stratified_kfold(&ids, &labels, &names, k, seed, 0.1).unwrap();
        prop_assert_eq!(folds.len(), k);
        let label_of: BTreeMap<&str, u16> = ids.iter().map(String::as_str).zip(labels.iter().copied()).collect();
        let mut tested = HashSet::new();
        for f in &folds {
            f.validate().unwrap();
            prop_assert_eq!(f.train_ids.len() + f.val_ids.len() + f.test_ids.len(), ids.len());
            for id in &f.test_ids {
                prop_assert!(tested.insert(id.clone()), "{} tested twice", id);
            }
            for (c, &n) in counts.iter().enumerate() {
                let in_test = f.test_ids.iter().filter(|id| label_of[id.as_str()] == c as u16).count();
                prop_assert!(in_test == n / k || in_test == n.div_ceil(k), "class {} got {} of {}", c, in_test, n);
            }
        }
        prop_assert_eq!(tested.len(), ids.len());
    }

    #[test]
    fn conv_and_pool_shape_algebra(l in 8usize..1024, k in prop::sample::select(vec![3usize, 5]), p in prop::sample::select(vec![2usize, 4])) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, l]));
        let w = tape.constant(Tensor::zeros(&[3, 2, k]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let same = tape.conv1d(x, w, b, Padding::Same).unwrap();
        prop_assert_eq!(tape.shape(same), &[1, 3, l]);
        let valid = tape.conv1d(x, w, b, Padding::Valid).unwrap();
        prop_assert_eq!(tape.shape(valid), &[1, 3, l - k + 1]);
        let pooled = tape.maxpool1d(same, p).unwrap();
        prop_assert_eq!(tape.shape(pooled), &[1, 3, l / p]);
    }

    #[test]
    fn cnn_flatten_width(d in 16usize..300, f in 1usize..6, p1 in prop::sample::select(vec![2usize, 4]), p2 in prop::sample::select(vec![2usize, 4])) {
        let cfg = ModelConfig {
            conv_blocks: vec![ConvBlock::new(3, 3, p1), ConvBlock::new(f, 5, p2)],
            dense_units: vec![7],
            ..ModelConfig::new("cnn", vec![d], 3)
        };
        let m = Model::<f32>::build(&cfg, 0).unwrap();
        let flat = m.parameter("dense0.weight").unwrap().shape()[0];
        prop_assert_eq!(flat, f * ((d / p1) / p2));
    }

    #[test]
    fn bank_roundtrip(n in 0usize..20, dim in 1usize..16, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = (0..n).map(|i| format!("id{i}")).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..5u16)).collect();
        let data = (0..n * dim).map(|_| rng.gen::<f32>()).collect();
        let bank = FeatureBank::new("rep", ids, labels, Tensor::new(vec![n, dim], data).unwrap()).unwrap();
        prop_assert_eq!(FeatureBank::from_bytes(&bank.to_bytes()).unwrap(), bank);
    }
}
