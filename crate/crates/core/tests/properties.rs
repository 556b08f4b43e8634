use proptest::prelude::*;

use ssm_pfn::data::CsvDataset;
use ssm_pfn::inference::{average_predictions, shuffle_context, Context, PredictionDistribution};
use ssm_pfn::metrics::{make_splits, symmetric_kl};
use ssm_pfn::rng::rng_from_seed;
use ssm_pfn::tensor::Tensor;

fn distribution(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn raw_probs(classes: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, classes)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn averaging_ignores_run_order(runs in prop::collection::vec(prop::collection::vec(raw_probs(3), 4), 1..9), rot in 0usize..8) {
        let runs: Vec<Vec<PredictionDistribution>> = runs
            .iter()
            .map(|r| r.iter().map(|p| PredictionDistribution::new(distribution(p)).unwrap()).collect())
            .collect();
        let mut rotated = runs.clone();
        rotated.rotate_left(rot % runs.len());
        rotated.reverse();
        let a = average_predictions(&runs).unwrap();
        let b = average_predictions(&rotated).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (x, y) in p.probs().iter().zip(q.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shuffling_keeps_rows_with_their_labels(rows in 1usize..30, seed in any::<u64>()) {
        let x = Tensor::from_fn([rows, 2], |i| i as f64);
        let y: Vec<usize> = (0..rows).map(|r| r % 3).collect();
        let ctx = Context::new(x, y, 3).unwrap();
        let s = shuffle_context(&mut rng_from_seed(seed), &ctx);
        let mut before: Vec<(Vec<u64>, usize)> = (0..rows).map(|r| (ctx.x.row(r).iter().map(|v| v.to_bits()).collect(), ctx.y[r])).collect();
        let mut after: Vec<(Vec<u64>, usize)> = (0..rows).map(|r| (s.x.row(r).iter().map(|v| v.to_bits()).collect(), s.y[r])).collect();
        before.sort();
        after.sort();
        prop_assert_eq!(before, after);
        let again = shuffle_context(&mut rng_from_seed(seed), &ctx);
        prop_assert_eq!(again.y, s.y);
    }

    #[test]
    fn symmetric_kl_is_symmetric_and_non_negative(p in raw_probs(4), q in raw_probs(4)) {
        let (p, q) = (distribution(&p), distribution(&q));
        let a = symmetric_kl(&p, &q).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - symmetric_kl(&q, &p).unwrap()).abs() < 1e-15);
        prop_assert!(symmetric_kl(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn splits_partition_the_rows(n in 4usize..200, seed in any::<u64>(), frac in 0.1f64..0.9) {
        let plan = make_splits("d", n, seed, frac).unwrap();
        for s in &plan.splits {
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(!s.train.is_empty() && !s.test.is_empty());
        }
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-500.0f64..500.0, 12)) {
        let t = Tensor::new([3, 4], v).unwrap().softmax(1).unwrap();
        for r in 0..3 {
            prop_assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(t.row(r).iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn flip_and_shift(v in prop::collection::vec(-10.0f64..10.0, 15)) {
        let t = Tensor::new([5, 3], v).unwrap();
        prop_assert_eq!(t.flip_seq().unwrap().flip_seq().unwrap(), t.clone());
        let s = t.shift_seq().unwrap();
        prop_assert!(s.row(0).iter().all(|x| *x == 0.0));
        for r in 1..5 {
            prop_assert_eq!(s.row(r), t.row(r - 1));
        }
    }

    #[test]
    fn csv_round_trip(values in prop::collection::vec(-1e6f64..1e6, 6..30), seed in 0u64..4) {
        let rows = values.len() / 2;
        let dir = tempfile::tempdir().unwrap();
        let d = CsvDataset {
            name: "p".into(),
            feature_names: vec!["a".into(), "b".into()],
            label_column: "label".into(),
            x: Tensor::new([rows, 2], values[..rows * 2].to_vec()).unwrap(),
            // row 0 is class 0, so first-appearance numbering matches
            y: (0..rows).map(|r| usize::from(r % (seed as usize + 2) == 1)).collect(),
            classes: vec!["left".into(), "right".into()],
        };
        let path = dir.path().join("p.csv");
        d.write(&path).unwrap();
        prop_assert_eq!(CsvDataset::load(&path, "label").unwrap(), d);
    }
}
