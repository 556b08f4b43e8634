//! Evaluation mathematics and the repeated-split protocol.

mod auc;
mod report;
mod wilcoxon;

pub use auc::{auc_ovo, AucReport};
pub use report::{
    kl_table_row, read_kl_table_csv, write_kl_table_csv, KlRow, MetricReport, SplitMetrics,
};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonResult, EXACT_LIMIT};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{rcp_predict, Context, PredictionDistribution, RcpConfig};
use crate::model::PfnModel;
use crate::prior::TabularTask;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::Tensor;

/// Lower clamp applied to both distributions inside [`kl_divergence`].
pub const KL_CLAMP: f64 = 1e-12;

/// Splits per dataset in the evaluation protocol.
pub const NUM_SPLITS: usize = 16;

/// `Σ Pᵢ ln(Pᵢ / Qᵢ)` with `Pᵢ` and `Qᵢ` clamped below at [`KL_CLAMP`]
/// inside the logarithm; entries with `Pᵢ = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Data(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(KL_CLAMP) / qi.max(KL_CLAMP)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// `(KL(P‖Q) + KL(Q‖P)) / 2`.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok((kl_divergence(p, q)? + kl_divergence(q, p)?) / 2.0)
}

/// Fraction of rows whose most probable class equals the target; ties go
/// to the lowest class index.
pub fn accuracy(preds: &[PredictionDistribution], targets: &[usize]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::Data(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Err(Error::Data("accuracy of an empty prediction set".into()));
    }
    let hits = preds.iter().zip(targets).filter(|(p, &t)| p.argmax() == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Query accuracy of always predicting the most frequent context class
/// (lowest index on ties).
pub fn majority_baseline(task: &TabularTask) -> f64 {
    let mut hist = vec![0usize; task.num_classes];
    for &c in task.context_targets() {
        hist[c] += 1;
    }
    let mut best = 0;
    for (c, &h) in hist.iter().enumerate() {
        if h > hist[best] {
            best = c;
        }
    }
    let q = task.query_targets();
    q.iter().filter(|&&y| y == best).count() as f64 / q.len() as f64
}

/// Mean symmetrised KL between two predictions made from independently
/// shuffled contexts, each averaged over `r` permutations, over query rows
/// and `trials`. The two permutation seeds of every trial come from `rng`.
pub fn order_sensitivity(
    model: &PfnModel,
    ctx: &Context,
    queries: &Tensor,
    trials: usize,
    r: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Config("order sensitivity needs at least one trial".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..trials {
        let a = rcp_predict(model, ctx, queries, &RcpConfig::new(r, rng.gen()))?;
        let b = rcp_predict(model, ctx, queries, &RcpConfig::new(r, rng.gen()))?;
        for (p, q) in a.iter().zip(&b) {
            total += symmetric_kl(p.probs(), q.probs())?;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// One train/test partition of a dataset's rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub dataset: String,
    pub train_fraction: f64,
    pub splits: Vec<Split>,
}

/// [`NUM_SPLITS`] random splits with `round(n · train_fraction)` training
/// rows (at least one row on each side). Split `i` shuffles with
/// `derive_seed(seed, i)`; index lists are sorted.
pub fn make_splits(dataset: &str, n_rows: usize, seed: u64, train_fraction: f64) -> Result<SplitPlan> {
    if n_rows < 4 {
        return Err(Error::Data(format!("{dataset}: {n_rows} rows are too few to split (need 4)")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} must lie in (0, 1)")));
    }
    let n_train = ((n_rows as f64 * train_fraction).round() as usize).clamp(1, n_rows - 1);
    let splits = (0..NUM_SPLITS as u64)
        .map(|i| {
            let seed = derive_seed(seed, i);
            let mut order: Vec<usize> = (0..n_rows).collect();
            order.shuffle(&mut rng_from_seed(seed));
            let mut train = order[..n_train].to_vec();
            let mut test = order[n_train..].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            Split { seed, train, test }
        })
        .collect();
    Ok(SplitPlan {
        dataset: dataset.to_string(),
        train_fraction,
        splits,
    })
}

/// Mean and standard error (sample standard deviation over `√n`; zero
/// for fewer than two values).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl AsRef<[f64]> for PredictionDistribution {
    fn as_ref(&self) -> &[f64] {
        self.probs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small;
    use crate::model::BackboneKind;
    use crate::prior::{sample_task, PriorConfig};

    fn dist(v: &[f64]) -> PredictionDistribution {
        PredictionDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn kl_analytic_values() {
        assert_eq!(kl_divergence(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap().is_finite());
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_nonnegative() {
        let mut rng = rng_from_seed(3);
        for _ in 0..1000 {
            let mut draw = || {
                let v: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let (p, q) = (draw(), draw());
            assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn accuracy_rules() {
        let preds = [dist(&[0.7, 0.3]), dist(&[0.2, 0.8])];
        assert_eq!(accuracy(&preds, &[0, 1]).unwrap(), 1.0);
        let uniform = [dist(&[0.5, 0.5]), dist(&[0.5, 0.5])];
        assert_eq!(accuracy(&uniform, &[0, 1]).unwrap(), 0.5);
        assert_eq!(uniform[1].argmax(), 0);
    }

    #[test]
    fn accuracy_matches_hand_loop() {
        let mut rng = rng_from_seed(4);
        let preds: Vec<_> = (0..50)
            .map(|_| {
                let v: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = v.iter().sum();
                dist(&v.iter().map(|x| x / s).collect::<Vec<_>>())
            })
            .collect();
        let targets: Vec<usize> = (0..50).map(|_| rng.gen_range(0..3)).collect();
        let mut hits = 0;
        for (p, &t) in preds.iter().zip(&targets) {
            let v = p.probs();
            let mut best = 0;
            for c in 1..3 {
                if v[c] > v[best] {
                    best = c;
                }
            }
            hits += usize::from(best == t);
        }
        assert_eq!(accuracy(&preds, &targets).unwrap(), hits as f64 / 50.0);
    }

    #[test]
    fn splits_cover_and_reproduce() {
        let plan = make_splits("d", 100, 7, 0.5).unwrap();
        assert_eq!(plan.splits.len(), NUM_SPLITS);
        for s in &plan.splits {
            assert_eq!((s.train.len(), s.test.len()), (50, 50));
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
        }
        assert_eq!(plan, make_splits("d", 100, 7, 0.5).unwrap());
        assert_ne!(plan.splits[0], plan.splits[1]);
        assert!(make_splits("d", 3, 7, 0.5).is_err());
        assert_eq!(make_splits("d", 10, 0, 0.3).unwrap().splits[0].train.len(), 3);
    }

    #[test]
    fn standard_error() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    fn setup(kind: BackboneKind) -> (PfnModel, Context, Tensor) {
        let prior = PriorConfig {
            max_features: 4,
            max_classes: 3,
            rows: 30,
            context_rows: 24,
            ..PriorConfig::default()
        };
        let task = sample_task(&mut rng_from_seed(5), &prior).unwrap();
        let (ctx, q) = Context::from_task(&task);
        (small(kind, 2, 6), ctx, q)
    }

    #[test]
    fn attention_is_order_insensitive() {
        let (m, ctx, q) = setup(BackboneKind::Attention);
        let kl = order_sensitivity(&m, &ctx, &q, 3, 1, &mut rng_from_seed(1)).unwrap();
        assert!(kl < 1e-8, "{kl}");
    }

    #[test]
    fn scan_backbones_are_order_sensitive() {
        for kind in [BackboneKind::Unidirectional, BackboneKind::Bidirectional] {
            let (m, ctx, q) = setup(kind);
            assert!(order_sensitivity(&m, &ctx, &q, 2, 1, &mut rng_from_seed(1)).unwrap() > 0.0);
        }
    }

    #[test]
    fn single_trial_is_one_comparison() {
        let (m, ctx, q) = setup(BackboneKind::Unidirectional);
        let mut rng = rng_from_seed(9);
        let got = order_sensitivity(&m, &ctx, &q, 1, 1, &mut rng).unwrap();
        let mut rng = rng_from_seed(9);
        let (sa, sb): (u64, u64) = (rng.gen(), rng.gen());
        let a = rcp_predict(&m, &ctx, &q, &RcpConfig::new(1, sa)).unwrap();
        let b = rcp_predict(&m, &ctx, &q, &RcpConfig::new(1, sb)).unwrap();
        let expect = a.iter().zip(&b).map(|(p, q)| symmetric_kl(p.probs(), q.probs()).unwrap()).sum::<f64>() / a.len() as f64;
        assert_eq!(got, expect);
    }

    #[test]
    fn majority_baseline_counts() {
        let x = Tensor::zeros([6, 1]);
        let task = TabularTask::new(x, vec![1, 1, 0, 1, 0, 0], 2, 3).unwrap();
        assert_eq!(majority_baseline(&task), 1.0 / 3.0);
    }
}
