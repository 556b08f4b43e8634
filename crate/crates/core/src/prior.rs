//! Synthetic classification tasks drawn from random tanh networks.
//!
//! A task samples `f` features and `C` classes, draws `X ~ N(0, I)`, scores
//! every row with a freshly initialised network, cuts the scores at their
//! `1/C` quantiles, flips a fraction of labels and shuffles the rows.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, standard_normal, Rng};
use crate::tensor::Tensor;

/// Attempts before [`sample_task`] gives up on representing every class in
/// the context.
pub const MAX_RESAMPLES: usize = 100;

/// How a row is mapped to the scalar score that gets binned into classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreModel {
    /// Random tanh network.
    Network,
    /// The first feature itself.
    FirstFeature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub min_features: usize,
    pub max_features: usize,
    pub min_classes: usize,
    pub max_classes: usize,
    pub rows: usize,
    pub context_rows: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Scale of the network weights relative to `1/√fan_in`.
    pub weight_scale: f64,
    pub label_noise: f64,
    pub score: ScoreModel,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            min_features: 2,
            max_features: 10,
            min_classes: 2,
            max_classes: 4,
            rows: 160,
            context_rows: 128,
            hidden_width: 16,
            hidden_layers: 2,
            weight_scale: 1.0,
            label_noise: 0.05,
            score: ScoreModel::Network,
            seed: 0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.min_features == 0 || self.min_features > self.max_features {
            return bad(format!(
                "feature range [{}, {}] is empty",
                self.min_features, self.max_features
            ));
        }
        if self.min_classes < 2 || self.min_classes > self.max_classes {
            return bad(format!(
                "class range [{}, {}] must lie in [2, ∞)",
                self.min_classes, self.max_classes
            ));
        }
        if self.context_rows == 0 || self.context_rows >= self.rows {
            return bad(format!(
                "context_rows must lie in [1, rows - 1], got {} of {}",
                self.context_rows, self.rows
            ));
        }
        if self.context_rows < self.max_classes {
            return bad(format!(
                "context_rows {} cannot hold {} classes",
                self.context_rows, self.max_classes
            ));
        }
        if self.hidden_width == 0 {
            return bad("hidden_width must be positive".into());
        }
        if !(self.weight_scale.is_finite() && self.weight_scale > 0.0) {
            return bad(format!("weight_scale must be positive, got {}", self.weight_scale));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad(format!("label_noise must lie in [0, 1], got {}", self.label_noise));
        }
        Ok(())
    }
}

/// Features, labels and the context/query split of one task. The first
/// `context_count` rows are context, the rest are queries.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularTask {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
    pub context_count: usize,
}

impl TabularTask {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize, context_count: usize) -> Result<Self> {
        let task = TabularTask {
            x,
            y,
            num_classes,
            context_count,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, _) = self.x.dims2()?;
        if rows != self.y.len() {
            return Err(Error::shape("TabularTask", self.x.shape(), &[self.y.len()]));
        }
        if self.context_count == 0 || self.context_count >= rows {
            return Err(Error::Data(format!(
                "context size {} must lie in [1, {}]",
                self.context_count,
                rows.saturating_sub(1)
            )));
        }
        if let Some(&bad) = self.y.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {} classes", self.num_classes)));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn num_features(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn query_count(&self) -> usize {
        self.rows() - self.context_count
    }

    pub fn context_targets(&self) -> &[usize] {
        &self.y[..self.context_count]
    }

    pub fn query_targets(&self) -> &[usize] {
        &self.y[self.context_count..]
    }

    /// Model input labels: context rows labelled, query rows masked.
    pub fn masked_labels(&self) -> Vec<Option<usize>> {
        (0..self.rows())
            .map(|r| (r < self.context_count).then_some(self.y[r]))
            .collect()
    }

    /// Rows `[from, to)` of the feature matrix.
    pub fn feature_rows(&self, from: usize, to: usize) -> Tensor {
        let f = self.num_features();
        Tensor::new([to - from, f], self.x.data()[from * f..to * f].to_vec()).expect("row range in bounds")
    }

    /// Whether every class `0..num_classes` occurs among the context rows.
    pub fn context_covers_classes(&self) -> bool {
        let mut seen = vec![false; self.num_classes];
        for &c in self.context_targets() {
            seen[c] = true;
        }
        seen.into_iter().all(|s| s)
    }
}

struct ScoreNet {
    layers: Vec<(Tensor, Vec<f64>)>,
}

impl ScoreNet {
    fn sample(rng: &mut Rng, inputs: usize, cfg: &PriorConfig) -> Self {
        let mut widths = vec![inputs];
        widths.extend(std::iter::repeat_n(cfg.hidden_width, cfg.hidden_layers));
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| {
                let scale = cfg.weight_scale / (w[0] as f64).sqrt();
                let weight = Tensor::from_fn([w[0], w[1]], |_| scale * standard_normal(rng));
                let bias = (0..w[1]).map(|_| 0.5 * standard_normal(rng)).collect();
                (weight, bias)
            })
            .collect();
        ScoreNet { layers }
    }

    fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?;
            let n = b.len();
            for (j, v) in h.data_mut().iter_mut().enumerate() {
                *v += b[j % n];
                if i < last {
                    *v = v.tanh();
                }
            }
        }
        Ok(h.into_data())
    }
}

/// Class index of every score when cut at its `1/C` quantiles by rank;
/// equal scores are ordered by row index.
pub fn quantile_bins(scores: &[f64], classes: usize) -> Vec<usize> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut labels = vec![0; n];
    for (rank, &row) in order.iter().enumerate() {
        labels[row] = rank * classes / n;
    }
    labels
}

fn sample_once(rng: &mut Rng, cfg: &PriorConfig) -> Result<TabularTask> {
    let f = rng.gen_range(cfg.min_features..=cfg.max_features);
    let classes = rng.gen_range(cfg.min_classes..=cfg.max_classes);
    let x = Tensor::from_fn([cfg.rows, f], |_| standard_normal(rng));
    let scores = match cfg.score {
        ScoreModel::Network => ScoreNet::sample(rng, f, cfg).scores(&x)?,
        ScoreModel::FirstFeature => (0..cfg.rows).map(|r| x.row(r)[0]).collect(),
    };
    let mut y = quantile_bins(&scores, classes);
    for label in &mut y {
        if rng.gen::<f64>() < cfg.label_noise {
            let other = rng.gen_range(0..classes - 1);
            *label = if other >= *label { other + 1 } else { other };
        }
    }
    let mut order: Vec<usize> = (0..cfg.rows).collect();
    order.shuffle(rng);
    let x = Tensor::from_rows(&order.iter().map(|&r| x.row(r).to_vec()).collect::<Vec<_>>())?;
    let y = order.iter().map(|&r| y[r]).collect();
    TabularTask::new(x, y, classes, cfg.context_rows)
}

/// Draws one task, resampling up to [`MAX_RESAMPLES`] times until the
/// context holds every class.
pub fn sample_task(rng: &mut Rng, cfg: &PriorConfig) -> Result<TabularTask> {
    cfg.validate()?;
    retry(|| {
        let task = sample_once(rng, cfg)?;
        Ok(task.context_covers_classes().then_some(task))
    })
}

fn retry<T>(mut draw: impl FnMut() -> Result<Option<T>>) -> Result<T> {
    for _ in 0..MAX_RESAMPLES {
        if let Some(t) = draw()? {
            return Ok(t);
        }
    }
    Err(Error::ResampleExhausted {
        attempts: MAX_RESAMPLES,
    })
}

/// `batch_size` independent tasks. One parent seed is drawn from `rng`;
/// task `i` uses a generator seeded with `derive_seed(parent, i)`.
pub fn sample_batch(rng: &mut Rng, cfg: &PriorConfig, batch_size: usize) -> Result<Vec<TabularTask>> {
    let parent: u64 = rng.gen();
    (0..batch_size)
        .map(|i| sample_task(&mut rng_from_seed(derive_seed(parent, i as u64)), cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn first_feature(noise: f64) -> PriorConfig {
        PriorConfig {
            min_classes: 2,
            max_classes: 2,
            label_noise: noise,
            score: ScoreModel::FirstFeature,
            ..PriorConfig::default()
        }
    }

    #[test]
    fn first_feature_threshold_at_median() {
        let task = sample_task(&mut rng_from_seed(1), &first_feature(0.0)).unwrap();
        let mut x1: Vec<f64> = (0..task.rows()).map(|r| task.x.row(r)[0]).collect();
        x1.sort_by(f64::total_cmp);
        let median_hi = x1[task.rows() / 2];
        for r in 0..task.rows() {
            assert_eq!(task.y[r], usize::from(task.x.row(r)[0] >= median_hi));
        }
    }

    #[test]
    fn quantile_binning_is_balanced() {
        for classes in 2..=4 {
            let cfg = PriorConfig {
                rows: 10_000,
                context_rows: 9_000,
                min_classes: classes,
                max_classes: classes,
                label_noise: 0.0,
                ..PriorConfig::default()
            };
            let task = sample_task(&mut rng_from_seed(classes as u64), &cfg).unwrap();
            let mut hist = vec![0usize; classes];
            for &c in &task.y {
                hist[c] += 1;
            }
            let expect = 10_000.0 / classes as f64;
            for h in hist {
                assert!((h as f64 - expect).abs() <= 0.05 * expect, "{h} vs {expect}");
            }
        }
    }

    #[test]
    fn label_noise_rate() {
        let cfg = PriorConfig {
            rows: 20_000,
            context_rows: 10_000,
            label_noise: 0.3,
            ..first_feature(0.3)
        };
        let task = sample_task(&mut rng_from_seed(2), &cfg).unwrap();
        let clean = quantile_bins(&(0..task.rows()).map(|r| task.x.row(r)[0]).collect::<Vec<_>>(), 2);
        let flipped = clean.iter().zip(&task.y).filter(|(a, b)| a != b).count();
        let rate = flipped as f64 / task.rows() as f64;
        assert!((rate - 0.3).abs() < 0.02, "{rate}");
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = PriorConfig::default();
        let a = sample_task(&mut rng_from_seed(7), &cfg).unwrap();
        let b = sample_task(&mut rng_from_seed(7), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn batch_of_one_uses_derived_seed() {
        let cfg = PriorConfig::default();
        let batch = sample_batch(&mut rng_from_seed(3), &cfg, 1).unwrap();
        let parent: u64 = rng_from_seed(3).gen();
        let single = sample_task(&mut rng_from_seed(derive_seed(parent, 0)), &cfg).unwrap();
        assert_eq!(batch, vec![single]);
    }

    #[test]
    fn batch_invariants_and_no_collisions() {
        let cfg = PriorConfig::default();
        let batch = sample_batch(&mut rng_from_seed(4), &cfg, 64).unwrap();
        for t in &batch {
            t.validate().unwrap();
            assert!(t.context_covers_classes());
            assert!((cfg.min_features..=cfg.max_features).contains(&t.num_features()));
            assert!((cfg.min_classes..=cfg.max_classes).contains(&t.num_classes));
            assert_eq!(t.context_count, 128);
            assert_eq!(t.query_count(), 32);
        }
        for i in 0..batch.len() {
            for j in i + 1..batch.len() {
                assert_ne!(batch[i].x, batch[j].x);
            }
        }
    }

    #[test]
    fn context_can_miss_a_class() {
        // 5 rows in 4 rank bins: the lone query row is sometimes a singleton class
        let cfg = PriorConfig {
            rows: 5,
            context_rows: 4,
            min_classes: 4,
            max_classes: 4,
            ..first_feature(0.0)
        };
        let misses = (0..50)
            .filter(|&seed| !sample_once(&mut rng_from_seed(seed), &cfg).unwrap().context_covers_classes())
            .count();
        assert!(misses > 0);
        let task = sample_task(&mut rng_from_seed(0), &cfg).unwrap();
        assert!(task.context_covers_classes());
    }

    #[test]
    fn retry_gives_up_after_bound() {
        let mut calls = 0;
        let out: Result<()> = retry(|| {
            calls += 1;
            Ok(None)
        });
        assert!(matches!(out, Err(Error::ResampleExhausted { attempts: MAX_RESAMPLES })));
        assert_eq!(calls, MAX_RESAMPLES);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            PriorConfig { min_features: 0, ..PriorConfig::default() },
            PriorConfig { min_classes: 1, ..PriorConfig::default() },
            PriorConfig { context_rows: 160, ..PriorConfig::default() },
            PriorConfig { label_noise: 1.5, ..PriorConfig::default() },
        ] {
            assert!(matches!(sample_task(&mut rng_from_seed(0), &cfg), Err(Error::Config(_))));
        }
    }
}
