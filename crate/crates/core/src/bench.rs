//! Forward-pass wall-clock against sequence length, and the log-log slope
//! that summarises how each backbone scales.

use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::mean_and_se;
use crate::model::{BackboneKind, ModelConfig, PfnModel};
use crate::rng::{derive_seed, rng_from_seed, standard_normal};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub backbones: Vec<BackboneKind>,
    /// Sequence lengths, strictly increasing.
    pub rows: Vec<usize>,
    pub features: usize,
    /// Timed forward passes per cell, at least 3.
    pub repetitions: usize,
    /// Untimed passes before timing.
    pub warmups: usize,
    /// Cells whose estimated activation memory exceeds this are recorded
    /// as failures instead of run.
    pub memory_limit_bytes: Option<u64>,
    pub seed: u64,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan {
            backbones: BackboneKind::ALL.to_vec(),
            rows: (5..=13).map(|e| 1usize << e).collect(),
            features: 99,
            repetitions: 10,
            warmups: 2,
            memory_limit_bytes: None,
            seed: 0,
        }
    }
}

impl BenchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() || self.rows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("benchmark rows must be non-empty and strictly increasing".into()));
        }
        if self.rows[0] < 2 {
            return Err(Error::Config("benchmark rows must be at least 2".into()));
        }
        if self.repetitions < 3 {
            return Err(Error::Config(format!("at least 3 repetitions required, got {}", self.repetitions)));
        }
        if self.features == 0 {
            return Err(Error::Config("benchmark feature count must be positive".into()));
        }
        Ok(())
    }

    /// Default-sized model for `kind` that accepts the plan's features.
    pub fn model_config(&self, kind: BackboneKind) -> ModelConfig {
        ModelConfig {
            max_features: self.features,
            seed: self.seed,
            ..ModelConfig::new(kind)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub backbone: BackboneKind,
    pub rows: usize,
    pub mean_s: f64,
    pub se_s: f64,
    /// Rough bytes of live activations plus parameters.
    pub memory_estimate_bytes: u64,
    /// `"ok"` or `"failed:<reason>"`.
    pub status: String,
}

impl BenchCell {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub cells: Vec<BenchCell>,
    /// Threads doing the arithmetic.
    pub threads: usize,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

impl BenchResult {
    pub fn cells_for(&self, kind: BackboneKind) -> impl Iterator<Item = &BenchCell> {
        self.cells.iter().filter(move |c| c.backbone == kind)
    }

    /// Slope over successful cells with `lo ≤ rows ≤ hi`.
    pub fn slope_between(&self, kind: BackboneKind, lo: usize, hi: usize) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .cells_for(kind)
            .filter(|c| c.is_ok() && (lo..=hi).contains(&c.rows))
            .map(|c| (c.rows as f64, c.mean_s))
            .collect();
        loglog_slope(&pts)
    }

    /// Slope over the larger half of the successful sizes.
    pub fn slope(&self, kind: BackboneKind) -> Option<f64> {
        let ok: Vec<usize> = self.cells_for(kind).filter(|c| c.is_ok()).map(|c| c.rows).collect();
        let start = ok.len() / 2;
        let lo = *ok.get(start)?;
        self.slope_between(kind, lo, usize::MAX)
    }

    /// Columns `backbone,rows,mean_s,se_s,status`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["backbone", "rows", "mean_s", "se_s", "status"])?;
        for c in &self.cells {
            w.write_record([
                c.backbone.to_string(),
                c.rows.to_string(),
                format!("{:e}", c.mean_s),
                format!("{:e}", c.se_s),
                c.status.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn memory_estimate(cfg: &ModelConfig, params: usize, rows: usize, features: usize) -> u64 {
    let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
    let mixer = match cfg.backbone {
        // one block of score rows per head at a time
        BackboneKind::Attention => 64 * cfg.num_heads.max(1),
        _ => 2 * cfg.state_dim,
    };
    let per_row = features + cfg.max_features + 10 * e + 3 * h + mixer;
    8 * (rows * per_row + params) as u64
}

fn time_cell(model: &PfnModel, x: &Tensor, labels: &[Option<usize>], plan: &BenchPlan) -> Result<(f64, f64)> {
    for _ in 0..plan.warmups {
        model.logits(x, labels)?;
    }
    let mut times = Vec::with_capacity(plan.repetitions);
    for _ in 0..plan.repetitions {
        let start = Instant::now();
        let out = model.logits(x, labels)?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);
    }
    Ok(mean_and_se(&times))
}

pub fn run_bench(plan: &BenchPlan) -> Result<BenchResult> {
    run_bench_with(plan, |_| {})
}

/// Times one forward pass per (backbone, rows) cell. Three quarters of the
/// rows are labelled context, the rest queries. Errors inside a cell
/// become failure rows.
pub fn run_bench_with(plan: &BenchPlan, mut observe: impl FnMut(&BenchCell)) -> Result<BenchResult> {
    plan.validate()?;
    let mut cells = Vec::new();
    for (bi, &kind) in plan.backbones.iter().enumerate() {
        let cfg = plan.model_config(kind);
        let model = PfnModel::new(cfg.clone())?;
        for &rows in &plan.rows {
            let mut rng = rng_from_seed(derive_seed(derive_seed(plan.seed, bi as u64), rows as u64));
            let x = Tensor::from_fn([rows, plan.features], |_| standard_normal(&mut rng));
            let context = (rows * 3 / 4).max(1);
            let labels: Vec<Option<usize>> = (0..rows)
                .map(|r| (r < context).then(|| rng.gen_range(0..cfg.max_classes)))
                .collect();
            let memory_estimate_bytes = memory_estimate(&cfg, model.params().num_scalars(), rows, plan.features);
            let outcome = match plan.memory_limit_bytes {
                Some(limit) if memory_estimate_bytes > limit => Err(format!(
                    "estimated {memory_estimate_bytes} bytes exceed the {limit} byte limit"
                )),
                _ => time_cell(&model, &x, &labels, plan).map_err(|e| e.to_string()),
            };
            let cell = match outcome {
                Ok((mean_s, se_s)) => BenchCell {
                    backbone: kind,
                    rows,
                    mean_s,
                    se_s,
                    memory_estimate_bytes,
                    status: "ok".into(),
                },
                Err(reason) => BenchCell {
                    backbone: kind,
                    rows,
                    mean_s: f64::NAN,
                    se_s: f64::NAN,
                    memory_estimate_bytes,
                    status: format!("failed:{}", reason.replace(['\n', ','], " ")),
                },
            };
            observe(&cell);
            cells.push(cell);
        }
    }
    Ok(BenchResult { cells, threads: 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let lin: Vec<(f64, f64)> = (5..10).map(|e| (2f64.powi(e), 3.0 * 2f64.powi(e))).collect();
        assert!((loglog_slope(&lin).unwrap() - 1.0).abs() < 1e-12);
        let quad: Vec<(f64, f64)> = (5..10).map(|e| (2f64.powi(e), 2f64.powi(2 * e))).collect();
        assert!((loglog_slope(&quad).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&lin[..1]), None);
    }

    #[test]
    fn default_plan() {
        let p = BenchPlan::default();
        assert_eq!(p.rows.first(), Some(&32));
        assert_eq!(p.rows.last(), Some(&8192));
        assert_eq!((p.features, p.repetitions, p.warmups), (99, 10, 2));
        p.validate().unwrap();
        let bad = BenchPlan { rows: vec![64, 32], ..p.clone() };
        assert!(bad.validate().is_err());
        assert!(BenchPlan { repetitions: 2, ..p }.validate().is_err());
    }

    #[test]
    fn small_run_and_failure_rows() {
        let plan = BenchPlan {
            backbones: vec![BackboneKind::Unidirectional],
            rows: vec![8, 16, 32],
            features: 5,
            repetitions: 3,
            warmups: 0,
            memory_limit_bytes: Some(1),
            seed: 1,
        };
        let r = run_bench(&plan).unwrap();
        assert_eq!(r.cells.len(), 3);
        assert!(r.cells.iter().all(|c| c.status.starts_with("failed:")));
        let ok = run_bench(&BenchPlan { memory_limit_bytes: None, ..plan }).unwrap();
        assert!(ok.cells.iter().all(|c| c.is_ok() && c.mean_s > 0.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        ok.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("backbone,rows,mean_s,se_s,status\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
