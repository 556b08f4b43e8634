use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::mean_and_se;
use crate::error::{Error, Result};

/// Scores of one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub dataset: String,
    pub split: usize,
    pub seed: u64,
    /// Context permutations averaged per prediction.
    pub r: usize,
    pub accuracy: f64,
    pub auc_ovo: f64,
    pub order_sensitivity: Option<f64>,
}

/// Per-split rows of one dataset at one `r`, plus their aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub r: usize,
    #[serde(skip)]
    pub splits: Vec<SplitMetrics>,
    pub mean_accuracy: f64,
    pub se_accuracy: f64,
    pub mean_auc_ovo: f64,
    pub se_auc_ovo: f64,
    pub mean_order_sensitivity: Option<f64>,
    pub kl_table: Option<Vec<KlRow>>,
}

impl MetricReport {
    pub fn from_splits(dataset: &str, r: usize, splits: Vec<SplitMetrics>) -> Self {
        let acc: Vec<f64> = splits.iter().map(|s| s.accuracy).collect();
        let auc: Vec<f64> = splits.iter().map(|s| s.auc_ovo).collect();
        let kl: Vec<f64> = splits.iter().filter_map(|s| s.order_sensitivity).collect();
        let (mean_accuracy, se_accuracy) = mean_and_se(&acc);
        let (mean_auc_ovo, se_auc_ovo) = mean_and_se(&auc);
        MetricReport {
            dataset: dataset.to_string(),
            r,
            splits,
            mean_accuracy,
            se_accuracy,
            mean_auc_ovo,
            se_auc_ovo,
            mean_order_sensitivity: (!kl.is_empty()).then(|| mean_and_se(&kl).0),
            kl_table: None,
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.splits.iter().map(|s| s.accuracy).collect()
    }

    /// One row per split of every report:
    /// `dataset,split,seed,r,accuracy,auc_ovo,order_sensitivity`.
    pub fn write_split_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["dataset", "split", "seed", "r", "accuracy", "auc_ovo", "order_sensitivity"])?;
        for s in reports.iter().flat_map(|r| &r.splits) {
            w.write_record([
                s.dataset.clone(),
                s.split.to_string(),
                s.seed.to_string(),
                s.r.to_string(),
                format!("{:e}", s.accuracy),
                format!("{:e}", s.auc_ovo),
                s.order_sensitivity.map(|v| format!("{v:e}")).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_split_csv(path: &Path) -> Result<Vec<SplitMetrics>> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut out = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| rec.get(k).unwrap_or("");
            let bad = |k: usize| Error::Data(format!("{} row {}: bad value `{}` in column {}", path.display(), i + 2, field(k), k + 1));
            let num = |k: usize| field(k).parse::<f64>().map_err(|_| bad(k));
            out.push(SplitMetrics {
                dataset: field(0).to_string(),
                split: field(1).parse().map_err(|_| bad(1))?,
                seed: field(2).parse().map_err(|_| bad(2))?,
                r: field(3).parse().map_err(|_| bad(3))?,
                accuracy: num(4)?,
                auc_ovo: num(5)?,
                order_sensitivity: if field(6).is_empty() { None } else { Some(num(6)?) },
            });
        }
        Ok(out)
    }

    /// Aggregates of every report as a JSON array.
    pub fn write_json(path: &Path, reports: &[MetricReport]) -> Result<()> {
        let text = serde_json::to_string_pretty(reports)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Mean order sensitivity and accuracy at one `r`, with a 95% Student-t
/// interval for the mean KL over the per-split values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub r: usize,
    pub mean_kl: f64,
    pub mean_accuracy: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

pub fn kl_table_row(r: usize, kls: &[f64], accuracies: &[f64]) -> KlRow {
    let (mean_kl, se) = mean_and_se(kls);
    let (mean_accuracy, _) = mean_and_se(accuracies);
    let half = if kls.len() < 2 {
        0.0
    } else {
        let t = StudentsT::new(0.0, 1.0, (kls.len() - 1) as f64).expect("positive degrees of freedom");
        t.inverse_cdf(0.975) * se
    };
    KlRow {
        r,
        mean_kl,
        mean_accuracy,
        ci95_low: mean_kl - half,
        ci95_high: mean_kl + half,
    }
}

/// Columns `r,mean_kl,mean_accuracy,ci95_low,ci95_high`.
pub fn write_kl_table_csv(path: &Path, rows: &[KlRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["r", "mean_kl", "mean_accuracy", "ci95_low", "ci95_high"])?;
    for row in rows {
        w.write_record([
            row.r.to_string(),
            format!("{:e}", row.mean_kl),
            format!("{:e}", row.mean_accuracy),
            format!("{:e}", row.ci95_low),
            format!("{:e}", row.ci95_high),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_kl_table_csv(path: &Path) -> Result<Vec<KlRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<KlRow>, _>>()?)
}
