//! The operations behind each command-line subcommand. Every command reads
//! a [`RunConfig`], writes its artifacts under `out_dir`, and returns what
//! it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bench::{run_bench_with, BenchCell, BenchResult};
use crate::config::RunConfig;
use crate::data::CsvDataset;
use crate::error::{Error, Result};
use crate::inference::{rcp_predict, Context, PredictionDistribution, RcpConfig};
use crate::metrics::{
    accuracy, auc_ovo, kl_table_row, make_splits, order_sensitivity, wilcoxon_signed_rank, write_kl_table_csv, KlRow,
    MetricReport, Split, SplitMetrics, WilcoxonResult,
};
use crate::model::PfnModel;
use crate::prior::sample_task;
use crate::rng::{derive_seed, rng_from_seed};
use crate::training::{meta_train_with, write_curve_csv, Checkpoint, CurvePoint, TrainReport};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CURVE_FILE: &str = "loss_curve.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const SPLITS_FILE: &str = "evaluation_splits.csv";
pub const REPORT_FILE: &str = "evaluation.json";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn load_model(path: &Path) -> Result<PfnModel> {
    Ok(Checkpoint::load(path)?.into_model()?.0)
}

fn checkpoint_arg<'a>(cfg: &'a RunConfig, explicit: Option<&'a Path>) -> Result<&'a Path> {
    explicit
        .or(cfg.checkpoint.as_deref())
        .ok_or_else(|| Error::Config("a checkpoint is required (--checkpoint or `checkpoint =`)".into()))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
    pub report: TrainReport,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cmd_train_with(cfg, |_| {})
}

/// Meta-trains a fresh model. The checkpoint holds the parameters with the
/// best validation accuracy.
pub fn cmd_train_with(cfg: &RunConfig, observe: impl FnMut(&CurvePoint)) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let checkpoint = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
    let resolved = cfg.out_dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, cfg.to_text()).map_err(|e| Error::io(&resolved, e))?;
    let mut model = PfnModel::new(cfg.model.clone())?;
    let mut train = cfg.train.clone();
    train.checkpoint_path = Some(checkpoint.clone());
    let report = meta_train_with(&mut model, &cfg.prior, &train, observe)?;
    if report.best_step == 0 {
        Checkpoint::from_model(&model, 0, train.seed, Some(&report.optimizer)).save(&checkpoint)?;
    }
    let curve = cfg.out_dir.join(CURVE_FILE);
    write_curve_csv(&curve, &report.curve)?;
    Ok(TrainOutcome { checkpoint, curve, report })
}

/// Datasets the model cannot take, with the reason.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Skipped {
    pub dataset: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub dataset: String,
    pub r: usize,
    pub result: WilcoxonResult,
}

#[derive(Debug)]
pub struct EvaluateOutcome {
    pub reports: Vec<MetricReport>,
    pub skipped: Vec<Skipped>,
    pub comparisons: Vec<Comparison>,
}

fn limit_violation(model: &PfnModel, d: &CsvDataset) -> Option<String> {
    let c = model.config();
    if d.num_features() > c.max_features {
        Some(format!("{} features exceed the model limit of {}", d.num_features(), c.max_features))
    } else if d.num_classes() > c.max_classes {
        Some(format!("{} classes exceed the model limit of {}", d.num_classes(), c.max_classes))
    } else if d.num_classes() < 2 {
        Some("fewer than 2 classes".into())
    } else if d.rows() < 4 {
        Some(format!("{} rows are too few to split", d.rows()))
    } else {
        None
    }
}

fn split_task(d: &CsvDataset, split: &Split) -> Result<(Context, Vec<f64>, Vec<usize>)> {
    let (xc, yc) = d.subset(&split.train)?;
    let (xq, yq) = d.subset(&split.test)?;
    Ok((Context::new(xc, yc, d.num_classes())?, xq.into_data(), yq))
}

fn evaluate_split(
    model: &PfnModel,
    cfg: &RunConfig,
    d: &CsvDataset,
    index: usize,
    split: &Split,
    r: usize,
) -> Result<SplitMetrics> {
    let (ctx, xq, yq) = split_task(d, split)?;
    let queries = crate::tensor::Tensor::new([yq.len(), d.num_features()], xq)?;
    let rcp = RcpConfig { r, seed: split.seed, mode: cfg.rcp.mode };
    let preds = rcp_predict(model, &ctx, &queries, &rcp)?;
    let auc = auc_ovo(&preds, &yq).map_or(f64::NAN, |a| a.auc);
    let sensitivity = if cfg.data.order_sensitivity {
        let mut rng = rng_from_seed(derive_seed(split.seed, r as u64));
        Some(order_sensitivity(model, &ctx, &queries, cfg.rcp.trials, r, &mut rng)?)
    } else {
        None
    };
    Ok(SplitMetrics {
        dataset: d.name.clone(),
        split: index,
        seed: split.seed,
        r,
        accuracy: accuracy(&preds, &yq)?,
        auc_ovo: auc,
        order_sensitivity: sensitivity,
    })
}

fn evaluate_dataset(model: &PfnModel, cfg: &RunConfig, d: &CsvDataset, r: usize) -> Result<MetricReport> {
    let plan = make_splits(&d.name, d.rows(), cfg.seed, cfg.data.train_fraction)?;
    let splits = plan
        .splits
        .iter()
        .enumerate()
        .map(|(i, s)| evaluate_split(model, cfg, d, i, s, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_splits(&d.name, r, splits))
}

/// Scores a checkpoint on every configured dataset over the standard
/// splits, for each evaluated `r`. With `compare_checkpoint` set, the
/// second model is scored on the same splits and the per-split accuracies
/// of the pair are compared with the Wilcoxon signed-rank test.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvaluateOutcome> {
    cfg.validate()?;
    if cfg.data.datasets.is_empty() {
        return Err(Error::Config("no datasets configured (`datasets =` in [data])".into()));
    }
    let model = load_model(checkpoint_arg(cfg, checkpoint)?)?;
    let other = cfg.data.compare_checkpoint.as_deref().map(load_model).transpose()?;
    ensure_dir(&cfg.out_dir)?;
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    let mut comparisons = Vec::new();
    for path in &cfg.data.datasets {
        let d = CsvDataset::load(path, &cfg.data.label_column)?;
        let violation = limit_violation(&model, &d).or_else(|| other.as_ref().and_then(|m| limit_violation(m, &d)));
        if let Some(reason) = violation {
            skipped.push(Skipped { dataset: d.name.clone(), reason });
            continue;
        }
        for r in cfg.rcp.eval_r_values() {
            let report = evaluate_dataset(&model, cfg, &d, r)?;
            if let Some(m) = &other {
                let theirs = evaluate_dataset(m, cfg, &d, r)?;
                comparisons.push(Comparison {
                    dataset: d.name.clone(),
                    r,
                    result: wilcoxon_signed_rank(&report.accuracies(), &theirs.accuracies())?,
                });
            }
            reports.push(report);
        }
    }
    MetricReport::write_split_csv(&cfg.out_dir.join(SPLITS_FILE), &reports)?;
    let json = serde_json::json!({ "reports": reports, "skipped": skipped, "comparisons": comparisons });
    let path = cfg.out_dir.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&json)? + "\n").map_err(|e| Error::io(&path, e))?;
    if !comparisons.is_empty() {
        let path = cfg.out_dir.join(COMPARISON_FILE);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["dataset", "r", "w_plus", "n", "exact", "p_value"])?;
        for c in &comparisons {
            w.write_record([
                c.dataset.clone(),
                c.r.to_string(),
                c.result.w_plus.to_string(),
                c.result.n.to_string(),
                c.result.exact.to_string(),
                format!("{:e}", c.result.p_value),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(EvaluateOutcome { reports, skipped, comparisons })
}

/// One KL-versus-`r` table and the file it was written to.
#[derive(Debug)]
pub struct KlTable {
    pub name: String,
    pub path: PathBuf,
    pub rows: Vec<KlRow>,
}

fn kl_rows<U>(
    model: &PfnModel,
    cfg: &RunConfig,
    units: &[U],
    unit: impl Fn(&U) -> Result<(Context, crate::tensor::Tensor, Vec<usize>, u64)>,
) -> Result<Vec<KlRow>> {
    let mut rows = Vec::new();
    for &r in &cfg.rcp.r_values {
        let mut kls = Vec::with_capacity(units.len());
        let mut accs = Vec::with_capacity(units.len());
        for u in units {
            let (ctx, queries, targets, seed) = unit(u)?;
            let mut rng = rng_from_seed(derive_seed(seed, r as u64));
            kls.push(order_sensitivity(model, &ctx, &queries, cfg.rcp.trials, r, &mut rng)?);
            let rcp = RcpConfig { r, seed, mode: cfg.rcp.mode };
            accs.push(accuracy(&rcp_predict(model, &ctx, &queries, &rcp)?, &targets)?);
        }
        rows.push(kl_table_row(r, &kls, &accs));
    }
    Ok(rows)
}

/// Order sensitivity and accuracy for every `r` in `r_values`. Units are
/// the standard splits of each configured dataset, or `tasks` fresh prior
/// tasks when no dataset is given. Without a checkpoint the model is
/// freshly initialised from the configuration.
pub fn cmd_order_sensitivity(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<KlTable>> {
    cfg.validate()?;
    let model = match checkpoint.or(cfg.checkpoint.as_deref()) {
        Some(p) => load_model(p)?,
        None => PfnModel::new(cfg.model.clone())?,
    };
    ensure_dir(&cfg.out_dir)?;
    let mut tables = Vec::new();
    if cfg.data.datasets.is_empty() {
        let tasks = (0..cfg.rcp.tasks as u64)
            .map(|i| sample_task(&mut rng_from_seed(derive_seed(derive_seed(cfg.prior.seed, 0x6b6c), i)), &cfg.prior))
            .collect::<Result<Vec<_>>>()?;
        let rows = kl_rows(&model, cfg, &tasks, |t| {
            let (ctx, q) = Context::from_task(t);
            Ok((ctx, q, t.query_targets().to_vec(), derive_seed(cfg.seed, t.rows() as u64)))
        })?;
        let path = cfg.out_dir.join("order_sensitivity.csv");
        write_kl_table_csv(&path, &rows)?;
        tables.push(KlTable { name: "prior".into(), path, rows });
    }
    for p in &cfg.data.datasets {
        let d = CsvDataset::load(p, &cfg.data.label_column)?;
        if let Some(reason) = limit_violation(&model, &d) {
            return Err(Error::Data(format!("{}: {reason}", d.name)));
        }
        let plan = make_splits(&d.name, d.rows(), cfg.seed, cfg.data.train_fraction)?;
        let rows = kl_rows(&model, cfg, &plan.splits, |s| {
            let (ctx, xq, yq) = split_task(&d, s)?;
            let q = crate::tensor::Tensor::new([yq.len(), d.num_features()], xq)?;
            Ok((ctx, q, yq, s.seed))
        })?;
        let path = cfg.out_dir.join(format!("order_sensitivity_{}.csv", d.name));
        write_kl_table_csv(&path, &rows)?;
        tables.push(KlTable { name: d.name.clone(), path, rows });
    }
    Ok(tables)
}

pub fn cmd_bench(cfg: &RunConfig, observe: impl FnMut(&BenchCell)) -> Result<(BenchResult, PathBuf)> {
    cfg.validate()?;
    ensure_dir(&cfg.out_dir)?;
    let result = run_bench_with(&cfg.bench, observe)?;
    let path = cfg.out_dir.join(BENCH_FILE);
    result.write_csv(&path)?;
    Ok((result, path))
}

/// Predicts class probabilities for every row of `queries` given the
/// labelled rows of `context`, averaging over `rcp.r` permutations.
/// Writes `row,p_<class>...,predicted`.
pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    context: &Path,
    queries: &Path,
) -> Result<(Vec<PredictionDistribution>, PathBuf)> {
    cfg.validate()?;
    let model = load_model(checkpoint_arg(cfg, checkpoint)?)?;
    let d = CsvDataset::load(context, &cfg.data.label_column)?;
    let limits = model.config();
    if d.num_features() > limits.max_features || d.num_classes() > limits.max_classes {
        return Err(Error::Data(format!(
            "{}: {} features and {} classes exceed the model limits of {} and {}",
            d.name,
            d.num_features(),
            d.num_classes(),
            limits.max_features,
            limits.max_classes
        )));
    }
    let xq = CsvDataset::load_queries(queries, &d.feature_names)?;
    let ctx = Context::new(d.x.clone(), d.y.clone(), d.num_classes())?;
    let rcp = RcpConfig { r: cfg.rcp.r, seed: cfg.seed, mode: cfg.rcp.mode };
    let preds = rcp_predict(&model, &ctx, &xq, &rcp)?;
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(PREDICTIONS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["row".to_string()];
    header.extend(d.classes.iter().map(|c| format!("p_{c}")));
    header.push("predicted".into());
    w.write_record(&header)?;
    for (i, p) in preds.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(p.probs().iter().map(|v| format!("{v:e}")));
        rec.push(d.classes[p.argmax()].clone());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok((preds, path))
}
