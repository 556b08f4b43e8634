//! Prediction from a labelled context, and Repeated Context Permutations
//! (RCP): predicting under `r` shuffled context orders and averaging the
//! class probabilities.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::PfnModel;
use crate::prior::TabularTask;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::kernels::{pairwise_sum, softmax_in_place};
use crate::tensor::Tensor;

/// Class probabilities for one query row.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDistribution(Vec<f64>);

impl PredictionDistribution {
    /// Checks that entries are non-negative and sum to 1 within `1e-9`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("not a probability distribution: {probs:?}")));
        }
        Ok(PredictionDistribution(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Labelled rows the model conditions on.
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
}

impl Context {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (rows, _) = x.dims2()?;
        if rows != y.len() {
            return Err(Error::shape("Context", x.shape(), &[y.len()]));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Context { x, y, num_classes })
    }

    /// Context rows and query features of a task.
    pub fn from_task(task: &TabularTask) -> (Context, Tensor) {
        let ctx = Context {
            x: task.feature_rows(0, task.context_count),
            y: task.context_targets().to_vec(),
            num_classes: task.num_classes,
        };
        (ctx, task.feature_rows(task.context_count, task.rows()))
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Whether several query rows share one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QueryMode {
    /// All queries appended after the context, masked, in one pass.
    #[default]
    Joint,
    /// One pass per query row.
    OneByOne,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RcpConfig {
    /// Number of context permutations, at least 1.
    pub r: usize,
    pub seed: u64,
    pub mode: QueryMode,
}

impl RcpConfig {
    pub fn new(r: usize, seed: u64) -> Self {
        RcpConfig {
            r,
            seed,
            mode: QueryMode::Joint,
        }
    }
}

fn check_inputs(model: &PfnModel, ctx: &Context, queries: &Tensor) -> Result<usize> {
    let cfg = model.config();
    let (_, qf) = queries.dims2()?;
    let (_, cf) = ctx.x.dims2()?;
    if qf != cf {
        return Err(Error::Data(format!("context has {cf} features but queries have {qf}")));
    }
    if qf > cfg.max_features {
        return Err(Error::Data(format!(
            "{qf} features exceed the model limit of {}",
            cfg.max_features
        )));
    }
    if ctx.num_classes < 1 || ctx.num_classes > cfg.max_classes {
        return Err(Error::Data(format!(
            "{} classes exceed the model limit of {}",
            ctx.num_classes, cfg.max_classes
        )));
    }
    Ok(qf)
}

fn single_pass(model: &PfnModel, ctx: &Context, queries: &Tensor) -> Result<Vec<PredictionDistribution>> {
    let q = queries.shape()[0];
    let mut data = ctx.x.data().to_vec();
    data.extend_from_slice(queries.data());
    let x = Tensor::new([ctx.len() + q, queries.shape()[1]], data)?;
    let mut labels: Vec<Option<usize>> = ctx.y.iter().map(|&c| Some(c)).collect();
    labels.resize(ctx.len() + q, None);
    let logits = model.logits(&x, &labels)?;
    (0..q)
        .map(|i| {
            let mut row = logits.row(i)[..ctx.num_classes].to_vec();
            softmax_in_place(&mut row);
            PredictionDistribution::new(row)
        })
        .collect()
}

/// Class probabilities for every query row, restricted to the context's
/// `num_classes` classes. Queries follow the context in the sequence. An
/// empty context is accepted; the model then predicts from the label
/// prior it learned.
pub fn predict(model: &PfnModel, ctx: &Context, queries: &Tensor, mode: QueryMode) -> Result<Vec<PredictionDistribution>> {
    check_inputs(model, ctx, queries)?;
    match mode {
        QueryMode::Joint => single_pass(model, ctx, queries),
        QueryMode::OneByOne => {
            let f = queries.shape()[1];
            let mut out = Vec::with_capacity(queries.shape()[0]);
            for i in 0..queries.shape()[0] {
                let row = Tensor::new([1, f], queries.row(i).to_vec())?;
                out.extend(single_pass(model, ctx, &row)?);
            }
            Ok(out)
        }
    }
}

/// Predictions for the query rows of a task, in one joint pass.
pub fn predict_task(model: &PfnModel, task: &TabularTask) -> Result<Vec<PredictionDistribution>> {
    let (ctx, queries) = Context::from_task(task);
    predict(model, &ctx, &queries, QueryMode::Joint)
}

/// Uniformly random permutation of the context rows; labels move with
/// their rows.
pub fn shuffle_context(rng: &mut Rng, ctx: &Context) -> Context {
    let mut order: Vec<usize> = (0..ctx.len()).collect();
    order.shuffle(rng);
    let f = ctx.x.shape()[1];
    let mut data = Vec::with_capacity(ctx.x.len());
    for &r in &order {
        data.extend_from_slice(ctx.x.row(r));
    }
    Context {
        x: Tensor::new([ctx.len(), f], data).expect("same size"),
        y: order.iter().map(|&r| ctx.y[r]).collect(),
        num_classes: ctx.num_classes,
    }
}

/// Per-query mean of several prediction sets, using pairwise summation.
pub fn average_predictions(runs: &[Vec<PredictionDistribution>]) -> Result<Vec<PredictionDistribution>> {
    let Some(first) = runs.first() else {
        return Err(Error::Contract("no predictions to average".into()));
    };
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Contract("prediction sets differ in length".into()));
    }
    let n = runs.len() as f64;
    let mut column = Vec::with_capacity(runs.len());
    (0..first.len())
        .map(|q| {
            let classes = first[q].num_classes();
            let probs = (0..classes)
                .map(|c| {
                    column.clear();
                    column.extend(runs.iter().map(|r| r[q].probs()[c]));
                    pairwise_sum(&column) / n
                })
                .collect::<Vec<_>>();
            PredictionDistribution::new(probs)
        })
        .collect()
}

/// Mean prediction over `cfg.r` shuffled contexts. Permutation `i` is drawn
/// from a generator seeded with `derive_seed(cfg.seed, i)`.
pub fn rcp_predict(model: &PfnModel, ctx: &Context, queries: &Tensor, cfg: &RcpConfig) -> Result<Vec<PredictionDistribution>> {
    if cfg.r == 0 {
        return Err(Error::Config("number of permutations r must be at least 1".into()));
    }
    check_inputs(model, ctx, queries)?;
    let runs = (0..cfg.r)
        .map(|i| {
            let shuffled = shuffle_context(&mut rng_from_seed(derive_seed(cfg.seed, i as u64)), ctx);
            predict(model, &shuffled, queries, cfg.mode)
        })
        .collect::<Result<Vec<_>>>()?;
    average_predictions(&runs)
}
