use super::params::{BoundParams, Init, ParamId};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Row tokens plus the positions of the masked (query) rows.
#[derive(Debug)]
pub struct TokenSequence<'t> {
    /// `[L, embed_dim]`, token `t` is row `t`.
    pub tokens: Var<'t>,
    pub query_rows: Vec<usize>,
}

/// Feature projection and label-embedding table.
///
/// The table has `max_classes + 1` rows: row 0 is the mask label, row
/// `k + 1` is class `k`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub(crate) feature_weight: ParamId,
    pub(crate) feature_bias: ParamId,
    pub(crate) labels: ParamId,
}

/// Z-normalises every column with the mean and standard deviation of the
/// context rows (those with `Some` label) and zero-pads to `max_features`
/// columns. Columns with zero context variance become zeros. With no
/// context rows the features pass through unnormalised.
pub fn normalize_features(x: &Tensor, labels: &[Option<usize>], max_features: usize) -> Result<Tensor> {
    let (rows, f) = x.dims2()?;
    if rows != labels.len() {
        return Err(Error::shape("embed_rows", x.shape(), &[labels.len()]));
    }
    if f > max_features {
        return Err(Error::Data(format!(
            "{f} features exceed the model limit of {max_features}"
        )));
    }
    let context: Vec<usize> = (0..rows).filter(|&r| labels[r].is_some()).collect();
    let mut out = vec![0.0; rows * max_features];
    for col in 0..f {
        let (mean, scale) = if context.is_empty() {
            (0.0, 1.0)
        } else {
            let n = context.len() as f64;
            let mean = context.iter().map(|&r| x.row(r)[col]).sum::<f64>() / n;
            let var = context.iter().map(|&r| (x.row(r)[col] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 1e-12 * mean.abs().max(1.0) { 1.0 / sd } else { 0.0 })
        };
        for r in 0..rows {
            out[r * max_features + col] = (x.row(r)[col] - mean) * scale;
        }
    }
    Tensor::new([rows, max_features], out)
}

impl Embedding {
    pub(crate) fn new(init: &mut Init<'_>, cfg: &ModelConfig) -> Self {
        Embedding {
            feature_weight: init.linear("embed.features.weight", cfg.max_features, cfg.embed_dim),
            feature_bias: init.constant("embed.features.bias", &[cfg.embed_dim], 0.0),
            labels: init.uniform("embed.labels", &[cfg.max_classes + 1, cfg.embed_dim], 1.0),
        }
    }

    /// Token of row `t` = normalised features · W + b + label_table[label(t)].
    pub fn embed_rows<'t>(
        &self,
        p: &BoundParams<'t>,
        x: &Tensor,
        labels: &[Option<usize>],
        cfg: &ModelConfig,
    ) -> Result<TokenSequence<'t>> {
        let feats = normalize_features(x, labels, cfg.max_features)?;
        let mut index = Vec::with_capacity(labels.len());
        let mut query_rows = Vec::new();
        for (r, label) in labels.iter().enumerate() {
            match *label {
                None => {
                    index.push(0);
                    query_rows.push(r);
                }
                Some(k) if k < cfg.max_classes => index.push(k + 1),
                Some(k) => {
                    return Err(Error::Data(format!(
                        "label {k} out of range for {} classes",
                        cfg.max_classes
                    )))
                }
            }
        }
        let tape = p.get(self.feature_weight).tape();
        let projected = tape
            .constant(feats)
            .linear(p.get(self.feature_weight), Some(p.get(self.feature_bias)))?;
        let label_tokens = p.get(self.labels).index_rows(&index)?;
        Ok(TokenSequence {
            tokens: projected.add(&label_tokens)?,
            query_rows,
        })
    }
}
