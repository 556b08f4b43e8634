//! The prior-data fitted network: row embedding, an interchangeable
//! sequence backbone, and a classification head.
//!
//! A table becomes a sequence with one token per row. Context rows carry
//! their label, query rows carry the mask label, and queries are appended
//! after all context rows. There is no positional encoding, so the
//! attention backbone is permutation-equivariant while the scan-based
//! backbones see the rows in the order given.

mod attention;
mod embed;
mod params;
mod ssm_block;

pub use attention::AttentionBlock;
pub use embed::{normalize_features, Embedding, TokenSequence};
pub use params::{BoundParams, ParamId, ParamStore};
pub use ssm_block::SsmBlock;

use std::fmt;
use std::str::FromStr;

use params::{Init, Norm};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{Tape, Tensor, Var};

/// Sequence mixer of the encoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Full multi-head self-attention; quadratic in the number of rows.
    Attention,
    /// Causal selective scan (Mamba-style).
    Unidirectional,
    /// Forward and backward scans combined as a quasiseparable mixer
    /// (Hydra-style).
    Bidirectional,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [
        BackboneKind::Attention,
        BackboneKind::Unidirectional,
        BackboneKind::Bidirectional,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Attention => "attention",
            BackboneKind::Unidirectional => "unidirectional",
            BackboneKind::Bidirectional => "bidirectional",
        }
    }

    pub fn is_ssm(self) -> bool {
        self != BackboneKind::Attention
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "attention" | "transformer" => Ok(BackboneKind::Attention),
            "unidirectional" | "mamba" => Ok(BackboneKind::Unidirectional),
            "bidirectional" | "hydra" => Ok(BackboneKind::Bidirectional),
            other => Err(Error::Config(format!(
                "unknown backbone `{other}` (expected attention, unidirectional or bidirectional)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Attention heads; unused by the scan backbones.
    pub num_heads: usize,
    /// State size per channel; unused by attention.
    pub state_dim: usize,
    pub max_features: usize,
    pub max_classes: usize,
    pub seed: u64,
}

/// Encoder layers of the attention backbone in the default configuration.
/// Scan backbones use twice as many.
pub const DEFAULT_ATTENTION_LAYERS: usize = 3;

impl ModelConfig {
    /// Default configuration for `backbone`: width 64, feed-forward 128,
    /// 4 heads, state size 16, up to 10 features and 4 classes; 3 attention
    /// layers or 6 scan layers.
    pub fn new(backbone: BackboneKind) -> Self {
        ModelConfig {
            backbone,
            num_layers: Self::default_layers(backbone, DEFAULT_ATTENTION_LAYERS),
            embed_dim: 64,
            hidden_dim: 128,
            num_heads: 4,
            state_dim: 16,
            max_features: 10,
            max_classes: 4,
            seed: 0,
        }
    }

    /// Layer count for `backbone` at the capacity tier whose attention stack
    /// has `attention_layers` layers.
    pub fn default_layers(backbone: BackboneKind, attention_layers: usize) -> usize {
        if backbone.is_ssm() {
            2 * attention_layers
        } else {
            attention_layers
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return fail("embedding_size and hidden_size must be positive".into());
        }
        if self.max_features == 0 {
            return fail("max_features must be at least 1".into());
        }
        if self.max_classes < 2 {
            return fail("max_classes must be at least 2".into());
        }
        match self.backbone {
            BackboneKind::Attention if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) => fail(format!(
                "embedding_size {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )),
            BackboneKind::Unidirectional | BackboneKind::Bidirectional if self.state_dim == 0 => {
                fail("state_dim must be at least 1".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Attention(AttentionBlock),
    Ssm(SsmBlock),
}

/// Output head: final norm and projection to `max_classes` logits.
#[derive(Clone, Debug)]
struct Head {
    norm: Norm,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct PfnModel {
    config: ModelConfig,
    params: ParamStore,
    embedding: Embedding,
    layers: Vec<Layer>,
    head: Head,
}

impl PfnModel {
    /// Randomly initialised model; weights depend only on `config`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(config.seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let embedding = Embedding::new(&mut init, &config);
        let layers = (0..config.num_layers)
            .map(|i| {
                let prefix = format!("layers.{i}");
                match config.backbone {
                    BackboneKind::Attention => Layer::Attention(AttentionBlock::new(&mut init, &prefix, &config)),
                    kind => Layer::Ssm(SsmBlock::new(&mut init, &prefix, &config, kind)),
                }
            })
            .collect();
        let e = config.embed_dim;
        let head = Head {
            norm: Norm::new(&mut init, "head.norm", e),
            weight: init.linear("head.weight", e, config.max_classes),
            bias: init.constant("head.bias", &[config.max_classes], 0.0),
        };
        Ok(PfnModel {
            config,
            params: store,
            embedding,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams::bind(&self.params, tape)
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    /// Runs the encoder stack over `[L, E]` tokens.
    pub fn encode<'t>(&self, p: &BoundParams<'t>, tokens: &Var<'t>) -> Result<Var<'t>> {
        let mut h = tokens.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Attention(b) => b.forward(p, &h)?,
                Layer::Ssm(b) => b.forward(p, &h)?,
            };
        }
        Ok(h)
    }

    /// Logits `[rows.len(), max_classes]` for the selected hidden rows.
    pub fn head<'t>(&self, p: &BoundParams<'t>, hidden: &Var<'t>, rows: &[usize]) -> Result<Var<'t>> {
        let h = hidden.index_rows(rows)?;
        self.head
            .norm
            .apply(p, &h)?
            .linear(p.get(self.head.weight), Some(p.get(self.head.bias)))
    }

    /// One forward pass over a table whose rows are labelled (`Some(class)`)
    /// context rows or masked (`None`) query rows. Returns logits for the
    /// query rows, in row order.
    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: &Tensor, labels: &[Option<usize>]) -> Result<Var<'t>> {
        let seq = self.embedding.embed_rows(p, x, labels, &self.config)?;
        let hidden = self.encode(p, &seq.tokens)?;
        self.head(p, &hidden, &seq.query_rows)
    }

    /// Forward pass without gradient tracking.
    pub fn logits(&self, x: &Tensor, labels: &[Option<usize>]) -> Result<Tensor> {
        let tape = Tape::inference();
        let p = self.bind(&tape);
        let out = self.forward(&p, x, labels)?;
        Ok(out.value().clone())
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Attention block `i`, if the backbone is attention.
    pub fn attention_block(&self, i: usize) -> Option<&AttentionBlock> {
        match self.layers.get(i)? {
            Layer::Attention(b) => Some(b),
            Layer::Ssm(_) => None,
        }
    }

    /// Scan block `i`, if the backbone is a scan.
    pub fn ssm_block(&self, i: usize) -> Option<&SsmBlock> {
        match self.layers.get(i)? {
            Layer::Ssm(b) => Some(b),
            Layer::Attention(_) => None,
        }
    }
}
