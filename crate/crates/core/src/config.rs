//! Run configuration: `key = value` lines grouped under `[section]`
//! headers, `#` comments. Every key must be known; a typo is an error that
//! names the key.
//!
//! ```text
//! seed = 7
//! out_dir = runs/hydra
//!
//! [model]
//! backbone = bidirectional
//! embedding_size = 32
//!
//! [train]
//! learning_rate = 0.001
//! aggregate_k_gradients = 8
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bench::BenchPlan;
use crate::error::{Error, Result};
use crate::inference::QueryMode;
use crate::model::{BackboneKind, ModelConfig, DEFAULT_ATTENTION_LAYERS};
use crate::prior::{PriorConfig, ScoreModel};
use crate::training::TrainConfig;

/// Repeated-context-permutation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RcpSettings {
    /// Permutations used by `evaluate` and `predict`.
    pub r: usize,
    /// Values swept by `order-sensitivity`, and by `evaluate` when `sweep`.
    pub r_values: Vec<usize>,
    pub sweep: bool,
    /// Pairs of predictions compared per unit in order-sensitivity runs.
    pub trials: usize,
    /// Prior tasks used when no dataset is given.
    pub tasks: usize,
    pub mode: QueryMode,
}

impl Default for RcpSettings {
    fn default() -> Self {
        RcpSettings {
            r: 1,
            r_values: vec![1, 2, 4, 8],
            sweep: false,
            trials: 1,
            tasks: 30,
            mode: QueryMode::Joint,
        }
    }
}

impl RcpSettings {
    /// `r` values evaluated per split.
    pub fn eval_r_values(&self) -> Vec<usize> {
        if self.sweep {
            self.r_values.clone()
        } else {
            vec![self.r]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub datasets: Vec<PathBuf>,
    pub label_column: String,
    pub train_fraction: f64,
    /// Second checkpoint compared against the first with the Wilcoxon test.
    pub compare_checkpoint: Option<PathBuf>,
    /// Also measure order sensitivity per split during evaluation.
    pub order_sensitivity: bool,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            datasets: Vec::new(),
            label_column: "label".into(),
            train_fraction: 0.5,
            compare_checkpoint: None,
            order_sensitivity: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub train: TrainConfig,
    pub rcp: RcpSettings,
    pub bench: BenchPlan,
    pub data: DataSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            model: ModelConfig::new(BackboneKind::Attention),
            prior: PriorConfig::default(),
            train: TrainConfig::default(),
            rcp: RcpSettings::default(),
            bench: BenchPlan::default(),
            data: DataSettings::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for key `{key}` (expected true or false)"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn mode_name(m: QueryMode) -> &'static str {
    match m {
        QueryMode::Joint => "joint",
        QueryMode::OneByOne => "one_by_one",
    }
}

fn score_name(s: ScoreModel) -> &'static str {
    match s {
        ScoreModel::Network => "network",
        ScoreModel::FirstFeature => "first_feature",
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses the whole text before applying anything, so an unknown key
    /// fails regardless of where it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: malformed section header `{line}`", i + 1)))?
                    .trim();
                if !["model", "train", "prior", "rcp", "bench", "data"].contains(&name) {
                    return Err(Error::Config(format!("line {}: unknown section `[{name}]`", i + 1)));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            let full = if section.is_empty() { key.clone() } else { format!("{section}.{key}") };
            if !Self::known_key(&section, &key) {
                return Err(Error::Config(format!("line {}: unknown key `{key}`{}", i + 1, if section.is_empty() { String::new() } else { format!(" in section [{section}]") })));
            }
            if !seen.insert(full.clone()) {
                return Err(Error::Config(format!("line {}: duplicate key `{full}`", i + 1)));
            }
            entries.push((section.clone(), key, value));
        }

        let mut cfg = RunConfig::default();
        let mut layers = None;
        for (section, key, value) in &entries {
            let (k, v) = (key.as_str(), value.as_str());
            match (section.as_str(), k) {
                ("", "seed") => cfg.seed = parse(k, v)?,
                ("", "out_dir") => cfg.out_dir = PathBuf::from(v),
                ("", "checkpoint") => cfg.checkpoint = Some(PathBuf::from(v)),
                ("model", "backbone") => cfg.model.backbone = v.parse()?,
                ("model", "embedding_size") => cfg.model.embed_dim = parse(k, v)?,
                ("model", "hidden_size") => cfg.model.hidden_dim = parse(k, v)?,
                ("model", "num_layers") => layers = Some(parse(k, v)?),
                ("model", "num_heads") => cfg.model.num_heads = parse(k, v)?,
                ("model", "state_dim") => cfg.model.state_dim = parse(k, v)?,
                ("model", "max_features") => cfg.model.max_features = parse(k, v)?,
                ("model", "max_classes") => cfg.model.max_classes = parse(k, v)?,
                ("train", "learning_rate") => cfg.train.learning_rate = parse(k, v)?,
                ("train", "batch_size") => cfg.train.batch_size = parse(k, v)?,
                ("train", "steps_per_epoch") => cfg.train.steps_per_epoch = parse(k, v)?,
                ("train", "epochs") => cfg.train.epochs = parse(k, v)?,
                ("train", "aggregate_k_gradients") => cfg.train.aggregate_k = parse(k, v)?,
                ("train", "beta1") => cfg.train.beta1 = parse(k, v)?,
                ("train", "beta2") => cfg.train.beta2 = parse(k, v)?,
                ("train", "eps") => cfg.train.eps = parse(k, v)?,
                ("train", "weight_decay") => cfg.train.weight_decay = parse(k, v)?,
                ("train", "grad_clip") => cfg.train.grad_clip = parse_optional(k, v)?,
                ("train", "validation_tasks") => cfg.train.validation_tasks = parse(k, v)?,
                ("prior", "min_features") => cfg.prior.min_features = parse(k, v)?,
                ("prior", "max_features") => cfg.prior.max_features = parse(k, v)?,
                ("prior", "min_classes") => cfg.prior.min_classes = parse(k, v)?,
                ("prior", "max_classes") => cfg.prior.max_classes = parse(k, v)?,
                ("prior", "rows") => cfg.prior.rows = parse(k, v)?,
                ("prior", "context_rows") => cfg.prior.context_rows = parse(k, v)?,
                ("prior", "hidden_width") => cfg.prior.hidden_width = parse(k, v)?,
                ("prior", "hidden_layers") => cfg.prior.hidden_layers = parse(k, v)?,
                ("prior", "weight_scale") => cfg.prior.weight_scale = parse(k, v)?,
                ("prior", "label_noise") => cfg.prior.label_noise = parse(k, v)?,
                ("prior", "score") => {
                    cfg.prior.score = match v {
                        "network" => ScoreModel::Network,
                        "first_feature" => ScoreModel::FirstFeature,
                        _ => return Err(Error::Config(format!("invalid value `{v}` for key `score`"))),
                    }
                }
                ("rcp", "r") => cfg.rcp.r = parse(k, v)?,
                ("rcp", "r_values") => cfg.rcp.r_values = parse_list(k, v)?,
                ("rcp", "sweep") => cfg.rcp.sweep = parse_bool(k, v)?,
                ("rcp", "trials") => cfg.rcp.trials = parse(k, v)?,
                ("rcp", "tasks") => cfg.rcp.tasks = parse(k, v)?,
                ("rcp", "query_mode") => {
                    cfg.rcp.mode = match v {
                        "joint" => QueryMode::Joint,
                        "one_by_one" => QueryMode::OneByOne,
                        _ => return Err(Error::Config(format!("invalid value `{v}` for key `query_mode`"))),
                    }
                }
                ("bench", "backbones") => {
                    cfg.bench.backbones = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<_>>()?
                }
                ("bench", "rows") => cfg.bench.rows = parse_list(k, v)?,
                ("bench", "features") => cfg.bench.features = parse(k, v)?,
                ("bench", "repetitions") => cfg.bench.repetitions = parse(k, v)?,
                ("bench", "warmups") => cfg.bench.warmups = parse(k, v)?,
                ("bench", "memory_limit_bytes") => cfg.bench.memory_limit_bytes = parse_optional(k, v)?,
                ("data", "datasets") => {
                    cfg.data.datasets = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
                }
                ("data", "label_column") => cfg.data.label_column = v.to_string(),
                ("data", "train_fraction") => cfg.data.train_fraction = parse(k, v)?,
                ("data", "compare_checkpoint") => cfg.data.compare_checkpoint = Some(PathBuf::from(v)),
                ("data", "order_sensitivity") => cfg.data.order_sensitivity = parse_bool(k, v)?,
                _ => unreachable!("key checked by known_key"),
            }
        }
        cfg.model.num_layers = layers.unwrap_or_else(|| ModelConfig::default_layers(cfg.model.backbone, DEFAULT_ATTENTION_LAYERS));
        cfg.apply_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    fn known_key(section: &str, key: &str) -> bool {
        let keys: &[&str] = match section {
            "" => &["seed", "out_dir", "checkpoint"],
            "model" => &["backbone", "embedding_size", "hidden_size", "num_layers", "num_heads", "state_dim", "max_features", "max_classes"],
            "train" => &[
                "learning_rate",
                "batch_size",
                "steps_per_epoch",
                "epochs",
                "aggregate_k_gradients",
                "beta1",
                "beta2",
                "eps",
                "weight_decay",
                "grad_clip",
                "validation_tasks",
            ],
            "prior" => &[
                "min_features",
                "max_features",
                "min_classes",
                "max_classes",
                "rows",
                "context_rows",
                "hidden_width",
                "hidden_layers",
                "weight_scale",
                "label_noise",
                "score",
            ],
            "rcp" => &["r", "r_values", "sweep", "trials", "tasks", "query_mode"],
            "bench" => &["backbones", "rows", "features", "repetitions", "warmups", "memory_limit_bytes"],
            "data" => &["datasets", "label_column", "train_fraction", "compare_checkpoint", "order_sensitivity"],
            _ => &[],
        };
        keys.contains(&key)
    }

    /// Propagates the global seed to every component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.prior.seed = seed;
        self.train.seed = seed;
        self.bench.seed = seed;
    }

    /// Switches backbone, keeping the layer count tied to the backbone
    /// when it was the default.
    pub fn set_backbone(&mut self, kind: BackboneKind) {
        let was_default = self.model.num_layers == ModelConfig::default_layers(self.model.backbone, DEFAULT_ATTENTION_LAYERS);
        self.model.backbone = kind;
        if was_default {
            self.model.num_layers = ModelConfig::default_layers(kind, DEFAULT_ATTENTION_LAYERS);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.prior.validate()?;
        self.train.validate()?;
        if self.rcp.r == 0 || self.rcp.r_values.contains(&0) || self.rcp.r_values.is_empty() {
            return Err(Error::Config("r values must be at least 1".into()));
        }
        if self.rcp.trials == 0 {
            return Err(Error::Config("rcp trials must be at least 1".into()));
        }
        self.bench.validate()?;
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} must lie in (0, 1)", self.data.train_fraction)));
        }
        Ok(())
    }

    /// Text that parses back to this configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let t = &self.train;
        let p = &self.prior;
        let r = &self.rcp;
        let b = &self.bench;
        let d = &self.data;
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint = {}", c.display());
        }
        let _ = write!(
            s,
            "\n[model]\nbackbone = {}\nembedding_size = {}\nhidden_size = {}\nnum_layers = {}\nnum_heads = {}\nstate_dim = {}\nmax_features = {}\nmax_classes = {}\n",
            m.backbone, m.embed_dim, m.hidden_dim, m.num_layers, m.num_heads, m.state_dim, m.max_features, m.max_classes
        );
        let _ = write!(
            s,
            "\n[train]\nlearning_rate = {:?}\nbatch_size = {}\nsteps_per_epoch = {}\nepochs = {}\naggregate_k_gradients = {}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\nweight_decay = {:?}\ngrad_clip = {}\nvalidation_tasks = {}\n",
            t.learning_rate,
            t.batch_size,
            t.steps_per_epoch,
            t.epochs,
            t.aggregate_k,
            t.beta1,
            t.beta2,
            t.eps,
            t.weight_decay,
            t.grad_clip.map_or("none".to_string(), |c| format!("{c:?}")),
            t.validation_tasks
        );
        let _ = write!(
            s,
            "\n[prior]\nmin_features = {}\nmax_features = {}\nmin_classes = {}\nmax_classes = {}\nrows = {}\ncontext_rows = {}\nhidden_width = {}\nhidden_layers = {}\nweight_scale = {:?}\nlabel_noise = {:?}\nscore = {}\n",
            p.min_features,
            p.max_features,
            p.min_classes,
            p.max_classes,
            p.rows,
            p.context_rows,
            p.hidden_width,
            p.hidden_layers,
            p.weight_scale,
            p.label_noise,
            score_name(p.score)
        );
        let _ = write!(
            s,
            "\n[rcp]\nr = {}\nr_values = {}\nsweep = {}\ntrials = {}\ntasks = {}\nquery_mode = {}\n",
            r.r,
            join(&r.r_values),
            r.sweep,
            r.trials,
            r.tasks,
            mode_name(r.mode)
        );
        let _ = write!(
            s,
            "\n[bench]\nbackbones = {}\nrows = {}\nfeatures = {}\nrepetitions = {}\nwarmups = {}\nmemory_limit_bytes = {}\n",
            join(&b.backbones),
            join(&b.rows),
            b.features,
            b.repetitions,
            b.warmups,
            b.memory_limit_bytes.map_or("none".to_string(), |v| v.to_string())
        );
        let datasets: Vec<String> = d.datasets.iter().map(|p| p.display().to_string()).collect();
        let _ = write!(
            s,
            "\n[data]\ndatasets = {}\nlabel_column = {}\ntrain_fraction = {:?}\norder_sensitivity = {}\n",
            datasets.join(","),
            d.label_column,
            d.train_fraction,
            d.order_sensitivity
        );
        if let Some(c) = &d.compare_checkpoint {
            let _ = writeln!(s, "compare_checkpoint = {}", c.display());
        }
        s
    }
}
