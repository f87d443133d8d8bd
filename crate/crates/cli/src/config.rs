//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Keys are dotted (`optim.lr`,
//! `flags.ntk`). Every key must be one of [`KEYS`]; anything else is fatal.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cmm_core::harness::{MergeMethod, RunConfig, Schedule};
use cmm_core::merge::FisherKind;
use cmm_core::{Activation, DecayMode, Scenario};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for data, init, batching and randmix"),
    ("data.path", "CSV dataset to load instead of generating one"),
    ("data.task_column", "task column name in the CSV (default `task`)"),
    ("data.scenario", "cil | dil"),
    ("data.num_tasks", "tasks (cil) or domains (dil) to generate"),
    ("data.classes_per_task", "classes per task (cil)"),
    ("data.num_classes", "shared classes (dil)"),
    ("data.samples_per_class", "samples per class per task, split 80/20"),
    ("data.input_dim", "feature width of generated data"),
    ("data.spread", "per-coordinate noise standard deviation"),
    ("data.radius", "norm of class means (default 4·spread)"),
    ("data.domain_shift", "rotation/translation strength between domains (dil)"),
    ("model.hidden_dims", "comma-separated hidden widths, may be empty"),
    ("model.embed_dim", "embedding width"),
    ("model.activation", "tanh | relu"),
    ("head.temperature", "softmax temperature of the frozen head"),
    ("optim.lr", "AdamW learning rate"),
    ("optim.beta1", "first-moment decay"),
    ("optim.beta2", "second-moment decay"),
    ("optim.eps", "denominator epsilon"),
    ("optim.weight_decay", "weight decay"),
    ("optim.decay_mode", "decoupled | coupled"),
    ("train.epochs", "epochs per task"),
    ("train.batch_size", "minibatch size"),
    ("train.schedule", "constant | cosine"),
    ("merge.method", "fisher | avg | maxabs | randmix | none"),
    ("merge.lambda", "weight of the current task in the merge"),
    ("merge.floor", "Fisher mass below which entries fall back to averaging"),
    ("merge.fisher_kind", "bias_corrected | raw"),
    ("flags.ft", "fine-tune on each task"),
    ("flags.merge", "merge into the running model"),
    ("flags.ntk", "fine-tune in the tangent space of the base"),
    ("flags.bias", "refine the projection layer after merging"),
    ("align.steps", "refinement gradient steps"),
    ("align.lr", "refinement step size"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub run: RunConfig,
    pub data_path: Option<PathBuf>,
    pub task_column: String,
    /// Parsed key/value pairs, used for hashing and echoing.
    pub entries: BTreeMap<String, String>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(p) = &cfg.data_path {
            if p.is_relative() {
                cfg.data_path = Some(path.parent().unwrap_or(Path::new(".")).join(p));
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(CliError::Config(format!("line {}: unknown key `{key}`", i + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key `{key}`", i + 1)));
            }
        }
        Self::from_entries(entries)
    }

    fn from_entries(entries: BTreeMap<String, String>) -> Result<Self> {
        let mut run = RunConfig::default();
        let mut data_path = None;
        let mut task_column = "task".to_string();
        let mut input_dim_set = false;
        for (key, value) in &entries {
            let v = value.as_str();
            match key.as_str() {
                "seed" => run.seed = num(key, v)?,
                "data.path" => data_path = Some(PathBuf::from(v)),
                "data.task_column" => task_column = v.to_string(),
                "data.scenario" => run.data.scenario = core_enum::<Scenario>(key, v)?,
                "data.num_tasks" => run.data.num_tasks = num(key, v)?,
                "data.classes_per_task" => run.data.classes_per_task = num(key, v)?,
                "data.num_classes" => run.data.num_classes = num(key, v)?,
                "data.samples_per_class" => run.data.samples_per_class = num(key, v)?,
                "data.input_dim" => {
                    run.data.input_dim = num(key, v)?;
                    input_dim_set = true;
                }
                "data.spread" => run.data.spread = num(key, v)?,
                "data.radius" => run.data.radius = Some(num(key, v)?),
                "data.domain_shift" => run.data.domain_shift = num(key, v)?,
                "model.hidden_dims" => {
                    run.model.hidden_dims = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| num(key, s))
                        .collect::<Result<_>>()?
                }
                "model.embed_dim" => run.model.embed_dim = num(key, v)?,
                "model.activation" => run.model.activation = core_enum::<Activation>(key, v)?,
                "head.temperature" => run.temperature = num(key, v)?,
                "optim.lr" => run.optim.lr = num(key, v)?,
                "optim.beta1" => run.optim.beta1 = num(key, v)?,
                "optim.beta2" => run.optim.beta2 = num(key, v)?,
                "optim.eps" => run.optim.eps = num(key, v)?,
                "optim.weight_decay" => run.optim.weight_decay = num(key, v)?,
                "optim.decay_mode" => {
                    run.optim.decay_mode = choice(key, v, &[("decoupled", DecayMode::Decoupled), ("coupled", DecayMode::Coupled)])?
                }
                "train.epochs" => run.train.epochs = num(key, v)?,
                "train.batch_size" => run.train.batch_size = num(key, v)?,
                "train.schedule" => {
                    run.train.schedule = choice(key, v, &[("constant", Schedule::Constant), ("cosine", Schedule::Cosine)])?
                }
                "merge.method" => run.method = core_enum::<MergeMethod>(key, v)?,
                "merge.lambda" => run.merge.lambda = num(key, v)?,
                "merge.floor" => run.merge.floor = num(key, v)?,
                "merge.fisher_kind" => {
                    run.merge.fisher_kind =
                        choice(key, v, &[("bias_corrected", FisherKind::BiasCorrected), ("raw", FisherKind::Raw)])?
                }
                "flags.ft" => run.flags.ft = flag(key, v)?,
                "flags.merge" => run.flags.merge = flag(key, v)?,
                "flags.ntk" => run.flags.ntk = flag(key, v)?,
                "flags.bias" => run.flags.bias = flag(key, v)?,
                "align.steps" => run.align.steps = num(key, v)?,
                "align.lr" => run.align.lr = num(key, v)?,
                other => unreachable!("key `{other}` passed the schema check"),
            }
        }
        if data_path.is_some() && input_dim_set {
            return Err(CliError::Config("data.input_dim conflicts with data.path; width comes from the file".into()));
        }
        run.model.input_dim = run.data.input_dim;
        Ok(CliConfig {
            run,
            data_path,
            task_column,
            entries,
        })
    }

    /// SHA-256 over the canonical `key=value` lines, sorted by key.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }
}

fn num<N: FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn core_enum<E: FromStr>(key: &str, v: &str) -> Result<E> {
    v.parse()
        .map_err(|_| CliError::Config(format!("`{key}`: unrecognized value `{v}`")))
}

fn choice<E: Copy>(key: &str, v: &str, options: &[(&str, E)]) -> Result<E> {
    options.iter().find(|(name, _)| *name == v).map(|(_, e)| *e).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        CliError::Config(format!("`{key}`: expected one of {}, got `{v}`", names.join(" | ")))
    })
}
