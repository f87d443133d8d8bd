//! `CMMK` checkpoints: a flat list of named little-endian f64 arrays.
//!
//! ```text
//! magic        4 bytes  "CMMK"
//! version      u32
//! entry_count  u32
//! entries      name_len u32 | name (UTF-8) | dtype u8 (0 = f64) | rank u8 | dims rank×u64 | payload
//! ```
//! All integers are little-endian. Payload length is the product of the dims
//! (1 for rank 0) times eight bytes.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use cmm_core::head::{Prototype, PrototypePolicy, PrototypeStore};
use cmm_core::merge::{FisherAccumulator, FisherSource};
use cmm_core::{
    Activation, AdamWHyper, AdamWState, DecayMode, FrozenHead, Layout, Model, ModelConfig, ParamSet, TangentModel,
};
use ndarray::Array2;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"CMMK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: Vec<f64>) -> Self {
        let entry = Entry {
            name: name.into(),
            dims,
            data,
        };
        debug_assert_eq!(entry.dims.iter().product::<u64>() as usize, entry.data.len());
        entry
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Entry::new(name, vec![], vec![value])
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| CliError::format(0, format!("missing entry `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let e = self.require(name)?;
        match e.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(CliError::format(0, format!("entry `{name}` is not a scalar"))),
        }
    }

    /// Entries whose name starts with `prefix/`, with the prefix stripped.
    fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Entry)> + 'a {
        self.entries.iter().filter_map(move |e| {
            e.name
                .strip_prefix(prefix)
                .and_then(|rest| rest.strip_prefix('/'))
                .map(|rest| (rest, e))
        })
    }

    pub fn has_group(&self, prefix: &str) -> bool {
        self.group(prefix).next().is_some()
    }

    /// Drops `prefix` itself and every `prefix/...` entry.
    pub fn remove_group(&mut self, prefix: &str) {
        self.entries.retain(|e| {
            e.name != prefix && !e.name.strip_prefix(prefix).is_some_and(|r| r.starts_with('/') || r.starts_with('.'))
        });
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F64);
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CliError::format(0, format!("bad magic {:?}", String::from_utf8_lossy(magic))));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CliError::format(4, format!("unsupported version {version}")));
        }
        let count = r.u32("entry count")?;
        let mut names = BTreeSet::new();
        let mut entries = Vec::new();
        for _ in 0..count {
            let start = r.pos as u64;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| CliError::format(start + 4, "entry name is not UTF-8"))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(CliError::format(start, format!("duplicate entry `{name}`")));
            }
            let dtype_at = r.pos as u64;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F64 {
                return Err(CliError::format(dtype_at, format!("unknown dtype tag {dtype}")));
            }
            let rank = r.u8("rank")? as usize;
            let dims_at = r.pos as u64;
            let dims = (0..rank).map(|_| r.u64("dims")).collect::<Result<Vec<u64>>>()?;
            let count = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .filter(|&bytes| bytes <= (r.bytes.len() - r.pos) as u64)
                .ok_or_else(|| CliError::format(dims_at, format!("dims {dims:?} of `{name}` exceed the file")))?
                / 8;
            let payload = r.take(count as usize * 8, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(CliError::format(r.pos as u64, "trailing bytes after last entry"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes).map_err(|e| e.at(path))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CliError::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Everything needed to evaluate, merge or resume from a model.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub model: Model<f64>,
    pub head: FrozenHead<f64>,
    pub fisher: Option<FisherAccumulator<f64>>,
    pub optimizer: Option<AdamWState<f64>>,
    pub prototypes: Option<PrototypeStore<f64>>,
    pub config_hash: Option<[u8; 32]>,
}

impl ModelState {
    pub fn base(&self) -> Option<&ParamSet<f64>> {
        match &self.model {
            Model::Linearized(t) => Some(t.base()),
            Model::Standard(_) => None,
        }
    }

    pub fn to_checkpoint(&self, base: &ParamSet<f64>) -> Checkpoint {
        let mut entries = vec![
            Entry::scalar("meta.activation", activation_code(self.config.activation)),
            Entry::scalar("meta.linearized", matches!(self.model, Model::Linearized(_)) as u8 as f64),
        ];
        push_params(&mut entries, "base", base);
        match &self.model {
            Model::Standard(p) => push_params(&mut entries, "theta", p),
            Model::Linearized(t) => push_params(&mut entries, "tau", t.tau()),
        }
        let c = self.head.class_ids().len() as u64;
        let d = self.head.embed_dim() as u64;
        entries.push(Entry::new("head.class_ids", vec![c], ids(self.head.class_ids())));
        entries.push(Entry::new("head.embeddings", vec![c, d], self.head.embeddings().iter().copied().collect()));
        entries.push(Entry::scalar("head.temperature", self.head.temperature()));
        if let Some(f) = &self.fisher {
            push_params(&mut entries, "fisher", f.values());
            entries.push(Entry::scalar("fisher.merged", (f.source() == FisherSource::Merged) as u8 as f64));
        }
        if let Some(o) = &self.optimizer {
            push_params(&mut entries, "adam.m", &o.m);
            push_params(&mut entries, "adam.v", &o.v);
            entries.push(Entry::scalar("adam.t", o.t as f64));
            let h = o.hyper;
            let mode = (h.decay_mode == DecayMode::Coupled) as u8 as f64;
            entries.push(Entry::new(
                "adam.hyper",
                vec![6],
                vec![h.lr, h.beta1, h.beta2, h.eps, h.weight_decay, mode],
            ));
        }
        if let Some(store) = &self.prototypes {
            let policy = (store.policy() == PrototypePolicy::RunningMean) as u8 as f64;
            entries.push(Entry::scalar("prototypes.running_mean", policy));
            let k = store.len() as u64;
            let classes: Vec<usize> = store.iter().map(|(c, _)| c).collect();
            entries.push(Entry::new("prototypes.class_ids", vec![k], ids(&classes)));
            entries.push(Entry::new("prototypes.unit", vec![k, d], store.iter().flat_map(|(_, p)| p.unit.clone()).collect()));
            entries.push(Entry::new("prototypes.mean", vec![k, d], store.iter().flat_map(|(_, p)| p.mean.clone()).collect()));
            entries.push(Entry::new("prototypes.count", vec![k], store.iter().map(|(_, p)| p.count as f64).collect()));
            entries.push(Entry::new("prototypes.task", vec![k], store.iter().map(|(_, p)| p.task as f64).collect()));
        }
        if let Some(h) = &self.config_hash {
            entries.push(Entry::new("meta.config_sha256", vec![32], h.iter().map(|&b| b as f64).collect()));
        }
        Checkpoint { entries }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let activation = match ck.scalar("meta.activation")? {
            0.0 => Activation::Tanh,
            1.0 => Activation::Relu,
            a => return Err(CliError::format(0, format!("unknown activation code {a}"))),
        };
        let base = read_params(ck, "base")?;
        let config = infer_config(&base, activation)?;
        let layout = Arc::clone(base.layout_arc());
        let model = if ck.scalar("meta.linearized")? != 0.0 {
            let tau = read_params_in(ck, "tau", &layout)?;
            Model::Linearized(TangentModel::new(Arc::new(base), tau)?)
        } else {
            Model::Standard(read_params_in(ck, "theta", &layout)?)
        };

        let class_ids = read_ids(ck.require("head.class_ids")?)?;
        let emb = ck.require("head.embeddings")?;
        let embeddings = matrix(emb, class_ids.len())?;
        let head = FrozenHead::from_unit_rows(class_ids, embeddings, ck.scalar("head.temperature")?)?;

        let fisher = if ck.get("fisher.merged").is_some() {
            let source = if ck.scalar("fisher.merged")? != 0.0 {
                FisherSource::Merged
            } else {
                FisherSource::SingleTask
            };
            Some(FisherAccumulator::new(read_params_in(ck, "fisher", &layout)?, source)?)
        } else {
            None
        };

        let optimizer = if ck.get("adam.t").is_some() {
            let h = &ck.require("adam.hyper")?.data;
            if h.len() != 6 {
                return Err(CliError::format(0, "adam.hyper must hold 6 values"));
            }
            let hyper = AdamWHyper {
                lr: h[0],
                beta1: h[1],
                beta2: h[2],
                eps: h[3],
                weight_decay: h[4],
                decay_mode: if h[5] != 0.0 { DecayMode::Coupled } else { DecayMode::Decoupled },
            };
            Some(AdamWState {
                m: read_params_in(ck, "adam.m", &layout)?,
                v: read_params_in(ck, "adam.v", &layout)?,
                t: count(ck.scalar("adam.t")?)? as u64,
                hyper,
            })
        } else {
            None
        };

        let prototypes = if ck.get("prototypes.running_mean").is_some() {
            let policy = if ck.scalar("prototypes.running_mean")? != 0.0 {
                PrototypePolicy::RunningMean
            } else {
                PrototypePolicy::Immutable
            };
            let classes = read_ids(ck.require("prototypes.class_ids")?)?;
            let k = classes.len();
            let unit = matrix(ck.require("prototypes.unit")?, k)?;
            let mean = matrix(ck.require("prototypes.mean")?, k)?;
            let counts = &ck.require("prototypes.count")?.data;
            let tasks = &ck.require("prototypes.task")?.data;
            if counts.len() != k || tasks.len() != k {
                return Err(CliError::format(0, "prototype arrays disagree in length"));
            }
            let mut store = PrototypeStore::new(policy);
            for (i, c) in classes.into_iter().enumerate() {
                store.restore(
                    c,
                    Prototype {
                        unit: unit.row(i).to_vec(),
                        mean: mean.row(i).to_vec(),
                        count: count(counts[i])?,
                        task: count(tasks[i])?,
                    },
                );
            }
            Some(store)
        } else {
            None
        };

        let config_hash = match ck.get("meta.config_sha256") {
            Some(e) if e.data.len() == 32 => {
                let mut h = [0u8; 32];
                for (b, v) in h.iter_mut().zip(&e.data) {
                    *b = count(*v)? as u8;
                }
                Some(h)
            }
            Some(_) => return Err(CliError::format(0, "meta.config_sha256 must hold 32 bytes")),
            None => None,
        };

        Ok(ModelState {
            config,
            model,
            head,
            fisher,
            optimizer,
            prototypes,
            config_hash,
        })
    }

    pub fn save(&self, base: &ParamSet<f64>, path: &Path) -> Result<()> {
        self.to_checkpoint(base).save(path)
    }

    /// Loads a checkpoint and also returns its stored base parameters.
    pub fn load(path: &Path) -> Result<(Self, ParamSet<f64>)> {
        let ck = Checkpoint::load(path)?;
        let state = Self::from_checkpoint(&ck).map_err(|e| e.at(path))?;
        let base = read_params(&ck, "base").map_err(|e| e.at(path))?;
        Ok((state, base))
    }
}

fn activation_code(a: Activation) -> f64 {
    match a {
        Activation::Tanh => 0.0,
        Activation::Relu => 1.0,
    }
}

fn ids(values: &[usize]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}

fn count(v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
        Ok(v as usize)
    } else {
        Err(CliError::format(0, format!("expected a nonnegative integer, got {v}")))
    }
}

fn read_ids(e: &Entry) -> Result<Vec<usize>> {
    e.data.iter().map(|&v| count(v)).collect()
}

fn matrix(e: &Entry, rows: usize) -> Result<Array2<f64>> {
    let cols = match e.dims.as_slice() {
        [r, c] if *r as usize == rows => *c as usize,
        _ => return Err(CliError::format(0, format!("entry `{}` has dims {:?}", e.name, e.dims))),
    };
    Array2::from_shape_vec((rows, cols), e.data.clone()).map_err(|err| CliError::format(0, err.to_string()))
}

pub(crate) fn push_params(entries: &mut Vec<Entry>, prefix: &str, p: &ParamSet<f64>) {
    for (spec, values) in p.blocks() {
        let dims = spec.shape.iter().map(|&d| d as u64).collect();
        entries.push(Entry::new(format!("{prefix}/{}", spec.name), dims, values.to_vec()));
    }
}

pub(crate) fn read_params(ck: &Checkpoint, prefix: &str) -> Result<ParamSet<f64>> {
    let blocks: Vec<(String, Vec<usize>, Vec<f64>)> = ck
        .group(prefix)
        .map(|(name, e)| (name.to_string(), e.dims.iter().map(|&d| d as usize).collect(), e.data.clone()))
        .collect();
    if blocks.is_empty() {
        return Err(CliError::format(0, format!("no `{prefix}/` entries")));
    }
    Ok(ParamSet::from_blocks(blocks)?)
}

fn read_params_in(ck: &Checkpoint, prefix: &str, layout: &Arc<Layout>) -> Result<ParamSet<f64>> {
    let p = read_params(ck, prefix)?;
    layout.ensure_compatible(p.layout())?;
    Ok(ParamSet::from_flat(Arc::clone(layout), p.into_vec())?)
}

fn infer_config(base: &ParamSet<f64>, activation: Activation) -> Result<ModelConfig> {
    let mut dims = Vec::new();
    let mut l = 0;
    while let Ok(w) = base.matrix(&ModelConfig::weight_name(l)) {
        dims.push((w.nrows(), w.ncols()));
        l += 1;
    }
    let (&(embed_dim, _), &(_, input_dim)) = match (dims.last(), dims.first()) {
        (Some(last), Some(first)) => (last, first),
        _ => return Err(CliError::format(0, "base has no dense layers")),
    };
    let cfg = ModelConfig {
        input_dim,
        hidden_dims: dims[..dims.len() - 1].iter().map(|d| d.0).collect(),
        embed_dim,
        activation,
    };
    cfg.layout()?.ensure_compatible(base.layout())?;
    Ok(cfg)
}
