//! End-to-end continual merging runs.
//!
//! For every task in a sequence the harness fine-tunes (optionally in the
//! tangent space of the shared base), merges into the running model using the
//! optimizer's second moment as curvature, refines the projection layer to
//! undo representation drift, records prototypes for the new classes, and
//! evaluates every task seen so far. Only the base, the running merged model,
//! one Fisher accumulator and the prototypes survive from one task to the
//! next.

use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{refine_last_layer, BiasReport};
use crate::data::{gen_cil, gen_dil, shuffled_indices, CilParams, DilParams, Scenario, TaskDataset, TaskSequence};
use crate::error::{Error, Result};
use crate::head::{predict_nmc, update_prototypes, FrozenHead, PrototypePolicy, PrototypeStore};
use crate::merge::{
    fisher_merge, fisher_state_update, interpolate, maxabs, randmix_stream, FisherAccumulator, FisherKind,
    FisherSource, MergeConfig,
};
use crate::net::{Activation, Model, ModelConfig, TangentModel};
use crate::optim::{cosine_lr, AdamWHyper, AdamWState};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Fisher,
    Avg,
    MaxAbs,
    RandMix,
    None,
}

impl std::str::FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fisher" => Ok(MergeMethod::Fisher),
            "avg" => Ok(MergeMethod::Avg),
            "maxabs" => Ok(MergeMethod::MaxAbs),
            "randmix" => Ok(MergeMethod::RandMix),
            "none" => Ok(MergeMethod::None),
            other => Err(Error::Usage(format!("unknown merge method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

/// Ablation switches. They compose top-down: `bias` needs `merge`, and
/// `merge` and `ntk` need `ft`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub ft: bool,
    pub merge: bool,
    pub ntk: bool,
    pub bias: bool,
}

impl Flags {
    pub const ALL: Flags = Flags {
        ft: true,
        merge: true,
        ntk: true,
        bias: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.bias && !self.merge {
            return Err(Error::Usage("flags.bias requires flags.merge".into()));
        }
        if self.merge && !self.ft {
            return Err(Error::Usage("flags.merge requires flags.ft".into()));
        }
        if self.ntk && !self.ft {
            return Err(Error::Usage("flags.ntk requires flags.ft".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub scenario: Scenario,
    pub num_tasks: usize,
    /// Class-incremental only.
    pub classes_per_task: usize,
    /// Domain-incremental only.
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    /// Defaults to `4·spread`.
    pub radius: Option<f64>,
    pub domain_shift: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenario: Scenario::Cil,
            num_tasks: 3,
            classes_per_task: 2,
            num_classes: 4,
            samples_per_class: 200,
            input_dim: 16,
            spread: 1.0,
            radius: None,
            domain_shift: 1.0,
        }
    }
}

impl DataConfig {
    pub fn generate<T: Scalar>(&self, seed: u64) -> Result<TaskSequence<T>> {
        let radius = self.radius.unwrap_or_else(|| crate::data::default_radius(self.spread));
        match self.scenario {
            Scenario::Cil => gen_cil(&CilParams {
                seed,
                num_tasks: self.num_tasks,
                classes_per_task: self.classes_per_task,
                samples_per_class: self.samples_per_class,
                input_dim: self.input_dim,
                spread: self.spread,
                radius,
            }),
            Scenario::Dil => gen_dil(&DilParams {
                seed,
                num_domains: self.num_tasks,
                num_classes: self.num_classes,
                samples_per_class: self.samples_per_class,
                input_dim: self.input_dim,
                spread: self.spread,
                radius,
                domain_shift: self.domain_shift,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            schedule: Schedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            steps: crate::align::DEFAULT_STEPS,
            lr: crate::align::DEFAULT_LR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub temperature: f64,
    pub optim: AdamWHyper,
    pub train: TrainConfig,
    pub merge: MergeConfig,
    pub method: MergeMethod,
    pub flags: Flags,
    pub align: AlignConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        RunConfig {
            seed: 0,
            model: ModelConfig {
                input_dim: data.input_dim,
                hidden_dims: vec![32],
                embed_dim: 16,
                activation: Activation::Tanh,
            },
            data,
            temperature: 0.1,
            optim: AdamWHyper::default(),
            train: TrainConfig::default(),
            merge: MergeConfig::default(),
            method: MergeMethod::Fisher,
            flags: Flags::ALL,
            align: AlignConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        self.model.validate()?;
        self.optim.validate()?;
        self.merge.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Usage("train.batch_size must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Usage("head.temperature must be > 0".into()));
        }
        if !(self.align.lr >= 0.0) {
            return Err(Error::Usage("align.lr must be >= 0".into()));
        }
        Ok(())
    }
}

/// Deterministic stream splitting (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED63));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_HEAD: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_RANDMIX: u64 = 3;

/// Frozen pieces shared by every task of a run.
#[derive(Debug, Clone)]
pub struct Setup<T> {
    pub model: ModelConfig,
    pub base: Arc<ParamSet<T>>,
    pub head: FrozenHead<T>,
}

impl<T: Scalar> Setup<T> {
    pub fn new(cfg: &RunConfig, seq: &TaskSequence<T>) -> Result<Self> {
        cfg.validate()?;
        if cfg.model.input_dim != seq.input_dim() {
            return Err(Error::Usage(format!(
                "model.input_dim {} does not match data width {}",
                cfg.model.input_dim,
                seq.input_dim()
            )));
        }
        let base = Arc::new(cfg.model.init_params::<T>(cfg.seed)?);
        let head = FrozenHead::random(
            sub_seed(cfg.seed, STREAM_HEAD, 0),
            seq.global_classes.clone(),
            cfg.model.embed_dim,
            T::lit(cfg.temperature),
        )?;
        Ok(Setup {
            model: cfg.model.clone(),
            base,
            head,
        })
    }

    /// The base network in the run's representation: standard, or linearized at `τ = 0`.
    pub fn base_model(&self, ntk: bool) -> Model<T> {
        if ntk {
            Model::Linearized(TangentModel::at_base(Arc::clone(&self.base)))
        } else {
            Model::Standard((*self.base).clone())
        }
    }
}

fn select_rows<T: Scalar>(x: &ArrayView2<'_, T>, idx: &[usize]) -> Array2<T> {
    x.select(Axis(0), idx)
}

/// Trains `start` on one task with AdamW against the head restricted to the
/// task's classes. Returns the trained model and the second-moment Fisher
/// (`None` if no step was taken).
pub fn finetune_task<T: Scalar>(
    cfg: &RunConfig,
    setup: &Setup<T>,
    start: Model<T>,
    task: &TaskDataset<T>,
    task_index: usize,
) -> Result<(Model<T>, Option<FisherAccumulator<T>>)> {
    let out = finetune_task_full(cfg, setup, start, task, task_index)?;
    Ok((out.model, out.fisher))
}

/// Result of fine-tuning one task, including the optimizer's final state.
#[derive(Debug, Clone)]
pub struct Finetuned<T> {
    pub model: Model<T>,
    pub fisher: Option<FisherAccumulator<T>>,
    pub optimizer: AdamWState<T>,
}

/// [`finetune_task`] that also hands back the optimizer.
pub fn finetune_task_full<T: Scalar>(
    cfg: &RunConfig,
    setup: &Setup<T>,
    start: Model<T>,
    task: &TaskDataset<T>,
    task_index: usize,
) -> Result<Finetuned<T>> {
    let run = || -> Result<Finetuned<T>> {
        let n = task.train.len();
        if n == 0 {
            return Err(Error::Data("train split is empty".into()));
        }
        let head = setup.head.restrict(&task.classes)?;
        let mut model = start;
        let mut opt = AdamWState::new(model.trainable(), cfg.optim)?;
        let bs = cfg.train.batch_size.min(n);
        let per_epoch = n.div_ceil(bs) as u64;
        let total = per_epoch * cfg.train.epochs as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, STREAM_BATCHES, task_index as u64));
        let x = task.train.x.view();
        for _ in 0..cfg.train.epochs {
            let order = shuffled_indices(&mut rng, n);
            for chunk in order.chunks(bs) {
                let xb = select_rows(&x, chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| task.train.y[i]).collect();
                let (loss, grad) = model.loss_and_grad(&setup.model, xb.view(), &yb, &head)?;
                if !loss.is_finite() {
                    return Err(Error::numeric("loss", "non-finite training loss"));
                }
                let lr = match cfg.train.schedule {
                    Schedule::Constant => cfg.optim.lr,
                    Schedule::Cosine => cosine_lr(cfg.optim.lr, opt.t, total),
                };
                opt.step_with_lr(model.trainable_mut(), &grad, lr)?;
            }
        }
        let fisher = if opt.t == 0 {
            None
        } else {
            Some(match cfg.merge.fisher_kind {
                FisherKind::BiasCorrected => opt.fisher_estimate()?,
                FisherKind::Raw => opt.fisher_raw()?,
            })
        };
        Ok(Finetuned {
            model,
            fisher,
            optimizer: opt,
        })
    };
    run().map_err(|e| e.in_task(task_index))
}

/// Per-task test accuracy by nearest-class-mean over every stored prototype.
pub fn evaluate<T: Scalar>(
    cfg: &ModelConfig,
    model: &Model<T>,
    store: &PrototypeStore<T>,
    tasks: &[TaskDataset<T>],
) -> Result<Vec<f64>> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            if let Some(c) = task.classes.iter().find(|c| !store.contains(**c)) {
                return Err(Error::State(format!("no prototype for class {c} (task {i})")));
            }
            let z = model.embed(cfg, task.test.x.view())?;
            let pred = predict_nmc(z.view(), store)?;
            Ok(accuracy(&pred, &task.test.y))
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBias {
    pub task: usize,
    #[serde(flatten)]
    pub report: BiasReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// `r[n][i]`: accuracy on task `i` after training task `n`, for `i <= n`.
    pub r: Vec<Vec<f64>>,
    /// `a[n]`: mean of `r[n]`.
    pub a: Vec<f64>,
    pub biases: Vec<TaskBias>,
    pub wall_time_seconds: f64,
    pub config: RunConfig,
}

impl RunResult {
    pub fn final_average(&self) -> f64 {
        self.a.last().copied().unwrap_or(0.0)
    }
}

/// Everything a run leaves behind besides its metrics.
#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub result: RunResult,
    pub setup: Setup<T>,
    pub model: Model<T>,
    pub fisher: Option<FisherAccumulator<T>>,
    pub prototypes: PrototypeStore<T>,
}

/// State handed to a run observer after each task completes.
pub struct TaskEvent<'a, T> {
    pub task: usize,
    /// The model right after fine-tuning, before merging.
    pub finetuned: &'a Model<T>,
    pub finetuned_fisher: Option<&'a FisherAccumulator<T>>,
    /// Optimizer state at the end of this task's fine-tuning.
    pub optimizer: Option<&'a AdamWState<T>>,
    /// The running model after merging and refinement.
    pub merged: &'a Model<T>,
    pub fisher: Option<&'a FisherAccumulator<T>>,
    pub prototypes: &'a PrototypeStore<T>,
}

fn zero_fisher<T: Scalar>(like: &ParamSet<T>) -> FisherAccumulator<T> {
    FisherAccumulator::new(like.zeros_like(), FisherSource::SingleTask).expect("zeros are nonnegative")
}

/// Combines the newly fine-tuned model into the running one.
fn merge_step<T: Scalar>(
    cfg: &RunConfig,
    setup: &Setup<T>,
    current: &Model<T>,
    fisher_cur: Option<&FisherAccumulator<T>>,
    previous: &Model<T>,
    fisher_prev: Option<&FisherAccumulator<T>>,
    task_index: usize,
) -> Result<Model<T>> {
    let cur = current.trainable();
    let prev = previous.trainable();
    let merged = match cfg.method {
        MergeMethod::Fisher => {
            let fc = fisher_cur.cloned().unwrap_or_else(|| zero_fisher(cur));
            let fp = fisher_prev.cloned().unwrap_or_else(|| zero_fisher(prev));
            fisher_merge(cur, &fc, prev, &fp, &cfg.merge)?
        }
        // Running mean over all task models: the newest gets weight 1/(t+1).
        MergeMethod::Avg => interpolate(prev, cur, 1.0 / (task_index as f64 + 1.0))?,
        MergeMethod::MaxAbs => match current {
            Model::Linearized(_) => maxabs(&[prev, cur])?,
            Model::Standard(_) => {
                let tv_prev = prev.sub(&setup.base)?;
                let tv_cur = cur.sub(&setup.base)?;
                maxabs(&[&tv_prev, &tv_cur])?.add(&setup.base)?
            }
        },
        MergeMethod::RandMix => randmix_stream(
            prev,
            cur,
            task_index + 1,
            sub_seed(cfg.seed, STREAM_RANDMIX, task_index as u64),
        )?,
        MergeMethod::None => cur.clone(),
    };
    current.with_trainable(merged)
}

pub fn run_continual<T: Scalar>(cfg: &RunConfig, seq: &TaskSequence<T>) -> Result<RunResult> {
    Ok(run_continual_observed(cfg, seq, |_| Ok(()))?.result)
}

/// Runs the full loop, calling `observer` once per task.
pub fn run_continual_observed<T: Scalar>(
    cfg: &RunConfig,
    seq: &TaskSequence<T>,
    mut observer: impl FnMut(TaskEvent<'_, T>) -> Result<()>,
) -> Result<RunOutput<T>> {
    let started = Instant::now();
    let setup = Setup::new(cfg, seq)?;
    let policy = match seq.scenario {
        Scenario::Cil => PrototypePolicy::Immutable,
        Scenario::Dil => PrototypePolicy::RunningMean,
    };
    let mut store = PrototypeStore::new(policy);
    let ntk = cfg.flags.ntk;
    let mut running: Option<Model<T>> = None;
    let mut fisher_acc: Option<FisherAccumulator<T>> = None;
    let mut r = Vec::with_capacity(seq.len());
    let mut a = Vec::with_capacity(seq.len());
    let mut biases = Vec::new();

    for (t, task) in seq.tasks.iter().enumerate() {
        type Step<T> = (Model<T>, Option<FisherAccumulator<T>>, Option<AdamWState<T>>, Model<T>, Option<BiasReport>);
        let step = || -> Result<Step<T>> {
            let (finetuned, fisher_t, optimizer) = if cfg.flags.ft {
                let start = match (&running, ntk) {
                    (Some(prev), false) => prev.clone(),
                    _ => setup.base_model(ntk),
                };
                let out = finetune_task_full(cfg, &setup, start, task, t)?;
                (out.model, out.fisher, Some(out.optimizer))
            } else {
                let model = running.clone().unwrap_or_else(|| setup.base_model(false));
                (model, None, None)
            };

            let (mut current, mut report) = (None, None);
            if let (Some(prev), true) = (&running, cfg.flags.merge) {
                let merged = merge_step(cfg, &setup, &finetuned, fisher_t.as_ref(), prev, fisher_acc.as_ref(), t)?;
                if cfg.flags.bias {
                    let (refined, rep) =
                        refine_last_layer(&setup.model, &merged, prev, task.train.x.view(), cfg.align.steps, cfg.align.lr)?;
                    current = Some(refined);
                    report = Some(rep);
                } else {
                    current = Some(merged);
                }
            }
            let current = current.unwrap_or_else(|| finetuned.clone());
            Ok((finetuned, fisher_t, optimizer, current, report))
        };
        let (finetuned, fisher_t, optimizer, current, report) = step().map_err(|e| e.in_task(t))?;

        update_prototypes(
            &setup.model,
            &current,
            task.train.x.view(),
            &task.train.y,
            &task.classes,
            t,
            &mut store,
        )
        .map_err(|e| e.in_task(t))?;
        let row = evaluate(&setup.model, &current, &store, &seq.tasks[..=t]).map_err(|e| e.in_task(t))?;
        a.push(mean(&row));
        r.push(row);
        if let Some(rep) = report {
            biases.push(TaskBias { task: t, report: rep });
        }

        fisher_acc = match (fisher_acc.take(), fisher_t.as_ref()) {
            (Some(prev), Some(cur)) if running.is_some() && cfg.flags.merge => {
                Some(fisher_state_update(cur, &prev, cfg.merge.lambda).map_err(|e| e.in_task(t))?)
            }
            (Some(prev), None) => Some(prev),
            (_, cur) => cur.cloned(),
        };
        observer(TaskEvent {
            task: t,
            finetuned: &finetuned,
            finetuned_fisher: fisher_t.as_ref(),
            optimizer: optimizer.as_ref(),
            merged: &current,
            fisher: fisher_acc.as_ref(),
            prototypes: &store,
        })?;
        drop(finetuned);
        drop(fisher_t);
        drop(optimizer);
        running = Some(current);
    }

    let result = RunResult {
        r,
        a,
        biases,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    };
    Ok(RunOutput {
        result,
        setup,
        model: running.expect("sequence is non-empty"),
        fisher: fisher_acc,
        prototypes: store,
    })
}

/// Models after the first and second task, trained as the run's flags dictate:
/// in tangent mode both displacements start from zero at the base, otherwise
/// the second model continues from the first.
#[derive(Debug, Clone)]
pub struct TaskPair<T> {
    pub setup: Setup<T>,
    pub first: Model<T>,
    pub first_fisher: FisherAccumulator<T>,
    pub second: Model<T>,
    pub second_fisher: FisherAccumulator<T>,
}

pub fn train_task_pair<T: Scalar>(cfg: &RunConfig, seq: &TaskSequence<T>) -> Result<TaskPair<T>> {
    if seq.len() < 2 {
        return Err(Error::Usage("a task pair needs at least two tasks".into()));
    }
    let setup = Setup::new(cfg, seq)?;
    let ntk = cfg.flags.ntk;
    let (first, f1) = finetune_task(cfg, &setup, setup.base_model(ntk), &seq.tasks[0], 0)?;
    let start = if ntk { setup.base_model(true) } else { first.clone() };
    let (second, f2) = finetune_task(cfg, &setup, start, &seq.tasks[1], 1)?;
    let missing = || Error::State("training took no optimizer steps; no Fisher available".into());
    Ok(TaskPair {
        first_fisher: f1.ok_or_else(missing)?,
        second_fisher: f2.ok_or_else(missing)?,
        setup,
        first,
        second,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    Linear,
    Fisher,
}

impl std::str::FromStr for InterpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(InterpMode::Linear),
            "fisher" => Ok(InterpMode::Fisher),
            other => Err(Error::Usage(format!("unknown interpolation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpRow {
    pub alpha: f64,
    pub avg_accuracy: f64,
    pub avg_loss: f64,
}

/// `n` evenly spaced points in `[0, 1]`.
pub fn alpha_grid(n: usize) -> Result<Vec<f64>> {
    match n {
        0 => Err(Error::Usage("grid needs at least one point".into())),
        1 => Ok(vec![0.0]),
        _ => Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect()),
    }
}

/// Per-task accuracy and cross-entropy of a model evaluated offline: prototypes
/// are computed from every task's train split under the model itself, and the
/// loss uses the head restricted to each task's classes.
pub fn evaluate_offline<T: Scalar>(
    cfg: &ModelConfig,
    model: &Model<T>,
    head: &FrozenHead<T>,
    tasks: &[TaskDataset<T>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut store = PrototypeStore::new(PrototypePolicy::RunningMean);
    for (i, task) in tasks.iter().enumerate() {
        update_prototypes(cfg, model, task.train.x.view(), &task.train.y, &task.classes, i, &mut store)?;
    }
    let acc = evaluate(cfg, model, &store, tasks)?;
    let loss = tasks
        .iter()
        .map(|task| {
            let z = model.embed(cfg, task.test.x.view())?;
            Ok(head.restrict(&task.classes)?.loss(z.view(), &task.test.y)?.as_f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((acc, loss))
}

/// Sweeps the path between two models. `Linear` mode interpolates
/// parameters; `Fisher` mode uses the Fisher-weighted merge with `λ = α`
/// (weight on the second model). α = 0 reproduces the first model exactly
/// and α = 1 the second.
#[allow(clippy::too_many_arguments)]
pub fn interpolation_experiment<T: Scalar>(
    cfg: &ModelConfig,
    head: &FrozenHead<T>,
    first: &Model<T>,
    first_fisher: Option<&FisherAccumulator<T>>,
    second: &Model<T>,
    second_fisher: Option<&FisherAccumulator<T>>,
    alphas: &[f64],
    tasks: &[TaskDataset<T>],
    mode: InterpMode,
) -> Result<Vec<InterpRow>> {
    match (first, second) {
        (Model::Standard(_), Model::Standard(_)) => {}
        (Model::Linearized(a), Model::Linearized(b)) => {
            if !Arc::ptr_eq(a.base_arc(), b.base_arc()) && a.base() != b.base() {
                return Err(Error::Usage("linearized models must share their base".into()));
            }
        }
        _ => return Err(Error::Usage("cannot interpolate a standard and a linearized model".into())),
    }
    let (fa, fb) = match mode {
        InterpMode::Linear => (None, None),
        InterpMode::Fisher => (
            Some(first_fisher.ok_or_else(|| Error::Usage("fisher mode needs the first model's Fisher".into()))?),
            Some(second_fisher.ok_or_else(|| Error::Usage("fisher mode needs the second model's Fisher".into()))?),
        ),
    };
    alphas
        .iter()
        .map(|&alpha| {
            let params = match (fa, fb) {
                (Some(fa), Some(fb)) => {
                    let mcfg = MergeConfig {
                        lambda: alpha,
                        ..MergeConfig::default()
                    };
                    fisher_merge(second.trainable(), fb, first.trainable(), fa, &mcfg)?
                }
                _ => interpolate(first.trainable(), second.trainable(), alpha)?,
            };
            let model = first.with_trainable(params)?;
            let (acc, loss) = evaluate_offline(cfg, &model, head, tasks)?;
            Ok(InterpRow {
                alpha,
                avg_accuracy: mean(&acc),
                avg_loss: mean(&loss),
            })
        })
        .collect()
}
