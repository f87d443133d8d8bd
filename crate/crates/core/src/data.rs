//! Task sequences: synthetic generators and CSV ingestion.
//!
//! Class-incremental sequences split a global label set into disjoint
//! per-task subsets; domain-incremental sequences repeat the full label set
//! under a different input transform per task.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Cil,
    Dil,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cil" => Ok(Scenario::Cil),
            "dil" => Ok(Scenario::Dil),
            other => Err(Error::Usage(format!("unknown scenario `{other}`"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Cil => "cil",
            Scenario::Dil => "dil",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub x: Array2<T>,
    pub y: Vec<usize>,
}

impl<T: Scalar> Split<T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn from_rows(rows: Vec<(Vec<T>, usize)>, dim: usize) -> Result<Self> {
        let n = rows.len();
        let mut flat = Vec::with_capacity(n * dim);
        let mut y = Vec::with_capacity(n);
        for (features, label) in rows {
            flat.extend(features);
            y.push(label);
        }
        let x = Array2::from_shape_vec((n, dim), flat).map_err(|e| Error::Data(e.to_string()))?;
        Ok(Split { x, y })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset<T> {
    /// Sorted class ids present in this task.
    pub classes: Vec<usize>,
    pub train: Split<T>,
    pub test: Split<T>,
}

impl<T: Scalar> TaskDataset<T> {
    pub fn new(classes: Vec<usize>, train: Split<T>, test: Split<T>) -> Result<Self> {
        let ds = TaskDataset { classes, train, test };
        ds.validate()?;
        Ok(ds)
    }

    pub fn input_dim(&self) -> usize {
        self.train.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let classes: BTreeSet<usize> = self.classes.iter().copied().collect();
        if classes.len() != self.classes.len() || !self.classes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Data("task classes must be sorted and unique".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Data("task has no classes".into()));
        }
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            if split.x.nrows() != split.y.len() {
                return Err(Error::Data(format!(
                    "{name} split has {} rows and {} labels",
                    split.x.nrows(),
                    split.y.len()
                )));
            }
            if split.x.ncols() != self.train.x.ncols() {
                return Err(Error::Data("train and test widths differ".into()));
            }
            if let Some(bad) = split.y.iter().find(|y| !classes.contains(y)) {
                return Err(Error::Data(format!("{name} label {bad} not among task classes")));
            }
            for c in &self.classes {
                if !split.y.contains(c) {
                    return Err(Error::Data(format!("class {c} has no {name} samples")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence<T> {
    pub tasks: Vec<TaskDataset<T>>,
    pub scenario: Scenario,
    pub global_classes: Vec<usize>,
}

impl<T: Scalar> TaskSequence<T> {
    /// Validates every task and the scenario contract.
    pub fn new(tasks: Vec<TaskDataset<T>>, scenario: Scenario) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Data("task sequence is empty".into()));
        }
        let dim = tasks[0].input_dim();
        for (i, t) in tasks.iter().enumerate() {
            t.validate().map_err(|e| e.in_task(i))?;
            if t.input_dim() != dim {
                return Err(Error::Data(format!(
                    "task {i} has input width {}, task 0 has {dim}",
                    t.input_dim()
                )));
            }
        }
        let global: BTreeSet<usize> = tasks.iter().flat_map(|t| t.classes.iter().copied()).collect();
        let global_classes: Vec<usize> = global.into_iter().collect();
        match scenario {
            Scenario::Cil => {
                let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
                for (i, t) in tasks.iter().enumerate() {
                    for &c in &t.classes {
                        if let Some(first) = seen.insert(c, i) {
                            return Err(Error::Scenario(format!(
                                "class {c} appears in tasks {first} and {i}; CIL tasks must be disjoint"
                            )));
                        }
                    }
                }
            }
            Scenario::Dil => {
                for (i, t) in tasks.iter().enumerate() {
                    if t.classes != global_classes {
                        return Err(Error::Scenario(format!(
                            "task {i} classes {:?} differ from the shared label space {:?}",
                            t.classes, global_classes
                        )));
                    }
                }
            }
        }
        Ok(TaskSequence {
            tasks,
            scenario,
            global_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].input_dim()
    }

    pub fn num_samples(&self) -> usize {
        self.tasks.iter().map(|t| t.train.len() + t.test.len()).sum()
    }
}

/// Parameters of the class-incremental Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CilParams {
    pub seed: u64,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Isotropic noise standard deviation.
    pub spread: f64,
    /// Radius of the sphere the class means are drawn on.
    pub radius: f64,
}

impl CilParams {
    /// Means on a sphere of radius `4·spread` (radius 4 when `spread` is 0).
    pub fn new(
        seed: u64,
        num_tasks: usize,
        classes_per_task: usize,
        samples_per_class: usize,
        input_dim: usize,
        spread: f64,
    ) -> Self {
        CilParams {
            seed,
            num_tasks,
            classes_per_task,
            samples_per_class,
            input_dim,
            spread,
            radius: default_radius(spread),
        }
    }
}

pub fn default_radius(spread: f64) -> f64 {
    if spread > 0.0 {
        4.0 * spread
    } else {
        4.0
    }
}

/// Parameters of the domain-incremental generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilParams {
    pub seed: u64,
    pub num_domains: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub radius: f64,
    /// Translation length and rotation strength of each domain.
    pub domain_shift: f64,
}

fn check_counts(counts: &[(&str, usize)], samples_per_class: usize, spread: f64, radius: f64) -> Result<()> {
    for (name, v) in counts {
        if *v == 0 {
            return Err(Error::Usage(format!("{name} must be >= 1")));
        }
    }
    if samples_per_class < 2 {
        return Err(Error::Usage(
            "samples_per_class must be >= 2 so every class has train and test samples".into(),
        ));
    }
    if !(spread >= 0.0) || !(radius >= 0.0) {
        return Err(Error::Usage("spread and radius must be non-negative".into()));
    }
    Ok(())
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn class_means(rng: &mut ChaCha8Rng, count: usize, dim: usize, radius: f64) -> Vec<Array1<f64>> {
    (0..count)
        .map(|_| loop {
            let v = Array1::from_shape_fn(dim, |_| gaussian(rng));
            let norm = v.dot(&v).sqrt();
            if norm > 1e-12 {
                break v * (radius / norm);
            }
        })
        .collect()
}

/// Draws `n` samples around `mean`, split 80/20 after a seeded shuffle.
fn sample_class(
    rng: &mut ChaCha8Rng,
    mean: &Array1<f64>,
    n: usize,
    spread: f64,
) -> (Vec<Array1<f64>>, Vec<Array1<f64>>) {
    let mut samples: Vec<Array1<f64>> = (0..n)
        .map(|_| mean + &Array1::from_shape_fn(mean.len(), |_| spread * gaussian(rng)))
        .collect();
    samples.shuffle(rng);
    let n_train = ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n - 1);
    let test = samples.split_off(n_train);
    (samples, test)
}

fn to_split<T: Scalar>(rows: Vec<(Array1<f64>, usize)>, dim: usize) -> Result<Split<T>> {
    Split::from_rows(
        rows.into_iter()
            .map(|(v, y)| (v.iter().map(|&x| T::lit(x)).collect(), y))
            .collect(),
        dim,
    )
}

/// Class-incremental Gaussian blobs: classes `[k·c, (k+1)·c)` form task `k`.
pub fn gen_cil<T: Scalar>(p: &CilParams) -> Result<TaskSequence<T>> {
    check_counts(
        &[
            ("num_tasks", p.num_tasks),
            ("classes_per_task", p.classes_per_task),
            ("input_dim", p.input_dim),
        ],
        p.samples_per_class,
        p.spread,
        p.radius,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let total = p.num_tasks * p.classes_per_task;
    let means = class_means(&mut rng, total, p.input_dim, p.radius);
    let mut tasks = Vec::with_capacity(p.num_tasks);
    for k in 0..p.num_tasks {
        let classes: Vec<usize> = (k * p.classes_per_task..(k + 1) * p.classes_per_task).collect();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for &c in &classes {
            let (tr, te) = sample_class(&mut rng, &means[c], p.samples_per_class, p.spread);
            train.extend(tr.into_iter().map(|v| (v, c)));
            test.extend(te.into_iter().map(|v| (v, c)));
        }
        tasks.push(TaskDataset::new(
            classes,
            to_split(train, p.input_dim)?,
            to_split(test, p.input_dim)?,
        )?);
    }
    TaskSequence::new(tasks, Scenario::Cil)
}

/// Orthogonal map and offset applied to every sample of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    pub rotation: Array2<f64>,
    pub translation: Array1<f64>,
}

/// Cayley transform `(I − S)⁻¹(I + S)` of a seeded skew-symmetric `S` with
/// Frobenius norm `strength`; the identity when `strength` is 0.
fn cayley_rotation(rng: &mut ChaCha8Rng, dim: usize, strength: f64) -> Result<Array2<f64>> {
    let mut s = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        for j in (i + 1)..dim {
            let v = gaussian(rng);
            s[(i, j)] = v;
            s[(j, i)] = -v;
        }
    }
    let norm = s.norm();
    if norm > 0.0 {
        s *= strength / norm;
    }
    let eye = DMatrix::<f64>::identity(dim, dim);
    let lhs = &eye - &s;
    let rhs = &eye + &s;
    let r = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numeric("rotation", "Cayley system is singular"))?;
    Ok(Array2::from_shape_fn((dim, dim), |(i, j)| r[(i, j)]))
}

/// The per-domain transforms used by [`gen_dil`] for these parameters.
pub fn domain_transforms(p: &DilParams) -> Result<Vec<DomainTransform>> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5eed_d0a1_u64);
    (0..p.num_domains)
        .map(|_| {
            let rotation = cayley_rotation(&mut rng, p.input_dim, p.domain_shift)?;
            let dir = class_means(&mut rng, 1, p.input_dim, 1.0).remove(0);
            Ok(DomainTransform {
                rotation,
                translation: dir * p.domain_shift,
            })
        })
        .collect()
}

/// Domain-incremental blobs: shared class means, one transform per domain.
pub fn gen_dil<T: Scalar>(p: &DilParams) -> Result<TaskSequence<T>> {
    check_counts(
        &[
            ("num_domains", p.num_domains),
            ("num_classes", p.num_classes),
            ("input_dim", p.input_dim),
        ],
        p.samples_per_class,
        p.spread,
        p.radius,
    )?;
    if !(p.domain_shift >= 0.0) {
        return Err(Error::Usage("domain_shift must be non-negative".into()));
    }
    let transforms = domain_transforms(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let means = class_means(&mut rng, p.num_classes, p.input_dim, p.radius);
    let classes: Vec<usize> = (0..p.num_classes).collect();
    let mut tasks = Vec::with_capacity(p.num_domains);
    for tf in &transforms {
        let apply = |v: Array1<f64>| tf.rotation.dot(&v) + &tf.translation;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for &c in &classes {
            let (tr, te) = sample_class(&mut rng, &means[c], p.samples_per_class, p.spread);
            train.extend(tr.into_iter().map(|v| (apply(v), c)));
            test.extend(te.into_iter().map(|v| (apply(v), c)));
        }
        tasks.push(TaskDataset::new(
            classes.clone(),
            to_split(train, p.input_dim)?,
            to_split(test, p.input_dim)?,
        )?);
    }
    TaskSequence::new(tasks, Scenario::Dil)
}

/// Writes `task,split,label,f0,...` rows, train before test within each task.
pub fn write_csv<T: Scalar, W: Write>(seq: &TaskSequence<T>, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let dim = seq.input_dim();
    let mut header = vec!["task".to_string(), "split".into(), "label".into()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_io)?;
    for (k, task) in seq.tasks.iter().enumerate() {
        for (name, split) in [("train", &task.train), ("test", &task.test)] {
            for (row, label) in split.x.rows().into_iter().zip(&split.y) {
                let mut rec = vec![k.to_string(), name.to_string(), label.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv<T: Scalar>(seq: &TaskSequence<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(seq, std::io::BufWriter::new(file))
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}

/// Parses the dataset CSV format and validates the scenario contract.
///
/// `task_column` names the column holding the 0-based task index; the
/// remaining required columns are `split`, `label` and `f0..f{d-1}`.
pub fn read_csv<T: Scalar, R: Read>(reader: R, scenario: Scenario, task_column: &str) -> Result<TaskSequence<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            detail: e.to_string(),
        })?
        .clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            detail: format!("missing column `{name}`"),
        })
    };
    let (task_idx, split_idx, label_idx) = (col(task_column)?, col("split")?, col("label")?);
    let mut feature_idx = Vec::new();
    while let Some(pos) = headers.iter().position(|h| h == format!("f{}", feature_idx.len())) {
        feature_idx.push(pos);
    }
    if feature_idx.is_empty() {
        return Err(Error::Parse {
            line: 1,
            detail: "no feature columns (expected f0, f1, ...)".into(),
        });
    }
    let dim = feature_idx.len();

    type Rows<T> = Vec<(Vec<T>, usize)>;
    let mut by_task: BTreeMap<usize, (Rows<T>, Rows<T>)> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |detail: String| Error::Parse { line, detail };
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let task: usize = field(task_idx)
            .parse()
            .map_err(|_| err(format!("bad task index `{}`", field(task_idx))))?;
        let label: usize = field(label_idx)
            .parse()
            .map_err(|_| err(format!("bad label `{}`", field(label_idx))))?;
        let features = feature_idx
            .iter()
            .map(|&i| {
                field(i)
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(T::lit)
                    .ok_or_else(|| err(format!("bad feature value `{}`", field(i))))
            })
            .collect::<Result<Vec<T>>>()?;
        let entry = by_task.entry(task).or_default();
        match field(split_idx) {
            "train" => entry.0.push((features, label)),
            "test" => entry.1.push((features, label)),
            other => return Err(err(format!("split must be train or test, got `{other}`"))),
        }
    }
    if by_task.is_empty() {
        return Err(Error::Data("dataset has no rows".into()));
    }
    if by_task.keys().copied().ne(0..by_task.len()) {
        return Err(Error::Data(format!(
            "task indices must be 0..{}, found {:?}",
            by_task.len(),
            by_task.keys().collect::<Vec<_>>()
        )));
    }
    let mut tasks = Vec::with_capacity(by_task.len());
    for (k, (train, test)) in by_task {
        let classes: BTreeSet<usize> = train.iter().chain(&test).map(|(_, y)| *y).collect();
        let ds = TaskDataset::new(
            classes.into_iter().collect(),
            Split::from_rows(train, dim)?,
            Split::from_rows(test, dim)?,
        )
        .map_err(|e| e.in_task(k))?;
        tasks.push(ds);
    }
    TaskSequence::new(tasks, scenario)
}

pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, scenario: Scenario, task_column: &str) -> Result<TaskSequence<T>> {
    let file = std::fs::File::open(path)?;
    read_csv(std::io::BufReader::new(file), scenario, task_column)
}

/// Seeded permutation of `0..n`, used for minibatch order.
pub fn shuffled_indices(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
