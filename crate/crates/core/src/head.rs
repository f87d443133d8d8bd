//! Frozen cosine-similarity classifier used for training, and the
//! nearest-class-mean prototype store used for evaluation.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Model, ModelConfig};
use crate::scalar::Scalar;

/// Added to every embedding norm before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Fixed unit-norm class embeddings and a softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenHead<T> {
    class_ids: Vec<usize>,
    embeddings: Array2<T>,
    temperature: T,
}

impl<T: Scalar> FrozenHead<T> {
    /// Rows of `embeddings` are normalized on construction; a zero row is rejected.
    pub fn new(class_ids: Vec<usize>, embeddings: Array2<T>, temperature: T) -> Result<Self> {
        if !(temperature > T::zero()) {
            return Err(Error::Usage(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if class_ids.len() != embeddings.nrows() {
            return Err(Error::shape(
                "head.embeddings",
                format!("{} class ids for {} rows", class_ids.len(), embeddings.nrows()),
            ));
        }
        let mut seen = class_ids.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != class_ids.len() {
            return Err(Error::Usage("duplicate class id in head".into()));
        }
        let mut embeddings = embeddings;
        for (row, mut e) in embeddings.axis_iter_mut(Axis(0)).enumerate() {
            let norm = e.dot(&e).sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::numeric(
                    "head.embeddings",
                    format!("class row {row} cannot be normalized"),
                ));
            }
            e.mapv_inplace(|v| v / norm);
        }
        Ok(FrozenHead {
            class_ids,
            embeddings,
            temperature,
        })
    }

    /// Takes rows that are already unit-norm (to within 1e-6) and stores them
    /// verbatim, so a saved head reloads bit for bit.
    pub fn from_unit_rows(class_ids: Vec<usize>, embeddings: Array2<T>, temperature: T) -> Result<Self> {
        let checked = Self::new(class_ids, embeddings.clone(), temperature)?;
        for (row, e) in embeddings.axis_iter(Axis(0)).enumerate() {
            if (e.dot(&e).sqrt() - T::one()).abs() > T::lit(1e-6) {
                return Err(Error::numeric("head.embeddings", format!("class row {row} is not unit norm")));
            }
        }
        Ok(FrozenHead {
            embeddings,
            ..checked
        })
    }

    /// Seeded Gaussian directions normalized to the unit sphere.
    pub fn random(seed: u64, class_ids: Vec<usize>, embed_dim: usize, temperature: T) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = class_ids.len();
        let embeddings = Array2::from_shape_fn((rows, embed_dim), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::lit(v)
        });
        Self::new(class_ids, embeddings, temperature)
    }

    /// The head restricted to `class_ids`, in the given order.
    pub fn restrict(&self, class_ids: &[usize]) -> Result<Self> {
        let rows: Vec<usize> = class_ids
            .iter()
            .map(|c| self.row_of(*c))
            .collect::<Result<_>>()?;
        let embeddings = self.embeddings.select(Axis(0), &rows);
        Ok(FrozenHead {
            class_ids: class_ids.to_vec(),
            embeddings,
            temperature: self.temperature,
        })
    }

    fn row_of(&self, class: usize) -> Result<usize> {
        self.class_ids
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| Error::Data(format!("label {class} is not a class of this head")))
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn embeddings(&self) -> &Array2<T> {
        &self.embeddings
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    fn check_dim(&self, z: &ArrayView2<'_, T>) -> Result<()> {
        if z.ncols() != self.embed_dim() {
            return Err(Error::shape(
                "embedding",
                format!("expected width {}, got {}", self.embed_dim(), z.ncols()),
            ));
        }
        Ok(())
    }

    /// Cosine similarities `s_k` of every row of `z` to every class.
    pub fn similarities(&self, z: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.check_dim(&z)?;
        let eps = T::lit(NORM_EPS);
        let mut s = z.dot(&self.embeddings.t());
        for (mut row, zr) in s.axis_iter_mut(Axis(0)).zip(z.axis_iter(Axis(0))) {
            let norm = zr.dot(&zr).sqrt() + eps;
            row.mapv_inplace(|v| v / norm);
        }
        Ok(s)
    }

    /// `softmax(s / temperature)` row by row.
    pub fn class_probabilities(&self, z: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let mut s = self.similarities(z)?;
        for mut row in s.axis_iter_mut(Axis(0)) {
            softmax_in_place(&mut row.view_mut(), self.temperature);
        }
        Ok(s)
    }

    /// Zero-shot prediction: the class with the highest similarity.
    pub fn predict(&self, z: ArrayView2<'_, T>) -> Result<Vec<usize>> {
        let s = self.similarities(z)?;
        Ok(s.axis_iter(Axis(0))
            .map(|row| self.class_ids[argmax_first(row)])
            .collect())
    }

    /// Mean cross-entropy over the batch and its gradient with respect to `z`.
    pub fn loss_and_grad(&self, z: ArrayView2<'_, T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
        self.check_dim(&z)?;
        if labels.len() != z.nrows() {
            return Err(Error::Data(format!(
                "{} labels for {} embeddings",
                labels.len(),
                z.nrows()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let rows: Vec<usize> = labels.iter().map(|&c| self.row_of(c)).collect::<Result<_>>()?;
        let eps = T::lit(NORM_EPS);
        let scale = T::one() / T::lit(labels.len() as f64);
        let inv_temp = T::one() / self.temperature;
        let mut grad = Array2::zeros(z.raw_dim());
        let mut loss = T::zero();
        for ((zr, mut gr), &target) in z.axis_iter(Axis(0)).zip(grad.axis_iter_mut(Axis(0))).zip(&rows) {
            let r = zr.dot(&zr).sqrt();
            let n = r + eps;
            let u = zr.mapv(|v| v / n);
            let mut p = self.embeddings.dot(&u);
            let log_norm = softmax_in_place(&mut p.view_mut(), self.temperature);
            let s_target = self.embeddings.row(target).dot(&u);
            loss += log_norm - s_target * inv_temp;

            // d loss / d s = (p - onehot) / T
            p[target] -= T::one();
            p.mapv_inplace(|v| v * inv_temp);
            let g_u: Array1<T> = self.embeddings.t().dot(&p);
            let mut g_z = g_u.mapv(|v| v / n);
            if r > T::zero() {
                let coef = zr.dot(&g_u) / (r * n * n);
                g_z.zip_mut_with(&zr, |g, &zv| *g -= zv * coef);
            }
            gr.assign(&g_z.mapv(|v| v * scale));
        }
        Ok((loss * scale, grad))
    }

    pub fn loss(&self, z: ArrayView2<'_, T>, labels: &[usize]) -> Result<T> {
        Ok(self.loss_and_grad(z, labels)?.0)
    }
}

/// Replaces `row` by `softmax(row / temperature)` and returns the
/// log-partition `log Σ exp(row / temperature)`.
fn softmax_in_place<T: Scalar>(row: &mut ndarray::ArrayViewMut1<'_, T>, temperature: T) -> T {
    let inv = T::one() / temperature;
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v * inv));
    let mut total = T::zero();
    row.mapv_inplace(|v| {
        let e = (v * inv - max).exp();
        total += e;
        e
    });
    row.mapv_inplace(|v| v / total);
    max + total.ln()
}

/// Index of the largest entry; the earliest wins ties.
fn argmax_first<T: Scalar>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// How the store treats a class that already has a prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypePolicy {
    /// Written once, rejected afterwards (class-incremental).
    Immutable,
    /// Sample-count weighted running mean across tasks (domain-incremental).
    RunningMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype<T> {
    /// Unit-normalized mean embedding used for classification.
    pub unit: Vec<T>,
    /// Unnormalized mean, kept for running-mean updates.
    pub mean: Vec<T>,
    pub count: usize,
    /// Task index at which the prototype was last written.
    pub task: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore<T> {
    policy: PrototypePolicy,
    entries: BTreeMap<usize, Prototype<T>>,
}

impl<T: Scalar> PrototypeStore<T> {
    pub fn new(policy: PrototypePolicy) -> Self {
        PrototypeStore {
            policy,
            entries: BTreeMap::new(),
        }
    }

    pub fn policy(&self) -> PrototypePolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&Prototype<T>> {
        self.entries.get(&class)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.entries.contains_key(&class)
    }

    /// Prototypes in ascending class order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Prototype<T>)> {
        self.entries.iter().map(|(&c, p)| (c, p))
    }

    /// Inserts a stored prototype verbatim (used when restoring checkpoints).
    pub fn restore(&mut self, class: usize, prototype: Prototype<T>) {
        self.entries.insert(class, prototype);
    }

    /// Folds per-class means of `z` into the store. Every class in `classes`
    /// must have at least one sample; nothing is written if any check fails.
    pub fn update_from_embeddings(
        &mut self,
        z: ArrayView2<'_, T>,
        labels: &[usize],
        classes: &[usize],
        task: usize,
    ) -> Result<()> {
        if labels.len() != z.nrows() {
            return Err(Error::Data(format!(
                "{} labels for {} embeddings",
                labels.len(),
                z.nrows()
            )));
        }
        let dim = z.ncols();
        let mut sums: BTreeMap<usize, (Array1<T>, usize)> = classes
            .iter()
            .map(|&c| (c, (Array1::zeros(dim), 0)))
            .collect();
        for (row, &label) in z.axis_iter(Axis(0)).zip(labels) {
            let (sum, count) = sums
                .get_mut(&label)
                .ok_or_else(|| Error::Data(format!("label {label} not among task classes")))?;
            *sum += &row;
            *count += 1;
        }
        for (&class, (_, count)) in &sums {
            if *count == 0 {
                return Err(Error::Data(format!("class {class} has no samples")));
            }
            if let Some(existing) = self.entries.get(&class) {
                if existing.mean.len() != dim {
                    return Err(Error::shape(
                        "prototype",
                        format!("class {class} has width {}, batch has {dim}", existing.mean.len()),
                    ));
                }
                if self.policy == PrototypePolicy::Immutable {
                    return Err(Error::State(format!(
                        "prototype for class {class} was written at task {} and is immutable",
                        existing.task
                    )));
                }
            }
        }
        for (class, (sum, count)) in sums {
            let batch_mean = sum.mapv(|v| v / T::lit(count as f64));
            let (mean, total) = match self.entries.get(&class) {
                Some(old) => {
                    let total = old.count + count;
                    let w_old = T::lit(old.count as f64) / T::lit(total as f64);
                    let w_new = T::lit(count as f64) / T::lit(total as f64);
                    let mean: Vec<T> = old
                        .mean
                        .iter()
                        .zip(batch_mean.iter())
                        .map(|(&a, &b)| w_old * a + w_new * b)
                        .collect();
                    (mean, total)
                }
                None => (batch_mean.to_vec(), count),
            };
            let unit = normalize(&mean);
            self.entries.insert(
                class,
                Prototype {
                    unit,
                    mean,
                    count: total,
                    task,
                },
            );
        }
        Ok(())
    }
}

fn normalize<T: Scalar>(v: &[T]) -> Vec<T> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt() + T::lit(NORM_EPS);
    v.iter().map(|&x| x / norm).collect()
}

/// Computes prototypes for `classes` from the embeddings `model` produces on `x`.
pub fn update_prototypes<T: Scalar>(
    cfg: &ModelConfig,
    model: &Model<T>,
    x: ArrayView2<'_, T>,
    labels: &[usize],
    classes: &[usize],
    task: usize,
    store: &mut PrototypeStore<T>,
) -> Result<()> {
    let z = model.embed(cfg, x)?;
    store.update_from_embeddings(z.view(), labels, classes, task)
}

/// Nearest-class-mean prediction by cosine similarity; the smallest class id
/// wins ties.
pub fn predict_nmc<T: Scalar>(z: ArrayView2<'_, T>, store: &PrototypeStore<T>) -> Result<Vec<usize>> {
    if store.is_empty() {
        return Err(Error::State("prototype store is empty".into()));
    }
    let mut out = Vec::with_capacity(z.nrows());
    for zr in z.axis_iter(Axis(0)) {
        let mut best: Option<(usize, T)> = None;
        for (class, proto) in store.iter() {
            if proto.unit.len() != zr.len() {
                return Err(Error::shape(
                    "prototype",
                    format!("class {class} has width {}, embedding has {}", proto.unit.len(), zr.len()),
                ));
            }
            // The norm of z is common to every class, so the raw dot product ranks identically.
            let sim = zr.iter().zip(&proto.unit).map(|(&a, &b)| a * b).sum::<T>();
            match best {
                Some((_, s)) if !(sim > s) => {}
                _ => best = Some((class, sim)),
            }
        }
        out.push(best.expect("store is non-empty").0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn axis_head(temperature: f64) -> FrozenHead<f64> {
        FrozenHead::new(vec![0, 1], array![[1.0, 0.0], [0.0, 1.0]], temperature).unwrap()
    }

    #[test]
    fn symmetric_embedding_gives_uniform_probabilities() {
        let h = 0.5f64.sqrt();
        let p = axis_head(1.0).class_probabilities(array![[h, h]].view()).unwrap();
        assert!((p[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((p[[0, 1]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hand_softmax() {
        let p = axis_head(1.0).class_probabilities(array![[1.0, 0.0]].view()).unwrap();
        let e = std::f64::consts::E;
        assert!((p[[0, 0]] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[[0, 0]] - 0.731059).abs() < 1e-6);
        assert!((p.row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn large_temperature_approaches_uniform() {
        let p = axis_head(1000.0).class_probabilities(array![[1.0, 0.0]].view()).unwrap();
        assert!(p[[0, 0]] - p[[0, 1]] < 1e-3);
        assert!(p[[0, 0]] > p[[0, 1]]);
    }

    #[test]
    fn zero_embedding_stays_finite() {
        let p = axis_head(1.0).class_probabilities(array![[0.0, 0.0]].view()).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        let (loss, g) = axis_head(1.0).loss_and_grad(array![[0.0, 0.0]].view(), &[0]).unwrap();
        assert!(loss.is_finite() && g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn class_swap_symmetric_pair_has_zero_total_gradient() {
        let h = 0.5f64.sqrt();
        let (loss, g) = axis_head(1.0).loss_and_grad(array![[h, h], [h, h]].view(), &[0, 1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        let total = g.sum_axis(Axis(0));
        assert!(total.iter().all(|v| v.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn unknown_label_is_data_error() {
        let err = axis_head(1.0).loss_and_grad(array![[1.0, 0.0]].view(), &[7]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn rows_are_normalized() {
        let head = FrozenHead::<f64>::new(vec![3, 5], array![[3.0, 4.0], [0.0, -2.0]], 0.1).unwrap();
        for row in head.embeddings().axis_iter(Axis(0)) {
            assert!((row.dot(&row).sqrt() - 1.0).abs() <= 1e-12);
        }
        assert!(FrozenHead::new(vec![0], array![[0.0, 0.0]], 1.0).is_err());
        assert!(FrozenHead::new(vec![0], array![[1.0, 0.0]], 0.0).is_err());
    }

    #[test]
    fn restrict_maps_labels() {
        let head = FrozenHead::<f64>::random(1, vec![0, 1, 2, 3], 4, 0.5).unwrap();
        let sub = head.restrict(&[2, 3]).unwrap();
        assert_eq!(sub.embeddings().row(0), head.embeddings().row(2));
        assert!(sub.loss(head.embeddings().slice(ndarray::s![2..3, ..]), &[0]).is_err());
    }

    fn store(protos: &[(usize, [f64; 2])]) -> PrototypeStore<f64> {
        let mut s = PrototypeStore::new(PrototypePolicy::Immutable);
        for &(c, v) in protos {
            s.update_from_embeddings(array![[v[0], v[1]]].view(), &[c], &[c], 0)
                .unwrap();
        }
        s
    }

    #[test]
    fn nmc_picks_nearest_and_breaks_ties_low() {
        let s = store(&[(1, [1.0, 0.0]), (2, [0.0, 1.0])]);
        assert_eq!(predict_nmc(array![[0.9, 0.1]].view(), &s).unwrap(), vec![1]);
        assert_eq!(predict_nmc(array![[0.3, 0.3]].view(), &s).unwrap(), vec![1]);
        let empty = PrototypeStore::<f64>::new(PrototypePolicy::Immutable);
        assert!(matches!(
            predict_nmc(array![[1.0, 0.0]].view(), &empty).unwrap_err(),
            Error::State(_)
        ));
    }

    #[test]
    fn prototype_is_normalized_mean() {
        let mut s = PrototypeStore::new(PrototypePolicy::Immutable);
        s.update_from_embeddings(array![[1.0, 0.0], [0.0, 1.0]].view(), &[4, 4], &[4], 2)
            .unwrap();
        let p = s.get(4).unwrap();
        let h = 0.5f64.sqrt();
        assert!((p.unit[0] - h).abs() < 1e-11 && (p.unit[1] - h).abs() < 1e-11);
        assert_eq!(p.task, 2);
    }

    #[test]
    fn immutable_store_rejects_overwrite() {
        let mut s = store(&[(1, [1.0, 0.0])]);
        let err = s
            .update_from_embeddings(array![[0.0, 1.0]].view(), &[1], &[1], 1)
            .unwrap_err();
        assert!(matches!(err, Error::State(_)));
        assert_eq!(s.get(1).unwrap().unit, vec![1.0 / (1.0 + 1e-12), 0.0]);
    }

    #[test]
    fn class_without_samples_is_rejected() {
        let mut s = PrototypeStore::<f64>::new(PrototypePolicy::Immutable);
        let err = s
            .update_from_embeddings(array![[1.0, 0.0]].view(), &[0], &[0, 1], 0)
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(s.is_empty());
    }

    #[test]
    fn running_mean_weights_by_count() {
        let mut s = PrototypeStore::<f64>::new(PrototypePolicy::RunningMean);
        s.update_from_embeddings(array![[2.0, 0.0]].view(), &[0], &[0], 0).unwrap();
        s.update_from_embeddings(array![[0.0, 3.0], [0.0, 3.0]].view(), &[0, 0], &[0], 1)
            .unwrap();
        let p = s.get(0).unwrap();
        assert_eq!(p.count, 3);
        assert!((p.mean[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.mean[1] - 2.0).abs() < 1e-15);
        assert_eq!(p.task, 1);
    }
}
