//! Weight-space combination operators.
//!
//! The central operator is the diagonal-Fisher closed form
//!
//! ```text
//! θ* = (λ·F_cur ⊙ θ_cur + (1−λ)·F_prev ⊙ θ_prev) / (λ·F_cur + (1−λ)·F_prev)
//! ```
//!
//! which minimizes `(1−λ)(θ−θ_prev)ᵀF_prev(θ−θ_prev) + λ(θ−θ_cur)ᵀF_cur(θ−θ_cur)`
//! elementwise. With equal Fishers it reduces to the λ-weighted average.
//! The baselines (average, max-magnitude, random mix) and straight-line
//! interpolation live here as well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Denominator floor below which an entry falls back to the plain λ-average.
pub const DEFAULT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherSource {
    SingleTask,
    Merged,
}

/// Nonnegative diagonal curvature estimate, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherAccumulator<T> {
    values: ParamSet<T>,
    source: FisherSource,
}

impl<T: Scalar> FisherAccumulator<T> {
    pub fn new(values: ParamSet<T>, source: FisherSource) -> Result<Self> {
        check_nonnegative(&values)?;
        Ok(FisherAccumulator { values, source })
    }

    pub fn values(&self) -> &ParamSet<T> {
        &self.values
    }

    pub fn into_values(self) -> ParamSet<T> {
        self.values
    }

    pub fn source(&self) -> FisherSource {
        self.source
    }
}

fn check_nonnegative<T: Scalar>(values: &ParamSet<T>) -> Result<()> {
    for (spec, block) in values.blocks() {
        if block.iter().any(|v| !(*v >= T::zero()) || !v.is_finite()) {
            return Err(Error::numeric(&spec.name, "Fisher entries must be finite and >= 0"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherKind {
    BiasCorrected,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub lambda: f64,
    pub floor: f64,
    pub fisher_kind: FisherKind,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            lambda: 0.5,
            floor: DEFAULT_FLOOR,
            fisher_kind: FisherKind::BiasCorrected,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit("lambda", self.lambda)?;
        if !(self.floor > 0.0) {
            return Err(Error::Usage(format!("merge floor must be > 0, got {}", self.floor)));
        }
        Ok(())
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Usage(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// Fisher-weighted merge of the current model into the previous one.
///
/// Entries whose weighted Fisher mass is below `cfg.floor` use the plain
/// λ-weighted average instead.
pub fn fisher_merge<T: Scalar>(
    theta_cur: &ParamSet<T>,
    fisher_cur: &FisherAccumulator<T>,
    theta_prev: &ParamSet<T>,
    fisher_prev: &FisherAccumulator<T>,
    cfg: &MergeConfig,
) -> Result<ParamSet<T>> {
    cfg.validate()?;
    theta_cur.ensure_compatible(theta_prev)?;
    theta_cur.ensure_compatible(fisher_cur.values())?;
    theta_cur.ensure_compatible(fisher_prev.values())?;
    check_nonnegative(fisher_cur.values())?;
    check_nonnegative(fisher_prev.values())?;

    let lambda = T::lit(cfg.lambda);
    let rest = T::one() - lambda;
    let floor = T::lit(cfg.floor);
    let mut out = theta_cur.zeros_like();
    let cur = theta_cur.as_slice().iter().zip(fisher_cur.values().as_slice());
    let prev = theta_prev.as_slice().iter().zip(fisher_prev.values().as_slice());
    for (o, ((&tc, &fc), (&tp, &fp))) in out.as_mut_slice().iter_mut().zip(cur.zip(prev)) {
        let wc = lambda * fc;
        let wp = rest * fp;
        let den = wc + wp;
        *o = if den < floor {
            lambda * tc + rest * tp
        } else {
            (wc / den) * tc + (wp / den) * tp
        };
    }
    Ok(out)
}

/// `λ·F_cur + (1−λ)·F_prev`, carried forward to the next merge.
pub fn fisher_state_update<T: Scalar>(
    fisher_cur: &FisherAccumulator<T>,
    fisher_prev: &FisherAccumulator<T>,
    lambda: f64,
) -> Result<FisherAccumulator<T>> {
    check_unit("lambda", lambda)?;
    let (l, r) = (T::lit(lambda), T::one() - T::lit(lambda));
    let values = fisher_cur
        .values()
        .zip_map(fisher_prev.values(), |c, p| l * c + r * p)?;
    FisherAccumulator::new(values, FisherSource::Merged)
}

fn check_list<T: Scalar>(models: &[&ParamSet<T>], what: &str) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::Usage(format!("{what} needs at least one model")))?;
    for m in &models[1..] {
        first.ensure_compatible(m)?;
    }
    Ok(())
}

/// Elementwise arithmetic mean.
pub fn weight_average<T: Scalar>(models: &[&ParamSet<T>]) -> Result<ParamSet<T>> {
    check_list(models, "weight_average")?;
    let mut out = models[0].zeros_like();
    let n = T::lit(models.len() as f64);
    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
        let sum = models.iter().fold(T::zero(), |acc, m| acc + m.as_slice()[i]);
        *o = sum / n;
    }
    Ok(out)
}

/// Per entry, the signed value of largest magnitude; the earliest vector wins ties.
pub fn maxabs<T: Scalar>(task_vectors: &[&ParamSet<T>]) -> Result<ParamSet<T>> {
    check_list(task_vectors, "maxabs")?;
    let mut out = task_vectors[0].clone();
    for tv in &task_vectors[1..] {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(tv.as_slice()) {
            if v.abs() > o.abs() {
                *o = v;
            }
        }
    }
    Ok(out)
}

/// Per entry, the value of one source model drawn uniformly with a seeded generator.
pub fn randmix<T: Scalar>(models: &[&ParamSet<T>], seed: u64) -> Result<ParamSet<T>> {
    check_list(models, "randmix")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = models[0].zeros_like();
    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
        let pick = rng.gen_range(0..models.len());
        *o = models[pick].as_slice()[i];
    }
    Ok(out)
}

/// Streaming form of [`randmix`]: keeps each entry of `mixed` (already a
/// uniform draw over `count − 1` models) and replaces it by `newest` with
/// probability `1/count`, so the result is uniform over all `count` models
/// without retaining them.
pub fn randmix_stream<T: Scalar>(
    mixed: &ParamSet<T>,
    newest: &ParamSet<T>,
    count: usize,
    seed: u64,
) -> Result<ParamSet<T>> {
    if count == 0 {
        return Err(Error::Usage("randmix_stream needs count >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mixed.zip_map(newest, |old, new| {
        if rng.gen_range(0..count) == 0 {
            new
        } else {
            old
        }
    })
}

/// `(1−α)·θ_a + α·θ_b`.
pub fn interpolate<T: Scalar>(theta_a: &ParamSet<T>, theta_b: &ParamSet<T>, alpha: f64) -> Result<ParamSet<T>> {
    check_unit("alpha", alpha)?;
    let (wa, wb) = (T::one() - T::lit(alpha), T::lit(alpha));
    theta_a.zip_map(theta_b, |a, b| wa * a + wb * b)
}
