//! Post-merge representation alignment.
//!
//! After a merge the new model's features drift away from those of the
//! previous merged model. The drift is measured as the mean per-sample
//! Euclidean distance between the two feature sets, and reduced by gradient
//! descent on the projection layer alone.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{projection_split, Model, ModelConfig};
use crate::scalar::Scalar;

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_LR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub d_before: f64,
    pub d_after: f64,
    pub steps_taken: usize,
    /// Bias after every descent step.
    pub per_step_trace: Vec<f64>,
}

fn mean_row_distance<T: Scalar>(a: &ArrayView2<'_, T>, b: &ArrayView2<'_, T>) -> T {
    let n = T::lit(a.nrows() as f64);
    a.axis_iter(Axis(0))
        .zip(b.axis_iter(Axis(0)))
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb.iter())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<T>()
                .sqrt()
        })
        .sum::<T>()
        / n
}

/// `(1/|D|)·Σ_x ‖z_a(x) − z_b(x)‖₂` on unnormalized features.
pub fn representation_bias<T: Scalar>(
    cfg: &ModelConfig,
    model_a: &Model<T>,
    model_b: &Model<T>,
    x: ArrayView2<'_, T>,
) -> Result<T> {
    if x.nrows() == 0 {
        return Err(Error::Data("representation bias needs at least one sample".into()));
    }
    let za = model_a.embed(cfg, x)?;
    let zb = model_b.embed(cfg, x)?;
    Ok(mean_row_distance(&za.view(), &zb.view()))
}

/// Moves the projection layer of `merged` toward the features of `reference`
/// on `x`. Descent runs on the mean squared feature distance; the snapshot
/// with the lowest observed bias is returned, so `d_after <= d_before`.
pub fn refine_last_layer<T: Scalar>(
    cfg: &ModelConfig,
    merged: &Model<T>,
    reference: &Model<T>,
    x: ArrayView2<'_, T>,
    steps: usize,
    lr: f64,
) -> Result<(Model<T>, BiasReport)> {
    let d_before = representation_bias(cfg, merged, reference, x)?;
    if !d_before.is_finite() {
        return Err(Error::numeric("features", "non-finite representation bias"));
    }
    if steps == 0 {
        let report = BiasReport {
            d_before: d_before.as_f64(),
            d_after: d_before.as_f64(),
            steps_taken: 0,
            per_step_trace: Vec::new(),
        };
        return Ok((merged.clone(), report));
    }

    let target = reference.embed(cfg, x)?;
    let (h, offset) = projection_split(cfg, merged, x)?;
    let [w_name, b_name] = cfg.projection_blocks();
    let params = merged.trainable();
    let mut w = params.matrix(&w_name)?.to_owned();
    let mut b = params.vector(&b_name)?.to_owned();
    let base = offset - &target;
    let scale = T::lit(2.0 * lr) / T::lit(x.nrows() as f64);

    let mut best: Option<(T, Array2<T>, ndarray::Array1<T>)> = None;
    let mut best_d = d_before;
    let mut trace = Vec::with_capacity(steps);
    let mut residual = &base + &h.dot(&w.t()) + &b;
    for _ in 0..steps {
        w.scaled_add(-scale, &residual.t().dot(&h));
        b.scaled_add(-scale, &residual.sum_axis(Axis(0)));
        residual = &base + &h.dot(&w.t()) + &b;
        let d = mean_row_distance(&residual.view(), &Array2::zeros(residual.raw_dim()).view());
        if !d.is_finite() {
            return Err(Error::numeric(&w_name, "refinement diverged"));
        }
        trace.push(d.as_f64());
        if d < best_d {
            best_d = d;
            best = Some((d, w.clone(), b.clone()));
        }
    }

    let refined = match best {
        Some((_, bw, bb)) => {
            let mut p = params.clone();
            p.matrix_mut(&w_name)?.assign(&bw);
            p.vector_mut(&b_name)?.assign(&bb);
            merged.with_trainable(p)?
        }
        None => merged.clone(),
    };
    let report = BiasReport {
        d_before: d_before.as_f64(),
        d_after: best_d.as_f64(),
        steps_taken: steps,
        per_step_trace: trace,
    };
    Ok((refined, report))
}
