//! AdamW with its moment state exposed.
//!
//! The second moment doubles as a diagonal Fisher estimate for merging, so
//! the state is a first-class value rather than an internal detail.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{FisherAccumulator, FisherSource};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// `θ ← θ − γ·(m̂/(√v̂+ε) + wd·θ)`.
    Decoupled,
    /// Decay folded into the gradient before the moment updates.
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            decay_mode: DecayMode::Decoupled,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Usage(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps >= 0.0) || !(self.weight_decay >= 0.0) || !(self.lr >= 0.0) {
            return Err(Error::Usage(
                "learning rate, epsilon and weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `γ·½(1 + cos(π·step/total))`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / (total as f64);
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone)]
pub struct AdamWState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
    pub hyper: AdamWHyper,
}

impl<T: Scalar> AdamWState<T> {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new(params: &ParamSet<T>, hyper: AdamWHyper) -> Result<Self> {
        hyper.validate()?;
        Ok(AdamWState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            hyper,
        })
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grad: &ParamSet<T>) -> Result<()> {
        self.step_with_lr(params, grad, self.hyper.lr)
    }

    /// One update with an explicit learning rate (for schedules).
    pub fn step_with_lr(&mut self, params: &mut ParamSet<T>, grad: &ParamSet<T>, lr: f64) -> Result<()> {
        params.ensure_compatible(grad)?;
        params.ensure_compatible(&self.m)?;
        params.ensure_compatible(&self.v)?;
        if let Some(block) = grad.first_non_finite() {
            return Err(Error::numeric(block, "non-finite gradient entry"));
        }
        let t = self
            .t
            .checked_add(1)
            .filter(|&t| t <= i32::MAX as u64)
            .ok_or_else(|| Error::numeric("<adamw>", "step counter overflow"))?;

        let h = self.hyper;
        let (beta1, beta2) = (T::lit(h.beta1), T::lit(h.beta2));
        let (one_m_b1, one_m_b2) = (T::one() - beta1, T::one() - beta2);
        let bc1 = T::one() - beta1.powi(t as i32);
        let bc2 = T::one() - beta2.powi(t as i32);
        let (gamma, eps, wd) = (T::lit(lr), T::lit(h.eps), T::lit(h.weight_decay));
        let coupled = h.decay_mode == DecayMode::Coupled;

        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for (i, (theta, &g_raw)) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .enumerate()
        {
            let g = if coupled { g_raw + wd * *theta } else { g_raw };
            m[i] = beta1 * m[i] + one_m_b1 * g;
            v[i] = beta2 * v[i] + one_m_b2 * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            // 0/0 when both moments vanish and eps = 0: no adaptive step.
            let adaptive = if m_hat == T::zero() {
                T::zero()
            } else {
                m_hat / (v_hat.sqrt() + eps)
            };
            let delta = if coupled { adaptive } else { adaptive + wd * *theta };
            *theta -= gamma * delta;
        }
        self.t = t;
        if let Some(block) = params.first_non_finite() {
            return Err(Error::numeric(block, "update produced a non-finite parameter"));
        }
        Ok(())
    }

    /// Bias-corrected second moment `v / (1 − β₂ᵗ)`, clamped at zero.
    pub fn fisher_estimate(&self) -> Result<FisherAccumulator<T>> {
        if self.t == 0 {
            return Err(Error::State("no optimizer steps taken; second moment is undefined".into()));
        }
        let t = i32::try_from(self.t).map_err(|_| Error::numeric("<adamw>", "step counter overflow"))?;
        let bc2 = T::one() - T::lit(self.hyper.beta2).powi(t);
        let values = self.v.map(|v| (v / bc2).max(T::zero()));
        FisherAccumulator::new(values, FisherSource::SingleTask)
    }

    /// Uncorrected second moment, for ablations.
    pub fn fisher_raw(&self) -> Result<FisherAccumulator<T>> {
        if self.t == 0 {
            return Err(Error::State("no optimizer steps taken; second moment is undefined".into()));
        }
        FisherAccumulator::new(self.v.map(|v| v.max(T::zero())), FisherSource::SingleTask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> ParamSet<f64> {
        ParamSet::from_blocks(vec![("w", vec![1], vec![v])]).unwrap()
    }

    fn hyper(lr: f64, eps: f64, wd: f64, mode: DecayMode) -> AdamWHyper {
        AdamWHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            weight_decay: wd,
            decay_mode: mode,
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar(1.5);
        let mut s = AdamWState::new(&p, hyper(0.1, 1e-8, 0.0, DecayMode::Decoupled)).unwrap();
        s.step(&mut p, &scalar(0.0)).unwrap();
        assert_eq!(p.as_slice(), &[1.5]);
        assert_eq!(s.m.as_slice(), &[0.0]);
        assert_eq!(s.v.as_slice(), &[0.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn hand_evaluated_first_step() {
        let mut p = scalar(1.0);
        let mut s = AdamWState::new(&p, hyper(0.1, 0.0, 0.0, DecayMode::Decoupled)).unwrap();
        s.step(&mut p, &scalar(1.0)).unwrap();
        assert!((s.m.as_slice()[0] - 0.1).abs() < 1e-15);
        assert!((s.v.as_slice()[0] - 0.001).abs() < 1e-15);
        assert_eq!(p.as_slice(), &[0.9]);
        let f = s.fisher_estimate().unwrap();
        assert_eq!(f.values().as_slice(), &[1.0]);
    }

    #[test]
    fn decoupled_decay_applies_without_gradient() {
        let mut p = scalar(1.0);
        let mut s = AdamWState::new(&p, hyper(0.1, 1e-8, 0.1, DecayMode::Decoupled)).unwrap();
        s.step(&mut p, &scalar(0.0)).unwrap();
        assert!((p.as_slice()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn fisher_needs_a_step() {
        let p = scalar(1.0);
        let s = AdamWState::new(&p, AdamWHyper::default()).unwrap();
        assert!(matches!(s.fisher_estimate().unwrap_err(), Error::State(_)));
    }

    #[test]
    fn zero_gradient_steps_give_zero_fisher() {
        let mut p = scalar(1.0);
        let mut s = AdamWState::new(&p, hyper(0.1, 1e-8, 0.0, DecayMode::Decoupled)).unwrap();
        for _ in 0..5 {
            s.step(&mut p, &scalar(0.0)).unwrap();
        }
        assert_eq!(s.fisher_estimate().unwrap().values().as_slice(), &[0.0]);
    }

    #[test]
    fn constant_gradient_second_moment_converges() {
        let mut p = scalar(0.0);
        let mut s = AdamWState::new(&p, hyper(1e-6, 1e-8, 0.0, DecayMode::Decoupled)).unwrap();
        for _ in 0..10_000 {
            s.step(&mut p, &scalar(0.7)).unwrap();
        }
        let f = s.fisher_estimate().unwrap();
        assert!((f.values().as_slice()[0] - 0.49).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut p = scalar(0.0);
        let mut s = AdamWState::new(&p, AdamWHyper::default()).unwrap();
        match s.step(&mut p, &scalar(f64::INFINITY)).unwrap_err() {
            Error::Numeric { block, .. } => assert_eq!(block, "w"),
            e => panic!("{e:?}"),
        }
        assert_eq!(s.t, 0);
    }

    #[test]
    fn counter_overflow_is_numeric_error() {
        let mut p = scalar(0.0);
        let mut s = AdamWState::new(&p, AdamWHyper::default()).unwrap();
        s.t = i32::MAX as u64;
        assert!(matches!(s.step(&mut p, &scalar(1.0)).unwrap_err(), Error::Numeric { .. }));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-17);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }
}
