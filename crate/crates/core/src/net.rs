//! Dense feature encoder with standard and tangent-space differentiation.
//!
//! The encoder is a stack of dense layers `y' = y·Wᵀ + b` with an activation
//! between layers and none after the last one (the projection layer). Three
//! passes are provided:
//!
//! * [`forward`] / [`backward`]: ordinary evaluation and backpropagation.
//! * [`tangent_forward`]: the first-order expansion around a frozen base,
//!   `f(x; θ₀) + J(x; θ₀)·τ`, propagated as a primal/tangent pair.
//! * [`tangent_backward`]: gradient of the loss on the linearized output with
//!   respect to `τ` only.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::FrozenHead;
use crate::params::{Layout, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
        }
    }

    /// Derivative at pre-activation `v`. The relu kink at 0 gets slope 0.
    fn derivative<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Tanh => {
                let t = v.tanh();
                T::one() - t * t
            }
            Activation::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Usage(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Usage(format!(
                "all model dimensions must be >= 1 (input {}, hidden {:?}, embed {})",
                self.input_dim, self.hidden_dims, self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `(fan_in, fan_out)` of every dense layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.num_layers());
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.embed_dim));
        dims
    }

    pub fn weight_name(layer: usize) -> String {
        format!("dense{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("dense{layer}.bias")
    }

    /// Block names of the final (projection) layer.
    pub fn projection_blocks(&self) -> [String; 2] {
        let last = self.num_layers() - 1;
        [Self::weight_name(last), Self::bias_name(last)]
    }

    pub fn layout(&self) -> Result<Layout> {
        self.validate()?;
        Layout::new(self.layer_dims().into_iter().enumerate().flat_map(
            |(l, (fan_in, fan_out))| {
                [
                    (Self::weight_name(l), vec![fan_out, fan_in]),
                    (Self::bias_name(l), vec![fan_out]),
                ]
            },
        ))
    }

    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamSet<T>> {
        let layout = Arc::new(self.layout()?);
        let mut params = ParamSet::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in params.block_mut(&Self::weight_name(l))? {
                *w = T::lit(rng.gen_range(-bound..=bound));
            }
        }
        Ok(params)
    }

    fn check_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        self.layout()?.ensure_compatible(params.layout())
    }

    fn check_input<T>(&self, x: &ArrayView2<'_, T>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::shape(
                "input",
                format!("expected {} columns, got {}", self.input_dim, x.ncols()),
            ));
        }
        Ok(())
    }
}

fn dense<T: Scalar>(
    params: &ParamSet<T>,
    layer: usize,
    input: &ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    let w = params.matrix(&ModelConfig::weight_name(layer))?;
    let b = params.vector(&ModelConfig::bias_name(layer))?;
    Ok(input.dot(&w.t()) + b)
}

/// Intermediate values retained for a reverse sweep.
struct Trace<T> {
    /// Primal input to every layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<T>>,
    /// Activation slopes after every hidden layer.
    slopes: Vec<Array2<T>>,
}

fn forward_trace<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    x: ArrayView2<'_, T>,
) -> Result<(Array2<T>, Trace<T>)> {
    cfg.check_params(params)?;
    cfg.check_input(&x)?;
    let last = cfg.num_layers() - 1;
    let mut trace = Trace {
        inputs: vec![x.to_owned()],
        slopes: Vec::with_capacity(last),
    };
    for l in 0..last {
        let pre = dense(params, l, &trace.inputs[l].view())?;
        trace.slopes.push(pre.mapv(|v| cfg.activation.derivative(v)));
        trace.inputs.push(pre.mapv(|v| cfg.activation.apply(v)));
    }
    let z = dense(params, last, &trace.inputs[last].view())?;
    Ok((z, trace))
}

/// Reverse sweep shared by both gradient modes: given the adjoint on the
/// network output, accumulate weight and bias gradients layer by layer.
fn reverse_sweep<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    trace: &Trace<T>,
    output_adjoint: Array2<T>,
) -> Result<ParamSet<T>> {
    let mut grad = params.zeros_like();
    let mut delta = output_adjoint;
    for l in (0..cfg.num_layers()).rev() {
        let gw = delta.t().dot(&trace.inputs[l]);
        grad.matrix_mut(&ModelConfig::weight_name(l))?.assign(&gw);
        grad.vector_mut(&ModelConfig::bias_name(l))?
            .assign(&delta.sum_axis(Axis(0)));
        if l > 0 {
            let w = params.matrix(&ModelConfig::weight_name(l))?;
            delta = delta.dot(&w) * &trace.slopes[l - 1];
        }
    }
    Ok(grad)
}

/// Unnormalized embeddings, shape `(batch, embed_dim)`.
pub fn forward<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    x: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    cfg.check_params(params)?;
    cfg.check_input(&x)?;
    let last = cfg.num_layers() - 1;
    let mut y = x.to_owned();
    for l in 0..last {
        y = dense(params, l, &y.view())?.mapv(|v| cfg.activation.apply(v));
    }
    dense(params, last, &y.view())
}

/// Mean cross-entropy of the frozen head and its gradient.
pub fn backward<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    x: ArrayView2<'_, T>,
    labels: &[usize],
    head: &FrozenHead<T>,
) -> Result<(T, ParamSet<T>)> {
    let (z, trace) = forward_trace(cfg, params, x)?;
    let (loss, dz) = head.loss_and_grad(z.view(), labels)?;
    let grad = reverse_sweep(cfg, params, &trace, dz)?;
    Ok((loss, grad))
}

/// A frozen base point and a trainable displacement with the same layout.
#[derive(Debug, Clone)]
pub struct TangentModel<T> {
    base: Arc<ParamSet<T>>,
    tau: ParamSet<T>,
}

impl<T: Scalar> TangentModel<T> {
    pub fn new(base: Arc<ParamSet<T>>, tau: ParamSet<T>) -> Result<Self> {
        base.ensure_compatible(&tau)?;
        Ok(TangentModel { base, tau })
    }

    /// Zero displacement: the linearized model starts at the base function.
    pub fn at_base(base: Arc<ParamSet<T>>) -> Self {
        let tau = base.zeros_like();
        TangentModel { base, tau }
    }

    pub fn base(&self) -> &ParamSet<T> {
        &self.base
    }

    pub fn base_arc(&self) -> &Arc<ParamSet<T>> {
        &self.base
    }

    pub fn tau(&self) -> &ParamSet<T> {
        &self.tau
    }

    pub fn tau_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.tau
    }

    pub fn into_tau(self) -> ParamSet<T> {
        self.tau
    }

    /// `θ₀ + τ`.
    pub fn effective(&self) -> ParamSet<T> {
        self.base
            .add(&self.tau)
            .expect("layouts checked at construction")
    }
}

struct TangentTrace<T> {
    primal: Trace<T>,
    z0: Array2<T>,
    jvp: Array2<T>,
}

fn tangent_trace<T: Scalar>(
    cfg: &ModelConfig,
    model: &TangentModel<T>,
    x: ArrayView2<'_, T>,
) -> Result<TangentTrace<T>> {
    let base = model.base();
    let tau = model.tau();
    cfg.check_params(base)?;
    cfg.check_params(tau)?;
    cfg.check_input(&x)?;
    let last = cfg.num_layers() - 1;
    let mut primal = Trace {
        inputs: vec![x.to_owned()],
        slopes: Vec::with_capacity(last),
    };
    // The input carries no tangent, so the first layer only sees W_τ·x + b_τ.
    let mut dot: Option<Array2<T>> = None;
    for l in 0..=last {
        let y_in = primal.inputs[l].view();
        let pre = dense(base, l, &y_in)?;
        let mut pre_dot = dense(tau, l, &y_in)?;
        if let Some(d) = &dot {
            let w0 = base.matrix(&ModelConfig::weight_name(l))?;
            pre_dot = pre_dot + d.dot(&w0.t());
        }
        if l == last {
            return Ok(TangentTrace {
                primal,
                z0: pre,
                jvp: pre_dot,
            });
        }
        let slope = pre.mapv(|v| cfg.activation.derivative(v));
        dot = Some(pre_dot * &slope);
        primal.slopes.push(slope);
        primal.inputs.push(pre.mapv(|v| cfg.activation.apply(v)));
    }
    unreachable!("loop returns at the projection layer")
}

/// Returns `(f(x; θ₀), J(x; θ₀)·τ)`; the linearized output is their sum.
pub fn tangent_forward<T: Scalar>(
    cfg: &ModelConfig,
    model: &TangentModel<T>,
    x: ArrayView2<'_, T>,
) -> Result<(Array2<T>, Array2<T>)> {
    let trace = tangent_trace(cfg, model, x)?;
    Ok((trace.z0, trace.jvp))
}

/// Loss on the linearized output and its gradient with respect to `τ`.
///
/// The primal path depends only on `θ₀`, so the adjoint flows back through
/// the base weights and activation slopes exactly as in ordinary
/// backpropagation at `θ₀`.
pub fn tangent_backward<T: Scalar>(
    cfg: &ModelConfig,
    model: &TangentModel<T>,
    x: ArrayView2<'_, T>,
    labels: &[usize],
    head: &FrozenHead<T>,
) -> Result<(T, ParamSet<T>)> {
    let trace = tangent_trace(cfg, model, x)?;
    let z = trace.z0 + &trace.jvp;
    let (loss, dz) = head.loss_and_grad(z.view(), labels)?;
    let grad = reverse_sweep(cfg, model.base(), &trace.primal, dz)?;
    Ok((loss, grad))
}

/// A network as used by the pipeline: either plain parameters or a
/// linearization around a shared base.
#[derive(Debug, Clone)]
pub enum Model<T> {
    Standard(ParamSet<T>),
    Linearized(TangentModel<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Standard,
    Linearized,
}

impl<T: Scalar> Model<T> {
    /// Features in the model's own mode.
    pub fn embed(&self, cfg: &ModelConfig, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        match self {
            Model::Standard(p) => forward(cfg, p, x),
            Model::Linearized(m) => {
                let (z0, jvp) = tangent_forward(cfg, m, x)?;
                Ok(z0 + &jvp)
            }
        }
    }

    pub fn mode(&self) -> FeatureMode {
        match self {
            Model::Standard(_) => FeatureMode::Standard,
            Model::Linearized(_) => FeatureMode::Linearized,
        }
    }

    /// The trainable parameters: `θ` for standard models, `τ` for linearized ones.
    pub fn trainable(&self) -> &ParamSet<T> {
        match self {
            Model::Standard(p) => p,
            Model::Linearized(m) => m.tau(),
        }
    }

    pub fn trainable_mut(&mut self) -> &mut ParamSet<T> {
        match self {
            Model::Standard(p) => p,
            Model::Linearized(m) => m.tau_mut(),
        }
    }

    /// Replaces the trainable parameters, keeping the base of a linearized model.
    pub fn with_trainable(&self, params: ParamSet<T>) -> Result<Self> {
        match self {
            Model::Standard(p) => {
                p.ensure_compatible(&params)?;
                Ok(Model::Standard(params))
            }
            Model::Linearized(m) => Ok(Model::Linearized(TangentModel::new(
                Arc::clone(m.base_arc()),
                params,
            )?)),
        }
    }

    pub fn loss_and_grad(
        &self,
        cfg: &ModelConfig,
        x: ArrayView2<'_, T>,
        labels: &[usize],
        head: &FrozenHead<T>,
    ) -> Result<(T, ParamSet<T>)> {
        match self {
            Model::Standard(p) => backward(cfg, p, x, labels, head),
            Model::Linearized(m) => tangent_backward(cfg, m, x, labels, head),
        }
    }
}

/// Features of `model` under an explicit mode. Linearized features need a
/// linearized model; standard features of a linearized model are evaluated
/// at `θ₀ + τ`.
pub fn features<T: Scalar>(
    cfg: &ModelConfig,
    model: &Model<T>,
    x: ArrayView2<'_, T>,
    mode: FeatureMode,
) -> Result<Array2<T>> {
    match (mode, model) {
        (FeatureMode::Standard, Model::Standard(p)) => forward(cfg, p, x),
        (FeatureMode::Standard, Model::Linearized(m)) => forward(cfg, &m.effective(), x),
        (FeatureMode::Linearized, Model::Linearized(_)) => model.embed(cfg, x),
        (FeatureMode::Linearized, Model::Standard(_)) => Err(Error::Usage(
            "linearized features need a tangent model".into(),
        )),
    }
}

/// Inputs to the projection layer and the projection-independent part of the
/// output, so that `embed(x) = offset + inputs·Wᵀ + b` with `(W, b)` the
/// trainable projection blocks.
pub(crate) fn projection_split<T: Scalar>(
    cfg: &ModelConfig,
    model: &Model<T>,
    x: ArrayView2<'_, T>,
) -> Result<(Array2<T>, Array2<T>)> {
    let last = cfg.num_layers() - 1;
    match model {
        Model::Standard(p) => {
            let (z, trace) = forward_trace(cfg, p, x)?;
            let h = trace.inputs.into_iter().nth(last).expect("trace has every layer input");
            Ok((h, Array2::zeros(z.raw_dim())))
        }
        Model::Linearized(m) => {
            let trace = tangent_trace(cfg, m, x)?;
            let h = trace.primal.inputs[last].clone();
            let w_tau = m.tau().matrix(&ModelConfig::weight_name(last))?;
            let b_tau: Array1<T> = m.tau().vector(&ModelConfig::bias_name(last))?.to_owned();
            let offset = trace.z0 + &trace.jvp - h.dot(&w_tau.t()) - &b_tau;
            Ok((h, offset))
        }
    }
}
