use std::sync::Arc;

use cmm_core::net::{backward, forward, tangent_backward, tangent_forward};
use cmm_core::{Activation, FrozenHead, ModelConfig, ParamSet, TangentModel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random_config(rng: &mut ChaCha8Rng, activation: Activation) -> ModelConfig {
    loop {
        let depth = rng.gen_range(0..3);
        let cfg = ModelConfig {
            input_dim: rng.gen_range(1..5),
            hidden_dims: (0..depth).map(|_| rng.gen_range(1..7)).collect(),
            embed_dim: rng.gen_range(2..5),
            activation,
        };
        if cfg.layout().unwrap().len() <= 200 {
            return cfg;
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.5..1.5))
}

fn random_like(rng: &mut ChaCha8Rng, p: &ParamSet<f64>, scale: f64) -> ParamSet<f64> {
    p.map(|_| 0.0).zip_map(p, |_, _| rng.gen_range(-scale..scale)).unwrap()
}

/// Norm-wise relative error between an analytic and a numeric gradient.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

fn central_difference(p: &ParamSet<f64>, mut loss: impl FnMut(&ParamSet<f64>) -> f64) -> Vec<f64> {
    let mut probe = p.clone();
    (0..p.len())
        .map(|i| {
            let orig = probe.as_slice()[i];
            probe.as_mut_slice()[i] = orig + STEP;
            let up = loss(&probe);
            probe.as_mut_slice()[i] = orig - STEP;
            let down = loss(&probe);
            probe.as_mut_slice()[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

struct Instance {
    cfg: ModelConfig,
    params: ParamSet<f64>,
    x: Array2<f64>,
    labels: Vec<usize>,
    head: FrozenHead<f64>,
}

fn instance(seed: u64, activation: Activation) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = random_config(&mut rng, activation);
    let params = cfg.init_params::<f64>(seed).unwrap();
    let params = random_like(&mut rng, &params, 0.8);
    let n = rng.gen_range(1..6);
    let x = random_matrix(&mut rng, n, cfg.input_dim);
    let classes = rng.gen_range(2..5);
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let head = FrozenHead::random(seed + 7, (0..classes).collect(), cfg.embed_dim, 0.5).unwrap();
    Instance {
        cfg,
        params,
        x,
        labels,
        head,
    }
}

#[test]
fn standard_backward_matches_finite_differences() {
    for activation in [Activation::Tanh, Activation::Relu] {
        for seed in 0..20 {
            let inst = instance(seed, activation);
            let (_, grad) = backward(&inst.cfg, &inst.params, inst.x.view(), &inst.labels, &inst.head).unwrap();
            let numeric = central_difference(&inst.params, |p| {
                let z = forward(&inst.cfg, p, inst.x.view()).unwrap();
                inst.head.loss(z.view(), &inst.labels).unwrap()
            });
            let err = rel_err(grad.as_slice(), &numeric);
            assert!(err < 1e-6, "{activation} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn tangent_backward_matches_finite_differences() {
    for activation in [Activation::Tanh, Activation::Relu] {
        for seed in 100..120 {
            let inst = instance(seed, activation);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tau = random_like(&mut rng, &inst.params, 0.3);
            let base = Arc::new(inst.params.clone());
            let model = TangentModel::new(Arc::clone(&base), tau.clone()).unwrap();
            let (_, grad) = tangent_backward(&inst.cfg, &model, inst.x.view(), &inst.labels, &inst.head).unwrap();
            let numeric = central_difference(&tau, |t| {
                let m = TangentModel::new(Arc::clone(&base), t.clone()).unwrap();
                let (z0, jvp) = tangent_forward(&inst.cfg, &m, inst.x.view()).unwrap();
                inst.head.loss((z0 + jvp).view(), &inst.labels).unwrap()
            });
            let err = rel_err(grad.as_slice(), &numeric);
            assert!(err < 1e-6, "{activation} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn jvp_matches_directional_difference() {
    for seed in 0..20 {
        let inst = instance(seed, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let tau = random_like(&mut rng, &inst.params, 1.0);
        let model = TangentModel::new(Arc::new(inst.params.clone()), tau.clone()).unwrap();
        let (_, jvp) = tangent_forward(&inst.cfg, &model, inst.x.view()).unwrap();
        let mut up = inst.params.clone();
        up.axpy(STEP, &tau).unwrap();
        let mut down = inst.params.clone();
        down.axpy(-STEP, &tau).unwrap();
        let fd = (forward(&inst.cfg, &up, inst.x.view()).unwrap() - forward(&inst.cfg, &down, inst.x.view()).unwrap())
            / (2.0 * STEP);
        let (a, b): (Vec<f64>, Vec<f64>) = (jvp.iter().copied().collect(), fd.iter().copied().collect());
        let err = rel_err(&a, &b);
        assert!(err < 1e-6, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn activation_free_nets_linearize_exactly() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig {
            input_dim: rng.gen_range(1..5),
            hidden_dims: vec![],
            embed_dim: rng.gen_range(1..5),
            activation: Activation::Tanh,
        };
        let base = cfg.init_params::<f64>(seed).unwrap();
        let tau = random_like(&mut rng, &base, 2.0);
        let x = random_matrix(&mut rng, 4, cfg.input_dim);
        let model = TangentModel::new(Arc::new(base), tau).unwrap();
        let (z0, jvp) = tangent_forward(&cfg, &model, x.view()).unwrap();
        let exact = forward(&cfg, &model.effective(), x.view()).unwrap();
        let gap = (z0 + jvp - exact).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(gap < 1e-10, "seed {seed}: gap {gap:e}");
    }
}

#[test]
fn zero_tangent_agrees_with_standard_at_base() {
    for activation in [Activation::Tanh, Activation::Relu] {
        for seed in 0..20 {
            let inst = instance(seed, activation);
            let model = TangentModel::at_base(Arc::new(inst.params.clone()));
            let (lin_loss, lin_grad) =
                tangent_backward(&inst.cfg, &model, inst.x.view(), &inst.labels, &inst.head).unwrap();
            let (loss, grad) = backward(&inst.cfg, &inst.params, inst.x.view(), &inst.labels, &inst.head).unwrap();
            assert!((lin_loss - loss).abs() < 1e-12);
            assert!(lin_grad.max_abs_diff(&grad).unwrap() < 1e-12);
        }
    }
}

#[test]
fn per_sample_gradients_sum_to_batch_gradient() {
    let inst = instance(3, Activation::Tanh);
    let n = inst.x.nrows() as f64;
    let (_, full) = backward(&inst.cfg, &inst.params, inst.x.view(), &inst.labels, &inst.head).unwrap();
    let mut acc = inst.params.zeros_like();
    for i in 0..inst.x.nrows() {
        let xi = inst.x.slice(ndarray::s![i..i + 1, ..]);
        let (_, g) = backward(&inst.cfg, &inst.params, xi, &inst.labels[i..i + 1], &inst.head).unwrap();
        acc.axpy(1.0 / n, &g).unwrap();
    }
    assert!(acc.max_abs_diff(&full).unwrap() < 1e-12);
}
