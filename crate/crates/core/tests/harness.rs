use cmm_core::data::Scenario;
use cmm_core::harness::{finetune_task, run_continual, run_continual_observed, Flags, MergeMethod, RunConfig, Setup};
use cmm_core::params::tracking;
use cmm_core::Error;

fn tiny(num_tasks: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.num_tasks = num_tasks;
    cfg.data.samples_per_class = 10;
    cfg.data.input_dim = 4;
    cfg.model.input_dim = 4;
    cfg.model.hidden_dims = vec![6];
    cfg.model.embed_dim = 4;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg.align.steps = 5;
    cfg
}

#[test]
fn identical_configs_give_identical_results() {
    let cfg = tiny(3);
    let seq = cfg.data.generate::<f64>(cfg.seed).unwrap();
    let mut a = run_continual(&cfg, &seq).unwrap();
    let mut b = run_continual(&cfg, &seq).unwrap();
    a.wall_time_seconds = 0.0;
    b.wall_time_seconds = 0.0;
    assert_eq!(a, b);
}

#[test]
fn single_task_has_no_merge_or_bias() {
    let cfg = tiny(1);
    let seq = cfg.data.generate::<f64>(0).unwrap();
    let res = run_continual(&cfg, &seq).unwrap();
    assert_eq!(res.r.len(), 1);
    assert_eq!(res.r[0].len(), 1);
    assert_eq!(res.a, vec![res.r[0][0]]);
    assert!(res.biases.is_empty());
}

#[test]
fn finetune_only_ends_at_last_sequential_model() {
    let mut cfg = tiny(3);
    cfg.flags = Flags {
        ft: true,
        merge: false,
        ntk: false,
        bias: false,
    };
    cfg.method = MergeMethod::None;
    let seq = cfg.data.generate::<f64>(0).unwrap();
    let out = run_continual_observed(&cfg, &seq, |_| Ok(())).unwrap();

    let setup = Setup::new(&cfg, &seq).unwrap();
    let mut model = setup.base_model(false);
    for (t, task) in seq.tasks.iter().enumerate() {
        model = finetune_task(&cfg, &setup, model, task, t).unwrap().0;
    }
    assert_eq!(out.model.trainable(), model.trainable());
}

#[test]
fn retained_buffers_do_not_grow_with_task_count() {
    let peak = |n: usize| {
        let cfg = tiny(n);
        let seq = cfg.data.generate::<f64>(0).unwrap();
        tracking::reset_peak();
        let before = tracking::live();
        let mut retained = Vec::new();
        run_continual_observed(&cfg, &seq, |_| {
            retained.push(tracking::live());
            Ok(())
        })
        .unwrap();
        (tracking::peak() - before, retained)
    };
    let (short, short_live) = peak(3);
    let (long, long_live) = peak(12);
    assert_eq!(short, long);
    assert!(long_live[1..].iter().all(|&v| v == long_live[1]));
    assert_eq!(short_live[1], long_live[1]);
}

#[test]
fn every_merge_method_runs() {
    for method in [MergeMethod::Fisher, MergeMethod::Avg, MergeMethod::MaxAbs, MergeMethod::RandMix, MergeMethod::None] {
        for ntk in [false, true] {
            let mut cfg = tiny(3);
            cfg.method = method;
            cfg.flags.ntk = ntk;
            let seq = cfg.data.generate::<f64>(1).unwrap();
            let res = run_continual(&cfg, &seq).unwrap();
            assert_eq!(res.a.len(), 3, "{method:?}");
        }
    }
}

#[test]
fn domain_incremental_run_uses_shared_classes() {
    let mut cfg = tiny(3);
    cfg.data.scenario = Scenario::Dil;
    cfg.data.num_classes = 3;
    let seq = cfg.data.generate::<f64>(2).unwrap();
    let res = run_continual(&cfg, &seq).unwrap();
    assert_eq!(res.r[2].len(), 3);
}

#[test]
fn invalid_flag_combination_is_rejected() {
    let mut cfg = tiny(2);
    cfg.flags = Flags {
        ft: true,
        merge: false,
        ntk: true,
        bias: true,
    };
    let seq = cfg.data.generate::<f64>(0).unwrap();
    assert!(matches!(run_continual(&cfg, &seq).unwrap_err(), Error::Usage(_)));
}

#[test]
fn zero_shot_model_never_changes() {
    let mut cfg = tiny(2);
    cfg.flags = Flags {
        ft: false,
        merge: false,
        ntk: false,
        bias: false,
    };
    let seq = cfg.data.generate::<f64>(0).unwrap();
    let out = run_continual_observed(&cfg, &seq, |_| Ok(())).unwrap();
    assert_eq!(out.model.trainable(), out.setup.base.as_ref());
}

#[test]
fn separable_task_is_learned() {
    let mut cfg = RunConfig::default();
    cfg.data.num_tasks = 1;
    cfg.data.spread = 0.1;
    cfg.optim.lr = 1e-2;
    let seq = cfg.data.generate::<f64>(0).unwrap();
    let res = run_continual(&cfg, &seq).unwrap();
    assert!(res.a[0] > 0.99, "{}", res.a[0]);
}

#[test]
fn f32_pipeline_runs() {
    let cfg = tiny(2);
    let seq = cfg.data.generate::<f32>(0).unwrap();
    let res = run_continual(&cfg, &seq).unwrap();
    assert!(res.a.iter().all(|a| (0.0..=1.0).contains(a)));
}
