use std::io::Write;
use std::path::{Path, PathBuf};

use cmm_core::data::load_csv;
use cmm_core::harness::{
    alpha_grid, evaluate_offline, interpolation_experiment, mean, run_continual_observed, InterpMode, MergeMethod,
    Setup,
};
use cmm_core::merge::{fisher_state_update, interpolate, maxabs, randmix, FisherAccumulator, FisherSource};
use cmm_core::{fisher_merge, Error, MergeConfig, Model, ParamSet, Scenario, TaskSequence};
use serde::Serialize;

use crate::checkpoint::{push_params, read_params, Checkpoint, Entry, ModelState};
use crate::config::CliConfig;
use crate::error::{CliError, Result};
use crate::results::ResultsDocument;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn load_data(path: &Path, scenario: Scenario, task_column: &str) -> Result<TaskSequence<f64>> {
    load_csv(path, scenario, task_column).map_err(|e| CliError::from(e).at(path))
}

/// Dataset for a config: the CSV named by `data.path`, or generated from the seed.
pub fn config_data(cfg: &CliConfig) -> Result<TaskSequence<f64>> {
    match &cfg.data_path {
        Some(p) => load_data(p, cfg.run.data.scenario, &cfg.task_column),
        None => Ok(cfg.run.data.generate(cfg.run.seed)?),
    }
}

pub struct RunArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn run(args: &RunArgs) -> Result<ResultsDocument> {
    let mut cfg = CliConfig::load(&args.config)?;
    let seq = config_data(&cfg)?;
    cfg.run.data.input_dim = seq.input_dim();
    cfg.run.model.input_dim = seq.input_dim();
    let hash = cfg.hash();
    // Same seed, same base and head as the run itself builds.
    let setup = Setup::new(&cfg.run, &seq)?;
    let state = |model: &Model<f64>, fisher, optimizer, prototypes| ModelState {
        config: setup.model.clone(),
        model: model.clone(),
        head: setup.head.clone(),
        fisher,
        optimizer,
        prototypes,
        config_hash: Some(hash),
    };

    if let Some(dir) = &args.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut save_error = None;
    let out = run_continual_observed(&cfg.run, &seq, |ev| {
        let Some(dir) = &args.checkpoint_dir else {
            return Ok(());
        };
        let saved = state(ev.finetuned, ev.finetuned_fisher.cloned(), ev.optimizer.cloned(), None)
            .save(&setup.base, &dir.join(format!("task{}_finetuned.cmmk", ev.task)))
            .and_then(|()| {
                state(ev.merged, ev.fisher.cloned(), None, Some(ev.prototypes.clone()))
                    .save(&setup.base, &dir.join(format!("task{}_merged.cmmk", ev.task)))
            });
        saved.map_err(|e| {
            save_error = Some(e);
            Error::State("checkpoint write failed".into())
        })
    });
    let out = match (out, save_error) {
        (_, Some(e)) => return Err(e),
        (out, None) => out?,
    };

    let doc = ResultsDocument::new(out.result, seq.scenario);
    write_file(&args.out, doc.to_json()?.as_bytes())?;
    if let Some(path) = &args.checkpoint {
        state(&out.model, out.fisher, None, Some(out.prototypes)).save(&setup.base, path)?;
    }
    Ok(doc)
}

pub struct MergeArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    pub method: MergeMethod,
    pub lambda: f64,
    pub seed: u64,
    pub out: PathBuf,
}

fn trainable_prefix(ck: &Checkpoint) -> Result<&'static str> {
    match (ck.has_group("tau"), ck.has_group("theta")) {
        (true, false) => Ok("tau"),
        (false, true) => Ok("theta"),
        _ => Err(CliError::format(0, "expected exactly one of `tau/` or `theta/` parameter groups")),
    }
}

fn fisher_of(ck: &Checkpoint, which: &str) -> Result<FisherAccumulator<f64>> {
    if !ck.has_group("fisher") {
        return Err(Error::Usage(format!("fisher merge needs Fisher entries in checkpoint {which}")).into());
    }
    let source = match ck.get("fisher.merged") {
        Some(_) if ck.scalar("fisher.merged")? != 0.0 => FisherSource::Merged,
        _ => FisherSource::SingleTask,
    };
    Ok(FisherAccumulator::new(read_params(ck, "fisher")?, source)?)
}

/// Merges checkpoint `a` (the current model, weight λ) into `b`. The output
/// keeps `a`'s metadata and head; optimizer state and prototypes are dropped
/// since they describe neither input after merging.
pub fn merge(args: &MergeArgs) -> Result<Checkpoint> {
    let ck_a = Checkpoint::load(&args.a)?;
    let ck_b = Checkpoint::load(&args.b)?;
    let inner = || -> Result<Checkpoint> {
        let prefix = trainable_prefix(&ck_a)?;
        if trainable_prefix(&ck_b)? != prefix {
            return Err(Error::Usage("cannot merge a standard and a linearized checkpoint".into()).into());
        }
        if prefix == "tau" {
            let (ba, bb) = (read_params(&ck_a, "base")?, read_params(&ck_b, "base")?);
            if ba != bb {
                return Err(Error::Usage("linearized checkpoints must share their base".into()).into());
            }
        }
        let pa = read_params(&ck_a, prefix)?;
        let pb = read_params(&ck_b, prefix)?;
        pa.ensure_compatible(&pb)?;
        let mcfg = MergeConfig {
            lambda: args.lambda,
            ..MergeConfig::default()
        };
        mcfg.validate()?;

        let mut fisher = None;
        let merged: ParamSet<f64> = match args.method {
            MergeMethod::Fisher => {
                let (fa, fb) = (fisher_of(&ck_a, "a")?, fisher_of(&ck_b, "b")?);
                fisher = Some(fisher_state_update(&fa, &fb, args.lambda)?);
                fisher_merge(&pa, &fa, &pb, &fb, &mcfg)?
            }
            MergeMethod::Avg => interpolate(&pb, &pa, args.lambda)?,
            MergeMethod::MaxAbs if prefix == "theta" && ck_a.has_group("base") => {
                let base = read_params(&ck_a, "base")?;
                maxabs(&[&pa.sub(&base)?, &pb.sub(&base)?])?.add(&base)?
            }
            MergeMethod::MaxAbs => maxabs(&[&pa, &pb])?,
            MergeMethod::RandMix => randmix(&[&pa, &pb], args.seed)?,
            MergeMethod::None => pa.clone(),
        };

        let mut out = ck_a.clone();
        for group in [prefix, "fisher", "adam", "prototypes"] {
            out.remove_group(group);
        }
        push_params(&mut out.entries, prefix, &merged);
        if let Some(f) = fisher {
            push_params(&mut out.entries, "fisher", f.values());
            out.entries.push(Entry::scalar("fisher.merged", 1.0));
        }
        Ok(out)
    };
    let out = inner()?;
    out.save(&args.out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: Vec<f64>,
    pub loss: Vec<f64>,
    pub avg_accuracy: f64,
    pub avg_loss: f64,
}

/// Offline evaluation: prototypes are rebuilt from every task's train split
/// under the checkpoint's model, accuracy and loss measured on the test splits.
pub fn eval(ckpt: &Path, data: &Path, scenario: Scenario, task_column: &str) -> Result<EvalReport> {
    let (state, _) = ModelState::load(ckpt)?;
    let seq = load_data(data, scenario, task_column)?;
    let (accuracy, loss) = evaluate_offline(&state.config, &state.model, &state.head, &seq.tasks)?;
    Ok(EvalReport {
        avg_accuracy: mean(&accuracy),
        avg_loss: mean(&loss),
        accuracy,
        loss,
    })
}

pub struct InterpolateArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    pub data: PathBuf,
    pub scenario: Scenario,
    pub task_column: String,
    pub mode: InterpMode,
    pub grid: usize,
    pub out: PathBuf,
}

pub fn interpolate_cmd(args: &InterpolateArgs) -> Result<()> {
    let (a, _) = ModelState::load(&args.a)?;
    let (b, _) = ModelState::load(&args.b)?;
    let seq = load_data(&args.data, args.scenario, &args.task_column)?;
    let rows = interpolation_experiment(
        &a.config,
        &a.head,
        &a.model,
        a.fisher.as_ref(),
        &b.model,
        b.fisher.as_ref(),
        &alpha_grid(args.grid)?,
        &seq.tasks,
        args.mode,
    )?;
    let mut csv = String::from("alpha,avg_accuracy,avg_loss\n");
    for r in rows {
        csv.push_str(&format!("{},{},{}\n", r.alpha, r.avg_accuracy, r.avg_loss));
    }
    write_file(&args.out, csv.as_bytes())
}

pub fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = CliConfig::load(config)?;
    if cfg.data_path.is_some() {
        return Err(CliError::Config("gen-data generates data; drop data.path".into()));
    }
    let seq = cfg.run.data.generate::<f64>(cfg.run.seed)?;
    let file = std::fs::File::create(out).map_err(|e| CliError::io(out, e))?;
    cmm_core::data::write_csv(&seq, std::io::BufWriter::new(file)).map_err(|e| CliError::from(e).at(out))
}

/// Writes `sample_id,class_id,model_tag,e0..` for every sample, in the
/// dataset's row order (per task, train before test).
pub fn dump_embeddings(ckpt: &Path, data: &Path, scenario: Scenario, task_column: &str, tag: &str, out: &Path) -> Result<usize> {
    let (state, _) = ModelState::load(ckpt)?;
    let seq = load_data(data, scenario, task_column)?;
    let file = std::fs::File::create(out).map_err(|e| CliError::io(out, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| CliError::io(out, e);
    let header: Vec<String> = ["sample_id", "class_id", "model_tag"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..state.config.embed_dim).map(|i| format!("e{i}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    let mut id = 0usize;
    for task in &seq.tasks {
        for split in [&task.train, &task.test] {
            let z = state.model.embed(&state.config, split.x.view())?;
            for (row, label) in z.rows().into_iter().zip(&split.y) {
                let values: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{id},{label},{tag},{}", values.join(",")).map_err(io)?;
                id += 1;
            }
        }
    }
    w.flush().map_err(io)?;
    Ok(id)
}
