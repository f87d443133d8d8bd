use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmm_cli::checkpoint::{Checkpoint, Entry, ModelState};
use cmm_cli::commands::config_data;
use cmm_cli::CliConfig;
use cmm_core::harness::{evaluate_offline, run_continual_observed};
use tempfile::TempDir;

const SMALL: &str = "\
seed = 3
data.num_tasks = 2
data.samples_per_class = 30
data.input_dim = 6
model.hidden_dims = 8
model.embed_dim = 4
optim.lr = 0.01
train.epochs = 2
align.steps = 20
";

fn cmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmm")).args(args).output().expect("spawn cmm")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Runs the small config with per-task checkpoints; returns (dir, data csv).
fn trained(extra: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "run.cfg", &format!("{SMALL}{extra}"));
    let data = dir.path().join("data.csv");
    ok(&cmm(&["gen-data", "--config", s(&cfg), "--out", s(&data)]));
    let out = dir.path().join("results.json");
    let ckdir = dir.path().join("ck");
    ok(&cmm(&[
        "run",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--checkpoint",
        s(&dir.path().join("final.cmmk")),
        "--checkpoint-dir",
        s(&ckdir),
    ]));
    (dir, data)
}

#[test]
fn minimal_config_runs_and_writes_results() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "min.cfg", SMALL);
    let out = dir.path().join("r.json");
    ok(&cmm(&["run", "--config", s(&cfg), "--out", s(&out)]));
    let v = json(&out);
    assert_eq!(v["R"].as_array().unwrap().len(), 2);
    assert_eq!(v["A"].as_array().unwrap().len(), 2);
    assert_eq!(v["seed"], 3);
    assert_eq!(v["scenario"], "cil");
    assert_eq!(v["biases"][0]["task"], 1);
    assert_eq!(v["biases"][0]["steps"], 20);
}

#[test]
fn misspelled_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.cfg", "merge.lamda = 0.3\n");
    let out = cmm(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("merge.lamda"));
}

#[test]
fn invalid_flag_combination_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bad.cfg", &format!("{SMALL}flags.merge = false\n"));
    let out = cmm(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_data_file_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.cfg", "data.path = nowhere.csv\n");
    let out = cmm(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));
}

#[test]
fn repeated_runs_match_except_wall_time() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "c.cfg", SMALL);
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    ok(&cmm(&["run", "--config", s(&cfg), "--out", s(&a)]));
    ok(&cmm(&["run", "--config", s(&cfg), "--out", s(&b)]));
    let strip = |p: &Path| {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.contains("\"wall_time_seconds\""))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn data_path_runs_match_generated_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "gen.cfg", SMALL);
    let data = dir.path().join("d.csv");
    ok(&cmm(&["gen-data", "--config", s(&cfg), "--out", s(&data)]));
    let from_file: String = SMALL
        .lines()
        .filter(|l| !l.starts_with("data."))
        .map(|l| format!("{l}\n"))
        .collect::<String>()
        + "data.path = d.csv\n";
    let cfg2 = write(dir.path(), "file.cfg", &from_file);
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    ok(&cmm(&["run", "--config", s(&cfg), "--out", s(&a)]));
    ok(&cmm(&["run", "--config", s(&cfg2), "--out", s(&b)]));
    assert_eq!(json(&a)["R"], json(&b)["R"]);
}

fn fixture(dir: &Path, name: &str, theta: f64, fisher: Option<f64>) -> PathBuf {
    let mut entries = vec![Entry::new("theta/w", vec![1], vec![theta])];
    if let Some(f) = fisher {
        entries.push(Entry::new("fisher/w", vec![1], vec![f]));
    }
    let p = dir.join(name);
    Checkpoint { entries }.save(&p).unwrap();
    p
}

fn merged_theta(path: &Path) -> f64 {
    Checkpoint::load(path).unwrap().get("theta/w").unwrap().data[0]
}

#[test]
fn scalar_fisher_merge_fixture() {
    let dir = TempDir::new().unwrap();
    let a = fixture(dir.path(), "a.cmmk", 2.0, Some(3.0));
    let b = fixture(dir.path(), "b.cmmk", 0.0, Some(1.0));
    let out = dir.path().join("m.cmmk");
    ok(&cmm(&["merge", "--a", s(&a), "--b", s(&b), "--method", "fisher", "--lambda", "0.5", "--out", s(&out)]));
    assert_eq!(merged_theta(&out), 1.5);
    // merged Fisher = 0.5·3 + 0.5·1
    assert_eq!(Checkpoint::load(&out).unwrap().get("fisher/w").unwrap().data, vec![2.0]);

    ok(&cmm(&["merge", "--a", s(&a), "--b", s(&b), "--method", "fisher", "--lambda", "1", "--out", s(&out)]));
    assert_eq!(merged_theta(&out), 2.0);
}

#[test]
fn fisher_merge_without_fisher_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let a = fixture(dir.path(), "a.cmmk", 2.0, Some(3.0));
    let b = fixture(dir.path(), "b.cmmk", 0.0, None);
    let out = cmm(&["merge", "--a", s(&a), "--b", s(&b), "--out", s(&dir.path().join("m.cmmk"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn avg_of_identical_checkpoints_is_unchanged() {
    let (dir, _) = trained("");
    let a = dir.path().join("ck/task1_finetuned.cmmk");
    let out = dir.path().join("m.cmmk");
    ok(&cmm(&["merge", "--a", s(&a), "--b", s(&a), "--method", "avg", "--out", s(&out)]));
    let (x, y) = (Checkpoint::load(&a).unwrap(), Checkpoint::load(&out).unwrap());
    for e in x.entries.iter().filter(|e| e.name.starts_with("tau/")) {
        assert_eq!(y.get(&e.name).unwrap(), e);
    }
    // still a loadable model
    ModelState::load(&out).unwrap();
}

#[test]
fn interpolation_grid_and_endpoint_consistency() {
    let (dir, data) = trained("");
    let a = dir.path().join("ck/task0_finetuned.cmmk");
    let b = dir.path().join("ck/task1_finetuned.cmmk");
    for (mode, grid) in [("linear", 2), ("fisher", 2), ("linear", 5)] {
        let csv = dir.path().join(format!("{mode}{grid}.csv"));
        let g = grid.to_string();
        ok(&cmm(&[
            "interpolate", "--a", s(&a), "--b", s(&b), "--data", s(&data), "--mode", mode, "--grid", &g, "--out",
            s(&csv),
        ]));
        let text = std::fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "alpha,avg_accuracy,avg_loss");
        assert_eq!(lines.len(), grid + 1);
        assert!(lines[1].starts_with("0,"));
        assert!(lines[grid].starts_with("1,"));

        let eval = cmm(&["eval", "--ckpt", s(&a), "--data", s(&data)]);
        ok(&eval);
        let report: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
        let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(first[1], report["avg_accuracy"].as_f64().unwrap());
        assert_eq!(first[2], report["avg_loss"].as_f64().unwrap());
    }
}

#[test]
fn untrained_checkpoint_is_at_chance_on_signal_free_data() {
    let dir = TempDir::new().unwrap();
    // Radius 0: every class is the same Gaussian, so no classifier beats 1/k.
    let cfg = write(
        dir.path(),
        "c.cfg",
        "seed = 11\ndata.num_tasks = 1\ndata.classes_per_task = 4\ndata.samples_per_class = 1000\n\
         data.input_dim = 6\ndata.radius = 0\nmodel.hidden_dims = 8\nmodel.embed_dim = 4\n\
         flags.ft = false\nflags.merge = false\nflags.ntk = false\nflags.bias = false\n",
    );
    let data = dir.path().join("d.csv");
    let ck = dir.path().join("base.cmmk");
    ok(&cmm(&["gen-data", "--config", s(&cfg), "--out", s(&data)]));
    ok(&cmm(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("r.json")), "--checkpoint", s(&ck)]));
    let eval = cmm(&["eval", "--ckpt", s(&ck), "--data", s(&data)]);
    ok(&eval);
    let acc = serde_json::from_slice::<serde_json::Value>(&eval.stdout).unwrap()["avg_accuracy"]
        .as_f64()
        .unwrap();
    let n: f64 = 4.0 * 200.0;
    let sigma = (0.25 * 0.75 / n).sqrt();
    assert!((acc - 0.25).abs() <= 3.0 * sigma, "accuracy {acc} vs 0.25 ± {}", 3.0 * sigma);
}

#[test]
fn dump_embeddings_shape() {
    let (dir, data) = trained("");
    let out = dir.path().join("emb.csv");
    ok(&cmm(&[
        "dump-embeddings", "--ckpt", s(&dir.path().join("final.cmmk")), "--data", s(&data), "--tag", "merged", "--out",
        s(&out),
    ]));
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    let samples = std::fs::read_to_string(&data).unwrap().lines().count() - 1;
    assert_eq!(rows.len() - 1, samples);
    assert_eq!(rows[0].split(',').count(), 3 + 4);
    assert!(rows[1..].iter().all(|r| r.split(',').count() == 7 && r.split(',').nth(2) == Some("merged")));
}

#[test]
fn saved_checkpoint_round_trips_and_evaluates_like_memory() {
    let dir = TempDir::new().unwrap();
    let cfg_path = write(dir.path(), "c.cfg", SMALL);
    let cfg = CliConfig::load(&cfg_path).unwrap();
    let seq = config_data(&cfg).unwrap();
    let out = run_continual_observed(&cfg.run, &seq, |_| Ok(())).unwrap();
    let state = ModelState {
        config: out.setup.model.clone(),
        model: out.model.clone(),
        head: out.setup.head.clone(),
        fisher: out.fisher.clone(),
        optimizer: None,
        prototypes: Some(out.prototypes.clone()),
        config_hash: Some(cfg.hash()),
    };
    let p1 = dir.path().join("one.cmmk");
    let p2 = dir.path().join("two.cmmk");
    state.save(&out.setup.base, &p1).unwrap();
    let (loaded, base) = ModelState::load(&p1).unwrap();
    loaded.save(&base, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(loaded.prototypes, state.prototypes);
    assert_eq!(loaded.fisher, state.fisher);

    let mem = evaluate_offline(&state.config, &state.model, &state.head, &seq.tasks).unwrap();
    let disk = evaluate_offline(&loaded.config, &loaded.model, &loaded.head, &seq.tasks).unwrap();
    assert_eq!(mem, disk);
}

#[test]
fn optimizer_state_survives_the_round_trip() {
    let (dir, _) = trained("optim.decay_mode = coupled\n");
    let p = dir.path().join("ck/task1_finetuned.cmmk");
    let (state, base) = ModelState::load(&p).unwrap();
    let opt = state.optimizer.as_ref().expect("fine-tuned checkpoints carry optimizer state");
    assert!(opt.t > 0);
    assert_eq!(opt.hyper.decay_mode, cmm_core::DecayMode::Coupled);
    let again = dir.path().join("again.cmmk");
    state.save(&base, &again).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn corrupt_and_truncated_checkpoints_exit_5() {
    let (dir, data) = trained("");
    let good = std::fs::read(dir.path().join("final.cmmk")).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"XMMK");
    let cases = [("magic.cmmk", bad_magic), ("short.cmmk", good[..good.len() / 2].to_vec())];
    for (name, bytes) in cases {
        let p = dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        let out = cmm(&["eval", "--ckpt", s(&p), "--data", s(&data)]);
        assert_eq!(out.status.code(), Some(5), "{name}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(name) && err.contains("byte"), "{err}");
    }
}
