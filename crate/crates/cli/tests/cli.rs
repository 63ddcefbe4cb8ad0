use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stfusion::{
    RunConfig, BEST_FILE, DATASET_FILE, EVALUATIONS_FILE, GATES_FILE, HISTORY_FILE, ORACLE_FILE, ORACLE_RHO_FILE,
    PREFERENCE_FILE,
};
use stfusion_core::data::{self, generate_synthetic, SynthMode};
use stfusion_core::droppath::{GateCheckpoint, GateParams};
use stfusion_core::fusion::{FusionStrategy, GateSample, TemplateConfig};
use stfusion_core::lab::{accuracy, History, Phase, StrategyEvaluation, TrainSchedule, PREFERENCE_HEADER};
use tempfile::TempDir;

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// A config that trains in about a second.
fn quick(dir: &Path) -> RunConfig {
    let base = RunConfig::default();
    let mut cfg = RunConfig {
        template: TemplateConfig {
            num_blocks: 1,
            layers_per_block: 2,
            growth_channels: 4,
            stem_channels: 4,
            clip_shape: [1, 8, 8, 8],
            num_classes: 4,
            kernel_sizes: [3, 3, 3],
        },
        schedule: TrainSchedule {
            warmup_epochs: 2,
            main_epochs: 2,
            lr_decay_epochs: vec![3],
            ..TrainSchedule::default()
        },
        workdir: dir.join("work"),
        ..base
    };
    cfg.data.spec.clip_shape = [1, 8, 8, 8];
    cfg.data.spec.clips_per_class = 8;
    cfg.sampling.count = 12;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn stfusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stfusion")).args(args).output().unwrap()
}

fn run_ok(cmd: &str, config: &Path, extra: &[&str]) -> String {
    let mut args = vec![cmd, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = stfusion(&args);
    assert!(out.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn run_code(cmd: &str, config: &Path) -> (i32, String) {
    let out = stfusion(&[cmd, "--config", config.to_str().unwrap()]);
    (out.status.code().unwrap(), String::from_utf8(out.stderr).unwrap())
}

#[test]
fn shipped_configs_parse() {
    let default = RunConfig::from_json(&fs::read_to_string(workspace_file("configs/default.json")).unwrap()).unwrap();
    assert_eq!(default, RunConfig::default());
    default.validate().unwrap();
    let small = RunConfig::load(&workspace_file("configs/small.json")).unwrap();
    small.validate().unwrap();
    assert!(small.workdir.ends_with("configs/run-small"));
}

#[test]
fn generate_writes_a_reloadable_dataset() {
    let dir = TempDir::new().unwrap();
    let cfg = quick(dir.path());
    let path = write_config(dir.path(), &cfg);
    let stdout = run_ok("generate", &path, &[]);
    assert!(stdout.contains("32 clips"), "{stdout}");
    let loaded = data::load(&cfg.workdir.join(DATASET_FILE)).unwrap();
    assert_eq!(loaded, generate_synthetic(&cfg.data.spec, cfg.data.seed).unwrap());
}

#[test]
fn config_errors_name_the_field() {
    let dir = TempDir::new().unwrap();
    let text = quick(dir.path()).to_json().replace("\"train_frac\"", "\"train_fraction\"");
    let path = dir.path().join("bad.json");
    fs::write(&path, text).unwrap();
    let (code, err) = run_code("generate", &path);
    assert_eq!(code, 2);
    assert!(err.contains("data") && err.contains("train_fraction"), "{err}");

    let mut v: serde_json::Value = serde_json::from_str(&quick(dir.path()).to_json()).unwrap();
    v["data"].as_object_mut().unwrap().remove("seed");
    fs::write(&path, v.to_string()).unwrap();
    let (code, err) = run_code("generate", &path);
    assert_eq!(code, 2);
    assert!(err.contains("data: missing field `seed`"), "{err}");

    v["data"]["seed"] = 0.into();
    v["template"]["num_classes"] = 5.into();
    fs::write(&path, v.to_string()).unwrap();
    let (code, err) = run_code("generate", &path);
    assert_eq!(code, 2);
    assert!(err.contains("num_classes"), "{err}");

    let (code, _) = run_code("generate", &dir.path().join("absent.json"));
    assert_eq!(code, 2);
}

#[test]
fn missing_artifacts_exit_4() {
    let dir = TempDir::new().unwrap();
    let path = write_config(dir.path(), &quick(dir.path()));
    for cmd in ["train", "sample-eval", "report", "oracle"] {
        let (code, err) = run_code(cmd, &path);
        assert_eq!(code, 4, "{cmd}: {err}");
        assert!(err.contains("missing artifact"), "{err}");
    }
}

#[test]
fn divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    let mut cfg = quick(dir.path());
    cfg.schedule.lr = 1e150;
    let path = write_config(dir.path(), &cfg);
    run_ok("generate", &path, &[]);
    let (code, err) = run_code("train", &path);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("epoch"), "{err}");
}

#[test]
fn oracle_size_guard_exits_5() {
    let dir = TempDir::new().unwrap();
    let mut cfg = quick(dir.path());
    cfg.template.layers_per_block = 11;
    let path = write_config(dir.path(), &cfg);
    assert_eq!(run_code("oracle", &path).0, 5);
}

#[test]
fn warmup_only_training_and_rerun_determinism() {
    let dir = TempDir::new().unwrap();
    let mut cfg = quick(dir.path());
    cfg.schedule.main_epochs = 0;
    let path = write_config(dir.path(), &cfg);
    run_ok("generate", &path, &[]);
    run_ok("train", &path, &[]);
    let first = fs::read(cfg.workdir.join(HISTORY_FILE)).unwrap();
    let h: History = serde_json::from_slice(&first).unwrap();
    assert_eq!(h.epochs.len(), 2);
    assert!(h.epochs.iter().all(|e| e.phase == Phase::Warmup));
    run_ok("train", &path, &[]);
    assert_eq!(fs::read(cfg.workdir.join(HISTORY_FILE)).unwrap(), first);
}

#[test]
fn seed_and_workdir_overrides() {
    let dir = TempDir::new().unwrap();
    let mut cfg = quick(dir.path());
    cfg.workdir = PathBuf::from("relative");
    let path = write_config(dir.path(), &cfg);
    run_ok("generate", &path, &["--seed", "7"]);
    let d = data::load(&dir.path().join("relative").join(DATASET_FILE)).unwrap();
    assert_eq!(d.manifest().seed, 7);
    let other = dir.path().join("elsewhere");
    run_ok("generate", &path, &["--workdir", other.to_str().unwrap()]);
    assert!(other.join(DATASET_FILE).exists());
    // a dataset from another seed is not silently reused
    let (code, err) = {
        let out = stfusion(&["train", "--config", path.to_str().unwrap()]);
        (out.status.code().unwrap(), String::from_utf8(out.stderr).unwrap())
    };
    assert_eq!(code, 2, "{err}");
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    (header, r.records().map(|r| r.unwrap()).collect())
}

#[test]
fn sample_eval_and_report_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = quick(dir.path());
    let path = write_config(dir.path(), &cfg);
    run_ok("generate", &path, &[]);
    run_ok("train", &path, &[]);
    run_ok("sample-eval", &path, &[]);

    let (_, rows) = read_csv(&cfg.workdir.join(EVALUATIONS_FILE));
    assert_eq!(rows.len(), cfg.sampling.count);
    let parsed: Vec<(f64, usize, usize)> =
        rows.iter().map(|r| (r[1].parse().unwrap(), r[2].parse().unwrap(), r[3].parse().unwrap())).collect();
    assert!(parsed.windows(2).all(|w| w[0].0 >= w[1].0));
    // best row under the tie rule, recomputed from the CSV
    let top = parsed[0].0;
    let cheapest = parsed.iter().filter(|r| r.0 == top).map(|r| (r.2, r.1)).min().unwrap();
    let best: StrategyEvaluation =
        serde_json::from_str(&fs::read_to_string(cfg.workdir.join(BEST_FILE)).unwrap()).unwrap();
    assert_eq!((best.val_accuracy, best.mult_add_proxy, best.active_param_count), (top, cheapest.0, cheapest.1));

    run_ok("report", &path, &[]);
    let gates: GateCheckpoint =
        serde_json::from_str(&fs::read_to_string(cfg.workdir.join(GATES_FILE)).unwrap()).unwrap();
    let (header, rows) = read_csv(&cfg.workdir.join(PREFERENCE_FILE));
    assert_eq!(header, PREFERENCE_HEADER);
    assert_eq!(rows.len(), 2);
    for (row, g) in rows.iter().zip(&gates.layers) {
        let f: Vec<f64> = (6..10).map(|i| row[i].parse().unwrap()).collect();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let eq7_s: f64 = row[4].parse().unwrap();
        let eq7_st: f64 = row[5].parse().unwrap();
        assert!((eq7_s - (1.0 - g.p_s.sqrt())).abs() < 1e-12);
        assert!((eq7_st - (1.0 - g.p_st.sqrt())).abs() < 1e-12);
    }
}

#[test]
fn zero_drop_checkpoint_samples_the_template() {
    let dir = TempDir::new().unwrap();
    let mut cfg = quick(dir.path());
    cfg.sampling.count = 1;
    let path = write_config(dir.path(), &cfg);
    run_ok("generate", &path, &[]);
    run_ok("train", &path, &[]);
    let zero = GateParams::uniform(2, 0.0, 1.0).unwrap().to_checkpoint();
    fs::write(cfg.workdir.join(GATES_FILE), serde_json::to_string(&zero).unwrap()).unwrap();
    run_ok("sample-eval", &path, &[]);
    let (_, rows) = read_csv(&cfg.workdir.join(EVALUATIONS_FILE));
    assert_eq!(rows.len(), 1);
    let net = stfusion::load_template(&cfg).unwrap();
    let (_, val) = stfusion::load_splits(&cfg).unwrap();
    let template_acc = accuracy(&net, &GateSample::ones(&net.layout()), &val).unwrap();
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), template_acc);
    assert_eq!(FusionStrategy::from_json(&rows[0][0]).unwrap().gates(), GateSample::ones(&net.layout()));
}

#[test]
fn oracle_outputs_are_reproducible_across_job_counts() {
    let dir = TempDir::new().unwrap();
    let mut cfg = quick(dir.path());
    cfg.template.layers_per_block = 1;
    let path = write_config(dir.path(), &cfg);
    run_ok("generate", &path, &[]);
    run_ok("train", &path, &[]);
    run_ok("oracle", &path, &[]);
    let (header, rows) = read_csv(&cfg.workdir.join(ORACLE_FILE));
    assert_eq!(header, ["strategy_json", "posterior_accuracy", "oracle_accuracy"]);
    assert_eq!(rows.len(), 3);
    let csv_one = fs::read(cfg.workdir.join(ORACLE_FILE)).unwrap();
    let rho_one = fs::read(cfg.workdir.join(ORACLE_RHO_FILE)).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&rho_one).unwrap();
    let rho = summary["rho"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&rho));
    assert_eq!(summary["posterior"].as_array().unwrap().len(), 3);
    run_ok("oracle", &path, &["--jobs", "3"]);
    assert_eq!(fs::read(cfg.workdir.join(ORACLE_FILE)).unwrap(), csv_one);
    assert_eq!(fs::read(cfg.workdir.join(ORACLE_RHO_FILE)).unwrap(), rho_one);
}

#[test]
fn two_layer_oracle_is_reproducible_per_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = quick(dir.path());
    let path = write_config(dir.path(), &cfg);
    let mut summaries = Vec::new();
    for seed in ["3", "3", "4"] {
        run_ok("generate", &path, &["--seed", seed]);
        run_ok("train", &path, &["--seed", seed]);
        run_ok("oracle", &path, &["--seed", seed, "--jobs", "2"]);
        summaries.push(fs::read_to_string(cfg.workdir.join(ORACLE_RHO_FILE)).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);
    let v: serde_json::Value = serde_json::from_str(&summaries[2]).unwrap();
    assert_eq!(v["seed"], 4);
    assert_eq!(v["oracle"].as_array().unwrap().len(), 9);
}

#[test]
fn default_config_warmup_loss_decreases() {
    let dir = TempDir::new().unwrap();
    let mut cfg = RunConfig::default();
    assert_eq!(cfg.data.spec.mode, SynthMode::Mixed);
    cfg.workdir = dir.path().join("work");
    let path = write_config(dir.path(), &cfg);
    run_ok("generate", &path, &[]);
    run_ok("train", &path, &[]);
    let h: History = serde_json::from_str(&fs::read_to_string(cfg.workdir.join(HISTORY_FILE)).unwrap()).unwrap();
    let warm: Vec<f64> = h.epochs.iter().filter(|e| e.phase == Phase::Warmup).map(|e| e.loss.total).collect();
    assert_eq!(warm.len(), cfg.schedule.warmup_epochs);
    assert!(warm.windows(2).all(|w| w[1] < w[0]), "{warm:?}");
    let last = h.last().unwrap();
    assert!(last.train_accuracy > 0.9, "{}", last.train_accuracy);
    assert!(last.loss.total < h.epochs[0].loss.total);
}
