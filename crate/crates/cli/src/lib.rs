//! Config-driven pipeline: generate a synthetic clip set, train the gated
//! template, sample and score strategies, report per-layer preferences and
//! compare against individually trained strategies.
//!
//! Every command reads one JSON [`RunConfig`] and works inside its workdir,
//! so each stage picks up the artifacts the previous one left there.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stfusion_core::data::{self, ClipDataset, SynthMode, SynthSpec};
use stfusion_core::droppath::{GateCheckpoint, GateParams, ObjectiveConfig, TAU_START};
use stfusion_core::fusion::{build_template, Checkpoint, TemplateConfig, TemplateNetwork};
use stfusion_core::lab::{
    compare_with_oracle, evaluate_strategy, evaluate_strategy_recalibrated, layer_preference_report, sample_strategies,
    select_best, train_template, write_evaluations_csv, History, OracleComparison, PreferenceReport,
    StrategyEvaluation, TrainSchedule, MAX_ENUMERATED,
};
use stfusion_core::Error;

pub const DATASET_FILE: &str = "dataset.stfd";
pub const TEMPLATE_FILE: &str = "template.json";
pub const GATES_FILE: &str = "gates.json";
pub const HISTORY_FILE: &str = "history.json";
pub const EVALUATIONS_FILE: &str = "evaluations.csv";
pub const BEST_FILE: &str = "best_strategy.json";
pub const PREFERENCE_FILE: &str = "preference.csv";
pub const ORACLE_FILE: &str = "oracle.csv";
pub const ORACLE_RHO_FILE: &str = "oracle_rho.json";

/// Drop probability every gate starts from.
pub const INITIAL_DROP: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: &'static str },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 0 ok, 2 config, 3 divergence, 4 missing artifact, 5 size guard,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Core(Error::Divergence { .. }) => 3,
            CliError::MissingArtifact { .. } => 4,
            CliError::Core(Error::SizeGuard(_)) => 5,
            CliError::Core(_) => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    /// length-scale prior; N is taken from the training split
    pub k: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub spec: SynthSpec,
    pub seed: u64,
    pub train_frac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub count: usize,
    pub seed: u64,
    /// Re-estimate batch-norm statistics per strategy before scoring it.
    #[serde(default)]
    pub recalibrate_bn: bool,
}

/// One experiment run. A relative `workdir` is resolved against the
/// directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub template: TemplateConfig,
    pub schedule: TrainSchedule,
    pub objective: ObjectiveSection,
    pub data: DataSection,
    pub sampling: SamplingSection,
    pub workdir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let template = TemplateConfig::default();
        Self {
            data: DataSection {
                spec: SynthSpec {
                    mode: SynthMode::Mixed,
                    classes: template.num_classes,
                    clips_per_class: 16,
                    clip_shape: template.clip_shape,
                    noise_sigma: 0.05,
                },
                seed: 0,
                train_frac: 0.5,
            },
            template,
            schedule: TrainSchedule::default(),
            objective: ObjectiveSection { k: 1.0 },
            sampling: SamplingSection { count: 100, seed: 0, recalibrate_bn: false },
            workdir: PathBuf::from("run"),
        }
    }
}

fn section<T>(name: &str, r: stfusion_core::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => CliError::Config(format!("{name}: {m}")),
        other => CliError::Config(format!("{name}: {other}")),
    })
}

impl RunConfig {
    /// Parses JSON, naming the offending field path on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                CliError::Config(e.inner().to_string())
            } else {
                CliError::Config(format!("{path}: {}", e.inner()))
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.workdir.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.workdir = base.join(&cfg.workdir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces the workdir and every seed (data, schedule, sampling).
    pub fn apply_overrides(&mut self, workdir: Option<&Path>, seed: Option<u64>) {
        if let Some(w) = workdir {
            self.workdir = w.to_path_buf();
        }
        if let Some(s) = seed {
            self.data.seed = s;
            self.schedule.seed = s;
            self.sampling.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        section("template", self.template.validate())?;
        section("schedule", self.schedule.validate())?;
        section("objective", ObjectiveConfig { k: self.objective.k, n: 1 }.validate())?;
        section("data.spec", self.data.spec.validate())?;
        if !(self.data.train_frac > 0.0 && self.data.train_frac < 1.0) {
            return Err(CliError::Config(format!("data.train_frac: must lie in (0, 1), got {}", self.data.train_frac)));
        }
        if self.data.spec.clip_shape != self.template.clip_shape {
            return Err(CliError::Config(format!(
                "data.spec.clip_shape: {:?} differs from template.clip_shape {:?}",
                self.data.spec.clip_shape, self.template.clip_shape
            )));
        }
        if self.data.spec.classes != self.template.num_classes {
            return Err(CliError::Config(format!(
                "data.spec.classes: {} differs from template.num_classes {}",
                self.data.spec.classes, self.template.num_classes
            )));
        }
        if self.sampling.count == 0 {
            return Err(CliError::Config("sampling.count: must be at least 1".into()));
        }
        Ok(())
    }

    fn prepare_workdir(&self) -> Result<()> {
        fs::create_dir_all(&self.workdir)
            .map_err(|e| CliError::Config(format!("workdir: cannot create {}: {e}", self.workdir.display())))
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }
}

fn require(path: PathBuf, hint: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact { path, hint })
    }
}

fn read_json<T: DeserializeOwned>(path: PathBuf, hint: &'static str) -> Result<T> {
    let path = require(path, hint)?;
    let text = fs::read_to_string(&path).map_err(Error::from)?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::Core(e.into()))
}

/// Loads the workdir dataset and splits it as the config says.
pub fn load_splits(cfg: &RunConfig) -> Result<(ClipDataset, ClipDataset)> {
    let path = require(cfg.artifact(DATASET_FILE), "run `stfusion generate` first")?;
    let data = data::load(&path)?;
    let m = data.manifest();
    if m.spec != cfg.data.spec || m.seed != cfg.data.seed {
        return Err(CliError::Config(format!(
            "data: {} was generated from a different data section; rerun generate",
            path.display()
        )));
    }
    Ok(data::split(&data, cfg.data.train_frac, cfg.data.seed)?)
}

pub fn load_template(cfg: &RunConfig) -> Result<TemplateNetwork> {
    let ckpt: Checkpoint = read_json(cfg.artifact(TEMPLATE_FILE), "run `stfusion train` first")?;
    if ckpt.config != cfg.template {
        return Err(CliError::Config(format!(
            "template: {TEMPLATE_FILE} was trained with a different template section; rerun train"
        )));
    }
    Ok(TemplateNetwork::from_checkpoint(&ckpt)?)
}

pub fn load_gates(cfg: &RunConfig) -> Result<GateParams> {
    let ckpt: GateCheckpoint = read_json(cfg.artifact(GATES_FILE), "run `stfusion train` first")?;
    Ok(GateParams::from_checkpoint(&ckpt)?)
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<ClipDataset> {
    cfg.validate()?;
    cfg.prepare_workdir()?;
    let data = data::generate_synthetic(&cfg.data.spec, cfg.data.seed)?;
    data::save(&data, &cfg.artifact(DATASET_FILE))?;
    Ok(data)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<History> {
    cfg.validate()?;
    cfg.prepare_workdir()?;
    let (train, val) = load_splits(cfg)?;
    let mut net = build_template(&cfg.template, cfg.schedule.seed)?;
    let mut gates = GateParams::uniform(net.num_layers(), INITIAL_DROP, TAU_START)?;
    let objective = ObjectiveConfig { k: cfg.objective.k, n: train.len() };
    let history = train_template(&mut net, &mut gates, &train, &val, &cfg.schedule, &objective)?;
    write(&cfg.artifact(TEMPLATE_FILE), serde_json::to_string(&net.to_checkpoint()).map_err(Error::from)?.as_bytes())?;
    let g = serde_json::to_string_pretty(&gates.to_checkpoint()).map_err(Error::from)?;
    write(&cfg.artifact(GATES_FILE), g.as_bytes())?;
    write(&cfg.artifact(HISTORY_FILE), history.to_json().as_bytes())?;
    Ok(history)
}

pub fn cmd_sample_eval(cfg: &RunConfig) -> Result<(Vec<StrategyEvaluation>, StrategyEvaluation)> {
    cfg.validate()?;
    let net = load_template(cfg)?;
    let gates = load_gates(cfg)?;
    let (train, val) = load_splits(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampling.seed);
    let strategies = sample_strategies(&net, &gates, cfg.sampling.count, &mut rng)?;
    let evals = strategies
        .iter()
        .map(|s| {
            if cfg.sampling.recalibrate_bn {
                evaluate_strategy_recalibrated(&net, s, &train, &val, cfg.schedule.batch_size)
            } else {
                evaluate_strategy(&net, s, &val)
            }
        })
        .collect::<stfusion_core::Result<Vec<_>>>()?;
    let mut csv = Vec::new();
    write_evaluations_csv(&evals, &mut csv)?;
    write(&cfg.artifact(EVALUATIONS_FILE), &csv)?;
    let best = select_best(&evals)?.clone();
    write(&cfg.artifact(BEST_FILE), serde_json::to_string_pretty(&best).map_err(Error::from)?.as_bytes())?;
    Ok((evals, best))
}

pub fn cmd_report(cfg: &RunConfig) -> Result<PreferenceReport> {
    cfg.validate()?;
    let gates = load_gates(cfg)?;
    let best: StrategyEvaluation = read_json(cfg.artifact(BEST_FILE), "run `stfusion sample-eval` first")?;
    let report = layer_preference_report(&gates, &best.strategy)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write(&cfg.artifact(PREFERENCE_FILE), &csv)?;
    Ok(report)
}

/// Contents of the oracle summary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub seed: u64,
    pub rho: f64,
    pub posterior: Vec<f64>,
    pub oracle: Vec<f64>,
    pub oracle_median: f64,
}

pub fn cmd_oracle(cfg: &RunConfig, jobs: usize) -> Result<OracleComparison> {
    cfg.validate()?;
    let l = cfg.template.num_layers();
    if 3usize.checked_pow(l as u32).is_none_or(|n| n > MAX_ENUMERATED) {
        return Err(Error::SizeGuard(format!("3^{l} strategies exceeds the limit of {MAX_ENUMERATED}")).into());
    }
    let net = load_template(cfg)?;
    let (train, val) = load_splits(cfg)?;
    let cmp = compare_with_oracle(&net, &train, &val, &cfg.schedule, cfg.schedule.seed, jobs)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy_json", "posterior_accuracy", "oracle_accuracy"]).map_err(Error::from)?;
    for r in &cmp.rows {
        w.write_record([r.strategy.to_json(), r.posterior_accuracy.to_string(), r.oracle_accuracy.to_string()])
            .map_err(Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::from(e.into_error()))?;
    write(&cfg.artifact(ORACLE_FILE), &bytes)?;
    let summary = OracleSummary {
        seed: cfg.schedule.seed,
        rho: cmp.rho,
        posterior: cmp.posterior(),
        oracle: cmp.oracle(),
        oracle_median: cmp.oracle_median(),
    };
    write(&cfg.artifact(ORACLE_RHO_FILE), serde_json::to_string_pretty(&summary).map_err(Error::from)?.as_bytes())?;
    Ok(cmp)
}

#[derive(Debug, Parser)]
#[command(name = "stfusion", version, about = "Spatiotemporal fusion strategy lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run configuration
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's workdir
    #[arg(long)]
    pub workdir: Option<PathBuf>,
    /// Overrides every seed in the config
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for standalone trainings
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset
    Generate(CommonArgs),
    /// Train the template with warmup then v-DropPath
    Train(CommonArgs),
    /// Sample strategies from the trained gates and score them
    SampleEval(CommonArgs),
    /// Per-layer preference table
    Report(CommonArgs),
    /// Train every strategy on its own and compare rankings
    Oracle(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Generate(a)
            | Command::Train(a)
            | Command::SampleEval(a)
            | Command::Report(a)
            | Command::Oracle(a) => a,
        }
    }
}

/// Runs one parsed command, printing a short summary to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let args = cli.command.args();
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply_overrides(args.workdir.as_deref(), args.seed);
    match &cli.command {
        Command::Generate(_) => {
            let d = cmd_generate(&cfg)?;
            let [c, t, h, w] = d.clip_shape();
            println!(
                "wrote {}: {} clips of {c}x{t}x{h}x{w}, {:?} mode, class counts {:?}, seed {}",
                cfg.artifact(DATASET_FILE).display(),
                d.len(),
                d.manifest().spec.mode,
                d.class_histogram(),
                d.manifest().seed
            );
        }
        Command::Train(_) => {
            let h = cmd_train(&cfg)?;
            for e in &h.epochs {
                println!(
                    "epoch {:>3} {:<9} total {:>9.5} nll {:>8.5} train {:.3} val {:.3}",
                    e.epoch,
                    format!("{:?}", e.phase).to_lowercase(),
                    e.loss.total,
                    e.loss.nll,
                    e.train_accuracy,
                    e.val_accuracy
                );
            }
            println!("wrote {}, {}, {}", TEMPLATE_FILE, GATES_FILE, HISTORY_FILE);
        }
        Command::SampleEval(_) => {
            let (evals, best) = cmd_sample_eval(&cfg)?;
            println!(
                "scored {} strategies; best val {:.4} with {} params, {} mult-adds",
                evals.len(),
                best.val_accuracy,
                best.active_param_count,
                best.mult_add_proxy
            );
            println!("best {}", best.strategy.to_json());
        }
        Command::Report(_) => {
            let r = cmd_report(&cfg)?;
            println!("layer   p_S    p_ST   S      ST     S+ST   skip   chosen");
            for l in &r.layers {
                let f = l.frequencies;
                println!(
                    "{:>5} {:.3} {:.3} {:.3} {:.3} {:.3} {:.3} {}",
                    l.layer,
                    l.p_s,
                    l.p_st,
                    f.s,
                    f.st,
                    f.s_plus_st,
                    f.skip,
                    l.chosen_unit.map_or("skip", |u| u.as_str())
                );
            }
        }
        Command::Oracle(a) => {
            let cmp = cmd_oracle(&cfg, a.jobs as usize)?;
            for r in &cmp.rows {
                println!(
                    "{:<40} posterior {:.4} oracle {:.4}",
                    r.strategy.to_json(),
                    r.posterior_accuracy,
                    r.oracle_accuracy
                );
            }
            println!("seed {} rho {:.4}", cfg.schedule.seed, cmp.rho);
        }
    }
    Ok(())
}
