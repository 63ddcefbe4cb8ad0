use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::evaluate::{accuracy, predict_classes};
use crate::data::{batches, ClipDataset};
use crate::droppath::{
    concrete_gates, draw_noise, objective, temperature_schedule, template_governors, GateParams, Governors,
    ObjectiveBreakdown, ObjectiveConfig,
};
use crate::error::{contract_err, Error, Result};
use crate::fusion::{FusionStrategy, Gate, GateSample, LayerGates, Mode, TemplateNetwork};
use crate::tensor::{Parameter, Sgd, Tape};

fn default_momentum() -> f64 {
    0.9
}

/// Epoch counts and optimizer settings shared by template and standalone
/// training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub warmup_epochs: usize,
    pub main_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global epoch indices (0-based, counted from the first warmup epoch)
    /// at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Learning rate of the gate logits; defaults to `lr`.
    #[serde(default)]
    pub gate_lr: Option<f64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 10,
            main_epochs: 30,
            batch_size: 16,
            lr: 0.05,
            lr_decay_epochs: vec![20],
            lr_decay_factor: 0.1,
            seed: 0,
            momentum: 0.9,
            gate_lr: None,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!("lr_decay_factor must be in (0, 1], got {}", self.lr_decay_factor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if let Some(g) = self.gate_lr {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("gate_lr must be non-negative, got {g}")));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.main_epochs
    }

    /// Learning rate during 0-based global `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    fn gate_lr_at(&self, epoch: usize) -> f64 {
        self.gate_lr.unwrap_or(self.lr) * self.lr_at(epoch) / self.lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Main,
    Standalone,
}

/// One epoch of training. Loss terms are means over the epoch's batches,
/// weighted by batch size; `total` is their sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based global epoch
    pub epoch: usize,
    pub phase: Phase,
    #[serde(flatten)]
    pub loss: ObjectiveBreakdown,
    /// accuracy on the batches as they were trained (with sampled gates)
    pub train_accuracy: f64,
    /// eval-mode accuracy of the trained network on the validation split
    pub val_accuracy: f64,
    pub lr: f64,
    /// gate temperature, main phase only
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }
}

#[derive(Default)]
struct EpochAccumulator {
    seen: usize,
    correct: usize,
    nll: f64,
    entropy: f64,
    weight: f64,
}

impl EpochAccumulator {
    fn add(&mut self, b: &ObjectiveBreakdown, correct: usize, n: usize) {
        let w = n as f64;
        self.seen += n;
        self.correct += correct;
        self.nll += b.nll * w;
        self.entropy += b.entropy_term * w;
        self.weight += b.weight_term * w;
    }

    fn finish(&self) -> (ObjectiveBreakdown, f64) {
        let n = self.seen as f64;
        let (nll, entropy_term, weight_term) = (self.nll / n, self.entropy / n, self.weight / n);
        let b = ObjectiveBreakdown { nll, entropy_term, weight_term, total: nll + entropy_term + weight_term };
        (b, self.correct as f64 / n)
    }
}

fn check_data(train: &ClipDataset, val: &ClipDataset, net: &TemplateNetwork) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(contract_err(format!(
            "training needs non-empty splits, got {} train and {} validation clips",
            train.len(),
            val.len()
        )));
    }
    let cfg = net.config();
    for d in [train, val] {
        if d.clip_shape() != cfg.clip_shape {
            return Err(Error::Shape(format!(
                "dataset clip shape {:?} does not match template clip shape {:?}",
                d.clip_shape(),
                cfg.clip_shape
            )));
        }
        if d.labels().iter().any(|&y| y >= cfg.num_classes) {
            return Err(contract_err(format!("dataset has labels outside the template's {} classes", cfg.num_classes)));
        }
    }
    Ok(())
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 << 32);
    rng
}

fn divergence(epoch: usize, what: &str, value: f64) -> Error {
    Error::Divergence { epoch, detail: format!("{what} became {value}") }
}

struct Trainer<'a> {
    net: &'a mut TemplateNetwork,
    schedule: &'a TrainSchedule,
    cfg: &'a ObjectiveConfig,
    governors: Governors,
    weights_opt: Sgd,
    gates_opt: Sgd,
    no_decay: HashMap<String, f64>,
    /// main-phase step counter and index of the last step, for annealing
    step: usize,
    total_steps: usize,
}

impl<'a> Trainer<'a> {
    fn new(net: &'a mut TemplateNetwork, schedule: &'a TrainSchedule, cfg: &'a ObjectiveConfig) -> Self {
        let governors = template_governors(net);
        Self {
            net,
            schedule,
            cfg,
            governors,
            weights_opt: Sgd::new(schedule.momentum),
            gates_opt: Sgd::new(schedule.momentum),
            no_decay: HashMap::new(),
            step: 0,
            total_steps: 0,
        }
    }

    /// One pass over `train`. `gates` is `None` in the main phase, where
    /// relaxed gates are drawn per batch from `params`.
    #[allow(clippy::too_many_arguments)]
    fn epoch(
        &mut self,
        epoch: usize,
        train: &ClipDataset,
        fixed: Option<&GateSample>,
        params: &mut GateParams,
        update_gates: bool,
        noise: &mut ChaCha8Rng,
    ) -> Result<(ObjectiveBreakdown, f64)> {
        let lr = self.schedule.lr_at(epoch);
        let mut acc = EpochAccumulator::default();
        let layout = self.net.layout();
        for (x, labels) in batches(train, self.schedule.batch_size, self.schedule.seed, epoch as u64) {
            let tape = Tape::new();
            let logits_var = tape.param(params.logits());
            let gates: Vec<LayerGates<Gate>> = match fixed {
                Some(g) => g.as_fixed(),
                None => {
                    params.set_tau(temperature_schedule(self.step, self.total_steps));
                    self.step += 1;
                    concrete_gates(logits_var, params.tau(), &draw_noise(&layout, noise))?
                }
            };
            let out = self.net.forward(&tape, &gates, &x, Mode::Train)?;
            let nll = out.logits.softmax_cross_entropy(&labels)?;
            let correct = predict_classes(&out.logits.value()).iter().zip(&labels).filter(|(p, y)| p == y).count();
            let governed: Vec<&Parameter> =
                self.net.params().iter().filter(|p| self.governors.contains_key(p.id())).collect();
            let obj = objective(nll, logits_var, &governed, &self.governors, self.cfg)?;
            let b = obj.breakdown;
            if !b.total.is_finite() {
                return Err(divergence(epoch + 1, "training objective", b.total));
            }
            // Warmup and standalone training follow the likelihood alone.
            let loss = if update_gates { obj.total } else { nll };
            let grads = tape.backward(loss)?;
            self.net.params_mut().load_grads(&grads);
            self.weights_opt.step(self.net.params_mut().iter_mut(), lr, &self.no_decay)?;
            if update_gates {
                params.logits_mut().load_grad(&grads);
                let g = params.logits().grad().expect("just loaded");
                if !g.all_finite() {
                    return Err(divergence(epoch + 1, "gate gradient", f64::NAN));
                }
                self.gates_opt.step([params.logits_mut()], self.schedule.gate_lr_at(epoch), &self.no_decay)?;
            }
            self.net.absorb_bn_stats(&out.bn_batch_stats);
            acc.add(&b, correct, labels.len());
        }
        if !self.net.params().iter().all(|p| p.value().all_finite()) {
            return Err(divergence(epoch + 1, "a weight", f64::NAN));
        }
        Ok(acc.finish())
    }
}

/// Trains the template: a warmup phase with every gate on, then joint
/// training of weights and gate logits on the variational objective with
/// concrete gates drawn per batch and the temperature annealed linearly.
///
/// Warmup updates follow the likelihood only; the recorded breakdown still
/// reports the regularizers at the current gate probabilities.
pub fn train_template(
    net: &mut TemplateNetwork,
    params: &mut GateParams,
    train: &ClipDataset,
    val: &ClipDataset,
    schedule: &TrainSchedule,
    cfg: &ObjectiveConfig,
) -> Result<History> {
    schedule.validate()?;
    cfg.validate()?;
    check_data(train, val, net)?;
    if params.num_layers() != net.num_layers() {
        return Err(contract_err(format!(
            "gate parameters cover {} layers, template has {}",
            params.num_layers(),
            net.num_layers()
        )));
    }
    let ones = GateSample::ones(&net.layout());
    let mut noise = noise_rng(schedule.seed);
    let steps_per_epoch = train.len().div_ceil(schedule.batch_size);
    let total_steps = schedule.main_epochs * steps_per_epoch;
    let mut history = History::default();
    let mut trainer = Trainer::new(net, schedule, cfg);
    trainer.total_steps = total_steps.saturating_sub(1);
    for epoch in 0..schedule.total_epochs() {
        let main = epoch >= schedule.warmup_epochs;
        let (loss, train_accuracy) =
            trainer.epoch(epoch, train, if main { None } else { Some(&ones) }, params, main, &mut noise)?;
        let val_accuracy = accuracy(trainer.net, &ones, val)?;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            phase: if main { Phase::Main } else { Phase::Warmup },
            loss,
            train_accuracy,
            val_accuracy,
            lr: schedule.lr_at(epoch),
            // temperature of the epoch's last step
            tau: main.then(|| params.tau()),
        });
    }
    Ok(history)
}

/// Result of training one fixed strategy on its own.
#[derive(Clone, Debug)]
pub struct StandaloneRun {
    pub best_val_accuracy: f64,
    pub history: History,
    pub network: TemplateNetwork,
}

/// Trains a fresh network that contains only `strategy`'s branches and
/// edges, with no gating, for `warmup + main` epochs on the likelihood.
/// Returns the best validation accuracy over epochs.
///
/// The network is the template built from `seed` with the strategy's hard
/// gates fixed; unused branches are never evaluated and keep zero gradient,
/// so it is exactly the standalone subnetwork.
pub fn train_standalone(
    config: &crate::fusion::TemplateConfig,
    strategy: &FusionStrategy,
    train: &ClipDataset,
    val: &ClipDataset,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<StandaloneRun> {
    schedule.validate()?;
    let mut net = TemplateNetwork::build(config, seed)?;
    strategy.check_layout(&net.layout())?;
    check_data(train, val, &net)?;
    let gates = strategy.gates();
    let mut unused = GateParams::uniform(net.num_layers(), 0.5, 1.0)?;
    let mut noise = noise_rng(schedule.seed);
    // the objective's regularizers are reported but never optimized here
    let cfg = ObjectiveConfig { k: 1.0, n: train.len() };
    let mut history = History::default();
    let mut best = 0.0f64;
    let mut trainer = Trainer::new(&mut net, schedule, &cfg);
    for epoch in 0..schedule.total_epochs() {
        let (mut loss, train_accuracy) = trainer.epoch(epoch, train, Some(&gates), &mut unused, false, &mut noise)?;
        loss.entropy_term = 0.0;
        loss.weight_term = 0.0;
        loss.total = loss.nll;
        let val_accuracy = accuracy(trainer.net, &gates, val)?;
        best = best.max(val_accuracy);
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            phase: Phase::Standalone,
            loss,
            train_accuracy,
            val_accuracy,
            lr: schedule.lr_at(epoch),
            tau: None,
        });
    }
    Ok(StandaloneRun { best_val_accuracy: best, history, network: net })
}
