//! Variational DropPath: learnable drop probabilities for every gate site,
//! hard and relaxed (concrete) gate sampling, the training objective and
//! unit marginals.
//!
//! Convention: `p` is the probability of dropping a path, a gate value of 1
//! keeps it. Probabilities are stored as logits `θ` with `p = σ(θ)`; `±∞`
//! logits give exact 0 and 1.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::fusion::{FusionUnitKind, Gate, GateLayout, GateSample, LayerGates};
use crate::tensor::{Parameter, Tape, Tensor, Var};

/// Identifier of the gate-logit parameter.
pub const GATE_PARAM_ID: &str = "gates/drop_logits";

/// Column of a gate site in the `[L, 3]` logit matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Edge = 0,
    S = 1,
    St = 2,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::Edge, Site::S, Site::St];

    pub fn of_unit(unit: FusionUnitKind) -> Result<Self> {
        match unit {
            FusionUnitKind::S => Ok(Site::S),
            FusionUnitKind::ST => Ok(Site::St),
            FusionUnitKind::SPlusST => Err(contract_err("S+ST is a composition, not a gate site")),
        }
    }
}

fn logit(p: f64) -> f64 {
    if p == 0.0 {
        f64::NEG_INFINITY
    } else if p == 1.0 {
        f64::INFINITY
    } else {
        (p / (1.0 - p)).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_prob(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!("probability {p} outside [0, 1]")))
    }
}

/// Drop probabilities for every layer: one shared by all incoming edges, one
/// per branch. Stored as logits in a single `[L, 3]` parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    logits: Parameter,
    tau: f64,
}

impl GateParams {
    /// Every site starts at drop probability `p`.
    pub fn uniform(num_layers: usize, p: f64, tau: f64) -> Result<Self> {
        Self::from_probs(&vec![[p; 3]; num_layers], tau)
    }

    /// Rows are `[p_edge, p_S, p_ST]`.
    pub fn from_probs(probs: &[[f64; 3]], tau: f64) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * probs.len());
        for row in probs {
            for &p in row {
                check_prob(p)?;
                data.push(logit(p));
            }
        }
        let logits = Tensor::new(vec![probs.len(), 3], data)?;
        Ok(Self { logits: Parameter::new(GATE_PARAM_ID, logits), tau })
    }

    pub fn num_layers(&self) -> usize {
        self.logits.value().shape()[0]
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.tau = tau;
    }

    pub fn logits(&self) -> &Parameter {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Parameter {
        &mut self.logits
    }

    pub fn logit(&self, layer: usize, site: Site) -> f64 {
        self.logits.value().data()[3 * layer + site as usize]
    }

    pub fn p(&self, layer: usize, site: Site) -> f64 {
        sigmoid(self.logit(layer, site))
    }

    pub fn probs(&self) -> Vec<[f64; 3]> {
        (0..self.num_layers()).map(|l| Site::ALL.map(|s| self.p(l, s))).collect()
    }

    fn check_layout(&self, layout: &GateLayout) -> Result<()> {
        if layout.num_layers() != self.num_layers() {
            return Err(contract_err(format!(
                "gate parameters cover {} layers, template has {}",
                self.num_layers(),
                layout.num_layers()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> GateCheckpoint {
        GateCheckpoint {
            layers: self.probs().into_iter().map(|[p_edge, p_s, p_st]| GateProbs { p_edge, p_s, p_st }).collect(),
            tau: self.tau,
        }
    }

    pub fn from_checkpoint(ckpt: &GateCheckpoint) -> Result<Self> {
        let rows: Vec<[f64; 3]> = ckpt.layers.iter().map(|l| [l.p_edge, l.p_s, l.p_st]).collect();
        Self::from_probs(&rows, ckpt.tau)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateProbs {
    pub p_edge: f64,
    #[serde(rename = "p_S")]
    pub p_s: f64,
    #[serde(rename = "p_ST")]
    pub p_st: f64,
}

/// On-disk form of [`GateParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateCheckpoint {
    pub layers: Vec<GateProbs>,
    pub tau: f64,
}

/// One uniform draw in `(0, 1)` per gate instance, in layout order.
pub fn draw_noise(layout: &GateLayout, rng: &mut impl Rng) -> GateSample {
    let mut draw = || -> f64 { rng.sample(Open01) };
    GateSample {
        layers: layout
            .edges_per_layer()
            .iter()
            .map(|&e| LayerGates { edges: (0..e).map(|_| draw()).collect(), s: draw(), st: draw() })
            .collect(),
    }
}

fn sites<T>(g: &LayerGates<T>) -> impl Iterator<Item = (Site, &T)> {
    g.edges.iter().map(|v| (Site::Edge, v)).chain([(Site::S, &g.s), (Site::St, &g.st)])
}

fn rebuild<T, U>(g: &LayerGates<T>, mut f: impl FnMut(Site, &T) -> U) -> LayerGates<U> {
    LayerGates {
        edges: g.edges.iter().map(|v| f(Site::Edge, v)).collect(),
        s: f(Site::S, &g.s),
        st: f(Site::St, &g.st),
    }
}

/// Inverse-CDF Bernoulli: a site is kept when its noise exceeds its drop
/// probability.
pub fn hard_from_noise(params: &GateParams, noise: &GateSample) -> Result<GateSample> {
    params.check_layout(&noise.layout())?;
    Ok(GateSample {
        layers: noise
            .layers
            .iter()
            .enumerate()
            .map(|(l, g)| rebuild(g, |site, &u| if u > params.p(l, site) { 1.0 } else { 0.0 }))
            .collect(),
    })
}

/// Concrete relaxation of [`hard_from_noise`] at temperature `τ`:
/// `ε = σ((−θ + ln u − ln(1−u)) / τ)`.
pub fn relaxed_from_noise(params: &GateParams, noise: &GateSample) -> Result<GateSample> {
    params.check_layout(&noise.layout())?;
    let tau = positive_tau(params.tau)?;
    Ok(GateSample {
        layers: noise
            .layers
            .iter()
            .enumerate()
            .map(|(l, g)| rebuild(g, |site, &u| sigmoid((-params.logit(l, site) + noise_logit(u)) / tau)))
            .collect(),
    })
}

fn positive_tau(tau: f64) -> Result<f64> {
    if tau > 0.0 {
        Ok(tau)
    } else {
        Err(contract_err(format!("temperature must be positive, got {tau}")))
    }
}

fn noise_logit(u: f64) -> f64 {
    u.ln() - (1.0 - u).ln()
}

/// Independent hard gates: every site instance draws its own noise.
pub fn sample_gates_hard(params: &GateParams, layout: &GateLayout, rng: &mut impl Rng) -> Result<GateSample> {
    params.check_layout(layout)?;
    hard_from_noise(params, &draw_noise(layout, rng))
}

/// Relaxed gates on `tape`, differentiable with respect to `logits`, which
/// must hold the `[L, 3]` gate logits.
pub fn concrete_gates<'t>(logits: Var<'t>, tau: f64, noise: &GateSample) -> Result<Vec<LayerGates<Gate<'t>>>> {
    let tau = positive_tau(tau)?;
    let shape = logits.shape();
    if shape != [noise.layers.len(), 3] {
        return Err(contract_err(format!(
            "gate logits have shape {shape:?}, noise covers {} layers",
            noise.layers.len()
        )));
    }
    noise
        .layers
        .iter()
        .enumerate()
        .map(|(l, g)| {
            let mut out = Vec::with_capacity(g.edges.len() + 2);
            for (site, &u) in sites(g) {
                let theta = logits.index(3 * l + site as usize)?;
                out.push(Gate::Relaxed(theta.scale(-1.0 / tau).add_const(noise_logit(u) / tau).sigmoid()));
            }
            let st = out.pop().expect("two branch sites");
            let s = out.pop().expect("two branch sites");
            Ok(LayerGates { edges: out, s, st })
        })
        .collect()
}

/// Draws noise and returns relaxed gates on `tape` together with the
/// logit variable they depend on.
pub fn sample_gates_concrete<'t>(
    params: &GateParams,
    layout: &GateLayout,
    tape: &'t Tape,
    rng: &mut impl Rng,
) -> Result<(Var<'t>, Vec<LayerGates<Gate<'t>>>)> {
    params.check_layout(layout)?;
    positive_tau(params.tau)?;
    let logits = tape.param(&params.logits);
    let gates = concrete_gates(logits, params.tau, &draw_noise(layout, rng))?;
    Ok((logits, gates))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// length-scale prior
    pub k: f64,
    /// training-set size
    pub n: usize,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(Error::Config(format!("length-scale prior k must be positive, got {}", self.k)));
        }
        if self.n == 0 {
            return Err(Error::Config("training-set size N must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub nll: f64,
    pub entropy_term: f64,
    pub weight_term: f64,
    pub total: f64,
}

/// The gate site that scales a weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Governor {
    /// 0-based layer
    pub layer: usize,
    pub site: Site,
}

pub type Governors = BTreeMap<String, Governor>;

/// Objective on a tape: the differentiable total plus its parts.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub breakdown: ObjectiveBreakdown,
}

/// `nll + (1/N) Σ p ln p + Σ_w k² (1 − p_w) / (2N) · ‖w‖²`.
///
/// The first sum runs over every gate parameter (three per layer), the
/// second over the weights, each scaled by the keep probability of the
/// branch it belongs to. `weights` must all be governed.
pub fn objective<'t>(
    nll: Var<'t>,
    logits: Var<'t>,
    weights: &[&Parameter],
    governors: &Governors,
    cfg: &ObjectiveConfig,
) -> Result<Objective<'t>> {
    cfg.validate()?;
    if nll.value().len() != 1 {
        return Err(contract_err(format!("nll must be a scalar, got shape {:?}", nll.shape())));
    }
    let tape = nll.tape();
    let n = cfg.n as f64;
    let layers = logits.shape().first().copied().unwrap_or(0);
    let entropy = logits.plogp_from_logit().sum().scale(1.0 / n);
    let mut weight_term: Option<Var<'t>> = None;
    for w in weights {
        let g = governors
            .get(w.id())
            .ok_or_else(|| Error::Config(format!("parameter {} has no governing drop probability", w.id())))?;
        if g.layer >= layers {
            return Err(Error::Config(format!("parameter {} is governed by missing layer {}", w.id(), g.layer + 1)));
        }
        let keep = logits.index(3 * g.layer + g.site as usize)?.sigmoid().scale(-1.0).add_const(1.0);
        let norm = tape.param(w).sum_squares();
        let term = keep.mul(&norm)?.scale(cfg.k * cfg.k / (2.0 * n));
        weight_term = Some(match weight_term {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let weight_term = weight_term.unwrap_or_else(|| tape.scalar(0.0));
    let total = nll.add(&entropy)?.add(&weight_term)?;
    let breakdown = ObjectiveBreakdown {
        nll: nll.value().item(),
        entropy_term: entropy.value().item(),
        weight_term: weight_term.value().item(),
        total: total.value().item(),
    };
    Ok(Objective { total, breakdown })
}

/// Objective evaluated on plain numbers.
pub fn objective_value(
    nll: f64,
    params: &GateParams,
    weights: &[&Parameter],
    governors: &Governors,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveBreakdown> {
    let tape = Tape::new();
    let logits = tape.param(params.logits());
    Ok(objective(tape.scalar(nll), logits, weights, governors, cfg)?.breakdown)
}

/// Marginal probability of a unit derived from its drop probability:
/// `1 − √p`.
pub fn marginal_eq7(p: f64) -> Result<f64> {
    check_prob(p)?;
    Ok(1.0 - p.sqrt())
}

/// Probability of each realized unit at a layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitFrequencies {
    pub s: f64,
    pub st: f64,
    pub s_plus_st: f64,
    pub skip: f64,
}

impl UnitFrequencies {
    pub fn as_array(&self) -> [f64; 4] {
        [self.s, self.st, self.s_plus_st, self.skip]
    }

    /// The most probable realized unit (`None` for skip). Ties keep the
    /// earlier of S, ST, S+ST, skip.
    pub fn mode(&self) -> Option<FusionUnitKind> {
        let options = [
            (self.s, Some(FusionUnitKind::S)),
            (self.st, Some(FusionUnitKind::ST)),
            (self.s_plus_st, Some(FusionUnitKind::SPlusST)),
            (self.skip, None),
        ];
        let mut best = options[0];
        for o in &options[1..] {
            if o.0 > best.0 {
                best = *o;
            }
        }
        best.1
    }
}

/// Closed-form unit distribution from two independent branch gates.
pub fn unit_composition(p_s: f64, p_st: f64) -> Result<UnitFrequencies> {
    check_prob(p_s)?;
    check_prob(p_st)?;
    Ok(UnitFrequencies {
        s: (1.0 - p_s) * p_st,
        st: p_s * (1.0 - p_st),
        s_plus_st: (1.0 - p_s) * (1.0 - p_st),
        skip: p_s * p_st,
    })
}

/// Empirical unit frequencies at `layer` over `n` hard draws of its two
/// branch gates.
pub fn monte_carlo_unit_marginal(
    params: &GateParams,
    layer: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<UnitFrequencies> {
    if n == 0 {
        return Err(contract_err("need at least one draw"));
    }
    if layer >= params.num_layers() {
        return Err(Error::Index(format!("layer {layer} out of range for {} layers", params.num_layers())));
    }
    let (p_s, p_st) = (params.p(layer, Site::S), params.p(layer, Site::St));
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let s_on = rng.sample::<f64, _>(Open01) > p_s;
        let st_on = rng.sample::<f64, _>(Open01) > p_st;
        let idx = match (s_on, st_on) {
            (true, false) => 0,
            (false, true) => 1,
            (true, true) => 2,
            (false, false) => 3,
        };
        counts[idx] += 1;
    }
    let f = counts.map(|c| c as f64 / n as f64);
    Ok(UnitFrequencies { s: f[0], st: f[1], s_plus_st: f[2], skip: f[3] })
}

pub const TAU_START: f64 = 1.0;
pub const TAU_END: f64 = 0.1;

/// Linear anneal from 1.0 at step 0 to 0.1 at `total_steps`.
pub fn temperature_schedule(step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return TAU_END;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    TAU_START + (TAU_END - TAU_START) * frac
}

/// Governors for the template's branch kernels.
pub fn template_governors(net: &crate::fusion::TemplateNetwork) -> Governors {
    net.gated_kernels()
        .into_iter()
        .map(|(idx, layer, unit)| {
            let site = Site::of_unit(unit).expect("branch kernels belong to S or ST");
            (net.params().at(idx).id().to_string(), Governor { layer, site })
        })
        .collect()
}
