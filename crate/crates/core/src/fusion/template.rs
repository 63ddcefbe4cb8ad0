use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gates::{Gate, GateLayout, GateSample, LayerGates};
use super::strategy::{FusionStrategy, FusionUnitKind};
use crate::error::{contract_err, Error, Result};
use crate::tensor::{BatchNormStats, BnMode, ChannelStats, ParamStore, Parameter, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateConfig {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub growth_channels: usize,
    pub stem_channels: usize,
    /// `[C, T, H, W]`
    pub clip_shape: [usize; 4],
    pub num_classes: usize,
    /// `[kt, kh, kw]`
    pub kernel_sizes: [usize; 3],
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            num_blocks: 2,
            layers_per_block: 4,
            growth_channels: 8,
            stem_channels: 8,
            clip_shape: [1, 8, 16, 16],
            num_classes: 4,
            kernel_sizes: [3, 3, 3],
        }
    }
}

impl TemplateConfig {
    pub fn num_layers(&self) -> usize {
        self.num_blocks * self.layers_per_block
    }

    pub fn layout(&self) -> GateLayout {
        GateLayout::blocks(self.num_blocks, self.layers_per_block)
    }

    /// Smallest spatial extent that survives every transition's 2x pooling.
    pub fn min_spatial(&self) -> usize {
        1 << (self.num_blocks.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("layers_per_block", self.layers_per_block),
            ("growth_channels", self.growth_channels),
            ("stem_channels", self.stem_channels),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.clip_shape.contains(&0) {
            return Err(Error::Config(format!("clip_shape extents must be positive, got {:?}", self.clip_shape)));
        }
        if self.kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!("kernel_sizes must be odd, got {:?}", self.kernel_sizes)));
        }
        let m = self.min_spatial();
        let [_, _, h, w] = self.clip_shape;
        if h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "clip shape too small for the pooling pyramid: {} transitions need H and W to be multiples of {m} (minimum H = {m}, W = {m}), got {h}x{w}",
                self.num_blocks - 1
            )));
        }
        Ok(())
    }

    /// Channels entering each dense block.
    pub fn block_input_channels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_blocks);
        let mut c = self.stem_channels;
        for _ in 0..self.num_blocks {
            out.push(c);
            c = ((c + self.layers_per_block * self.growth_channels) / 2).max(1);
        }
        out
    }

    /// Concatenated input width of the 0-based layer `layer`.
    pub fn layer_input_channels(&self, layer: usize) -> usize {
        let block = layer / self.layers_per_block;
        let pos = layer % self.layers_per_block;
        self.block_input_channels()[block] + pos * self.growth_channels
    }
}

#[derive(Clone, Debug)]
struct BnSlot {
    key: String,
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct EdgeSlots {
    channels: usize,
    bn: BnSlot,
    s_kernel: usize,
    st_kernel: usize,
}

#[derive(Clone, Debug)]
struct LayerSlots {
    edges: Vec<EdgeSlots>,
    temporal: usize,
    /// spatial `(H, W)` at this layer
    spatial: (usize, usize),
}

#[derive(Clone, Debug)]
struct SliceSlots {
    channels: usize,
    bn: BnSlot,
    weights: usize,
}

#[derive(Clone, Debug)]
struct TransitionSlots {
    slices: Vec<SliceSlots>,
    out_channels: usize,
    spatial: (usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of one forward pass.
pub struct ForwardOutput<'t> {
    pub logits: Var<'t>,
    /// Batch statistics observed by every batch-norm site that ran in
    /// train mode, keyed by site.
    pub bn_batch_stats: Vec<(String, ChannelStats)>,
}

/// Densely connected gated super-network containing every branch of every
/// fusion strategy.
///
/// Each layer normalizes every incoming edge (BN + ReLU), multiplies it by
/// its edge gate, and feeds two branches: S (2D conv) and ST (2D conv then
/// 1D temporal conv), each multiplied by its own gate and summed. Convolution
/// weights are stored per `(layer, edge, unit)`, so a layer's kernel over
/// the concatenated input is the stack of its edge kernels.
#[derive(Clone, Debug)]
pub struct TemplateNetwork {
    config: TemplateConfig,
    params: ParamStore,
    bn_stats: BTreeMap<String, BatchNormStats>,
    stem: usize,
    layers: Vec<LayerSlots>,
    transitions: Vec<TransitionSlots>,
    head: Vec<SliceSlots>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

struct Builder {
    params: ParamStore,
    bn_stats: BTreeMap<String, BatchNormStats>,
}

impl Builder {
    fn add(&mut self, id: String, value: Tensor) -> usize {
        self.params.insert(Parameter::new(id, value)).expect("identifiers are unique by construction")
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> BnSlot {
        let gamma = self.add(format!("{prefix}/bn/gamma"), Tensor::full(&[channels], 1.0));
        let beta = self.add(format!("{prefix}/bn/beta"), Tensor::zeros(&[channels]));
        let key = format!("{prefix}/bn");
        self.bn_stats.insert(key.clone(), BatchNormStats::default());
        BnSlot { key, gamma, beta }
    }
}

pub fn build_template(config: &TemplateConfig, seed: u64) -> Result<TemplateNetwork> {
    TemplateNetwork::build(config, seed)
}

impl TemplateNetwork {
    pub fn build(config: &TemplateConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: ParamStore::new(), bn_stats: BTreeMap::new() };
        let [c_in, _, mut h, mut w] = config.clip_shape;
        let [kt, kh, kw] = config.kernel_sizes;
        let g = config.growth_channels;

        let stem =
            b.add("stem/kernel".into(), uniform(&mut rng, &[config.stem_channels, c_in, kh, kw], c_in * kh * kw));

        let block_in = config.block_input_channels();
        let mut layers = Vec::new();
        let mut transitions = Vec::new();
        let mut head = Vec::new();
        for (blk, &cin) in block_in.iter().enumerate() {
            let slice_channels: Vec<usize> =
                std::iter::once(cin).chain(std::iter::repeat_n(g, config.layers_per_block)).collect();
            for pos in 0..config.layers_per_block {
                let l = layers.len() + 1;
                let width = cin + pos * g;
                let edges = (0..=pos)
                    .map(|i| {
                        let ch = slice_channels[i];
                        let prefix = format!("layer_{l}/edge_{i}");
                        let bn = b.bn(&prefix, ch);
                        let s_kernel = b.add(
                            format!("{prefix}/unit_S/kernel"),
                            uniform(&mut rng, &[g, ch, kh, kw], width * kh * kw),
                        );
                        let st_kernel = b.add(
                            format!("{prefix}/unit_ST/kernel"),
                            uniform(&mut rng, &[g, ch, kh, kw], width * kh * kw),
                        );
                        EdgeSlots { channels: ch, bn, s_kernel, st_kernel }
                    })
                    .collect();
                let temporal = b.add(format!("layer_{l}/unit_ST/temporal"), uniform(&mut rng, &[g, g, kt], g * kt));
                layers.push(LayerSlots { edges, temporal, spatial: (h, w) });
            }
            let total: usize = slice_channels.iter().sum();
            if blk + 1 < config.num_blocks {
                let out_channels = block_in[blk + 1];
                let slices = slice_channels
                    .iter()
                    .enumerate()
                    .map(|(j, &ch)| {
                        let prefix = format!("transition_{}/slice_{j}", blk + 1);
                        let bn = b.bn(&prefix, ch);
                        let weights =
                            b.add(format!("{prefix}/kernel"), uniform(&mut rng, &[out_channels, ch, 1, 1], total));
                        SliceSlots { channels: ch, bn, weights }
                    })
                    .collect();
                transitions.push(TransitionSlots { slices, out_channels, spatial: (h, w) });
                h /= 2;
                w /= 2;
            } else {
                head = slice_channels
                    .iter()
                    .enumerate()
                    .map(|(j, &ch)| {
                        let prefix = format!("head/slice_{j}");
                        let bn = b.bn(&prefix, ch);
                        let weights =
                            b.add(format!("{prefix}/weights"), uniform(&mut rng, &[config.num_classes, ch], total));
                        SliceSlots { channels: ch, bn, weights }
                    })
                    .collect();
            }
        }
        Ok(Self { config: config.clone(), params: b.params, bn_stats: b.bn_stats, stem, layers, transitions, head })
    }

    pub fn config(&self) -> &TemplateConfig {
        &self.config
    }

    pub fn layout(&self) -> GateLayout {
        self.config.layout()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &BTreeMap<String, BatchNormStats> {
        &self.bn_stats
    }

    pub fn gate_site_count(&self) -> usize {
        self.layout().gate_site_count()
    }

    pub fn layer_input_channels(&self, layer: usize) -> usize {
        self.layers[layer].edges.iter().map(|e| e.channels).sum()
    }

    pub fn parameter_ids(&self) -> BTreeSet<String> {
        self.params.iter().map(|p| p.id().to_string()).collect()
    }

    /// Branch kernels and the gate that governs each: `(param index, 0-based
    /// layer, unit)`. Only these weights are gated; stem, batch norm,
    /// transitions and head are always on.
    pub fn gated_kernels(&self) -> Vec<(usize, usize, FusionUnitKind)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for e in &layer.edges {
                out.push((e.s_kernel, l, FusionUnitKind::S));
                out.push((e.st_kernel, l, FusionUnitKind::ST));
            }
            out.push((layer.temporal, l, FusionUnitKind::ST));
        }
        out
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn absorb_bn_stats(&mut self, stats: &[(String, ChannelStats)]) {
        for (key, (mean, var)) in stats {
            if let Some(s) = self.bn_stats.get_mut(key) {
                s.absorb(mean, var);
            }
        }
    }

    pub fn reset_bn_stats(&mut self) {
        for s in self.bn_stats.values_mut() {
            *s = BatchNormStats::default();
        }
    }

    pub fn set_bn_stats(&mut self, stats: BTreeMap<String, BatchNormStats>) -> Result<()> {
        if stats.keys().ne(self.bn_stats.keys()) {
            return Err(contract_err("batch-norm sites do not match this template"));
        }
        self.bn_stats = stats;
        Ok(())
    }

    fn check_batch(&self, clips: &Tensor) -> Result<()> {
        let s = clips.shape();
        if s.len() != 5 || s[1..] != self.config.clip_shape {
            return Err(Error::Shape(format!(
                "batch shape {s:?} does not match clip shape {:?}",
                self.config.clip_shape
            )));
        }
        Ok(())
    }

    fn bn_relu<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        slot: &BnSlot,
        mode: Mode,
        stats: &mut Vec<(String, ChannelStats)>,
    ) -> Result<Var<'t>> {
        let gamma = tape.param(self.params.at(slot.gamma));
        let beta = tape.param(self.params.at(slot.beta));
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval(&self.bn_stats[&slot.key]),
        };
        let (y, batch) = x.batch_norm(&gamma, &beta, bn_mode).map_err(|e| match e {
            Error::Uninitialized(m) => Error::Uninitialized(format!("{}: {m}", slot.key)),
            other => other,
        })?;
        if let Some(b) = batch {
            stats.push((slot.key.clone(), b));
        }
        Ok(y.relu())
    }

    fn conv2d<'t>(&self, tape: &'t Tape, x: Var<'t>, kernel: usize) -> Result<Var<'t>> {
        let k = tape.param(self.params.at(kernel));
        let ks = k.shape();
        x.conv2d_spatial(&k, [(ks[2] - 1) / 2, (ks[3] - 1) / 2])
    }

    fn sum_all<'t>(vars: Vec<Var<'t>>) -> Result<Option<Var<'t>>> {
        let mut it = vars.into_iter();
        let Some(mut acc) = it.next() else { return Ok(None) };
        for v in it {
            acc = acc.add(&v)?;
        }
        Ok(Some(acc))
    }

    fn layer_forward<'t>(
        &self,
        tape: &'t Tape,
        layer: usize,
        inputs: &[Var<'t>],
        gates: &LayerGates<Gate<'t>>,
        mode: Mode,
        stats: &mut Vec<(String, ChannelStats)>,
    ) -> Result<Var<'t>> {
        let slots = &self.layers[layer];
        let batch = inputs[0].shape()[0];
        let t = self.config.clip_shape[1];
        let (h, w) = slots.spatial;
        let zeros = || tape.constant(Tensor::zeros(&[batch, self.config.growth_channels, t, h, w]));
        if gates.s.is_off() && gates.st.is_off() {
            return Ok(zeros());
        }
        let mut active = Vec::new();
        for ((x, e), g) in inputs.iter().zip(&slots.edges).zip(&gates.edges) {
            if g.is_off() {
                continue;
            }
            let hidden = self.bn_relu(tape, *x, &e.bn, mode, stats)?;
            if let Some(hg) = g.apply(hidden)? {
                active.push((hg, e));
            }
        }
        if active.is_empty() {
            return Ok(zeros());
        }
        let mut out = Vec::with_capacity(2);
        if !gates.s.is_off() {
            let parts = active.iter().map(|(x, e)| self.conv2d(tape, *x, e.s_kernel)).collect::<Result<Vec<_>>>()?;
            let s = Self::sum_all(parts)?.expect("at least one active edge");
            out.extend(gates.s.apply(s)?);
        }
        if !gates.st.is_off() {
            let parts = active.iter().map(|(x, e)| self.conv2d(tape, *x, e.st_kernel)).collect::<Result<Vec<_>>>()?;
            let spatial = Self::sum_all(parts)?.expect("at least one active edge");
            let k = tape.param(self.params.at(slots.temporal));
            let kt = k.shape()[2];
            let st = spatial.conv1d_temporal(&k, (kt - 1) / 2)?;
            out.extend(gates.st.apply(st)?);
        }
        Ok(Self::sum_all(out)?.expect("at least one active branch"))
    }

    /// Forward pass with one gate per site instance.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        gates: &[LayerGates<Gate<'t>>],
        clips: &Tensor,
        mode: Mode,
    ) -> Result<ForwardOutput<'t>> {
        self.check_batch(clips)?;
        let layout = self.layout();
        if gates.len() != layout.num_layers() || gates.iter().enumerate().any(|(l, g)| g.edges.len() != layout.edges(l))
        {
            return Err(contract_err(format!(
                "gate count mismatch: got edges per layer {:?}, template expects {:?}",
                gates.iter().map(|g| g.edges.len()).collect::<Vec<_>>(),
                layout.edges_per_layer()
            )));
        }
        let mut stats = Vec::new();
        let x = tape.constant(clips.clone());
        let mut block_input = self.conv2d(tape, x, self.stem)?;
        let lpb = self.config.layers_per_block;
        for blk in 0..self.config.num_blocks {
            let mut features = vec![block_input];
            for pos in 0..lpb {
                let l = blk * lpb + pos;
                let out = self.layer_forward(tape, l, &features, &gates[l], mode, &mut stats)?;
                features.push(out);
            }
            if blk + 1 < self.config.num_blocks {
                let tr = &self.transitions[blk];
                let mut parts = Vec::with_capacity(features.len());
                for (f, s) in features.iter().zip(&tr.slices) {
                    let hdn = self.bn_relu(tape, *f, &s.bn, mode, &mut stats)?;
                    parts.push(self.conv2d(tape, hdn, s.weights)?);
                }
                block_input = Self::sum_all(parts)?.expect("non-empty").avg_pool2()?;
            } else {
                let mut parts = Vec::with_capacity(features.len());
                for (f, s) in features.iter().zip(&self.head) {
                    let hdn = self.bn_relu(tape, *f, &s.bn, mode, &mut stats)?;
                    let wv = tape.param(self.params.at(s.weights));
                    parts.push(hdn.pool_and_classify(&wv)?);
                }
                let logits = Self::sum_all(parts)?.expect("non-empty");
                return Ok(ForwardOutput { logits, bn_batch_stats: stats });
            }
        }
        unreachable!("num_blocks >= 1 is validated")
    }

    /// Forward pass with fixed gate values in `[0, 1]`.
    pub fn forward_with_gates<'t>(
        &self,
        tape: &'t Tape,
        gates: &GateSample,
        clips: &Tensor,
        mode: Mode,
    ) -> Result<ForwardOutput<'t>> {
        gates.check_layout(&self.layout())?;
        self.forward(tape, &gates.as_fixed(), clips, mode)
    }

    /// Every gate on: the plain template.
    pub fn forward_ungated<'t>(&self, tape: &'t Tape, clips: &Tensor, mode: Mode) -> Result<ForwardOutput<'t>> {
        self.forward_with_gates(tape, &GateSample::ones(&self.layout()), clips, mode)
    }

    /// Logits for a batch without recording gradients of interest.
    pub fn predict(&self, gates: &GateSample, clips: &Tensor, mode: Mode) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.forward_with_gates(&tape, gates, clips, mode)?;
        let logits = out.logits.value();
        Ok((*logits).clone())
    }

    /// Identifiers of the parameters a strategy actually uses.
    pub fn active_parameter_ids(&self, strategy: &FusionStrategy) -> Result<BTreeSet<String>> {
        strategy.check_layout(&self.layout())?;
        let mut ids = BTreeSet::new();
        let mut add = |i: usize| {
            ids.insert(self.params.at(i).id().to_string());
        };
        add(self.stem);
        for tr in &self.transitions {
            for s in &tr.slices {
                add(s.bn.gamma);
                add(s.bn.beta);
                add(s.weights);
            }
        }
        for s in &self.head {
            add(s.bn.gamma);
            add(s.bn.beta);
            add(s.weights);
        }
        for (slots, t) in self.layers.iter().zip(strategy.layers()) {
            let Some(u) = t.u else { continue };
            for (e, &on) in slots.edges.iter().zip(&t.v) {
                if !on {
                    continue;
                }
                add(e.bn.gamma);
                add(e.bn.beta);
                if u.uses_s() {
                    add(e.s_kernel);
                }
                if u.uses_st() {
                    add(e.st_kernel);
                }
            }
            if u.uses_st() && t.v.iter().any(|&b| b) {
                add(slots.temporal);
            }
        }
        Ok(ids)
    }

    pub fn active_param_count(&self, strategy: &FusionStrategy) -> Result<usize> {
        Ok(self
            .active_parameter_ids(strategy)?
            .iter()
            .map(|id| self.params.get(id).expect("known id").value().len())
            .sum())
    }

    /// Multiply-adds per clip of the convolutions and head a strategy runs.
    pub fn mult_add_proxy(&self, strategy: &FusionStrategy) -> Result<usize> {
        strategy.check_layout(&self.layout())?;
        let [c_in, t, h0, w0] = self.config.clip_shape;
        let [kt, kh, kw] = self.config.kernel_sizes;
        let g = self.config.growth_channels;
        let mut total = t * h0 * w0 * self.config.stem_channels * c_in * kh * kw;
        for (slots, trip) in self.layers.iter().zip(strategy.layers()) {
            let Some(u) = trip.u else { continue };
            let width: usize = slots.edges.iter().zip(&trip.v).filter(|(_, &on)| on).map(|(e, _)| e.channels).sum();
            if width == 0 {
                continue;
            }
            let pos = t * slots.spatial.0 * slots.spatial.1;
            let conv2d = pos * g * width * kh * kw;
            if u.uses_s() {
                total += conv2d;
            }
            if u.uses_st() {
                total += conv2d + pos * g * g * kt;
            }
        }
        for tr in &self.transitions {
            let width: usize = tr.slices.iter().map(|s| s.channels).sum();
            total += t * tr.spatial.0 * tr.spatial.1 * tr.out_channels * width;
        }
        let width: usize = self.head.iter().map(|s| s.channels).sum();
        total += self.config.num_classes * width;
        Ok(total)
    }

    /// Weights-and-statistics snapshot for checkpoints.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.iter().map(|p| (p.id().to_string(), p.value().clone())).collect(),
            bn_stats: self.bn_stats.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut net = Self::build(&ckpt.config, 0)?;
        if ckpt.params.len() != net.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, template needs {}",
                ckpt.params.len(),
                net.params.len()
            )));
        }
        for (id, value) in &ckpt.params {
            let p = net
                .params
                .get_mut(id)
                .ok_or_else(|| Error::Format(format!("checkpoint parameter {id} is not in the template")))?;
            if p.value().shape() != value.shape() {
                return Err(Error::Format(format!("checkpoint parameter {id} has shape {:?}", value.shape())));
            }
            *p.value_mut() = value.clone();
        }
        net.set_bn_stats(ckpt.bn_stats.clone()).map_err(|e| Error::Format(e.to_string()))?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TemplateConfig,
    pub params: BTreeMap<String, Tensor>,
    pub bn_stats: BTreeMap<String, BatchNormStats>,
}

/// A fusion strategy paired with the template weights it uses. Weights are
/// borrowed, never copied.
#[derive(Clone, Debug)]
pub struct Subnetwork<'a> {
    net: &'a TemplateNetwork,
    strategy: FusionStrategy,
    gates: GateSample,
}

pub fn materialize_strategy<'a>(net: &'a TemplateNetwork, strategy: &FusionStrategy) -> Result<Subnetwork<'a>> {
    strategy.check_layout(&net.layout())?;
    Ok(Subnetwork { net, strategy: strategy.clone(), gates: strategy.gates() })
}

impl<'a> Subnetwork<'a> {
    pub fn strategy(&self) -> &FusionStrategy {
        &self.strategy
    }

    pub fn gates(&self) -> &GateSample {
        &self.gates
    }

    pub fn template(&self) -> &'a TemplateNetwork {
        self.net
    }

    pub fn forward<'t>(&self, tape: &'t Tape, clips: &Tensor, mode: Mode) -> Result<ForwardOutput<'t>> {
        self.net.forward(tape, &self.gates.as_fixed(), clips, mode)
    }

    pub fn predict(&self, clips: &Tensor, mode: Mode) -> Result<Tensor> {
        self.net.predict(&self.gates, clips, mode)
    }

    pub fn active_param_count(&self) -> usize {
        self.net.active_param_count(&self.strategy).expect("layout checked at construction")
    }

    pub fn mult_add_proxy(&self) -> usize {
        self.net.mult_add_proxy(&self.strategy).expect("layout checked at construction")
    }
}
