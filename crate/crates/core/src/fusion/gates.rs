use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};
use crate::tensor::Var;

/// Number of incoming edges at every layer. Edge 0 is the block input
/// (stem or transition output); edge `j > 0` is the `j`-th earlier layer
/// of the same block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateLayout {
    edges_per_layer: Vec<usize>,
}

impl GateLayout {
    pub fn new(edges_per_layer: Vec<usize>) -> Self {
        Self { edges_per_layer }
    }

    /// `L` layers in one dense block: layer `l` has `l` edges.
    pub fn single_block(layers: usize) -> Self {
        Self::blocks(1, layers)
    }

    pub fn blocks(num_blocks: usize, layers_per_block: usize) -> Self {
        Self::new((0..num_blocks).flat_map(|_| 1..=layers_per_block).collect())
    }

    pub fn num_layers(&self) -> usize {
        self.edges_per_layer.len()
    }

    pub fn edges(&self, layer: usize) -> usize {
        self.edges_per_layer[layer]
    }

    pub fn edges_per_layer(&self) -> &[usize] {
        &self.edges_per_layer
    }

    /// Three sites per layer: incoming edges (D1), S branch (D2), ST branch (D3).
    pub fn gate_site_count(&self) -> usize {
        3 * self.num_layers()
    }

    /// Individual gate values per sample: one per edge plus the two branches.
    pub fn gate_instance_count(&self) -> usize {
        self.edges_per_layer.iter().map(|e| e + 2).sum()
    }
}

/// Gate values at one layer: one per incoming edge, then the S and ST
/// branches. A value of 1 keeps the path, 0 drops it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGates<T> {
    pub edges: Vec<T>,
    pub s: T,
    pub st: T,
}

impl<T> LayerGates<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LayerGates<U> {
        LayerGates { edges: self.edges.iter().map(&mut f).collect(), s: f(&self.s), st: f(&self.st) }
    }
}

/// One realization of every gate in the template (the random mask).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSample {
    pub layers: Vec<LayerGates<f64>>,
}

impl GateSample {
    pub fn filled(layout: &GateLayout, value: f64) -> Self {
        Self {
            layers: layout
                .edges_per_layer()
                .iter()
                .map(|&e| LayerGates { edges: vec![value; e], s: value, st: value })
                .collect(),
        }
    }

    pub fn ones(layout: &GateLayout) -> Self {
        Self::filled(layout, 1.0)
    }

    pub fn layout(&self) -> GateLayout {
        GateLayout::new(self.layers.iter().map(|l| l.edges.len()).collect())
    }

    pub fn is_binary(&self) -> bool {
        self.values().all(|v| v == 0.0 || v == 1.0)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.edges.iter().copied().chain([l.s, l.st]))
    }

    pub fn check_layout(&self, layout: &GateLayout) -> Result<()> {
        if self.layout() != *layout {
            return Err(contract_err(format!(
                "gate sample has edges per layer {:?}, template expects {:?}",
                self.layout().edges_per_layer(),
                layout.edges_per_layer()
            )));
        }
        if let Some(v) = self.values().find(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract_err(format!("gate value {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Places every value on the tape as a fixed gate.
    pub fn as_fixed<'t>(&self) -> Vec<LayerGates<Gate<'t>>> {
        self.layers.iter().map(|l| l.map(|&v| Gate::Fixed(v))).collect()
    }
}

/// A gate as seen by the forward pass: a fixed number, or a relaxed value
/// that is differentiable with respect to the gate parameters.
#[derive(Clone, Copy, Debug)]
pub enum Gate<'t> {
    Fixed(f64),
    Relaxed(Var<'t>),
}

impl<'t> Gate<'t> {
    /// A fixed zero gate drops the path without evaluating it.
    pub fn is_off(&self) -> bool {
        matches!(self, Gate::Fixed(v) if *v == 0.0)
    }

    /// Multiplies `x` by the gate; `None` when the path is dropped.
    pub fn apply(&self, x: Var<'t>) -> Result<Option<Var<'t>>> {
        Ok(match self {
            Gate::Fixed(v) if *v == 0.0 => None,
            Gate::Fixed(v) if *v == 1.0 => Some(x),
            Gate::Fixed(v) => Some(x.scale(*v)),
            Gate::Relaxed(g) => Some(x.scale_by(g)?),
        })
    }
}
