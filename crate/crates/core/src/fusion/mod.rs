//! Fusion units, triplet strategies and the gated dense template network.

mod gates;
mod strategy;
mod template;

pub use gates::{Gate, GateLayout, GateSample, LayerGates};
pub use strategy::{
    recover_strategy, strategy_from_literature, FusionStrategy, FusionUnitKind, LayerTriplet, LITERATURE_STRATEGIES,
};
pub use template::{
    build_template, materialize_strategy, Checkpoint, ForwardOutput, Mode, Subnetwork, TemplateConfig, TemplateNetwork,
};
