use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::gates::{GateLayout, GateSample, LayerGates};
use crate::error::{contract_err, Error, Result};

/// Basic fusion unit of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FusionUnitKind {
    /// spatial 2D convolution only
    S = 0,
    /// factorized spatiotemporal convolution (2D then 1D temporal)
    ST = 1,
    /// both branches, summed
    #[serde(rename = "S+ST")]
    SPlusST = 2,
}

impl FusionUnitKind {
    pub const ALL: [FusionUnitKind; 3] = [Self::S, Self::ST, Self::SPlusST];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::S => "S",
            Self::ST => "ST",
            Self::SPlusST => "S+ST",
        }
    }

    pub fn uses_s(self) -> bool {
        matches!(self, Self::S | Self::SPlusST)
    }

    pub fn uses_st(self) -> bool {
        matches!(self, Self::ST | Self::SPlusST)
    }

    /// Branch gates `(D2, D3)` for an optional unit; `None` is the skipped layer.
    pub fn branch_gates(unit: Option<Self>) -> (f64, f64) {
        match unit {
            Some(Self::S) => (1.0, 0.0),
            Some(Self::ST) => (0.0, 1.0),
            Some(Self::SPlusST) => (1.0, 1.0),
            None => (0.0, 0.0),
        }
    }

    /// Inverse of [`FusionUnitKind::branch_gates`].
    pub fn from_branch_gates(s_on: bool, st_on: bool) -> Option<Self> {
        match (s_on, st_on) {
            (true, false) => Some(Self::S),
            (false, true) => Some(Self::ST),
            (true, true) => Some(Self::SPlusST),
            (false, false) => None,
        }
    }
}

impl fmt::Display for FusionUnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionUnitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|u| u.as_str() == s)
            .ok_or_else(|| Error::UnknownName { name: s.to_string(), options: "S, ST, S+ST".into() })
    }
}

pub(crate) fn unit_label(unit: Option<FusionUnitKind>) -> &'static str {
    unit.map_or("skip", FusionUnitKind::as_str)
}

/// One `(l, v, u)` triplet.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LayerTriplet {
    /// 1-based layer index
    pub l: usize,
    /// which incoming edges are used; entry 0 is the block input
    pub v: Vec<bool>,
    /// `None` marks a skipped layer
    pub u: Option<FusionUnitKind>,
}

/// A complete fusion strategy: one triplet per layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "StrategyJson", into = "StrategyJson")]
pub struct FusionStrategy {
    layers: Vec<LayerTriplet>,
}

impl FusionStrategy {
    pub fn new(layers: Vec<LayerTriplet>) -> Result<Self> {
        for (i, t) in layers.iter().enumerate() {
            if t.l != i + 1 {
                return Err(contract_err(format!("triplet {i} has l = {}, expected {}", t.l, i + 1)));
            }
            if t.u.is_some() && !t.v.iter().any(|&b| b) {
                return Err(contract_err(format!("layer {} uses {} but has no incoming edge", t.l, unit_label(t.u))));
            }
        }
        Ok(Self { layers })
    }

    /// Every layer uses `units[l]` with all edges on.
    pub fn with_units(layout: &GateLayout, units: &[Option<FusionUnitKind>]) -> Result<Self> {
        if units.len() != layout.num_layers() {
            return Err(contract_err(format!("{} units for a {}-layer template", units.len(), layout.num_layers())));
        }
        Self::new(
            units
                .iter()
                .enumerate()
                .map(|(i, &u)| LayerTriplet { l: i + 1, v: vec![true; layout.edges(i)], u })
                .collect(),
        )
    }

    pub fn uniform(layout: &GateLayout, unit: FusionUnitKind) -> Self {
        Self::with_units(layout, &vec![Some(unit); layout.num_layers()]).expect("valid by construction")
    }

    pub fn layers(&self) -> &[LayerTriplet] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn units(&self) -> Vec<Option<FusionUnitKind>> {
        self.layers.iter().map(|t| t.u).collect()
    }

    pub fn check_layout(&self, layout: &GateLayout) -> Result<()> {
        if self.layers.len() != layout.num_layers() {
            return Err(contract_err(format!(
                "strategy has {} layers, template has {}",
                self.layers.len(),
                layout.num_layers()
            )));
        }
        for (i, t) in self.layers.iter().enumerate() {
            if t.v.len() != layout.edges(i) {
                return Err(contract_err(format!(
                    "layer {} has {} edge bits, template expects {}",
                    t.l,
                    t.v.len(),
                    layout.edges(i)
                )));
            }
        }
        Ok(())
    }

    /// Hard gates implied by the strategy.
    pub fn gates(&self) -> GateSample {
        GateSample {
            layers: self
                .layers
                .iter()
                .map(|t| {
                    let (s, st) = FusionUnitKind::branch_gates(t.u);
                    LayerGates { edges: t.v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), s, st }
                })
                .collect(),
        }
    }

    /// Compact single-line JSON, the format used in reports.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("strategy serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Short human-readable form, e.g. `S|ST|S+ST`.
    pub fn unit_string(&self) -> String {
        self.layers.iter().map(|t| unit_label(t.u)).collect::<Vec<_>>().join("|")
    }
}

/// Reads a strategy back from binary gates. Edge bits come from D1; the
/// unit from `(D2, D3)`. A layer whose edges are all dropped contributes
/// nothing and is recovered as skipped.
pub fn recover_strategy(gates: &GateSample) -> FusionStrategy {
    let layers = gates
        .layers
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let v: Vec<bool> = g.edges.iter().map(|&e| e > 0.5).collect();
            let u = if v.iter().any(|&b| b) { FusionUnitKind::from_branch_gates(g.s > 0.5, g.st > 0.5) } else { None };
            LayerTriplet { l: i + 1, v, u }
        })
        .collect();
    FusionStrategy { layers }
}

pub const LITERATURE_STRATEGIES: [&str; 3] = ["top_heavy", "bottom_heavy", "mixed_everywhere"];

/// Strategies reported in prior work, all edges enabled.
///
/// - `top_heavy`: S in the lower half, ST in the upper half.
/// - `bottom_heavy`: the reverse.
/// - `mixed_everywhere`: S+ST at every layer.
pub fn strategy_from_literature(name: &str, layout: &GateLayout) -> Result<FusionStrategy> {
    let n = layout.num_layers();
    let lower = n / 2;
    let units: Vec<Option<FusionUnitKind>> = match name {
        "top_heavy" => (0..n).map(|i| Some(if i < lower { FusionUnitKind::S } else { FusionUnitKind::ST })).collect(),
        "bottom_heavy" => {
            (0..n).map(|i| Some(if i < n - lower { FusionUnitKind::ST } else { FusionUnitKind::S })).collect()
        }
        "mixed_everywhere" => vec![Some(FusionUnitKind::SPlusST); n],
        other => return Err(Error::UnknownName { name: other.to_string(), options: LITERATURE_STRATEGIES.join(", ") }),
    };
    FusionStrategy::with_units(layout, &units)
}

#[derive(Serialize, Deserialize)]
struct StrategyJson {
    #[serde(rename = "L")]
    num_layers: usize,
    layers: Vec<TripletJson>,
}

#[derive(Serialize, Deserialize)]
struct TripletJson {
    l: usize,
    v: Vec<u8>,
    u: String,
}

impl From<FusionStrategy> for StrategyJson {
    fn from(s: FusionStrategy) -> Self {
        Self {
            num_layers: s.layers.len(),
            layers: s
                .layers
                .into_iter()
                .map(|t| TripletJson {
                    l: t.l,
                    v: t.v.iter().map(|&b| b as u8).collect(),
                    u: unit_label(t.u).to_string(),
                })
                .collect(),
        }
    }
}

impl TryFrom<StrategyJson> for FusionStrategy {
    type Error = Error;

    fn try_from(j: StrategyJson) -> Result<Self> {
        if j.num_layers != j.layers.len() {
            return Err(contract_err(format!("L = {} but {} layers listed", j.num_layers, j.layers.len())));
        }
        let layers = j
            .layers
            .into_iter()
            .map(|t| {
                let v =
                    t.v.iter()
                        .map(|&b| match b {
                            0 => Ok(false),
                            1 => Ok(true),
                            other => Err(contract_err(format!("edge bit {other} is not 0/1"))),
                        })
                        .collect::<Result<Vec<_>>>()?;
                let u = match t.u.as_str() {
                    "skip" => None,
                    s => Some(s.parse()?),
                };
                Ok(LayerTriplet { l: t.l, v, u })
            })
            .collect::<Result<Vec<_>>>()?;
        FusionStrategy::new(layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use FusionUnitKind::*;

    #[test]
    fn unit_encoding_is_stable() {
        assert_eq!([S.code(), ST.code(), SPlusST.code()], [0, 1, 2]);
        assert_eq!(FusionUnitKind::from_code(2), Some(SPlusST));
        assert_eq!(FusionUnitKind::from_code(3), None);
        assert_eq!("S+ST".parse::<FusionUnitKind>().unwrap(), SPlusST);
    }

    #[test]
    fn literature_strategies() {
        let l4 = GateLayout::single_block(4);
        let top = strategy_from_literature("top_heavy", &l4).unwrap();
        assert_eq!(top.units(), vec![Some(S), Some(S), Some(ST), Some(ST)]);
        let bottom = strategy_from_literature("bottom_heavy", &l4).unwrap();
        let mut rev = top.units();
        rev.reverse();
        assert_eq!(bottom.units(), rev);
        let l3 = GateLayout::single_block(3);
        let mixed = strategy_from_literature("mixed_everywhere", &l3).unwrap();
        assert_eq!(mixed.units(), vec![Some(SPlusST); 3]);
        assert!(mixed.layers().iter().all(|t| t.v.iter().all(|&b| b)));
        for n in 1..7 {
            let l = GateLayout::single_block(n);
            let mut t = strategy_from_literature("top_heavy", &l).unwrap().units();
            t.reverse();
            assert_eq!(strategy_from_literature("bottom_heavy", &l).unwrap().units(), t);
        }
        let err = strategy_from_literature("sideways", &l3).unwrap_err();
        assert!(err.to_string().contains("top_heavy"));
    }

    #[test]
    fn json_format() {
        let layout = GateLayout::single_block(2);
        let s = FusionStrategy::with_units(&layout, &[Some(ST), None]).unwrap();
        assert_eq!(s.to_json(), r#"{"L":2,"layers":[{"l":1,"v":[1],"u":"ST"},{"l":2,"v":[1,1],"u":"skip"}]}"#);
        assert_eq!(FusionStrategy::from_json(&s.to_json()).unwrap(), s);
        assert!(FusionStrategy::from_json(r#"{"L":1,"layers":[{"l":1,"v":[0],"u":"S"}]}"#).is_err());
        assert!(FusionStrategy::from_json(r#"{"L":1,"layers":[{"l":1,"v":[1],"u":"T"}]}"#).is_err());
    }

    #[test]
    fn recover_truth_table() {
        let layout = GateLayout::single_block(3);
        let mut g = GateSample::ones(&layout);
        assert_eq!(recover_strategy(&g).units(), vec![Some(SPlusST); 3]);
        for l in &mut g.layers {
            l.s = 0.0;
        }
        assert_eq!(recover_strategy(&g).units(), vec![Some(ST); 3]);
        g.layers[1].st = 0.0;
        g.layers[2].edges = vec![0.0; 3];
        assert_eq!(recover_strategy(&g).units(), vec![Some(ST), None, None]);
    }
}
