use std::io::Write;

use serde::{Deserialize, Serialize};

use super::evaluate::StrategyEvaluation;
use crate::droppath::{marginal_eq7, unit_composition, GateParams, Site, UnitFrequencies};
use crate::error::{contract_err, Result};
use crate::fusion::{FusionStrategy, FusionUnitKind};

/// Per-layer view of the trained gate distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPreference {
    /// 1-based layer
    pub layer: usize,
    pub p_edge: f64,
    pub p_s: f64,
    pub p_st: f64,
    /// `1 − √p_S`
    pub eq7_s: f64,
    /// `1 − √p_ST`
    pub eq7_st: f64,
    pub frequencies: UnitFrequencies,
    pub chosen_unit: Option<FusionUnitKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceReport {
    pub layers: Vec<LayerPreference>,
}

pub const PREFERENCE_HEADER: [&str; 11] =
    ["layer", "p_edge", "p_S", "p_ST", "eq7_S", "eq7_ST", "freq_S", "freq_ST", "freq_SST", "freq_skip", "chosen_unit"];

pub fn layer_preference_report(params: &GateParams, best: &FusionStrategy) -> Result<PreferenceReport> {
    if best.num_layers() != params.num_layers() {
        return Err(contract_err(format!(
            "strategy has {} layers, gate parameters {}",
            best.num_layers(),
            params.num_layers()
        )));
    }
    let layers = best
        .layers()
        .iter()
        .enumerate()
        .map(|(l, t)| {
            let (p_edge, p_s, p_st) = (params.p(l, Site::Edge), params.p(l, Site::S), params.p(l, Site::St));
            Ok(LayerPreference {
                layer: l + 1,
                p_edge,
                p_s,
                p_st,
                eq7_s: marginal_eq7(p_s)?,
                eq7_st: marginal_eq7(p_st)?,
                frequencies: unit_composition(p_s, p_st)?,
                chosen_unit: t.u,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PreferenceReport { layers })
}

impl PreferenceReport {
    /// Mean composition frequency of each unit over layers:
    /// `[S, ST, S+ST, skip]`.
    pub fn mean_frequencies(&self) -> [f64; 4] {
        let n = self.layers.len().max(1) as f64;
        let mut out = [0.0; 4];
        for l in &self.layers {
            for (o, f) in out.iter_mut().zip(l.frequencies.as_array()) {
                *o += f / n;
            }
        }
        out
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(PREFERENCE_HEADER)?;
        for l in &self.layers {
            let f = l.frequencies;
            w.write_record([
                l.layer.to_string(),
                l.p_edge.to_string(),
                l.p_s.to_string(),
                l.p_st.to_string(),
                l.eq7_s.to_string(),
                l.eq7_st.to_string(),
                f.s.to_string(),
                f.st.to_string(),
                f.s_plus_st.to_string(),
                f.skip.to_string(),
                l.chosen_unit.map_or("skip", FusionUnitKind::as_str).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const EVALUATION_HEADER: [&str; 4] = ["strategy_json", "val_accuracy", "active_params", "mult_adds"];

/// Evaluations sorted by descending accuracy (stable), one row each.
pub fn write_evaluations_csv(evals: &[StrategyEvaluation], out: impl Write) -> Result<()> {
    let mut sorted: Vec<&StrategyEvaluation> = evals.iter().collect();
    sorted.sort_by(|a, b| b.val_accuracy.total_cmp(&a.val_accuracy));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVALUATION_HEADER)?;
    for e in sorted {
        w.write_record([
            e.strategy.to_json(),
            e.val_accuracy.to_string(),
            e.active_param_count.to_string(),
            e.mult_add_proxy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
