use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, ClipDataset};
use crate::droppath::{sample_gates_hard, GateParams};
use crate::error::{contract_err, Error, Result};
use crate::fusion::{
    materialize_strategy, recover_strategy, FusionStrategy, FusionUnitKind, GateLayout, GateSample, Mode,
    TemplateNetwork,
};
use crate::tensor::{Tape, Tensor};

/// Clips per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

/// Row-wise argmax; the first maximum wins.
pub fn predict_classes(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode top-1 accuracy of the template under fixed `gates`.
pub fn accuracy(net: &TemplateNetwork, gates: &GateSample, data: &ClipDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(contract_err("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0;
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(EVAL_CHUNK) {
        let (x, labels) = data.gather(chunk);
        let pred = predict_classes(&net.predict(gates, &x, Mode::Eval)?);
        correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// A strategy scored without training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyEvaluation {
    pub strategy: FusionStrategy,
    pub val_accuracy: f64,
    pub active_param_count: usize,
    pub mult_add_proxy: usize,
}

/// Validation accuracy of the strategy's subnetwork using the template's
/// weights and batch-norm statistics as they are. Nothing is modified.
pub fn evaluate_strategy(
    net: &TemplateNetwork,
    strategy: &FusionStrategy,
    val: &ClipDataset,
) -> Result<StrategyEvaluation> {
    let sub = materialize_strategy(net, strategy)?;
    check_eval_data(net, val)?;
    Ok(StrategyEvaluation {
        strategy: strategy.clone(),
        val_accuracy: accuracy(net, sub.gates(), val)?,
        active_param_count: sub.active_param_count(),
        mult_add_proxy: sub.mult_add_proxy(),
    })
}

/// Like [`evaluate_strategy`], but first re-estimates the batch-norm
/// running statistics of a private copy of the template with one
/// train-mode pass of the strategy over `train`. An experiment knob; the
/// template itself is untouched.
pub fn evaluate_strategy_recalibrated(
    net: &TemplateNetwork,
    strategy: &FusionStrategy,
    train: &ClipDataset,
    val: &ClipDataset,
    batch_size: usize,
) -> Result<StrategyEvaluation> {
    let mut copy = net.clone();
    recalibrate_bn(&mut copy, &strategy.gates(), train, batch_size)?;
    evaluate_strategy(&copy, strategy, val)
}

/// Replaces running batch-norm statistics with the average of per-batch
/// statistics over one pass of `data` under `gates`. Sites the gates never
/// reach keep their previous statistics.
pub fn recalibrate_bn(
    net: &mut TemplateNetwork,
    gates: &GateSample,
    data: &ClipDataset,
    batch_size: usize,
) -> Result<()> {
    if batch_size == 0 || data.is_empty() {
        return Err(contract_err("recalibration needs a positive batch size and data"));
    }
    let mut sums: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = Default::default();
    for (x, _) in batches(data, batch_size, 0, 0) {
        let tape = Tape::new();
        let out = net.forward_with_gates(&tape, gates, &x, Mode::Train)?;
        for (key, (mean, var)) in out.bn_batch_stats {
            let e = sums.entry(key).or_insert_with(|| (vec![0.0; mean.len()], vec![0.0; var.len()], 0));
            e.0.iter_mut().zip(&mean).for_each(|(a, b)| *a += b);
            e.1.iter_mut().zip(&var).for_each(|(a, b)| *a += b);
            e.2 += 1;
        }
    }
    let mut stats = net.bn_stats().clone();
    for (key, (mean, var, n)) in sums {
        let s = stats.get_mut(&key).expect("sites come from this template");
        s.running_mean = Some(mean.iter().map(|m| m / n as f64).collect());
        s.running_var = Some(var.iter().map(|v| v / n as f64).collect());
    }
    net.set_bn_stats(stats)
}

fn check_eval_data(net: &TemplateNetwork, val: &ClipDataset) -> Result<()> {
    if val.is_empty() {
        return Err(contract_err("cannot evaluate on an empty dataset"));
    }
    if val.clip_shape() != net.config().clip_shape {
        return Err(contract_err(format!(
            "validation clips have shape {:?}, template expects {:?}",
            val.clip_shape(),
            net.config().clip_shape
        )));
    }
    Ok(())
}

/// Draws `count` strategies from the gate distribution, with replacement.
pub fn sample_strategies(
    net: &TemplateNetwork,
    params: &GateParams,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<FusionStrategy>> {
    let layout = net.layout();
    (0..count).map(|_| Ok(recover_strategy(&sample_gates_hard(params, &layout, rng)?))).collect()
}

/// Highest validation accuracy; ties go to fewer multiply-adds, then fewer
/// active parameters, then the earliest entry.
pub fn select_best(evals: &[StrategyEvaluation]) -> Result<&StrategyEvaluation> {
    let mut it = evals.iter();
    let mut best = it.next().ok_or_else(|| contract_err("select_best needs at least one evaluation"))?;
    for e in it {
        let better = e.val_accuracy > best.val_accuracy
            || (e.val_accuracy == best.val_accuracy
                && (e.mult_add_proxy, e.active_param_count) < (best.mult_add_proxy, best.active_param_count));
        if better {
            best = e;
        }
    }
    Ok(best)
}

/// Largest strategy space [`enumerate_all_strategies`] will produce.
pub const MAX_ENUMERATED: usize = 100_000;

/// Every assignment of S, ST or S+ST to the layers, all edges on, in
/// lexicographic order with the first layer most significant.
pub fn enumerate_all_strategies(layout: &GateLayout) -> Result<Vec<FusionStrategy>> {
    let l = layout.num_layers();
    let total = 3usize
        .checked_pow(l as u32)
        .filter(|&t| t <= MAX_ENUMERATED)
        .ok_or_else(|| Error::SizeGuard(format!("3^{l} strategies exceeds the limit of {MAX_ENUMERATED}")))?;
    (0..total)
        .map(|mut idx| {
            let mut units = vec![None; l];
            for slot in units.iter_mut().rev() {
                *slot = FusionUnitKind::from_code((idx % 3) as u8);
                idx /= 3;
            }
            FusionStrategy::with_units(layout, &units)
        })
        .collect()
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties: the Pearson
/// correlation of the ranks. Defined as 0 when either side is constant.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract_err(format!("rank correlation of lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(contract_err("rank correlation needs at least two points"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Domain("rank correlation of NaN values".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean) * (x - mean);
        sbb += (y - mean) * (y - mean);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}
