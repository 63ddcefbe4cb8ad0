use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::evaluate::{enumerate_all_strategies, evaluate_strategy, rank_correlation};
use super::train::{train_standalone, TrainSchedule};
use crate::data::ClipDataset;
use crate::error::Result;
use crate::fusion::{FusionStrategy, TemplateNetwork};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub strategy: FusionStrategy,
    /// training-free accuracy inside the trained template
    pub posterior_accuracy: f64,
    /// best accuracy of the strategy trained on its own
    pub oracle_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub rows: Vec<OracleRow>,
    pub rho: f64,
}

impl OracleComparison {
    pub fn posterior(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.posterior_accuracy).collect()
    }

    pub fn oracle(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.oracle_accuracy).collect()
    }

    /// Median oracle accuracy (mean of the middle pair for even counts).
    pub fn oracle_median(&self) -> f64 {
        let mut v = self.oracle();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return f64::NAN;
        }
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    }
}

/// Runs `f(i)` for `i in 0..n` on up to `jobs` threads and returns the
/// results in index order.
pub fn run_indexed<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every index ran")).collect()
}

/// Scores every unit assignment (all edges on) two ways: training-free
/// inside the trained template, and trained on its own from `init_seed`.
/// Standalone runs fan out over `jobs` threads.
pub fn compare_with_oracle(
    template: &TemplateNetwork,
    train: &ClipDataset,
    val: &ClipDataset,
    schedule: &TrainSchedule,
    init_seed: u64,
    jobs: usize,
) -> Result<OracleComparison> {
    let strategies = enumerate_all_strategies(&template.layout())?;
    let posterior: Vec<f64> =
        strategies.iter().map(|s| Ok(evaluate_strategy(template, s, val)?.val_accuracy)).collect::<Result<_>>()?;
    let oracle = run_indexed(strategies.len(), jobs, |i| {
        Ok(train_standalone(template.config(), &strategies[i], train, val, schedule, init_seed)?.best_val_accuracy)
    })?;
    let rho = rank_correlation(&posterior, &oracle)?;
    let rows = strategies
        .into_iter()
        .zip(posterior)
        .zip(oracle)
        .map(|((strategy, posterior_accuracy), oracle_accuracy)| OracleRow {
            strategy,
            posterior_accuracy,
            oracle_accuracy,
        })
        .collect();
    Ok(OracleComparison { rows, rho })
}
