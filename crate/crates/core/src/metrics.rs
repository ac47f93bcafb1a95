//! Detection probability and false-alarm rate.
//!
//! `P_d,i` is the fraction of steps, among those where target `i` is inside
//! the sensing area, at which some accepted detection fell inside its gate.
//! `P_d` averages `P_d,i` over targets seen at least once. The false-alarm
//! rate is the mean number of unmatched detections per step.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FrameEvents, GateOutcome};
use crate::scenario::TargetId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("cannot finalize a run with zero steps")]
    EmptyRun,
    #[error("cannot aggregate an empty list of results")]
    NoResults,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TargetCounts {
    pub successes: u64,
    pub steps_in_bounds: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricAccumulator {
    per_target: BTreeMap<TargetId, TargetCounts>,
    fa_total: u64,
    t_total: u64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pre-registers targets so the ones never in bounds can be reported.
    pub fn with_targets(ids: impl IntoIterator<Item = TargetId>) -> Self {
        Self {
            per_target: ids.into_iter().map(|id| (id, TargetCounts::default())).collect(),
            ..Self::default()
        }
    }

    /// Adds one step. `detected` lists only in-bounds targets.
    pub fn record(&mut self, detected: impl IntoIterator<Item = (TargetId, bool)>, unmatched: usize) {
        for (id, hit) in detected {
            let c = self.per_target.entry(id).or_default();
            c.steps_in_bounds += 1;
            c.successes += u64::from(hit);
        }
        self.fa_total += unmatched as u64;
        self.t_total += 1;
    }

    pub fn update(&mut self, outcome: &GateOutcome) {
        self.record(outcome.detected.iter().map(|(k, v)| (*k, *v)), outcome.unmatched);
    }

    pub fn update_events(&mut self, events: &FrameEvents) {
        self.record(events.detected.iter().copied(), events.unmatched);
    }

    pub fn counts(&self, id: TargetId) -> Option<TargetCounts> {
        self.per_target.get(&id).copied()
    }

    pub fn fa_total(&self) -> u64 {
        self.fa_total
    }

    pub fn steps(&self) -> u64 {
        self.t_total
    }

    pub fn finalize(&self) -> Result<MetricResult, MetricsError> {
        if self.t_total == 0 {
            return Err(MetricsError::EmptyRun);
        }
        let mut pd_per_target = BTreeMap::new();
        let mut unobserved = Vec::new();
        for (id, c) in &self.per_target {
            if c.steps_in_bounds == 0 {
                unobserved.push(*id);
            } else {
                pd_per_target.insert(*id, c.successes as f64 / c.steps_in_bounds as f64);
            }
        }
        if !unobserved.is_empty() {
            log::warn!("{} target(s) never inside the sensing area; excluded from P_d", unobserved.len());
        }
        let pd_avg = if pd_per_target.is_empty() {
            None
        } else {
            Some(pd_per_target.values().sum::<f64>() / pd_per_target.len() as f64)
        };
        Ok(MetricResult {
            pd_per_target,
            pd_avg,
            fa_avg: self.fa_total as f64 / self.t_total as f64,
            unobserved,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub pd_per_target: BTreeMap<TargetId, f64>,
    /// `None` when no target was ever in bounds.
    pub pd_avg: Option<f64>,
    pub fa_avg: f64,
    /// Targets with zero in-bounds steps.
    pub unobserved: Vec<TargetId>,
}

/// Monte-Carlo summary over realizations. `pd_*` is NaN when no realization
/// observed any target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub pd_mean: f64,
    pub pd_std: f64,
    pub fa_mean: f64,
    pub fa_std: f64,
    pub n: usize,
}

/// Sample mean and `n - 1` standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    // shifted by the first value so identical inputs give exactly (v, 0)
    let shift = values[0];
    let offset = values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
    if n == 1 {
        return (shift, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - shift - offset) * (v - shift - offset)).sum();
    (shift + offset, libm::sqrt(ss / (n - 1) as f64))
}

pub fn aggregate(results: &[MetricResult]) -> Result<MetricSummary, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::NoResults);
    }
    let pd: Vec<f64> = results.iter().filter_map(|r| r.pd_avg).collect();
    let fa: Vec<f64> = results.iter().map(|r| r.fa_avg).collect();
    let (pd_mean, pd_std) = mean_std(&pd);
    let (fa_mean, fa_std) = mean_std(&fa);
    Ok(MetricSummary {
        pd_mean,
        pd_std,
        fa_mean,
        fa_std,
        n: results.len(),
    })
}
