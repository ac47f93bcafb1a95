//! Monte-Carlo sweep over mask margins and validation gates.
//!
//! Realization `r` draws step `t` from the stream `(seed, r, t)`, and every
//! operating point is evaluated on those same frames. Adding grid points
//! therefore never changes existing cells, and differences between cells
//! are not blurred by independent sampling noise.

use isac_core::fusion::{FilterConfig, FrameDistances};
use isac_core::metrics::{aggregate, MetricAccumulator, MetricResult};
use isac_core::scenario::{build_scenario, ConfigError as ScenarioError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::SweepConfig;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invalid operating point: {0}")]
    Filter(#[from] isac_core::fusion::FusionError),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error(transparent)]
    Metrics(#[from] isac_core::metrics::MetricsError),
}

/// One aggregated grid cell. `g` is `None` for the mask-disabled baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub g: Option<f64>,
    pub g_det: f64,
    pub pd_mean: f64,
    pub pd_std: f64,
    pub fa_mean: f64,
    pub fa_std: f64,
    pub n: usize,
}

/// Grid cells in output order: by gate, baseline first, then by margin.
pub fn operating_points(cfg: &SweepConfig) -> Vec<(Option<f64>, f64)> {
    let mut gates = cfg.g_det_values.clone();
    gates.sort_by(f64::total_cmp);
    gates.dedup();
    let mut margins = cfg.g_values.clone();
    margins.sort_by(f64::total_cmp);
    margins.dedup();
    let mut out = Vec::new();
    for g_det in gates {
        if cfg.baseline {
            out.push((None, g_det));
        }
        out.extend(margins.iter().map(|g| (Some(*g), g_det)));
    }
    out
}

fn filter(point: (Option<f64>, f64)) -> Result<FilterConfig, SweepError> {
    Ok(match point.0 {
        Some(g) => FilterConfig::new(g, point.1, true)?,
        None => FilterConfig::live_only(point.1)?,
    })
}

/// Per-realization results, indexed `[realization][cell]`.
pub fn run_realizations(cfg: &SweepConfig, parallel: Option<usize>) -> Result<Vec<Vec<MetricResult>>, SweepError> {
    let sc = build_scenario(cfg.scenario.clone())?;
    let filters = operating_points(cfg)
        .into_iter()
        .map(filter)
        .collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<_> = sc.tracks().iter().map(|t| t.id).collect();
    let one = |r: u32| -> Result<Vec<MetricResult>, SweepError> {
        let mut accs = vec![MetricAccumulator::with_targets(ids.iter().copied()); filters.len()];
        for t in 0..sc.config().t_steps {
            let frame = sc.generate_frame(t, &mut sc.frame_rng(u64::from(r), t));
            let dist = FrameDistances::new(&frame, sc.map());
            for (acc, fc) in accs.iter_mut().zip(&filters) {
                acc.update_events(&dist.evaluate(fc));
            }
        }
        Ok(accs.iter().map(|a| a.finalize()).collect::<Result<Vec<_>, _>>()?)
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = parallel {
        builder = builder.num_threads(k.max(1));
    }
    let pool = builder.build()?;
    pool.install(|| (0..cfg.n_realizations).into_par_iter().map(one).collect())
}

pub fn run_sweep(cfg: &SweepConfig, parallel: Option<usize>) -> Result<Vec<SweepRow>, SweepError> {
    let per_run = run_realizations(cfg, parallel)?;
    operating_points(cfg)
        .into_iter()
        .enumerate()
        .map(|(k, (g, g_det))| {
            let cell: Vec<MetricResult> = per_run.iter().map(|r| r[k].clone()).collect();
            let s = aggregate(&cell)?;
            Ok(SweepRow {
                g,
                g_det,
                pd_mean: s.pd_mean,
                pd_std: s.pd_std,
                fa_mean: s.fa_mean,
                fa_std: s.fa_std,
                n: s.n,
            })
        })
        .collect()
}
