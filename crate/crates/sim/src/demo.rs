//! End-to-end call-flow demo against a persistent SDSF log.

use std::path::{Path, PathBuf};

use anyhow::Context;
use isac_core::callflow::{CallFlow, KpiPoint, ServiceRequest, SfConfig, TaskOutcome, TraceEntry};
use isac_core::fusion::FilterConfig;
use isac_core::scenario::build_scenario;
use isac_core::sdsf::{
    DataKind, Payload, RecordMetadata, SdsfStore, SensingContext, SensingRecord, Stid, TargetType, TimeWindow,
};

use crate::config::Config;
use crate::{store_log, table};

#[derive(Debug, Clone)]
pub struct DemoReport {
    pub outcome: TaskOutcome,
    pub trace: Vec<TraceEntry>,
    /// The store log did not exist and was created (and seeded) by this run.
    pub fresh_store: bool,
}

/// Default store location: `sdsf.log` next to the trace file.
pub fn default_store_path(trace: &Path) -> PathBuf {
    trace.parent().unwrap_or(Path::new(".")).join("sdsf.log")
}

fn window(w: [u64; 2]) -> anyhow::Result<TimeWindow> {
    Ok(TimeWindow::new(w[0], w[1])?)
}

/// Runs one sensing task. A missing store log is created, seeded with the
/// configured survey map; the run's journal is appended to it afterwards.
pub fn demo_callflow(cfg: &Config, store_path: &Path) -> anyhow::Result<DemoReport> {
    let d = &cfg.demo;
    let sc = build_scenario(cfg.sweep.scenario.clone())?;
    let (mut store, fresh_store) = match store_log::load(store_path)? {
        Some(s) => (s, false),
        None => {
            let mut s = SdsfStore::new();
            if let Some(w) = d.survey_window {
                s.store(SensingRecord {
                    stid: Stid::new("survey")?,
                    context: SensingContext::new(*sc.config().bounds(), window(w)?, TargetType::Unknown),
                    kind: DataKind::HighLevel,
                    payload: Payload::Map(sc.map().clone()),
                    created_at: 0,
                    max_age: d.archive_max_age,
                    metadata: RecordMetadata {
                        storage_location: "survey".into(),
                        context_changes: vec!["initial survey".into()],
                    },
                })?;
            }
            (s, true)
        }
    };
    let now = store.now();
    let purged = store.apply_aging(now);
    if purged > 0 {
        log::info!("aged out {purged} record(s)");
    }

    let mut sf = SfConfig::new(FilterConfig::new(d.g, d.g_det, true)?);
    sf.archive_max_age = d.archive_max_age;
    if let Some(path) = &d.kpi_table {
        sf.kpi_table = table::read_csv(path)?
            .into_iter()
            .map(|r| KpiPoint {
                g: r.g,
                g_det: r.g_det,
                pd_mean: r.pd_mean,
                fa_mean: r.fa_mean,
            })
            .collect();
    }

    let mut context = SensingContext::new(*sc.config().bounds(), window(d.window)?, d.target_type);
    context.conditions = d.conditions.clone();
    let request = ServiceRequest {
        requester: d.requester,
        kpi: d.kpi,
        historical_consent: d.consent,
        max_age: d.max_age,
        context,
        purpose: d.purpose.clone(),
    };

    let mut cf = CallFlow::new(sc, store, cfg.policy.clone(), sf);
    cf.register_scenario_entities(d.realization);
    let outcome = cf.run(request).context("call flow aborted")?;
    let trace = cf.trace().to_vec();
    let mut store = cf.into_store();
    store_log::append(store_path, &mut store)?;
    Ok(DemoReport {
        outcome,
        trace,
        fresh_store,
    })
}
