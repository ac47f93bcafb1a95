//! The sensing service procedure as message-passing state machines.
//!
//! Actors are the sensing service consumer (SSC), the sensing function (SF,
//! covering both coordination and processing roles), the policy control
//! function (PCF), the SDSF front-end and the sensing entities (SEs). They
//! exchange [`Envelope`]s over a single-threaded FIFO bus; every delivered
//! envelope is appended to the trace.
//!
//! Procedure steps, as numbered in the trace:
//!
//! | step | edge        | message                                  |
//! |------|-------------|------------------------------------------|
//! | 1    | SE -> SF    | `SeRegistration`                         |
//! | 2    | SSC -> SF   | `ServiceRequest`                         |
//! | 3    | SF -> SSC   | `ServiceAck` (allocates the STID)        |
//! | 4    | SF -> PCF   | `PolicyRequest`                          |
//! | 5    | PCF -> SF   | `PolicyDecision`                         |
//! | 6    | SF -> SDSF  | `AvailabilityQuery`                      |
//! | 7    | SDSF -> SF  | `AvailabilityResponse`                   |
//! | 8    | SF -> SF    | `DataPlan`                               |
//! | 9    | SF -> SF    | `TaskGroup`                              |
//! | 10   | SF -> SE    | `SensingDataRequest`                     |
//! | 11   | SE -> SF    | `SensingDataReport`                      |
//! | 12   | SF -> SDSF  | `HistoricalDataRequest`                  |
//! | 13   | SDSF -> SF  | `HistoricalDataResponse`                 |
//! | 14   | SF -> SF    | `Fusion`                                 |
//! | 15   | SF -> SSC   | `SensingResult`                          |
//! | 16   | SF -> SDSF  | `StorageUpdate`                          |
//!
//! An abort is reported to the SSC as `ServiceAbort`, numbered with the step
//! that caused it.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{process_frame, FilterConfig};
use crate::geometry::{Rect, StaticMap};
use crate::measurement::{NoiseModel, Pose, SeId};
use crate::metrics::{MetricAccumulator, MetricResult, MetricsError};
use crate::scenario::{join_errors, Frame, Scenario};
use crate::sdsf::{
    Availability, Coverage, DataKind, DetectionBatch, Payload, RecordMetadata, SdsfStore, SensingContext,
    SensingRecord, Stid, StoreError,
};
use crate::FieldError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Actor {
    Ssc,
    Sf,
    Pcf,
    Sdsf,
    Se(SeId),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Ssc => f.write_str("SSC"),
            Actor::Sf => f.write_str("SF"),
            Actor::Pcf => f.write_str("PCF"),
            Actor::Sdsf => f.write_str("SDSF"),
            Actor::Se(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequesterKind {
    Ran,
    UeApp,
    Nf,
    ThirdPartyAf,
}

/// Required detection probability and tolerated false alarms per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kpi {
    pub pd_min: f64,
    pub fa_max: f64,
}

impl Kpi {
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.pd_min) {
            errs.push(FieldError::new("kpi.pd_min", format!("must lie in [0, 1], got {}", self.pd_min)));
        }
        if !(self.fa_max >= 0.0) {
            errs.push(FieldError::new("kpi.fa_max", format!("must be >= 0, got {}", self.fa_max)));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// `None` pd never satisfies a requirement.
    pub fn satisfied_by(&self, pd: Option<f64>, fa: f64) -> bool {
        pd.is_some_and(|pd| pd >= self.pd_min) && fa <= self.fa_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub requester: RequesterKind,
    pub kpi: Kpi,
    pub historical_consent: bool,
    /// Allowed age of historical data, in steps. `None` accepts any age.
    pub max_age: Option<u64>,
    pub context: SensingContext,
    pub purpose: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeCapability {
    pub se: SeId,
    pub pose: Pose,
    pub noise: NoiseModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Permit,
    Deny,
    PermitWithObligations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Obligation {
    ConsentRevocation(String),
    Charging(String),
    ProhibitedArea(Rect),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub verdict: Verdict,
    /// Empty unless the verdict is permit-with-obligations.
    pub obligations: Vec<Obligation>,
    pub reason: Option<String>,
}

impl PolicyDecision {
    pub fn permits(&self) -> bool {
        self.verdict != Verdict::Deny
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRequest {
    pub purpose: String,
    pub area: Rect,
    pub consent_tokens: Vec<String>,
    pub charging_info: Option<String>,
}

/// PCF rule table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyRules {
    pub prohibited_areas: Vec<Rect>,
    pub charging_rules: Vec<String>,
    pub revocation_rules: Vec<String>,
}

/// Deny when the task area overlaps a prohibited area; permit with
/// obligations when charging or revocation rules exist; otherwise permit.
pub fn evaluate_policy(rules: &PolicyRules, req: &PolicyRequest) -> PolicyDecision {
    if let Some(zone) = rules.prohibited_areas.iter().find(|z| z.intersects(&req.area)) {
        return PolicyDecision {
            verdict: Verdict::Deny,
            obligations: Vec::new(),
            reason: Some(format!(
                "task area overlaps prohibited area [{}, {}, {}, {}]",
                zone.x_min(),
                zone.y_min(),
                zone.x_max(),
                zone.y_max()
            )),
        };
    }
    if rules.charging_rules.is_empty() && rules.revocation_rules.is_empty() {
        return PolicyDecision {
            verdict: Verdict::Permit,
            obligations: Vec::new(),
            reason: None,
        };
    }
    let obligations = rules
        .revocation_rules
        .iter()
        .map(|r| Obligation::ConsentRevocation(r.clone()))
        .chain(rules.charging_rules.iter().map(|r| Obligation::Charging(r.clone())))
        .chain(rules.prohibited_areas.iter().map(|z| Obligation::ProhibitedArea(*z)))
        .collect();
    PolicyDecision {
        verdict: Verdict::PermitWithObligations,
        obligations,
        reason: None,
    }
}

/// One row of a previously archived sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpiPoint {
    pub g: Option<f64>,
    pub g_det: f64,
    pub pd_mean: f64,
    pub fa_mean: f64,
}

/// Admission check against archived operating points. Without a matching
/// point the request is admitted.
pub fn kpi_admissible(table: &[KpiPoint], filter: &FilterConfig, kpi: &Kpi) -> bool {
    let g = filter.mask_enabled().then_some(filter.mask_margin());
    let same = |a: f64, b: f64| libm::fabs(a - b) <= 1e-9;
    let point = table.iter().find(|p| {
        same(p.g_det, filter.gate())
            && match (p.g, g) {
                (Some(a), Some(b)) => same(a, b),
                (None, None) => true,
                _ => false,
            }
    });
    match point {
        Some(p) => kpi.satisfied_by((!p.pd_mean.is_nan()).then_some(p.pd_mean), p.fa_mean),
        None => true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportingMode {
    OneShot,
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPlan {
    pub live: bool,
    pub historical: bool,
    /// Portions the SDSF reported as missing.
    pub missing: Vec<SensingContext>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    Historical,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingResult {
    pub metrics: MetricResult,
    pub kpi_met: bool,
    pub frames: usize,
    pub mask: MaskSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    KpiInfeasible,
    PolicyDenied(String),
    NoSensingEntities,
    NoData,
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::KpiInfeasible => f.write_str("KPI requirements cannot be satisfied"),
            AbortReason::PolicyDenied(r) => write!(f, "policy denied: {r}"),
            AbortReason::NoSensingEntities => f.write_str("no sensing entities registered"),
            AbortReason::NoData => f.write_str("no sensing data within the freshness bound"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    SeRegistration(SeCapability),
    ServiceRequest(ServiceRequest),
    ServiceAck { admitted: bool },
    PolicyRequest(PolicyRequest),
    PolicyDecision(PolicyDecision),
    AvailabilityQuery(SensingContext),
    AvailabilityResponse(Availability),
    DataPlan(DataPlan),
    TaskGroup(Vec<SeId>),
    SensingDataRequest {
        window: crate::sdsf::TimeWindow,
        elements: Vec<DataKind>,
        reporting: ReportingMode,
        max_age: Option<u64>,
    },
    SensingDataReport {
        batches: Vec<DetectionBatch>,
        /// Batches served from the SE buffer instead of fresh sensing.
        reused: usize,
        captured_until: u64,
    },
    HistoricalDataRequest {
        context: SensingContext,
        max_age: Option<u64>,
    },
    HistoricalDataResponse(Vec<SensingRecord>),
    Fusion,
    SensingResult(SensingResult),
    StorageUpdate(Vec<SensingRecord>),
    ServiceAbort(AbortReason),
}

impl Message {
    pub fn variant(&self) -> &'static str {
        match self {
            Message::SeRegistration(_) => "SeRegistration",
            Message::ServiceRequest(_) => "ServiceRequest",
            Message::ServiceAck { .. } => "ServiceAck",
            Message::PolicyRequest(_) => "PolicyRequest",
            Message::PolicyDecision(_) => "PolicyDecision",
            Message::AvailabilityQuery(_) => "AvailabilityQuery",
            Message::AvailabilityResponse(_) => "AvailabilityResponse",
            Message::DataPlan(_) => "DataPlan",
            Message::TaskGroup(_) => "TaskGroup",
            Message::SensingDataRequest { .. } => "SensingDataRequest",
            Message::SensingDataReport { .. } => "SensingDataReport",
            Message::HistoricalDataRequest { .. } => "HistoricalDataRequest",
            Message::HistoricalDataResponse(_) => "HistoricalDataResponse",
            Message::Fusion => "Fusion",
            Message::SensingResult(_) => "SensingResult",
            Message::StorageUpdate(_) => "StorageUpdate",
            Message::ServiceAbort(_) => "ServiceAbort",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub step: u8,
    pub sender: Actor,
    pub receiver: Actor,
    pub stid: Option<Stid>,
    pub body: Message,
}

/// One delivered message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seq: u64,
    pub step: u8,
    pub sender: String,
    pub receiver: String,
    pub variant: String,
    pub stid: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SfPhase {
    Idle,
    Registered,
    Requested,
    PolicyPending,
    AvailabilityPending,
    TaskingSEs,
    CollectingLive,
    FetchingHistorical,
    Fusing,
    Reporting,
    Archiving,
    Done,
    Aborted,
}

impl SfPhase {
    pub fn is_terminal(&self) -> bool {
        matches!(self, SfPhase::Done | SfPhase::Aborted)
    }

    pub fn can_move_to(&self, next: SfPhase) -> bool {
        use SfPhase::*;
        if next == Aborted {
            return !self.is_terminal();
        }
        matches!(
            (self, next),
            (Idle, Registered)
                | (Idle, Requested)
                | (Registered, Requested)
                | (Requested, PolicyPending)
                | (PolicyPending, AvailabilityPending)
                | (PolicyPending, TaskingSEs)
                | (AvailabilityPending, TaskingSEs)
                | (AvailabilityPending, FetchingHistorical)
                | (TaskingSEs, CollectingLive)
                | (CollectingLive, FetchingHistorical)
                | (CollectingLive, Fusing)
                | (FetchingHistorical, Fusing)
                | (Fusing, Reporting)
                | (Reporting, Archiving)
                | (Archiving, Done)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CallFlowError {
    #[error("{variant} is not legal in phase {phase:?}")]
    IllegalMessage { phase: SfPhase, variant: &'static str },
    #[error("illegal transition {from:?} -> {to:?}")]
    IllegalTransition { from: SfPhase, to: SfPhase },
    #[error("{0} is already registered")]
    DuplicateSe(SeId),
    #[error("invalid service request: {}", join_errors(.0))]
    InvalidRequest(Vec<FieldError>),
    #[error("message carries STID {got:?}, task is bound to {expected}")]
    StidMismatch { expected: Stid, got: Option<Stid> },
    #[error("availability was exists with consent given, but no historical map was fetched")]
    InconsistentHistory,
    #[error("report from {0}, which was not tasked")]
    UnexpectedReport(SeId),
    #[error("no sensing task is active")]
    NoTask,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// A protocol error together with the step whose message caused it.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("step {step} ({variant} {sender} -> {receiver}): {source}")]
pub struct RunError {
    pub step: u8,
    pub variant: &'static str,
    pub sender: Actor,
    pub receiver: Actor,
    pub source: CallFlowError,
}

/// SF-side settings that are not part of the consumer's request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfConfig {
    pub filter: FilterConfig,
    /// Aging policy attached to archived records, in steps.
    pub archive_max_age: u64,
    pub storage_location: String,
    /// Archived sweep results for admission control.
    pub kpi_table: Vec<KpiPoint>,
}

impl SfConfig {
    pub fn new(filter: FilterConfig) -> Self {
        Self {
            filter,
            archive_max_age: 10_000,
            storage_location: "sdsf-local".into(),
            kpi_table: Vec::new(),
        }
    }
}

/// Fuses `frames` under `fc`, masking with `historical_map` when present.
/// Without a map the mask is disabled.
pub fn run_sensing_task(
    stid: &Stid,
    frames: &[Frame],
    historical_map: Option<&StaticMap>,
    fc: &FilterConfig,
    kpi: &Kpi,
) -> Result<SensingResult, CallFlowError> {
    let (map, fc, mask) = match historical_map {
        Some(m) if fc.mask_enabled() => (m.clone(), *fc, MaskSource::Historical),
        _ => {
            let bounds = historical_map.map(|m| *m.bounds()).unwrap_or_else(crate::scenario::default_bounds);
            (
                StaticMap::empty(bounds),
                FilterConfig::live_only(fc.gate()).expect("gate already validated"),
                MaskSource::Disabled,
            )
        }
    };
    let mut acc = MetricAccumulator::new();
    for f in frames {
        acc.update(&process_frame(f, &map, &fc));
    }
    let metrics = acc.finalize()?;
    let kpi_met = kpi.satisfied_by(metrics.pd_avg, metrics.fa_avg);
    log::debug!("{stid}: fused {} frames, kpi met: {kpi_met}", frames.len());
    Ok(SensingResult {
        metrics,
        kpi_met,
        frames: frames.len(),
        mask,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct Task {
    stid: Stid,
    request: ServiceRequest,
    policy: Option<PolicyDecision>,
    availability: Option<Availability>,
    plan: Option<DataPlan>,
    tasked: BTreeSet<SeId>,
    reports: BTreeMap<SeId, Vec<DetectionBatch>>,
    historical: Vec<SensingRecord>,
    result: Option<SensingResult>,
}

type Outgoing = (u8, Actor, Message);

/// The sensing function: coordination (tasking, data plans) and processing
/// (fusion, archiving) roles in one actor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingFunction {
    config: SfConfig,
    phase: SfPhase,
    pool: BTreeMap<SeId, SeCapability>,
    task: Option<Task>,
    tasks_started: u64,
}

impl SensingFunction {
    pub fn new(config: SfConfig) -> Self {
        Self {
            config,
            phase: SfPhase::Idle,
            pool: BTreeMap::new(),
            task: None,
            tasks_started: 0,
        }
    }

    pub fn phase(&self) -> SfPhase {
        self.phase
    }

    pub fn stid(&self) -> Option<&Stid> {
        self.task.as_ref().map(|t| &t.stid)
    }

    pub fn policy(&self) -> Option<&PolicyDecision> {
        self.task.as_ref()?.policy.as_ref()
    }

    pub fn availability(&self) -> Option<&Availability> {
        self.task.as_ref()?.availability.as_ref()
    }

    pub fn result(&self) -> Option<&SensingResult> {
        self.task.as_ref()?.result.as_ref()
    }

    pub fn pool(&self) -> &BTreeMap<SeId, SeCapability> {
        &self.pool
    }

    /// Adds an SE to the candidate pool.
    pub fn register_se(&mut self, cap: SeCapability) -> Result<SeId, CallFlowError> {
        if self.pool.contains_key(&cap.se) {
            return Err(CallFlowError::DuplicateSe(cap.se));
        }
        if self.phase == SfPhase::Idle {
            self.phase = SfPhase::Registered;
        }
        let id = cap.se;
        self.pool.insert(id, cap);
        Ok(id)
    }

    fn go(&mut self, next: SfPhase) -> Result<(), CallFlowError> {
        if !self.phase.can_move_to(next) {
            return Err(CallFlowError::IllegalTransition {
                from: self.phase,
                to: next,
            });
        }
        self.phase = next;
        Ok(())
    }

    fn task_mut(&mut self) -> Result<&mut Task, CallFlowError> {
        self.task.as_mut().ok_or(CallFlowError::NoTask)
    }

    /// Handles one message. On error the state is left unchanged.
    pub fn handle(&mut self, env: &Envelope, scenario: &Scenario, now: u64) -> Result<Vec<Outgoing>, CallFlowError> {
        let snapshot = self.clone();
        let out = self.dispatch(env, scenario, now);
        if out.is_err() {
            *self = snapshot;
        }
        out
    }

    fn abort(&mut self, step: u8, reason: AbortReason) -> Result<Vec<Outgoing>, CallFlowError> {
        self.go(SfPhase::Aborted)?;
        Ok(alloc::vec![(step, Actor::Ssc, Message::ServiceAbort(reason))])
    }

    fn dispatch(&mut self, env: &Envelope, scenario: &Scenario, now: u64) -> Result<Vec<Outgoing>, CallFlowError> {
        let illegal = CallFlowError::IllegalMessage {
            phase: self.phase,
            variant: env.body.variant(),
        };
        if let (Some(task), false) = (&self.task, matches!(env.body, Message::SeRegistration(_))) {
            if env.stid.as_ref() != Some(&task.stid) {
                return Err(CallFlowError::StidMismatch {
                    expected: task.stid.clone(),
                    got: env.stid.clone(),
                });
            }
        }
        use SfPhase::*;
        match (&env.body, self.phase) {
            (Message::SeRegistration(cap), _) => {
                self.register_se(cap.clone())?;
                Ok(Vec::new())
            }
            (Message::ServiceRequest(req), Idle | Registered) => self.on_request(req, now),
            (Message::PolicyDecision(d), PolicyPending) => {
                let consent = {
                    let task = self.task_mut()?;
                    task.policy = Some(d.clone());
                    task.request.historical_consent
                };
                if !d.permits() {
                    let reason = d.reason.clone().unwrap_or_else(|| "denied".into());
                    return self.abort(5, AbortReason::PolicyDenied(reason));
                }
                if consent {
                    self.go(AvailabilityPending)?;
                    let ctx = self.task_mut()?.request.context.clone();
                    Ok(alloc::vec![(6, Actor::Sdsf, Message::AvailabilityQuery(ctx))])
                } else {
                    let plan = DataPlan {
                        live: true,
                        historical: false,
                        missing: alloc::vec![self.task_mut()?.request.context.clone()],
                    };
                    Ok(alloc::vec![(8, Actor::Sf, Message::DataPlan(plan))])
                }
            }
            (Message::AvailabilityResponse(a), AvailabilityPending) => {
                let task = self.task_mut()?;
                task.availability = Some(a.clone());
                let from_history_alone = a.status == Coverage::Exists && a.kinds.contains(&DataKind::Raw);
                let plan = DataPlan {
                    live: !from_history_alone,
                    historical: a.status != Coverage::Missing,
                    missing: a.missing.clone(),
                };
                Ok(alloc::vec![(8, Actor::Sf, Message::DataPlan(plan))])
            }
            (Message::DataPlan(plan), PolicyPending | AvailabilityPending) => {
                self.task_mut()?.plan = Some(plan.clone());
                if plan.live {
                    self.go(TaskingSEs)?;
                    let group: Vec<SeId> = self.pool.keys().copied().collect();
                    Ok(alloc::vec![(9, Actor::Sf, Message::TaskGroup(group))])
                } else {
                    self.go(FetchingHistorical)?;
                    Ok(alloc::vec![self.historical_request()?])
                }
            }
            (Message::TaskGroup(group), TaskingSEs) => {
                if group.is_empty() {
                    return self.abort(9, AbortReason::NoSensingEntities);
                }
                self.go(CollectingLive)?;
                let task = self.task_mut()?;
                task.tasked = group.iter().copied().collect();
                let window = task.request.context.time_window;
                let max_age = task.request.max_age;
                Ok(group
                    .iter()
                    .map(|se| {
                        (
                            10,
                            Actor::Se(*se),
                            Message::SensingDataRequest {
                                window,
                                elements: alloc::vec![DataKind::Raw],
                                reporting: ReportingMode::OneShot,
                                max_age,
                            },
                        )
                    })
                    .collect())
            }
            (Message::SensingDataReport { batches, .. }, CollectingLive) => {
                let Actor::Se(se) = env.sender else {
                    return Err(illegal);
                };
                let task = self.task_mut()?;
                if !task.tasked.contains(&se) || task.reports.contains_key(&se) {
                    return Err(CallFlowError::UnexpectedReport(se));
                }
                task.reports.insert(se, batches.clone());
                if task.reports.len() < task.tasked.len() {
                    return Ok(Vec::new());
                }
                let historical = task.plan.as_ref().is_some_and(|p| p.historical);
                if historical {
                    self.go(FetchingHistorical)?;
                    Ok(alloc::vec![self.historical_request()?])
                } else {
                    self.go(Fusing)?;
                    Ok(alloc::vec![(14, Actor::Sf, Message::Fusion)])
                }
            }
            (Message::HistoricalDataResponse(records), FetchingHistorical) => {
                self.task_mut()?.historical = records.clone();
                self.go(Fusing)?;
                Ok(alloc::vec![(14, Actor::Sf, Message::Fusion)])
            }
            (Message::Fusion, Fusing) => self.on_fusion(scenario, now),
            _ => Err(illegal),
        }
    }

    fn historical_request(&mut self) -> Result<Outgoing, CallFlowError> {
        let task = self.task_mut()?;
        Ok((
            12,
            Actor::Sdsf,
            Message::HistoricalDataRequest {
                context: task.request.context.clone(),
                max_age: task.request.max_age,
            },
        ))
    }

    fn on_request(&mut self, req: &ServiceRequest, now: u64) -> Result<Vec<Outgoing>, CallFlowError> {
        req.kpi.validate().map_err(CallFlowError::InvalidRequest)?;
        self.go(SfPhase::Requested)?;
        let stid = Stid::new(format!("stid-{now}-{}", self.tasks_started))?;
        self.tasks_started += 1;
        self.task = Some(Task {
            stid,
            request: req.clone(),
            policy: None,
            availability: None,
            plan: None,
            tasked: BTreeSet::new(),
            reports: BTreeMap::new(),
            historical: Vec::new(),
            result: None,
        });
        let admitted = kpi_admissible(&self.config.kpi_table, &self.config.filter, &req.kpi);
        let mut out = alloc::vec![(3, Actor::Ssc, Message::ServiceAck { admitted })];
        if !admitted {
            out.extend(self.abort(3, AbortReason::KpiInfeasible)?);
            return Ok(out);
        }
        self.go(SfPhase::PolicyPending)?;
        out.push((
            4,
            Actor::Pcf,
            Message::PolicyRequest(PolicyRequest {
                purpose: req.purpose.clone(),
                area: req.context.area,
                consent_tokens: self.pool.keys().map(|se| format!("consent-{se}")).collect(),
                charging_info: None,
            }),
        ));
        Ok(out)
    }

    fn on_fusion(&mut self, scenario: &Scenario, now: u64) -> Result<Vec<Outgoing>, CallFlowError> {
        let config = self.config.clone();
        let task = self.task_mut()?;
        let ctx = task.request.context.clone();
        let window = ctx.time_window;

        let mut map: Option<StaticMap> = None;
        for r in &task.historical {
            if let Payload::Map(m) = &r.payload {
                let base = map.take().unwrap_or_else(|| StaticMap::empty(ctx.area));
                map = Some(base.merged(m));
            }
        }
        let exists = task.availability.as_ref().is_some_and(|a| a.status == Coverage::Exists);
        if task.request.historical_consent && exists && map.is_none() {
            return Err(CallFlowError::InconsistentHistory);
        }

        // step -> detections; live data first, then history for the steps
        // live sensing did not cover (newest record wins).
        let mut by_step: BTreeMap<u64, Vec<crate::measurement::WorldDetection>> = BTreeMap::new();
        for batches in task.reports.values() {
            for b in batches.iter().filter(|b| window.contains(b.step)) {
                by_step.entry(b.step).or_default().extend(b.detections.iter().cloned());
            }
        }
        let live: BTreeSet<u64> = by_step.keys().copied().collect();
        let mut hist: Vec<&SensingRecord> = task.historical.iter().collect();
        hist.sort_by_key(|r| core::cmp::Reverse(r.created_at));
        for r in hist {
            if let Payload::Detections(batches) = &r.payload {
                for b in batches.iter().filter(|b| window.contains(b.step) && !live.contains(&b.step)) {
                    by_step.entry(b.step).or_insert_with(|| b.detections.clone());
                }
            }
        }
        let frames: Vec<Frame> = by_step
            .into_iter()
            .map(|(step, detections)| {
                let t = (step - window.start()) as u32;
                Frame {
                    t,
                    detections,
                    truth: scenario.truth(t),
                }
            })
            .collect();
        if frames.is_empty() {
            return self.abort(14, AbortReason::NoData);
        }
        let mask_map = if task.request.historical_consent { map.as_ref() } else { None };
        let result = run_sensing_task(&task.stid, &frames, mask_map, &config.filter, &task.request.kpi)?;
        task.result = Some(result.clone());

        let mut records = Vec::new();
        let live_batches: Vec<DetectionBatch> = {
            let mut merged: BTreeMap<u64, DetectionBatch> = BTreeMap::new();
            for batches in task.reports.values() {
                for b in batches {
                    merged
                        .entry(b.step)
                        .or_insert_with(|| DetectionBatch {
                            step: b.step,
                            detections: Vec::new(),
                        })
                        .detections
                        .extend(b.detections.iter().cloned());
                }
            }
            merged.into_values().collect()
        };
        if !live_batches.is_empty() {
            records.push(SensingRecord {
                stid: task.stid.clone(),
                context: ctx.clone(),
                kind: DataKind::Raw,
                payload: Payload::Detections(live_batches),
                created_at: now,
                max_age: config.archive_max_age,
                metadata: RecordMetadata {
                    storage_location: config.storage_location.clone(),
                    context_changes: alloc::vec![format!("live sensing, steps {}..={}", window.start(), window.end())],
                },
            });
        }
        if let (Some(m), true) = (map, task.request.historical_consent) {
            records.push(SensingRecord {
                stid: task.stid.clone(),
                context: ctx,
                kind: DataKind::HighLevel,
                payload: Payload::Map(m),
                created_at: now,
                max_age: config.archive_max_age,
                metadata: RecordMetadata {
                    storage_location: config.storage_location,
                    context_changes: alloc::vec![format!(
                        "map revalidated for steps {}..={}",
                        window.start(),
                        window.end()
                    )],
                },
            });
        }
        self.go(SfPhase::Reporting)?;
        let mut out = alloc::vec![(15, Actor::Ssc, Message::SensingResult(result))];
        self.go(SfPhase::Archiving)?;
        out.push((16, Actor::Sdsf, Message::StorageUpdate(records)));
        self.go(SfPhase::Done)?;
        Ok(out)
    }
}

/// A sensing entity. Frames are synthesized from the shared scenario and the
/// SE keeps its own detections; the last batches it sensed stay buffered and
/// are reused while fresh.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingEntity {
    pub id: SeId,
    realization: u64,
    buffer: BTreeMap<u64, (u64, DetectionBatch)>,
}

impl SensingEntity {
    pub fn new(id: SeId, realization: u64) -> Self {
        Self {
            id,
            realization,
            buffer: BTreeMap::new(),
        }
    }

    fn sense(&mut self, scenario: &Scenario, window: crate::sdsf::TimeWindow, max_age: Option<u64>, now: u64) -> Message {
        let mut batches = Vec::new();
        let mut reused = 0;
        for step in window.start()..=window.end() {
            let captured_at = now + (step - window.start());
            let fresh = self
                .buffer
                .get(&step)
                .filter(|(at, _)| max_age.is_none_or(|m| now.saturating_sub(*at) <= m));
            if let Some((_, b)) = fresh {
                batches.push(b.clone());
                reused += 1;
                continue;
            }
            let t = (step - window.start()) as u32;
            let frame = scenario.generate_frame(t, &mut scenario.frame_rng(self.realization, t));
            let batch = DetectionBatch {
                step,
                detections: frame.detections.into_iter().filter(|d| d.source == self.id).collect(),
            };
            self.buffer.insert(step, (captured_at, batch.clone()));
            batches.push(batch);
        }
        Message::SensingDataReport {
            batches,
            reused,
            captured_until: now + (window.end() - window.start()),
        }
    }
}

/// How a task ended, as seen by the consumer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskOutcome {
    Completed {
        stid: Stid,
        result: SensingResult,
        availability: Option<Coverage>,
    },
    Aborted {
        stid: Option<Stid>,
        step: u8,
        reason: AbortReason,
    },
}

/// The in-process bus and every actor on it.
#[derive(Debug)]
pub struct CallFlow {
    scenario: Scenario,
    sf: SensingFunction,
    rules: PolicyRules,
    store: SdsfStore,
    ses: BTreeMap<SeId, SensingEntity>,
    queue: VecDeque<Envelope>,
    trace: Vec<TraceEntry>,
    seq: u64,
    outcome: Option<TaskOutcome>,
}

impl CallFlow {
    pub fn new(scenario: Scenario, store: SdsfStore, rules: PolicyRules, config: SfConfig) -> Self {
        Self {
            scenario,
            sf: SensingFunction::new(config),
            rules,
            store,
            ses: BTreeMap::new(),
            queue: VecDeque::new(),
            trace: Vec::new(),
            seq: 0,
            outcome: None,
        }
    }

    /// Queues a registration for every SE of the scenario.
    pub fn register_scenario_entities(&mut self, realization: u64) {
        let caps: Vec<SeCapability> = self
            .scenario
            .se_ids()
            .map(|se| SeCapability {
                se,
                pose: *self.scenario.pose(se).expect("id from scenario"),
                noise: self.scenario.config().noise,
            })
            .collect();
        for cap in caps {
            self.ses.insert(cap.se, SensingEntity::new(cap.se, realization));
            self.queue.push_back(Envelope {
                step: 1,
                sender: Actor::Se(cap.se),
                receiver: Actor::Sf,
                stid: None,
                body: Message::SeRegistration(cap),
            });
        }
    }

    pub fn now(&self) -> u64 {
        self.store.now()
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn sf(&self) -> &SensingFunction {
        &self.sf
    }

    pub fn store(&self) -> &SdsfStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut SdsfStore {
        &mut self.store
    }

    pub fn into_store(self) -> SdsfStore {
        self.store
    }

    /// Submits `request` from the SSC and runs the bus until it is idle.
    pub fn run(&mut self, request: ServiceRequest) -> Result<TaskOutcome, RunError> {
        self.queue.push_back(Envelope {
            step: 2,
            sender: Actor::Ssc,
            receiver: Actor::Sf,
            stid: None,
            body: Message::ServiceRequest(request),
        });
        self.outcome = None;
        while let Some(env) = self.queue.pop_front() {
            self.deliver(env)?;
        }
        Ok(self.outcome.clone().expect("the SSC always hears back"))
    }

    fn deliver(&mut self, env: Envelope) -> Result<(), RunError> {
        self.trace.push(TraceEntry {
            seq: self.seq,
            step: env.step,
            sender: env.sender.to_string(),
            receiver: env.receiver.to_string(),
            variant: env.body.variant().into(),
            stid: env.stid.as_ref().map(|s| s.to_string()),
        });
        self.seq += 1;
        let fail = |source: CallFlowError| RunError {
            step: env.step,
            variant: env.body.variant(),
            sender: env.sender,
            receiver: env.receiver,
            source,
        };
        let now = self.store.now();
        let replies: Vec<(u8, Actor, Message)> = match env.receiver {
            Actor::Sf => {
                if let Message::SensingDataReport { captured_until, .. } = &env.body {
                    self.store.advance_to(captured_until + 1);
                }
                let now = self.store.now();
                self.sf.handle(&env, &self.scenario, now).map_err(fail)?
            }
            Actor::Pcf => match &env.body {
                Message::PolicyRequest(req) => {
                    alloc::vec![(5, Actor::Sf, Message::PolicyDecision(evaluate_policy(&self.rules, req)))]
                }
                _ => return Err(fail(self.unexpected(&env))),
            },
            Actor::Sdsf => {
                let stid = env.stid.clone().ok_or_else(|| fail(CallFlowError::NoTask))?;
                match &env.body {
                    Message::AvailabilityQuery(ctx) => {
                        let a = self.store.query_availability(ctx, &stid);
                        alloc::vec![(7, Actor::Sf, Message::AvailabilityResponse(a))]
                    }
                    Message::HistoricalDataRequest { context, max_age } => {
                        let recs = self.store.fetch(context, &stid, max_age.unwrap_or(u64::MAX));
                        alloc::vec![(13, Actor::Sf, Message::HistoricalDataResponse(recs))]
                    }
                    Message::StorageUpdate(records) => {
                        for r in records {
                            self.store.store(r.clone()).map_err(|e| fail(e.into()))?;
                        }
                        Vec::new()
                    }
                    _ => return Err(fail(self.unexpected(&env))),
                }
            }
            Actor::Se(id) => match (&env.body, self.ses.get_mut(&id)) {
                (Message::SensingDataRequest { window, max_age, .. }, Some(se)) => {
                    alloc::vec![(11, Actor::Sf, se.sense(&self.scenario, *window, *max_age, now))]
                }
                _ => return Err(fail(self.unexpected(&env))),
            },
            Actor::Ssc => {
                self.on_ssc(&env);
                Vec::new()
            }
        };
        let stid = self.sf.stid().cloned();
        for (step, receiver, body) in replies {
            self.queue.push_back(Envelope {
                step,
                sender: env.receiver,
                receiver,
                stid: stid.clone(),
                body,
            });
        }
        Ok(())
    }

    fn unexpected(&self, env: &Envelope) -> CallFlowError {
        CallFlowError::IllegalMessage {
            phase: self.sf.phase(),
            variant: env.body.variant(),
        }
    }

    fn on_ssc(&mut self, env: &Envelope) {
        match &env.body {
            Message::SensingResult(result) => {
                self.outcome = Some(TaskOutcome::Completed {
                    stid: env.stid.clone().expect("bound after step 3"),
                    result: result.clone(),
                    availability: self.sf.availability().map(|a| a.status),
                })
            }
            Message::ServiceAbort(reason) => {
                self.outcome = Some(TaskOutcome::Aborted {
                    stid: env.stid.clone(),
                    step: env.step,
                    reason: reason.clone(),
                })
            }
            _ => {}
        }
    }
}
