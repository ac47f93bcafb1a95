//! Sensing Data Storage Function (SDSF).
//!
//! Records are indexed by sensing task id (STID), time and context. A query
//! reports whether the requested spatio-temporal context is fully covered,
//! partially covered or not covered by stored records; a fetch returns the
//! overlapping records that satisfy a freshness bound.
//!
//! Time is the simulator step clock. The store never reads wall-clock time.
//! Every mutation is appended to a journal of [`LogEntry`] values so a file
//! backend can persist the store and rebuild it with [`SdsfStore::replay`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Rect, StaticMap};
use crate::measurement::WorldDetection;
use crate::scenario::join_errors;
use crate::FieldError;

/// Sensing task identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Stid(String);

impl Stid {
    pub fn new(s: impl Into<String>) -> Result<Self, StoreError> {
        let s = s.into();
        if s.trim().is_empty() {
            return Err(StoreError::Malformed(alloc::vec![FieldError::new("stid", "must be non-empty")]));
        }
        Ok(Self(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Stid {
    type Error = StoreError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Stid::new(s)
    }
}

impl From<Stid> for String {
    fn from(s: Stid) -> Self {
        s.0
    }
}

impl fmt::Display for Stid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetType {
    Pedestrian,
    Vehicle,
    Lorry,
    Cyclist,
    Motorcyclist,
    Unknown,
}

impl TargetType {
    /// A stored `Unknown` serves any request.
    pub fn served_by(&self, stored: &TargetType) -> bool {
        *stored == TargetType::Unknown || stored == self
    }
}

/// Inclusive range of steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[u64; 2]", into = "[u64; 2]")]
pub struct TimeWindow {
    start: u64,
    end: u64,
}

impl TimeWindow {
    pub fn new(start: u64, end: u64) -> Result<Self, StoreError> {
        if start > end {
            return Err(StoreError::Malformed(alloc::vec![FieldError::new(
                "context.time_window",
                format!("start {start} is after end {end}"),
            )]));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> u64 {
        self.start
    }

    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn contains(&self, t: u64) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn intersection(&self, other: &TimeWindow) -> Option<TimeWindow> {
        let (s, e) = (self.start.max(other.start), self.end.min(other.end));
        (s <= e).then_some(TimeWindow { start: s, end: e })
    }

    /// `self \ other` as up to two windows.
    fn subtract(&self, other: &TimeWindow) -> Vec<TimeWindow> {
        let Some(cut) = self.intersection(other) else {
            return alloc::vec![*self];
        };
        let mut out = Vec::new();
        if cut.start > self.start {
            out.push(TimeWindow {
                start: self.start,
                end: cut.start - 1,
            });
        }
        if cut.end < self.end {
            out.push(TimeWindow {
                start: cut.end + 1,
                end: self.end,
            });
        }
        out
    }
}

impl TryFrom<[u64; 2]> for TimeWindow {
    type Error = StoreError;
    fn try_from(v: [u64; 2]) -> Result<Self, Self::Error> {
        TimeWindow::new(v[0], v[1])
    }
}

impl From<TimeWindow> for [u64; 2] {
    fn from(w: TimeWindow) -> Self {
        [w.start, w.end]
    }
}

/// Where, when and what a piece of sensing data is about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingContext {
    pub area: Rect,
    pub time_window: TimeWindow,
    pub target_type: TargetType,
    /// Free-form tags such as `weather = rain`.
    #[serde(default)]
    pub conditions: BTreeMap<String, String>,
}

impl SensingContext {
    pub fn new(area: Rect, time_window: TimeWindow, target_type: TargetType) -> Self {
        Self {
            area,
            time_window,
            target_type,
            conditions: BTreeMap::new(),
        }
    }

    pub fn with_condition(mut self, key: &str, value: &str) -> Self {
        self.conditions.insert(key.to_string(), value.to_string());
        self
    }

    /// Stored data in context `stored` can serve a request for `self`:
    /// compatible target type, no conflicting condition tags, and a
    /// spatio-temporal overlap.
    pub fn is_served_by(&self, stored: &SensingContext) -> bool {
        self.target_type.served_by(&stored.target_type)
            && self
                .conditions
                .iter()
                .all(|(k, v)| stored.conditions.get(k).is_none_or(|sv| sv == v))
            && self.area.intersects(&stored.area)
            && self.time_window.intersection(&stored.time_window).is_some()
    }

    fn with_box(&self, area: Rect, time_window: TimeWindow) -> SensingContext {
        SensingContext {
            area,
            time_window,
            target_type: self.target_type,
            conditions: self.conditions.clone(),
        }
    }

    /// Disjoint pieces of `self` not covered by `other`'s area x window.
    fn subtract(&self, other: &SensingContext) -> Vec<SensingContext> {
        let Some(area_cut) = self.area.intersection(&other.area) else {
            return alloc::vec![self.clone()];
        };
        if self.time_window.intersection(&other.time_window).is_none() {
            return alloc::vec![self.clone()];
        }
        let mut out: Vec<SensingContext> = self
            .area
            .subtract(&other.area)
            .into_iter()
            .map(|a| self.with_box(a, self.time_window))
            .collect();
        out.extend(
            self.time_window
                .subtract(&other.time_window)
                .into_iter()
                .map(|w| self.with_box(area_cut, w)),
        );
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Raw,
    Processed,
    HighLevel,
}

/// Detections reported at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBatch {
    pub step: u64,
    pub detections: Vec<WorldDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    /// Static structures; processed or high-level data.
    Map(StaticMap),
    /// Per-step detections; raw or processed data.
    Detections(Vec<DetectionBatch>),
}

impl Payload {
    pub fn admits(&self, kind: DataKind) -> bool {
        matches!(
            (self, kind),
            (Payload::Map(_), DataKind::Processed | DataKind::HighLevel)
                | (Payload::Detections(_), DataKind::Raw | DataKind::Processed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub storage_location: String,
    #[serde(default)]
    pub context_changes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingRecord {
    pub stid: Stid,
    pub context: SensingContext,
    pub kind: DataKind,
    pub payload: Payload,
    pub created_at: u64,
    /// Aging policy: the record is purged once older than this many steps.
    pub max_age: u64,
    #[serde(default)]
    pub metadata: RecordMetadata,
}

impl SensingRecord {
    pub fn age(&self, now: u64) -> u64 {
        now.saturating_sub(self.created_at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coverage {
    Exists,
    Partial,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Availability {
    pub status: Coverage,
    /// Requested context clipped to each contributing record.
    pub available: Vec<SensingContext>,
    /// Disjoint uncovered pieces of the requested context.
    pub missing: Vec<SensingContext>,
    /// Kinds of the contributing records, sorted.
    pub kinds: Vec<DataKind>,
}

impl Availability {
    pub fn missing_all(ctx: &SensingContext) -> Self {
        Self {
            status: Coverage::Missing,
            available: Vec::new(),
            missing: alloc::vec![ctx.clone()],
            kinds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("malformed sensing record: {}", join_errors(.0))]
    Malformed(Vec<FieldError>),
    #[error("journal replay failed at entry {index}: {reason}")]
    Replay { index: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubscriptionId(pub u64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub subscription: SubscriptionId,
    pub record: RecordId,
    pub stid: Stid,
}

/// Exchange with the store, kept for auditing per STID.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub stid: Stid,
    pub at: u64,
    pub op: ExchangeOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExchangeOp {
    Query(Coverage),
    Fetch { returned: usize },
    Store(RecordId),
}

/// One durable mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LogEntry {
    Clock { now: u64 },
    Store { id: RecordId, record: SensingRecord },
    Purge { now: u64 },
}

#[derive(Debug, Clone, Default)]
pub struct SdsfStore {
    now: u64,
    next_id: u64,
    records: BTreeMap<RecordId, SensingRecord>,
    subscriptions: BTreeMap<SubscriptionId, SensingContext>,
    next_subscription: u64,
    notifications: Vec<Notification>,
    exchanges: Vec<Exchange>,
    journal: Vec<LogEntry>,
}

impl SdsfStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a store from its journal.
    pub fn replay(entries: impl IntoIterator<Item = LogEntry>) -> Result<Self, StoreError> {
        let mut store = Self::new();
        for (index, entry) in entries.into_iter().enumerate() {
            match entry {
                LogEntry::Clock { now } => store.now = store.now.max(now),
                LogEntry::Purge { now } => {
                    store.now = store.now.max(now);
                    store.purge(now);
                }
                LogEntry::Store { id, record } => {
                    if store.records.contains_key(&id) {
                        return Err(StoreError::Replay {
                            index,
                            reason: format!("duplicate record id {}", id.0),
                        });
                    }
                    store.check(&record).map_err(|e| StoreError::Replay {
                        index,
                        reason: e.to_string(),
                    })?;
                    store.next_id = store.next_id.max(id.0 + 1);
                    store.records.insert(id, record);
                }
            }
        }
        Ok(store)
    }

    /// Entries recorded since the last call.
    pub fn take_journal(&mut self) -> Vec<LogEntry> {
        core::mem::take(&mut self.journal)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Moves the clock forward; earlier times are ignored.
    pub fn advance_to(&mut self, now: u64) {
        if now > self.now {
            self.now = now;
            self.journal.push(LogEntry::Clock { now });
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: RecordId) -> Option<&SensingRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = (RecordId, &SensingRecord)> {
        self.records.iter().map(|(k, v)| (*k, v))
    }

    pub fn exchanges(&self) -> &[Exchange] {
        &self.exchanges
    }

    fn check(&self, rec: &SensingRecord) -> Result<(), StoreError> {
        let mut errs = Vec::new();
        if rec.created_at > self.now {
            errs.push(FieldError::new(
                "created_at",
                format!("{} is in the future (now {})", rec.created_at, self.now),
            ));
        }
        if !rec.payload.admits(rec.kind) {
            errs.push(FieldError::new("payload", format!("payload does not match kind {:?}", rec.kind)));
        }
        match &rec.payload {
            Payload::Map(m) if !m.bounds().intersects(&rec.context.area) => {
                errs.push(FieldError::new("payload.bounds", "map does not intersect the context area"))
            }
            Payload::Detections(batches) => {
                if let Some(b) = batches.iter().find(|b| !rec.context.time_window.contains(b.step)) {
                    errs.push(FieldError::new(
                        "payload.step",
                        format!("batch at step {} lies outside the time window", b.step),
                    ));
                }
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(StoreError::Malformed(errs))
        }
    }

    /// Stores a record. Storing the same `(stid, context, created_at, kind)`
    /// again returns the existing id without side effects.
    pub fn store(&mut self, rec: SensingRecord) -> Result<RecordId, StoreError> {
        if let Some((id, _)) = self.records.iter().find(|(_, r)| {
            r.stid == rec.stid && r.context == rec.context && r.created_at == rec.created_at && r.kind == rec.kind
        }) {
            return Ok(*id);
        }
        self.check(&rec)?;
        let id = RecordId(self.next_id);
        self.next_id += 1;
        for (sub, filter) in &self.subscriptions {
            if filter.is_served_by(&rec.context) {
                self.notifications.push(Notification {
                    subscription: *sub,
                    record: id,
                    stid: rec.stid.clone(),
                });
            }
        }
        self.exchanges.push(Exchange {
            stid: rec.stid.clone(),
            at: self.now,
            op: ExchangeOp::Store(id),
        });
        self.journal.push(LogEntry::Store {
            id,
            record: rec.clone(),
        });
        self.records.insert(id, rec);
        Ok(id)
    }

    fn relevant<'a>(&'a self, ctx: &'a SensingContext) -> impl Iterator<Item = (RecordId, &'a SensingRecord)> + 'a {
        self.records
            .iter()
            .filter(move |(_, r)| ctx.is_served_by(&r.context))
            .map(|(k, v)| (*k, v))
    }

    /// Spatio-temporal coverage of `ctx` by stored records.
    pub fn query_availability(&mut self, ctx: &SensingContext, stid: &Stid) -> Availability {
        let availability = self.availability(ctx);
        self.exchanges.push(Exchange {
            stid: stid.clone(),
            at: self.now,
            op: ExchangeOp::Query(availability.status),
        });
        availability
    }

    /// Read-only coverage computation.
    pub fn availability(&self, ctx: &SensingContext) -> Availability {
        let mut available = Vec::new();
        let mut missing = alloc::vec![ctx.clone()];
        let mut kinds = Vec::new();
        for (_, r) in self.relevant(ctx) {
            let area = ctx.area.intersection(&r.context.area).expect("overlap checked");
            let window = ctx
                .time_window
                .intersection(&r.context.time_window)
                .expect("overlap checked");
            available.push(ctx.with_box(area, window));
            kinds.push(r.kind);
            missing = missing.into_iter().flat_map(|m| m.subtract(&r.context)).collect();
        }
        kinds.sort();
        kinds.dedup();
        let status = match (available.is_empty(), missing.is_empty()) {
            (true, _) => Coverage::Missing,
            (false, true) => Coverage::Exists,
            (false, false) => Coverage::Partial,
        };
        Availability {
            status,
            available,
            missing,
            kinds,
        }
    }

    /// Records overlapping `ctx` with `now - created_at <= max_age`, by id.
    pub fn fetch(&mut self, ctx: &SensingContext, stid: &Stid, max_age: u64) -> Vec<SensingRecord> {
        let now = self.now;
        let out: Vec<SensingRecord> = self
            .relevant(ctx)
            .filter(|(_, r)| r.age(now) <= max_age)
            .map(|(_, r)| r.clone())
            .collect();
        self.exchanges.push(Exchange {
            stid: stid.clone(),
            at: now,
            op: ExchangeOp::Fetch { returned: out.len() },
        });
        out
    }

    fn purge(&mut self, now: u64) -> usize {
        let before = self.records.len();
        self.records.retain(|_, r| r.age(now) <= r.max_age);
        before - self.records.len()
    }

    /// Advances the clock to `now` and drops records older than their own
    /// aging policy.
    pub fn apply_aging(&mut self, now: u64) -> usize {
        self.advance_to(now);
        let removed = self.purge(self.now);
        if removed > 0 {
            self.journal.push(LogEntry::Purge { now: self.now });
        }
        removed
    }

    pub fn subscribe(&mut self, filter: SensingContext) -> SubscriptionId {
        let id = SubscriptionId(self.next_subscription);
        self.next_subscription += 1;
        self.subscriptions.insert(id, filter);
        id
    }

    pub fn unsubscribe(&mut self, id: SubscriptionId) -> bool {
        self.subscriptions.remove(&id).is_some()
    }

    pub fn drain_notifications(&mut self) -> Vec<Notification> {
        core::mem::take(&mut self.notifications)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::measurement::{Cov2, SeId};
    use proptest::prelude::*;

    fn rect(a: f64, b: f64, c: f64, d: f64) -> Rect {
        Rect::new(a, b, c, d).unwrap()
    }

    fn ctx(area: Rect, s: u64, e: u64) -> SensingContext {
        SensingContext::new(area, TimeWindow::new(s, e).unwrap(), TargetType::Vehicle)
    }

    fn stid(s: &str) -> Stid {
        Stid::new(s).unwrap()
    }

    fn map_record(area: Rect, created_at: u64, max_age: u64) -> SensingRecord {
        SensingRecord {
            stid: stid("survey"),
            context: SensingContext::new(area, TimeWindow::new(0, 1000).unwrap(), TargetType::Unknown),
            kind: DataKind::HighLevel,
            payload: Payload::Map(StaticMap::empty(area)),
            created_at,
            max_age,
            metadata: RecordMetadata::default(),
        }
    }

    fn junction() -> Rect {
        rect(0.0, 0.0, 120.0, 120.0)
    }

    fn area_sum(cs: &[SensingContext]) -> f64 {
        cs.iter()
            .map(|c| c.area.area() * (c.time_window.end() - c.time_window.start() + 1) as f64)
            .sum()
    }

    #[test]
    fn stid_must_be_non_empty() {
        assert!(Stid::new("").is_err());
        assert!(Stid::new("  ").is_err());
    }

    #[test]
    fn store_then_fetch() {
        let mut s = SdsfStore::new();
        s.advance_to(10);
        let rec = map_record(junction(), 5, 100);
        let id = s.store(rec.clone()).unwrap();
        assert_eq!(s.get(id), Some(&rec));
        let got = s.fetch(&ctx(junction(), 0, 10), &stid("task"), u64::MAX);
        assert_eq!(got, alloc::vec![rec]);
    }

    #[test]
    fn store_is_idempotent() {
        let mut s = SdsfStore::new();
        s.advance_to(10);
        let a = s.store(map_record(junction(), 5, 100)).unwrap();
        let b = s.store(map_record(junction(), 5, 100)).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.len(), 1);
        assert_eq!(s.take_journal().iter().filter(|e| matches!(e, LogEntry::Store { .. })).count(), 1);
    }

    #[test]
    fn future_records_are_rejected() {
        let mut s = SdsfStore::new();
        s.advance_to(3);
        let err = s.store(map_record(junction(), 4, 100)).unwrap_err();
        let StoreError::Malformed(fields) = err else { panic!() };
        assert_eq!(fields[0].field, "created_at");
        assert!(s.is_empty());
    }

    #[test]
    fn mismatched_payload_kind_is_rejected() {
        let mut s = SdsfStore::new();
        let mut rec = map_record(junction(), 0, 100);
        rec.kind = DataKind::Raw;
        assert!(matches!(s.store(rec), Err(StoreError::Malformed(f)) if f[0].field == "payload"));
        let mut rec = map_record(junction(), 0, 100);
        rec.payload = Payload::Detections(alloc::vec![DetectionBatch { step: 5000, detections: alloc::vec![] }]);
        rec.kind = DataKind::Raw;
        assert!(matches!(s.store(rec), Err(StoreError::Malformed(f)) if f[0].field == "payload.step"));
    }

    #[test]
    fn empty_store_is_missing() {
        let mut s = SdsfStore::new();
        let c = ctx(junction(), 0, 9);
        let a = s.query_availability(&c, &stid("t"));
        assert_eq!(a, Availability::missing_all(&c));
    }

    #[test]
    fn full_cover_exists() {
        let mut s = SdsfStore::new();
        s.store(map_record(junction(), 0, 100)).unwrap();
        let a = s.query_availability(&ctx(rect(10.0, 10.0, 50.0, 50.0), 0, 9), &stid("t"));
        assert_eq!(a.status, Coverage::Exists);
        assert!(a.missing.is_empty());
        assert_eq!(a.kinds, [DataKind::HighLevel]);
    }

    #[test]
    fn left_half_is_partial() {
        let mut s = SdsfStore::new();
        s.store(map_record(rect(0.0, 0.0, 60.0, 120.0), 0, 100)).unwrap();
        let a = s.query_availability(&ctx(junction(), 0, 9), &stid("t"));
        assert_eq!(a.status, Coverage::Partial);
        assert_eq!(a.available.len(), 1);
        assert_eq!(a.available[0].area, rect(0.0, 0.0, 60.0, 120.0));
        assert_eq!(a.missing.len(), 1);
        assert_eq!(a.missing[0].area, rect(60.0, 0.0, 120.0, 120.0));
        assert_eq!(a.missing[0].time_window, TimeWindow::new(0, 9).unwrap());
    }

    #[test]
    fn temporal_gap_is_partial() {
        let mut s = SdsfStore::new();
        let mut rec = map_record(junction(), 0, 100);
        rec.context.time_window = TimeWindow::new(0, 4).unwrap();
        s.store(rec).unwrap();
        let a = s.availability(&ctx(junction(), 0, 9));
        assert_eq!(a.status, Coverage::Partial);
        assert_eq!(a.missing.len(), 1);
        assert_eq!(a.missing[0].area, junction());
        assert_eq!(a.missing[0].time_window, TimeWindow::new(5, 9).unwrap());
    }

    #[test]
    fn target_type_and_conditions_filter() {
        let mut s = SdsfStore::new();
        let mut rec = map_record(junction(), 0, 100);
        rec.context.target_type = TargetType::Pedestrian;
        rec.context = rec.context.with_condition("weather", "rain");
        s.store(rec).unwrap();
        assert_eq!(s.availability(&ctx(junction(), 0, 9)).status, Coverage::Missing);
        let mut q = ctx(junction(), 0, 9);
        q.target_type = TargetType::Pedestrian;
        assert_eq!(s.availability(&q).status, Coverage::Exists);
        assert_eq!(s.availability(&q.clone().with_condition("weather", "clear")).status, Coverage::Missing);
        assert_eq!(s.availability(&q.with_condition("weather", "rain")).status, Coverage::Exists);
    }

    #[test]
    fn fetch_freshness_boundaries() {
        let mut s = SdsfStore::new();
        s.advance_to(20);
        s.store(map_record(junction(), 10, 100)).unwrap(); // age 10
        s.store(map_record(rect(0.0, 0.0, 10.0, 10.0), 15, 100)).unwrap(); // age 5
        let q = ctx(junction(), 0, 9);
        let got = s.fetch(&q, &stid("t"), 5);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].created_at, 15);
        assert_eq!(s.fetch(&q, &stid("t"), 4).len(), 0);
        assert_eq!(s.fetch(&q, &stid("t"), 10).len(), 2);
    }

    #[test]
    fn aging() {
        let mut s = SdsfStore::new();
        s.store(map_record(junction(), 0, 100)).unwrap();
        assert_eq!(s.apply_aging(100), 0);
        assert_eq!(s.apply_aging(101), 1);
        assert_eq!(s.apply_aging(101), 0);
        assert!(s.is_empty());
    }

    #[test]
    fn subscriptions_notify_once() {
        let mut s = SdsfStore::new();
        let sub = s.subscribe(ctx(rect(0.0, 0.0, 10.0, 10.0), 0, 5));
        let far = s.subscribe(ctx(rect(200.0, 200.0, 210.0, 210.0), 0, 5));
        let id = s.store(map_record(junction(), 0, 100)).unwrap();
        s.store(map_record(junction(), 0, 100)).unwrap();
        let n = s.drain_notifications();
        assert_eq!(n, alloc::vec![Notification { subscription: sub, record: id, stid: stid("survey") }]);
        assert!(s.drain_notifications().is_empty());
        assert!(s.unsubscribe(far));
        assert!(!s.unsubscribe(far));
    }

    #[test]
    fn journal_replay_restores_state() {
        let mut s = SdsfStore::new();
        s.advance_to(50);
        s.store(map_record(junction(), 0, 20)).unwrap();
        let det = WorldDetection::new(Point::new(1.0, 2.0), Cov2::diag(1.0, 2.0), SeId(1));
        s.store(SensingRecord {
            stid: stid("live"),
            context: ctx(junction(), 40, 49),
            kind: DataKind::Raw,
            payload: Payload::Detections(alloc::vec![DetectionBatch { step: 41, detections: alloc::vec![det] }]),
            created_at: 50,
            max_age: 1000,
            metadata: RecordMetadata {
                storage_location: "edge-1".into(),
                context_changes: alloc::vec!["initial".into()],
            },
        })
        .unwrap();
        s.apply_aging(60);
        let journal = s.take_journal();
        let r = SdsfStore::replay(journal).unwrap();
        assert_eq!(r.now(), 60);
        let a: Vec<_> = s.records().collect();
        let b: Vec<_> = r.records().collect();
        assert_eq!(a, b);
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn replay_rejects_duplicate_ids() {
        let rec = map_record(junction(), 0, 10);
        let entries = alloc::vec![
            LogEntry::Store { id: RecordId(0), record: rec.clone() },
            LogEntry::Store { id: RecordId(0), record: rec },
        ];
        assert!(matches!(SdsfStore::replay(entries), Err(StoreError::Replay { index: 1, .. })));
    }

    #[test]
    fn exchanges_are_keyed_by_stid() {
        let mut s = SdsfStore::new();
        let t = stid("task-7");
        s.query_availability(&ctx(junction(), 0, 1), &t);
        s.fetch(&ctx(junction(), 0, 1), &t, 0);
        assert!(s.exchanges().iter().all(|e| e.stid == t));
        assert_eq!(s.exchanges()[0].op, ExchangeOp::Query(Coverage::Missing));
    }

    fn arb_area() -> impl Strategy<Value = Rect> {
        (0.0f64..100.0, 0.0f64..100.0, 1.0f64..60.0, 1.0f64..60.0)
            .prop_map(|(x, y, w, h)| rect(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn coverage_invariants(
            areas in proptest::collection::vec((arb_area(), 0u64..20, 0u64..10), 0..5),
            q in arb_area(), qs in 0u64..20, ql in 0u64..10,
        ) {
            let mut s = SdsfStore::new();
            for (i, (a, ws, wl)) in areas.iter().enumerate() {
                let mut r = map_record(*a, 0, 1000);
                r.stid = stid(&format!("r{i}"));
                r.context.time_window = TimeWindow::new(*ws, ws + wl).unwrap();
                s.store(r).unwrap();
            }
            let c = ctx(q, qs, qs + ql);
            let a = s.availability(&c);
            match a.status {
                Coverage::Exists => prop_assert!(a.missing.is_empty() && !a.available.is_empty()),
                Coverage::Missing => prop_assert!(a.available.is_empty()),
                Coverage::Partial => prop_assert!(!a.missing.is_empty() && !a.available.is_empty()),
            }
            // fetch with unbounded age is non-empty iff not missing
            let fetched = s.fetch(&c, &stid("q"), u64::MAX);
            prop_assert_eq!(fetched.is_empty(), a.status == Coverage::Missing);
            // missing pieces are disjoint, inside the query, and outside every record
            let total = area_sum(core::slice::from_ref(&c));
            let miss = area_sum(&a.missing);
            prop_assert!(miss <= total * (1.0 + 1e-9));
            for m in &a.missing {
                prop_assert!(c.area.contains_rect(&m.area));
                for r in &fetched {
                    let overlap = m.area.intersects(&r.context.area)
                        && m.time_window.intersection(&r.context.time_window).is_some();
                    prop_assert!(!overlap);
                }
            }
        }

        #[test]
        fn split_context_algebra(split in 10.0f64..110.0) {
            let left = rect(0.0, 0.0, split, 120.0);
            let right = rect(split, 0.0, 120.0, 120.0);
            let mut s = SdsfStore::new();
            s.store(map_record(left, 0, 100)).unwrap();
            prop_assert_eq!(s.availability(&ctx(junction(), 0, 9)).status, Coverage::Partial);
            prop_assert_eq!(s.availability(&ctx(left, 0, 9)).status, Coverage::Exists);
            prop_assert_eq!(s.availability(&ctx(right, 0, 9)).status, Coverage::Missing);
        }

        #[test]
        fn aging_keeps_fetchable_records(created in 0u64..50, policy in 0u64..50, now in 50u64..120) {
            let mut s = SdsfStore::new();
            s.advance_to(created);
            s.store(map_record(junction(), created, policy)).unwrap();
            s.advance_to(now);
            let fresh = s.fetch(&ctx(junction(), 0, 9), &stid("q"), policy).len();
            s.apply_aging(now);
            prop_assert_eq!(s.len(), fresh);
        }
    }
}
