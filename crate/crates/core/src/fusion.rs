//! Per-frame fusion at the sensing processing function: reject detections
//! inside the dilated static map, then gate the survivors against the
//! ground-truth targets with a Euclidean radius.
//!
//! Association is gate membership, not one-to-one assignment: a target is
//! detected when any accepted detection lies within `g_det` of it, and a
//! detection is a false alarm when no target lies within `g_det` of it.
//! Detections from all SEs are pooled.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{in_dilated_map, Point, StaticMap};
use crate::measurement::WorldDetection;
use crate::scenario::{Frame, TargetId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("mask margin must be finite and >= 0, got {0}")]
    InvalidMargin(f64),
    #[error("validation gate must be finite and > 0, got {0}")]
    InvalidGate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    mask_margin: f64,
    gate: f64,
    mask_enabled: bool,
}

impl FilterConfig {
    pub fn new(mask_margin: f64, gate: f64, mask_enabled: bool) -> Result<Self, FusionError> {
        if !(mask_margin >= 0.0 && mask_margin.is_finite()) {
            return Err(FusionError::InvalidMargin(mask_margin));
        }
        if !(gate > 0.0 && gate.is_finite()) {
            return Err(FusionError::InvalidGate(gate));
        }
        Ok(Self {
            mask_margin,
            gate,
            mask_enabled,
        })
    }

    /// Live-only processing: no map mask.
    pub fn live_only(gate: f64) -> Result<Self, FusionError> {
        Self::new(0.0, gate, false)
    }

    pub fn mask_margin(&self) -> f64 {
        self.mask_margin
    }

    pub fn gate(&self) -> f64 {
        self.gate
    }

    pub fn mask_enabled(&self) -> bool {
        self.mask_enabled
    }
}

/// Detection events of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GateOutcome {
    /// In-bounds target id to "some accepted detection within the gate".
    pub detected: BTreeMap<TargetId, bool>,
    /// Accepted detections with no target within the gate.
    pub unmatched: usize,
    pub accepted: Vec<WorldDetection>,
}

/// Keeps the detections outside `map` dilated by `g`, in input order.
pub fn apply_hard_mask(
    dets: &[WorldDetection],
    map: &StaticMap,
    g: f64,
) -> Result<Vec<WorldDetection>, FusionError> {
    if !(g >= 0.0 && g.is_finite()) {
        return Err(FusionError::InvalidMargin(g));
    }
    Ok(dets
        .iter()
        .filter(|d| !in_dilated_map(&d.point, map, g).expect("margin checked"))
        .copied()
        .collect())
}

fn within(a: &Point, b: &Point, gate: f64) -> bool {
    a.distance(b) <= gate
}

/// Euclidean validation gating of accepted detections against targets.
pub fn gate_detections(
    dets: &[WorldDetection],
    truth: &[(TargetId, Point)],
    gate: f64,
) -> Result<GateOutcome, FusionError> {
    if !(gate > 0.0 && gate.is_finite()) {
        return Err(FusionError::InvalidGate(gate));
    }
    let detected = truth
        .iter()
        .map(|(id, x)| (*id, dets.iter().any(|d| within(&d.point, x, gate))))
        .collect();
    let unmatched = dets
        .iter()
        .filter(|d| !truth.iter().any(|(_, x)| within(&d.point, x, gate)))
        .count();
    Ok(GateOutcome {
        detected,
        unmatched,
        accepted: dets.to_vec(),
    })
}

/// Mask (when enabled) strictly before gating.
pub fn process_frame(frame: &Frame, map: &StaticMap, fc: &FilterConfig) -> GateOutcome {
    let accepted = if fc.mask_enabled {
        apply_hard_mask(&frame.detections, map, fc.mask_margin).expect("validated config")
    } else {
        frame.detections.clone()
    };
    gate_detections(&accepted, &frame.truth, fc.gate).expect("validated config")
}

/// Distances of one frame, computed once and reused across many
/// `(g, g_det)` operating points.
#[derive(Debug, Clone)]
pub struct FrameDistances {
    targets: Vec<TargetId>,
    /// Distance of each detection to the nearest structure.
    map_dist: Vec<f64>,
    /// Row-major `[detection][target]`.
    det_target: Vec<f64>,
}

/// Per-frame events without the accepted list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameEvents {
    pub detected: Vec<(TargetId, bool)>,
    pub unmatched: usize,
}

impl FrameDistances {
    pub fn new(frame: &Frame, map: &StaticMap) -> Self {
        let targets: Vec<TargetId> = frame.truth.iter().map(|(id, _)| *id).collect();
        let map_dist = frame
            .detections
            .iter()
            .map(|d| map.distance(&d.point).unwrap_or(f64::INFINITY))
            .collect();
        let det_target = frame
            .detections
            .iter()
            .flat_map(|d| frame.truth.iter().map(move |(_, x)| d.point.distance(x)))
            .collect();
        Self {
            targets,
            map_dist,
            det_target,
        }
    }

    /// Same events as [`process_frame`] for the given operating point.
    pub fn evaluate(&self, fc: &FilterConfig) -> FrameEvents {
        let nt = self.targets.len();
        let mut detected = alloc::vec![false; nt];
        let mut unmatched = 0;
        for (j, &dm) in self.map_dist.iter().enumerate() {
            if fc.mask_enabled && dm <= fc.mask_margin {
                continue;
            }
            let row = &self.det_target[j * nt..(j + 1) * nt];
            let mut matched = false;
            for (hit, &d) in detected.iter_mut().zip(row) {
                if d <= fc.gate {
                    *hit = true;
                    matched = true;
                }
            }
            if !matched {
                unmatched += 1;
            }
        }
        FrameEvents {
            detected: self.targets.iter().copied().zip(detected).collect(),
            unmatched,
        }
    }
}
