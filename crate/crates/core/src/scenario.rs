//! Ground-truth world: static map, sensing entities, target tracks and
//! edge-concentrated Poisson clutter, rendered into per-step frames.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point, Rect, StaticMap};
use crate::measurement::{
    back_project, sample_measurement, world_to_polar, NoiseModel, Pose, SeId, WorldDetection,
};
use crate::rng::{stream_rng, SimRng};
use crate::FieldError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TargetId(pub u32);

impl fmt::Display for TargetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// Constant-velocity target, `position(t) = start + t * velocity`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetTrack {
    pub id: TargetId,
    pub start: Point,
    /// Meters per step.
    pub velocity: [f64; 2],
    pub axis: Axis,
}

impl TargetTrack {
    pub fn position(&self, t: u32) -> Point {
        let t = f64::from(t);
        Point::new(
            self.start.x + t * self.velocity[0],
            self.start.y + t * self.velocity[1],
        )
    }
}

/// Poisson clutter, a fraction of it jittered around building edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClutterModel {
    /// Mean clutter detections per step, pooled over all SEs.
    pub lambda_fa: f64,
    pub edge_fraction: f64,
    pub edge_jitter_sigma: f64,
    /// Also pass clutter through the SE range/bearing noise before
    /// back-projection. Off by default: the clutter distribution is
    /// specified directly in world coordinates.
    #[serde(default)]
    pub measurement_noise: bool,
}

impl Default for ClutterModel {
    fn default() -> Self {
        Self {
            lambda_fa: 60.0,
            edge_fraction: 0.7,
            edge_jitter_sigma: 1.0,
            measurement_noise: false,
        }
    }
}

/// How target tracks are laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLayout {
    /// `count` targets alternating horizontal/vertical on the default lanes.
    Lanes { count: u32, speed: f64 },
    Explicit(Vec<TargetTrack>),
}

/// Horizontal lanes (y, m) run just outside the north and south building
/// faces; vertical lanes (x, m) run through the corridor between buildings.
pub const HORIZONTAL_LANES: [f64; 4] = [42.0, 78.0, 40.0, 80.0];
pub const VERTICAL_LANES: [f64; 4] = [57.0, 63.0, 59.0, 61.0];

impl TargetLayout {
    pub fn tracks(&self, bounds: &Rect) -> Vec<TargetTrack> {
        match self {
            TargetLayout::Explicit(tracks) => tracks.clone(),
            TargetLayout::Lanes { count, speed } => (0..*count)
                .map(|i| {
                    let k = (i / 2) as usize;
                    let forward = k.is_multiple_of(2);
                    let id = TargetId(i);
                    if i % 2 == 0 {
                        let y = HORIZONTAL_LANES[k % HORIZONTAL_LANES.len()];
                        let (x, vx) = if forward {
                            (bounds.x_min(), *speed)
                        } else {
                            (bounds.x_max(), -*speed)
                        };
                        TargetTrack {
                            id,
                            start: Point::new(x, y),
                            velocity: [vx, 0.0],
                            axis: Axis::Horizontal,
                        }
                    } else {
                        let x = VERTICAL_LANES[k % VERTICAL_LANES.len()];
                        let (y, vy) = if forward {
                            (bounds.y_min(), *speed)
                        } else {
                            (bounds.y_max(), -*speed)
                        };
                        TargetTrack {
                            id,
                            start: Point::new(x, y),
                            velocity: [0.0, vy],
                            axis: Axis::Vertical,
                        }
                    }
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TargetLayout::Lanes { count, .. } => *count as usize,
            TargetLayout::Explicit(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid scenario configuration: {}", join_errors(.0))]
pub struct ConfigError(pub Vec<FieldError>);

pub(crate) fn join_errors(errs: &[FieldError]) -> String {
    errs.iter().map(|e| format!("{e}")).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub map: StaticMap,
    pub se_poses: Vec<Pose>,
    pub noise: NoiseModel,
    pub p_det: f64,
    pub targets: TargetLayout,
    pub clutter: ClutterModel,
    pub t_steps: u32,
    pub seed: u64,
}

/// Default junction: 120 m x 120 m with two buildings flanking a central
/// north-south corridor.
pub fn default_bounds() -> Rect {
    Rect::new(0.0, 0.0, 120.0, 120.0).expect("static rect")
}

pub fn default_buildings() -> Vec<Rect> {
    alloc::vec![
        Rect::new(20.0, 45.0, 55.0, 75.0).expect("static rect"),
        Rect::new(65.0, 45.0, 100.0, 75.0).expect("static rect"),
    ]
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            map: StaticMap::new(default_bounds(), default_buildings()).expect("default map"),
            se_poses: alloc::vec![
                Pose::new(0.0, 0.0, 0.0).expect("static pose"),
                Pose::new(120.0, 0.0, 0.0).expect("static pose"),
            ],
            noise: NoiseModel::from_degrees(0.8, 2.0).expect("static noise"),
            p_det: 0.95,
            targets: TargetLayout::Lanes {
                count: 8,
                speed: 1.2,
            },
            clutter: ClutterModel::default(),
            t_steps: 100,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn bounds(&self) -> &Rect {
        self.map.bounds()
    }

    /// Collects every violated constraint.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, reason: String| {
            errs.push(FieldError {
                field: field.into(),
                reason,
            })
        };
        if self.se_poses.is_empty() {
            bad("se_poses", "at least one sensing entity is required".into());
        }
        if !(0.0..=1.0).contains(&self.p_det) {
            bad("p_det", format!("must lie in [0, 1], got {}", self.p_det));
        }
        if self.t_steps < 1 {
            bad("t_steps", "must be at least 1".into());
        }
        let c = &self.clutter;
        if !(c.lambda_fa >= 0.0 && c.lambda_fa.is_finite()) {
            bad("clutter.lambda_fa", format!("must be finite and >= 0, got {}", c.lambda_fa));
        }
        if !(0.0..=1.0).contains(&c.edge_fraction) {
            bad("clutter.edge_fraction", format!("must lie in [0, 1], got {}", c.edge_fraction));
        }
        if !(c.edge_jitter_sigma > 0.0 && c.edge_jitter_sigma.is_finite()) {
            bad(
                "clutter.edge_jitter_sigma",
                format!("must be finite and > 0, got {}", c.edge_jitter_sigma),
            );
        }
        match &self.targets {
            TargetLayout::Lanes { speed, .. } => {
                if !(*speed > 0.0 && speed.is_finite()) {
                    bad("target_speed", format!("must be finite and > 0, got {speed}"));
                }
            }
            TargetLayout::Explicit(tracks) => {
                for (i, tr) in tracks.iter().enumerate() {
                    if tr.velocity == [0.0, 0.0] {
                        bad(&format!("tracks[{i}].velocity"), "must be non-zero".into());
                    }
                    let visible = (0..self.t_steps.max(1)).any(|t| self.bounds().contains(&tr.position(t)));
                    if !visible {
                        bad(&format!("tracks[{i}]"), "never inside the sensing bounds".into());
                    }
                }
                let mut ids: Vec<TargetId> = tracks.iter().map(|t| t.id).collect();
                ids.sort();
                ids.dedup();
                if ids.len() != tracks.len() {
                    bad("tracks", "target ids must be unique".into());
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(errs))
        }
    }
}

/// Ground truth and detections at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: u32,
    pub detections: Vec<WorldDetection>,
    /// In-bounds targets only.
    pub truth: Vec<(TargetId, Point)>,
}

/// Immutable world built from a validated config.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    config: ScenarioConfig,
    tracks: Vec<TargetTrack>,
}

pub fn build_scenario(cfg: ScenarioConfig) -> Result<Scenario, ConfigError> {
    cfg.validate()?;
    let tracks = cfg.targets.tracks(cfg.bounds());
    Ok(Scenario {
        config: cfg,
        tracks,
    })
}

pub fn target_position(track: &TargetTrack, t: u32) -> Point {
    track.position(t)
}

/// Draws one step of clutter in world coordinates.
///
/// With probability `edge_fraction` a point is placed uniformly on a
/// uniformly chosen building edge and jittered by an isotropic Gaussian;
/// jittered points leaving the bounds are redrawn up to 10 times and then
/// clamped. The rest are uniform over the bounds.
pub fn generate_clutter<R: Rng + ?Sized>(
    cm: &ClutterModel,
    map: &StaticMap,
    bounds: &Rect,
    rng: &mut R,
) -> Vec<Point> {
    if cm.lambda_fa <= 0.0 {
        return Vec::new();
    }
    let count = Poisson::new(cm.lambda_fa).expect("lambda > 0").sample(rng) as usize;
    let edges: Vec<(Point, Point)> = map.rects().iter().flat_map(|r| r.edges()).collect();
    if edges.is_empty() && cm.edge_fraction > 0.0 {
        log::warn!("clutter: static map is empty, edge clutter falls back to uniform");
    }
    (0..count)
        .map(|_| {
            if !edges.is_empty() && rng.random_bool(cm.edge_fraction) {
                let (a, b) = edges[rng.random_range(0..edges.len())];
                let u: f64 = rng.random();
                let on_edge = Point::new(a.x + u * (b.x - a.x), a.y + u * (b.y - a.y));
                let mut jittered = jitter(on_edge, cm.edge_jitter_sigma, rng);
                for _ in 0..10 {
                    if bounds.contains(&jittered) {
                        break;
                    }
                    jittered = jitter(on_edge, cm.edge_jitter_sigma, rng);
                }
                bounds.clamp(&jittered)
            } else {
                uniform_in(bounds, rng)
            }
        })
        .collect()
}

fn jitter<R: Rng + ?Sized>(p: Point, sigma: f64, rng: &mut R) -> Point {
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    Point::new(p.x + sigma * nx, p.y + sigma * ny)
}

fn uniform_in<R: Rng + ?Sized>(r: &Rect, rng: &mut R) -> Point {
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    Point::new(r.x_min() + u * r.width(), r.y_min() + v * r.height())
}

impl Scenario {
    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn tracks(&self) -> &[TargetTrack] {
        &self.tracks
    }

    pub fn map(&self) -> &StaticMap {
        &self.config.map
    }

    pub fn se_ids(&self) -> impl Iterator<Item = SeId> + '_ {
        (0..self.config.se_poses.len() as u32).map(SeId)
    }

    pub fn pose(&self, se: SeId) -> Option<&Pose> {
        self.config.se_poses.get(se.0 as usize)
    }

    /// In-bounds targets at step `t`.
    pub fn truth(&self, t: u32) -> Vec<(TargetId, Point)> {
        let bounds = self.config.bounds();
        self.tracks
            .iter()
            .map(|tr| (tr.id, tr.position(t)))
            .filter(|(_, p)| bounds.contains(p))
            .collect()
    }

    /// RNG for step `t` of Monte-Carlo realization `realization`.
    pub fn frame_rng(&self, realization: u64, t: u32) -> SimRng {
        stream_rng(self.config.seed, &[realization, u64::from(t)])
    }

    /// Synthesizes the detections of step `t`.
    ///
    /// Each SE detects each in-bounds target with probability `p_det`; the
    /// noisy measurement is back-projected with its world covariance.
    /// Clutter is assigned round-robin to SEs.
    pub fn generate_frame<R: Rng + ?Sized>(&self, t: u32, rng: &mut R) -> Frame {
        let cfg = &self.config;
        let truth = self.truth(t);
        let mut detections = Vec::new();
        for (_, p) in &truth {
            for (se, pose) in cfg.se_poses.iter().enumerate() {
                let se = SeId(se as u32);
                if !rng.random_bool(cfg.p_det) {
                    continue;
                }
                match sample_measurement(pose, p, &cfg.noise, se, rng) {
                    Ok(z) => detections.push(back_project(pose, &z, &cfg.noise)),
                    Err(e) => log::debug!("step {t}: {se} skipped target: {e}"),
                }
            }
        }
        let clutter = generate_clutter(&cfg.clutter, &cfg.map, cfg.bounds(), rng);
        for (k, c) in clutter.iter().enumerate() {
            let se = SeId((k % cfg.se_poses.len()) as u32);
            let pose = &cfg.se_poses[se.0 as usize];
            let z = if cfg.clutter.measurement_noise {
                sample_measurement(pose, c, &cfg.noise, se, rng)
            } else {
                world_to_polar(pose, c, se)
            };
            match z {
                Ok(z) => {
                    let mut d = back_project(pose, &z, &cfg.noise);
                    if !cfg.clutter.measurement_noise {
                        d.point = *c;
                    }
                    detections.push(d.with_clutter_truth(true));
                }
                Err(e) => log::debug!("step {t}: clutter point dropped: {e}"),
            }
        }
        Frame {
            t,
            detections,
            truth,
        }
    }

    /// All frames of one realization.
    pub fn realization(&self, realization: u64) -> Vec<Frame> {
        (0..self.config.t_steps)
            .map(|t| self.generate_frame(t, &mut self.frame_rng(realization, t)))
            .collect()
    }
}
