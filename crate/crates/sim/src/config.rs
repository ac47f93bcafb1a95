//! TOML configuration. Every key is optional; omitted keys take the
//! junction defaults. Angles are given in degrees.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use isac_core::callflow::{Kpi, PolicyRules, RequesterKind};
use isac_core::geometry::{Point, Rect, StaticMap};
use isac_core::measurement::{NoiseModel, Pose};
use isac_core::scenario::{
    default_bounds, default_buildings, Axis, ClutterModel, TargetLayout, TargetTrack,
};
use isac_core::sdsf::TargetType;
use isac_core::{FieldError, ScenarioConfig, TargetId};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration:\n  {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("\n  "))]
    Invalid(Vec<FieldError>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub scenario: ScenarioConfig,
    pub g_values: Vec<f64>,
    pub g_det_values: Vec<f64>,
    pub n_realizations: u32,
    /// Also emit the mask-disabled rows.
    pub baseline: bool,
}

/// The call-flow demo task.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub g: f64,
    pub g_det: f64,
    pub realization: u64,
    pub consent: bool,
    pub max_age: Option<u64>,
    pub kpi: Kpi,
    pub requester: RequesterKind,
    pub target_type: TargetType,
    pub conditions: BTreeMap<String, String>,
    pub purpose: String,
    /// Task time window in steps.
    pub window: [u64; 2],
    /// Window of the survey map seeded into a fresh store; `None` seeds nothing.
    pub survey_window: Option<[u64; 2]>,
    pub store: Option<PathBuf>,
    pub kpi_table: Option<PathBuf>,
    pub archive_max_age: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub sweep: SweepConfig,
    pub demo: DemoConfig,
    pub policy: PolicyRules,
}

/// Margin grid, 0 to 5 m in 0.25 m steps.
pub fn default_g_values() -> Vec<f64> {
    (0..=20).map(|i| f64::from(i) * 0.25).collect()
}

pub fn default_g_det_values() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0, 5.0, 10.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawConfig {
    g_values: Vec<f64>,
    g_det_values: Vec<f64>,
    n_realizations: i64,
    baseline: bool,
    scenario: RawScenario,
    demo: RawDemo,
    policy: RawPolicy,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            g_values: default_g_values(),
            g_det_values: default_g_det_values(),
            n_realizations: 50,
            baseline: true,
            scenario: RawScenario::default(),
            demo: RawDemo::default(),
            policy: RawPolicy::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawScenario {
    bounds: [f64; 4],
    buildings: Vec<[f64; 4]>,
    se_poses: Vec<RawPose>,
    sigma_r: f64,
    sigma_beta_deg: f64,
    p_det: f64,
    n_targets: u32,
    target_speed: f64,
    tracks: Option<Vec<RawTrack>>,
    t_steps: u32,
    seed: u64,
    clutter: RawClutter,
}

impl Default for RawScenario {
    fn default() -> Self {
        let r = |r: Rect| [r.x_min(), r.y_min(), r.x_max(), r.y_max()];
        Self {
            bounds: r(default_bounds()),
            buildings: default_buildings().into_iter().map(r).collect(),
            se_poses: vec![
                RawPose {
                    x: 0.0,
                    y: 0.0,
                    theta_deg: 0.0,
                },
                RawPose {
                    x: 120.0,
                    y: 0.0,
                    theta_deg: 0.0,
                },
            ],
            sigma_r: 0.8,
            sigma_beta_deg: 2.0,
            p_det: 0.95,
            n_targets: 8,
            target_speed: 1.2,
            tracks: None,
            t_steps: 100,
            seed: 0,
            clutter: RawClutter::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPose {
    x: f64,
    y: f64,
    #[serde(default)]
    theta_deg: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrack {
    id: u32,
    start: [f64; 2],
    velocity: [f64; 2],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawClutter {
    lambda_fa: f64,
    edge_fraction: f64,
    edge_jitter_sigma: f64,
    measurement_noise: bool,
}

impl Default for RawClutter {
    fn default() -> Self {
        let c = ClutterModel::default();
        Self {
            lambda_fa: c.lambda_fa,
            edge_fraction: c.edge_fraction,
            edge_jitter_sigma: c.edge_jitter_sigma,
            measurement_noise: c.measurement_noise,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawDemo {
    g: f64,
    g_det: f64,
    realization: u64,
    consent: bool,
    max_age: Option<u64>,
    pd_min: f64,
    fa_max: f64,
    requester: RequesterKind,
    target_type: TargetType,
    conditions: BTreeMap<String, String>,
    purpose: String,
    window: Option<[u64; 2]>,
    seed_survey: bool,
    survey_window: Option<[u64; 2]>,
    store: Option<PathBuf>,
    kpi_table: Option<PathBuf>,
    archive_max_age: u64,
}

impl Default for RawDemo {
    fn default() -> Self {
        Self {
            g: 2.0,
            g_det: 3.0,
            realization: 0,
            consent: true,
            max_age: None,
            pd_min: 0.5,
            fa_max: 30.0,
            requester: RequesterKind::Ran,
            target_type: TargetType::Vehicle,
            conditions: BTreeMap::new(),
            purpose: "sensing results generation".into(),
            window: None,
            seed_survey: true,
            survey_window: None,
            store: None,
            kpi_table: None,
            archive_max_age: 10_000,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawPolicy {
    prohibited_areas: Vec<[f64; 4]>,
    charging_rules: Vec<String>,
    revocation_rules: Vec<String>,
}

fn rect(field: &str, v: [f64; 4], errs: &mut Vec<FieldError>) -> Option<Rect> {
    Rect::new(v[0], v[1], v[2], v[3])
        .map_err(|e| errs.push(FieldError::new(field, e.to_string())))
        .ok()
}

fn check_window(field: &str, w: [u64; 2], errs: &mut Vec<FieldError>) {
    if w[0] > w[1] {
        errs.push(FieldError::new(field, format!("start {} is after end {}", w[0], w[1])));
    }
}

impl RawScenario {
    fn build(self, errs: &mut Vec<FieldError>) -> Option<ScenarioConfig> {
        let n_errs = errs.len();
        let bounds = rect("scenario.bounds", self.bounds, errs);
        let buildings: Vec<Option<Rect>> = self
            .buildings
            .iter()
            .enumerate()
            .map(|(i, b)| rect(&format!("scenario.buildings[{i}]"), *b, errs))
            .collect();
        let poses: Vec<Option<Pose>> = self
            .se_poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Pose::new(p.x, p.y, p.theta_deg.to_radians())
                    .map_err(|e| errs.push(FieldError::new(format!("scenario.se_poses[{i}]"), e.to_string())))
                    .ok()
            })
            .collect();
        let noise = NoiseModel::from_degrees(self.sigma_r, self.sigma_beta_deg)
            .map_err(|e| errs.push(FieldError::new("scenario.sigma_r/sigma_beta_deg", e.to_string())))
            .ok();
        let targets = match self.tracks {
            Some(tracks) => TargetLayout::Explicit(
                tracks
                    .into_iter()
                    .map(|t| TargetTrack {
                        id: TargetId(t.id),
                        start: Point::new(t.start[0], t.start[1]),
                        velocity: t.velocity,
                        axis: if t.velocity[0].abs() >= t.velocity[1].abs() {
                            Axis::Horizontal
                        } else {
                            Axis::Vertical
                        },
                    })
                    .collect(),
            ),
            None => TargetLayout::Lanes {
                count: self.n_targets,
                speed: self.target_speed,
            },
        };
        if errs.len() > n_errs {
            return None;
        }
        let bounds = bounds?;
        let map = match StaticMap::new(bounds, buildings.into_iter().flatten().collect()) {
            Ok(m) => m,
            Err(e) => {
                errs.push(FieldError::new("scenario.buildings", e.to_string()));
                return None;
            }
        };
        let cfg = ScenarioConfig {
            map,
            se_poses: poses.into_iter().flatten().collect(),
            noise: noise?,
            p_det: self.p_det,
            targets,
            clutter: ClutterModel {
                lambda_fa: self.clutter.lambda_fa,
                edge_fraction: self.clutter.edge_fraction,
                edge_jitter_sigma: self.clutter.edge_jitter_sigma,
                measurement_noise: self.clutter.measurement_noise,
            },
            t_steps: self.t_steps,
            seed: self.seed,
        };
        if let Err(e) = cfg.validate() {
            errs.extend(e.0.into_iter().map(|f| FieldError::new(format!("scenario.{}", f.field), f.reason)));
            return None;
        }
        Some(cfg)
    }
}

impl RawConfig {
    fn build(self, base: &Path) -> Result<Config, ConfigError> {
        let mut errs = Vec::new();
        let t_steps = u64::from(self.scenario.t_steps);
        let scenario = self.scenario.build(&mut errs);

        if self.g_values.is_empty() {
            errs.push(FieldError::new("g_values", "must not be empty"));
        }
        if let Some(g) = self.g_values.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            errs.push(FieldError::new("g_values", format!("margins must be finite and >= 0, got {g}")));
        }
        if self.g_det_values.is_empty() {
            errs.push(FieldError::new("g_det_values", "must not be empty"));
        }
        if let Some(g) = self.g_det_values.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
            errs.push(FieldError::new("g_det_values", format!("gates must be finite and > 0, got {g}")));
        }
        if self.n_realizations < 1 || self.n_realizations > i64::from(u32::MAX) {
            errs.push(FieldError::new(
                "n_realizations",
                format!("must be an integer >= 1, got {}", self.n_realizations),
            ));
        }

        let d = self.demo;
        if !(d.g >= 0.0 && d.g.is_finite()) {
            errs.push(FieldError::new("demo.g", format!("must be finite and >= 0, got {}", d.g)));
        }
        if !(d.g_det > 0.0 && d.g_det.is_finite()) {
            errs.push(FieldError::new("demo.g_det", format!("must be finite and > 0, got {}", d.g_det)));
        }
        let kpi = Kpi {
            pd_min: d.pd_min,
            fa_max: d.fa_max,
        };
        if let Err(e) = kpi.validate() {
            errs.extend(e.into_iter().map(|f| {
                let key = f.field.trim_start_matches("kpi.").to_string();
                FieldError::new(format!("demo.{key}"), f.reason)
            }));
        }
        let window = d.window.unwrap_or([0, t_steps.saturating_sub(1)]);
        check_window("demo.window", window, &mut errs);
        let survey_window = if d.seed_survey {
            let w = d.survey_window.unwrap_or([window[0], window[0] + (window[1] - window[0]) / 2]);
            check_window("demo.survey_window", w, &mut errs);
            Some(w)
        } else {
            None
        };

        let mut prohibited = Vec::new();
        for (i, a) in self.policy.prohibited_areas.iter().enumerate() {
            prohibited.extend(rect(&format!("policy.prohibited_areas[{i}]"), *a, &mut errs));
        }

        if !errs.is_empty() {
            return Err(ConfigError::Invalid(errs));
        }
        let scenario = scenario.expect("no errors recorded");
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        Ok(Config {
            sweep: SweepConfig {
                scenario,
                g_values: self.g_values,
                g_det_values: self.g_det_values,
                n_realizations: self.n_realizations as u32,
                baseline: self.baseline,
            },
            demo: DemoConfig {
                g: d.g,
                g_det: d.g_det,
                realization: d.realization,
                consent: d.consent,
                max_age: d.max_age,
                kpi,
                requester: d.requester,
                target_type: d.target_type,
                conditions: d.conditions,
                purpose: d.purpose,
                window,
                survey_window,
                store: d.store.map(resolve),
                kpi_table: d.kpi_table.map(resolve),
                archive_max_age: d.archive_max_age,
            },
            policy: PolicyRules {
                prohibited_areas: prohibited,
                charging_rules: self.policy.charging_rules,
                revocation_rules: self.policy.revocation_rules,
            },
        })
    }
}

fn parse_text(text: &str, origin: &Path, base: &Path) -> Result<Config, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    raw.build(base)
}

/// Parses and validates a config held in memory. Relative paths are
/// resolved against `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<Config, ConfigError> {
    parse_text(text, base, base)
}

pub fn parse_config(path: &Path) -> Result<Config, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_text(&text, path, path.parent().unwrap_or(Path::new(".")))
}

impl Default for Config {
    fn default() -> Self {
        parse_config_str("", Path::new(".")).expect("defaults are valid")
    }
}
