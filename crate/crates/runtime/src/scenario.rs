//! Scenario files: one YAML document holding the world, the vehicle and
//! every parameter block. Omitted blocks take their defaults; all problems
//! are collected and reported together with their key paths.

use std::fmt;
use std::path::{Path, PathBuf};

use dronenav_core::control::ControllerConfig;
use dronenav_core::geom::Pose2D;
use dronenav_core::localize::LocalizationConfig;
use dronenav_core::mapping::MappingConfig;
use dronenav_core::nav::NavConfig;
use dronenav_core::sensing::LidarSpec;
use dronenav_core::vehicle::VehicleParams;
use dronenav_core::world::WorldModel;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use crate::clock::ClockConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Mapping,
    Navigation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub world: WorldModel,
    pub vehicle: VehicleParams,
    pub lidar: LidarSpec,
    pub controllers: ControllerConfig,
    pub slam: MappingConfig,
    pub amcl: LocalizationConfig,
    pub nav: NavConfig,
    pub clock: ClockConfig,
    pub seed: u64,
    pub mode: Mode,
    /// Map stem (`<stem>.yaml` + its image); relative paths resolve against
    /// the scenario file's directory.
    pub map_path: Option<PathBuf>,
    /// Spawn pose on the ground; the map frame coincides with the world frame
    /// at this pose.
    pub start: Pose2D,
}

impl Scenario {
    /// Defaults for everything except the world.
    pub fn with_world(world: WorldModel) -> Self {
        let vehicle = VehicleParams::default();
        let mut nav = NavConfig::default();
        nav.costmap.robot_radius = vehicle.body_radius;
        Self {
            world,
            vehicle,
            lidar: LidarSpec::default(),
            controllers: ControllerConfig::default(),
            slam: MappingConfig::default(),
            amcl: LocalizationConfig::default(),
            nav,
            clock: ClockConfig::default(),
            seed: 0,
            mode: Mode::Mapping,
            map_path: None,
            start: Pose2D::new(2.5, 2.5, 0.0),
        }
    }

    pub fn sample() -> Self {
        Self::with_world(WorldModel::sample())
    }

    /// Semantic problems across all blocks, as (key path, message).
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut add = |block: &str, items: Vec<(&'static str, String)>| {
            out.extend(items.into_iter().map(|(k, m)| (format!("{block}.{k}"), m)));
        };
        add("vehicle", self.vehicle.problems());
        add("lidar", self.lidar.problems());
        add("slam", self.slam.problems());
        add("amcl", self.amcl.problems());
        add("clock", self.clock.problems());
        for p in self.world.problems() {
            out.push(("world".to_string(), p));
        }
        for (k, m) in self.controllers.problems() {
            out.push((format!("controllers.{k}"), m));
        }
        for (k, m) in self.nav.problems() {
            out.push((format!("nav.{k}"), m));
        }
        if self.mode == Mode::Navigation && self.map_path.is_none() {
            out.push(("map_path".into(), "required in NAVIGATION mode".into()));
        }
        let s = (self.start.x, self.start.y);
        if !self.world.inside_bounds(s) || self.world.clearance(s) <= self.vehicle.body_radius {
            out.push((
                "start".into(),
                format!("must lie inside the room with more than body_radius ({}) clearance", self.vehicle.body_radius),
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationError {
    pub problems: Vec<(String, String)>,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} problem(s):", self.problems.len())?;
        for (k, m) in &self.problems {
            write!(f, "\n  {k}: {m}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid scenario: {0}")]
    Invalid(#[from] ValidationError),
}

const BLOCKS: [&str; 12] = [
    "world",
    "vehicle",
    "lidar",
    "controllers",
    "slam",
    "amcl",
    "nav",
    "clock",
    "seed",
    "mode",
    "map_path",
    "start",
];

fn block<T: DeserializeOwned>(root: &Value, key: &str, problems: &mut Vec<(String, String)>) -> Option<T> {
    let v = root.get(key)?;
    match serde_path_to_error::deserialize::<_, T>(v.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            let inner = e.path().to_string();
            let path = if inner == "." || inner.is_empty() {
                key.to_string()
            } else {
                format!("{key}.{inner}")
            };
            problems.push((path, e.into_inner().to_string()));
            None
        }
    }
}

/// Parses and validates scenario YAML text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ValidationError> {
    let root: Value = serde_yaml::from_str(text).map_err(|e| ValidationError {
        problems: vec![("<document>".into(), e.to_string())],
    })?;
    let mut problems = Vec::new();
    let Some(map) = root.as_mapping() else {
        return Err(ValidationError {
            problems: vec![("<document>".into(), "top level must be a mapping".into())],
        });
    };
    for k in map.keys() {
        let name = k.as_str().unwrap_or("<non-string key>");
        if !BLOCKS.contains(&name) {
            problems.push((name.to_string(), format!("unknown key; expected one of {}", BLOCKS.join(", "))));
        }
    }
    let world = match block::<WorldModel>(&root, "world", &mut problems) {
        Some(w) => w,
        None => {
            if root.get("world").is_none() {
                problems.push(("world".into(), "required block is missing".into()));
            }
            WorldModel::sample()
        }
    };
    let mut s = Scenario::with_world(world);
    if let Some(v) = block(&root, "vehicle", &mut problems) {
        s.vehicle = v;
    }
    if let Some(v) = block(&root, "lidar", &mut problems) {
        s.lidar = v;
    }
    if let Some(v) = block(&root, "controllers", &mut problems) {
        s.controllers = v;
    }
    if let Some(v) = block(&root, "slam", &mut problems) {
        s.slam = v;
    }
    if let Some(v) = block(&root, "amcl", &mut problems) {
        s.amcl = v;
    }
    if let Some(v) = block(&root, "nav", &mut problems) {
        s.nav = v;
    }
    let radius_given = root
        .get("nav")
        .and_then(|n| n.get("costmap"))
        .and_then(|c| c.get("robot_radius"))
        .is_some();
    if !radius_given {
        s.nav.costmap.robot_radius = s.vehicle.body_radius;
    }
    if let Some(v) = block(&root, "clock", &mut problems) {
        s.clock = v;
    }
    if let Some(v) = block(&root, "seed", &mut problems) {
        s.seed = v;
    }
    if let Some(v) = block(&root, "mode", &mut problems) {
        s.mode = v;
    }
    if let Some(v) = block(&root, "map_path", &mut problems) {
        s.map_path = v;
    }
    if let Some(v) = block(&root, "start", &mut problems) {
        s.start = v;
    }
    problems.extend(s.problems());
    if problems.is_empty() {
        Ok(s)
    } else {
        Err(ValidationError { problems })
    }
}

/// Loads a scenario file; a relative `map_path` is resolved against the
/// file's directory.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut s = parse_scenario(&text)?;
    if let (Some(m), Some(dir)) = (&s.map_path, path.parent()) {
        if m.is_relative() {
            s.map_path = Some(dir.join(m));
        }
    }
    Ok(s)
}
