//! JSON wire protocol. Every message is an object with a `type` tag and a
//! protocol version `v`; grids travel as run-length-encoded changes keyed by
//! a monotonically increasing version.

use dronenav_core::control::{Twist, Vec3};
use dronenav_core::geom::Pose2D;
use dronenav_core::mapping::{GridGeometry, Occupancy, OccupancyGrid};
use dronenav_core::nav::NavState;
use dronenav_core::world::WorldModel;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::scenario::Mode;

pub const PROTOCOL_VERSION: u32 = 1;

/// Operator commands, from the cockpit, the CLI or a script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    TeleopTwist {
        #[serde(default)]
        linear: Vec3,
        #[serde(default)]
        angular: Vec3,
    },
    SetGoal {
        x: f64,
        y: f64,
        #[serde(default)]
        theta: f64,
    },
    SetInitialPose {
        x: f64,
        y: f64,
        #[serde(default)]
        theta: f64,
    },
    SetMode {
        mode: Mode,
    },
    SaveMap {
        #[serde(default)]
        path: Option<String>,
    },
    Reset,
    CancelGoal,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TeleopTwist { .. } => "teleop_twist",
            Command::SetGoal { .. } => "set_goal",
            Command::SetInitialPose { .. } => "set_initial_pose",
            Command::SetMode { .. } => "set_mode",
            Command::SaveMap { .. } => "save_map",
            Command::Reset => "reset",
            Command::CancelGoal => "cancel_goal",
        }
    }

    pub fn teleop(v: f64, omega: f64) -> Self {
        let t = Twist::planar(v, omega);
        Command::TeleopTwist {
            linear: t.linear,
            angular: t.angular,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Incoming {
    pub id: Option<Value>,
    pub command: Command,
}

/// Parses one text frame. Errors are human-readable and start with
/// `parse error` for malformed JSON.
pub fn parse_command(text: &str) -> Result<Incoming, (Option<Value>, String)> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| (None, format!("parse error: {e}")))?;
    let Some(obj) = value.as_object_mut() else {
        return Err((None, "parse error: message must be a JSON object".into()));
    };
    let id = obj.remove("id");
    if let Some(v) = obj.remove("v") {
        if v.as_u64() != Some(PROTOCOL_VERSION as u64) {
            return Err((id, format!("unsupported protocol version {v}; server speaks {PROTOCOL_VERSION}")));
        }
    }
    match serde_json::from_value::<Command>(value) {
        Ok(command) => Ok(Incoming { id, command }),
        Err(e) => Err((id, format!("invalid command: {e}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    pub origin: [f64; 3],
}

impl From<&GridGeometry> for GridInfo {
    fn from(g: &GridGeometry) -> Self {
        Self {
            width: g.width,
            height: g.height,
            resolution: g.resolution,
            origin: [g.origin.x, g.origin.y, g.origin.theta],
        }
    }
}

/// `[start, length, value]`: cells `start..start+length` (row-major, row 0
/// at the origin) all take `value`.
pub type Run = [i64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEdge {
    pub parent: String,
    pub child: String,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        server: String,
        mode: Mode,
        world: WorldModel,
    },
    Snapshot {
        t: f64,
        mode: Mode,
        truth: Pose2D,
        z: f64,
        velocity: [f64; 3],
        estimate: Option<Pose2D>,
        twist: Twist,
        airborne: bool,
        collisions: u32,
        status: String,
    },
    /// Occupancy: -1 unknown, 0 free, 100 occupied. `base_version` null means
    /// the runs cover the whole grid.
    GridDelta {
        version: u64,
        base_version: Option<u64>,
        info: GridInfo,
        runs: Vec<Run>,
    },
    /// Costs 0..=254.
    CostmapDelta {
        version: u64,
        base_version: Option<u64>,
        info: GridInfo,
        runs: Vec<Run>,
    },
    Particles {
        t: f64,
        poses: Vec<[f64; 3]>,
    },
    Path {
        version: u64,
        waypoints: Vec<[f64; 3]>,
        cost: f64,
    },
    NavStatus {
        state: NavState,
        goal: Option<Pose2D>,
        diagnostics: String,
        replans: u32,
    },
    Tf {
        t: f64,
        edges: Vec<FrameEdge>,
    },
    Scan {
        t: f64,
        pose: Pose2D,
        angle_min: f64,
        angle_increment: f64,
        /// Null where a beam has no return.
        ranges: Vec<Option<f64>>,
    },
    Ack {
        command: String,
        id: Option<Value>,
        detail: String,
    },
    Error {
        id: Option<Value>,
        message: String,
    },
}

#[derive(Serialize)]
struct Envelope<'a> {
    v: u32,
    #[serde(flatten)]
    body: &'a Message,
}

impl Message {
    pub fn to_json(&self) -> String {
        serde_json::to_string(&Envelope {
            v: PROTOCOL_VERSION,
            body: self,
        })
        .expect("messages serialize")
    }
}

/// Parses an outgoing message back (clients, log replay).
pub fn parse_message(text: &str) -> Result<Message, String> {
    let mut value: Value = serde_json::from_str(text).map_err(|e| format!("parse error: {e}"))?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("v");
    }
    serde_json::from_value(value).map_err(|e| e.to_string())
}

pub fn occupancy_code(c: Occupancy) -> i64 {
    match c {
        Occupancy::Unknown => -1,
        Occupancy::Free => 0,
        Occupancy::Occupied => 100,
    }
}

/// Runs covering every cell of `new` that differs from `old` (all cells when
/// there is no base).
pub fn encode_runs(old: Option<&[i64]>, new: &[i64]) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for (i, v) in new.iter().enumerate() {
        if old.is_some_and(|o| o[i] == *v) {
            continue;
        }
        match runs.last_mut() {
            Some(r) if r[0] + r[1] == i as i64 && r[2] == *v => r[1] += 1,
            _ => runs.push([i as i64, 1, *v]),
        }
    }
    runs
}

pub fn apply_runs(cells: &mut [i64], runs: &[Run]) -> Result<(), String> {
    for r in runs {
        let (start, len) = (r[0], r[1]);
        if start < 0 || len < 0 || (start + len) as usize > cells.len() {
            return Err(format!("run {r:?} outside grid of {} cells", cells.len()));
        }
        cells[start as usize..(start + len) as usize].fill(r[2]);
    }
    Ok(())
}

/// Tracks the last broadcast raster of one layer and turns new rasters into
/// delta messages.
#[derive(Debug, Clone, Default)]
pub struct DeltaEncoder {
    version: u64,
    info: Option<GridInfo>,
    cells: Vec<i64>,
}

impl DeltaEncoder {
    pub fn version(&self) -> u64 {
        self.version
    }

    /// `(version, base_version, info, runs)` for the change to `cells`, or
    /// None when nothing changed.
    pub fn update(&mut self, info: GridInfo, cells: Vec<i64>) -> Option<(u64, Option<u64>, GridInfo, Vec<Run>)> {
        let same = self.info == Some(info);
        let runs = encode_runs(same.then_some(self.cells.as_slice()), &cells);
        if same && runs.is_empty() {
            return None;
        }
        let base = same.then_some(self.version);
        self.version += 1;
        self.info = Some(info);
        self.cells = cells;
        Some((self.version, base, info, runs))
    }

    /// The whole current raster, for clients that (re)join.
    pub fn full(&self) -> Option<(u64, Option<u64>, GridInfo, Vec<Run>)> {
        self.info
            .map(|info| (self.version, None, info, encode_runs(None, &self.cells)))
    }
}

pub fn occupancy_cells(grid: &OccupancyGrid) -> Vec<i64> {
    grid.cells.iter().map(|c| occupancy_code(*c)).collect()
}
