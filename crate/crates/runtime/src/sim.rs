//! The simulation loop: one owner advances truth, control, sensing,
//! estimation and navigation in a fixed order on a fixed-step clock.

use std::path::PathBuf;
use std::sync::Arc;

use dronenav_core::control::Twist;
use dronenav_core::flight::FlightStack;
use dronenav_core::geom::{
    angle_diff, Pose2D, Transform2D, TransformTree, BASE_FRAME, LIDAR_FRAME, MAP_FRAME, ODOM_FRAME,
};
use dronenav_core::localize::{Amcl, LocalizeError};
use dronenav_core::mapping::{
    bresenham, occupied_iou, rasterize_surfaces, slam_tick, Occupancy, OccupancyGrid, SlamState,
};
use dronenav_core::nav::{build_costmap, Costmap, NavState, NavStatus, Navigator, Path};
use dronenav_core::sensing::{laser_odometry, raycast_scan_at, LaserScan, MatchStatus, OdometryDelta};
use dronenav_core::vehicle::{check_collision, RigidBodyState, VehicleError};
use dronenav_core::world::WorldModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bus::{TopicBus, TransformUpdate};
use crate::clock::SimClock;
use crate::mapio::{self, MapError};
use crate::protocol::Command;
use crate::scenario::{Mode, Scenario};

/// Scan endpoints closer than this many cells to a mapped obstacle are
/// explained by the map and not marked as new obstacles.
const LIVE_MARK_MARGIN_CELLS: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("NAVIGATION needs a map: set map_path or save_map first")]
    NoMap,
    #[error(transparent)]
    Map(#[from] MapError),
    #[error("localization: {0}")]
    Localize(#[from] LocalizeError),
    #[error("{0}")]
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "state", content = "reason", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SimStatus {
    Running,
    Crashed(String),
}

impl SimStatus {
    pub fn label(&self) -> String {
        match self {
            SimStatus::Running => "RUNNING".into(),
            SimStatus::Crashed(r) => format!("CRASHED: {r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSnapshot {
    pub t: f64,
    pub steps: u64,
    pub mode: Mode,
    pub truth: RigidBodyState,
    pub estimate: Option<Pose2D>,
    pub twist: Twist,
    pub airborne: bool,
    pub collisions: u32,
    pub nav: NavStatus,
    pub status: SimStatus,
    pub hash: String,
}

/// Localization error at one sensor tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub t: f64,
    pub xy: f64,
    pub yaw: f64,
}

impl PoseError {
    pub fn between(t: f64, est: &Pose2D, truth: &Pose2D) -> Self {
        Self {
            t,
            xy: est.distance(truth),
            yaw: angle_diff(est.theta, truth.theta).abs(),
        }
    }
}

/// Static map plus obstacles seen since, and the costmap built from both.
struct NavWorld {
    map: Arc<OccupancyGrid>,
    /// Distance from each cell to the nearest mapped obstacle.
    map_distance: Vec<f64>,
    live: Vec<bool>,
    costmap: Arc<Costmap>,
}

impl NavWorld {
    fn new(map: OccupancyGrid, scenario: &Scenario) -> Self {
        let costmap = build_costmap(&map, &scenario.nav.costmap);
        let map_distance = costmap.distance.clone();
        let live = vec![false; map.geometry.len()];
        Self {
            map: Arc::new(map),
            map_distance,
            live,
            costmap: Arc::new(costmap),
        }
    }

    /// Clears cells the beams passed through and marks unexplained
    /// endpoints. Returns whether the layer changed.
    fn observe(&mut self, sensor: &Pose2D, scan: &LaserScan) -> bool {
        let g = &self.map.geometry;
        let origin = g.cell_of((sensor.x, sensor.y));
        let margin = LIVE_MARK_MARGIN_CELLS * g.resolution;
        let mut next = self.live.clone();
        let mut marks = Vec::new();
        for (i, r) in scan.ranges.iter().enumerate() {
            let a = sensor.theta + scan.spec.beam_angle(i);
            let reach = if r.is_finite() { *r } else { scan.spec.range_max };
            let end = (sensor.x + reach * a.cos(), sensor.y + reach * a.sin());
            let end_cell = g.cell_of(end);
            for c in bresenham(origin, end_cell) {
                if c == end_cell {
                    break;
                }
                if let Some(k) = g.index(c) {
                    next[k] = false;
                }
            }
            if r.is_finite() {
                if let Some(k) = g.index(end_cell) {
                    if self.map_distance[k] > margin {
                        marks.push(k);
                    }
                }
            }
        }
        for k in marks {
            next[k] = true;
        }
        if next == self.live {
            return false;
        }
        self.live = next;
        true
    }

    fn rebuild(&mut self, scenario: &Scenario) {
        let mut grid = (*self.map).clone();
        for (k, marked) in self.live.iter().enumerate() {
            if *marked {
                grid.cells[k] = Occupancy::Occupied;
            }
        }
        self.costmap = Arc::new(build_costmap(&grid, &scenario.nav.costmap));
    }
}

pub struct Sim {
    pub scenario: Scenario,
    /// Ground truth; scripts may swap it to move obstacles.
    pub world: WorldModel,
    pub clock: SimClock,
    pub flight: FlightStack,
    pub state: RigidBodyState,
    pub mode: Mode,
    pub bus: TopicBus,
    pub tf: TransformTree,
    pub slam: Option<SlamState>,
    pub amcl: Option<Amcl>,
    pub navigator: Navigator,
    pub status: SimStatus,
    pub collisions: u32,
    /// Odometry-only pose in the world frame, restarted on respawn.
    pub dead_reckoning: Pose2D,
    pub localization_errors: Vec<PoseError>,
    pub last_saved_map: Option<PathBuf>,
    /// Stem used by `save_map` without a path.
    pub default_map_stem: PathBuf,
    nav_world: Option<NavWorld>,
    mount: Transform2D,
    teleop: Twist,
    nav_cmd: Twist,
    odom_pose: Pose2D,
    prev_scan: Option<LaserScan>,
    last_delta: Transform2D,
    in_contact: bool,
    sensor_ticks: u64,
    last_path: Option<Arc<Path>>,
    hasher: Sha256,
}

fn hash_f64s(h: &mut Sha256, xs: &[f64]) {
    for x in xs {
        h.update(x.to_le_bytes());
    }
}

fn hash_pose(h: &mut Sha256, p: &Pose2D) {
    hash_f64s(h, &[p.x, p.y, p.theta]);
}

impl Sim {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        let flight = FlightStack::new(
            scenario.vehicle.clone(),
            scenario.controllers.clone(),
            scenario.clock.physics_dt,
            scenario.clock.control_div,
        );
        let default_map_stem = scenario.map_path.clone().unwrap_or_else(|| PathBuf::from("map"));
        let mut sim = Self {
            world: scenario.world.clone(),
            clock: SimClock::new(scenario.clock),
            flight,
            state: RigidBodyState::at_pose(scenario.start, 0.0),
            mode: scenario.mode,
            bus: TopicBus::default(),
            tf: TransformTree::new(),
            slam: None,
            amcl: None,
            navigator: Navigator::new(scenario.nav.clone()),
            status: SimStatus::Running,
            collisions: 0,
            dead_reckoning: scenario.start,
            localization_errors: Vec::new(),
            last_saved_map: None,
            default_map_stem,
            nav_world: None,
            mount: Transform2D::identity(),
            teleop: Twist::zero(),
            nav_cmd: Twist::zero(),
            odom_pose: Pose2D::origin(),
            prev_scan: None,
            last_delta: Transform2D::identity(),
            in_contact: false,
            sensor_ticks: 0,
            last_path: None,
            hasher: Sha256::new(),
            scenario,
        };
        sim.hasher.update(sim.scenario.seed.to_le_bytes());
        sim.enter_mode(sim.mode)?;
        Ok(sim)
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn costmap(&self) -> Option<&Arc<Costmap>> {
        self.nav_world.as_ref().map(|n| &n.costmap)
    }

    pub fn static_map(&self) -> Option<&Arc<OccupancyGrid>> {
        self.nav_world.as_ref().map(|n| &n.map)
    }

    /// Current grid for display: the SLAM map while mapping, else the
    /// loaded map.
    pub fn display_grid(&self) -> Option<Arc<OccupancyGrid>> {
        match &self.slam {
            Some(s) => Some(Arc::new(s.occupancy())),
            None => self.static_map().cloned(),
        }
    }

    /// The pose estimate driving the stack in the current mode.
    pub fn estimate(&self) -> Option<Pose2D> {
        match self.mode {
            Mode::Mapping => self.slam.as_ref().map(|s| s.pose),
            Mode::Navigation => self.amcl.as_ref().map(|a| a.estimate().0),
        }
    }

    pub fn truth_pose(&self) -> Pose2D {
        self.state.pose2d()
    }

    /// The twist the vehicle is following: nav output while a goal is being
    /// pursued in NAVIGATION, teleop otherwise.
    pub fn arbitrated_twist(&self) -> Twist {
        match self.mode {
            Mode::Mapping => self.teleop,
            Mode::Navigation => match self.navigator.state() {
                NavState::Planning | NavState::Following | NavState::Recovering => self.nav_cmd,
                _ => self.teleop,
            },
        }
    }

    pub fn hash(&self) -> String {
        self.hasher
            .clone()
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn snapshot(&self) -> SimSnapshot {
        SimSnapshot {
            t: self.now(),
            steps: self.clock.steps,
            mode: self.mode,
            truth: self.state,
            estimate: self.estimate(),
            twist: self.arbitrated_twist(),
            airborne: self.flight.is_airborne(),
            collisions: self.collisions,
            nav: self.navigator.status.clone(),
            status: self.status.clone(),
            hash: self.hash(),
        }
    }

    /// Advances `n` physics steps.
    pub fn step_n(&mut self, n: u64) -> SimSnapshot {
        for _ in 0..n {
            self.step();
        }
        self.snapshot()
    }

    pub fn step(&mut self) {
        if self.status != SimStatus::Running {
            return;
        }
        let cmd = self.arbitrated_twist();
        if self.clock.is_control_tick() {
            self.bus.twist_cmd.publish(cmd);
        }
        match self.flight.step(&self.state, &cmd) {
            Ok(s) => self.state = s,
            Err(e) => {
                self.crash(e);
                return;
            }
        }
        let contact = check_collision(&self.state, &self.world, &self.scenario.vehicle).in_contact();
        if contact && !self.in_contact {
            self.collisions += 1;
        }
        self.in_contact = contact;
        let s = &self.state;
        hash_f64s(&mut self.hasher, &s.position);
        hash_f64s(&mut self.hasher, &s.velocity);
        hash_f64s(&mut self.hasher, &s.attitude);
        hash_f64s(&mut self.hasher, &s.body_rates);
        if self.clock.is_sensor_tick() {
            self.sensor_tick();
        }
        self.bus.truth_state.publish(self.state);
        self.clock.advance();
    }

    fn crash(&mut self, e: VehicleError) {
        let reason = e.to_string();
        self.hasher.update(reason.as_bytes());
        self.status = SimStatus::Crashed(reason);
        self.teleop = Twist::zero();
        self.nav_cmd = Twist::zero();
    }

    fn scan_seed(&self) -> u64 {
        self.scenario
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.sensor_ticks)
    }

    fn sensor_tick(&mut self) {
        self.sensor_ticks += 1;
        let now = self.now();
        let truth = self.truth_pose();
        let sensor_truth = truth.compose(&self.mount);
        let scan = match raycast_scan_at(&self.world, &sensor_truth, &self.scenario.lidar, self.scan_seed(), now) {
            Ok(s) => s,
            Err(_) => return,
        };
        let delta = match &self.prev_scan {
            None => OdometryDelta::exact(Transform2D::identity()),
            Some(prev) => match laser_odometry(prev, &scan, &self.last_delta) {
                Ok(d) => d.in_body_frame(&self.mount),
                Err(_) => OdometryDelta {
                    status: MatchStatus::Degraded,
                    ..OdometryDelta::exact(Transform2D::identity())
                },
            },
        };
        self.last_delta = delta.delta;
        self.odom_pose = self.odom_pose.compose(&delta.delta);
        self.dead_reckoning = self.dead_reckoning.compose(&delta.delta);
        hash_f64s(&mut self.hasher, &scan.ranges);
        let estimate = match self.mode {
            Mode::Mapping => self.slam_step(&delta, &scan),
            Mode::Navigation => self.nav_step(now, &delta, &scan),
        };
        if let Some(p) = estimate {
            hash_pose(&mut self.hasher, &p);
            self.localization_errors.push(PoseError::between(now, &p, &truth));
        }
        let s = &self.nav_cmd;
        hash_f64s(&mut self.hasher, &[s.linear.x, s.angular.z]);
        self.publish_tf(now);
        self.bus.scan.publish(Arc::new(scan.clone()));
        self.prev_scan = Some(scan);
    }

    fn slam_step(&mut self, delta: &OdometryDelta, scan: &LaserScan) -> Option<Pose2D> {
        let slam = self.slam.as_mut()?;
        let tick = slam_tick(slam, delta, scan);
        self.bus.slam_pose.publish(tick.map_pose);
        self.bus.grid_snapshot.publish(Arc::new(slam.occupancy()));
        Some(tick.map_pose)
    }

    fn nav_step(&mut self, now: f64, delta: &OdometryDelta, scan: &LaserScan) -> Option<Pose2D> {
        let amcl = self.amcl.as_mut()?;
        let pose = amcl.tick(delta, scan).pose;
        self.bus.amcl_pose.publish(pose);
        let nw = self.nav_world.as_mut()?;
        if nw.observe(&pose.compose(&self.mount), scan) {
            nw.rebuild(&self.scenario);
            self.bus.costmap_snapshot.publish(nw.costmap.clone());
        }
        if self.flight.is_airborne() {
            let before = self.navigator.status.clone();
            self.nav_cmd = self.navigator.tick(now, &pose, &nw.costmap);
            if self.navigator.status != before {
                self.bus.nav_status.publish(self.navigator.status.clone());
            }
            self.hasher.update([self.navigator.state() as u8]);
            self.publish_path();
        }
        Some(pose)
    }

    fn publish_path(&mut self) {
        let current = self.navigator.path.as_ref();
        let changed = match (current, &self.last_path) {
            (Some(p), Some(last)) => p.cells != last.cells,
            (Some(_), None) => true,
            _ => false,
        };
        if changed {
            let p = Arc::new(current.unwrap().clone());
            self.hasher.update(p.cost.straight.to_le_bytes());
            self.hasher.update(p.cost.diagonal.to_le_bytes());
            self.bus.path.publish(p.clone());
            self.last_path = Some(p);
        } else if current.is_none() {
            self.last_path = None;
        }
    }

    fn publish_tf(&mut self, now: f64) {
        let base = self.odom_pose.as_transform();
        let map_to_odom = match self.estimate() {
            Some(est) => est.as_transform().compose(&base.inverse()),
            None => self.scenario.start.as_transform(),
        };
        let edges = [
            (MAP_FRAME, ODOM_FRAME, map_to_odom),
            (ODOM_FRAME, BASE_FRAME, base),
            (BASE_FRAME, LIDAR_FRAME, self.mount),
        ];
        for (parent, child, t) in edges {
            if self.tf.set_transform(parent, child, t, now).is_ok() {
                self.bus.transform_updates.publish(TransformUpdate {
                    parent,
                    child,
                    transform: t,
                    stamp: now,
                });
            }
        }
    }

    /// Puts the vehicle back on the ground at the start pose and restarts
    /// the estimator of `mode`. Maps loaded for NAVIGATION are kept.
    fn enter_mode(&mut self, mode: Mode) -> Result<(), SimError> {
        let start = self.scenario.start;
        let mut nav_world = None;
        let mut amcl = None;
        let mut slam = None;
        match mode {
            Mode::Mapping => {
                slam = Some(SlamState::new(self.scenario.slam.clone(), start, self.mount));
            }
            Mode::Navigation => {
                let map = match (&self.nav_world, &self.last_saved_map, &self.scenario.map_path) {
                    (_, Some(p), _) | (None, None, Some(p)) => mapio::load_map(p)?,
                    (Some(nw), None, _) => (*nw.map).clone(),
                    (None, None, None) => return Err(SimError::NoMap),
                };
                amcl = Some(Amcl::new(
                    self.scenario.amcl.clone(),
                    &map,
                    self.mount,
                    &start,
                    self.scenario.seed ^ 0xA3C1,
                )?);
                nav_world = Some(NavWorld::new(map, &self.scenario));
            }
        }
        self.mode = mode;
        self.slam = slam;
        self.amcl = amcl;
        self.nav_world = nav_world;
        self.state = RigidBodyState::at_pose(start, 0.0);
        self.state.time = self.now();
        self.flight.reset();
        self.navigator = Navigator::new(self.scenario.nav.clone());
        self.teleop = Twist::zero();
        self.nav_cmd = Twist::zero();
        self.odom_pose = Pose2D::origin();
        self.dead_reckoning = start;
        self.prev_scan = None;
        self.last_delta = Transform2D::identity();
        self.in_contact = false;
        self.last_path = None;
        self.status = SimStatus::Running;
        self.hasher.update([mode as u8]);
        if let Some(nw) = &self.nav_world {
            self.bus.costmap_snapshot.publish(nw.costmap.clone());
            self.bus.grid_snapshot.publish(nw.map.clone());
        }
        self.bus.nav_status.publish(self.navigator.status.clone());
        Ok(())
    }

    /// Applies an operator command; the returned string is the ack detail.
    pub fn apply(&mut self, cmd: &Command) -> Result<String, SimError> {
        let detail = match cmd {
            Command::TeleopTwist { linear, angular } => {
                let t = Twist {
                    linear: *linear,
                    angular: *angular,
                };
                if !t.is_finite() {
                    return Err(SimError::Rejected("teleop twist must be finite".into()));
                }
                self.teleop = t;
                String::new()
            }
            Command::SetGoal { x, y, theta } => {
                if self.mode != Mode::Navigation {
                    return Err(SimError::Rejected("set_goal requires NAVIGATION mode".into()));
                }
                if ![x, y, theta].iter().all(|v| v.is_finite()) {
                    return Err(SimError::Rejected("goal must be finite".into()));
                }
                self.navigator.set_goal(Pose2D::new(*x, *y, *theta));
                self.bus.nav_status.publish(self.navigator.status.clone());
                format!("goal ({x:.2}, {y:.2}, {theta:.2})")
            }
            Command::SetInitialPose { x, y, theta } => {
                let Some(amcl) = self.amcl.as_mut() else {
                    return Err(SimError::Rejected("set_initial_pose requires NAVIGATION mode".into()));
                };
                amcl.set_initial_pose(&Pose2D::new(*x, *y, *theta))?;
                String::new()
            }
            Command::SetMode { mode } => {
                self.enter_mode(*mode)?;
                format!("{mode:?} at start pose")
            }
            Command::SaveMap { path } => {
                let Some(slam) = &self.slam else {
                    return Err(SimError::Rejected("save_map requires MAPPING mode".into()));
                };
                if !slam.grid.has_occupied_mass() {
                    return Err(SimError::Rejected("map is empty".into()));
                }
                let stem = path.as_ref().map(PathBuf::from).unwrap_or_else(|| self.default_map_stem.clone());
                let yaml = mapio::save_map(&slam.occupancy(), &stem)?;
                self.last_saved_map = Some(yaml.clone());
                yaml.display().to_string()
            }
            Command::Reset => {
                self.enter_mode(self.mode)?;
                String::new()
            }
            Command::CancelGoal => {
                self.navigator.cancel();
                self.nav_cmd = Twist::zero();
                self.bus.nav_status.publish(self.navigator.status.clone());
                String::new()
            }
        };
        self.hasher.update(serde_json::to_vec(cmd).expect("commands serialize"));
        Ok(detail)
    }

    /// Occupied-cell IoU of the current SLAM map against the true surfaces.
    pub fn map_iou(&self) -> Option<f64> {
        let occ = self.slam.as_ref()?.occupancy();
        let truth = rasterize_surfaces(&self.world, &occ.geometry);
        Some(occupied_iou(&occ, &truth))
    }
}
