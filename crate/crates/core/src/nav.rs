//! Costmap inflation, cost-aware A* global planning, dynamic-window local
//! planning and the goal-following state machine.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::Twist;
use crate::geom::{angle_diff, normalize_angle, Pose2D};
use crate::mapping::{distance_field, GridGeometry, Occupancy, OccupancyGrid};

pub const LETHAL: u8 = 254;
pub const INSCRIBED: u8 = 253;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostmapParams {
    pub robot_radius: f64,
    pub inflation_radius: f64,
    /// Exponential decay rate of the inflation gradient, 1/m.
    pub cost_decay: f64,
    /// Plan through unmapped space instead of treating it as inscribed.
    pub unknown_traversable: bool,
}

impl Default for CostmapParams {
    fn default() -> Self {
        Self {
            robot_radius: 0.3,
            inflation_radius: 0.55,
            cost_decay: 3.0,
            unknown_traversable: false,
        }
    }
}

impl CostmapParams {
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.robot_radius >= 0.0 && self.robot_radius.is_finite()) {
            out.push(("robot_radius", "must be nonnegative and finite".to_string()));
        }
        if !(self.inflation_radius >= self.robot_radius && self.inflation_radius.is_finite()) {
            out.push(("inflation_radius", "must be finite and at least robot_radius".to_string()));
        }
        if !(self.cost_decay >= 0.0 && self.cost_decay.is_finite()) {
            out.push(("cost_decay", "must be nonnegative and finite".to_string()));
        }
        out
    }

    /// Cost of a cell whose center lies `d` meters from the nearest obstacle.
    pub fn cost_at_distance(&self, d: f64) -> u8 {
        // absorbs rounding in cell-count × resolution distances
        const EPS: f64 = 1e-9;
        if d <= 0.0 {
            LETHAL
        } else if d <= self.robot_radius + EPS {
            INSCRIBED
        } else if d <= self.inflation_radius + EPS {
            (252.0 * (-self.cost_decay * (d - self.robot_radius)).exp()).round() as u8
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Costmap {
    pub geometry: GridGeometry,
    pub cells: Vec<u8>,
    /// Distance in meters from each cell center to the nearest obstacle.
    pub distance: Vec<f64>,
    pub params: CostmapParams,
}

impl Costmap {
    pub fn get(&self, cell: (i64, i64)) -> Option<u8> {
        self.geometry.index(cell).map(|i| self.cells[i])
    }

    /// Cost under a map-frame point; off-map counts as lethal.
    pub fn cost_at(&self, p: (f64, f64)) -> u8 {
        self.get(self.geometry.cell_of(p)).unwrap_or(LETHAL)
    }

    pub fn clearance_at(&self, p: (f64, f64)) -> f64 {
        self.geometry
            .index(self.geometry.cell_of(p))
            .map_or(0.0, |i| self.distance[i])
    }
}

pub fn build_costmap(occ: &OccupancyGrid, params: &CostmapParams) -> Costmap {
    let marked: Vec<bool> = occ.cells.iter().map(|c| *c == Occupancy::Occupied).collect();
    let distance = distance_field(&occ.geometry, &marked);
    let cells = occ
        .cells
        .iter()
        .zip(&distance)
        .map(|(c, d)| {
            let cost = params.cost_at_distance(*d);
            if *c == Occupancy::Unknown && !params.unknown_traversable {
                cost.max(INSCRIBED)
            } else {
                cost
            }
        })
        .collect();
    Costmap {
        geometry: occ.geometry,
        cells,
        distance,
        params: params.clone(),
    }
}

/// Exact path cost `(straight + diagonal·√2) / 256` kept as the two integer
/// sums so that equal-cost paths compare equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PathCost {
    pub straight: i64,
    pub diagonal: i64,
}

impl PathCost {
    pub fn value(&self) -> f64 {
        (self.straight as f64 + self.diagonal as f64 * std::f64::consts::SQRT_2) / 256.0
    }

    pub fn step(&self, diagonal: bool, cell_cost: u8) -> Self {
        let w = 256 + cell_cost as i64;
        if diagonal {
            Self {
                diagonal: self.diagonal + w,
                ..*self
            }
        } else {
            Self {
                straight: self.straight + w,
                ..*self
            }
        }
    }
}

impl Ord for PathCost {
    fn cmp(&self, other: &Self) -> Ordering {
        // a1 + b1·√2 vs a2 + b2·√2  <=>  da vs db·√2
        let da = self.straight as i128 - other.straight as i128;
        let db = other.diagonal as i128 - self.diagonal as i128;
        match (da.signum(), db.signum()) {
            (0, 0) => Ordering::Equal,
            (a, b) if a >= 0 && b <= 0 => Ordering::Greater,
            (a, b) if a <= 0 && b >= 0 => Ordering::Less,
            (1, 1) => (da * da).cmp(&(2 * db * db)),
            _ => (2 * db * db).cmp(&(da * da)),
        }
    }
}

impl PartialOrd for PathCost {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    pub waypoints: Vec<Pose2D>,
    pub cells: Vec<(i64, i64)>,
    pub cost: PathCost,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("goal cell cost {0} is in collision")]
    GoalInCollision(u8),
    #[error("start cell cost {0} is in collision")]
    StartInCollision(u8),
    #[error("{0} lies outside the costmap")]
    OutOfMap(&'static str),
    #[error("no path: frontier exhausted after {0} expansions")]
    NoPath(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frontier {
    f: f64,
    h: f64,
    index: usize,
    g: PathCost,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then(other.h.total_cmp(&self.h))
            .then(other.index.cmp(&self.index))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NEIGHBORS: [(i64, i64); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

pub fn plan_global(cm: &Costmap, start: &Pose2D, goal: &Pose2D) -> Result<Path, PlanError> {
    let geo = &cm.geometry;
    let s = geo.cell_of((start.x, start.y));
    let g = geo.cell_of((goal.x, goal.y));
    let si = geo.index(s).ok_or(PlanError::OutOfMap("start"))?;
    let gi = geo.index(g).ok_or(PlanError::OutOfMap("goal"))?;
    if cm.cells[gi] >= INSCRIBED {
        return Err(PlanError::GoalInCollision(cm.cells[gi]));
    }
    if cm.cells[si] >= INSCRIBED {
        return Err(PlanError::StartInCollision(cm.cells[si]));
    }
    let h = |c: (i64, i64)| (((c.0 - g.0).pow(2) + (c.1 - g.1).pow(2)) as f64).sqrt();

    let n = geo.len();
    let mut best: Vec<Option<PathCost>> = vec![None; n];
    let mut parent = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    best[si] = Some(PathCost::default());
    heap.push(Frontier {
        f: h(s),
        h: h(s),
        index: si,
        g: PathCost::default(),
    });
    let mut expansions = 0;
    let mut found: Option<PathCost> = None;
    while let Some(top) = heap.pop() {
        if best[top.index] != Some(top.g) {
            continue;
        }
        if let Some(fg) = found {
            // keep draining entries that float rounding may have misordered
            if top.f > fg.value() * (1.0 + 1e-12) + 1e-9 {
                break;
            }
        }
        if top.index == gi {
            found = Some(top.g);
            continue;
        }
        expansions += 1;
        let c = geo.cell_from_index(top.index);
        for (di, dj) in NEIGHBORS {
            let nc = (c.0 + di, c.1 + dj);
            let Some(ni) = geo.index(nc) else { continue };
            let cost = cm.cells[ni];
            if cost >= INSCRIBED {
                continue;
            }
            let ng = top.g.step(di != 0 && dj != 0, cost);
            if best[ni].is_none_or(|b| ng < b) {
                best[ni] = Some(ng);
                parent[ni] = top.index;
                let hn = h(nc);
                heap.push(Frontier {
                    f: ng.value() + hn,
                    h: hn,
                    index: ni,
                    g: ng,
                });
            }
        }
    }
    let Some(cost) = found else {
        return Err(PlanError::NoPath(expansions));
    };
    let mut cells = vec![g];
    let mut at = gi;
    while at != si {
        at = parent[at];
        cells.push(geo.cell_from_index(at));
    }
    cells.reverse();
    let centers: Vec<(f64, f64)> = cells.iter().map(|c| geo.cell_center(*c)).collect();
    let waypoints = centers
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let theta = match centers.get(k + 1) {
                Some(q) => (q.1 - p.1).atan2(q.0 - p.0),
                None => goal.theta,
            };
            Pose2D::new(p.0, p.1, theta)
        })
        .collect();
    Ok(Path {
        waypoints,
        cells,
        cost,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DwaParams {
    pub v_max: f64,
    pub v_min: f64,
    pub omega_max: f64,
    pub a_v: f64,
    pub a_omega: f64,
    /// Period over which the acceleration limits bound the window.
    pub control_period: f64,
    pub sim_horizon: f64,
    pub sim_dt: f64,
    pub v_samples: usize,
    pub omega_samples: usize,
    /// Heading, clearance, velocity, path.
    pub weights: [f64; 4],
    pub lookahead: f64,
    /// Clearance beyond this distance scores the same.
    pub clearance_cap: f64,
    /// Forward speed is capped at this gain times the distance to the path end.
    pub approach_gain: f64,
}

impl Default for DwaParams {
    fn default() -> Self {
        Self {
            v_max: 0.5,
            v_min: 0.0,
            omega_max: 1.5,
            a_v: 1.0,
            a_omega: 3.0,
            control_period: 0.1,
            sim_horizon: 1.5,
            sim_dt: 0.1,
            v_samples: 11,
            omega_samples: 21,
            weights: [0.4, 0.2, 0.1, 0.3],
            lookahead: 0.5,
            clearance_cap: 0.5,
            approach_gain: 1.0,
        }
    }
}

impl DwaParams {
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.v_min >= 0.0 && self.v_min < self.v_max) {
            out.push(("v_min", "must satisfy 0 <= v_min < v_max".to_string()));
        }
        if !(self.omega_max > 0.0) {
            out.push(("omega_max", "must be positive".to_string()));
        }
        if !(self.a_v > 0.0 && self.a_omega > 0.0 && self.control_period > 0.0) {
            out.push(("a_v", "acceleration limits and control_period must be positive".to_string()));
        }
        if !(self.sim_horizon > 0.0 && self.sim_dt > 0.0 && self.sim_dt <= self.sim_horizon) {
            out.push(("sim_horizon", "must be positive and at least sim_dt".to_string()));
        }
        if self.v_samples < 3 {
            out.push(("v_samples", "must be at least 3".to_string()));
        }
        if self.omega_samples < 3 {
            out.push(("omega_samples", "must be at least 3".to_string()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            out.push(("weights", "must be nonnegative".to_string()));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalPlanError {
    #[error("every sampled arc reaches cost >= 253")]
    Blocked,
    #[error("path is empty")]
    EmptyPath,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcScore {
    pub v: f64,
    pub omega: f64,
    pub end: Pose2D,
    /// None when the arc touches cost >= 253.
    pub score: Option<f64>,
    pub clearance: f64,
}

/// Pose after driving `(v, ω)` for `t` seconds from `p`.
pub fn arc_pose(p: &Pose2D, v: f64, omega: f64, t: f64) -> Pose2D {
    if omega.abs() < 1e-9 {
        Pose2D::new(p.x + v * t * p.theta.cos(), p.y + v * t * p.theta.sin(), p.theta)
    } else {
        let th = p.theta + omega * t;
        let r = v / omega;
        Pose2D::new(
            p.x + r * (th.sin() - p.theta.sin()),
            p.y - r * (th.cos() - p.theta.cos()),
            normalize_angle(th),
        )
    }
}

fn samples(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |k| {
        if n == 1 || hi <= lo {
            lo
        } else {
            lo + (hi - lo) * k as f64 / (n - 1) as f64
        }
    })
}

fn segment_distance(p: (f64, f64), a: &Pose2D, b: &Pose2D) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.x) * dx + (p.1 - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.x - t * dx).powi(2) + (p.1 - a.y - t * dy).powi(2)).sqrt()
}

/// Cells crossed by the segment `a`–`b`, in order (grid traversal).
pub fn segment_cells(geometry: &GridGeometry, a: (f64, f64), b: (f64, f64)) -> Vec<(i64, i64)> {
    let r = geometry.resolution;
    let (la, lb) = (geometry.to_local(a), geometry.to_local(b));
    let (mut i, mut j) = geometry.cell_of(a);
    let end = geometry.cell_of(b);
    let (dx, dy) = (lb.0 - la.0, lb.1 - la.1);
    let (si, sj) = (dx.signum() as i64, dy.signum() as i64);
    let t_max = |p: f64, d: f64, c: i64| {
        if d > 0.0 {
            (((c + 1) as f64) * r - p) / d
        } else if d < 0.0 {
            ((c as f64) * r - p) / d
        } else {
            f64::INFINITY
        }
    };
    let (mut tx, mut ty) = (t_max(la.0, dx, i), t_max(la.1, dy, j));
    let (ddx, ddy) = (r / dx.abs(), r / dy.abs());
    let mut out = vec![(i, j)];
    let limit = (end.0 - i).abs() + (end.1 - j).abs();
    while (i, j) != end && out.len() <= limit as usize {
        if tx.min(ty) > 1.0 {
            break;
        }
        if tx <= ty {
            i += si;
            tx += ddx;
        } else {
            j += sj;
            ty += ddy;
        }
        out.push((i, j));
    }
    // rounding at the far end: finish with unit steps
    while (i, j) != end {
        if i != end.0 {
            i += (end.0 - i).signum();
        } else {
            j += (end.1 - j).signum();
        }
        out.push((i, j));
    }
    out
}

/// Index of the nearest waypoint and of the lookahead waypoint.
pub fn lookahead_index(path: &[Pose2D], pose: &Pose2D, lookahead: f64) -> (usize, usize) {
    let nearest = path
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.distance(pose).total_cmp(&b.1.distance(pose)))
        .map_or(0, |(i, _)| i);
    let ahead = (nearest..path.len())
        .find(|&i| path[i].distance(pose) >= lookahead)
        .unwrap_or(path.len() - 1);
    (nearest, ahead)
}

/// Every sample of the dynamic window in evaluation order (v outer, ω inner)
/// with its score.
pub fn score_arcs(
    cm: &Costmap,
    pose: &Pose2D,
    velocity: (f64, f64),
    path: &[Pose2D],
    p: &DwaParams,
) -> Result<Vec<ArcScore>, LocalPlanError> {
    if path.is_empty() {
        return Err(LocalPlanError::EmptyPath);
    }
    let (nearest, ahead) = lookahead_index(path, pose, p.lookahead);
    let target = path[ahead];
    let last = path[path.len() - 1];
    let v_cap = p.v_max.min(p.approach_gain * last.distance(pose)).max(p.v_min);
    let v_hi = v_cap.min(velocity.0 + p.a_v * p.control_period);
    let v_lo = p.v_min.max(velocity.0 - p.a_v * p.control_period).min(v_hi);
    let w_hi = p.omega_max.min(velocity.1 + p.a_omega * p.control_period);
    let w_lo = (-p.omega_max).max(velocity.1 - p.a_omega * p.control_period).min(w_hi);
    let segments_end = (ahead + 1).min(path.len() - 1);
    let steps = (p.sim_horizon / p.sim_dt).round().max(1.0) as usize;
    let [w_heading, w_clear, w_vel, w_path] = p.weights;

    let mut out = Vec::with_capacity(p.v_samples * p.omega_samples);
    for v in samples(v_lo, v_hi, p.v_samples) {
        for omega in samples(w_lo, w_hi, p.omega_samples) {
            let mut clearance = f64::INFINITY;
            let mut blocked = false;
            let mut end = *pose;
            // chords of at most a quarter cell, every crossed cell checked
            let sub = (v.abs() * p.sim_dt / (cm.geometry.resolution / 4.0)).ceil().max(1.0) as usize;
            'arc: for k in 1..=steps {
                for s in 1..=sub {
                    let t = ((k - 1) as f64 + s as f64 / sub as f64) * p.sim_dt;
                    let next = arc_pose(pose, v, omega, t);
                    for cell in segment_cells(&cm.geometry, (end.x, end.y), (next.x, next.y)) {
                        match cm.geometry.index(cell) {
                            Some(i) if cm.cells[i] < INSCRIBED => clearance = clearance.min(cm.distance[i]),
                            _ => {
                                blocked = true;
                                break 'arc;
                            }
                        }
                    }
                    end = next;
                }
            }
            let score = (!blocked).then(|| {
                let bearing = (target.y - end.y).atan2(target.x - end.x);
                let heading = 1.0 - angle_diff(bearing, end.theta).abs() / std::f64::consts::PI;
                let cross = if nearest == segments_end {
                    path[nearest].distance(&end)
                } else {
                    (nearest..segments_end)
                        .map(|i| segment_distance((end.x, end.y), &path[i], &path[i + 1]))
                        .fold(f64::INFINITY, f64::min)
                };
                w_heading * heading
                    + w_clear * clearance.min(p.clearance_cap)
                    + w_vel * v / p.v_max
                    - w_path * cross
            });
            out.push(ArcScore {
                v,
                omega,
                end,
                score,
                clearance,
            });
        }
    }
    Ok(out)
}

/// Best admissible arc as a planar twist; the first sample wins ties.
pub fn plan_local(
    cm: &Costmap,
    pose: &Pose2D,
    velocity: (f64, f64),
    path: &[Pose2D],
    p: &DwaParams,
) -> Result<Twist, LocalPlanError> {
    let arcs = score_arcs(cm, pose, velocity, path, p)?;
    let mut best: Option<(f64, &ArcScore)> = None;
    for a in &arcs {
        if let Some(s) = a.score {
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, a));
            }
        }
    }
    best.map(|(_, a)| Twist::planar(a.v, a.omega))
        .ok_or(LocalPlanError::Blocked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NavState {
    Idle,
    Planning,
    Following,
    Succeeded,
    Failed,
    Recovering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavStatus {
    pub state: NavState,
    pub active_goal: Option<Pose2D>,
    pub diagnostics: String,
}

/// The final turn aims for this fraction of the yaw tolerance so that
/// rotation lag still ends inside it.
pub const HEADING_SETTLE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavConfig {
    pub xy_tolerance: f64,
    pub yaw_tolerance: f64,
    pub blocked_timeout: f64,
    pub max_replan_failures: u32,
    /// Yaw rate of the rotate-in-place recovery.
    pub recovery_omega: f64,
    /// Wait between a failed plan and the next attempt.
    pub retry_delay: f64,
    pub costmap: CostmapParams,
    pub dwa: DwaParams,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            xy_tolerance: 0.15,
            yaw_tolerance: 10f64.to_radians(),
            blocked_timeout: 2.0,
            max_replan_failures: 3,
            recovery_omega: 0.5,
            retry_delay: 1.0,
            costmap: CostmapParams::default(),
            dwa: DwaParams::default(),
        }
    }
}

impl NavConfig {
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if !(self.xy_tolerance > 0.0) {
            out.push(("xy_tolerance".to_string(), "must be positive".to_string()));
        }
        if !(self.yaw_tolerance > 0.0) {
            out.push(("yaw_tolerance".to_string(), "must be positive".to_string()));
        }
        if !(self.blocked_timeout >= 0.0 && self.retry_delay >= 0.0) {
            out.push(("blocked_timeout".to_string(), "timeouts must be nonnegative".to_string()));
        }
        if self.max_replan_failures == 0 {
            out.push(("max_replan_failures".to_string(), "must be at least 1".to_string()));
        }
        for (k, m) in self.costmap.problems() {
            out.push((format!("costmap.{k}"), m));
        }
        for (k, m) in self.dwa.problems() {
            out.push((format!("dwa.{k}"), m));
        }
        out
    }
}

/// Goal-following state machine. Feed it the localized pose and the current
/// costmap once per control period.
#[derive(Debug, Clone)]
pub struct Navigator {
    pub config: NavConfig,
    pub status: NavStatus,
    pub path: Option<Path>,
    /// Index of the nearest waypoint reached so far.
    pub progress: usize,
    pub replans: u32,
    last_cmd: (f64, f64),
    blocked_since: Option<f64>,
    retry_at: Option<f64>,
    failures: u32,
}

impl Navigator {
    pub fn new(config: NavConfig) -> Self {
        Self {
            config,
            status: NavStatus {
                state: NavState::Idle,
                active_goal: None,
                diagnostics: String::new(),
            },
            path: None,
            progress: 0,
            replans: 0,
            last_cmd: (0.0, 0.0),
            blocked_since: None,
            retry_at: None,
            failures: 0,
        }
    }

    pub fn set_goal(&mut self, goal: Pose2D) {
        self.status = NavStatus {
            state: NavState::Planning,
            active_goal: Some(goal),
            diagnostics: String::new(),
        };
        self.path = None;
        self.progress = 0;
        self.blocked_since = None;
        self.retry_at = None;
        self.failures = 0;
    }

    pub fn cancel(&mut self) {
        self.status.state = NavState::Idle;
        self.status.active_goal = None;
        self.status.diagnostics = "cancelled".into();
        self.path = None;
        self.last_cmd = (0.0, 0.0);
    }

    pub fn state(&self) -> NavState {
        self.status.state
    }

    fn emit(&mut self, v: f64, omega: f64) -> Twist {
        self.last_cmd = (v, omega);
        Twist::planar(v, omega)
    }

    fn fail(&mut self, msg: String) -> Twist {
        self.status.state = NavState::Failed;
        self.status.diagnostics = msg;
        self.path = None;
        self.emit(0.0, 0.0)
    }

    fn plan(&mut self, now: f64, pose: &Pose2D, goal: &Pose2D, cm: &Costmap) -> Twist {
        match plan_global(cm, pose, goal) {
            Ok(path) => {
                self.path = Some(path);
                self.progress = 0;
                self.failures = 0;
                self.retry_at = None;
                self.blocked_since = None;
                self.status.state = NavState::Following;
                self.status.diagnostics.clear();
                self.follow(now, pose, goal, cm)
            }
            Err(e @ PlanError::GoalInCollision(_)) => self.fail(e.to_string()),
            Err(e) => {
                self.failures += 1;
                if self.failures >= self.config.max_replan_failures {
                    return self.fail(format!("{} consecutive planning failures: {e}", self.failures));
                }
                self.status.state = NavState::Recovering;
                self.status.diagnostics = e.to_string();
                self.path = None;
                self.retry_at = Some(now + self.config.retry_delay);
                self.emit(0.0, self.config.recovery_omega)
            }
        }
    }

    fn path_invalidated(&self, cm: &Costmap) -> bool {
        self.path.as_ref().is_none_or(|p| {
            p.waypoints[self.progress..]
                .iter()
                .any(|w| cm.cost_at((w.x, w.y)) >= INSCRIBED)
        })
    }

    fn follow(&mut self, now: f64, pose: &Pose2D, goal: &Pose2D, cm: &Costmap) -> Twist {
        let Some(path) = &self.path else {
            self.status.state = NavState::Planning;
            return self.plan(now, pose, goal, cm);
        };
        let window = &path.waypoints[self.progress..];
        let (nearest, _) = lookahead_index(window, pose, self.config.dwa.lookahead);
        self.progress += nearest;
        let window = &path.waypoints[self.progress..];
        match plan_local(cm, pose, self.last_cmd, window, &self.config.dwa) {
            Ok(t) => {
                self.blocked_since = None;
                self.status.state = NavState::Following;
                self.emit(t.linear.x, t.angular.z)
            }
            Err(e) => {
                let since = *self.blocked_since.get_or_insert(now);
                if now - since > self.config.blocked_timeout {
                    self.replans += 1;
                    self.blocked_since = None;
                    self.status.diagnostics = format!("replanning: {e}");
                    return self.plan(now, pose, goal, cm);
                }
                self.status.state = NavState::Recovering;
                self.status.diagnostics = e.to_string();
                self.emit(0.0, self.config.recovery_omega)
            }
        }
    }

    /// One control period. Errors land in `status.diagnostics`.
    pub fn tick(&mut self, now: f64, pose: &Pose2D, cm: &Costmap) -> Twist {
        let Some(goal) = self.status.active_goal else {
            return self.emit(0.0, 0.0);
        };
        match self.status.state {
            NavState::Idle | NavState::Succeeded | NavState::Failed => return self.emit(0.0, 0.0),
            _ => {}
        }
        let dist = ((goal.x - pose.x).powi(2) + (goal.y - pose.y).powi(2)).sqrt();
        if dist <= self.config.xy_tolerance {
            let yaw_err = angle_diff(goal.theta, pose.theta);
            if yaw_err.abs() <= HEADING_SETTLE * self.config.yaw_tolerance {
                self.status.state = NavState::Succeeded;
                self.status.diagnostics.clear();
                self.path = None;
                return self.emit(0.0, 0.0);
            }
            let w = self.config.dwa.omega_max;
            let omega = (1.5 * yaw_err).clamp(-w, w);
            let omega = omega.signum() * omega.abs().max(0.2);
            return self.emit(0.0, omega);
        }
        match self.status.state {
            NavState::Planning => self.plan(now, pose, &goal, cm),
            NavState::Recovering if self.path.is_none() => {
                if self.retry_at.is_none_or(|t| now >= t) {
                    self.plan(now, pose, &goal, cm)
                } else {
                    self.emit(0.0, self.config.recovery_omega)
                }
            }
            _ => {
                if self.path_invalidated(cm) {
                    self.replans += 1;
                    self.status.diagnostics = "path invalidated by costmap update".into();
                    return self.plan(now, pose, &goal, cm);
                }
                self.follow(now, pose, &goal, cm)
            }
        }
    }
}

/// Functional form of [`Navigator::tick`].
pub fn navigate_tick(nav: &mut Navigator, now: f64, pose: &Pose2D, cm: &Costmap) -> (NavStatus, Twist) {
    let t = nav.tick(now, pose, cm);
    (nav.status.clone(), t)
}
