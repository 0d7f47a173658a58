//! Occupancy-grid SLAM at hover level: log-odds integration of scans and a
//! correlative scan-to-map matcher that corrects odometry drift.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_diff, Pose2D, Transform2D, TransformTree, BASE_FRAME, MAP_FRAME, ODOM_FRAME};
use crate::sensing::{icp, LaserScan, OdometryDelta, PointBuckets, MIN_FINITE_RETURNS};
use crate::world::{Shape, WorldModel};

/// Raster geometry shared by every grid type. Cell `(i, j)` covers
/// `[i·res, (i+1)·res) × [j·res, (j+1)·res)` in the origin frame; storage is
/// row-major with row 0 at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub origin: Pose2D,
}

impl GridGeometry {
    pub fn new(resolution: f64, width: usize, height: usize, origin: Pose2D) -> Self {
        Self {
            resolution,
            width,
            height,
            origin,
        }
    }

    /// Square grid of `size_m` meters centered on `center`, offset by half a
    /// cell so that cell centers fall on multiples of the resolution around
    /// the center.
    pub fn centered(resolution: f64, size_m: f64, center: Pose2D) -> Self {
        let half = (size_m / resolution / 2.0).ceil() as usize;
        let n = 2 * half + 1;
        let offset = (half as f64 + 0.5) * resolution;
        Self::new(
            resolution,
            n,
            n,
            Pose2D::new(center.x - offset, center.y - offset, 0.0),
        )
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Map-frame point in the grid's own frame.
    pub fn to_local(&self, (x, y): (f64, f64)) -> (f64, f64) {
        if self.origin.theta == 0.0 {
            (x - self.origin.x, y - self.origin.y)
        } else {
            self.origin.as_transform().inverse().apply((x, y))
        }
    }

    /// Possibly out-of-range cell containing a map-frame point.
    pub fn cell_of(&self, p: (f64, f64)) -> (i64, i64) {
        let (lx, ly) = self.to_local(p);
        (
            (lx / self.resolution).floor() as i64,
            (ly / self.resolution).floor() as i64,
        )
    }

    pub fn in_bounds(&self, (i, j): (i64, i64)) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.width && (j as usize) < self.height
    }

    pub fn index(&self, cell: (i64, i64)) -> Option<usize> {
        self.in_bounds(cell)
            .then(|| cell.1 as usize * self.width + cell.0 as usize)
    }

    pub fn cell_from_index(&self, idx: usize) -> (i64, i64) {
        ((idx % self.width) as i64, (idx / self.width) as i64)
    }

    pub fn cell_center(&self, (i, j): (i64, i64)) -> (f64, f64) {
        let local = (
            (i as f64 + 0.5) * self.resolution,
            (j as f64 + 0.5) * self.resolution,
        );
        self.origin.transform_point(local)
    }

    /// Map-frame corners of a cell, counter-clockwise from the origin corner.
    pub fn cell_corners(&self, (i, j): (i64, i64)) -> [(f64, f64); 4] {
        let r = self.resolution;
        let (x0, y0) = (i as f64 * r, j as f64 * r);
        [(x0, y0), (x0 + r, y0), (x0 + r, y0 + r), (x0, y0 + r)]
            .map(|p| self.origin.transform_point(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub resolution: f64,
    pub p_hit: f64,
    pub p_free: f64,
    pub clamp: f64,
    pub occ_threshold: f64,
    pub free_threshold: f64,
    /// Side length of the initial square grid, meters.
    pub initial_size: f64,
    /// Matcher search half-window (dx m, dy m, dθ rad).
    pub window: [f64; 3],
    pub match_translation: f64,
    pub match_rotation: f64,
    pub min_score: f64,
    /// Pose of the map frame's first SLAM pose; `None` uses the spawn pose.
    pub initial_pose: Option<Pose2D>,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            resolution: 0.05,
            p_hit: 0.7,
            p_free: 0.45,
            clamp: 4.0,
            occ_threshold: 1.0,
            free_threshold: -1.0,
            initial_size: 20.0,
            window: [0.15, 0.15, 3f64.to_radians()],
            match_translation: 0.05,
            match_rotation: 2f64.to_radians(),
            min_score: 0.3,
            initial_pose: None,
        }
    }
}

impl MappingConfig {
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.resolution > 0.0) {
            out.push(("resolution", "must be positive".to_string()));
        }
        if !(self.p_hit > 0.5 && self.p_hit < 1.0) {
            out.push(("p_hit", "must lie in (0.5, 1)".to_string()));
        }
        if !(self.p_free > 0.0 && self.p_free < 0.5) {
            out.push(("p_free", "must lie in (0, 0.5)".to_string()));
        }
        if !(self.clamp > 0.0) {
            out.push(("clamp", "must be positive".to_string()));
        }
        if !(self.free_threshold < self.occ_threshold) {
            out.push(("free_threshold", "must be below occ_threshold".to_string()));
        }
        if !(self.initial_size > 0.0) {
            out.push(("initial_size", "must be positive".to_string()));
        }
        if self.window.iter().any(|w| !(*w >= 0.0)) {
            out.push(("window", "entries must be nonnegative".to_string()));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            out.push(("min_score", "must lie in [0, 1]".to_string()));
        }
        out
    }

    pub fn l_occ(&self) -> f64 {
        log_odds(self.p_hit)
    }

    /// Negative increment applied to traversed cells.
    pub fn l_free(&self) -> f64 {
        log_odds(self.p_free)
    }
}

pub fn log_odds(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogOddsGrid {
    pub geometry: GridGeometry,
    pub cells: Vec<f64>,
    pub l_min: f64,
    pub l_max: f64,
}

impl LogOddsGrid {
    pub fn new(geometry: GridGeometry, clamp: f64) -> Self {
        Self {
            geometry,
            cells: vec![0.0; geometry.len()],
            l_min: -clamp,
            l_max: clamp,
        }
    }

    pub fn get(&self, cell: (i64, i64)) -> Option<f64> {
        self.geometry.index(cell).map(|i| self.cells[i])
    }

    pub fn has_occupied_mass(&self) -> bool {
        self.cells.iter().any(|l| *l > 0.0)
    }

    /// Doubles the grid toward whichever side is needed until `cell` fits.
    /// Returns the `(di, dj)` shift applied to existing cell indices.
    pub fn grow_to_include(&mut self, cell: (i64, i64)) -> (i64, i64) {
        let mut shift = (0i64, 0i64);
        let (mut i, mut j) = cell;
        loop {
            let g = self.geometry;
            let (w, h) = (g.width as i64, g.height as i64);
            let (grow_l, grow_r, grow_d, grow_u) = (i < 0, i >= w, j < 0, j >= h);
            if !(grow_l || grow_r || grow_d || grow_u) {
                return shift;
            }
            let (nw, nh) = (
                if grow_l || grow_r { 2 * w } else { w },
                if grow_d || grow_u { 2 * h } else { h },
            );
            let (di, dj) = (if grow_l { w } else { 0 }, if grow_d { h } else { 0 });
            let mut cells = vec![0.0; (nw * nh) as usize];
            for y in 0..h {
                let src = (y * w) as usize;
                let dst = ((y + dj) * nw + di) as usize;
                cells[dst..dst + w as usize].copy_from_slice(&self.cells[src..src + w as usize]);
            }
            let res = g.resolution;
            let origin = g
                .origin
                .compose(&Transform2D::translation(-(di as f64) * res, -(dj as f64) * res));
            self.geometry = GridGeometry::new(res, nw as usize, nh as usize, origin);
            self.cells = cells;
            i += di;
            j += dj;
            shift = (shift.0 + di, shift.1 + dj);
        }
    }

    pub fn to_occupancy(&self, occ_threshold: f64, free_threshold: f64) -> OccupancyGrid {
        to_occupancy(self, occ_threshold, free_threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Occupancy {
    Free,
    Occupied,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub geometry: GridGeometry,
    pub cells: Vec<Occupancy>,
}

impl OccupancyGrid {
    pub fn filled(geometry: GridGeometry, value: Occupancy) -> Self {
        Self {
            geometry,
            cells: vec![value; geometry.len()],
        }
    }

    pub fn get(&self, cell: (i64, i64)) -> Option<Occupancy> {
        self.geometry.index(cell).map(|i| self.cells[i])
    }

    pub fn set(&mut self, cell: (i64, i64), v: Occupancy) {
        if let Some(i) = self.geometry.index(cell) {
            self.cells[i] = v;
        }
    }

    pub fn count(&self, v: Occupancy) -> usize {
        self.cells.iter().filter(|c| **c == v).count()
    }
}

pub fn to_occupancy(grid: &LogOddsGrid, occ_threshold: f64, free_threshold: f64) -> OccupancyGrid {
    OccupancyGrid {
        geometry: grid.geometry,
        cells: grid
            .cells
            .iter()
            .map(|&l| {
                if l > occ_threshold {
                    Occupancy::Occupied
                } else if l < free_threshold {
                    Occupancy::Free
                } else {
                    Occupancy::Unknown
                }
            })
            .collect(),
    }
}

/// Integer line from `a` to `b` inclusive of both ends.
pub fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if (x, y) == b {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Integrates one scan taken from `sensor_pose` (pose of the LiDAR in the
/// map frame). Every touched cell is updated once per scan: cells holding a
/// beam endpoint get `+l_occ`, all other traversed cells get `l_free`.
pub fn integrate_scan(grid: &mut LogOddsGrid, sensor_pose: &Pose2D, scan: &LaserScan, cfg: &MappingConfig) {
    let origin_pt = (sensor_pose.x, sensor_pose.y);
    let mut ends = Vec::with_capacity(scan.ranges.len());
    for (i, r) in scan.ranges.iter().enumerate() {
        let hit = r.is_finite();
        let reach = if hit { *r } else { scan.spec.range_max };
        let (s, c) = (sensor_pose.theta + scan.spec.beam_angle(i)).sin_cos();
        ends.push(((origin_pt.0 + reach * c, origin_pt.1 + reach * s), hit));
    }
    // grow first so that cell indices are stable during the update
    grid.grow_to_include(grid.geometry.cell_of(origin_pt));
    for (p, _) in &ends {
        grid.grow_to_include(grid.geometry.cell_of(*p));
    }
    let g = grid.geometry;
    let start = g.cell_of(origin_pt);
    let mut hits: HashSet<usize> = HashSet::new();
    let mut free: HashSet<usize> = HashSet::new();
    for (p, hit) in &ends {
        let end = g.cell_of(*p);
        let line = bresenham(start, end);
        let mut stop = if *hit { line.len() - 1 } else { line.len() };
        // a return just past a confidently occupied cell is range noise on
        // that cell, not evidence for the one behind it
        if *hit && stop >= 1 {
            let before = g.index(line[stop - 1]).map(|i| grid.cells[i]);
            if before.is_some_and(|l| l > cfg.occ_threshold) {
                stop -= 1;
            }
        }
        free.extend(line[..stop].iter().filter_map(|c| g.index(*c)));
        if *hit {
            if let Some(idx) = g.index(line[stop]) {
                hits.insert(idx);
            }
        }
    }
    let (l_occ, l_free) = (cfg.l_occ(), cfg.l_free());
    for idx in &hits {
        grid.cells[*idx] = (grid.cells[*idx] + l_occ).clamp(grid.l_min, grid.l_max);
    }
    for idx in free.difference(&hits) {
        grid.cells[*idx] = (grid.cells[*idx] + l_free).clamp(grid.l_min, grid.l_max);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pose: Pose2D,
    pub score: f64,
    /// Best pose lies strictly inside the search window.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MappingError {
    #[error("scan match score {score:.3} below threshold {threshold:.3}")]
    LowScore { score: f64, threshold: f64 },
    #[error("scan has {0} finite returns")]
    DegenerateScan(usize),
}

pub const MATCH_ANGLE_STEP: f64 = 0.5 * std::f64::consts::PI / 180.0;

/// Exhaustive correlative search over a `window = (dx, dy, dθ)` around
/// `initial` (sensor pose in the map frame) in 1-cell / 0.5° steps. The
/// score is the fraction of finite endpoints landing on cells with positive
/// log-odds; ties go to the candidate closest to `initial`.
pub fn match_scan_to_map(
    grid: &LogOddsGrid,
    scan: &LaserScan,
    initial: &Pose2D,
    window: [f64; 3],
    min_score: f64,
) -> Result<MatchResult, MappingError> {
    let g = &grid.geometry;
    let occupied: Vec<bool> = grid.cells.iter().map(|l| *l > 0.0).collect();
    let beams: Vec<(f64, f64)> = scan.returns().map(|(_, r, a)| (r, a)).collect();
    if beams.is_empty() {
        return Err(MappingError::LowScore {
            score: 0.0,
            threshold: min_score,
        });
    }
    let n_xy = |w: f64| (w / g.resolution + 1e-9).floor() as i64;
    let (nx, ny) = (n_xy(window[0]), n_xy(window[1]));
    let nt = (window[2] / MATCH_ANGLE_STEP + 1e-9).floor() as i64;

    // candidate ordering: (score desc, translation asc, |rotation| asc)
    let mut best: Option<(usize, f64, i64, (i64, i64, i64))> = None;
    let mut cells = Vec::with_capacity(beams.len());
    for kt in -nt..=nt {
        let theta = initial.theta + kt as f64 * MATCH_ANGLE_STEP;
        cells.clear();
        cells.extend(beams.iter().map(|(r, a)| {
            let ang = theta + a;
            g.cell_of((initial.x + r * ang.cos(), initial.y + r * ang.sin()))
        }));
        for kx in -nx..=nx {
            for ky in -ny..=ny {
                let hits = cells
                    .iter()
                    .filter(|(i, j)| {
                        g.index((i + kx, j + ky))
                            .is_some_and(|idx| occupied[idx])
                    })
                    .count();
                let disp = (kx * kx + ky * ky) as f64;
                let better = match best {
                    None => true,
                    Some((bh, bd, bt, _)) => {
                        hits > bh || (hits == bh && (disp < bd || (disp == bd && kt.abs() < bt)))
                    }
                };
                if better {
                    best = Some((hits, disp, kt.abs(), (kx, ky, kt)));
                }
            }
        }
    }
    let (hits, _, _, (kx, ky, kt)) = best.expect("window always has one candidate");
    let score = hits as f64 / beams.len() as f64;
    if score < min_score {
        return Err(MappingError::LowScore {
            score,
            threshold: min_score,
        });
    }
    let (lx, ly) = (kx as f64 * g.resolution, ky as f64 * g.resolution);
    let (s, c) = g.origin.theta.sin_cos();
    let (sx, sy) = (c * lx - s * ly, s * lx + c * ly);
    Ok(MatchResult {
        pose: Pose2D::new(
            initial.x + sx,
            initial.y + sy,
            initial.theta + kt as f64 * MATCH_ANGLE_STEP,
        ),
        score,
        converged: kx.abs() < nx.max(1) && ky.abs() < ny.max(1) && kt.abs() < nt.max(1),
    })
}

const REFINE_CUTOFF: f64 = 0.1;
const REFINE_ITERATIONS: usize = 20;
const REFINE_SPACING: f64 = 0.01;

/// Occupied cell centers near the scan footprint, with points interpolated
/// along links between 8-adjacent occupied cells so that surfaces become
/// continuous polylines.
fn surface_points(grid: &LogOddsGrid, threshold: f64, lo: (f64, f64), hi: (f64, f64)) -> Vec<(f64, f64)> {
    let g = &grid.geometry;
    let occupied = |c: (i64, i64)| grid.get(c).is_some_and(|l| l > threshold);
    let corners = [(lo.0, lo.1), (hi.0, lo.1), (lo.0, hi.1), (hi.0, hi.1)].map(|p| g.cell_of(p));
    let (i0, i1) = (corners.iter().map(|c| c.0).min().unwrap(), corners.iter().map(|c| c.0).max().unwrap());
    let (j0, j1) = (corners.iter().map(|c| c.1).min().unwrap(), corners.iter().map(|c| c.1).max().unwrap());
    let mut out = Vec::new();
    for j in j0.max(0)..=j1.min(g.height as i64 - 1) {
        for i in i0.max(0)..=i1.min(g.width as i64 - 1) {
            if !occupied((i, j)) {
                continue;
            }
            let a = g.cell_center((i, j));
            out.push(a);
            for (di, dj) in [(1, 0), (0, 1), (1, 1), (-1, 1)] {
                if occupied((i + di, j + dj)) {
                    let b = g.cell_center((i + di, j + dj));
                    let n = ((b.0 - a.0).hypot(b.1 - a.1) / REFINE_SPACING).round() as usize;
                    for k in 1..n {
                        let t = k as f64 / n as f64;
                        out.push((a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1)));
                    }
                }
            }
        }
    }
    out
}

/// Sub-cell refinement of a correlative match by ICP against the map's
/// occupied surfaces. Returns `None` when ICP does not converge or strays
/// more than a cell / one angular step from `coarse`.
pub fn refine_match(grid: &LogOddsGrid, scan: &LaserScan, coarse: &Pose2D, threshold: f64) -> Option<Pose2D> {
    let source = scan.points();
    if source.len() < MIN_FINITE_RETURNS {
        return None;
    }
    let world: Vec<(f64, f64)> = source.iter().map(|p| coarse.transform_point(*p)).collect();
    let pad = 2.0 * REFINE_CUTOFF;
    let lo = world.iter().fold((f64::INFINITY, f64::INFINITY), |a, p| (a.0.min(p.0 - pad), a.1.min(p.1 - pad)));
    let hi = world.iter().fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |a, p| (a.0.max(p.0 + pad), a.1.max(p.1 + pad)));
    let target = surface_points(grid, threshold, lo, hi);
    if target.len() < MIN_FINITE_RETURNS {
        return None;
    }
    let buckets = PointBuckets::new(&target, REFINE_CUTOFF);
    let (t, converged) = icp(&buckets, None, &source, &coarse.as_transform(), REFINE_CUTOFF, REFINE_ITERATIONS);
    let refined = t.as_pose();
    let close = refined.distance(coarse) <= grid.geometry.resolution
        && angle_diff(refined.theta, coarse.theta).abs() <= MATCH_ANGLE_STEP;
    (converged && close).then_some(refined)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlamStatus {
    Initialized,
    Matched { score: f64 },
    /// Matcher skipped because motion since the last match was small.
    IntegratedOnly,
    /// Matcher ran but scored below threshold; odometry used alone.
    LowScore { score: f64 },
    /// Scan unusable; pose advanced by odometry, map untouched.
    Skipped { finite_returns: usize },
}

#[derive(Debug, Clone)]
pub struct SlamState {
    pub config: MappingConfig,
    pub grid: LogOddsGrid,
    /// Base pose in the map frame.
    pub pose: Pose2D,
    /// Accumulated odometry pose in the odom frame.
    pub odom_pose: Pose2D,
    /// Pose of the LiDAR in the body frame.
    pub mount: Transform2D,
    pub matcher_enabled: bool,
    pub tree: TransformTree,
    pub map_version: u64,
    initialized: bool,
    last_match: Pose2D,
}

impl SlamState {
    pub fn new(config: MappingConfig, initial_pose: Pose2D, mount: Transform2D) -> Self {
        let geometry = GridGeometry::centered(config.resolution, config.initial_size, initial_pose);
        let grid = LogOddsGrid::new(geometry, config.clamp);
        let mut tree = TransformTree::new();
        tree.set_transform(MAP_FRAME, ODOM_FRAME, initial_pose.as_transform(), 0.0)
            .expect("fresh tree");
        tree.set_transform(ODOM_FRAME, BASE_FRAME, Transform2D::identity(), 0.0)
            .expect("fresh tree");
        Self {
            config,
            grid,
            pose: initial_pose,
            odom_pose: Pose2D::origin(),
            mount,
            matcher_enabled: true,
            tree,
            map_version: 0,
            initialized: false,
            last_match: initial_pose,
        }
    }

    pub fn sensor_pose(&self, base: &Pose2D) -> Pose2D {
        base.compose(&self.mount)
    }

    pub fn occupancy(&self) -> OccupancyGrid {
        to_occupancy(&self.grid, self.config.occ_threshold, self.config.free_threshold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlamTick {
    pub map_pose: Pose2D,
    pub status: SlamStatus,
}

/// Predict with odometry, correct by scan matching when the vehicle has
/// moved enough, integrate the scan, and refresh `map -> odom`.
pub fn slam_tick(state: &mut SlamState, odom_delta: &OdometryDelta, scan: &LaserScan) -> SlamTick {
    let stamp = scan.stamp;
    let finite = scan.finite_count();
    let status;
    if !state.initialized {
        state.initialized = true;
        state.last_match = state.pose;
        let sp = state.sensor_pose(&state.pose);
        integrate_scan(&mut state.grid, &sp, scan, &state.config);
        state.map_version += 1;
        status = SlamStatus::Initialized;
    } else {
        state.odom_pose = state.odom_pose.compose(&odom_delta.delta);
        let predicted = state.pose.compose(&odom_delta.delta);
        if finite < MIN_FINITE_RETURNS {
            state.pose = predicted;
            status = SlamStatus::Skipped {
                finite_returns: finite,
            };
        } else {
            let moved = predicted.distance(&state.last_match);
            let turned = angle_diff(predicted.theta, state.last_match.theta).abs();
            let due = moved > state.config.match_translation || turned > state.config.match_rotation;
            let mut pose = predicted;
            if state.matcher_enabled && due {
                let sensor = state.sensor_pose(&predicted);
                match match_scan_to_map(
                    &state.grid,
                    scan,
                    &sensor,
                    state.config.window,
                    state.config.min_score,
                ) {
                    Ok(m) => {
                        let refined = refine_match(&state.grid, scan, &m.pose, state.config.occ_threshold)
                            .unwrap_or(m.pose);
                        pose = refined.compose(&state.mount.inverse());
                        state.last_match = pose;
                        status = SlamStatus::Matched { score: m.score };
                    }
                    Err(MappingError::LowScore { score, .. }) => {
                        state.last_match = pose;
                        status = SlamStatus::LowScore { score };
                    }
                    Err(MappingError::DegenerateScan(n)) => {
                        status = SlamStatus::Skipped { finite_returns: n };
                    }
                }
            } else {
                if !state.matcher_enabled && due {
                    state.last_match = pose;
                }
                status = SlamStatus::IntegratedOnly;
            }
            state.pose = pose;
            let sp = state.sensor_pose(&pose);
            integrate_scan(&mut state.grid, &sp, scan, &state.config);
            state.map_version += 1;
        }
    }
    let map_to_odom = state
        .pose
        .as_transform()
        .compose(&state.odom_pose.as_transform().inverse());
    let _ = state.tree.set_transform(MAP_FRAME, ODOM_FRAME, map_to_odom, stamp);
    let _ = state
        .tree
        .set_transform(ODOM_FRAME, BASE_FRAME, state.odom_pose.as_transform(), stamp);
    SlamTick {
        map_pose: state.pose,
        status,
    }
}

/// Cells whose square contains part of a surface the LiDAR can see: obstacle
/// outlines and the room walls. Used as ground truth for map quality.
pub fn rasterize_surfaces(world: &WorldModel, geometry: &GridGeometry) -> Vec<bool> {
    let mut out = vec![false; geometry.len()];
    for (idx, slot) in out.iter_mut().enumerate() {
        let cell = geometry.cell_from_index(idx);
        let corners = geometry.cell_corners(cell);
        let center = geometry.cell_center(cell);
        let inside_room = |p: &(f64, f64)| {
            let b = &world.bounds;
            p.0 > b.min[0] && p.0 < b.max[0] && p.1 > b.min[1] && p.1 < b.max[1]
        };
        let room_edge = corners.iter().any(|c| !inside_room(c))
            && (corners.iter().any(inside_room) || inside_room(&center));
        let obstacle_edge = world.obstacles.iter().any(|s| {
            let touches = square_intersects(s, &corners);
            let engulfed = corners.iter().all(|c| s.contains(*c));
            touches && !engulfed
        });
        *slot = room_edge || obstacle_edge;
    }
    out
}

/// Ground-truth occupancy: surface cells, cells centered inside an obstacle
/// and cells centered outside the room are occupied, the rest free.
pub fn occupancy_from_world(world: &WorldModel, geometry: &GridGeometry) -> OccupancyGrid {
    let surfaces = rasterize_surfaces(world, geometry);
    let cells = surfaces
        .iter()
        .enumerate()
        .map(|(idx, surface)| {
            let c = geometry.cell_center(geometry.cell_from_index(idx));
            let solid = !world.bounds.contains(c) || world.obstacles.iter().any(|s| s.contains(c));
            if *surface || solid {
                Occupancy::Occupied
            } else {
                Occupancy::Free
            }
        })
        .collect();
    OccupancyGrid {
        geometry: *geometry,
        cells,
    }
}

fn square_intersects(shape: &Shape, corners: &[(f64, f64); 4]) -> bool {
    let xs = corners.map(|c| c.0);
    let ys = corners.map(|c| c.1);
    let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    match *shape {
        Shape::Rect { min, max } => x0 <= max[0] && x1 >= min[0] && y0 <= max[1] && y1 >= min[1],
        Shape::Circle { center, radius } => {
            let dx = (x0 - center[0]).max(0.0).max(center[0] - x1);
            let dy = (y0 - center[1]).max(0.0).max(center[1] - y1);
            dx.hypot(dy) <= radius
        }
    }
}

/// Intersection-over-union between OCCUPIED cells and a truth mask.
pub fn occupied_iou(occ: &OccupancyGrid, truth: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (c, t) in occ.cells.iter().zip(truth) {
        let o = *c == Occupancy::Occupied;
        inter += (o && *t) as usize;
        union += (o || *t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas). `f` holds 0 at sites and infinity elsewhere.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut first = None;
    for (q, fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                // k > 0 is guaranteed: z[0] is -inf
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance, in meters, from every cell center to the
/// nearest marked cell center. Infinity everywhere when nothing is marked.
pub fn distance_field(geometry: &GridGeometry, marked: &[bool]) -> Vec<f64> {
    let (w, h) = (geometry.width, geometry.height);
    let n = w.max(h);
    let mut sq: Vec<f64> = marked.iter().map(|m| if *m { 0.0 } else { f64::INFINITY }).collect();
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = sq[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            sq[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let row = &mut sq[y * w..(y + 1) * w];
        f[..w].copy_from_slice(row);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        row.copy_from_slice(&out[..w]);
    }
    sq.into_iter().map(|d| d.sqrt() * geometry.resolution).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::{raycast_scan, LidarSpec};
    use crate::world::Rect;
    use approx::assert_abs_diff_eq;

    fn small_grid() -> LogOddsGrid {
        LogOddsGrid::new(GridGeometry::centered(0.05, 6.0, Pose2D::origin()), 4.0)
    }

    fn single_beam(range: f64) -> LaserScan {
        let spec = LidarSpec {
            angle_min: 0.0,
            angle_max: 0.1,
            num_beams: 2,
            noise_sigma: 0.0,
            ..Default::default()
        };
        LaserScan {
            stamp: 0.0,
            frame: "lidar_link".into(),
            ranges: vec![range, f64::INFINITY],
            spec,
        }
    }

    #[test]
    fn centered_geometry_aligns_cell_centers() {
        let g = GridGeometry::centered(0.05, 6.0, Pose2D::new(1.0, -2.0, 0.0));
        let c = g.cell_of((1.0, -2.0));
        let center = g.cell_center(c);
        assert_abs_diff_eq!(center.0, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(center.1, -2.0, epsilon = 1e-9);
    }

    #[test]
    fn log_odds_constants() {
        let cfg = MappingConfig::default();
        assert_abs_diff_eq!(cfg.l_occ(), (0.7f64 / 0.3).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.l_occ(), 0.847, epsilon = 1e-3);
        assert_abs_diff_eq!(cfg.l_free(), (0.45f64 / 0.55).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(log_odds(0.4), -0.405, epsilon = 1e-3);
    }

    #[test]
    fn one_hit_sets_l_occ() {
        let cfg = MappingConfig::default();
        let mut g = small_grid();
        integrate_scan(&mut g, &Pose2D::origin(), &single_beam(1.0), &cfg);
        let end = g.geometry.cell_of((1.0, 0.0));
        assert_abs_diff_eq!(g.get(end).unwrap(), cfg.l_occ(), epsilon = 1e-12);
        assert!(g.get(g.geometry.cell_of((0.5, 0.0))).unwrap() < 0.0);
    }

    #[test]
    fn repeated_hits_saturate() {
        let cfg = MappingConfig::default();
        let mut g = small_grid();
        for _ in 0..50 {
            integrate_scan(&mut g, &Pose2D::origin(), &single_beam(1.0), &cfg);
        }
        let end = g.geometry.cell_of((1.0, 0.0));
        assert_eq!(g.get(end).unwrap(), 4.0);
        assert!(g.cells.iter().all(|l| (-4.0..=4.0).contains(l)));
    }

    #[test]
    fn empty_room_interior_is_free() {
        let cfg = MappingConfig::default();
        let world = WorldModel::empty(Rect::new(-2.0, -2.0, 2.0, 2.0));
        let spec = LidarSpec {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let scan = raycast_scan(&world, &Pose2D::origin(), &spec, 0).unwrap();
        let mut g = small_grid();
        integrate_scan(&mut g, &Pose2D::origin(), &scan, &cfg);
        // every cell on the +x beam strictly before the wall is negative
        let wall = g.geometry.cell_of((2.0, 0.0));
        for i in g.geometry.cell_of((0.0, 0.0)).0..wall.0 {
            assert!(g.get((i, wall.1)).unwrap() < 0.0);
        }
        let occ = to_occupancy(&g, cfg.occ_threshold, cfg.free_threshold);
        assert_eq!(occ.count(Occupancy::Occupied), 0);
        let mut g2 = g.clone();
        integrate_scan(&mut g2, &Pose2D::origin(), &scan, &cfg);
        integrate_scan(&mut g2, &Pose2D::origin(), &scan, &cfg);
        let occ = to_occupancy(&g2, cfg.occ_threshold, cfg.free_threshold);
        for idx in 0..occ.cells.len() {
            if occ.cells[idx] == Occupancy::Occupied {
                let c = occ.geometry.cell_center(occ.geometry.cell_from_index(idx));
                assert!(world.bounds.inner_clearance(c) < 0.05, "interior cell {c:?} occupied");
            }
        }
    }

    #[test]
    fn to_occupancy_thresholds() {
        let mut g = small_grid();
        let occ = to_occupancy(&g, 1.0, -1.0);
        assert!(occ.cells.iter().all(|c| *c == Occupancy::Unknown));
        g.cells[0] = 4.0;
        g.cells[1] = -4.0;
        let occ = to_occupancy(&g, 1.0, -1.0);
        assert_eq!(occ.cells[0], Occupancy::Occupied);
        assert_eq!(occ.cells[1], Occupancy::Free);
        assert_eq!(occ.geometry, g.geometry);
    }

    #[test]
    fn grid_grows_preserving_world_frame() {
        let cfg = MappingConfig::default();
        let mut g = LogOddsGrid::new(GridGeometry::centered(0.05, 1.0, Pose2D::origin()), 4.0);
        integrate_scan(&mut g, &Pose2D::origin(), &single_beam(0.3), &cfg);
        let before = g.get(g.geometry.cell_of((0.3, 0.0))).unwrap();
        let w0 = g.geometry.width;
        integrate_scan(&mut g, &Pose2D::new(0.0, 0.0, std::f64::consts::PI), &single_beam(2.0), &cfg);
        assert!(g.geometry.width >= 2 * w0);
        assert_eq!(g.get(g.geometry.cell_of((0.3, 0.0))).unwrap(), before);
        assert!(g.get(g.geometry.cell_of((-2.0, 0.0))).unwrap() > 0.0);
    }

    #[test]
    fn match_on_empty_grid_is_low_score() {
        let world = WorldModel::empty(Rect::new(-2.0, -2.0, 2.0, 2.0));
        let scan = raycast_scan(&world, &Pose2D::origin(), &LidarSpec::default(), 0).unwrap();
        assert!(matches!(
            match_scan_to_map(&small_grid(), &scan, &Pose2D::origin(), [0.1, 0.1, 0.05], 0.3),
            Err(MappingError::LowScore { .. })
        ));
    }

    #[test]
    fn bresenham_endpoints() {
        let l = bresenham((0, 0), (5, 2));
        assert_eq!(l.first(), Some(&(0, 0)));
        assert_eq!(l.last(), Some(&(5, 2)));
        assert_eq!(l.len(), 6);
        assert_eq!(bresenham((3, 3), (3, 3)), vec![(3, 3)]);
    }

    #[test]
    fn distance_field_matches_brute_force() {
        let g = GridGeometry::new(0.1, 13, 9, Pose2D::origin());
        let mut marked = vec![false; g.len()];
        for idx in [5usize, 40, 41, 77, 100] {
            marked[idx] = true;
        }
        let field = distance_field(&g, &marked);
        for idx in 0..g.len() {
            let c = g.cell_from_index(idx);
            let brute = (0..g.len())
                .filter(|j| marked[*j])
                .map(|j| {
                    let o = g.cell_from_index(j);
                    (((c.0 - o.0).pow(2) + (c.1 - o.1).pow(2)) as f64).sqrt() * 0.1
                })
                .fold(f64::INFINITY, f64::min);
            assert_abs_diff_eq!(field[idx], brute, epsilon = 1e-12);
        }
        assert!(distance_field(&g, &vec![false; g.len()]).iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn iou_counts() {
        let g = GridGeometry::new(1.0, 2, 2, Pose2D::origin());
        let mut occ = OccupancyGrid::filled(g, Occupancy::Free);
        occ.cells[0] = Occupancy::Occupied;
        occ.cells[1] = Occupancy::Occupied;
        assert_abs_diff_eq!(occupied_iou(&occ, &[true, false, true, false]), 1.0 / 3.0);
    }
}
