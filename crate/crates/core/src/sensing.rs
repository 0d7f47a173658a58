//! Simulated planar LiDAR and scan-to-scan laser odometry (point-to-point ICP).

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose2D, Transform2D, LIDAR_FRAME};
use crate::world::WorldModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarSpec {
    pub angle_min: f64,
    pub angle_max: f64,
    pub num_beams: usize,
    pub range_min: f64,
    pub range_max: f64,
    pub noise_sigma: f64,
    pub rate: f64,
}

impl Default for LidarSpec {
    /// 360 beams, one per degree over [-π, π).
    fn default() -> Self {
        let step = std::f64::consts::TAU / 360.0;
        Self {
            angle_min: -std::f64::consts::PI,
            angle_max: std::f64::consts::PI - step,
            num_beams: 360,
            range_min: 0.12,
            range_max: 8.0,
            noise_sigma: 0.01,
            rate: 10.0,
        }
    }
}

impl LidarSpec {
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.angle_max > self.angle_min) {
            out.push(("angle_max", "must exceed angle_min".to_string()));
        }
        if self.num_beams < 2 {
            out.push(("num_beams", format!("must be at least 2, got {}", self.num_beams)));
        }
        if !(self.range_min >= 0.0 && self.range_min < self.range_max) {
            out.push(("range_min", "must satisfy 0 <= range_min < range_max".to_string()));
        }
        if !(self.noise_sigma >= 0.0) {
            out.push(("noise_sigma", "must be nonnegative".to_string()));
        }
        if !(self.rate > 0.0) {
            out.push(("rate", "must be positive".to_string()));
        }
        out
    }

    pub fn angle_increment(&self) -> f64 {
        (self.angle_max - self.angle_min) / (self.num_beams - 1) as f64
    }

    pub fn beam_angle(&self, i: usize) -> f64 {
        self.angle_min + i as f64 * self.angle_increment()
    }
}

/// Ranges are `f64::INFINITY` where the beam had no return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserScan {
    pub stamp: f64,
    pub frame: String,
    pub ranges: Vec<f64>,
    pub spec: LidarSpec,
}

impl LaserScan {
    pub fn finite_count(&self) -> usize {
        self.ranges.iter().filter(|r| r.is_finite()).count()
    }

    /// Finite returns as `(beam index, range, beam angle)`.
    pub fn returns(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.ranges
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_finite())
            .map(|(i, r)| (i, *r, self.spec.beam_angle(i)))
    }

    /// Finite returns as Cartesian points in the sensor frame.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.returns()
            .map(|(_, r, a)| (r * a.cos(), r * a.sin()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MatchStatus {
    Converged,
    Degraded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryDelta {
    /// Motion of the sensor between the two scans, in the earlier scan's frame.
    pub delta: Transform2D,
    pub covariance_diag: [f64; 3],
    pub status: MatchStatus,
}

impl OdometryDelta {
    pub fn exact(delta: Transform2D) -> Self {
        Self {
            delta,
            covariance_diag: [0.0; 3],
            status: MatchStatus::Converged,
        }
    }

    /// Re-expresses a sensor-frame motion in the body frame, given the
    /// sensor mounting transform (pose of the sensor in the body).
    pub fn in_body_frame(&self, mount: &Transform2D) -> OdometryDelta {
        OdometryDelta {
            delta: mount.compose(&self.delta).compose(&mount.inverse()),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensingError {
    #[error("sensor pose ({x:.3}, {y:.3}) outside world bounds")]
    OutOfBounds { x: f64, y: f64 },
    #[error("degenerate scan: {finite} finite returns (need {needed})")]
    DegenerateScan { finite: usize, needed: usize },
    #[error("scans use different lidar specs")]
    SpecMismatch,
}

pub fn raycast_scan(
    world: &WorldModel,
    sensor_pose: &Pose2D,
    spec: &LidarSpec,
    rng_seed: u64,
) -> Result<LaserScan, SensingError> {
    raycast_scan_at(world, sensor_pose, spec, rng_seed, 0.0)
}

pub fn raycast_scan_at(
    world: &WorldModel,
    sensor_pose: &Pose2D,
    spec: &LidarSpec,
    rng_seed: u64,
    stamp: f64,
) -> Result<LaserScan, SensingError> {
    let origin = (sensor_pose.x, sensor_pose.y);
    if !world.inside_bounds(origin) {
        return Err(SensingError::OutOfBounds {
            x: origin.0,
            y: origin.1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).unwrap());
    let ranges = (0..spec.num_beams)
        .map(|i| {
            let a = sensor_pose.theta + spec.beam_angle(i);
            let r = world.raycast(origin, (a.cos(), a.sin()));
            // draw for every beam so the noise stream is independent of geometry
            let n = noise.map_or(0.0, |d| d.sample(&mut rng));
            if r > spec.range_max {
                f64::INFINITY
            } else {
                (r + n).clamp(spec.range_min, spec.range_max)
            }
        })
        .collect();
    Ok(LaserScan {
        stamp,
        frame: LIDAR_FRAME.to_string(),
        ranges,
        spec: *spec,
    })
}

pub const MIN_FINITE_RETURNS: usize = 10;
const ICP_MAX_ITERATIONS: usize = 30;
const ICP_CONVERGENCE: f64 = 1e-4;
const ICP_CUTOFF: f64 = 0.5;
/// Reference-scan densification: adjacent returns closer than
/// `DENSIFY_GAP` are one surface; wider gaps (grazing walls) up to
/// `DENSIFY_LONG_GAP` are bridged only when the returns on either side lie
/// on the same line. Filled points are `DENSIFY_SPACING` apart.
const DENSIFY_GAP: f64 = 0.2;
const DENSIFY_LONG_GAP: f64 = 0.6;
const DENSIFY_LINE_TOL: f64 = 0.05;
const DENSIFY_SPACING: f64 = 0.01;

fn line_distance(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    ((p.0 - a.0) * dy - (p.1 - a.1) * dx).abs() / dx.hypot(dy).max(1e-12)
}

/// Adds interpolated points between adjacent returns that lie on the same
/// surface, so closest-point matches are not snapped to beam samples.
/// Returns the points and, per point, whether it ends a surface run
/// (a shadow or range edge, whose position moves with the viewpoint).
fn densify(scan: &LaserScan) -> (Vec<(f64, f64)>, Vec<bool>) {
    let pts: Vec<Option<(f64, f64)>> = scan
        .ranges
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.is_finite().then(|| {
                let a = scan.spec.beam_angle(i);
                (r * a.cos(), r * a.sin())
            })
        })
        .collect();
    let at = |i: usize| if i < pts.len() { pts[i] } else { None };
    // linked[i]: return i and i + 1 lie on one surface
    let linked: Vec<bool> = (0..pts.len())
        .map(|i| {
            let (Some(q), Some(p)) = (pts[i], at(i + 1)) else {
                return false;
            };
            let gap = (p.0 - q.0).hypot(p.1 - q.1);
            gap < DENSIFY_GAP
                || (gap < DENSIFY_LONG_GAP
                    && i > 0
                    && matches!((at(i - 1), at(i + 2)), (Some(before), Some(after))
                        if line_distance(q, p, before) < DENSIFY_LINE_TOL
                            && line_distance(q, p, after) < DENSIFY_LINE_TOL))
        })
        .collect();
    let mut out = Vec::with_capacity(pts.len() * 4);
    let mut edge = Vec::with_capacity(pts.len() * 4);
    for i in 0..pts.len() {
        let Some(q) = pts[i] else { continue };
        out.push(q);
        edge.push(!(linked[i] && i > 0 && linked[i - 1]));
        if linked[i] {
            let p = at(i + 1).expect("linked implies a next return");
            let n = ((p.0 - q.0).hypot(p.1 - q.1) / DENSIFY_SPACING).floor() as usize;
            for k in 1..n {
                let t = k as f64 / n as f64;
                out.push((q.0 + t * (p.0 - q.0), q.1 + t * (p.1 - q.1)));
                edge.push(false);
            }
        }
    }
    (out, edge)
}

/// Uniform-grid nearest neighbor lookup with cell size equal to the
/// correspondence cutoff, so only the 3×3 neighborhood needs searching.
pub(crate) struct PointBuckets<'a> {
    points: &'a [(f64, f64)],
    cells: HashMap<(i64, i64), Vec<usize>>,
    cell: f64,
}

impl<'a> PointBuckets<'a> {
    pub(crate) fn new(points: &'a [(f64, f64)], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(*p, cell)).or_default().push(i);
        }
        Self {
            points,
            cells,
            cell,
        }
    }

    fn key(p: (f64, f64), cell: f64) -> (i64, i64) {
        ((p.0 / cell).floor() as i64, (p.1 / cell).floor() as i64)
    }

    pub(crate) fn nearest(&self, q: (f64, f64), max_dist: f64) -> Option<(usize, f64)> {
        let (cx, cy) = Self::key(q, self.cell);
        let mut best: Option<(usize, f64)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(idx) = self.cells.get(&(cx + dx, cy + dy)) else {
                    continue;
                };
                for &i in idx {
                    let p = self.points[i];
                    let d2 = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
                    if best.is_none_or(|(_, b)| d2 < b) {
                        best = Some((i, d2));
                    }
                }
            }
        }
        best.filter(|(_, d2)| *d2 <= max_dist * max_dist)
            .map(|(i, d2)| (i, d2.sqrt()))
    }
}

/// Closed-form 2-D rigid alignment minimizing Σ|target - T·source|².
pub fn align_pairs(pairs: &[((f64, f64), (f64, f64))]) -> Transform2D {
    let n = pairs.len() as f64;
    let (mut sx, mut sy, mut tx, mut ty) = (0.0, 0.0, 0.0, 0.0);
    for ((ax, ay), (bx, by)) in pairs {
        sx += ax;
        sy += ay;
        tx += bx;
        ty += by;
    }
    let (sx, sy, tx, ty) = (sx / n, sy / n, tx / n, ty / n);
    let (mut dot, mut cross) = (0.0, 0.0);
    for ((ax, ay), (bx, by)) in pairs {
        let (ax, ay, bx, by) = (ax - sx, ay - sy, bx - tx, by - ty);
        dot += ax * bx + ay * by;
        cross += ax * by - ay * bx;
    }
    let theta = cross.atan2(dot);
    let (s, c) = theta.sin_cos();
    Transform2D::new(tx - (c * sx - s * sy), ty - (s * sx + c * sy), theta)
}

/// Point-to-point ICP of `source` onto the bucketed target, seeded at
/// `guess`. Targets flagged in `skip` never take part in a pair. Returns the
/// estimate and whether the update step fell below the convergence bound.
pub(crate) fn icp(
    buckets: &PointBuckets,
    skip: Option<&[bool]>,
    source: &[(f64, f64)],
    guess: &Transform2D,
    cutoff: f64,
    max_iterations: usize,
) -> (Transform2D, bool) {
    let mut estimate = *guess;
    let mut pairs = Vec::with_capacity(source.len());
    for _ in 0..max_iterations {
        pairs.clear();
        for q in source {
            let moved = estimate.apply(*q);
            match buckets.nearest(moved, cutoff) {
                Some((i, _)) if !skip.is_some_and(|s| s[i]) => {
                    pairs.push((moved, buckets.points[i]))
                }
                _ => {}
            }
        }
        if pairs.len() < MIN_FINITE_RETURNS {
            return (estimate, false);
        }
        let step = align_pairs(&pairs);
        estimate = step.compose(&estimate);
        if step.x.hypot(step.y) < ICP_CONVERGENCE && step.rotation.abs() < ICP_CONVERGENCE {
            return (estimate, true);
        }
    }
    (estimate, false)
}

/// Estimates the sensor motion from `prev` to `cur` by iterative closest
/// point seeded at `guess`. Returns the best estimate with
/// [`MatchStatus::Degraded`] when it does not converge.
pub fn laser_odometry(
    prev: &LaserScan,
    cur: &LaserScan,
    guess: &Transform2D,
) -> Result<OdometryDelta, SensingError> {
    if prev.spec != cur.spec {
        return Err(SensingError::SpecMismatch);
    }
    for scan in [prev, cur] {
        let finite = scan.finite_count();
        if finite < MIN_FINITE_RETURNS {
            return Err(SensingError::DegenerateScan {
                finite,
                needed: MIN_FINITE_RETURNS,
            });
        }
    }
    let (target, edge) = densify(prev);
    let source = cur.points();
    let buckets = PointBuckets::new(&target, ICP_CUTOFF);
    let (estimate, converged) = icp(&buckets, Some(&edge), &source, guess, ICP_CUTOFF, ICP_MAX_ITERATIONS);
    let mut status = if converged {
        MatchStatus::Converged
    } else {
        MatchStatus::Degraded
    };

    let mut sq = 0.0;
    let mut count = 0usize;
    let mut spread = 0.0;
    for q in &source {
        let moved = estimate.apply(*q);
        if let Some((_, d)) = buckets.nearest(moved, ICP_CUTOFF) {
            sq += d * d;
            spread += q.0 * q.0 + q.1 * q.1;
            count += 1;
        }
    }
    let covariance_diag = if count >= MIN_FINITE_RETURNS {
        let var = sq / count as f64;
        [
            var / count as f64,
            var / count as f64,
            var / spread.max(1e-9),
        ]
    } else {
        status = MatchStatus::Degraded;
        [1.0, 1.0, 1.0]
    };
    Ok(OdometryDelta {
        delta: estimate,
        covariance_diag,
        status,
    })
}

/// One scan-log line: `stamp x y theta r0 r1 ...`, ranges with four
/// decimals and `inf` for beams without a return.
pub fn format_scan_record(scan: &LaserScan, truth: &Pose2D) -> String {
    let mut line = format!(
        "{:.4} {:.6} {:.6} {:.6}",
        scan.stamp, truth.x, truth.y, truth.theta
    );
    for r in &scan.ranges {
        if r.is_finite() {
            let _ = write!(line, " {r:.4}");
        } else {
            line.push_str(" inf");
        }
    }
    line
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("scan record field {field}: {message}")]
pub struct ScanRecordError {
    pub field: usize,
    pub message: String,
}

pub fn parse_scan_record(
    line: &str,
    spec: &LidarSpec,
) -> Result<(LaserScan, Pose2D), ScanRecordError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 4 + spec.num_beams {
        return Err(ScanRecordError {
            field: fields.len(),
            message: format!("expected {} fields, found {}", 4 + spec.num_beams, fields.len()),
        });
    }
    let num = |i: usize| -> Result<f64, ScanRecordError> {
        let v: f64 = fields[i].parse().map_err(|_| ScanRecordError {
            field: i,
            message: format!("not a number: {:?}", fields[i]),
        })?;
        Ok(v)
    };
    let stamp = num(0)?;
    let truth = Pose2D::new(num(1)?, num(2)?, num(3)?);
    let ranges = (4..fields.len())
        .map(|i| {
            if fields[i] == "inf" {
                Ok(f64::INFINITY)
            } else {
                num(i)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        LaserScan {
            stamp,
            frame: LIDAR_FRAME.to_string(),
            ranges,
            spec: *spec,
        },
        truth,
    ))
}
