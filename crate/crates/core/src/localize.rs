//! Monte Carlo localization against a saved occupancy map with a
//! likelihood-field measurement model and the rot-trans-rot odometry model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_diff, normalize_angle, Pose2D, Transform2D};
use crate::mapping::{distance_field, GridGeometry, Occupancy, OccupancyGrid};
use crate::sensing::{LaserScan, OdometryDelta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationConfig {
    pub particles: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub z_hit: f64,
    pub z_rand: f64,
    pub sigma_hit: f64,
    pub subsample: usize,
    /// Odometry noise: rot from rot, rot from trans, trans from trans,
    /// trans from rot.
    pub alphas: [f64; 4],
    /// Spread used when seeding from an operator estimate.
    pub init_sigma: [f64; 3],
    /// Gaussian jitter added to particles after each resampling.
    pub resample_jitter: [f64; 3],
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            particles: 1000,
            n_min: 200,
            n_max: 5000,
            z_hit: 0.95,
            z_rand: 0.05,
            sigma_hit: 0.1,
            subsample: 30,
            alphas: [0.2; 4],
            init_sigma: [0.3, 0.3, 0.25],
            resample_jitter: [0.01, 0.01, 0.005],
        }
    }
}

impl LocalizationConfig {
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if self.n_min == 0 || self.n_min > self.n_max {
            out.push(("n_min", "must be positive and at most n_max".to_string()));
        }
        if !(self.n_min..=self.n_max).contains(&self.particles) {
            out.push(("particles", format!("must lie in [{}, {}]", self.n_min, self.n_max)));
        }
        if !(self.z_hit >= 0.0 && self.z_rand >= 0.0 && self.z_hit + self.z_rand > 0.0) {
            out.push(("z_hit", "z_hit and z_rand must be nonnegative, not both zero".to_string()));
        }
        if !(self.sigma_hit > 0.0) {
            out.push(("sigma_hit", "must be positive".to_string()));
        }
        if self.subsample == 0 {
            out.push(("subsample", "must be positive".to_string()));
        }
        if self.alphas.iter().any(|a| !(*a >= 0.0)) {
            out.push(("alphas", "entries must be nonnegative".to_string()));
        }
        if self.init_sigma.iter().any(|s| !(*s >= 0.0)) {
            out.push(("init_sigma", "entries must be nonnegative".to_string()));
        }
        if self.resample_jitter.iter().any(|s| !(*s >= 0.0)) {
            out.push(("resample_jitter", "entries must be nonnegative".to_string()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub pose: Pose2D,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    pub normalized: bool,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    /// `1 / Σ w²` of the normalized weights.
    pub fn effective_sample_size(&self) -> f64 {
        let total = self.weight_sum();
        if total <= 0.0 {
            return 0.0;
        }
        1.0 / self
            .particles
            .iter()
            .map(|p| (p.weight / total).powi(2))
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalizeError {
    #[error("particle count {n} outside [{min}, {max}]")]
    BadCount { n: usize, min: usize, max: usize },
    #[error("every particle weight is zero")]
    AllZeroWeight,
}

pub fn init_particles(
    estimate: &Pose2D,
    sigma: [f64; 3],
    n: usize,
    bounds: (usize, usize),
    seed: u64,
) -> Result<ParticleSet, LocalizeError> {
    if !(bounds.0..=bounds.1).contains(&n) {
        return Err(LocalizeError::BadCount {
            n,
            min: bounds.0,
            max: bounds.1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let w = 1.0 / n as f64;
    let particles = (0..n)
        .map(|_| {
            let (dx, dy, dt): (f64, f64, f64) = (
                std.sample(&mut rng),
                std.sample(&mut rng),
                std.sample(&mut rng),
            );
            Particle {
                pose: Pose2D::new(
                    estimate.x + sigma[0] * dx,
                    estimate.y + sigma[1] * dy,
                    normalize_angle(estimate.theta + sigma[2] * dt),
                ),
                weight: w,
            }
        })
        .collect();
    Ok(ParticleSet {
        particles,
        normalized: true,
    })
}

/// Samples each particle forward through `delta` (a body-frame motion)
/// perturbed by rot-trans-rot odometry noise. Motions pointing backward are
/// decomposed as reverse translation so the first rotation stays small.
pub fn motion_update(ps: &ParticleSet, delta: &OdometryDelta, alphas: [f64; 4], seed: u64) -> ParticleSet {
    let d = delta.delta;
    let mut trans = d.x.hypot(d.y);
    let mut rot1 = if trans < 1e-6 { 0.0 } else { d.y.atan2(d.x) };
    if rot1.abs() > std::f64::consts::FRAC_PI_2 {
        rot1 = normalize_angle(rot1 + std::f64::consts::PI);
        trans = -trans;
    }
    let rot2 = angle_diff(d.rotation, rot1);
    let [a1, a2, a3, a4] = alphas;
    let sd_rot1 = (a1 * rot1 * rot1 + a2 * trans * trans).sqrt();
    let sd_trans = (a3 * trans * trans + a4 * (rot1 * rot1 + rot2 * rot2)).sqrt();
    let sd_rot2 = (a1 * rot2 * rot2 + a2 * trans * trans).sqrt();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let particles = ps
        .particles
        .iter()
        .map(|p| {
            let n: [f64; 3] = [std.sample(&mut rng), std.sample(&mut rng), std.sample(&mut rng)];
            let r1 = rot1 + sd_rot1 * n[0];
            let t = trans + sd_trans * n[1];
            let r2 = rot2 + sd_rot2 * n[2];
            let heading = p.pose.theta + r1;
            Particle {
                pose: Pose2D::new(
                    p.pose.x + t * heading.cos(),
                    p.pose.y + t * heading.sin(),
                    normalize_angle(heading + r2),
                ),
                weight: p.weight,
            }
        })
        .collect();
    ParticleSet {
        particles,
        normalized: ps.normalized,
    }
}

/// Nearest-occupied distance per cell, cached at map load.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodField {
    pub geometry: GridGeometry,
    pub distance: Vec<f64>,
}

impl LikelihoodField {
    pub fn from_map(map: &OccupancyGrid) -> Self {
        let occupied: Vec<bool> = map.cells.iter().map(|c| *c == Occupancy::Occupied).collect();
        Self {
            geometry: map.geometry,
            distance: distance_field(&map.geometry, &occupied),
        }
    }

    /// Distance at a map-frame point; infinity off the map.
    pub fn distance_at(&self, p: (f64, f64)) -> f64 {
        self.geometry
            .index(self.geometry.cell_of(p))
            .map_or(f64::INFINITY, |i| self.distance[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    pub z_hit: f64,
    pub z_rand: f64,
    pub sigma_hit: f64,
    pub subsample: usize,
    /// LiDAR pose in the body frame.
    pub mount: Transform2D,
}

impl MeasurementModel {
    pub fn from_config(cfg: &LocalizationConfig, mount: Transform2D) -> Self {
        Self {
            z_hit: cfg.z_hit,
            z_rand: cfg.z_rand,
            sigma_hit: cfg.sigma_hit,
            subsample: cfg.subsample,
            mount,
        }
    }

    /// Log-likelihood of the selected beams seen from `pose`.
    pub fn log_likelihood(&self, pose: &Pose2D, beams: &[(f64, f64)], field: &LikelihoodField, range_max: f64) -> f64 {
        let sensor = pose.compose(&self.mount);
        let norm = 1.0 / (self.sigma_hit * (2.0 * std::f64::consts::PI).sqrt());
        let rand = self.z_rand / range_max;
        beams
            .iter()
            .map(|(r, a)| {
                let ang = sensor.theta + a;
                let d = field.distance_at((sensor.x + r * ang.cos(), sensor.y + r * ang.sin()));
                let hit = if d.is_finite() {
                    norm * (-0.5 * (d / self.sigma_hit).powi(2)).exp()
                } else {
                    0.0
                };
                (self.z_hit * hit + rand).ln()
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MeasurementStatus {
    Updated,
    NoInfo,
}

/// Evenly spaced finite beams as `(range, angle)`.
pub fn subsample_beams(scan: &LaserScan, count: usize) -> Vec<(f64, f64)> {
    let finite: Vec<(f64, f64)> = scan.returns().map(|(_, r, a)| (r, a)).collect();
    if finite.len() <= count {
        return finite;
    }
    (0..count).map(|k| finite[k * finite.len() / count]).collect()
}

pub fn measurement_update(
    ps: &ParticleSet,
    scan: &LaserScan,
    field: &LikelihoodField,
    model: &MeasurementModel,
) -> Result<(ParticleSet, MeasurementStatus), LocalizeError> {
    let beams = subsample_beams(scan, model.subsample);
    if beams.is_empty() {
        return Ok((normalized(ps.clone())?, MeasurementStatus::NoInfo));
    }
    let logs: Vec<f64> = ps
        .particles
        .iter()
        .map(|p| {
            if p.weight > 0.0 {
                p.weight.ln() + model.log_likelihood(&p.pose, &beams, field, scan.spec.range_max)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let peak = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(LocalizeError::AllZeroWeight);
    }
    let particles = ps
        .particles
        .iter()
        .zip(&logs)
        .map(|(p, l)| Particle {
            pose: p.pose,
            weight: (l - peak).exp(),
        })
        .collect();
    Ok((
        normalized(ParticleSet {
            particles,
            normalized: false,
        })?,
        MeasurementStatus::Updated,
    ))
}

fn normalized(mut ps: ParticleSet) -> Result<ParticleSet, LocalizeError> {
    let total = ps.weight_sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(LocalizeError::AllZeroWeight);
    }
    ps.particles.iter_mut().for_each(|p| p.weight /= total);
    ps.normalized = true;
    Ok(ps)
}

/// Low-variance systematic resampling; output weights are uniform.
pub fn resample(ps: &ParticleSet, seed: u64) -> ParticleSet {
    let n = ps.len();
    if n == 0 {
        return ps.clone();
    }
    let total = ps.weight_sum();
    let step = total / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start: f64 = rng.gen::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    let mut cum = ps.particles[0].weight;
    for m in 0..n {
        let u = start + m as f64 * step;
        while u > cum && i + 1 < n {
            i += 1;
            cum += ps.particles[i].weight;
        }
        out.push(Particle {
            pose: ps.particles[i].pose,
            weight: 1.0 / n as f64,
        });
    }
    ParticleSet {
        particles: out,
        normalized: true,
    }
}

/// Adds independent Gaussian noise to every particle pose.
pub fn jitter(ps: &ParticleSet, sigma: [f64; 3], seed: u64) -> ParticleSet {
    if sigma == [0.0; 3] {
        return ps.clone();
    }
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let particles = ps
        .particles
        .iter()
        .map(|p| {
            let n: [f64; 3] = [std.sample(&mut rng), std.sample(&mut rng), std.sample(&mut rng)];
            Particle {
                pose: Pose2D::new(
                    p.pose.x + sigma[0] * n[0],
                    p.pose.y + sigma[1] * n[1],
                    normalize_angle(p.pose.theta + sigma[2] * n[2]),
                ),
                weight: p.weight,
            }
        })
        .collect();
    ParticleSet {
        particles,
        normalized: ps.normalized,
    }
}

/// Weighted mean pose (circular mean for heading) and diagonal covariance.
pub fn estimate(ps: &ParticleSet) -> (Pose2D, [f64; 3]) {
    let total = ps.weight_sum();
    if !(total > 0.0) {
        return (Pose2D::origin(), [f64::INFINITY; 3]);
    }
    let (mut x, mut y, mut s, mut c) = (0.0, 0.0, 0.0, 0.0);
    for p in &ps.particles {
        let w = p.weight / total;
        x += w * p.pose.x;
        y += w * p.pose.y;
        s += w * p.pose.theta.sin();
        c += w * p.pose.theta.cos();
    }
    let theta = s.atan2(c);
    let (mut vx, mut vy, mut vt) = (0.0, 0.0, 0.0);
    for p in &ps.particles {
        let w = p.weight / total;
        vx += w * (p.pose.x - x).powi(2);
        vy += w * (p.pose.y - y).powi(2);
        vt += w * angle_diff(p.pose.theta, theta).powi(2);
    }
    (Pose2D::new(x, y, theta), [vx, vy, vt])
}

/// Filter state advanced once per scan.
#[derive(Debug, Clone)]
pub struct Amcl {
    pub config: LocalizationConfig,
    pub model: MeasurementModel,
    pub field: LikelihoodField,
    pub set: ParticleSet,
    pub last_status: MeasurementStatus,
    pub resampled: bool,
    seed: u64,
    ticks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmclTick {
    pub pose: Pose2D,
    pub covariance: [f64; 3],
    pub status: MeasurementStatus,
    pub resampled: bool,
    pub reinitialized: bool,
}

impl Amcl {
    pub fn new(
        config: LocalizationConfig,
        map: &OccupancyGrid,
        mount: Transform2D,
        initial: &Pose2D,
        seed: u64,
    ) -> Result<Self, LocalizeError> {
        let set = init_particles(
            initial,
            config.init_sigma,
            config.particles,
            (config.n_min, config.n_max),
            seed,
        )?;
        Ok(Self {
            model: MeasurementModel::from_config(&config, mount),
            field: LikelihoodField::from_map(map),
            config,
            set,
            last_status: MeasurementStatus::NoInfo,
            resampled: false,
            seed,
            ticks: 0,
        })
    }

    fn next_seed(&mut self) -> u64 {
        self.ticks += 1;
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(self.ticks)
    }

    /// Operator pose estimate: rescatter around it.
    pub fn set_initial_pose(&mut self, pose: &Pose2D) -> Result<(), LocalizeError> {
        let seed = self.next_seed();
        self.set = init_particles(
            pose,
            self.config.init_sigma,
            self.config.particles,
            (self.config.n_min, self.config.n_max),
            seed,
        )?;
        Ok(())
    }

    pub fn estimate(&self) -> (Pose2D, [f64; 3]) {
        estimate(&self.set)
    }

    /// Motion update, measurement update, and resampling when the effective
    /// sample size drops below half the particle count. A collapse to zero
    /// weight rescatters around the last estimate.
    pub fn tick(&mut self, delta: &OdometryDelta, scan: &LaserScan) -> AmclTick {
        let seed = self.next_seed();
        let moved = motion_update(&self.set, delta, self.config.alphas, seed);
        let mut reinitialized = false;
        let (set, status) = match measurement_update(&moved, scan, &self.field, &self.model) {
            Ok(r) => r,
            Err(_) => {
                reinitialized = true;
                let (center, _) = estimate(&moved);
                let seed = self.next_seed();
                let set = init_particles(
                    &center,
                    self.config.init_sigma,
                    self.config.particles,
                    (self.config.n_min, self.config.n_max),
                    seed,
                )
                .unwrap_or(moved);
                (set, MeasurementStatus::NoInfo)
            }
        };
        self.set = set;
        self.resampled = false;
        if self.set.effective_sample_size() < self.set.len() as f64 / 2.0 {
            let seed = self.next_seed();
            self.set = jitter(&resample(&self.set, seed), self.config.resample_jitter, seed ^ 0x5A5A);
            self.resampled = true;
        }
        self.last_status = status;
        let (pose, covariance) = estimate(&self.set);
        AmclTick {
            pose,
            covariance,
            status,
            resampled: self.resampled,
            reinitialized,
        }
    }
}
