//! Ground-truth quadrotor rigid-body model, X-configuration mixer and
//! collision checking against the static world.
//!
//! Attitude convention: negative pitch tilts thrust toward body +x
//! (nose down, fly forward) and positive roll tilts thrust toward body +y
//! (fly left). Positive yaw is counter-clockwise seen from above.

use std::f64::consts::{FRAC_PI_2, SQRT_2};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{normalize_angle, Pose2D};
use crate::world::WorldModel;

/// Vertical speed below which ground contact counts as a landing.
pub const TOUCHDOWN_SPEED: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub mass: f64,
    pub arm_length: f64,
    pub inertia_diag: [f64; 3],
    pub thrust_coeff: f64,
    pub drag_torque_coeff: f64,
    pub rotor_speed_max: f64,
    pub linear_drag: f64,
    pub body_radius: f64,
    pub gravity: f64,
}

impl Default for VehicleParams {
    // DJI F450-class airframe
    fn default() -> Self {
        Self {
            mass: 1.5,
            arm_length: 0.225,
            inertia_diag: [0.0123, 0.0123, 0.0224],
            thrust_coeff: 1.3e-5,
            drag_torque_coeff: 2.0e-7,
            rotor_speed_max: 1000.0,
            linear_drag: 0.3,
            body_radius: 0.3,
            gravity: 9.81,
        }
    }
}

impl VehicleParams {
    /// Returns `(key, message)` for every violated invariant.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let positive = [
            ("mass", self.mass),
            ("arm_length", self.arm_length),
            ("inertia_diag[0]", self.inertia_diag[0]),
            ("inertia_diag[1]", self.inertia_diag[1]),
            ("inertia_diag[2]", self.inertia_diag[2]),
            ("thrust_coeff", self.thrust_coeff),
            ("drag_torque_coeff", self.drag_torque_coeff),
            ("rotor_speed_max", self.rotor_speed_max),
            ("linear_drag", self.linear_drag),
            ("body_radius", self.body_radius),
            ("gravity", self.gravity),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                out.push((key, format!("must be positive and finite, got {v}")));
            }
        }
        if self.drag_torque_coeff >= self.thrust_coeff {
            out.push((
                "drag_torque_coeff",
                "must be smaller than thrust_coeff".to_string(),
            ));
        }
        out
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    /// Moment arm of each rotor about the roll and pitch axes.
    fn lever(&self) -> f64 {
        self.arm_length / SQRT_2
    }

    fn yaw_ratio(&self) -> f64 {
        self.drag_torque_coeff / self.thrust_coeff
    }

    pub fn max_total_thrust(&self) -> f64 {
        4.0 * self.thrust_coeff * self.rotor_speed_max * self.rotor_speed_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidBodyState {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    /// (roll, pitch, yaw)
    pub attitude: [f64; 3],
    /// (p, q, r)
    pub body_rates: [f64; 3],
    pub time: f64,
}

impl RigidBodyState {
    pub fn at_pose(pose: Pose2D, z: f64) -> Self {
        Self {
            position: [pose.x, pose.y, z],
            attitude: [0.0, 0.0, pose.theta],
            ..Default::default()
        }
    }

    pub fn pose2d(&self) -> Pose2D {
        Pose2D::new(self.position[0], self.position[1], self.attitude[2])
    }

    pub fn roll(&self) -> f64 {
        self.attitude[0]
    }

    pub fn pitch(&self) -> f64 {
        self.attitude[1]
    }

    pub fn yaw(&self) -> f64 {
        self.attitude[2]
    }

    /// Horizontal velocity rotated into the yaw-aligned body frame.
    pub fn body_velocity(&self) -> (f64, f64) {
        let (s, c) = self.yaw().sin_cos();
        let (vx, vy) = (self.velocity[0], self.velocity[1]);
        (c * vx + s * vy, -s * vx + c * vy)
    }
}

/// Rotor angular speeds, front-left, front-right, rear-right, rear-left.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RotorSpeeds {
    pub omega: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WrenchCommand {
    pub thrust: f64,
    pub torque_roll: f64,
    pub torque_pitch: f64,
    pub torque_yaw: f64,
}

impl WrenchCommand {
    pub fn new(thrust: f64, torque_roll: f64, torque_pitch: f64, torque_yaw: f64) -> Self {
        Self {
            thrust,
            torque_roll,
            torque_pitch,
            torque_yaw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VehicleError {
    #[error("wrench not allocatable: rotor force demand {forces:?} has a negative entry")]
    Unallocatable { forces: [f64; 4] },
    #[error("negative thrust command {0}")]
    NegativeThrust(f64),
    #[error("crashed at t={time:.3}s: {reason}")]
    Crash { time: f64, reason: String },
    #[error("physics step {0} outside (0, 0.02]")]
    BadTimestep(f64),
}

/// Per-rotor force demand that exactly produces `cmd` (no clamping).
pub fn allocate(cmd: &WrenchCommand, params: &VehicleParams) -> [f64; 4] {
    let a = cmd.thrust / 4.0;
    let b = cmd.torque_roll / (4.0 * params.lever());
    let c = cmd.torque_pitch / (4.0 * params.lever());
    let e = cmd.torque_yaw / (4.0 * params.yaw_ratio());
    [a - b + c + e, a + b + c - e, a + b - c + e, a - b - c - e]
}

fn speeds_from_forces(forces: [f64; 4], params: &VehicleParams) -> RotorSpeeds {
    RotorSpeeds {
        omega: forces.map(|f| (f.max(0.0) / params.thrust_coeff).sqrt().min(params.rotor_speed_max)),
    }
}

/// X-configuration allocation of a wrench onto rotor speeds.
pub fn mix(cmd: &WrenchCommand, params: &VehicleParams) -> Result<RotorSpeeds, VehicleError> {
    if cmd.thrust < 0.0 {
        return Err(VehicleError::NegativeThrust(cmd.thrust));
    }
    let forces = allocate(cmd, params);
    if forces.iter().any(|f| *f < 0.0) {
        return Err(VehicleError::Unallocatable { forces });
    }
    Ok(speeds_from_forces(forces, params))
}

/// Like [`mix`], but when the torque demand exceeds the thrust budget the
/// torques are scaled down uniformly until every rotor force is nonnegative.
/// Thrust is always preserved.
pub fn mix_saturated(cmd: &WrenchCommand, params: &VehicleParams) -> RotorSpeeds {
    let thrust = cmd.thrust.max(0.0);
    let base = thrust / 4.0;
    let torque_only = WrenchCommand {
        thrust: 0.0,
        ..*cmd
    };
    let parts = allocate(&torque_only, params);
    let scale = parts
        .iter()
        .filter(|p| **p < 0.0)
        .map(|p| base / -p)
        .fold(1.0_f64, f64::min);
    speeds_from_forces(parts.map(|p| base + scale * p), params)
}

/// Wrench produced by a set of rotor speeds (forward model of the mixer).
pub fn wrench_from_rotors(rotors: &RotorSpeeds, params: &VehicleParams) -> WrenchCommand {
    let f = rotors.omega.map(|w| params.thrust_coeff * w * w);
    let l = params.lever();
    WrenchCommand {
        thrust: f.iter().sum(),
        torque_roll: l * (f[1] + f[2] - f[0] - f[3]),
        torque_pitch: l * (f[0] + f[1] - f[2] - f[3]),
        torque_yaw: params.yaw_ratio() * (f[0] + f[2] - f[1] - f[3]),
    }
}

/// Unit thrust direction in the world frame for a given attitude.
pub fn thrust_direction(roll: f64, pitch: f64, yaw: f64) -> [f64; 3] {
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let fx = -sp * cr;
    let fy = sr;
    [cy * fx - sy * fy, sy * fx + cy * fy, cr * cp]
}

/// One semi-implicit Euler step of the rigid-body model.
pub fn step_dynamics(
    state: &RigidBodyState,
    rotors: &RotorSpeeds,
    params: &VehicleParams,
    dt: f64,
) -> Result<RigidBodyState, VehicleError> {
    if !(dt > 0.0 && dt <= 0.02) {
        return Err(VehicleError::BadTimestep(dt));
    }
    let clamped = RotorSpeeds {
        omega: rotors.omega.map(|w| w.clamp(0.0, params.rotor_speed_max)),
    };
    let wrench = wrench_from_rotors(&clamped, params);
    let [roll, pitch, yaw] = state.attitude;
    let dir = thrust_direction(roll, pitch, yaw);
    let m = params.mass;
    let k = params.linear_drag / m;

    let mut next = *state;
    for i in 0..3 {
        let mut acc = wrench.thrust / m * dir[i] - k * state.velocity[i];
        if i == 2 {
            acc -= params.gravity;
        }
        next.velocity[i] = state.velocity[i] + acc * dt;
        next.position[i] = state.position[i] + next.velocity[i] * dt;
    }

    let torques = [wrench.torque_roll, wrench.torque_pitch, wrench.torque_yaw];
    for i in 0..3 {
        next.body_rates[i] = state.body_rates[i] + torques[i] / params.inertia_diag[i] * dt;
        next.attitude[i] = normalize_angle(state.attitude[i] + next.body_rates[i] * dt);
    }
    next.time = state.time + dt;

    if next.position[2] < 0.0 {
        if next.velocity[2] < -TOUCHDOWN_SPEED {
            return Err(VehicleError::Crash {
                time: next.time,
                reason: format!("ground impact at {:.2} m/s", -next.velocity[2]),
            });
        }
        // landed: ground contact absorbs motion
        next.position[2] = 0.0;
        next.velocity = [0.0; 3];
        next.body_rates = [0.0; 3];
        next.attitude[0] = 0.0;
        next.attitude[1] = 0.0;
    }
    if next.attitude[0].abs() >= FRAC_PI_2 || next.attitude[1].abs() >= FRAC_PI_2 {
        return Err(VehicleError::Crash {
            time: next.time,
            reason: format!(
                "attitude out of envelope (roll {:.2}, pitch {:.2})",
                next.attitude[0], next.attitude[1]
            ),
        });
    }
    Ok(next)
}

/// What the body disc touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactWith {
    Obstacle(usize),
    Bounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CollisionReport {
    pub contact: Option<ContactWith>,
}

impl CollisionReport {
    pub fn in_contact(&self) -> bool {
        self.contact.is_some()
    }
}

/// Contact is boundary-inclusive: touching at exactly `body_radius` counts.
pub fn check_collision(
    state: &RigidBodyState,
    world: &WorldModel,
    params: &VehicleParams,
) -> CollisionReport {
    let p = (state.position[0], state.position[1]);
    let r = params.body_radius;
    let contact = world
        .obstacles
        .iter()
        .position(|s| s.distance(p) <= r)
        .map(ContactWith::Obstacle)
        .or_else(|| {
            (!world.bounds.contains(p) || world.bounds.inner_clearance(p) <= r)
                .then_some(ContactWith::Bounds)
        });
    CollisionReport { contact }
}
