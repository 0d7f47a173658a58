//! PID cascade (velocity -> attitude -> wrench) and the Twist bridge that
//! lets a ground-robot style planner fly the drone at a fixed altitude.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::angle_diff;
use crate::vehicle::{RigidBodyState, VehicleParams, WrenchCommand};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub i_limit: f64,
    pub output_limit: f64,
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64, i_limit: f64, output_limit: f64) -> Self {
        Self {
            kp,
            ki,
            kd,
            i_limit,
            output_limit,
        }
    }

    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (k, v) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push((k, format!("must be nonnegative, got {v}")));
            }
        }
        for (k, v) in [("i_limit", self.i_limit), ("output_limit", self.output_limit)] {
            if !(v > 0.0) {
                out.push((k, format!("must be positive, got {v}")));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
    pub initialized: bool,
}

/// One PID update. Derivative is taken on the error and is zero on the first
/// call after a reset.
pub fn pid_step(
    gains: &PidGains,
    st: &PidState,
    setpoint: f64,
    measured: f64,
    dt: f64,
) -> (f64, PidState) {
    debug_assert!(dt > 0.0);
    let error = setpoint - measured;
    let integral = (st.integral + error * dt).clamp(-gains.i_limit, gains.i_limit);
    let derivative = if st.initialized {
        (error - st.prev_error) / dt
    } else {
        0.0
    };
    let out = gains.kp * error + gains.ki * integral + gains.kd * derivative;
    (
        out.clamp(-gains.output_limit, gains.output_limit),
        PidState {
            integral,
            prev_error: error,
            initialized: true,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pid {
    pub gains: PidGains,
    pub state: PidState,
}

impl Pid {
    pub fn new(gains: PidGains) -> Self {
        Self {
            gains,
            state: PidState::default(),
        }
    }

    pub fn update(&mut self, setpoint: f64, measured: f64, dt: f64) -> f64 {
        self.update_error(setpoint - measured, dt)
    }

    pub fn update_error(&mut self, error: f64, dt: f64) -> f64 {
        let (out, st) = pid_step(&self.gains, &self.state, error, 0.0, dt);
        self.state = st;
        out
    }

    pub fn reset(&mut self) {
        self.state = PidState::default();
    }
}

/// Omitted components are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Velocity command: linear (m/s) and angular (rad/s) 3-vectors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vec3,
    pub angular: Vec3,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Turtlebot-style command: forward speed and yaw rate only.
    pub fn planar(v: f64, omega: f64) -> Self {
        Self {
            linear: Vec3 {
                x: v,
                ..Default::default()
            },
            angular: Vec3 {
                z: omega,
                ..Default::default()
            },
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AttitudeSetpoint {
    pub thrust: f64,
    pub roll_set: f64,
    pub pitch_set: f64,
    pub yaw_rate_set: f64,
    pub altitude_set: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub altitude: PidGains,
    pub attitude: PidGains,
    pub yaw_rate: PidGains,
    pub velocity: PidGains,
    pub max_tilt: f64,
    pub hover_altitude: f64,
    /// Setpoint ramp rate during takeoff, m/s.
    pub climb_rate: f64,
    pub hold_confirm: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            altitude: PidGains::new(8.0, 2.0, 5.0, 1.0, 10.0),
            attitude: PidGains::new(4.0, 0.5, 1.0, 0.2, 1.0),
            yaw_rate: PidGains::new(2.0, 0.2, 0.0, 0.2, 0.1),
            velocity: PidGains::new(0.25, 0.05, 0.0, 1.0, 0.25),
            max_tilt: 0.25,
            hover_altitude: 1.0,
            climb_rate: 0.5,
            hold_confirm: 0.5,
        }
    }
}

impl ControllerConfig {
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (name, g) in [
            ("altitude", &self.altitude),
            ("attitude", &self.attitude),
            ("yaw_rate", &self.yaw_rate),
            ("velocity", &self.velocity),
        ] {
            for (k, msg) in g.problems() {
                out.push((format!("{name}.{k}"), msg));
            }
        }
        for (k, v) in [
            ("max_tilt", self.max_tilt),
            ("hover_altitude", self.hover_altitude),
            ("climb_rate", self.climb_rate),
            ("hold_confirm", self.hold_confirm),
        ] {
            if !(v > 0.0) {
                out.push((k.to_string(), format!("must be positive, got {v}")));
            }
        }
        if self.max_tilt >= std::f64::consts::FRAC_PI_2 {
            out.push(("max_tilt".into(), "must be below π/2".into()));
        }
        out
    }
}

/// Vehicle-dependent limits the bridge needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeConfig {
    pub max_tilt: f64,
    pub mass: f64,
    pub gravity: f64,
    pub max_thrust: f64,
}

impl BridgeConfig {
    pub fn new(ctrl: &ControllerConfig, vehicle: &VehicleParams) -> Self {
        Self {
            max_tilt: ctrl.max_tilt,
            mass: vehicle.mass,
            gravity: vehicle.gravity,
            max_thrust: vehicle.max_total_thrust(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TakeoffPhase {
    Climb,
    Hold,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("altitude hold not engaged; take off first")]
    NotAirborne,
}

/// All loop states of the cascade, owned by the simulation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerBank {
    pub altitude: Pid,
    pub roll: Pid,
    pub pitch: Pid,
    pub yaw_rate: Pid,
    pub vel_x: Pid,
    pub vel_y: Pid,
    pub altitude_set: f64,
    pub altitude_engaged: bool,
    pub commanded: Twist,
    climb_setpoint: Option<f64>,
    settled_for: f64,
    climb_rate: f64,
    hold_confirm: f64,
}

impl ControllerBank {
    pub fn new(cfg: &ControllerConfig) -> Self {
        Self {
            altitude: Pid::new(cfg.altitude),
            roll: Pid::new(cfg.attitude),
            pitch: Pid::new(cfg.attitude),
            yaw_rate: Pid::new(cfg.yaw_rate),
            vel_x: Pid::new(cfg.velocity),
            vel_y: Pid::new(cfg.velocity),
            altitude_set: cfg.hover_altitude,
            altitude_engaged: false,
            commanded: Twist::zero(),
            climb_setpoint: None,
            settled_for: 0.0,
            climb_rate: cfg.climb_rate,
            hold_confirm: cfg.hold_confirm,
        }
    }

    fn pids_mut(&mut self) -> [&mut Pid; 6] {
        [
            &mut self.altitude,
            &mut self.roll,
            &mut self.pitch,
            &mut self.yaw_rate,
            &mut self.vel_x,
            &mut self.vel_y,
        ]
    }

    pub fn pids(&self) -> [&Pid; 6] {
        [
            &self.altitude,
            &self.roll,
            &self.pitch,
            &self.yaw_rate,
            &self.vel_x,
            &self.vel_y,
        ]
    }
}

/// Zeroes every loop state and the commanded Twist; altitude hold disengages.
pub fn reset_controllers(mut loops: ControllerBank) -> ControllerBank {
    for pid in loops.pids_mut() {
        pid.reset();
    }
    loops.commanded = Twist::zero();
    loops.altitude_engaged = false;
    loops.climb_setpoint = None;
    loops.settled_for = 0.0;
    loops
}

fn velocity_and_altitude(
    cmd: &Twist,
    state: &RigidBodyState,
    cfg: &BridgeConfig,
    loops: &mut ControllerBank,
    altitude_set: f64,
    dt: f64,
) -> AttitudeSetpoint {
    let (vx_body, vy_body) = state.body_velocity();
    let forward = loops.vel_x.update(cmd.linear.x, vx_body, dt);
    let left = loops.vel_y.update(cmd.linear.y, vy_body, dt);
    let alt = loops.altitude.update(altitude_set, state.position[2], dt);
    let tilt = state.roll().cos() * state.pitch().cos();
    let thrust = ((cfg.mass * cfg.gravity + alt) / tilt).clamp(0.0, cfg.max_thrust);
    loops.commanded = *cmd;
    AttitudeSetpoint {
        thrust,
        roll_set: left.clamp(-cfg.max_tilt, cfg.max_tilt),
        pitch_set: (-forward).clamp(-cfg.max_tilt, cfg.max_tilt),
        yaw_rate_set: cmd.angular.z,
        altitude_set,
    }
}

/// Maps a Twist onto attitude setpoints while holding altitude.
/// `cmd.linear.z`, `cmd.angular.x` and `cmd.angular.y` are ignored.
pub fn twist_to_setpoints(
    cmd: &Twist,
    state: &RigidBodyState,
    cfg: &BridgeConfig,
    loops: &mut ControllerBank,
    dt: f64,
) -> Result<AttitudeSetpoint, ControlError> {
    if !loops.altitude_engaged {
        return Err(ControlError::NotAirborne);
    }
    let alt = loops.altitude_set;
    Ok(velocity_and_altitude(cmd, state, cfg, loops, alt, dt))
}

/// Inner loop: angle errors to roll/pitch torques, yaw-rate error to yaw torque.
pub fn attitude_loop(
    sp: &AttitudeSetpoint,
    state: &RigidBodyState,
    loops: &mut ControllerBank,
    dt: f64,
) -> WrenchCommand {
    let roll_err = angle_diff(sp.roll_set, state.roll());
    let pitch_err = angle_diff(sp.pitch_set, state.pitch());
    WrenchCommand {
        thrust: sp.thrust,
        torque_roll: loops.roll.update_error(roll_err, dt),
        torque_pitch: loops.pitch.update_error(pitch_err, dt),
        torque_yaw: loops.yaw_rate.update(sp.yaw_rate_set, state.body_rates[2], dt),
    }
}

/// Climbs to `target_alt` with zero horizontal command, then latches HOLD
/// once altitude and vertical speed stay within 0.05 for `hold_confirm`.
pub fn takeoff_sequencer(
    state: &RigidBodyState,
    target_alt: f64,
    cfg: &BridgeConfig,
    loops: &mut ControllerBank,
    dt: f64,
) -> (AttitudeSetpoint, TakeoffPhase) {
    if loops.altitude_engaged {
        let sp = velocity_and_altitude(&Twist::zero(), state, cfg, loops, target_alt, dt);
        return (sp, TakeoffPhase::Hold);
    }
    let z = state.position[2];
    let ramp = loops.climb_setpoint.unwrap_or(z);
    let ramp = (ramp + loops.climb_rate * dt).min(target_alt);
    loops.climb_setpoint = Some(ramp);
    let sp = velocity_and_altitude(&Twist::zero(), state, cfg, loops, ramp, dt);

    let near = (z - target_alt).abs() <= 0.05 && state.velocity[2].abs() <= 0.05;
    loops.settled_for = if near { loops.settled_for + dt } else { 0.0 };
    if loops.settled_for >= loops.hold_confirm - 1e-9 {
        loops.altitude_engaged = true;
        loops.altitude_set = target_alt;
        (sp, TakeoffPhase::Hold)
    } else {
        (sp, TakeoffPhase::Climb)
    }
}
