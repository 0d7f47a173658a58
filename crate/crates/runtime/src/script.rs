//! Headless runs: a timed list of commands and waits executed against a
//! [`Sim`], producing a [`MetricsReport`].

use std::path::Path;
use std::time::Instant;

use dronenav_core::geom::{angle_diff, Pose2D};
use dronenav_core::nav::NavState;
use dronenav_core::world::WorldModel;
use serde::{Deserialize, Serialize};

use crate::protocol::Command;
use crate::scenario::Mode;
use crate::sim::{PoseError, Sim, SimStatus};

fn default_timeout() -> f64 {
    600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NearTarget {
    pub x: f64,
    pub y: f64,
    pub tolerance: f64,
    pub limit: f64,
}

fn default_teleop_speed() -> f64 {
    0.4
}

fn default_teleop_turn() -> f64 {
    1.0
}

fn default_teleop_tolerance() -> f64 {
    0.1
}

/// Operator stand-in: streams teleop commands at 15 Hz steering toward a
/// point, turning in place first when the heading is far off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeleopTarget {
    pub x: f64,
    pub y: f64,
    #[serde(default = "default_teleop_speed")]
    pub speed: f64,
    #[serde(default = "default_teleop_turn")]
    pub turn_rate: f64,
    #[serde(default = "default_teleop_tolerance")]
    pub tolerance: f64,
    pub limit: f64,
}

pub const TELEOP_RATE_HZ: f64 = 15.0;

/// One script step. Present fields run in this order: `at`, `wait`,
/// `world`, `do`, `wait_airborne`, `teleop_to`, `wait_nav`, `wait_near`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptStep {
    /// Absolute sim time to wait for.
    pub at: Option<f64>,
    /// Seconds to wait.
    pub wait: Option<f64>,
    /// Replaces the true world (the maps and estimators are untouched).
    pub world: Option<WorldModel>,
    #[serde(rename = "do")]
    pub command: Option<Command>,
    /// Waits up to this many seconds for takeoff to finish.
    pub wait_airborne: Option<f64>,
    pub teleop_to: Option<TeleopTarget>,
    /// Waits up to this many seconds for the active goal to finish and
    /// records its outcome.
    pub wait_nav: Option<f64>,
    pub wait_near: Option<NearTarget>,
}

impl ScriptStep {
    pub fn command(c: Command) -> Self {
        Self {
            command: Some(c),
            ..Default::default()
        }
    }

    pub fn wait(seconds: f64) -> Self {
        Self {
            wait: Some(seconds),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    /// Total sim-time budget in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default)]
    pub steps: Vec<ScriptStep>,
}

impl Default for Script {
    fn default() -> Self {
        Self {
            timeout: default_timeout(),
            steps: Vec::new(),
        }
    }
}

impl Script {
    pub fn problems(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if !(self.timeout > 0.0) {
            out.push(("timeout".into(), format!("must be positive, got {}", self.timeout)));
        }
        for (i, s) in self.steps.iter().enumerate() {
            let durations = [
                ("at", s.at),
                ("wait", s.wait),
                ("wait_airborne", s.wait_airborne),
                ("wait_nav", s.wait_nav),
                ("teleop_to.limit", s.teleop_to.as_ref().map(|t| t.limit)),
            ];
            for (k, v) in durations {
                if v.is_some_and(|v| !(v >= 0.0)) {
                    out.push((format!("steps[{i}].{k}"), "must be non-negative".into()));
                }
            }
            if let Some(w) = &s.world {
                for p in w.problems() {
                    out.push((format!("steps[{i}].world"), p));
                }
            }
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("invalid script: {0}")]
    Invalid(String),
}

pub fn parse_script(text: &str) -> Result<Script, ScriptError> {
    let de = serde_yaml::Deserializer::from_str(text);
    let script: Script = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ScriptError::Invalid(format!("{path}: {}", e.into_inner()))
    })?;
    let problems = script.problems();
    if !problems.is_empty() {
        let list: Vec<String> = problems.iter().map(|(k, m)| format!("{k}: {m}")).collect();
        return Err(ScriptError::Invalid(list.join("; ")));
    }
    Ok(script)
}

pub fn load_script(path: &Path) -> Result<Script, ScriptError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_script(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalOutcome {
    pub goal: Pose2D,
    pub state: NavState,
    pub started: f64,
    pub duration: f64,
    /// Truth pose error at the end.
    pub xy_error: f64,
    pub yaw_error: f64,
    /// Navigator reported success and the true pose is within tolerance.
    pub success: bool,
    pub collisions: u32,
    pub replans: u32,
    pub path_cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunEvent {
    Command {
        t: f64,
        step: usize,
        command: Command,
        ok: bool,
        detail: String,
    },
    WorldSwap {
        t: f64,
        step: usize,
    },
    Goal(GoalOutcome),
    WaitExpired {
        t: f64,
        step: usize,
        what: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub xy: f64,
    pub yaw_deg: f64,
}

impl ErrorSummary {
    fn of(est: &Pose2D, truth: &Pose2D) -> Self {
        Self {
            xy: est.distance(truth),
            yaw_deg: angle_diff(est.theta, truth.theta).abs().to_degrees(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub commands: usize,
    pub rejected: usize,
    pub steps: u64,
    pub sim_time: f64,
    pub wall_time: f64,
    pub mode: Mode,
    /// Occupied-cell IoU of the SLAM map, when mapping.
    pub map_iou: Option<f64>,
    pub slam_error: Option<ErrorSummary>,
    pub odometry_error: ErrorSummary,
    pub localization_errors: Vec<PoseError>,
    pub goals: Vec<GoalOutcome>,
    pub goals_succeeded: usize,
    pub path_cost: Option<f64>,
    pub collisions: u32,
    pub status: String,
    pub timed_out: bool,
    pub hash: String,
}

#[derive(Debug, thiserror::Error)]
#[error("script timed out at {:.1} s sim time", report.sim_time)]
pub struct TimeoutError {
    pub report: Box<MetricsReport>,
}

pub fn report(sim: &Sim, commands: usize, rejected: usize, goals: Vec<GoalOutcome>, wall: f64, timed_out: bool) -> MetricsReport {
    let truth = sim.truth_pose();
    MetricsReport {
        commands,
        rejected,
        steps: sim.clock.steps,
        sim_time: sim.now(),
        wall_time: wall,
        mode: sim.mode,
        map_iou: sim.map_iou(),
        slam_error: sim.slam.as_ref().map(|s| ErrorSummary::of(&s.pose, &truth)),
        odometry_error: ErrorSummary::of(&sim.dead_reckoning, &truth),
        localization_errors: sim.localization_errors.clone(),
        goals_succeeded: goals.iter().filter(|g| g.success).count(),
        goals,
        path_cost: sim.navigator.path.as_ref().map(|p| p.cost.value()),
        collisions: sim.collisions,
        status: sim.status.label(),
        timed_out,
        hash: sim.hash(),
    }
}

struct Runner<'a, F: FnMut(&RunEvent)> {
    sim: &'a mut Sim,
    deadline: u64,
    on_event: F,
    commands: usize,
    rejected: usize,
    goals: Vec<GoalOutcome>,
    goal_start: Option<(f64, u32)>,
}

/// Stops a wait early: the sim crashed or the whole run ran out of time.
enum Halt {
    Timeout,
    Crashed,
}

impl<F: FnMut(&RunEvent)> Runner<'_, F> {
    /// Steps until `done` holds or `limit` sim seconds pass; Ok(false) when
    /// the limit expired.
    fn wait_until(&mut self, limit: f64, mut done: impl FnMut(&Sim) -> bool) -> Result<bool, Halt> {
        let end = self.sim.clock.steps.saturating_add(self.sim.clock.steps_for(limit));
        loop {
            if done(self.sim) {
                return Ok(true);
            }
            if self.sim.status != SimStatus::Running {
                return Err(Halt::Crashed);
            }
            if self.sim.clock.steps >= self.deadline {
                return Err(Halt::Timeout);
            }
            if self.sim.clock.steps >= end {
                return Ok(false);
            }
            self.sim.step();
        }
    }

    fn expired(&mut self, step: usize, what: &str) {
        (self.on_event)(&RunEvent::WaitExpired {
            t: self.sim.now(),
            step,
            what: what.into(),
        });
    }

    fn run_step(&mut self, i: usize, s: &ScriptStep) -> Result<(), Halt> {
        if let Some(at) = s.at {
            let target = self.sim.clock.steps_for(at);
            self.wait_until(f64::INFINITY, |sim| sim.clock.steps >= target)?;
        }
        if let Some(w) = s.wait {
            self.wait_until(w, |_| false)?;
        }
        if let Some(world) = &s.world {
            self.sim.world = world.clone();
            (self.on_event)(&RunEvent::WorldSwap { t: self.sim.now(), step: i });
        }
        if let Some(cmd) = &s.command {
            self.commands += 1;
            let result = self.sim.apply(cmd);
            if result.is_ok() && matches!(cmd, Command::SetGoal { .. }) {
                self.goal_start = Some((self.sim.now(), self.sim.collisions));
            }
            let (ok, detail) = match result {
                Ok(d) => (true, d),
                Err(e) => {
                    self.rejected += 1;
                    (false, e.to_string())
                }
            };
            (self.on_event)(&RunEvent::Command {
                t: self.sim.now(),
                step: i,
                command: cmd.clone(),
                ok,
                detail,
            });
        }
        if let Some(limit) = s.wait_airborne {
            if !self.wait_until(limit, |sim| sim.flight.is_airborne())? {
                self.expired(i, "wait_airborne");
            }
        }
        if let Some(target) = &s.teleop_to {
            if !self.teleop_to(target)? {
                self.expired(i, "teleop_to");
            }
        }
        if let Some(limit) = s.wait_nav {
            let finished = self.wait_until(limit, |sim| {
                !matches!(
                    sim.navigator.state(),
                    NavState::Planning | NavState::Following | NavState::Recovering
                )
            })?;
            if !finished {
                self.expired(i, "wait_nav");
            }
            self.record_goal();
            if !finished {
                self.sim.apply(&Command::CancelGoal).ok();
            }
        }
        if let Some(n) = &s.wait_near {
            let (x, y, tol) = (n.x, n.y, n.tolerance);
            let near = self.wait_until(n.limit, |sim| {
                let p = sim.truth_pose();
                (p.x - x).hypot(p.y - y) <= tol
            })?;
            if !near {
                self.expired(i, "wait_near");
            }
        }
        Ok(())
    }

    fn teleop_to(&mut self, t: &TeleopTarget) -> Result<bool, Halt> {
        let period = self.sim.clock.steps_for(1.0 / TELEOP_RATE_HZ).max(1);
        let end = self.sim.clock.steps.saturating_add(self.sim.clock.steps_for(t.limit));
        let mut reached = false;
        while self.sim.clock.steps < end {
            let p = self.sim.truth_pose();
            let (dx, dy) = (t.x - p.x, t.y - p.y);
            if dx.hypot(dy) <= t.tolerance {
                reached = true;
                break;
            }
            let err = angle_diff(dy.atan2(dx), p.theta);
            let omega = (2.0 * err).clamp(-t.turn_rate, t.turn_rate);
            let v = if err.abs() > 0.3 { 0.0 } else { t.speed.min(dx.hypot(dy)) };
            self.commands += 1;
            let _ = self.sim.apply(&Command::teleop(v, omega));
            let until = self.sim.clock.steps + period;
            self.wait_until(f64::INFINITY, |sim| sim.clock.steps >= until)?;
        }
        self.commands += 1;
        let _ = self.sim.apply(&Command::teleop(0.0, 0.0));
        Ok(reached)
    }

    fn record_goal(&mut self) {
        let Some(goal) = self.sim.navigator.status.active_goal else {
            return;
        };
        let (started, collisions_before) = self.goal_start.take().unwrap_or((self.sim.now(), self.sim.collisions));
        let truth = self.sim.truth_pose();
        let cfg = &self.sim.scenario.nav;
        let xy_error = truth.distance(&goal);
        let yaw_error = angle_diff(truth.theta, goal.theta).abs();
        let state = self.sim.navigator.state();
        let collisions = self.sim.collisions - collisions_before;
        let outcome = GoalOutcome {
            goal,
            state,
            started,
            duration: self.sim.now() - started,
            xy_error,
            yaw_error,
            success: state == NavState::Succeeded
                && xy_error <= cfg.xy_tolerance
                && yaw_error <= cfg.yaw_tolerance
                && collisions == 0,
            collisions,
            replans: self.sim.navigator.replans,
            path_cost: self.sim.navigator.path.as_ref().map(|p| p.cost.value()),
        };
        (self.on_event)(&RunEvent::Goal(outcome.clone()));
        self.goals.push(outcome);
    }
}

/// Runs `script` against `sim`, reporting every event to `on_event`.
pub fn run_script(
    sim: &mut Sim,
    script: &Script,
    on_event: impl FnMut(&RunEvent),
) -> Result<MetricsReport, TimeoutError> {
    let wall = Instant::now();
    let deadline = sim.clock.steps.saturating_add(sim.clock.steps_for(script.timeout));
    let mut r = Runner {
        sim,
        deadline,
        on_event,
        commands: 0,
        rejected: 0,
        goals: Vec::new(),
        goal_start: None,
    };
    let mut timed_out = false;
    for (i, s) in script.steps.iter().enumerate() {
        match r.run_step(i, s) {
            Ok(()) => {}
            Err(Halt::Crashed) => break,
            Err(Halt::Timeout) => {
                timed_out = true;
                break;
            }
        }
    }
    let out = report(r.sim, r.commands, r.rejected, r.goals, wall.elapsed().as_secs_f64(), timed_out);
    if timed_out {
        Err(TimeoutError { report: Box::new(out) })
    } else {
        Ok(out)
    }
}

pub fn run_headless(sim: &mut Sim, script: &Script) -> Result<MetricsReport, TimeoutError> {
    run_script(sim, script, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;

    #[test]
    fn empty_script_reports_nothing() {
        let mut sim = Sim::new(Scenario::sample()).unwrap();
        let r = run_headless(&mut sim, &Script::default()).unwrap();
        assert_eq!(r.commands, 0);
        assert_eq!(r.steps, 0);
        assert!(r.goals.is_empty());
        assert!(!r.timed_out);
        assert_eq!(r.hash.len(), 64);
    }

    #[test]
    fn timeout_keeps_partial_metrics() {
        let mut sim = Sim::new(Scenario::sample()).unwrap();
        let script = Script {
            timeout: 0.5,
            steps: vec![ScriptStep::command(Command::teleop(0.0, 0.0)), ScriptStep::wait(2.0)],
        };
        let err = run_headless(&mut sim, &script).unwrap_err();
        assert!(err.report.timed_out);
        assert_eq!(err.report.commands, 1);
        assert_eq!(err.report.steps, 250);
    }

    #[test]
    fn script_yaml_parses() {
        let s = parse_script(
            "timeout: 30\nsteps:\n  - wait_airborne: 10\n  - do: {type: teleop_twist, linear: {x: 0.2}}\n    wait: 1\n  - do: {type: save_map, path: out/map}\n",
        )
        .unwrap();
        assert_eq!(s.steps.len(), 3);
        assert_eq!(s.steps[1].command, Some(Command::teleop(0.2, 0.0)));
        assert!(parse_script("steps:\n  - wiat: 1\n").is_err());
        assert!(parse_script("timeout: -1\n").is_err());
    }
}
