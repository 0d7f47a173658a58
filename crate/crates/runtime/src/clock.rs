//! Fixed-step simulation clock. Time is derived from the step count so it
//! never accumulates rounding.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockConfig {
    pub physics_dt: f64,
    pub control_div: u64,
    pub sensor_div: u64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            physics_dt: 0.002,
            control_div: 10,
            sensor_div: 50,
        }
    }
}

impl ClockConfig {
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if !(self.physics_dt > 0.0 && self.physics_dt <= 0.01) {
            out.push(("physics_dt", "must lie in (0, 0.01] s".to_string()));
        }
        if self.control_div == 0 {
            out.push(("control_div", "must be at least 1".to_string()));
        }
        if self.sensor_div == 0 || !self.sensor_div.is_multiple_of(self.control_div.max(1)) {
            out.push(("sensor_div", "must be a positive multiple of control_div".to_string()));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimClock {
    pub config: ClockConfig,
    pub steps: u64,
}

impl SimClock {
    pub fn new(config: ClockConfig) -> Self {
        Self { config, steps: 0 }
    }

    pub fn now(&self) -> f64 {
        self.steps as f64 * self.config.physics_dt
    }

    /// Whether the step about to run is a control tick.
    pub fn is_control_tick(&self) -> bool {
        self.steps.is_multiple_of(self.config.control_div)
    }

    pub fn is_sensor_tick(&self) -> bool {
        self.steps.is_multiple_of(self.config.sensor_div)
    }

    pub fn advance(&mut self) {
        self.steps += 1;
    }

    pub fn sensor_period(&self) -> f64 {
        self.config.physics_dt * self.config.sensor_div as f64
    }

    pub fn control_period(&self) -> f64 {
        self.config.physics_dt * self.config.control_div as f64
    }

    /// Physics steps covering `seconds` of simulated time.
    pub fn steps_for(&self, seconds: f64) -> u64 {
        (seconds / self.config.physics_dt).round().max(0.0) as u64
    }
}
