//! Multi-rate flight stack: the outer (bridge / takeoff) loop runs every
//! `control_div` physics steps and its setpoint is held in between; the
//! attitude loop and mixer run every physics step.

use crate::control::{
    attitude_loop, reset_controllers, takeoff_sequencer, twist_to_setpoints, AttitudeSetpoint,
    BridgeConfig, ControllerBank, ControllerConfig, TakeoffPhase, Twist,
};
use crate::vehicle::{
    mix_saturated, step_dynamics, RigidBodyState, RotorSpeeds, VehicleError, VehicleParams,
    WrenchCommand,
};

#[derive(Debug, Clone)]
pub struct FlightStack {
    pub params: VehicleParams,
    pub config: ControllerConfig,
    pub bridge: BridgeConfig,
    pub bank: ControllerBank,
    pub phase: TakeoffPhase,
    pub setpoint: AttitudeSetpoint,
    pub last_wrench: WrenchCommand,
    pub last_rotors: RotorSpeeds,
    physics_dt: f64,
    control_div: u64,
    steps: u64,
}

impl FlightStack {
    pub fn new(params: VehicleParams, config: ControllerConfig, physics_dt: f64, control_div: u64) -> Self {
        let bridge = BridgeConfig::new(&config, &params);
        let bank = ControllerBank::new(&config);
        Self {
            params,
            config,
            bridge,
            bank,
            phase: TakeoffPhase::Climb,
            setpoint: AttitudeSetpoint::default(),
            last_wrench: WrenchCommand::default(),
            last_rotors: RotorSpeeds::default(),
            physics_dt,
            control_div: control_div.max(1),
            steps: 0,
        }
    }

    pub fn reset(&mut self) {
        self.bank = reset_controllers(self.bank.clone());
        self.phase = TakeoffPhase::Climb;
        self.setpoint = AttitudeSetpoint::default();
        self.steps = 0;
    }

    pub fn control_dt(&self) -> f64 {
        self.physics_dt * self.control_div as f64
    }

    pub fn is_airborne(&self) -> bool {
        self.phase == TakeoffPhase::Hold
    }

    /// Advances the vehicle by one physics step. `cmd` is only read on
    /// control ticks and is ignored until the takeoff sequencer reaches HOLD.
    pub fn step(&mut self, state: &RigidBodyState, cmd: &Twist) -> Result<RigidBodyState, VehicleError> {
        if self.steps.is_multiple_of(self.control_div) {
            let dt = self.control_dt();
            let target = self.config.hover_altitude;
            self.setpoint = if self.phase == TakeoffPhase::Hold {
                twist_to_setpoints(cmd, state, &self.bridge, &mut self.bank, dt)
                    .expect("altitude hold engaged in HOLD phase")
            } else {
                let (sp, phase) = takeoff_sequencer(state, target, &self.bridge, &mut self.bank, dt);
                self.phase = phase;
                sp
            };
        }
        self.steps += 1;
        let wrench = attitude_loop(&self.setpoint, state, &mut self.bank, self.physics_dt);
        let rotors = mix_saturated(&wrench, &self.params);
        self.last_wrench = wrench;
        self.last_rotors = rotors;
        step_dynamics(state, &rotors, &self.params, self.physics_dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn climbs_off_the_ground() {
        let mut fs = FlightStack::new(VehicleParams::default(), ControllerConfig::default(), 0.002, 10);
        let mut s = RigidBodyState::default();
        for _ in 0..500 {
            s = fs.step(&s, &Twist::zero()).unwrap();
        }
        assert!(s.position[2] > 0.2, "{:?}", s.position);
    }
}
