//! Planar lander attitude: angle and angular velocity driven by thruster
//! torque, a toppling term and a random disturbance torque. The ambient
//! observation is a tilt indicator equal to the true angle.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TiltLanderConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Thruster torque magnitude.
    pub torque: f64,
    /// Gain of the `sin(angle)` toppling torque.
    pub instability: f64,
    pub damping: f64,
    /// Standard deviation of the per-step disturbance torque.
    pub disturbance_std: f64,
    pub initial_angle_std: f64,
}

impl Default for TiltLanderConfig {
    fn default() -> Self {
        Self {
            horizon: 150,
            dt: 0.1,
            torque: 0.5,
            instability: 1.0,
            damping: 0.5,
            disturbance_std: 0.3,
            initial_angle_std: 0.05,
        }
    }
}

impl TiltLanderConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.horizon > 0
            && self.dt > 0.0
            && self.torque >= 0.0
            && self.damping >= 0.0
            && self.disturbance_std >= 0.0
            && self.initial_angle_std >= 0.0
            && self.instability.is_finite();
        if ok {
            Ok(())
        } else {
            Err(EnvError::InvalidConfig(format!("bad lander config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanderAction {
    /// Positive torque (rotates clockwise, increasing the angle).
    FireLeft,
    /// Negative torque (rotates counter-clockwise, decreasing the angle).
    FireRight,
    NoOp,
}

impl LanderAction {
    pub const ALL: [LanderAction; 3] = [LanderAction::FireLeft, LanderAction::FireRight, LanderAction::NoOp];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    fn torque_sign(self) -> f64 {
        match self {
            LanderAction::FireLeft => 1.0,
            LanderAction::FireRight => -1.0,
            LanderAction::NoOp => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LanderState {
    pub angle: f64,
    pub angular_velocity: f64,
}

/// Wraps an angle into `[-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    if (-PI..=PI).contains(&angle) {
        return angle;
    }
    let wrapped = (angle + PI).rem_euclid(2.0 * PI) - PI;
    wrapped.clamp(-PI, PI)
}

/// One episode: initial angle and disturbance torques are drawn up front so
/// seed-paired runs share them.
#[derive(Debug, Clone)]
pub struct TiltLanderEnv {
    config: TiltLanderConfig,
    initial: LanderState,
    disturbances: Vec<f64>,
}

impl TiltLanderEnv {
    pub fn generate<R: Rng + ?Sized>(config: TiltLanderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let angle = if config.initial_angle_std > 0.0 {
            Normal::new(0.0, config.initial_angle_std).expect("finite").sample(rng)
        } else {
            0.0
        };
        let disturbances = if config.disturbance_std > 0.0 {
            let normal = Normal::new(0.0, config.disturbance_std).expect("finite");
            (0..config.horizon).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; config.horizon]
        };
        Ok(Self {
            initial: LanderState {
                angle: wrap_angle(angle),
                angular_velocity: 0.0,
            },
            config,
            disturbances,
        })
    }

    pub fn config(&self) -> &TiltLanderConfig {
        &self.config
    }

    pub fn reset(&self) -> LanderState {
        self.initial
    }

    pub fn disturbance(&self, t: usize) -> f64 {
        self.disturbances.get(t).copied().unwrap_or(0.0)
    }

    /// Tilt indicator shown by default: the true angle.
    pub fn observe(&self, state: &LanderState) -> f64 {
        state.angle
    }

    pub fn transition(&self, state: &LanderState, action: LanderAction, disturbance: f64) -> LanderState {
        let c = &self.config;
        let accel = action.torque_sign() * c.torque + c.instability * state.angle.sin()
            - c.damping * state.angular_velocity
            + disturbance;
        let angular_velocity = state.angular_velocity + c.dt * accel;
        LanderState {
            angle: wrap_angle(state.angle + c.dt * angular_velocity),
            angular_velocity,
        }
    }

    /// Step at time `t`; reward is `-|angle|`, terminal at the horizon.
    pub fn step(&self, state: &LanderState, action: usize, t: usize) -> Result<(LanderState, f64, bool)> {
        let action = LanderAction::from_index(action).ok_or(EnvError::InvalidAction { action, num_actions: 3 })?;
        let next = self.transition(state, action, self.disturbance(t));
        Ok((next, -next.angle.abs(), t + 1 >= self.config.horizon))
    }
}
