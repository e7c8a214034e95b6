use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Observation;
use crate::error::{Error, Result};

/// Classic cart-pole constants (Barto, Sutton & Anderson).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartpoleConfig {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Half the pole length.
    pub half_length: f64,
    pub force: f64,
    pub dt: f64,
    pub angle_threshold: f64,
    pub track_bound: f64,
    pub max_steps: usize,
    /// Encoding bounds for the two velocity features.
    pub velocity_bound: f64,
    pub angular_velocity_bound: f64,
}

impl Default for CartpoleConfig {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            force: 10.0,
            dt: 0.02,
            angle_threshold: 12.0_f64.to_radians(),
            track_bound: 2.4,
            max_steps: 200,
            velocity_bound: 3.0,
            angular_velocity_bound: 3.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartpoleState {
    pub position: f64,
    pub velocity: f64,
    pub angle: f64,
    pub angular_velocity: f64,
}

impl CartpoleState {
    pub fn random_start(rng: &mut impl Rng) -> Self {
        let mut u = || rng.random_range(-0.05..0.05);
        Self {
            position: u(),
            velocity: u(),
            angle: u(),
            angular_velocity: u(),
        }
    }

    pub fn is_terminal(&self, cfg: &CartpoleConfig) -> bool {
        self.angle.abs() > cfg.angle_threshold || self.position.abs() > cfg.track_bound
    }

    /// One Euler step; `push_right` selects the sign of the applied force.
    pub fn step(&self, push_right: bool, cfg: &CartpoleConfig) -> Result<(CartpoleState, f64, bool)> {
        if self.is_terminal(cfg) {
            return Err(Error::Contract(format!("cartpole step from terminal state {self:?}")));
        }
        let force = if push_right { cfg.force } else { -cfg.force };
        let total_mass = cfg.cart_mass + cfg.pole_mass;
        let pole_ml = cfg.pole_mass * cfg.half_length;
        let (sin, cos) = self.angle.sin_cos();
        let temp = (force + pole_ml * self.angular_velocity * self.angular_velocity * sin) / total_mass;
        let angular_acc = (cfg.gravity * sin - cos * temp)
            / (cfg.half_length * (4.0 / 3.0 - cfg.pole_mass * cos * cos / total_mass));
        let acc = temp - pole_ml * angular_acc * cos / total_mass;
        let next = CartpoleState {
            position: self.position + cfg.dt * self.velocity,
            velocity: self.velocity + cfg.dt * acc,
            angle: self.angle + cfg.dt * self.angular_velocity,
            angular_velocity: self.angular_velocity + cfg.dt * angular_acc,
        };
        let done = next.is_terminal(cfg);
        Ok((next, 1.0, done))
    }

    pub fn render(&self) -> Observation {
        Observation::Vector {
            values: vec![self.position, self.velocity, self.angle, self.angular_velocity],
        }
    }
}
