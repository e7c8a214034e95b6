//! Desk-scale environments: classic cartpole and a small predator/prey
//! gridworld with categorical spatial layers.

mod cartpole;
mod grid;

pub use cartpole::{CartpoleConfig, CartpoleState};
pub use grid::{Entity, EntityKind, GridAction, GridConfig, GridState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Cartpole,
    Gridworld,
}

impl EnvKind {
    pub fn num_actions(self) -> usize {
        match self {
            EnvKind::Cartpole => 2,
            EnvKind::Gridworld => GridAction::ALL.len(),
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvKind::Cartpole => "cartpole",
            EnvKind::Gridworld => "gridworld",
        })
    }
}

impl std::str::FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cartpole" => Ok(EnvKind::Cartpole),
            "gridworld" | "grid" => Ok(EnvKind::Gridworld),
            other => Err(format!("unknown environment '{other}'")),
        }
    }
}

/// What an agent sees at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Observation {
    /// Cartpole: position, velocity, angle, angular velocity.
    Vector { values: Vec<f64> },
    /// Gridworld: row-major kind codes and strengths.
    Grid {
        height: usize,
        width: usize,
        kinds: Vec<u8>,
        strengths: Vec<u8>,
    },
}

/// Per-environment settings carried in the experiment config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub cartpole: CartpoleConfig,
    pub grid: GridConfig,
}

#[derive(Debug, Clone)]
enum EnvState {
    Cartpole(CartpoleState),
    Grid(GridState),
}

/// A running episode of either environment behind one interface.
#[derive(Debug, Clone)]
pub struct Episode {
    kind: EnvKind,
    config: EnvConfig,
    state: EnvState,
    steps: usize,
    done: bool,
}

/// Result of one environment transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub done: bool,
}

impl Episode {
    pub fn reset(kind: EnvKind, config: &EnvConfig, seed: u64) -> Self {
        let state = match kind {
            EnvKind::Cartpole => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                EnvState::Cartpole(CartpoleState::random_start(&mut rng))
            }
            EnvKind::Gridworld => EnvState::Grid(GridState::reset(seed, &config.grid)),
        };
        Self {
            kind,
            config: config.clone(),
            state,
            steps: 0,
            done: false,
        }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn observe(&self) -> Observation {
        match &self.state {
            EnvState::Cartpole(s) => s.render(),
            EnvState::Grid(s) => s.render(),
        }
    }

    /// Applies `action` (index into the environment's action set).
    pub fn step(&mut self, action: usize) -> Result<Transition> {
        if self.done {
            return Err(crate::Error::Contract("step on a finished episode".into()));
        }
        let t = match &mut self.state {
            EnvState::Cartpole(s) => {
                let (next, reward, mut done) = s.step(action == 1, &self.config.cartpole)?;
                *s = next;
                if self.steps + 1 >= self.config.cartpole.max_steps {
                    done = true;
                }
                Transition { reward, done }
            }
            EnvState::Grid(s) => {
                let a = GridAction::ALL.get(action).copied().unwrap_or(GridAction::Stay);
                let (next, reward, done) = s.step(a, &self.config.grid);
                *s = next;
                Transition { reward, done }
            }
        };
        self.steps += 1;
        self.done = t.done;
        Ok(t)
    }
}
