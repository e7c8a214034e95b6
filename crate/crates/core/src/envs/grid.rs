use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Observation;

/// Entity kinds in code order; the code is the categorical value written to
/// the kind layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Empty,
    Player,
    Wanderer,
    Bouncer,
    Chaser,
    Food,
}

impl EntityKind {
    pub const ALL: [EntityKind; 6] = [
        EntityKind::Empty,
        EntityKind::Player,
        EntityKind::Wanderer,
        EntityKind::Bouncer,
        EntityKind::Chaser,
        EntityKind::Food,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityKind::Empty => "empty",
            EntityKind::Player => "player",
            EntityKind::Wanderer => "wanderer",
            EntityKind::Bouncer => "bouncer",
            EntityKind::Chaser => "chaser",
            EntityKind::Food => "food",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridAction {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl GridAction {
    pub const ALL: [GridAction; 5] = [
        GridAction::Up,
        GridAction::Down,
        GridAction::Left,
        GridAction::Right,
        GridAction::Stay,
    ];

    fn delta(self) -> (isize, isize) {
        match self {
            GridAction::Up => (-1, 0),
            GridAction::Down => (1, 0),
            GridAction::Left => (0, -1),
            GridAction::Right => (0, 1),
            GridAction::Stay => (0, 0),
        }
    }
}

/// Rules and magnitudes for the gridworld. Reward values and strength
/// progression are configuration, not part of the dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub wanderers: usize,
    pub bouncers: usize,
    pub chasers: usize,
    pub food: usize,
    pub player_strength: u8,
    /// Upper bound on any strength; also the encoding range of the
    /// strength layer.
    pub max_strength: u8,
    pub wanderer_strength: (u8, u8),
    pub bouncer_strength: (u8, u8),
    pub chaser_strength: (u8, u8),
    /// Strength gained by the player per consumption.
    pub strength_gain: u8,
    pub reward_per_strength: f64,
    pub consumed_penalty: f64,
    pub stall_penalty: f64,
    /// Chasers move once every `chaser_period` steps.
    pub chaser_period: usize,
    pub max_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            wanderers: 3,
            bouncers: 2,
            chasers: 1,
            food: 4,
            player_strength: 2,
            max_strength: 6,
            wanderer_strength: (1, 3),
            bouncer_strength: (1, 4),
            chaser_strength: (3, 5),
            strength_gain: 1,
            reward_per_strength: 1.0,
            consumed_penalty: -5.0,
            stall_penalty: -0.1,
            chaser_period: 2,
            max_steps: 40,
        }
    }
}

/// One cell occupant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entity {
    pub kind: EntityKind,
    pub strength: u8,
    /// Bouncer heading; unused by the other kinds.
    pub heading: (i8, i8),
}

/// Full gridworld state, including the episode's random stream.
#[derive(Debug, Clone)]
pub struct GridState {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<Option<Entity>>,
    pub player: (usize, usize),
    pub step: usize,
    rng: ChaCha8Rng,
}

impl PartialEq for GridState {
    fn eq(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.cells == other.cells
            && self.player == other.player
            && self.step == other.step
    }
}

impl GridState {
    pub fn reset(seed: u64, cfg: &GridConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.height * cfg.width;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut cells = vec![None; n];
        let mut slots = order.into_iter();
        let mut place = |rng: &mut ChaCha8Rng, kind: EntityKind, range: (u8, u8)| {
            if let Some(idx) = slots.next() {
                let strength = rng.random_range(range.0..=range.1).min(cfg.max_strength);
                let heading = match rng.random_range(0..4) {
                    0 => (0, 1),
                    1 => (0, -1),
                    2 => (1, 0),
                    _ => (-1, 0),
                };
                cells[idx] = Some(Entity {
                    kind,
                    strength,
                    heading,
                });
                Some(idx)
            } else {
                None
            }
        };
        let p = place(&mut rng, EntityKind::Player, (cfg.player_strength, cfg.player_strength))
            .expect("grid has at least one cell");
        for _ in 0..cfg.wanderers {
            place(&mut rng, EntityKind::Wanderer, cfg.wanderer_strength);
        }
        for _ in 0..cfg.bouncers {
            place(&mut rng, EntityKind::Bouncer, cfg.bouncer_strength);
        }
        for _ in 0..cfg.chasers {
            place(&mut rng, EntityKind::Chaser, cfg.chaser_strength);
        }
        for _ in 0..cfg.food {
            place(&mut rng, EntityKind::Food, (1, 1));
        }
        Self {
            height: cfg.height,
            width: cfg.width,
            cells,
            player: (p / cfg.width, p % cfg.width),
            step: 0,
            rng,
        }
    }

    /// Builds a state from explicit cells; used for hand-made scenes.
    pub fn from_cells(height: usize, width: usize, cells: Vec<Option<Entity>>, seed: u64) -> Option<Self> {
        let players: Vec<usize> = cells
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c, Some(e) if e.kind == EntityKind::Player))
            .map(|(i, _)| i)
            .collect();
        if players.len() != 1 || cells.len() != height * width {
            return None;
        }
        Some(Self {
            height,
            width,
            player: (players[0] / width, players[0] % width),
            cells,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn idx(&self, (r, c): (usize, usize)) -> usize {
        r * self.width + c
    }

    fn offset(&self, (r, c): (usize, usize), (dr, dc): (isize, isize)) -> Option<(usize, usize)> {
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        (nr >= 0 && nc >= 0 && (nr as usize) < self.height && (nc as usize) < self.width).then(|| (nr as usize, nc as usize))
    }

    pub fn player_entity(&self) -> Entity {
        self.cells[self.idx(self.player)].expect("player cell occupied")
    }

    pub fn entity_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Player moves first, then every other entity in row-major order of
    /// its position at the start of the step.
    pub fn step(&self, action: GridAction, cfg: &GridConfig) -> (GridState, f64, bool) {
        let mut s = self.clone();
        s.step += 1;
        let mut reward = 0.0;
        let mut player = s.player_entity();

        let mut moved = false;
        if let Some(target) = s.offset(s.player, action.delta()).filter(|_| action != GridAction::Stay) {
            let ti = s.idx(target);
            match s.cells[ti] {
                None => moved = true,
                Some(other) if other.strength < player.strength => {
                    reward += cfg.reward_per_strength * other.strength as f64;
                    player.strength = player.strength.saturating_add(cfg.strength_gain).min(cfg.max_strength);
                    moved = true;
                }
                Some(other) if other.strength > player.strength => {
                    let pi = s.idx(s.player);
                    s.cells[pi] = None;
                    return (s, reward + cfg.consumed_penalty, true);
                }
                Some(_) => {}
            }
            if moved {
                let pi = s.idx(s.player);
                s.cells[pi] = None;
                s.cells[ti] = Some(player);
                s.player = target;
            }
        }
        if !moved {
            reward += cfg.stall_penalty;
            let pi = s.idx(s.player);
            s.cells[pi] = Some(player);
        }

        let movers: Vec<(usize, usize)> = (0..s.height)
            .flat_map(|r| (0..s.width).map(move |c| (r, c)))
            .filter(|&p| matches!(s.cells[s.idx(p)], Some(e) if e.kind != EntityKind::Player && e.kind != EntityKind::Food))
            .collect();
        for pos in movers {
            let Some(mut e) = s.cells[s.idx(pos)] else { continue };
            let delta = match e.kind {
                EntityKind::Wanderer => GridAction::ALL[s.rng.random_range(0..GridAction::ALL.len())].delta(),
                EntityKind::Bouncer => {
                    let mut h = (e.heading.0 as isize, e.heading.1 as isize);
                    if s.offset(pos, h).is_none() {
                        h = (-h.0, -h.1);
                        e.heading = (h.0 as i8, h.1 as i8);
                    }
                    h
                }
                EntityKind::Chaser if cfg.chaser_period > 0 && s.step % cfg.chaser_period == 0 => {
                    let dr = s.player.0 as isize - pos.0 as isize;
                    let dc = s.player.1 as isize - pos.1 as isize;
                    if dc.abs() >= dr.abs() {
                        (0, dc.signum())
                    } else {
                        (dr.signum(), 0)
                    }
                }
                _ => (0, 0),
            };
            let from = s.idx(pos);
            let mut to = pos;
            if let Some(target) = s.offset(pos, delta).filter(|_| delta != (0, 0)) {
                let ti = s.idx(target);
                match s.cells[ti] {
                    None => to = target,
                    Some(o) if o.kind == EntityKind::Player => {
                        if e.strength > o.strength {
                            s.cells[ti] = None;
                            s.cells[from] = None;
                            s.cells[ti] = Some(e);
                            return (s, reward + cfg.consumed_penalty, true);
                        }
                    }
                    Some(_) => {}
                }
            }
            s.cells[from] = None;
            let ti = s.idx(to);
            s.cells[ti] = Some(e);
        }

        let done = s.step >= cfg.max_steps;
        (s, reward, done)
    }

    pub fn render(&self) -> Observation {
        let kinds = self
            .cells
            .iter()
            .map(|c| c.map_or(EntityKind::Empty, |e| e.kind).code())
            .collect();
        let strengths = self.cells.iter().map(|c| c.map_or(0, |e| e.strength)).collect();
        Observation::Grid {
            height: self.height,
            width: self.width,
            kinds,
            strengths,
        }
    }
}
