//! A small action-value learner per environment and the interestingness
//! variables derived from it.

use std::collections::VecDeque;
use std::path::Path;

use latentcf_autodiff::{Activation, Adam, AdamConfig, Reduction, Tape, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{encode_observation, FeatureSchema};
use crate::envs::{EntityKind, EnvConfig, EnvKind, Episode, Observation};
use crate::error::{Error, Result};
use crate::nn;

/// Outcome variables at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeVector {
    pub value: f64,
    pub confidence: f64,
    pub riskiness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeVariable {
    Value,
    Confidence,
    Riskiness,
}

impl OutcomeVariable {
    pub const ALL: [OutcomeVariable; 3] = [OutcomeVariable::Value, OutcomeVariable::Confidence, OutcomeVariable::Riskiness];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OutcomeVariable::Value => "value",
            OutcomeVariable::Confidence => "confidence",
            OutcomeVariable::Riskiness => "riskiness",
        }
    }
}

impl std::fmt::Display for OutcomeVariable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OutcomeVariable {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown outcome variable '{s}' (expected value, confidence or riskiness)"))
    }
}

impl OutcomeVector {
    pub fn get(&self, var: OutcomeVariable) -> f64 {
        match var {
            OutcomeVariable::Value => self.value,
            OutcomeVariable::Confidence => self.confidence,
            OutcomeVariable::Riskiness => self.riskiness,
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.value, self.confidence, self.riskiness]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            value: a[0],
            confidence: a[1],
            riskiness: a[2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub learning_rate: f64,
    pub episodes: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    /// Updates between target-network refreshes.
    pub target_sync: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episode budget over which epsilon decays linearly.
    pub epsilon_decay: f64,
    /// Softmax temperature of the behaviour policy.
    pub temperature: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Minimum mean evaluation return; `None` skips the check.
    pub return_floor: Option<f64>,
    pub calibration_episodes: usize,
    pub margin_percentile: f64,
    /// Grid only: half-width of the egocentric window fed to the network.
    pub view_radius: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self::for_env(EnvKind::Gridworld)
    }
}

impl AgentConfig {
    pub fn for_env(kind: EnvKind) -> Self {
        let base = Self {
            hidden: vec![64],
            gamma: 0.9,
            learning_rate: 1e-3,
            episodes: 600,
            batch_size: 32,
            replay_capacity: 20_000,
            warmup: 500,
            target_sync: 250,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.6,
            temperature: 1.0,
            eval_every: 100,
            eval_episodes: 30,
            return_floor: None,
            calibration_episodes: 30,
            margin_percentile: 0.95,
            view_radius: 2,
        };
        match kind {
            EnvKind::Gridworld => base,
            EnvKind::Cartpole => Self {
                gamma: 0.95,
                episodes: 300,
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AgentMeta {
    env: EnvKind,
    schema: FeatureSchema,
    hidden: Vec<usize>,
    gamma: f64,
    temperature: f64,
    margin_scale: f64,
    view_radius: usize,
}

/// Q(obs, ·) as an MLP over the encoded observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueAgent {
    pub env: EnvKind,
    pub schema: FeatureSchema,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub temperature: f64,
    /// Margin scale M for riskiness.
    pub margin_scale: f64,
    /// Half-width of the grid window the network sees.
    pub view_radius: usize,
    params: Vec<Tensor>,
}

/// Softmax of `q / temperature`.
pub fn softmax_policy(q: &[f64], temperature: f64) -> Vec<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Normalised entropy rescaled so a uniform policy gives -1 and a
/// deterministic one +1.
pub fn confidence_from_policy(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return 1.0;
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    let c = 2.0 * (1.0 - h / (p.len() as f64).ln()) - 1.0;
    c.clamp(-1.0, 1.0)
}

pub fn riskiness_from_q(q: &[f64], margin_scale: f64) -> f64 {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = q.iter().copied().fold(f64::INFINITY, f64::min);
    (2.0 * (max - min) / margin_scale - 1.0).clamp(-1.0, 1.0)
}

impl ValueAgent {
    /// A freshly initialised (untrained) agent.
    pub fn new(kind: EnvKind, env: &EnvConfig, config: &AgentConfig, seed: u64) -> Self {
        let schema = FeatureSchema::for_env(kind, env);
        let mut sizes = vec![view_dim(kind, &schema, config.view_radius)];
        sizes.extend(&config.hidden);
        sizes.push(kind.num_actions());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = nn::init_mlp(&mut rng, &sizes);
        // A zero output layer keeps the random hidden features out of the
        // initial Q function, so an untrained agent acts uniformly at random.
        let last = params.len() - 2;
        params[last] = Tensor::zeros(params[last].shape());
        nn::round_to_f32(&mut params);
        Self {
            env: kind,
            schema,
            hidden: config.hidden.clone(),
            gamma: config.gamma,
            temperature: config.temperature,
            margin_scale: 1.0,
            view_radius: config.view_radius,
            params,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn q_features(&self, features: &[f64]) -> Vec<f64> {
        nn::mlp_infer(&self.params, features, Activation::Relu)
    }

    pub fn q_values(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(self.q_features(&self.features(obs)?))
    }

    pub fn input_dim(&self) -> usize {
        view_dim(self.env, &self.schema, self.view_radius)
    }

    /// Network input for an observation: the normalised vector for cartpole,
    /// an egocentric window for the grid.
    pub fn features(&self, obs: &Observation) -> Result<Vec<f64>> {
        match self.env {
            EnvKind::Cartpole => Ok(encode_observation(obs, &self.schema)?.0),
            EnvKind::Gridworld => egocentric_view(obs, &self.schema, self.view_radius),
        }
    }

    pub fn policy_distribution(&self, obs: &Observation) -> Result<Vec<f64>> {
        Ok(softmax_policy(&self.q_values(obs)?, self.temperature))
    }

    /// Raw (unnormalised) value, confidence and riskiness.
    pub fn interestingness(&self, obs: &Observation) -> Result<OutcomeVector> {
        let q = self.q_values(obs)?;
        Ok(self.outcome_from_q(&q))
    }

    pub fn outcome_from_q(&self, q: &[f64]) -> OutcomeVector {
        OutcomeVector {
            value: q.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            confidence: confidence_from_policy(&softmax_policy(q, self.temperature)),
            riskiness: riskiness_from_q(q, self.margin_scale),
        }
    }

    /// Samples an action from the softmax policy.
    pub fn act(&self, features: &[f64], rng: &mut impl Rng) -> usize {
        sample_index(&softmax_policy(&self.q_features(features), self.temperature), rng)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = AgentMeta {
            env: self.env,
            schema: self.schema.clone(),
            hidden: self.hidden.clone(),
            gamma: self.gamma,
            temperature: self.temperature,
            margin_scale: self.margin_scale,
            view_radius: self.view_radius,
        };
        nn::write_checkpoint(path, "agent", &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params): (AgentMeta, _) = nn::read_checkpoint(path, "agent")?;
        let expected = 2 * (meta.hidden.len() + 1);
        if params.len() != expected {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("agent has {} tensors, architecture needs {expected}", params.len()),
            });
        }
        Ok(Self {
            env: meta.env,
            schema: meta.schema,
            hidden: meta.hidden,
            gamma: meta.gamma,
            temperature: meta.temperature,
            margin_scale: meta.margin_scale,
            view_radius: meta.view_radius,
            params,
        })
    }
}

fn view_dim(kind: EnvKind, schema: &FeatureSchema, radius: usize) -> usize {
    match kind {
        EnvKind::Cartpole => schema.len(),
        EnvKind::Gridworld => egocentric_len(radius),
    }
}

/// Length of [`egocentric_view`] for a given radius.
pub fn egocentric_len(radius: usize) -> usize {
    VIEW_CHANNELS * (2 * radius + 1).pow(2) + 1
}

/// Wall, weaker, stronger and equal-strength occupancy around the player.
const VIEW_CHANNELS: usize = 4;

/// Egocentric occupancy window centred on the player plus its normalised
/// strength. Neighbours are classified relative to the player's strength.
pub fn egocentric_view(obs: &Observation, schema: &FeatureSchema, radius: usize) -> Result<Vec<f64>> {
    let Observation::Grid {
        height,
        width,
        kinds,
        strengths,
    } = obs
    else {
        return Err(Error::Schema("egocentric view needs a grid observation".into()));
    };
    let (h, w) = (*height as isize, *width as isize);
    let side = 2 * radius + 1;
    let plane = side * side;
    let mut out = vec![0.0; VIEW_CHANNELS * plane + 1];
    // After the player is consumed the view is empty.
    let Some(player) = kinds.iter().position(|&k| k == EntityKind::Player.code()) else {
        return Ok(out);
    };
    let (pr, pc) = ((player / *width) as isize, (player % *width) as isize);
    let ps = strengths[player];
    let r = radius as isize;
    for dr in -r..=r {
        for dc in -r..=r {
            let cell = ((dr + r) as usize) * side + (dc + r) as usize;
            let (y, x) = (pr + dr, pc + dc);
            let chan = if y < 0 || x < 0 || y >= h || x >= w {
                Some(0)
            } else {
                let i = (y * w + x) as usize;
                let k = kinds[i];
                if k == EntityKind::Empty.code() || i == player {
                    None
                } else {
                    Some(match strengths[i].cmp(&ps) {
                        std::cmp::Ordering::Less => 1,
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 3,
                    })
                }
            };
            if let Some(c) = chan {
                out[c * plane + cell] = 1.0;
            }
        }
    }
    let max = schema.numeric.first().map_or(1.0, |n| n.max);
    out[VIEW_CHANNELS * plane] = ps as f64 / max;
    Ok(out)
}

fn sample_index(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

struct Experience {
    state: Vec<f64>,
    action: usize,
    reward: f64,
    next: Vec<f64>,
    done: bool,
}

/// Environment seeds for training, evaluation and calibration are drawn
/// from disjoint ranges.
const EVAL_SEED_OFFSET: u64 = 1 << 40;
const CALIBRATION_SEED_OFFSET: u64 = 1 << 41;

/// Mean return of the agent's softmax policy over `episodes` episodes.
pub fn evaluate(agent: &ValueAgent, env: &EnvConfig, episodes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for e in 0..episodes {
        let mut ep = Episode::reset(agent.env, env, seed.wrapping_add(e as u64));
        while !ep.is_done() {
            let x = agent.features(&ep.observe())?;
            total += ep.step(agent.act(&x, &mut rng))?.reward;
        }
    }
    Ok(total / episodes.max(1) as f64)
}

/// Mean return of the uniform-random policy.
pub fn random_policy_return(kind: EnvKind, env: &EnvConfig, episodes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions: Vec<usize> = (0..kind.num_actions()).collect();
    let mut total = 0.0;
    for e in 0..episodes {
        let mut ep = Episode::reset(kind, env, seed.wrapping_add(e as u64));
        while !ep.is_done() {
            total += ep.step(*actions.choose(&mut rng).expect("actions"))?.reward;
        }
    }
    Ok(total / episodes.max(1) as f64)
}

/// Result of training: the agent plus its evaluation curve.
#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub agent: ValueAgent,
    pub curve: Vec<f64>,
    pub final_return: f64,
}

/// Trains without enforcing the return floor.
pub fn train_agent_unchecked(kind: EnvKind, env: &EnvConfig, config: &AgentConfig, seed: u64) -> Result<TrainedAgent> {
    if config.batch_size == 0 || config.temperature <= 0.0 || !(0.0..=1.0).contains(&config.margin_percentile) {
        return Err(Error::Config("agent batch size, temperature and margin percentile must be positive".into()));
    }
    let mut agent = ValueAgent::new(kind, env, config, seed);
    let mut target = agent.params.clone();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        &agent.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a9e7);
    let mut replay: VecDeque<Experience> = VecDeque::with_capacity(config.replay_capacity);
    let mut updates = 0usize;
    let mut curve = Vec::new();
    let decay_episodes = ((config.episodes as f64) * config.epsilon_decay).max(1.0);
    let eval_seed = seed.wrapping_add(EVAL_SEED_OFFSET);

    for e in 0..config.episodes {
        let frac = (e as f64 / decay_episodes).min(1.0);
        let epsilon = config.epsilon_start + (config.epsilon_end - config.epsilon_start) * frac;
        let mut ep = Episode::reset(kind, env, seed.wrapping_add(e as u64));
        let mut state = agent.features(&ep.observe())?;
        while !ep.is_done() {
            let action = if rng.random::<f64>() < epsilon {
                rng.random_range(0..kind.num_actions())
            } else {
                argmax(&agent.q_features(&state))
            };
            let t = ep.step(action)?;
            let next = agent.features(&ep.observe())?;
            if replay.len() == config.replay_capacity {
                replay.pop_front();
            }
            replay.push_back(Experience {
                state: std::mem::replace(&mut state, next.clone()),
                action,
                reward: t.reward,
                next,
                done: t.done,
            });
            if replay.len() >= config.warmup.max(config.batch_size) {
                td_update(&mut agent, &target, &mut adam, &replay, config, &mut rng)?;
                updates += 1;
                if updates % config.target_sync.max(1) == 0 {
                    target = agent.params.clone();
                }
            }
        }
        if config.eval_every > 0 && (e + 1) % config.eval_every == 0 {
            let mut snapshot = agent.clone();
            nn::round_to_f32(&mut snapshot.params);
            let r = evaluate(&snapshot, env, config.eval_episodes, eval_seed)?;
            tracing::debug!(episode = e + 1, mean_return = r, "agent evaluation");
            curve.push(r);
        }
    }
    nn::round_to_f32(&mut agent.params);
    agent.margin_scale = calibrate_margin(&agent, env, config, seed.wrapping_add(CALIBRATION_SEED_OFFSET))?;
    let final_return = evaluate(&agent, env, config.eval_episodes, eval_seed)?;
    curve.push(final_return);
    Ok(TrainedAgent {
        agent,
        curve,
        final_return,
    })
}

/// Trains and fails if the held-out mean return stays below the floor.
pub fn train_agent(kind: EnvKind, env: &EnvConfig, config: &AgentConfig, seed: u64) -> Result<TrainedAgent> {
    let trained = train_agent_unchecked(kind, env, config, seed)?;
    if let Some(floor) = config.return_floor {
        if !(trained.final_return >= floor) {
            return Err(Error::AgentTraining {
                achieved: trained.final_return,
                floor,
                curve: trained.curve,
            });
        }
    }
    Ok(trained)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn td_update(
    agent: &mut ValueAgent,
    target: &[Tensor],
    adam: &mut Adam,
    replay: &VecDeque<Experience>,
    config: &AgentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let b = config.batch_size;
    let na = agent.env.num_actions();
    let dim = agent.input_dim();
    let mut xs = Vec::with_capacity(b * dim);
    let mut mask = vec![0.0; b * na];
    let mut goal = vec![0.0; b * na];
    for r in 0..b {
        let ex = &replay[rng.random_range(0..replay.len())];
        xs.extend_from_slice(&ex.state);
        let bootstrap = if ex.done {
            0.0
        } else {
            let qn = nn::mlp_infer(target, &ex.next, Activation::Relu);
            qn.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        mask[r * na + ex.action] = 1.0;
        goal[r * na + ex.action] = ex.reward + agent.gamma * bootstrap;
    }
    let tape = Tape::new();
    let vars: Vec<Var> = agent.params.iter().map(|p| tape.param(p.clone())).collect();
    let x = tape.constant(Tensor::new(vec![b, dim], xs)?);
    let q = nn::mlp_forward(&tape, &vars, x, Activation::Relu)?;
    let m = tape.constant(Tensor::new(vec![b, na], mask)?);
    let g = tape.constant(Tensor::new(vec![b, na], goal)?);
    let picked = tape.mul(q, m)?;
    let loss = tape.mse(picked, g, Reduction::BatchMean)?;
    let grads = tape.backward(loss)?;
    let gs: Vec<Option<&Tensor>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    adam.step(&mut agent.params, &gs);
    Ok(())
}

/// Percentile of the Q margin over calibration rollouts.
fn calibrate_margin(agent: &ValueAgent, env: &EnvConfig, config: &AgentConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut margins = Vec::new();
    for e in 0..config.calibration_episodes.max(1) {
        let mut ep = Episode::reset(agent.env, env, seed.wrapping_add(e as u64));
        while !ep.is_done() {
            let x = agent.features(&ep.observe())?;
            let q = agent.q_features(&x);
            let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = q.iter().copied().fold(f64::INFINITY, f64::min);
            margins.push(max - min);
            ep.step(sample_index(&softmax_policy(&q, agent.temperature), &mut rng))?;
        }
    }
    margins.sort_by(f64::total_cmp);
    let idx = ((margins.len() - 1) as f64 * config.margin_percentile).round() as usize;
    let m = margins[idx];
    Ok(if m > 0.0 { m } else { 1.0 })
}

/// One recorded step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub episode: usize,
    pub step: usize,
    pub observation: Observation,
    pub outcome: OutcomeVector,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub frames: Vec<TrajectoryFrame>,
    pub episode_lengths: Vec<usize>,
}

/// Plays `n_episodes` with the agent's softmax policy, recording the raw
/// outcome vector at every visited state.
pub fn rollout(agent: &ValueAgent, env: &EnvConfig, n_episodes: usize, seed: u64) -> Result<TrajectorySet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0c7a_11e5);
    let mut set = TrajectorySet::default();
    for e in 0..n_episodes {
        let mut ep = Episode::reset(agent.env, env, seed.wrapping_add(e as u64));
        let mut len = 0;
        while !ep.is_done() {
            let observation = ep.observe();
            let x = agent.features(&observation)?;
            let q = agent.q_features(&x);
            let action = sample_index(&softmax_policy(&q, agent.temperature), &mut rng);
            let t = ep.step(action)?;
            set.frames.push(TrajectoryFrame {
                episode: e,
                step: len,
                observation,
                outcome: agent.outcome_from_q(&q),
                action,
                reward: t.reward,
            });
            len += 1;
        }
        set.episode_lengths.push(len);
    }
    Ok(set)
}
