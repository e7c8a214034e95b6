//! End-to-end stages shared by the CLI, the service and the tests: train an
//! agent and record a dataset, train the joint model (and optionally its
//! reconstruction-only twin), and evaluate.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{rollout, train_agent, AgentConfig, TrainedAgent};
use crate::counterfactual::{CFMethod, CaseLibrary, GeneratorConfig};
use crate::dataset::{FeatureSchema, TrajectoryDataset};
use crate::envs::{EnvConfig, EnvKind};
use crate::error::{io_err, Error, Result};
use crate::experiments::{
    ablation_variants, build_corruption_set, evaluate_threshold, roundtrip_elbo_study, sample_query_set, run_variants,
    EpsilonPolicy, ElboStudy, ExperimentReport, ModelContext, ThresholdEvaluation, Variant,
};
use crate::jvae::{train_full, JointVae, ModelConfig, TrainMode, TrainOutcome, TrainSchedule};

/// Seed offsets per stage so that stages never share a random stream.
const ROLLOUT_SEED: u64 = 0x5eed_0001;
const SPLIT_SEED: u64 = 0x5eed_0002;
const MODEL_SEED: u64 = 0x5eed_0003;
const QUERY_SEED: u64 = 0x5eed_0004;
const CORRUPTION_SEED: u64 = 0x5eed_0005;
const ELBO_SEED: u64 = 0x5eed_0006;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElboConfig {
    pub n_real: usize,
    pub n_random: usize,
    pub n_steps: usize,
}

impl Default for ElboConfig {
    fn default() -> Self {
        Self {
            n_real: 1000,
            n_random: 1000,
            n_steps: 5,
        }
    }
}

/// Everything a run needs. Loadable from JSON; absent fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub environment: EnvConfig,
    /// Defaults per environment when absent.
    pub agent: Option<AgentConfig>,
    pub episodes: usize,
    pub train_fraction: f64,
    /// Defaults per schema when absent.
    pub model: Option<ModelConfig>,
    pub schedule: TrainSchedule,
    pub generator: GeneratorConfig,
    pub epsilon: EpsilonPolicy,
    pub queries_per_cell: usize,
    pub corruption_pairs: usize,
    pub elbo: ElboConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::Gridworld,
            seed: 7,
            environment: EnvConfig::default(),
            agent: None,
            episodes: 200,
            train_fraction: 0.95,
            model: None,
            schedule: TrainSchedule::default(),
            generator: GeneratorConfig::default(),
            epsilon: EpsilonPolicy::default(),
            queries_per_cell: 25,
            corruption_pairs: 200,
            elbo: ElboConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn for_env(env: EnvKind) -> Self {
        Self {
            env,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let cfg: Self = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes < 2 {
            return Err(Error::Config("need at least two episodes to split".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must be in (0, 1), got {}", self.train_fraction)));
        }
        if self.schedule.epochs == 0 || self.schedule.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        self.generator.validate()
    }

    pub fn agent_config(&self) -> AgentConfig {
        self.agent.clone().unwrap_or_else(|| AgentConfig::for_env(self.env))
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::for_env(self.env, &self.environment)
    }

    pub fn model_config(&self, schema: &FeatureSchema, mode: TrainMode) -> ModelConfig {
        let base = self.model.clone().unwrap_or_else(|| ModelConfig::for_schema(schema));
        ModelConfig { mode, ..base }
    }
}

pub struct GeneratedData {
    pub agent: TrainedAgent,
    pub data: TrajectoryDataset,
}

/// Trains the agent, rolls it out and encodes the trajectories.
pub fn generate_data(cfg: &PipelineConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let agent = train_agent(cfg.env, &cfg.environment, &cfg.agent_config(), cfg.seed)?;
    tracing::info!(final_return = agent.final_return, "agent trained");
    let set = rollout(&agent.agent, &cfg.environment, cfg.episodes, cfg.seed ^ ROLLOUT_SEED)?;
    let data = TrajectoryDataset::build(cfg.schema(), &set, cfg.train_fraction, cfg.seed ^ SPLIT_SEED)?;
    tracing::info!(frames = data.frames.len(), "dataset built");
    Ok(GeneratedData { agent, data })
}

/// Trains a model in `mode` on `data`.
pub fn train_model(cfg: &PipelineConfig, data: &TrajectoryDataset, mode: TrainMode) -> Result<TrainOutcome> {
    let model = JointVae::new(data.schema.clone(), cfg.model_config(&data.schema, mode), cfg.seed ^ MODEL_SEED)?;
    train_full(model, data, &cfg.schedule, cfg.seed ^ MODEL_SEED)
}

/// Everything `eval` produces.
pub struct Evaluation {
    pub report: ExperimentReport,
    pub threshold: ThresholdEvaluation,
    pub recon_threshold: Option<ThresholdEvaluation>,
    pub elbo: ElboStudy,
}

impl Evaluation {
    /// Writes the report files plus `threshold.json` and `elbo.csv`.
    /// Returns the paths written.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        self.report.write(dir)?;
        let t = dir.join("threshold.json");
        let thresholds = serde_json::json!({
            "joint": self.threshold,
            "recon_only": self.recon_threshold,
        });
        std::fs::write(&t, serde_json::to_vec_pretty(&thresholds)?).map_err(io_err(&t))?;
        self.elbo.write_csv(&dir.join("elbo.csv"))?;
        Ok(["report.json", "summary.csv", "records.csv", "cdf.csv", "threshold.json", "elbo.csv"]
            .iter()
            .map(|f| dir.join(f))
            .collect())
    }
}

/// Variants run by `eval`: the three methods, the unadjusted latent
/// methods, and the recon-only grid when a twin is supplied.
pub fn eval_variants(with_recon: bool) -> Vec<Variant> {
    let mut v = vec![Variant::new("joint", CFMethod::Nun, true)];
    v.extend(
        ablation_variants()
            .into_iter()
            .filter(|x| with_recon || x.model == "joint"),
    );
    v
}

pub fn tune_threshold_for(cfg: &PipelineConfig, model: &JointVae, data: &TrajectoryDataset) -> Result<ThresholdEvaluation> {
    let set = build_corruption_set(model, data, cfg.corruption_pairs, cfg.seed ^ CORRUPTION_SEED)?;
    evaluate_threshold(model, &set, cfg.seed ^ CORRUPTION_SEED)
}

pub fn evaluate(cfg: &PipelineConfig, joint: &JointVae, recon: Option<&JointVae>, data: &TrajectoryDataset) -> Result<Evaluation> {
    cfg.validate()?;
    if joint.mode() != TrainMode::Joint {
        return Err(Error::Config("the primary model must be jointly trained".into()));
    }
    if let Some(r) = recon {
        if r.mode() != TrainMode::ReconOnly {
            return Err(Error::Config("the twin model must be reconstruction-only".into()));
        }
    }
    let library = CaseLibrary::from_training_split(data)?;
    let (queries, cells) = sample_query_set(data, cfg.queries_per_cell, &cfg.epsilon, cfg.seed ^ QUERY_SEED)?;
    let threshold = tune_threshold_for(cfg, joint, data)?;
    let recon_threshold = recon.map(|r| tune_threshold_for(cfg, r, data)).transpose()?;
    let mut models = vec![ModelContext {
        name: "joint".into(),
        model: joint,
        threshold: Some(threshold.threshold),
    }];
    if let (Some(r), Some(t)) = (recon, &recon_threshold) {
        models.push(ModelContext {
            name: "recon-only".into(),
            model: r,
            threshold: Some(t.threshold),
        });
    }
    let variants = eval_variants(recon.is_some());
    let records = run_variants(&models, &library, &queries, &variants, &cfg.generator)?;
    let report = ExperimentReport::assemble(
        cfg.env.to_string(),
        cfg.seed,
        joint.weight_digest(),
        cells,
        Some(threshold.threshold),
        cfg.generator,
        &variants,
        records,
    );
    let elbo = roundtrip_elbo_study(joint, data, cfg.elbo.n_real, cfg.elbo.n_random, cfg.elbo.n_steps, cfg.seed ^ ELBO_SEED)?;
    Ok(Evaluation {
        report,
        threshold,
        recon_threshold,
        elbo,
    })
}
