//! `latentcf`: run the pipeline stages, query counterfactuals and serve the
//! HTTP API.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use latentcf_api as api;
use latentcf_core::dataset::TrajectoryDataset;
use latentcf_core::envs::EnvKind;
use latentcf_core::jvae::{write_loss_curves, JointVae, TrainMode};
use latentcf_core::manifest::{load_report, manifest_path, RunManifest};
use latentcf_core::pipeline::{self, PipelineConfig};
use latentcf_service::{ServiceConfig, ServiceState};

#[derive(Parser)]
#[command(name = "latentcf", version, about = "Counterfactual explanations for RL agents over a jointly trained VAE latent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the agent, roll it out and write the encoded dataset.
    GenData(GenData),
    /// Train the joint model (and optionally the reconstruction-only twin).
    Train(Train),
    /// Run the counterfactual comparison and ablations; write a report.
    Eval(Eval),
    /// Generate one counterfactual and print it as JSON.
    Query(QueryArgs),
    /// Serve the HTTP API.
    Serve(Serve),
    /// Print the summary of a report directory (requires its manifest).
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON pipeline config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Agent training episodes.
    #[arg(long)]
    agent_episodes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also save the trained agent here.
    #[arg(long)]
    agent_out: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    outcome_weight: Option<f64>,
    /// Also train the reconstruction-only twin.
    #[arg(long)]
    recon_only: bool,
    /// Where the twin goes; defaults to `<out>` with a `.recon.ckpt` suffix.
    #[arg(long)]
    recon_out: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the dataset recorded in the model's manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Reconstruction-only twin for the joint-training ablation.
    #[arg(long)]
    recon: Option<PathBuf>,
    #[arg(long)]
    queries_per_cell: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long, required_unless_present = "server")]
    model: Option<PathBuf>,
    /// Defaults to the dataset recorded in the model's manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    frame: usize,
    #[arg(long)]
    variable: String,
    /// `+1` or `-1`.
    #[arg(long, allow_hyphen_values = true)]
    sign: api::Sign,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value = "gradient")]
    method: String,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Skip the plausibility adjustment.
    #[arg(long)]
    no_adjust: bool,
    /// Send the query to a running service instead of loading the model.
    #[arg(long)]
    server: Option<String>,
    /// Write the JSON here (with a manifest) instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Serve {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = api::PORT_ENV, default_value_t = api::DEFAULT_PORT)]
    port: u16,
    #[arg(long)]
    max_concurrent: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    dir: PathBuf,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Query(a) => query(a),
        Command::Serve(a) => serve(a),
        Command::Report(a) => report(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = a.common.load()?;
    if let Some(env) = a.env {
        cfg.env = env;
    }
    if let Some(n) = a.episodes {
        cfg.episodes = n;
    }
    if let Some(n) = a.agent_episodes {
        let mut ac = cfg.agent_config();
        ac.episodes = n;
        cfg.agent = Some(ac);
    }
    let mut m = RunManifest::begin("gen-data", &cfg, cfg.seed)?;
    if let Some(p) = &a.common.config {
        m.input(p)?;
    }
    let out = pipeline::generate_data(&cfg)?;
    out.data.save(&a.out)?;
    m.output(&a.out)?;
    if let Some(p) = &a.agent_out {
        out.agent.agent.save(p)?;
        m.output(p)?;
    }
    m.finish(&manifest_path(&a.out))?;
    eprintln!(
        "wrote {} frames from {} episodes to {} (agent return {:.3})",
        out.data.frames.len(),
        cfg.episodes,
        a.out.display(),
        out.agent.final_return
    );
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(a: Train) -> Result<()> {
    let mut cfg = a.common.load()?;
    if let Some(e) = a.epochs {
        cfg.schedule.epochs = e;
    }
    if let Some(w) = a.outcome_weight {
        cfg.schedule.outcome_weight = w;
    }
    let data = TrajectoryDataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    cfg.env = data.schema.env;
    let mut m = RunManifest::begin("train", &cfg, cfg.seed)?;
    m.input(&a.data)?;
    let joint = pipeline::train_model(&cfg, &data, TrainMode::Joint)?;
    joint.model.save(&a.out)?;
    let curves = with_suffix(&a.out, ".losses.csv");
    write_loss_curves(&curves, &joint.curves)?;
    m.output(&a.out)?.output(&curves)?;
    let mse = joint.model.outcome_mse(&data, &data.test_indices())?;
    eprintln!(
        "joint model -> {} (test outcome mse value {:.4}, confidence {:.4}, riskiness {:.4})",
        a.out.display(),
        mse[0],
        mse[1],
        mse[2]
    );
    if a.recon_only {
        let path = a.recon_out.clone().unwrap_or_else(|| a.out.with_extension("recon.ckpt"));
        let twin = pipeline::train_model(&cfg, &data, TrainMode::ReconOnly)?;
        twin.model.save(&path)?;
        let curves = with_suffix(&path, ".losses.csv");
        write_loss_curves(&curves, &twin.curves)?;
        m.output(&path)?.output(&curves)?;
        eprintln!("reconstruction-only twin -> {}", path.display());
    }
    m.finish(&manifest_path(&a.out))?;
    Ok(())
}

/// Dataset path given explicitly or recorded as the first input of the
/// model's manifest.
fn resolve_data(model: &Path, data: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(d) = data {
        return Ok(d);
    }
    let mp = manifest_path(model);
    let m = RunManifest::load(&mp).with_context(|| format!("no --data given and no readable manifest at {}", mp.display()))?;
    match m.inputs.first() {
        Some(d) => Ok(d.path.clone()),
        None => bail!("manifest {} lists no dataset; pass --data", mp.display()),
    }
}

fn load_model(path: &Path) -> Result<JointVae> {
    JointVae::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn eval(a: Eval) -> Result<()> {
    let mut cfg = a.common.load()?;
    if let Some(n) = a.queries_per_cell {
        cfg.queries_per_cell = n;
    }
    let data_path = resolve_data(&a.model, a.data)?;
    let data = TrajectoryDataset::load(&data_path).with_context(|| format!("loading dataset {}", data_path.display()))?;
    cfg.env = data.schema.env;
    let joint = load_model(&a.model)?;
    let recon = a.recon.as_deref().map(load_model).transpose()?;
    let mut m = RunManifest::begin("eval", &cfg, cfg.seed)?;
    m.input(&a.model)?.input(&data_path)?;
    if let Some(r) = &a.recon {
        m.input(r)?;
    }
    let ev = pipeline::evaluate(&cfg, &joint, recon.as_ref(), &data)?;
    for p in ev.write(&a.out)? {
        m.output(&p)?;
    }
    m.finish(&manifest_path(&a.out))?;
    print_summary(&ev.report);
    eprintln!(
        "anomaly threshold {:.3} (held-out accuracy {:.3}); report in {}",
        ev.threshold.threshold.threshold,
        ev.threshold.test_accuracy,
        a.out.display()
    );
    Ok(())
}

fn print_summary(report: &latentcf_core::experiments::ExperimentReport) {
    println!(
        "{:<34} {:>5} {:>7} {:>16} {:>16} {:>9}",
        "variant", "n", "valid", "odiff", "anomaly", "anomalous"
    );
    for s in &report.summaries {
        println!(
            "{:<34} {:>5} {:>7.3} {:>8.3} ± {:<5.3} {:>8.3} ± {:<5.3} {:>9}",
            s.variant,
            s.n_queries,
            s.validity_fraction,
            s.odiff_mean,
            s.odiff_std,
            s.anomaly_mean,
            s.anomaly_std,
            s.anomalous_count.map(|c| c.to_string()).unwrap_or_else(|| "-".into())
        );
    }
}

fn query(a: QueryArgs) -> Result<()> {
    let params = api::GenerationParams {
        max_steps: a.max_steps,
        plausibility: a.no_adjust.then_some(false),
        ..Default::default()
    };
    let req = api::CounterfactualRequest {
        frame_id: a.frame,
        variable: a.variable.clone(),
        sign: a.sign,
        epsilon: a.epsilon,
        method: a.method.clone(),
        params: Some(params),
    };
    let resp = match &a.server {
        Some(url) => {
            let rt = tokio::runtime::Runtime::new()?;
            let client = latentcf_client::Client::new(url)?;
            rt.block_on(client.counterfactual(&req))?
        }
        None => {
            let model_path = a.model.clone().context("--model is required without --server")?;
            let data_path = resolve_data(&model_path, a.data.clone())?;
            let data = TrajectoryDataset::load(&data_path).with_context(|| format!("loading dataset {}", data_path.display()))?;
            let state = ServiceState::new(load_model(&model_path)?, data, ServiceConfig::default())?;
            latentcf_service::generate_blocking(&state, &req)?
        }
    };
    let json = serde_json::to_string_pretty(&resp)?;
    match &a.out {
        Some(p) => {
            let mut m = RunManifest::begin("query", &req, 0)?;
            if let Some(mp) = &a.model {
                m.input(mp)?;
            }
            std::fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
            m.output(p)?;
            m.finish(&manifest_path(p))?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn serve(a: Serve) -> Result<()> {
    let cfg = a.common.load()?;
    let data_path = resolve_data(&a.model, a.data)?;
    let data = TrajectoryDataset::load(&data_path).with_context(|| format!("loading dataset {}", data_path.display()))?;
    let model = load_model(&a.model)?;
    let threshold = pipeline::tune_threshold_for(&cfg, &model, &data)?;
    let mut sc = ServiceConfig {
        generator: cfg.generator,
        epsilon: cfg.epsilon,
        threshold: Some(threshold.threshold),
        ..ServiceConfig::default()
    };
    if let Some(n) = a.max_concurrent {
        sc.max_concurrent = n;
    }
    let state = ServiceState::new(model, data, sc)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad host/port")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("serving on http://{}", listener.local_addr()?);
        latentcf_service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}

fn report(a: ReportArgs) -> Result<()> {
    let r = load_report(&a.dir).with_context(|| format!("loading report {}", a.dir.display()))?;
    print_summary(&r);
    Ok(())
}
