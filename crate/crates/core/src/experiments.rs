//! Evaluation protocol: query sampling per (variable, sign) cell, method
//! comparison with micro-averaged statistics, proximity CDFs, the roundtrip
//! ELBO study, plausibility and joint-training ablations, and the synthetic
//! corruption set used to tune the anomaly threshold.

use std::path::Path;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{OutcomeVariable, OutcomeVector};
use crate::counterfactual::{generate, CFMethod, CFQuery, CFResult, CaseLibrary, GeneratorConfig};
use crate::dataset::{decode_observation, encode_observation, FeatureTensor, TrajectoryDataset};
use crate::envs::{EntityKind, Observation};
use crate::error::{io_err, Error, Result};
use crate::jvae::{JointVae, LatentPoint};
use crate::measures::{anomaly_of_decoding, tune_threshold, AnomalyThreshold, Sign, ValiditySpec};

/// Margin rule for query cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpsilonPolicy {
    /// The value variable uses this multiple of its train-split std.
    pub value_std_multiple: f64,
    /// Margin for confidence and riskiness.
    pub fixed: f64,
}

impl Default for EpsilonPolicy {
    fn default() -> Self {
        Self {
            value_std_multiple: 2.0,
            fixed: 0.5,
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Margin for `variable` under `policy`, using normalised train outcomes.
pub fn epsilon_for(data: &TrajectoryDataset, variable: OutcomeVariable, policy: &EpsilonPolicy) -> Result<f64> {
    let eps = match variable {
        OutcomeVariable::Value => {
            let vals: Vec<f64> = data.train_indices().iter().map(|&i| data.frames[i].outcome.value).collect();
            policy.value_std_multiple * mean_std(&vals).1
        }
        _ => policy.fixed,
    };
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("margin for {variable} must be positive, got {eps}")));
    }
    Ok(eps)
}

/// The six (variable, sign) combinations in report order.
pub fn query_cells() -> Vec<(OutcomeVariable, Sign)> {
    OutcomeVariable::ALL
        .iter()
        .flat_map(|&v| Sign::BOTH.iter().map(move |&s| (v, s)))
        .collect()
}

/// Frames with room for a valid change: `-1 <= y + s*eps <= 1`.
pub fn eligible_frames(data: &TrajectoryDataset, spec: &ValiditySpec) -> Vec<usize> {
    data.frames
        .iter()
        .enumerate()
        .filter(|(_, f)| {
            let t = f.outcome.get(spec.variable) + spec.sign.value() * spec.epsilon;
            (-1.0..=1.0).contains(&t)
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCell {
    pub variable: OutcomeVariable,
    pub sign: Sign,
    pub epsilon: f64,
    pub requested: usize,
    pub eligible: usize,
    pub sampled: usize,
}

/// Draws up to `n` eligible frames without replacement, returned in frame
/// order. A shortfall is logged and reflected in the returned cell.
pub fn sample_queries(data: &TrajectoryDataset, spec: ValiditySpec, n: usize, seed: u64) -> (Vec<CFQuery>, QueryCell) {
    let pool = eligible_frames(data, &spec);
    let k = n.min(pool.len());
    if k < n {
        tracing::warn!(variable = %spec.variable, sign = %spec.sign, requested = n, available = k, "query shortfall");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = index::sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    picks.sort_unstable();
    let queries = picks
        .iter()
        .map(|&i| CFQuery {
            frame: Some(i),
            x_q: data.frames[i].features.clone(),
            y_q: data.frames[i].outcome,
            spec,
        })
        .collect();
    let cell = QueryCell {
        variable: spec.variable,
        sign: spec.sign,
        epsilon: spec.epsilon,
        requested: n,
        eligible: pool.len(),
        sampled: k,
    };
    (queries, cell)
}

/// Queries for all six cells. Cell seeds come from one generator seeded
/// with `seed`.
pub fn sample_query_set(
    data: &TrajectoryDataset,
    per_cell: usize,
    policy: &EpsilonPolicy,
    seed: u64,
) -> Result<(Vec<CFQuery>, Vec<QueryCell>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = Vec::new();
    let mut cells = Vec::new();
    for (variable, sign) in query_cells() {
        let spec = ValiditySpec::numeric(variable, sign, epsilon_for(data, variable, policy)?)?;
        let (q, c) = sample_queries(data, spec, per_cell, rng.next_u64());
        queries.extend(q);
        cells.push(c);
    }
    Ok((queries, cells))
}

/// One generator configuration in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    /// Which model the variant runs on (e.g. "joint", "recon-only").
    pub model: String,
    pub method: CFMethod,
    pub plausibility: bool,
}

impl Variant {
    pub fn new(model: &str, method: CFMethod, plausibility: bool) -> Self {
        let mut label = method.label().to_string();
        if method != CFMethod::Nun && !plausibility {
            label.push_str(" (no adj.)");
        }
        if model != "joint" {
            label = format!("{label} [{model}]");
        }
        Self {
            label,
            model: model.to_string(),
            method,
            plausibility,
        }
    }

    /// NUN, InterpPt and Gradient with adjustment on the joint model.
    pub fn table1() -> Vec<Variant> {
        CFMethod::ALL.iter().map(|&m| Variant::new("joint", m, true)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordStatus {
    Generated,
    /// No library frame satisfies the criterion.
    NotFound,
    Error,
}

/// Per (query, variant) outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: usize,
    pub variant: String,
    pub variable: OutcomeVariable,
    pub sign: Sign,
    pub epsilon: f64,
    pub frame: Option<usize>,
    pub status: RecordStatus,
    pub valid: bool,
    pub degenerate: bool,
    pub odiff: Option<f64>,
    pub anomaly: Option<f64>,
    pub anomalous: Option<bool>,
    pub steps: usize,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub y_q: OutcomeVector,
    pub y_c: Option<OutcomeVector>,
    pub nun_frame: Option<usize>,
    pub note: Option<String>,
}

impl QueryRecord {
    fn from_result(i: usize, q: &CFQuery, v: &Variant, r: Result<Option<CFResult>>, threshold: Option<&AnomalyThreshold>) -> Self {
        let mut rec = QueryRecord {
            query: i,
            variant: v.label.clone(),
            variable: q.spec.variable,
            sign: q.spec.sign,
            epsilon: q.spec.epsilon,
            frame: q.frame,
            status: RecordStatus::NotFound,
            valid: false,
            degenerate: false,
            odiff: None,
            anomaly: None,
            anomalous: None,
            steps: 0,
            alpha: None,
            lambda: None,
            y_q: q.y_q,
            y_c: None,
            nun_frame: None,
            note: None,
        };
        match r {
            Ok(Some(r)) => {
                rec.status = RecordStatus::Generated;
                rec.valid = r.valid;
                rec.degenerate = r.degenerate;
                rec.odiff = Some(r.quality.odiff);
                rec.anomaly = Some(r.quality.anomaly);
                rec.anomalous = threshold.map(|t| t.is_anomalous(r.quality.anomaly));
                rec.steps = r.steps;
                rec.alpha = r.alpha;
                rec.lambda = r.lambda;
                rec.y_c = Some(r.y_c);
                rec.nun_frame = r.nun_frame;
                rec.note = r.note;
            }
            Ok(None) => rec.note = Some("no library frame satisfies the criterion".into()),
            Err(e) => {
                rec.status = RecordStatus::Error;
                rec.note = Some(e.to_string());
            }
        }
        rec
    }
}

/// Micro-averaged statistics for one variant. `odiff` and `anomaly` pool
/// every produced counterfactual; the `valid_*` fields pool valid ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub variant: String,
    pub n_queries: usize,
    pub n_generated: usize,
    pub n_valid: usize,
    pub validity_fraction: f64,
    pub odiff_mean: f64,
    pub odiff_std: f64,
    pub anomaly_mean: f64,
    pub anomaly_std: f64,
    pub valid_odiff_mean: f64,
    pub valid_anomaly_mean: f64,
    pub anomalous_count: Option<usize>,
}

/// Summary of the records labelled `variant`.
pub fn summarize(records: &[QueryRecord], variant: &str) -> MethodSummary {
    let rs: Vec<&QueryRecord> = records.iter().filter(|r| r.variant == variant).collect();
    let gen: Vec<&&QueryRecord> = rs.iter().filter(|r| r.status == RecordStatus::Generated).collect();
    let od: Vec<f64> = gen.iter().filter_map(|r| r.odiff).collect();
    let an: Vec<f64> = gen.iter().filter_map(|r| r.anomaly).collect();
    let vod: Vec<f64> = gen.iter().filter(|r| r.valid).filter_map(|r| r.odiff).collect();
    let van: Vec<f64> = gen.iter().filter(|r| r.valid).filter_map(|r| r.anomaly).collect();
    let n_valid = rs.iter().filter(|r| r.valid).count();
    let (odiff_mean, odiff_std) = mean_std(&od);
    let (anomaly_mean, anomaly_std) = mean_std(&an);
    let anomalous_count = if gen.iter().all(|r| r.anomalous.is_some()) {
        Some(gen.iter().filter(|r| r.anomalous == Some(true)).count())
    } else {
        None
    };
    MethodSummary {
        variant: variant.to_string(),
        n_queries: rs.len(),
        n_generated: gen.len(),
        n_valid,
        validity_fraction: if rs.is_empty() { f64::NAN } else { n_valid as f64 / rs.len() as f64 },
        odiff_mean,
        odiff_std,
        anomaly_mean,
        anomaly_std,
        valid_odiff_mean: mean_std(&vod).0,
        valid_anomaly_mean: mean_std(&van).0,
        anomalous_count,
    }
}

/// A model with its retrieval library and tuned threshold.
pub struct ModelContext<'a> {
    pub name: String,
    pub model: &'a JointVae,
    pub threshold: Option<AnomalyThreshold>,
}

/// Runs every variant on every query. Queries run in parallel; records come
/// back ordered by (variant, query).
pub fn run_variants(
    models: &[ModelContext<'_>],
    library: &CaseLibrary,
    queries: &[CFQuery],
    variants: &[Variant],
    generator: &GeneratorConfig,
) -> Result<Vec<QueryRecord>> {
    let mut out = Vec::with_capacity(queries.len() * variants.len());
    for v in variants {
        let ctx = models
            .iter()
            .find(|m| m.name == v.model)
            .ok_or_else(|| Error::Config(format!("variant '{}' needs model '{}', which was not supplied", v.label, v.model)))?;
        let cfg = GeneratorConfig {
            plausibility: v.plausibility,
            ..*generator
        };
        let recs: Vec<QueryRecord> = queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let r = generate(ctx.model, q, library, v.method, &cfg);
                QueryRecord::from_result(i, q, v, r, ctx.threshold.as_ref())
            })
            .collect();
        out.extend(recs);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub variant: String,
    pub threshold: f64,
    pub count: usize,
}

/// Count of valid counterfactuals with odiff at or below each threshold.
pub fn proximity_cdf(report: &ExperimentReport, thresholds: &[f64]) -> Vec<CdfRow> {
    let mut rows = Vec::new();
    for s in &report.summaries {
        let ods: Vec<f64> = report
            .records
            .iter()
            .filter(|r| r.variant == s.variant && r.valid)
            .filter_map(|r| r.odiff)
            .collect();
        for &t in thresholds {
            rows.push(CdfRow {
                variant: s.variant.clone(),
                threshold: t,
                count: ods.iter().filter(|&&d| d <= t).count(),
            });
        }
    }
    rows
}

/// Evenly spaced thresholds from 0 to the largest valid odiff in the report.
pub fn default_cdf_thresholds(report: &ExperimentReport, points: usize) -> Vec<f64> {
    let max = report
        .records
        .iter()
        .filter(|r| r.valid)
        .filter_map(|r| r.odiff)
        .fold(0.0, f64::max);
    let points = points.max(2);
    (0..points).map(|k| max * k as f64 / (points - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub env: String,
    pub seed: u64,
    pub model_digest: String,
    pub cells: Vec<QueryCell>,
    pub threshold: Option<AnomalyThreshold>,
    pub generator: GeneratorConfig,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<QueryRecord>,
}

impl ExperimentReport {
    pub fn assemble(
        env: String,
        seed: u64,
        model_digest: String,
        cells: Vec<QueryCell>,
        threshold: Option<AnomalyThreshold>,
        generator: GeneratorConfig,
        variants: &[Variant],
        records: Vec<QueryRecord>,
    ) -> Self {
        let summaries = variants.iter().map(|v| summarize(&records, &v.label)).collect();
        Self {
            env,
            seed,
            model_digest,
            cells,
            threshold,
            generator,
            summaries,
            records,
        }
    }

    pub fn summary(&self, variant: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    /// Writes `report.json`, `summary.csv`, `records.csv` and `cdf.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("report.json");
        std::fs::write(&p, serde_json::to_vec_pretty(self)?).map_err(io_err(&p))?;
        write_csv(&dir.join("summary.csv"), &self.summaries)?;
        write_csv(&dir.join("records.csv"), &self.records.iter().map(FlatRecord::from).collect::<Vec<_>>())?;
        write_csv(&dir.join("cdf.csv"), &proximity_cdf(self, &default_cdf_thresholds(self, 41)))?;
        Ok(())
    }
}

/// Flat CSV row for a record (nested outcome vectors do not fit csv's serde).
#[derive(Serialize)]
struct FlatRecord<'a> {
    query: usize,
    variant: &'a str,
    variable: OutcomeVariable,
    sign: String,
    epsilon: f64,
    frame: Option<usize>,
    status: RecordStatus,
    valid: bool,
    degenerate: bool,
    odiff: Option<f64>,
    anomaly: Option<f64>,
    anomalous: Option<bool>,
    steps: usize,
    alpha: Option<f64>,
    lambda: Option<f64>,
    y_q: f64,
    y_c: Option<f64>,
}

impl<'a> From<&'a QueryRecord> for FlatRecord<'a> {
    fn from(r: &'a QueryRecord) -> Self {
        Self {
            query: r.query,
            variant: &r.variant,
            variable: r.variable,
            sign: r.sign.to_string(),
            epsilon: r.epsilon,
            frame: r.frame,
            status: r.status,
            valid: r.valid,
            degenerate: r.degenerate,
            odiff: r.odiff,
            anomaly: r.anomaly,
            anomalous: r.anomalous,
            steps: r.steps,
            alpha: r.alpha,
            lambda: r.lambda,
            y_q: r.y_q.get(r.variable),
            y_c: r.y_c.map(|y| y.get(r.variable)),
        }
    }
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Loads `report.json` from a report directory.
pub fn read_report(dir: &Path) -> Result<ExperimentReport> {
    let p = dir.join("report.json");
    let bytes = std::fs::read(&p).map_err(io_err(&p))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Mean and std of the ELBO loss at each roundtrip step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboCurve {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ElboCurve {
    /// Reduction from step `k - 1` to step `k`.
    pub fn drop_at(&self, k: usize) -> f64 {
        self.mean[k - 1] - self.mean[k]
    }

    /// Step with the largest drop (first on ties).
    pub fn largest_drop_step(&self) -> Option<usize> {
        (1..self.mean.len()).fold(None, |best: Option<usize>, k| match best {
            Some(b) if self.drop_at(b) >= self.drop_at(k) => Some(b),
            _ => Some(k),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboStudy {
    pub beta: f64,
    pub real: ElboCurve,
    pub random: ElboCurve,
}

impl ElboStudy {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            step: usize,
            real_mean: f64,
            real_std: f64,
            random_mean: f64,
            random_std: f64,
        }
        let rows: Vec<Row> = (0..self.real.mean.len())
            .map(|k| Row {
                step: k,
                real_mean: self.real.mean[k],
                real_std: self.real.std[k],
                random_mean: self.random.mean[k],
                random_std: self.random.std[k],
            })
            .collect();
        write_csv(path, &rows)
    }
}

/// ELBO losses of `x` and its repeated projected reconstructions.
fn roundtrip_losses(model: &JointVae, x0: FeatureTensor, n_steps: usize, beta: f64) -> Result<Vec<f64>> {
    let mut x = x0;
    let mut out = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        out.push(model.elbo_loss(&x, beta)?);
        if k < n_steps {
            x = model.decode_projected(&model.encode_mean(&x)?)?;
        }
    }
    Ok(out)
}

fn curve(rows: &[Vec<f64>], n_steps: usize) -> ElboCurve {
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for k in 0..=n_steps {
        let col: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        let (m, s) = mean_std(&col);
        mean.push(m);
        std.push(s);
    }
    ElboCurve { mean, std }
}

/// Roundtrip ELBO curves for dataset frames and for decodings of random
/// latents (standard normal times a scale drawn from `[0, 10]`). Step 0 is
/// the starting observation; each later step re-encodes and decodes the
/// previous one.
pub fn roundtrip_elbo_study(
    model: &JointVae,
    data: &TrajectoryDataset,
    n_real: usize,
    n_random: usize,
    n_steps: usize,
    seed: u64,
) -> Result<ElboStudy> {
    let beta = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = n_real.min(data.frames.len());
    let real_idx: Vec<usize> = index::sample(&mut rng, data.frames.len(), k).into_vec();
    let latents: Vec<LatentPoint> = (0..n_random)
        .map(|_| {
            let scale = rng.random_range(0.0..10.0);
            LatentPoint(
                (0..model.latent_dim())
                    .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect(),
            )
        })
        .collect();
    let real = real_idx
        .par_iter()
        .map(|&i| roundtrip_losses(model, data.frames[i].features.clone(), n_steps, beta))
        .collect::<Result<Vec<_>>>()?;
    let random = latents
        .par_iter()
        .map(|z| roundtrip_losses(model, model.decode_projected(z)?, n_steps, beta))
        .collect::<Result<Vec<_>>>()?;
    Ok(ElboStudy {
        beta,
        real: curve(&real, n_steps),
        random: curve(&random, n_steps),
    })
}

/// Edits applied to build the anomalous class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    /// Copies the player (or another entity) onto empty cells.
    Duplicate,
    /// Erases the kind of every non-player entity but leaves its strength,
    /// a partially removed entity.
    Delete,
    /// Decodes a latent pushed off the data by large Gaussian noise.
    Noise,
}

impl Corruption {
    pub const ALL: [Corruption; 3] = [Corruption::Duplicate, Corruption::Delete, Corruption::Noise];
    /// Partial deletion is left out by default: its scenes score like real
    /// reconstructions under the roundtrip measure.
    pub const DEFAULT_MIX: [Corruption; 2] = [Corruption::Duplicate, Corruption::Noise];
}

/// A decoded scene with its label. Scenes are scored with
/// [`anomaly_of_decoding`]; for a plain reconstruction that equals the
/// anomaly score of the encoding it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScene {
    pub scene: FeatureTensor,
    pub anomalous: bool,
    pub corruption: Option<Corruption>,
}

/// Copies made per duplication.
const DUPLICATES: usize = 4;

fn corrupt_grid(obs: &mut Observation, kind: Corruption, rng: &mut ChaCha8Rng) {
    let Observation::Grid { kinds, strengths, .. } = obs else {
        return;
    };
    let player = EntityKind::Player.code();
    let empty_code = EntityKind::Empty.code();
    let occupied: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i] != empty_code).collect();
    let empty: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i] == empty_code).collect();
    match kind {
        Corruption::Duplicate if !occupied.is_empty() && !empty.is_empty() => {
            let src = occupied
                .iter()
                .copied()
                .find(|&i| kinds[i] == player)
                .unwrap_or(occupied[rng.random_range(0..occupied.len())]);
            for j in index::sample(rng, empty.len(), DUPLICATES.min(empty.len())) {
                kinds[empty[j]] = kinds[src];
                strengths[empty[j]] = strengths[src];
            }
        }
        Corruption::Delete => {
            for i in occupied {
                if kinds[i] != player {
                    kinds[i] = empty_code;
                }
            }
        }
        _ => {}
    }
}

/// Balanced labelled scenes. The plausible class is reconstructions of
/// real frames. The anomalous class decodes midpoints between pairs of real
/// frames and then corrupts them, or decodes a noise-perturbed midpoint
/// instead. Vector observations only get noise.
pub fn build_corruption_set(model: &JointVae, data: &TrajectoryDataset, n_pairs: usize, seed: u64) -> Result<Vec<LabeledScene>> {
    build_corruption_set_with(model, data, n_pairs, &Corruption::DEFAULT_MIX, seed)
}

/// As [`build_corruption_set`], cycling through `mix` for the anomalous
/// class.
pub fn build_corruption_set_with(
    model: &JointVae,
    data: &TrajectoryDataset,
    n_pairs: usize,
    mix: &[Corruption],
    seed: u64,
) -> Result<Vec<LabeledScene>> {
    if mix.is_empty() {
        return Err(Error::Config("corruption mix is empty".into()));
    }
    let n = data.frames.len();
    if n < 2 {
        return Err(Error::Contract("need at least two frames for a corruption set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spatial = data.schema.is_spatial();
    let mut out = Vec::with_capacity(2 * n_pairs);
    for p in 0..n_pairs {
        let real = rng.random_range(0..n);
        out.push(LabeledScene {
            scene: model.decode_projected(&model.encode_mean(&data.frames[real].features)?)?,
            anomalous: false,
            corruption: None,
        });
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let za = model.encode_mean(&data.frames[a].features)?;
        let zb = model.encode_mean(&data.frames[b].features)?;
        let mid = LatentPoint(za.0.iter().zip(&zb.0).map(|(x, y)| 0.5 * (x + y)).collect());
        let kind = if spatial { mix[p % mix.len()] } else { Corruption::Noise };
        let scene = match kind {
            Corruption::Noise => {
                let scale = rng.random_range(5.0..10.0);
                let z = LatentPoint(
                    mid.0
                        .iter()
                        .map(|m| m + scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                        .collect(),
                );
                model.decode_projected(&z)?
            }
            _ => {
                let mut obs = decode_observation(&model.decode_projected(&mid)?, &data.schema)?;
                corrupt_grid(&mut obs, kind, &mut rng);
                encode_observation(&obs, &data.schema)?
            }
        };
        out.push(LabeledScene {
            scene,
            anomalous: true,
            corruption: Some(kind),
        });
    }
    Ok(out)
}

/// Held-out evaluation of a threshold tuned on half of a labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEvaluation {
    pub threshold: AnomalyThreshold,
    pub train_size: usize,
    pub test_size: usize,
    pub test_accuracy: f64,
    /// Accuracy of always answering "plausible" on the test half.
    pub baseline_accuracy: f64,
}

/// Anomaly scores of a labelled set, in order.
pub fn score_scenes(model: &JointVae, set: &[LabeledScene]) -> Result<Vec<(f64, bool)>> {
    set.par_iter()
        .map(|l| Ok((anomaly_of_decoding(model, &l.scene)?, l.anomalous)))
        .collect()
}

/// Scores the set, shuffles it with `seed`, tunes on the first half and
/// reports accuracy on the second.
pub fn evaluate_threshold(model: &JointVae, set: &[LabeledScene], seed: u64) -> Result<ThresholdEvaluation> {
    let mut scored = score_scenes(model, set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(scored.as_mut_slice(), &mut rng);
    let cut = scored.len() / 2;
    let (train, test) = scored.split_at(cut);
    let threshold = tune_threshold(train)?;
    let plausible = test.iter().filter(|(_, a)| !a).count();
    Ok(ThresholdEvaluation {
        test_accuracy: threshold.accuracy_on(test),
        baseline_accuracy: plausible as f64 / test.len().max(1) as f64,
        threshold,
        train_size: train.len(),
        test_size: test.len(),
    })
}

/// Adjusted and unadjusted InterpPt and Gradient on one model.
pub fn plausibility_variants(model: &str) -> Vec<Variant> {
    let mut v = Vec::new();
    for m in [CFMethod::Interpolate, CFMethod::Gradient] {
        v.push(Variant::new(model, m, true));
        v.push(Variant::new(model, m, false));
    }
    v
}

/// The four-way grid {joint, recon-only} x {adjusted, unadjusted}.
pub fn ablation_variants() -> Vec<Variant> {
    let mut v = plausibility_variants("joint");
    v.extend(plausibility_variants("recon-only"));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{TrajectoryFrame, TrajectorySet};
    use crate::dataset::FeatureSchema;
    use crate::envs::{EnvConfig, EnvKind};

    fn cart_data() -> TrajectoryDataset {
        let mut frames = Vec::new();
        let mut lengths = Vec::new();
        for e in 0..10 {
            for s in 0..12 {
                let t = (e * 12 + s) as f64;
                frames.push(TrajectoryFrame {
                    episode: e,
                    step: s,
                    observation: Observation::Vector {
                        values: vec![(t * 0.37).sin(), (t * 0.11).cos(), 0.1 * (t * 0.5).sin(), 0.3],
                    },
                    outcome: OutcomeVector {
                        value: (t * 0.9).sin(),
                        confidence: (t * 0.4).cos(),
                        riskiness: (t * 0.23).sin(),
                    },
                    action: 0,
                    reward: 1.0,
                });
            }
            lengths.push(12);
        }
        let set = TrajectorySet {
            frames,
            episode_lengths: lengths,
        };
        let schema = FeatureSchema::for_env(EnvKind::Cartpole, &EnvConfig::default());
        TrajectoryDataset::build(schema, &set, 0.8, 3).unwrap()
    }

    #[test]
    fn positive_sign_excludes_frames_above_one_minus_eps() {
        let d = cart_data();
        let spec = ValiditySpec::numeric(OutcomeVariable::Confidence, Sign::Positive, 0.5).unwrap();
        for i in eligible_frames(&d, &spec) {
            assert!(d.frames[i].outcome.confidence <= 0.5);
        }
    }

    #[test]
    fn zero_queries_is_empty() {
        let d = cart_data();
        let spec = ValiditySpec::numeric(OutcomeVariable::Riskiness, Sign::Negative, 0.5).unwrap();
        let (q, c) = sample_queries(&d, spec, 0, 1);
        assert!(q.is_empty());
        assert_eq!(c.sampled, 0);
    }

    #[test]
    fn shortfall_returns_every_eligible_frame() {
        let d = cart_data();
        let spec = ValiditySpec::numeric(OutcomeVariable::Value, Sign::Positive, 1.9).unwrap();
        let pool = eligible_frames(&d, &spec);
        let (q, c) = sample_queries(&d, spec, pool.len() + 5, 1);
        assert_eq!(c.sampled, pool.len());
        assert_eq!(q.iter().map(|q| q.frame.unwrap()).collect::<Vec<_>>(), pool);
    }

    #[test]
    fn largest_drop_prefers_first_step_on_ties() {
        let c = ElboCurve {
            mean: vec![10.0, 8.0, 6.0, 5.5],
            std: vec![0.0; 4],
        };
        assert_eq!(c.largest_drop_step(), Some(1));
    }

    #[test]
    fn summary_pools_generated_records() {
        let d = cart_data();
        let rec = |i: usize, od: Option<f64>, valid: bool| QueryRecord {
            query: i,
            variant: "x".into(),
            variable: OutcomeVariable::Value,
            sign: Sign::Positive,
            epsilon: 0.5,
            frame: Some(i),
            status: if od.is_some() { RecordStatus::Generated } else { RecordStatus::NotFound },
            valid,
            degenerate: false,
            odiff: od,
            anomaly: od,
            anomalous: None,
            steps: 0,
            alpha: None,
            lambda: None,
            y_q: d.frames[i].outcome,
            y_c: None,
            nun_frame: None,
            note: None,
        };
        let rs = vec![rec(0, Some(1.0), true), rec(1, Some(3.0), false), rec(2, None, false)];
        let s = summarize(&rs, "x");
        assert_eq!((s.n_queries, s.n_generated, s.n_valid), (3, 2, 1));
        assert!((s.odiff_mean - 2.0).abs() < 1e-12);
        assert!((s.valid_odiff_mean - 1.0).abs() < 1e-12);
        assert!((s.validity_fraction - 1.0 / 3.0).abs() < 1e-12);
    }
}
