//! Counterfactual generators: nearest unlike neighbour retrieval, latent
//! interpolation towards it, and gradient traversal guided by an outcome
//! head. The latent methods optionally apply the plausibility adjustment.

use serde::{Deserialize, Serialize};

use crate::agent::OutcomeVector;
use crate::dataset::{FeatureTensor, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::jvae::{JointVae, LatentPoint};
use crate::measures::{anomaly_score, odiff, validity, Decoded, QualityReport, ValiditySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CFQuery {
    /// Dataset frame the query was taken from, if any.
    pub frame: Option<usize>,
    pub x_q: FeatureTensor,
    /// Stored (normalised) outcome of the query.
    pub y_q: OutcomeVector,
    pub spec: ValiditySpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CFMethod {
    Nun,
    Interpolate,
    Gradient,
}

impl CFMethod {
    pub const ALL: [CFMethod; 3] = [CFMethod::Nun, CFMethod::Interpolate, CFMethod::Gradient];

    pub fn name(self) -> &'static str {
        match self {
            CFMethod::Nun => "nun",
            CFMethod::Interpolate => "interpolate",
            CFMethod::Gradient => "gradient",
        }
    }

    /// Label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            CFMethod::Nun => "NUN",
            CFMethod::Interpolate => "InterpPt",
            CFMethod::Gradient => "Gradient",
        }
    }
}

impl std::fmt::Display for CFMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CFMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nun" => Ok(CFMethod::Nun),
            "interpolate" | "interp" | "interppt" => Ok(CFMethod::Interpolate),
            "gradient" | "grad" => Ok(CFMethod::Gradient),
            other => Err(format!("unknown method '{other}' (expected nun, interpolate or gradient)")),
        }
    }
}

/// Where the outcome used for the validity flag came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeSource {
    /// The agent's recorded outcome for a stored frame.
    Stored,
    /// The model's outcome heads at the final latent.
    Predicted,
}

/// The adjusted latent is kept even when it breaks the criterion; this
/// records the point before adjustment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unadjusted {
    pub z: LatentPoint,
    pub y_c: OutcomeVector,
    pub quality: QualityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CFResult {
    pub method: CFMethod,
    /// Counterfactual observation (a real frame for NUN, otherwise the
    /// projected decoding of the final latent).
    pub x_c: FeatureTensor,
    pub path: Vec<LatentPoint>,
    /// Predicted outcomes at every path point.
    pub path_outcomes: Vec<OutcomeVector>,
    pub steps: usize,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub y_c: OutcomeVector,
    pub outcome_source: OutcomeSource,
    pub valid: bool,
    pub quality: QualityReport,
    /// Criterion held at the starting point, so nothing moved.
    pub degenerate: bool,
    pub nun_frame: Option<usize>,
    pub unadjusted: Option<Unadjusted>,
    pub note: Option<String>,
}

impl CFResult {
    pub fn final_latent(&self) -> &LatentPoint {
        self.path.last().expect("nonempty path")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_alphas: usize,
    pub lambda_points: usize,
    pub lambda_max: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub max_steps: usize,
    pub plausibility: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_alphas: 100,
            lambda_points: 21,
            lambda_max: 2.0,
            lambda1: 5.0,
            lambda2: 1.0,
            max_steps: 1000,
            plausibility: true,
        }
    }
}

impl GeneratorConfig {
    pub fn without_plausibility(self) -> Self {
        Self {
            plausibility: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_alphas == 0 || self.lambda_points == 0 {
            return Err(Error::Config("alpha and lambda grids need at least one point".into()));
        }
        if self.lambda_max < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("step sizes must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Training-split frames available for retrieval.
#[derive(Debug, Clone)]
pub struct CaseLibrary {
    /// Dataset frame index of each entry, ascending.
    pub frames: Vec<usize>,
    pub features: Vec<FeatureTensor>,
    pub outcomes: Vec<OutcomeVector>,
    decoded: Vec<Decoded>,
}

impl CaseLibrary {
    pub fn from_training_split(data: &TrajectoryDataset) -> Result<Self> {
        Self::from_frames(data, data.train_indices())
    }

    /// Library over the given frame ids (sorted and deduplicated).
    pub fn from_frames(data: &TrajectoryDataset, mut frames: Vec<usize>) -> Result<Self> {
        frames.sort_unstable();
        frames.dedup();
        if let Some(&bad) = frames.iter().find(|&&i| i >= data.frames.len()) {
            return Err(Error::Contract(format!("frame {bad} is out of range")));
        }
        let features: Vec<FeatureTensor> = frames.iter().map(|&i| data.frames[i].features.clone()).collect();
        let outcomes = frames.iter().map(|&i| data.frames[i].outcome).collect();
        let decoded = features
            .iter()
            .map(|f| Decoded::new(f, &data.schema))
            .collect::<Result<_>>()?;
        Ok(Self {
            frames,
            features,
            outcomes,
            decoded,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Entry position (not frame id) of a dataset frame.
    pub fn position(&self, frame: usize) -> Option<usize> {
        self.frames.binary_search(&frame).ok()
    }
}

/// Retrieved neighbour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NunMatch {
    /// Position in the library.
    pub entry: usize,
    /// Dataset frame id.
    pub frame: usize,
    pub odiff: f64,
}

/// Closest library frame whose stored outcome satisfies the criterion;
/// ties go to the lowest frame id. `None` when no frame qualifies.
pub fn find_nun(query: &CFQuery, library: &CaseLibrary, schema: &crate::dataset::FeatureSchema) -> Result<Option<NunMatch>> {
    if library.is_empty() {
        return Err(Error::Contract("case library is empty".into()));
    }
    let q = Decoded::new(&query.x_q, schema)?;
    let mut best: Option<NunMatch> = None;
    for (entry, y) in library.outcomes.iter().enumerate() {
        if !validity(y, &query.y_q, &query.spec) {
            continue;
        }
        let d = q.odiff(&library.decoded[entry], schema);
        if best.is_none_or(|b| d < b.odiff) {
            best = Some(NunMatch {
                entry,
                frame: library.frames[entry],
                odiff: d,
            });
        }
    }
    Ok(best)
}

/// Target of the plausibility gradient at `z`: the projected reconstruction
/// of its projected decoding, held constant.
fn roundtrip_target(model: &JointVae, z: &LatentPoint) -> Result<FeatureTensor> {
    let x1 = model.decode_projected(z)?;
    let z1 = model.encode_mean(&x1)?;
    model.decode_projected(&z1)
}

/// Negative gradient of `||dec(z) - target||` at `z`.
pub fn plausibility_direction(model: &JointVae, z: &LatentPoint) -> Result<Vec<f64>> {
    let target = roundtrip_target(model, z)?;
    let (_, g) = model.roundtrip_gradient(z, &target)?;
    Ok(g.into_iter().map(|v| -v).collect())
}

/// `z + lambda * g` with `g` the negative roundtrip-distance gradient.
pub fn plausibility_adjust(model: &JointVae, z: &LatentPoint, lambda: f64) -> Result<LatentPoint> {
    if lambda < 0.0 {
        return Err(Error::Contract(format!("lambda must be nonnegative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(z.clone());
    }
    let g = plausibility_direction(model, z)?;
    Ok(LatentPoint(z.0.iter().zip(&g).map(|(a, b)| a + lambda * b).collect()))
}

fn quality_at(model: &JointVae, query: &CFQuery, z: &LatentPoint) -> Result<(FeatureTensor, OutcomeVector, QualityReport)> {
    let x_c = model.decode_projected(z)?;
    let y_c = model.predict_outcomes(z)?;
    let quality = QualityReport {
        odiff: odiff(&query.x_q, &x_c, &model.schema)?,
        anomaly: anomaly_score(model, z)?,
        valid: validity(&y_c, &query.y_q, &query.spec),
    };
    Ok((x_c, y_c, quality))
}

/// Result for a retrieved neighbour, scored against stored outcomes. The
/// path holds the query's latent and the neighbour's.
pub fn nun_result(model: &JointVae, query: &CFQuery, library: &CaseLibrary, m: &NunMatch) -> Result<CFResult> {
    let x_c = library.features[m.entry].clone();
    let y_c = library.outcomes[m.entry];
    let z_q = model.encode_mean(&query.x_q)?;
    let z = model.encode_mean(&x_c)?;
    let valid = validity(&y_c, &query.y_q, &query.spec);
    Ok(CFResult {
        method: CFMethod::Nun,
        path_outcomes: vec![model.predict_outcomes(&z_q)?, model.predict_outcomes(&z)?],
        quality: QualityReport {
            odiff: m.odiff,
            anomaly: anomaly_score(model, &z)?,
            valid,
        },
        x_c,
        path: vec![z_q, z],
        steps: 0,
        alpha: None,
        lambda: None,
        y_c,
        outcome_source: OutcomeSource::Stored,
        valid,
        degenerate: false,
        nun_frame: Some(m.frame),
        unadjusted: None,
        note: None,
    })
}

/// Runs NUN retrieval. `Ok(None)` when no neighbour satisfies the criterion.
pub fn nun_cf(model: &JointVae, query: &CFQuery, library: &CaseLibrary) -> Result<Option<CFResult>> {
    match find_nun(query, library, &model.schema)? {
        Some(m) => Ok(Some(nun_result(model, query, library, &m)?)),
        None => Ok(None),
    }
}

fn lerp(a: &LatentPoint, b: &LatentPoint, alpha: f64) -> LatentPoint {
    LatentPoint(a.0.iter().zip(&b.0).map(|(x, y)| x + alpha * (y - x)).collect())
}

/// Scans `alpha` from 0 to 1 along the segment from the query latent to the
/// neighbour's latent and stops at the first point the outcome head
/// satisfies the criterion. Reaching only `alpha = 1` (or nothing) counts as
/// failure and returns the neighbour itself, marked invalid.
pub fn interpolate_cf(
    model: &JointVae,
    query: &CFQuery,
    nun_features: &FeatureTensor,
    nun_outcome: &OutcomeVector,
    nun_frame: Option<usize>,
    config: &GeneratorConfig,
) -> Result<CFResult> {
    config.validate()?;
    if !validity(nun_outcome, &query.y_q, &query.spec) {
        return Err(Error::Contract("neighbour does not satisfy the criterion on its stored outcome".into()));
    }
    let z_q = model.encode_mean(&query.x_q)?;
    let z_n = model.encode_mean(nun_features)?;
    let n = config.n_alphas;
    let mut path = Vec::new();
    let mut path_outcomes = Vec::new();
    let mut hit = None;
    for k in 0..=n {
        let alpha = k as f64 / n as f64;
        let z = if k == 0 { z_q.clone() } else { lerp(&z_q, &z_n, alpha) };
        let y = model.predict_outcomes(&z)?;
        path.push(z);
        path_outcomes.push(y);
        if validity(&y, &query.y_q, &query.spec) {
            hit = Some(k);
            break;
        }
    }
    let Some(k) = hit.filter(|&k| k < n) else {
        let z = model.encode_mean(nun_features)?;
        let quality = QualityReport {
            odiff: odiff(&query.x_q, nun_features, &model.schema)?,
            anomaly: anomaly_score(model, &z)?,
            valid: false,
        };
        return Ok(CFResult {
            method: CFMethod::Interpolate,
            x_c: nun_features.clone(),
            steps: path.len() - 1,
            y_c: *path_outcomes.last().expect("nonempty"),
            path,
            path_outcomes,
            alpha: Some(1.0),
            lambda: None,
            outcome_source: OutcomeSource::Predicted,
            valid: false,
            quality,
            degenerate: false,
            nun_frame,
            unadjusted: None,
            note: Some(
                if hit.is_some() {
                    "criterion first met at alpha = 1; falling back to the neighbour"
                } else {
                    "criterion never met along the segment; falling back to the neighbour"
                }
                .into(),
            ),
        });
    };
    let alpha = k as f64 / n as f64;
    let z_alpha = path.last().expect("nonempty").clone();
    let (x_a, y_a, q_a) = quality_at(model, query, &z_alpha)?;
    let degenerate = k == 0;
    let mut result = CFResult {
        method: CFMethod::Interpolate,
        x_c: x_a,
        steps: k,
        alpha: Some(alpha),
        lambda: None,
        y_c: y_a,
        outcome_source: OutcomeSource::Predicted,
        valid: q_a.valid,
        quality: q_a,
        degenerate,
        nun_frame,
        unadjusted: None,
        note: degenerate.then(|| "criterion already met by the model at the query".to_string()),
        path,
        path_outcomes,
    };
    if !config.plausibility || degenerate {
        return Ok(result);
    }
    let g = plausibility_direction(model, &z_alpha)?;
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Ok(result);
    }
    let unit: Vec<f64> = g.iter().map(|v| v / norm).collect();
    let mut best = (0.0, q_a.anomaly, z_alpha.clone());
    let steps = config.lambda_points.max(2) - 1;
    for j in 1..=steps {
        let lambda = config.lambda_max * j as f64 / steps as f64;
        let z = LatentPoint(z_alpha.0.iter().zip(&unit).map(|(a, u)| a + lambda * u).collect());
        let a = anomaly_score(model, &z)?;
        if a < best.1 {
            best = (lambda, a, z);
        }
    }
    let (lambda, _, z_c) = best;
    result.lambda = Some(lambda);
    if lambda > 0.0 {
        let (x_c, y_c, q_c) = quality_at(model, query, &z_c)?;
        result.unadjusted = Some(Unadjusted {
            z: z_alpha,
            y_c: result.y_c,
            quality: result.quality,
        });
        result.path.push(z_c);
        result.path_outcomes.push(y_c);
        result.x_c = x_c;
        result.y_c = y_c;
        result.valid = q_c.valid;
        result.quality = q_c;
    }
    Ok(result)
}

/// Follows the outcome head's gradient in the requested direction, with an
/// optional plausibility step after each move, until the criterion holds or
/// the step budget runs out.
pub fn gradient_cf(model: &JointVae, query: &CFQuery, config: &GeneratorConfig) -> Result<CFResult> {
    config.validate()?;
    let mut z = model.encode_mean(&query.x_q)?;
    let mut path = vec![z.clone()];
    let mut y = model.predict_outcomes(&z)?;
    let mut path_outcomes = vec![y];
    let s = query.spec.sign.value();
    let mut steps = 0;
    let degenerate = validity(&y, &query.y_q, &query.spec);
    while !validity(&y, &query.y_q, &query.spec) && steps < config.max_steps {
        let (_, g) = model.head_gradient(&z, query.spec.variable)?;
        let mut next = LatentPoint(z.0.iter().zip(&g).map(|(a, b)| a + s * config.lambda1 * b).collect());
        if config.plausibility && config.lambda2 > 0.0 && next.is_finite() {
            next = plausibility_adjust(model, &next, config.lambda2)?;
        }
        steps += 1;
        if !next.is_finite() {
            return Err(Error::Traversal {
                step: steps,
                reason: "latent became non-finite".into(),
                path,
            });
        }
        z = next;
        y = model.predict_outcomes(&z)?;
        path.push(z.clone());
        path_outcomes.push(y);
    }
    let (x_c, y_c, quality) = quality_at(model, query, &z)?;
    Ok(CFResult {
        method: CFMethod::Gradient,
        x_c,
        path,
        path_outcomes,
        steps,
        alpha: None,
        lambda: None,
        y_c,
        outcome_source: OutcomeSource::Predicted,
        valid: quality.valid,
        quality,
        degenerate,
        nun_frame: None,
        unadjusted: None,
        note: degenerate.then(|| "criterion already met by the model at the query".to_string()),
    })
}

/// Runs one method. NUN and interpolation report a missing neighbour as
/// `Ok(None)`.
pub fn generate(
    model: &JointVae,
    query: &CFQuery,
    library: &CaseLibrary,
    method: CFMethod,
    config: &GeneratorConfig,
) -> Result<Option<CFResult>> {
    match method {
        CFMethod::Nun => nun_cf(model, query, library),
        CFMethod::Interpolate => match find_nun(query, library, &model.schema)? {
            None => Ok(None),
            Some(m) => Ok(Some(interpolate_cf(
                model,
                query,
                &library.features[m.entry],
                &library.outcomes[m.entry],
                Some(m.frame),
                config,
            )?)),
        },
        CFMethod::Gradient => Ok(Some(gradient_cf(model, query, config)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::OutcomeVariable;
    use crate::dataset::FeatureSchema;
    use crate::envs::{EnvConfig, EnvKind};
    use crate::jvae::ModelConfig;
    use crate::measures::Sign;

    fn cart_model() -> JointVae {
        let schema = FeatureSchema::for_env(EnvKind::Cartpole, &EnvConfig::default());
        JointVae::new(schema.clone(), ModelConfig::for_schema(&schema), 9).unwrap()
    }

    fn query(model: &JointVae, eps: f64) -> CFQuery {
        let x_q = FeatureTensor(vec![0.1, 0.2, -0.1, 0.0]);
        let z = model.encode_mean(&x_q).unwrap();
        let y_q = model.predict_outcomes(&z).unwrap();
        CFQuery {
            frame: None,
            x_q,
            y_q,
            spec: ValiditySpec::numeric(OutcomeVariable::Value, Sign::Positive, eps).unwrap(),
        }
    }

    #[test]
    fn zero_lambda_adjustment_is_identity() {
        let m = cart_model();
        let z = LatentPoint(vec![0.2; 8]);
        assert_eq!(plausibility_adjust(&m, &z, 0.0).unwrap(), z);
        assert!(plausibility_adjust(&m, &z, -1.0).is_err());
    }

    #[test]
    fn frozen_traversal_never_moves() {
        let m = cart_model();
        let q = query(&m, 0.5);
        let cfg = GeneratorConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            max_steps: 7,
            ..GeneratorConfig::default()
        };
        let r = gradient_cf(&m, &q, &cfg).unwrap();
        assert_eq!(r.steps, 7);
        assert!(!r.valid);
        assert!(r.path.iter().all(|z| *z == r.path[0]));
    }

    #[test]
    fn method_names_round_trip() {
        for m in CFMethod::ALL {
            assert_eq!(m.name().parse::<CFMethod>().unwrap(), m);
        }
    }
}
