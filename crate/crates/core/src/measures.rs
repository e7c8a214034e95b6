//! Counterfactual quality measures: observational difference, the validity
//! predicate and the roundtrip anomaly score.

use serde::{Deserialize, Serialize};

use crate::agent::{OutcomeVariable, OutcomeVector};
use crate::dataset::{FeatureSchema, FeatureTensor};
use crate::error::{Error, Result};
use crate::jvae::{JointVae, LatentPoint};

/// Requested direction of change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub const BOTH: [Sign; 2] = [Sign::Positive, Sign::Negative];

    pub fn value(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

impl std::fmt::Display for Sign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sign::Positive => "+1",
            Sign::Negative => "-1",
        })
    }
}

impl std::str::FromStr for Sign {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "+1" | "1" | "+" | "pos" | "positive" => Ok(Sign::Positive),
            "-1" | "-" | "neg" | "negative" => Ok(Sign::Negative),
            other => Err(format!("sign must be +1 or -1, got '{other}'")),
        }
    }
}

impl Serialize for Sign {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.value() as i8)
    }
}

impl<'de> Deserialize<'de> for Sign {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(1) => Ok(Sign::Positive),
            Raw::Int(-1) => Ok(Sign::Negative),
            Raw::Int(n) => Err(serde::de::Error::custom(format!("sign must be +1 or -1, got {n}"))),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Numeric,
    Categorical,
}

/// Which outcome must change, in which direction, and by how much.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValiditySpec {
    pub variable: OutcomeVariable,
    pub sign: Sign,
    pub epsilon: f64,
    pub kind: VariableKind,
}

impl ValiditySpec {
    pub fn numeric(variable: OutcomeVariable, sign: Sign, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Contract(format!("margin must be positive and finite, got {epsilon}")));
        }
        Ok(Self {
            variable,
            sign,
            epsilon,
            kind: VariableKind::Numeric,
        })
    }
}

/// Numeric: `s * (y_c - y_q) >= eps`. Categorical: the values differ.
pub fn validity(y_c: &OutcomeVector, y_q: &OutcomeVector, spec: &ValiditySpec) -> bool {
    let (c, q) = (y_c.get(spec.variable), y_q.get(spec.variable));
    match spec.kind {
        VariableKind::Numeric => spec.sign.value() * (c - q) >= spec.epsilon,
        VariableKind::Categorical => c != q,
    }
}

/// Edit distance over categorical cells (after argmax) plus the normalised
/// absolute difference of every numeric feature.
pub fn odiff(a: &FeatureTensor, b: &FeatureTensor, schema: &FeatureSchema) -> Result<f64> {
    schema.check(a)?;
    schema.check(b)?;
    Ok(odiff_unchecked(&a.0, &b.0, schema))
}

fn odiff_unchecked(a: &[f64], b: &[f64], schema: &FeatureSchema) -> f64 {
    let mut total = 0.0;
    for li in 0..schema.categorical.len() {
        let ca = schema.argmax_layer(a, li);
        let cb = schema.argmax_layer(b, li);
        total += ca.iter().zip(&cb).filter(|(x, y)| x != y).count() as f64;
    }
    let cells = schema.cells();
    let off = schema.numeric_offset();
    for (ni, chan) in schema.numeric.iter().enumerate() {
        let base = (off + ni) * cells;
        for i in base..base + cells {
            total += (a[i] - b[i]).abs() / chan.width;
        }
    }
    total
}

/// Argmax codes and raw numeric values of a tensor, so repeated distances
/// against it skip the argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    codes: Vec<Vec<usize>>,
    numeric: Vec<f64>,
}

impl Decoded {
    pub fn new(t: &FeatureTensor, schema: &FeatureSchema) -> Result<Self> {
        schema.check(t)?;
        let codes = (0..schema.categorical.len()).map(|li| schema.argmax_layer(&t.0, li)).collect();
        let start = schema.numeric_offset() * schema.cells();
        Ok(Self {
            codes,
            numeric: t.0[start..].to_vec(),
        })
    }

    /// Same value as [`odiff`] on the original tensors.
    pub fn odiff(&self, other: &Decoded, schema: &FeatureSchema) -> f64 {
        let mut total = 0.0;
        for (a, b) in self.codes.iter().zip(&other.codes) {
            total += a.iter().zip(b).filter(|(x, y)| x != y).count() as f64;
        }
        let cells = schema.cells();
        for (ni, chan) in schema.numeric.iter().enumerate() {
            for i in ni * cells..(ni + 1) * cells {
                total += (self.numeric[i] - other.numeric[i]).abs() / chan.width;
            }
        }
        total
    }
}

/// `odiff(proj dec z, proj dec enc proj dec z)`: how far one more roundtrip
/// moves the decoding of `z`.
pub fn anomaly_score(model: &JointVae, z: &LatentPoint) -> Result<f64> {
    let x1 = model.decode_projected(z)?;
    anomaly_of_decoding(model, &x1)
}

/// Anomaly of an already projected decoding.
pub fn anomaly_of_decoding(model: &JointVae, x1: &FeatureTensor) -> Result<f64> {
    let z1 = model.encode_mean(x1)?;
    let x2 = model.decode_projected(&z1)?;
    odiff(x1, &x2, &model.schema)
}

/// Observational difference, anomaly score and validity of one counterfactual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub odiff: f64,
    pub anomaly: f64,
    pub valid: bool,
}

/// Scores above the threshold are classed anomalous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyThreshold {
    pub threshold: f64,
    /// Accuracy on the set it was tuned on.
    pub accuracy: f64,
}

impl AnomalyThreshold {
    pub fn is_anomalous(&self, score: f64) -> bool {
        score > self.threshold
    }

    pub fn accuracy_on(&self, scored: &[(f64, bool)]) -> f64 {
        threshold_accuracy(self.threshold, scored)
    }
}

pub fn threshold_accuracy(threshold: f64, scored: &[(f64, bool)]) -> f64 {
    let hits = scored.iter().filter(|&&(s, anom)| (s > threshold) == anom).count();
    hits as f64 / scored.len().max(1) as f64
}

/// Threshold maximising accuracy on labelled scores. Candidates are the
/// midpoints between consecutive distinct scores plus one below the minimum
/// and one above the maximum;
/// ties go to the lowest candidate.
pub fn tune_threshold(scored: &[(f64, bool)]) -> Result<AnomalyThreshold> {
    let pos = scored.iter().filter(|s| s.1).count();
    if pos == 0 || pos == scored.len() {
        return Err(Error::DegenerateLabels(format!(
            "{pos} anomalous of {} labelled examples; both classes are needed",
            scored.len()
        )));
    }
    let mut values: Vec<f64> = scored.iter().map(|s| s.0).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut candidates = vec![values[0] - 1.0];
    candidates.extend(values.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(values[values.len() - 1] + 1.0);
    let mut best = AnomalyThreshold {
        threshold: candidates[0],
        accuracy: threshold_accuracy(candidates[0], scored),
    };
    for &t in &candidates[1..] {
        let acc = threshold_accuracy(t, scored);
        if acc > best.accuracy {
            best = AnomalyThreshold { threshold: t, accuracy: acc };
        }
    }
    Ok(best)
}

/// Scores each latent with [`anomaly_score`] and tunes a threshold.
pub fn tune_anomaly_threshold(model: &JointVae, labeled: &[(LatentPoint, bool)]) -> Result<AnomalyThreshold> {
    let scored = labeled
        .iter()
        .map(|(z, anom)| Ok((anomaly_score(model, z)?, *anom)))
        .collect::<Result<Vec<_>>>()?;
    tune_threshold(&scored)
}
