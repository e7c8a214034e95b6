//! Request and response bodies of the counterfactual service. Shared by the
//! server and the client so the two cannot drift.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Environment variable holding the service port.
pub const PORT_ENV: &str = "LATENTCF_PORT";
pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcomes {
    pub value: f64,
    pub confidence: f64,
    pub riskiness: f64,
}

impl Outcomes {
    pub fn get(&self, variable: &str) -> Option<f64> {
        match variable {
            "value" => Some(self.value),
            "confidence" => Some(self.confidence),
            "riskiness" => Some(self.riskiness),
            _ => None,
        }
    }
}

/// Direction of the requested change. On the wire it is `"+1"` or `"-1"`;
/// integers and the words `positive`/`negative` are accepted on input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sign::Positive => "+1",
            Sign::Negative => "-1",
        })
    }
}

impl FromStr for Sign {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "+1" | "1" | "+" | "positive" | "up" => Ok(Sign::Positive),
            "-1" | "-" | "negative" | "down" => Ok(Sign::Negative),
            other => Err(format!("invalid sign '{other}' (expected +1 or -1)")),
        }
    }
}

impl Serialize for Sign {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Sign {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(1) => Ok(Sign::Positive),
            Raw::Int(-1) => Ok(Sign::Negative),
            Raw::Int(n) => Err(serde::de::Error::custom(format!("invalid sign {n} (expected 1 or -1)"))),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericInfo {
    pub name: String,
    pub min: f64,
    pub max: f64,
    /// Interval width used by odiff.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub env: String,
    pub height: usize,
    pub width: usize,
    /// Entity names indexed by the integer codes used in grids.
    pub legend: Vec<String>,
    pub numeric: Vec<NumericInfo>,
    pub outcome_variables: Vec<String>,
    pub methods: Vec<String>,
    pub latent_dim: usize,
    pub mode: String,
    pub model_digest: String,
    pub frame_count: usize,
    pub anomaly_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub id: usize,
    pub episode: usize,
    pub step: usize,
    /// `"train"` or `"test"`.
    pub split: String,
    pub outcome: Outcomes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePage {
    pub offset: usize,
    pub limit: usize,
    pub total: usize,
    pub frames: Vec<FrameSummary>,
}

/// A decoded observation. Grids are row-major nested arrays of entity codes
/// (see [`ModelInfo::legend`]) and strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ObservationView {
    Grid { kinds: Vec<Vec<u8>>, strengths: Vec<Vec<u8>> },
    Vector { names: Vec<String>, values: Vec<f64> },
}

impl ObservationView {
    /// Cells (or vector entries) that differ, shaped like the observation.
    pub fn diff_mask(&self, other: &ObservationView) -> Option<Vec<Vec<bool>>> {
        match (self, other) {
            (ObservationView::Grid { kinds: a, strengths: sa }, ObservationView::Grid { kinds: b, strengths: sb }) => {
                if a.len() != b.len() {
                    return None;
                }
                let mut out = Vec::with_capacity(a.len());
                for r in 0..a.len() {
                    if a[r].len() != b[r].len() {
                        return None;
                    }
                    out.push((0..a[r].len()).map(|c| a[r][c] != b[r][c] || sa[r][c] != sb[r][c]).collect());
                }
                Some(out)
            }
            (ObservationView::Vector { values: a, .. }, ObservationView::Vector { values: b, .. }) if a.len() == b.len() => {
                Some(vec![a.iter().zip(b).map(|(x, y)| x != y).collect()])
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetail {
    pub id: usize,
    pub episode: usize,
    pub step: usize,
    pub split: String,
    pub action: usize,
    pub reward: f64,
    pub outcome: Outcomes,
    pub raw_outcome: Outcomes,
    pub observation: ObservationView,
}

/// Optional generator overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub n_alphas: Option<usize>,
    pub lambda_points: Option<usize>,
    pub lambda_max: Option<f64>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub max_steps: Option<usize>,
    pub plausibility: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualRequest {
    pub frame_id: usize,
    pub variable: String,
    pub sign: Sign,
    /// Defaults to the evaluation margin rule when absent.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub method: String,
    #[serde(default)]
    pub params: Option<GenerationParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub odiff: f64,
    pub anomaly: f64,
    pub anomalous: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResponse {
    pub result_id: String,
    pub frame_id: usize,
    pub method: String,
    pub variable: String,
    pub sign: Sign,
    pub epsilon: f64,
    pub valid: bool,
    pub degenerate: bool,
    /// `"stored"` for retrieved frames, `"predicted"` for model outputs.
    pub outcome_source: String,
    pub steps: usize,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub y_q: Outcomes,
    pub y_c: Outcomes,
    pub query: ObservationView,
    pub counterfactual: ObservationView,
    pub diff_mask: Vec<Vec<bool>>,
    pub quality: Quality,
    /// Predicted outcomes at every latent on the path.
    pub path_outcomes: Vec<Outcomes>,
    pub nun_frame: Option<usize>,
    pub note: Option<String>,
}

impl CounterfactualResponse {
    /// Recomputes the validity flag from the returned outcomes and spec.
    pub fn recompute_validity(&self) -> Option<bool> {
        let c = self.y_c.get(&self.variable)?;
        let q = self.y_q.get(&self.variable)?;
        Some(self.sign.value() * (c - q) >= self.epsilon)
    }

    pub fn path_len(&self) -> usize {
        self.path_outcomes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub result_id: String,
    pub step: usize,
    pub latent: Vec<f64>,
    pub outcome: Outcomes,
    pub observation: ObservationView,
}

/// Error body for every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    /// Machine-readable reason, e.g. `unknown-frame`, `invalid-spec`,
    /// `nun-not-found`.
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_forms() {
        for (txt, s) in [("\"+1\"", Sign::Positive), ("1", Sign::Positive), ("-1", Sign::Negative), ("\"negative\"", Sign::Negative)] {
            assert_eq!(serde_json::from_str::<Sign>(txt).unwrap(), s);
        }
        assert_eq!(serde_json::to_string(&Sign::Negative).unwrap(), "\"-1\"");
        assert!(serde_json::from_str::<Sign>("2").is_err());
        assert!(serde_json::from_str::<Sign>("\"sideways\"").is_err());
    }

    #[test]
    fn diff_mask_marks_changed_cells() {
        let a = ObservationView::Grid {
            kinds: vec![vec![0, 1], vec![2, 0]],
            strengths: vec![vec![0, 2], vec![1, 0]],
        };
        let b = ObservationView::Grid {
            kinds: vec![vec![0, 1], vec![0, 0]],
            strengths: vec![vec![0, 3], vec![0, 0]],
        };
        assert_eq!(a.diff_mask(&b).unwrap(), vec![vec![false, true], vec![true, false]]);
        let v = ObservationView::Vector {
            names: vec!["x".into()],
            values: vec![0.0],
        };
        assert!(a.diff_mask(&v).is_none());
    }

    #[test]
    fn unknown_params_are_rejected() {
        let r = serde_json::from_str::<CounterfactualRequest>(
            r#"{"frame_id":1,"variable":"value","sign":"+1","method":"gradient","params":{"bogus":1}}"#,
        );
        assert!(r.is_err());
    }
}
