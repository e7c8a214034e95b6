//! Feature encoding, outcome normalisation, episode-level splitting and the
//! JSON-lines dataset file.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use latentcf_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{OutcomeVector, TrajectorySet};
use crate::envs::{EntityKind, EnvConfig, EnvKind, Observation};
use crate::error::{io_err, Error, Result};

/// A categorical spatial layer, one-hot encoded over its vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalLayer {
    pub name: String,
    pub vocabulary: Vec<String>,
}

/// A numeric layer, min-max normalised from `[min, max]` onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericChannel {
    pub name: String,
    pub min: f64,
    pub max: f64,
    /// Values are integers in raw units (decoding rounds).
    pub integer: bool,
    /// Interval width in encoded units used by the observational difference.
    pub width: f64,
}

/// Describes how observations map to feature tensors of shape
/// `[channels, height, width]`: one-hot channels for each categorical layer
/// in order, followed by one channel per numeric layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub env: EnvKind,
    pub height: usize,
    pub width: usize,
    pub categorical: Vec<CategoricalLayer>,
    pub numeric: Vec<NumericChannel>,
}

/// Encoded observation, flat in `[channels, height, width]` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureTensor(pub Vec<f64>);

impl FeatureSchema {
    pub fn for_env(kind: EnvKind, config: &EnvConfig) -> Self {
        match kind {
            EnvKind::Gridworld => Self {
                env: kind,
                height: config.grid.height,
                width: config.grid.width,
                categorical: vec![CategoricalLayer {
                    name: "kind".into(),
                    vocabulary: EntityKind::ALL.iter().map(|k| k.name().to_string()).collect(),
                }],
                numeric: vec![NumericChannel {
                    name: "strength".into(),
                    min: 0.0,
                    max: config.grid.max_strength as f64,
                    integer: true,
                    width: 2.0,
                }],
            },
            EnvKind::Cartpole => {
                let c = &config.cartpole;
                let chan = |name: &str, bound: f64| NumericChannel {
                    name: name.into(),
                    min: -bound,
                    max: bound,
                    integer: false,
                    width: 2.0,
                };
                Self {
                    env: kind,
                    height: 1,
                    width: 1,
                    categorical: vec![],
                    numeric: vec![
                        chan("position", c.track_bound),
                        chan("velocity", c.velocity_bound),
                        chan("angle", c.angle_threshold),
                        chan("angular_velocity", c.angular_velocity_bound),
                    ],
                }
            }
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn categorical_channels(&self) -> usize {
        self.categorical.iter().map(|l| l.vocabulary.len()).sum()
    }

    pub fn channels(&self) -> usize {
        self.categorical_channels() + self.numeric.len()
    }

    /// Number of scalar features in an encoded tensor.
    pub fn len(&self) -> usize {
        self.channels() * self.cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.height, self.width]
    }

    /// True when the encoder should treat the input as an image.
    pub fn is_spatial(&self) -> bool {
        self.cells() > 1
    }

    /// First channel of categorical layer `layer`.
    pub fn layer_offset(&self, layer: usize) -> usize {
        self.categorical[..layer].iter().map(|l| l.vocabulary.len()).sum()
    }

    pub fn numeric_offset(&self) -> usize {
        self.categorical_channels()
    }

    pub fn check(&self, t: &FeatureTensor) -> Result<()> {
        if t.0.len() != self.len() {
            return Err(Error::Schema(format!(
                "feature tensor has {} values, schema expects {}",
                t.0.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Argmax category per cell for categorical layer `layer`; ties go to
    /// the lowest category index.
    pub fn argmax_layer(&self, t: &[f64], layer: usize) -> Vec<usize> {
        let cells = self.cells();
        let off = self.layer_offset(layer);
        let k = self.categorical[layer].vocabulary.len();
        (0..cells)
            .map(|cell| {
                let mut best = 0;
                for c in 1..k {
                    if t[(off + c) * cells + cell] > t[(off + best) * cells + cell] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    fn normalize(&self, chan: &NumericChannel, v: f64) -> f64 {
        let n = (v - chan.min) / (chan.max - chan.min) * 2.0 - 1.0;
        n.clamp(-1.0, 1.0)
    }

    fn denormalize(&self, chan: &NumericChannel, n: f64) -> f64 {
        let v = (n.clamp(-1.0, 1.0) + 1.0) / 2.0 * (chan.max - chan.min) + chan.min;
        if chan.integer {
            v.round()
        } else {
            v
        }
    }
}

/// Categorical codes and numeric values per layer, cell-major.
struct Layers {
    categorical: Vec<Vec<u8>>,
    numeric: Vec<Vec<f64>>,
}

fn observation_layers(obs: &Observation, schema: &FeatureSchema) -> Result<Layers> {
    match (obs, schema.env) {
        (
            Observation::Grid {
                height,
                width,
                kinds,
                strengths,
            },
            EnvKind::Gridworld,
        ) => {
            if *height != schema.height || *width != schema.width || kinds.len() != schema.cells() || strengths.len() != schema.cells() {
                return Err(Error::Schema(format!(
                    "grid observation {height}x{width} does not match schema {}x{}",
                    schema.height, schema.width
                )));
            }
            Ok(Layers {
                categorical: vec![kinds.clone()],
                numeric: vec![strengths.iter().map(|&s| s as f64).collect()],
            })
        }
        (Observation::Vector { values }, EnvKind::Cartpole) => {
            if values.len() != schema.numeric.len() {
                return Err(Error::Schema(format!(
                    "vector observation has {} values, schema expects {}",
                    values.len(),
                    schema.numeric.len()
                )));
            }
            Ok(Layers {
                categorical: vec![],
                numeric: values.iter().map(|&v| vec![v]).collect(),
            })
        }
        _ => Err(Error::Schema(format!("observation kind does not match {} schema", schema.env))),
    }
}

/// One-hot encodes categorical layers and min-max normalises numeric layers.
/// Numeric values outside the schema bounds are clipped.
pub fn encode_observation(obs: &Observation, schema: &FeatureSchema) -> Result<FeatureTensor> {
    let layers = observation_layers(obs, schema)?;
    let cells = schema.cells();
    let mut out = vec![0.0; schema.len()];
    for (li, codes) in layers.categorical.iter().enumerate() {
        let off = schema.layer_offset(li);
        let k = schema.categorical[li].vocabulary.len();
        for (cell, &code) in codes.iter().enumerate() {
            if code as usize >= k {
                return Err(Error::Schema(format!(
                    "category {code} outside the {}-entry '{}' vocabulary",
                    k, schema.categorical[li].name
                )));
            }
            out[(off + code as usize) * cells + cell] = 1.0;
        }
    }
    let noff = schema.numeric_offset();
    for (ni, values) in layers.numeric.iter().enumerate() {
        let chan = &schema.numeric[ni];
        for (cell, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Schema(format!("non-finite value in '{}'", chan.name)));
            }
            out[(noff + ni) * cells + cell] = schema.normalize(chan, v);
        }
    }
    Ok(FeatureTensor(out))
}

/// Inverse of [`encode_observation`]: argmax per cell for categorical layers,
/// denormalised (and, for integer layers, rounded) numerics. On the grid an
/// empty cell carries strength 0 and an occupied cell at least 1.
pub fn decode_observation(t: &FeatureTensor, schema: &FeatureSchema) -> Result<Observation> {
    schema.check(t)?;
    let cells = schema.cells();
    let noff = schema.numeric_offset();
    let numeric: Vec<Vec<f64>> = schema
        .numeric
        .iter()
        .enumerate()
        .map(|(ni, chan)| (0..cells).map(|cell| schema.denormalize(chan, t.0[(noff + ni) * cells + cell])).collect())
        .collect();
    match schema.env {
        EnvKind::Gridworld => {
            let kinds: Vec<u8> = schema.argmax_layer(&t.0, 0).into_iter().map(|k| k as u8).collect();
            let strengths = kinds
                .iter()
                .zip(&numeric[0])
                .map(|(&k, &s)| if k == EntityKind::Empty.code() { 0 } else { (s as u8).max(1) })
                .collect();
            Ok(Observation::Grid {
                height: schema.height,
                width: schema.width,
                kinds,
                strengths,
            })
        }
        EnvKind::Cartpole => Ok(Observation::Vector {
            values: numeric.into_iter().map(|v| v[0]).collect(),
        }),
    }
}

/// Snaps an arbitrary decoder output onto the nearest valid encoding.
pub fn project(t: &FeatureTensor, schema: &FeatureSchema) -> Result<FeatureTensor> {
    encode_observation(&decode_observation(t, schema)?, schema)
}

impl FeatureTensor {
    pub fn to_tensor(&self, schema: &FeatureSchema) -> Tensor {
        let [c, h, w] = schema.shape();
        Tensor::new(vec![c, h, w], self.0.clone()).expect("feature tensor matches schema")
    }

    /// Stacks tensors into a `[batch, c, h, w]` batch.
    pub fn batch(items: &[&FeatureTensor], schema: &FeatureSchema) -> Tensor {
        let [c, h, w] = schema.shape();
        let mut data = Vec::with_capacity(items.len() * schema.len());
        for t in items {
            data.extend_from_slice(&t.0);
        }
        Tensor::new(vec![items.len(), c, h, w], data).expect("batch shape")
    }
}

/// Per-variable statistics over the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariableStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeStats {
    pub value: VariableStats,
    pub confidence: VariableStats,
    pub riskiness: VariableStats,
}

fn stats_of(values: &[f64], name: &str) -> Result<VariableStats> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(std > 0.0) || !(max > min) {
        return Err(Error::DegenerateStatistics(format!("'{name}' has zero variance over the training split")));
    }
    Ok(VariableStats { mean, std, min, max })
}

impl OutcomeStats {
    /// Statistics over raw (unnormalised) training outcomes.
    pub fn fit(train: &[OutcomeVector]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::DegenerateStatistics("empty training split".into()));
        }
        let col = |f: fn(&OutcomeVector) -> f64| train.iter().map(f).collect::<Vec<_>>();
        Ok(Self {
            value: stats_of(&col(|o| o.value), "value")?,
            confidence: stats_of(&col(|o| o.confidence), "confidence")?,
            riskiness: stats_of(&col(|o| o.riskiness), "riskiness")?,
        })
    }

    /// Value is standardised and then min-max mapped onto `[-1, 1]` using the
    /// training extremes; the other variables pass through. Everything is
    /// clipped to `[-1, 1]`; the flag reports whether clipping occurred.
    pub fn normalize(&self, raw: &OutcomeVector) -> (OutcomeVector, bool) {
        let s = &self.value;
        let zmin = (s.min - s.mean) / s.std;
        let zmax = (s.max - s.mean) / s.std;
        let z = (raw.value - s.mean) / s.std;
        let v = (z - zmin) / (zmax - zmin) * 2.0 - 1.0;
        let out = OutcomeVector {
            value: v.clamp(-1.0, 1.0),
            confidence: raw.confidence.clamp(-1.0, 1.0),
            riskiness: raw.riskiness.clamp(-1.0, 1.0),
        };
        let clipped = out.value != v || out.confidence != raw.confidence || out.riskiness != raw.riskiness;
        (out, clipped)
    }
}

/// Fits statistics on `train` and normalises it.
pub fn normalize_outcomes(train: &[OutcomeVector]) -> Result<(Vec<OutcomeVector>, OutcomeStats)> {
    let stats = OutcomeStats::fit(train)?;
    Ok((train.iter().map(|o| stats.normalize(o).0).collect(), stats))
}

/// Episode ids in each partition, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions whole episodes; `train_fraction` of them (rounded) go to train
/// and at least one to test.
pub fn split_episodes(episodes: &[usize], train_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&train_fraction) {
        return Err(Error::Split(format!("train fraction {train_fraction} outside [0, 1)")));
    }
    let n = episodes.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).min(n.saturating_sub(1));
    if n < 2 || n_train == 0 {
        return Err(Error::Split(format!("{n} episodes cannot give nonempty train and test splits")));
    }
    let mut shuffled = episodes.to_vec();
    shuffled.sort_unstable();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = shuffled[..n_train].to_vec();
    let mut test = shuffled[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub episode: usize,
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub features: FeatureTensor,
    pub raw_outcome: OutcomeVector,
    /// Normalised outcome targets.
    pub outcome: OutcomeVector,
}

/// Encoded trajectories with outcome statistics and an episode split.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub schema: FeatureSchema,
    pub stats: OutcomeStats,
    pub split: Split,
    pub frames: Vec<Frame>,
    /// Count of outcome vectors clipped during normalisation.
    pub clipped: usize,
}

const DATASET_FORMAT: &str = "latentcf-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    schema: FeatureSchema,
    stats: OutcomeStats,
    split: Split,
    clipped: usize,
    frames: usize,
}

impl TrajectoryDataset {
    /// Encodes rollouts, splits by episode and normalises outcomes with
    /// statistics from the training episodes only.
    pub fn build(schema: FeatureSchema, set: &TrajectorySet, train_fraction: f64, seed: u64) -> Result<Self> {
        let episodes: Vec<usize> = (0..set.episode_lengths.len()).filter(|&e| set.episode_lengths[e] > 0).collect();
        let split = split_episodes(&episodes, train_fraction, seed)?;
        let train_raw: Vec<OutcomeVector> = set
            .frames
            .iter()
            .filter(|f| split.train.binary_search(&f.episode).is_ok())
            .map(|f| f.outcome)
            .collect();
        let stats = OutcomeStats::fit(&train_raw)?;
        let mut clipped = 0;
        let frames = set
            .frames
            .iter()
            .map(|f| {
                let (outcome, c) = stats.normalize(&f.outcome);
                clipped += c as usize;
                Ok(Frame {
                    episode: f.episode,
                    step: f.step,
                    action: f.action,
                    reward: f.reward,
                    features: encode_observation(&f.observation, &schema)?,
                    raw_outcome: f.outcome,
                    outcome,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if clipped > 0 {
            tracing::info!(clipped, "outcome values clipped to [-1, 1] during normalisation");
        }
        Ok(Self {
            schema,
            stats,
            split,
            frames,
            clipped,
        })
    }

    pub fn is_train(&self, frame: usize) -> bool {
        self.split.train.binary_search(&self.frames[frame].episode).is_ok()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.is_train(i)).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| !self.is_train(i)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(f);
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            schema: self.schema.clone(),
            stats: self.stats.clone(),
            split: self.split.clone(),
            clipped: self.clipped,
            frames: self.frames.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io_err(path))?;
        for frame in &self.frames {
            serde_json::to_writer(&mut w, frame)?;
            w.write_all(b"\n").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(f).lines();
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let first = lines
            .next()
            .ok_or_else(|| malformed("empty file".into()))?
            .map_err(io_err(path))?;
        let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| malformed(format!("bad header: {e}")))?;
        if header.format != DATASET_FORMAT {
            return Err(malformed(format!("not a dataset (format '{}')", header.format)));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::Version {
                what: "dataset",
                found: header.version,
                expected: DATASET_VERSION,
            });
        }
        let mut frames = Vec::with_capacity(header.frames);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io_err(path))?;
            let frame: Frame = serde_json::from_str(&line).map_err(|e| malformed(format!("frame {i}: {e}")))?;
            header
                .schema
                .check(&frame.features)
                .map_err(|e| malformed(format!("frame {i}: {e}")))?;
            frames.push(frame);
        }
        if frames.len() != header.frames {
            return Err(malformed(format!("{} frames present, header declares {}", frames.len(), header.frames)));
        }
        Ok(Self {
            schema: header.schema,
            stats: header.stats,
            split: header.split,
            frames,
            clipped: header.clipped,
        })
    }
}
