//! Jointly trained variational autoencoder: one latent that reconstructs
//! the observation and feeds a small predictor head per outcome variable.

use std::ops::Range;
use std::path::Path;

use latentcf_autodiff::{Activation, Adam, AdamConfig, Reduction, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::agent::{OutcomeVariable, OutcomeVector};
use crate::dataset::{FeatureSchema, FeatureTensor, TrajectoryDataset};
use crate::error::{io_err, Error, Result};
use crate::nn;

/// A point in latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentPoint(pub Vec<f64>);

impl LatentPoint {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Joint,
    ReconOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Output channels of the 3x3 convolution applied to spatial inputs;
    /// 0 feeds the flattened tensor straight into the encoder MLP.
    pub conv_channels: usize,
    /// Grid only: half-width of a second encoder input, the player-centred
    /// relational view of the observation. 0 disables it.
    pub focus_radius: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub head_hidden: usize,
    pub mode: TrainMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            conv_channels: 8,
            focus_radius: 2,
            encoder_hidden: vec![128],
            decoder_hidden: vec![128],
            head_hidden: 32,
            mode: TrainMode::Joint,
        }
    }
}

impl ModelConfig {
    pub fn for_schema(schema: &FeatureSchema) -> Self {
        if schema.is_spatial() {
            Self::default()
        } else {
            Self {
                latent_dim: 8,
                conv_channels: 0,
                focus_radius: 0,
                encoder_hidden: vec![64],
                decoder_hidden: vec![64],
                head_hidden: 32,
                mode: TrainMode::Joint,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta_max: f64,
    /// Fraction of training over which beta ramps linearly from 0.
    pub beta_warmup: f64,
    pub outcome_weight: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            beta_max: 1e-5,
            beta_warmup: 0.5,
            outcome_weight: 10.0,
        }
    }
}

impl TrainSchedule {
    /// Beta after `step` of `total` optimisation steps.
    pub fn beta_at(&self, step: usize, total: usize) -> f64 {
        let ramp = self.beta_warmup * total as f64;
        if ramp <= 0.0 {
            return self.beta_max;
        }
        self.beta_max * (step as f64 / ramp).min(1.0)
    }
}

#[derive(Debug, Clone)]
struct Layout {
    conv: Option<Range<usize>>,
    encoder: Range<usize>,
    decoder: Range<usize>,
    heads: [Range<usize>; 3],
}

impl Layout {
    fn new(config: &ModelConfig, schema: &FeatureSchema) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let conv = (schema.is_spatial() && config.conv_channels > 0).then(|| take(2));
        let encoder = take(2 * (config.encoder_hidden.len() + 1));
        let decoder = take(2 * (config.decoder_hidden.len() + 1));
        let heads = [take(4), take(4), take(4)];
        Self {
            conv,
            encoder,
            decoder,
            heads,
        }
    }

    fn total(&self) -> usize {
        self.heads[2].end
    }
}

/// Scalar loss terms for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub outcome: f64,
}

struct LossVars {
    total: Var,
    recon: Var,
    kl: Var,
    outcome: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    schema: FeatureSchema,
    config: ModelConfig,
    schedule: Option<TrainSchedule>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointVae {
    pub schema: FeatureSchema,
    pub config: ModelConfig,
    /// Schedule the weights were trained with, if any.
    pub schedule: Option<TrainSchedule>,
    layout: Layout,
    params: Vec<Tensor>,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.total() == other.total()
    }
}

fn focus_len(config: &ModelConfig, schema: &FeatureSchema) -> usize {
    if config.focus_radius == 0 || schema.env != crate::envs::EnvKind::Gridworld {
        return 0;
    }
    crate::agent::egocentric_len(config.focus_radius)
}

/// `[batch, len]`: the player-centred relational view of each (argmax
/// decoded) row.
fn focus_view(x: &Tensor, schema: &FeatureSchema, radius: usize) -> Result<Tensor> {
    let b = x.shape()[0];
    let n = schema.len();
    let mut out = Vec::with_capacity(b * crate::agent::egocentric_len(radius));
    for row in x.data().chunks(n) {
        let obs = crate::dataset::decode_observation(&FeatureTensor(row.to_vec()), schema)?;
        out.extend(crate::agent::egocentric_view(&obs, schema, radius)?);
    }
    Ok(Tensor::new(vec![b, crate::agent::egocentric_len(radius)], out)?)
}

/// `mu + exp(logvar / 2) * noise` with standard-normal noise from `seed`.
pub fn sample_latent(mu: &LatentPoint, logvar: &LatentPoint, seed: u64) -> LatentPoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(mu, logvar, &mut rng)
}

fn sample_with(mu: &LatentPoint, logvar: &LatentPoint, rng: &mut ChaCha8Rng) -> LatentPoint {
    LatentPoint(
        mu.0.iter()
            .zip(&logvar.0)
            .map(|(&m, &l)| {
                let e: f64 = StandardNormal.sample(rng);
                m + (l / 2.0).exp() * e
            })
            .collect(),
    )
}

impl JointVae {
    pub fn new(schema: FeatureSchema, config: ModelConfig, seed: u64) -> Result<Self> {
        if config.latent_dim == 0 || config.head_hidden == 0 {
            return Err(Error::Config("latent dimension and head width must be positive".into()));
        }
        let layout = Layout::new(&config, &schema);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, h, w] = schema.shape();
        let d = config.latent_dim;
        let mut params = Vec::with_capacity(layout.total());
        let enc_in = if layout.conv.is_some() {
            params.extend(nn::init_conv(&mut rng, c, config.conv_channels, 3));
            config.conv_channels * h * w
        } else {
            c * h * w
        };
        let enc_in = enc_in + focus_len(&config, &schema);
        let mut sizes = vec![enc_in];
        sizes.extend(&config.encoder_hidden);
        sizes.push(2 * d);
        params.extend(nn::init_mlp(&mut rng, &sizes));
        let mut sizes = vec![d];
        sizes.extend(&config.decoder_hidden);
        sizes.push(c * h * w);
        params.extend(nn::init_mlp(&mut rng, &sizes));
        for _ in 0..3 {
            params.extend(nn::init_mlp(&mut rng, &[d, config.head_hidden, 1]));
        }
        nn::round_to_f32(&mut params);
        Ok(Self {
            schema,
            config,
            schedule: None,
            layout,
            params,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn mode(&self) -> TrainMode {
        self.config.mode
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Direct parameter access, for finite-difference checks.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn encoder_params(&self) -> Range<usize> {
        let start = self.layout.conv.clone().map_or(self.layout.encoder.start, |r| r.start);
        start..self.layout.encoder.end
    }

    fn check_latent(&self, z: &LatentPoint) -> Result<()> {
        if z.dim() != self.latent_dim() {
            return Err(Error::Schema(format!(
                "latent has dimension {}, model expects {}",
                z.dim(),
                self.latent_dim()
            )));
        }
        Ok(())
    }

    fn vars(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// `x: [batch, c, h, w]` to `(mu, logvar)`, each `[batch, d]`.
    fn encode_on(&self, tape: &Tape, p: &[Var], x: Var) -> Result<(Var, Var)> {
        let b = tape.shape(x)[0];
        let [c, h, w] = self.schema.shape();
        let flat = match &self.layout.conv {
            Some(r) => {
                let y = tape.conv2d(x, p[r.start], p[r.start + 1], 1, 1)?;
                let y = tape.relu(y)?;
                tape.reshape(y, &[b, self.config.conv_channels * h * w])?
            }
            None => tape.reshape(x, &[b, c * h * w])?,
        };
        let flat = match focus_len(&self.config, &self.schema) {
            0 => flat,
            _ => {
                let view = focus_view(&tape.value(x), &self.schema, self.config.focus_radius)?;
                tape.concat(&[flat, tape.constant(view)], 1)?
            }
        };
        let out = nn::mlp_forward(tape, &p[self.layout.encoder.clone()], flat, Activation::Relu)?;
        let d = self.latent_dim();
        Ok((tape.narrow(out, 1, 0, d)?, tape.narrow(out, 1, d, d)?))
    }

    /// `z: [batch, d]` to raw decoder output `[batch, c, h, w]`.
    fn decode_raw_on(&self, tape: &Tape, p: &[Var], z: Var) -> Result<Var> {
        let b = tape.shape(z)[0];
        let out = nn::mlp_forward(tape, &p[self.layout.decoder.clone()], z, Activation::Relu)?;
        let [c, h, w] = self.schema.shape();
        Ok(tape.reshape(out, &[b, c, h, w])?)
    }

    /// Probabilities for categorical channels, tanh for numeric ones.
    fn soft_on(&self, tape: &Tape, raw: Var) -> Result<Var> {
        let mut parts = Vec::new();
        for (li, layer) in self.schema.categorical.iter().enumerate() {
            let logits = tape.narrow(raw, 1, self.schema.layer_offset(li), layer.vocabulary.len())?;
            parts.push(tape.softmax(logits, 1)?);
        }
        if !self.schema.numeric.is_empty() {
            let n = tape.narrow(raw, 1, self.schema.numeric_offset(), self.schema.numeric.len())?;
            parts.push(tape.tanh(n)?);
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        Ok(tape.concat(&parts, 1)?)
    }

    /// `z: [batch, d]` to `[batch, 1]` for outcome `i`.
    fn head_on(&self, tape: &Tape, p: &[Var], z: Var, i: usize) -> Result<Var> {
        let y = nn::mlp_forward(tape, &p[self.layout.heads[i].clone()], z, Activation::Relu)?;
        Ok(tape.tanh(y)?)
    }

    fn latent_var(&self, tape: &Tape, z: &LatentPoint, trainable: bool) -> Result<Var> {
        self.check_latent(z)?;
        let t = Tensor::new(vec![1, z.dim()], z.0.clone())?;
        Ok(if trainable { tape.param(t) } else { tape.constant(t) })
    }

    /// Posterior mean and log-variance of `x`.
    pub fn encode(&self, x: &FeatureTensor) -> Result<(LatentPoint, LatentPoint)> {
        Ok(self.encode_batch(&[x])?.pop().expect("one row"))
    }

    pub fn encode_batch(&self, xs: &[&FeatureTensor]) -> Result<Vec<(LatentPoint, LatentPoint)>> {
        for x in xs {
            self.schema.check(x)?;
        }
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let p = self.vars(&tape, false);
        let x = tape.constant(FeatureTensor::batch(xs, &self.schema));
        let (mu, logvar) = self.encode_on(&tape, &p, x)?;
        let (mu, logvar) = (tape.value(mu), tape.value(logvar));
        let d = self.latent_dim();
        Ok((0..xs.len())
            .map(|r| {
                (
                    LatentPoint(mu.data()[r * d..(r + 1) * d].to_vec()),
                    LatentPoint(logvar.data()[r * d..(r + 1) * d].to_vec()),
                )
            })
            .collect())
    }

    /// Encodes to the posterior mean.
    pub fn encode_mean(&self, x: &FeatureTensor) -> Result<LatentPoint> {
        Ok(self.encode(x)?.0)
    }

    /// Decoder output with categorical channels as per-cell probabilities
    /// and numeric channels squashed to `[-1, 1]`.
    pub fn decode(&self, z: &LatentPoint) -> Result<FeatureTensor> {
        let tape = Tape::new();
        let p = self.vars(&tape, false);
        let zv = self.latent_var(&tape, z, false)?;
        let raw = self.decode_raw_on(&tape, &p, zv)?;
        let soft = self.soft_on(&tape, raw)?;
        Ok(FeatureTensor(tape.value(soft).data().to_vec()))
    }

    /// Decodes and snaps onto the nearest valid observation encoding.
    pub fn decode_projected(&self, z: &LatentPoint) -> Result<FeatureTensor> {
        crate::dataset::project(&self.decode(z)?, &self.schema)
    }

    pub fn predict_outcomes(&self, z: &LatentPoint) -> Result<OutcomeVector> {
        let tape = Tape::new();
        let p = self.vars(&tape, false);
        let zv = self.latent_var(&tape, z, false)?;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = tape.value(self.head_on(&tape, &p, zv, i)?).data()[0];
        }
        Ok(OutcomeVector::from_array(out))
    }

    /// Head output for `var` and its gradient with respect to `z`.
    pub fn head_gradient(&self, z: &LatentPoint, var: OutcomeVariable) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let p = self.vars(&tape, false);
        let zv = self.latent_var(&tape, z, true)?;
        let y = self.head_on(&tape, &p, zv, var.index())?;
        let y = tape.sum(y)?;
        let g = tape.backward(y)?;
        let grad = g.wrt(zv).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; z.dim()]);
        Ok((tape.value(y).item(), grad))
    }

    /// `||soft(dec z) - target||` and its gradient with respect to `z`,
    /// with `target` held constant.
    pub fn roundtrip_gradient(&self, z: &LatentPoint, target: &FeatureTensor) -> Result<(f64, Vec<f64>)> {
        self.schema.check(target)?;
        let tape = Tape::new();
        let p = self.vars(&tape, false);
        let zv = self.latent_var(&tape, z, true)?;
        let raw = self.decode_raw_on(&tape, &p, zv)?;
        let soft = self.soft_on(&tape, raw)?;
        let t = tape.constant(FeatureTensor::batch(&[target], &self.schema));
        let diff = tape.sub(soft, t)?;
        let dist = tape.norm(diff)?;
        let g = tape.backward(dist)?;
        let grad = g.wrt(zv).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; z.dim()]);
        Ok((tape.value(dist).item(), grad))
    }

    fn loss_on(
        &self,
        tape: &Tape,
        p: &[Var],
        xs: &[&FeatureTensor],
        ys: &[OutcomeVector],
        beta: f64,
        outcome_weight: f64,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<LossVars> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Contract(format!(
                "loss needs a nonempty batch with one outcome per input ({} inputs, {} outcomes)",
                xs.len(),
                ys.len()
            )));
        }
        for x in xs {
            self.schema.check(x)?;
        }
        let b = xs.len();
        let d = self.latent_dim();
        let x = tape.constant(FeatureTensor::batch(xs, &self.schema));
        let (mu, logvar) = self.encode_on(tape, p, x)?;
        let z = match noise {
            Some(rng) => {
                let eps: Vec<f64> = (0..b * d).map(|_| StandardNormal.sample(rng)).collect();
                let eps = tape.constant(Tensor::new(vec![b, d], eps)?);
                let std = tape.exp(tape.scale(logvar, 0.5)?)?;
                tape.add(mu, tape.mul(std, eps)?)?
            }
            None => mu,
        };
        let raw = self.decode_raw_on(tape, p, z)?;
        let recon = self.recon_on(tape, raw, xs, x)?;
        let kl = tape.gaussian_kl(mu, logvar, Reduction::BatchMean)?;

        // Reconstruction-only models read the heads from a detached copy of
        // the latent so their loss can never reach the autoencoder.
        let head_in = match self.mode() {
            TrainMode::Joint => z,
            TrainMode::ReconOnly => tape.constant((*tape.value(mu)).clone()),
        };
        let mut outcome = None;
        for i in 0..3 {
            let pred = self.head_on(tape, p, head_in, i)?;
            let target: Vec<f64> = ys.iter().map(|y| y.to_array()[i]).collect();
            let target = tape.constant(Tensor::new(vec![b, 1], target)?);
            let term = tape.mse(pred, target, Reduction::Mean)?;
            outcome = Some(match outcome {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let outcome = outcome.expect("three heads");
        let mut total = tape.add(recon, tape.scale(kl, beta)?)?;
        if self.mode() == TrainMode::Joint {
            total = tape.add(total, tape.scale(outcome, outcome_weight)?)?;
        }
        Ok(LossVars {
            total,
            recon,
            kl,
            outcome,
        })
    }

    /// Cross-entropy over categorical layers plus squared error on numeric
    /// channels, summed per sample and averaged over the batch.
    fn recon_on(&self, tape: &Tape, raw: Var, xs: &[&FeatureTensor], x: Var) -> Result<Var> {
        let cells = self.schema.cells();
        let mut terms = Vec::new();
        for (li, layer) in self.schema.categorical.iter().enumerate() {
            let logits = tape.narrow(raw, 1, self.schema.layer_offset(li), layer.vocabulary.len())?;
            let mut targets = Vec::with_capacity(xs.len() * cells);
            for t in xs {
                targets.extend(self.schema.argmax_layer(&t.0, li));
            }
            terms.push(tape.cross_entropy(logits, &targets, Reduction::BatchMean)?);
        }
        if !self.schema.numeric.is_empty() {
            let off = self.schema.numeric_offset();
            let n = self.schema.numeric.len();
            let pred = tape.tanh(tape.narrow(raw, 1, off, n)?)?;
            let target = tape.narrow(x, 1, off, n)?;
            terms.push(tape.mse(pred, target, Reduction::BatchMean)?);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Loss terms on a batch, using the posterior mean as the latent.
    pub fn loss(&self, xs: &[&FeatureTensor], ys: &[OutcomeVector], beta: f64, outcome_weight: f64) -> Result<LossTerms> {
        let tape = Tape::new();
        let p = self.vars(&tape, false);
        let l = self.loss_on(&tape, &p, xs, ys, beta, outcome_weight, None)?;
        Ok(LossTerms {
            total: tape.value(l.total).item(),
            recon: tape.value(l.recon).item(),
            kl: tape.value(l.kl).item(),
            outcome: tape.value(l.outcome).item(),
        })
    }

    /// Gradients of the total loss (posterior mean latent) with respect to
    /// every parameter tensor, in parameter order. `None` marks tensors the
    /// loss does not depend on.
    pub fn loss_gradients(
        &self,
        xs: &[&FeatureTensor],
        ys: &[OutcomeVector],
        beta: f64,
        outcome_weight: f64,
    ) -> Result<(LossTerms, Vec<Option<Tensor>>)> {
        self.grads_with(xs, ys, beta, outcome_weight, None, |l| l.total)
    }

    /// Gradients of the outcome term alone.
    pub fn outcome_gradients(&self, xs: &[&FeatureTensor], ys: &[OutcomeVector]) -> Result<Vec<Option<Tensor>>> {
        Ok(self.grads_with(xs, ys, 0.0, 1.0, None, |l| l.outcome)?.1)
    }

    fn grads_with(
        &self,
        xs: &[&FeatureTensor],
        ys: &[OutcomeVector],
        beta: f64,
        outcome_weight: f64,
        noise: Option<&mut ChaCha8Rng>,
        seed: impl Fn(&LossVars) -> Var,
    ) -> Result<(LossTerms, Vec<Option<Tensor>>)> {
        let tape = Tape::new();
        let p = self.vars(&tape, true);
        let l = self.loss_on(&tape, &p, xs, ys, beta, outcome_weight, noise)?;
        let g = tape.backward(seed(&l))?;
        let terms = LossTerms {
            total: tape.value(l.total).item(),
            recon: tape.value(l.recon).item(),
            kl: tape.value(l.kl).item(),
            outcome: tape.value(l.outcome).item(),
        };
        Ok((terms, p.iter().map(|&v| g.wrt(v).cloned()).collect()))
    }

    /// Reconstruction plus `beta` times KL for one input, at the posterior
    /// mean.
    pub fn elbo_loss(&self, x: &FeatureTensor, beta: f64) -> Result<f64> {
        let tape = Tape::new();
        let p = self.vars(&tape, false);
        let xv = tape.constant(FeatureTensor::batch(&[x], &self.schema));
        self.schema.check(x)?;
        let (mu, logvar) = self.encode_on(&tape, &p, xv)?;
        let raw = self.decode_raw_on(&tape, &p, mu)?;
        let recon = self.recon_on(&tape, raw, &[x], xv)?;
        let kl = tape.gaussian_kl(mu, logvar, Reduction::BatchMean)?;
        Ok(tape.value(recon).item() + beta * tape.value(kl).item())
    }

    /// Mean squared error per outcome variable on the given frames, using
    /// the posterior mean.
    pub fn outcome_mse(&self, data: &TrajectoryDataset, indices: &[usize]) -> Result<[f64; 3]> {
        let mut sums = [0.0; 3];
        for chunk in indices.chunks(256) {
            let xs: Vec<&FeatureTensor> = chunk.iter().map(|&i| &data.frames[i].features).collect();
            for ((mu, _), &i) in self.encode_batch(&xs)?.iter().zip(chunk) {
                let pred = self.predict_outcomes(mu)?.to_array();
                let truth = data.frames[i].outcome.to_array();
                for k in 0..3 {
                    sums[k] += (pred[k] - truth[k]).powi(2);
                }
            }
        }
        let n = indices.len().max(1) as f64;
        Ok(sums.map(|s| s / n))
    }

    /// Fraction of categorical cells recovered by `decode(encode(x).mu)`.
    pub fn categorical_accuracy(&self, data: &TrajectoryDataset, indices: &[usize]) -> Result<f64> {
        if self.schema.categorical.is_empty() {
            return Ok(1.0);
        }
        let (mut hit, mut total) = (0usize, 0usize);
        for chunk in indices.chunks(256) {
            let xs: Vec<&FeatureTensor> = chunk.iter().map(|&i| &data.frames[i].features).collect();
            for ((mu, _), x) in self.encode_batch(&xs)?.iter().zip(&xs) {
                let rec = self.decode(mu)?;
                for li in 0..self.schema.categorical.len() {
                    let a = self.schema.argmax_layer(&x.0, li);
                    let b = self.schema.argmax_layer(&rec.0, li);
                    hit += a.iter().zip(&b).filter(|(p, q)| p == q).count();
                    total += a.len();
                }
            }
        }
        Ok(hit as f64 / total.max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta {
            schema: self.schema.clone(),
            config: self.config.clone(),
            schedule: self.schedule.clone(),
        };
        nn::write_checkpoint(path, "jvae", &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params): (ModelMeta, Vec<Tensor>) = nn::read_checkpoint(path, "jvae")?;
        let mut model = Self::new(meta.schema, meta.config, 0).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let shapes_match = params.len() == model.params.len()
            && params.iter().zip(&model.params).all(|(a, b)| a.shape() == b.shape());
        if !shapes_match {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: "parameter shapes do not match the declared architecture".into(),
            });
        }
        model.params = params;
        model.schedule = meta.schedule;
        Ok(model)
    }

    /// Hex SHA-256 over the parameter blob, for cheap identity checks.
    pub fn weight_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.params {
            for &v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Digest of the encoder and decoder parameters only.
    pub fn autoencoder_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let ae = self.encoder_params().start..self.layout.decoder.end;
        for p in &self.params[ae] {
            for &v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// One row of the per-epoch loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub beta: f64,
    pub train_total: f64,
    pub train_recon: f64,
    pub train_kl: f64,
    pub train_outcome: f64,
    pub test_recon: f64,
    pub test_outcome: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: JointVae,
    pub curves: Vec<EpochLosses>,
}

pub fn write_loss_curves(path: &Path, curves: &[EpochLosses]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path)(io),
        other => Error::Contract(format!("{other:?}")),
    })?;
    for row in curves {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

fn mean_terms(model: &JointVae, data: &TrajectoryDataset, indices: &[usize], beta: f64, w: f64) -> Result<LossTerms> {
    let mut acc = LossTerms {
        total: 0.0,
        recon: 0.0,
        kl: 0.0,
        outcome: 0.0,
    };
    for chunk in indices.chunks(256) {
        let xs: Vec<&FeatureTensor> = chunk.iter().map(|&i| &data.frames[i].features).collect();
        let ys: Vec<OutcomeVector> = chunk.iter().map(|&i| data.frames[i].outcome).collect();
        let t = model.loss(&xs, &ys, beta, w)?;
        let k = chunk.len() as f64;
        acc.total += t.total * k;
        acc.recon += t.recon * k;
        acc.kl += t.kl * k;
        acc.outcome += t.outcome * k;
    }
    let n = indices.len().max(1) as f64;
    Ok(LossTerms {
        total: acc.total / n,
        recon: acc.recon / n,
        kl: acc.kl / n,
        outcome: acc.outcome / n,
    })
}

/// Splits a batch into fixed chunks whose gradients are computed in
/// parallel and summed in chunk order, so results do not depend on the
/// thread count.
const GRAD_CHUNK: usize = 16;

fn batch_gradients(
    model: &JointVae,
    xs: &[&FeatureTensor],
    ys: &[OutcomeVector],
    beta: f64,
    w: f64,
    seeds: &[u64],
) -> Result<(LossTerms, Vec<Option<Tensor>>)> {
    use rayon::prelude::*;
    let b = xs.len();
    let parts: Vec<Result<(LossTerms, Vec<Option<Tensor>>, usize)>> = xs
        .par_chunks(GRAD_CHUNK)
        .zip(ys.par_chunks(GRAD_CHUNK))
        .zip(seeds.par_iter())
        .map(|((cx, cy), &s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (t, g) = model.grads_with(cx, cy, beta, w, Some(&mut rng), |l| l.total)?;
            Ok((t, g, cx.len()))
        })
        .collect();
    let mut terms = LossTerms {
        total: 0.0,
        recon: 0.0,
        kl: 0.0,
        outcome: 0.0,
    };
    let mut grads: Vec<Option<Tensor>> = vec![None; model.params.len()];
    for part in parts {
        let (t, g, n) = part?;
        let k = n as f64 / b as f64;
        terms.total += t.total * k;
        terms.recon += t.recon * k;
        terms.kl += t.kl * k;
        terms.outcome += t.outcome * k;
        for (acc, gi) in grads.iter_mut().zip(g) {
            let Some(gi) = gi else { continue };
            match acc {
                None => *acc = Some(gi.map(|v| v * k)),
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                        *x += y * k;
                    }
                }
            }
        }
    }
    Ok((terms, grads))
}

/// Trains on the dataset's training split. Each epoch visits the training
/// frames in a seeded shuffle; beta follows the schedule per step.
pub fn train(mut model: JointVae, data: &TrajectoryDataset, schedule: &TrainSchedule, seed: u64) -> Result<TrainOutcome> {
    if model.schema != data.schema {
        return Err(Error::Schema("model and dataset schemas differ".into()));
    }
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order = data.train_indices();
    let test = data.test_indices();
    if order.is_empty() {
        return Err(Error::Split("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: schedule.learning_rate,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let steps_per_epoch = order.len().div_ceil(schedule.batch_size);
    let total_steps = steps_per_epoch * schedule.epochs;
    let mut step = 0;
    let mut curves = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let last_good = model.clone();
        order.shuffle(&mut rng);
        let mut sums = LossTerms {
            total: 0.0,
            recon: 0.0,
            kl: 0.0,
            outcome: 0.0,
        };
        let mut beta = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            beta = schedule.beta_at(step, total_steps);
            let xs: Vec<&FeatureTensor> = batch.iter().map(|&i| &data.frames[i].features).collect();
            let ys: Vec<OutcomeVector> = batch.iter().map(|&i| data.frames[i].outcome).collect();
            let seeds: Vec<u64> = (0..batch.len().div_ceil(GRAD_CHUNK)).map(|_| rand::Rng::random(&mut rng)).collect();
            let (t, g) = batch_gradients(&model, &xs, &ys, beta, schedule.outcome_weight, &seeds)?;
            let finite = t.total.is_finite() && g.iter().flatten().all(Tensor::is_finite);
            if !finite {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("non-finite loss or gradient at step {step}"),
                    last_good: Box::new(last_good),
                });
            }
            let refs: Vec<Option<&Tensor>> = g.iter().map(Option::as_ref).collect();
            adam.step(&mut model.params, &refs);
            let k = batch.len() as f64;
            sums.total += t.total * k;
            sums.recon += t.recon * k;
            sums.kl += t.kl * k;
            sums.outcome += t.outcome * k;
            step += 1;
        }
        let n = order.len() as f64;
        let test_terms = if test.is_empty() {
            None
        } else {
            Some(mean_terms(&model, data, &test, beta, schedule.outcome_weight)?)
        };
        let row = EpochLosses {
            epoch,
            beta,
            train_total: sums.total / n,
            train_recon: sums.recon / n,
            train_kl: sums.kl / n,
            train_outcome: sums.outcome / n,
            test_recon: test_terms.map_or(f64::NAN, |t| t.recon),
            test_outcome: test_terms.map_or(f64::NAN, |t| t.outcome),
        };
        tracing::debug!(?row, "epoch finished");
        curves.push(row);
    }
    nn::round_to_f32(&mut model.params);
    model.schedule = Some(schedule.clone());
    Ok(TrainOutcome { model, curves })
}

/// Fits the outcome heads on frozen posterior means; the autoencoder is
/// untouched. Used for reconstruction-only models.
pub fn fit_heads(model: &mut JointVae, data: &TrajectoryDataset, schedule: &TrainSchedule, seed: u64) -> Result<Vec<f64>> {
    let train = data.train_indices();
    if train.is_empty() {
        return Err(Error::Split("training split is empty".into()));
    }
    let mut mus = Vec::with_capacity(train.len());
    for chunk in train.chunks(256) {
        let xs: Vec<&FeatureTensor> = chunk.iter().map(|&i| &data.frames[i].features).collect();
        mus.extend(model.encode_batch(&xs)?.into_iter().map(|(mu, _)| mu));
    }
    let heads: Vec<usize> = model.layout.heads.iter().flat_map(|r| r.clone()).collect();
    let mut head_params: Vec<Tensor> = heads.iter().map(|&i| model.params[i].clone()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: schedule.learning_rate,
            ..AdamConfig::default()
        },
        &head_params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let d = model.latent_dim();
    let mut curve = Vec::with_capacity(schedule.epochs);
    for _ in 0..schedule.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(schedule.batch_size.max(1)) {
            let tape = Tape::new();
            let p: Vec<Var> = head_params.iter().map(|t| tape.param(t.clone())).collect();
            let z: Vec<f64> = batch.iter().flat_map(|&k| mus[k].0.iter().copied()).collect();
            let z = tape.constant(Tensor::new(vec![batch.len(), d], z)?);
            let mut loss = None;
            for h in 0..3 {
                let y = nn::mlp_forward(&tape, &p[4 * h..4 * h + 4], z, Activation::Relu)?;
                let y = tape.tanh(y)?;
                let target: Vec<f64> = batch.iter().map(|&k| data.frames[train[k]].outcome.to_array()[h]).collect();
                let target = tape.constant(Tensor::new(vec![batch.len(), 1], target)?);
                let term = tape.mse(y, target, Reduction::Mean)?;
                loss = Some(match loss {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let loss = loss.expect("three heads");
            let g = tape.backward(loss)?;
            let refs: Vec<Option<&Tensor>> = p.iter().map(|&v| g.wrt(v)).collect();
            adam.step(&mut head_params, &refs);
            sum += tape.value(loss).item() * batch.len() as f64;
        }
        curve.push(sum / train.len() as f64);
    }
    nn::round_to_f32(&mut head_params);
    for (&i, t) in heads.iter().zip(head_params) {
        model.params[i] = t;
    }
    Ok(curve)
}

/// Trains a model and, in reconstruction-only mode, fits its heads
/// afterwards with the same epoch budget.
pub fn train_full(model: JointVae, data: &TrajectoryDataset, schedule: &TrainSchedule, seed: u64) -> Result<TrainOutcome> {
    let mut out = train(model, data, schedule, seed)?;
    if out.model.mode() == TrainMode::ReconOnly {
        fit_heads(&mut out.model, data, schedule, seed ^ 0x4ead)?;
    }
    Ok(out)
}
