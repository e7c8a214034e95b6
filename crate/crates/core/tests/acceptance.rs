//! Acceptance suite. Runs the full gridworld pipeline once and checks every
//! acceptance criterion against it, printing one PASS/FAIL line each. Exits
//! nonzero if any criterion fails.

use std::time::{Duration, Instant};

use latentcf_autodiff::{grad_check, Activation, Reduction, Tape, Tensor};
use latentcf_core::agent::{OutcomeVariable, OutcomeVector};
use latentcf_core::counterfactual::{find_nun, CFQuery, CaseLibrary};
use latentcf_core::dataset::{FeatureSchema, FeatureTensor, TrajectoryDataset};
use latentcf_core::envs::{EnvConfig, EnvKind};
use latentcf_core::experiments::{roundtrip_elbo_study, QueryRecord, RecordStatus};
use latentcf_core::jvae::{JointVae, ModelConfig, TrainMode};
use latentcf_core::measures::{odiff, validity, Decoded, Sign, ValiditySpec};
use latentcf_core::pipeline::{self, Evaluation, PipelineConfig};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIN: Duration = Duration::from_secs(60);

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn verdict(name: &'static str, started: Instant, checks: &[(bool, String)]) -> Verdict {
    Verdict {
        name,
        pass: checks.iter().all(|c| c.0),
        detail: checks
            .iter()
            .map(|(ok, d)| if *ok { d.clone() } else { format!("FAILED {d}") })
            .collect::<Vec<_>>()
            .join("; "),
        elapsed: started.elapsed(),
    }
}

fn within(what: &str, elapsed: Duration, budget: Duration) -> (bool, String) {
    (
        elapsed < budget,
        format!("{what} {:.1}s (budget {}s)", elapsed.as_secs_f64(), budget.as_secs()),
    )
}

struct Fixture {
    cfg: PipelineConfig,
    data: TrajectoryDataset,
    joint: JointVae,
    recon: JointVae,
    joint_train: Duration,
    recon_train: Duration,
    eval: Evaluation,
    eval_time: Duration,
}

fn fixture() -> Fixture {
    let mut cfg = PipelineConfig::default();
    cfg.elbo.n_real = 200;
    cfg.elbo.n_random = 200;
    let generated = pipeline::generate_data(&cfg).expect("data generation");
    let data = generated.data;
    let t = Instant::now();
    let joint = pipeline::train_model(&cfg, &data, TrainMode::Joint).expect("joint training").model;
    let joint_train = t.elapsed();
    let t = Instant::now();
    let recon = pipeline::train_model(&cfg, &data, TrainMode::ReconOnly).expect("twin training").model;
    let recon_train = t.elapsed();
    let t = Instant::now();
    let eval = pipeline::evaluate(&cfg, &joint, Some(&recon), &data).expect("evaluation");
    let eval_time = t.elapsed();
    Fixture {
        cfg,
        data,
        joint,
        recon,
        joint_train,
        recon_train,
        eval,
        eval_time,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Worst relative error over every primitive on one random instance.
fn primitive_errors(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let x = random_tensor(rng, &[3, 4], -2.0, 2.0);
    let w = random_tensor(rng, &[4, 5], -2.0, 2.0);
    let b = random_tensor(rng, &[5], -2.0, 2.0);
    let o = random_tensor(rng, &[3, 4], -2.0, 2.0);
    let img = random_tensor(rng, &[2, 2, 5, 5], -2.0, 2.0);
    let k = random_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0);
    let kb = random_tensor(rng, &[3], -1.0, 1.0);
    let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let err = |r: latentcf_autodiff::Result<latentcf_autodiff::GradCheckReport>| r.map(|r| r.max_rel_error).unwrap_or(f64::INFINITY);
    let sq = |t: &Tape, y| -> latentcf_autodiff::Result<_> {
        let y = t.mul(y, y)?;
        t.sum(y)
    };
    let mut out = vec![
        ("linear/x", err(grad_check(|t, v| sq(t, t.linear(v, t.constant(w.clone()), t.constant(b.clone()))?), &x, 1e-4))),
        ("linear/w", err(grad_check(|t, v| sq(t, t.linear(t.constant(x.clone()), v, t.constant(b.clone()))?), &w, 1e-4))),
        ("linear/b", err(grad_check(|t, v| sq(t, t.linear(t.constant(x.clone()), t.constant(w.clone()), v)?), &b, 1e-4))),
        ("conv2d/x", err(grad_check(|t, v| sq(t, t.conv2d(v, t.constant(k.clone()), t.constant(kb.clone()), 2, 1)?), &img, 1e-4))),
        ("conv2d/k", err(grad_check(|t, v| sq(t, t.conv2d(t.constant(img.clone()), v, t.constant(kb.clone()), 1, 1)?), &k, 1e-4))),
        ("conv2d/b", err(grad_check(|t, v| sq(t, t.conv2d(t.constant(img.clone()), t.constant(k.clone()), v, 1, 0)?), &kb, 1e-4))),
        ("add", err(grad_check(|t, v| sq(t, t.add(v, t.constant(o.clone()))?), &x, 1e-4))),
        ("sub", err(grad_check(|t, v| sq(t, t.sub(t.constant(o.clone()), v)?), &x, 1e-4))),
        ("mul", err(grad_check(|t, v| t.sum(t.mul(v, t.constant(o.clone()))?), &x, 1e-4))),
        ("scale/exp", err(grad_check(|t, v| t.sum(t.exp(t.scale(v, 0.5)?)?), &x, 1e-4))),
        ("norm", err(grad_check(|t, v| t.norm(v), &x, 1e-4))),
        (
            "reshape/narrow/concat",
            err(grad_check(
                |t, v| {
                    let a = t.narrow(v, 1, 1, 2)?;
                    let c = t.reshape(t.narrow(v, 1, 0, 2)?, &[6])?;
                    let c = t.reshape(c, &[3, 2])?;
                    sq(t, t.concat(&[a, c, a], 1)?)
                },
                &x,
                1e-4,
            )),
        ),
        ("cross_entropy", err(grad_check(|t, v| t.cross_entropy(v, &targets, Reduction::BatchMean), &x, 1e-4))),
        ("mse", err(grad_check(|t, v| t.mse(t.constant(o.clone()), v, Reduction::Mean), &x, 1e-4))),
        ("gaussian_kl/mu", err(grad_check(|t, v| t.gaussian_kl(v, t.constant(o.clone()), Reduction::Sum), &x, 1e-4))),
        ("gaussian_kl/logvar", err(grad_check(|t, v| t.gaussian_kl(t.constant(o.clone()), v, Reduction::BatchMean), &x, 1e-4))),
    ];
    for kind in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
        out.push(("activation", err(grad_check(|t, v| t.sum(t.mul(t.activation(v, kind)?, t.constant(o.clone()))?), &x, 1e-4))));
    }
    for axis in [0, 1] {
        out.push(("softmax", err(grad_check(|t, v| t.sum(t.mul(t.softmax(v, axis)?, t.constant(o.clone()))?), &x, 1e-4))));
    }
    out
}

/// Central differences of the full joint loss against its tape gradient,
/// on a few random coordinates of every parameter tensor.
fn joint_loss_error(model: &mut JointVae, xs: &[FeatureTensor], ys: &[OutcomeVector], rng: &mut ChaCha8Rng) -> f64 {
    let refs: Vec<&FeatureTensor> = xs.iter().collect();
    let (beta, weight) = (0.5, 10.0);
    let (_, grads) = model.loss_gradients(&refs, ys, beta, weight).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (ti, g) in grads.iter().enumerate() {
        let n = model.params()[ti].numel();
        for _ in 0..4 {
            let i = rng.random_range(0..n);
            let orig = model.params()[ti].data()[i];
            model.params_mut()[ti].data_mut()[i] = orig + h;
            let up = model.loss(&refs, ys, beta, weight).unwrap().total;
            model.params_mut()[ti].data_mut()[i] = orig - h;
            let down = model.loss(&refs, ys, beta, weight).unwrap().total;
            model.params_mut()[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.as_ref().map_or(0.0, |g| g.data()[i]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

fn random_outcome(rng: &mut ChaCha8Rng) -> OutcomeVector {
    OutcomeVector {
        value: rng.random_range(-1.0..1.0),
        confidence: rng.random_range(-1.0..1.0),
        riskiness: rng.random_range(-1.0..1.0),
    }
}

fn autodiff_soundness(data: &TrajectoryDataset) -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let env = EnvConfig::default();
    let cart = FeatureSchema::for_env(EnvKind::Cartpole, &env);
    let mut worst_prim = (0.0, "");
    let mut worst_joint: f64 = 0.0;
    for inst in 0..100 {
        for (name, e) in primitive_errors(&mut rng) {
            if !(e <= worst_prim.0) {
                worst_prim = (e, name);
            }
        }
        let (schema, xs) = if inst % 2 == 0 {
            let xs = (0..2)
                .map(|_| data.frames[rng.random_range(0..data.frames.len())].features.clone())
                .collect::<Vec<_>>();
            (data.schema.clone(), xs)
        } else {
            let xs = (0..3)
                .map(|_| FeatureTensor((0..cart.len()).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            (cart.clone(), xs)
        };
        let config = ModelConfig {
            latent_dim: 3,
            conv_channels: if schema.is_spatial() { 2 } else { 0 },
            focus_radius: if schema.is_spatial() { 1 } else { 0 },
            encoder_hidden: vec![6],
            decoder_hidden: vec![6],
            head_hidden: 4,
            mode: TrainMode::Joint,
        };
        let mut model = JointVae::new(schema, config, 1000 + inst).unwrap();
        // Fresh models have zero biases, which on sparse one-hot frames puts
        // relu inputs exactly on the kink. Random parameters avoid that.
        for t in model.params_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let ys: Vec<OutcomeVector> = xs.iter().map(|_| random_outcome(&mut rng)).collect();
        worst_joint = worst_joint.max(joint_loss_error(&mut model, &xs, &ys, &mut rng));
    }
    let elapsed = started.elapsed();
    verdict(
        "autodiff soundness",
        started,
        &[
            (worst_prim.0 < 1e-3, format!("worst primitive rel. error {:.2e} ({})", worst_prim.0, worst_prim.1)),
            (worst_joint < 1e-3, format!("worst joint-loss rel. error {worst_joint:.2e}")),
            within("100 instances in", elapsed, MIN),
        ],
    )
}

fn joint_training(fx: &Fixture) -> Verdict {
    let started = Instant::now();
    let mse = fx.joint.outcome_mse(&fx.data, &fx.data.test_indices()).unwrap();
    let mut checks: Vec<(bool, String)> = OutcomeVariable::ALL
        .iter()
        .map(|v| (mse[v.index()] < 0.1, format!("{v} test MSE {:.4}", mse[v.index()])))
        .collect();
    checks.push(within("training", fx.joint_train, 15 * MIN));
    verdict("joint training", started, &checks)
}

fn elbo_property(fx: &Fixture) -> Verdict {
    let started = Instant::now();
    let study = roundtrip_elbo_study(&fx.joint, &fx.data, 200, 200, 5, 0xe1b0).unwrap();
    let elapsed = started.elapsed();
    let m = &study.random.mean;
    let curve = m.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" > ");
    verdict(
        "roundtrip ELBO property",
        started,
        &[
            (m[1] < m[0], format!("random-latent mean loss by step: {curve}")),
            (
                study.random.largest_drop_step() == Some(1),
                format!("largest drop at step {:?}", study.random.largest_drop_step()),
            ),
            within("200 latents in", elapsed, 2 * MIN),
        ],
    )
}

fn brute_validity(y_c: &OutcomeVector, y_q: &OutcomeVector, var: OutcomeVariable, sign: Sign, eps: f64) -> bool {
    let pick = |y: &OutcomeVector| match var {
        OutcomeVariable::Value => y.value,
        OutcomeVariable::Confidence => y.confidence,
        OutcomeVariable::Riskiness => y.riskiness,
    };
    let change = match sign {
        Sign::Positive => pick(y_c) - pick(y_q),
        Sign::Negative => pick(y_q) - pick(y_c),
    };
    change >= eps
}

/// Cell-by-cell edit count, then numeric differences channel by channel.
fn brute_odiff(a: &[f64], b: &[f64], s: &FeatureSchema) -> f64 {
    let cells = s.height * s.width;
    let mut total = 0.0;
    let mut chan = 0;
    for layer in &s.categorical {
        let k = layer.vocabulary.len();
        for cell in 0..cells {
            let arg = |t: &[f64]| {
                let mut best = 0;
                for c in 0..k {
                    if t[(chan + c) * cells + cell] > t[(chan + best) * cells + cell] {
                        best = c;
                    }
                }
                best
            };
            if arg(a) != arg(b) {
                total += 1.0;
            }
        }
        chan += k;
    }
    for n in &s.numeric {
        for cell in 0..cells {
            total += (a[chan * cells + cell] - b[chan * cells + cell]).abs() / n.width;
        }
        chan += 1;
    }
    total
}

fn random_features(rng: &mut ChaCha8Rng, s: &FeatureSchema) -> FeatureTensor {
    // Half the cases are quantised so argmax ties actually occur.
    let coarse = rng.random_bool(0.5);
    FeatureTensor(
        (0..s.len())
            .map(|_| if coarse { rng.random_range(0..3) as f64 } else { rng.random_range(-3.0..3.0) })
            .collect(),
    )
}

fn measure_oracles() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let env = EnvConfig::default();
    let schemas = [
        FeatureSchema::for_env(EnvKind::Gridworld, &env),
        FeatureSchema::for_env(EnvKind::Cartpole, &env),
    ];
    let (mut v_bad, mut o_bad) = (0, 0);
    for case in 0..1000 {
        let var = OutcomeVariable::ALL[rng.random_range(0..3)];
        let sign = if rng.random_bool(0.5) { Sign::Positive } else { Sign::Negative };
        let eps = rng.random_range(1e-3..1.0);
        let y_q = random_outcome(&mut rng);
        let mut y_c = random_outcome(&mut rng);
        if case % 4 == 0 {
            // Land exactly on the margin.
            y_c.value = y_q.value + sign.value() * eps;
        }
        let spec = ValiditySpec::numeric(var, sign, eps).unwrap();
        if validity(&y_c, &y_q, &spec) != brute_validity(&y_c, &y_q, var, sign, eps) {
            v_bad += 1;
        }
        let s = &schemas[case % 2];
        let (a, b) = (random_features(&mut rng, s), random_features(&mut rng, s));
        let want = brute_odiff(&a.0, &b.0, s);
        let fast = Decoded::new(&a, s).unwrap().odiff(&Decoded::new(&b, s).unwrap(), s);
        if odiff(&a, &b, s).unwrap().to_bits() != want.to_bits() || fast.to_bits() != want.to_bits() {
            o_bad += 1;
        }
    }
    verdict(
        "validity and odiff oracles",
        started,
        &[
            (v_bad == 0, format!("validity disagreements {v_bad}/1000")),
            (o_bad == 0, format!("odiff disagreements {o_bad}/1000")),
        ],
    )
}

fn queries_from_records(fx: &Fixture) -> Vec<CFQuery> {
    fx.eval
        .report
        .records
        .iter()
        .filter(|r| r.variant == "NUN")
        .map(|r| {
            let f = r.frame.expect("sampled queries carry a frame");
            CFQuery {
                frame: Some(f),
                x_q: fx.data.frames[f].features.clone(),
                y_q: fx.data.frames[f].outcome,
                spec: ValiditySpec::numeric(r.variable, r.sign, r.epsilon).unwrap(),
            }
        })
        .collect()
}

fn nun_validity(fx: &Fixture) -> Verdict {
    let started = Instant::now();
    let nun: Vec<&QueryRecord> = fx.eval.report.records.iter().filter(|r| r.variant == "NUN").collect();
    let found: Vec<&&QueryRecord> = nun.iter().filter(|r| r.status == RecordStatus::Generated).collect();
    let invalid = found.iter().filter(|r| !r.valid).count();

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let frames = index::sample(&mut rng, fx.data.frames.len(), 500).into_vec();
    let library = CaseLibrary::from_frames(&fx.data, frames).unwrap();
    let queries = queries_from_records(fx);
    let mut mismatches = 0;
    for q in &queries {
        let got = find_nun(q, &library, &fx.data.schema).unwrap();
        let mut want: Option<(usize, f64)> = None;
        for (e, &f) in library.frames.iter().enumerate() {
            let y = &library.outcomes[e];
            if !brute_validity(y, &q.y_q, q.spec.variable, q.spec.sign, q.spec.epsilon) {
                continue;
            }
            let d = brute_odiff(&q.x_q.0, &library.features[e].0, &fx.data.schema);
            if want.is_none_or(|(wf, wd)| d < wd || (d == wd && f < wf)) {
                want = Some((f, d));
            }
        }
        let same = match (got, want) {
            (None, None) => true,
            (Some(g), Some((f, d))) => g.frame == f && g.odiff.to_bits() == d.to_bits(),
            _ => false,
        };
        if !same {
            mismatches += 1;
        }
    }
    verdict(
        "NUN validity by construction",
        started,
        &[
            (nun.len() == 150, format!("{} queries", nun.len())),
            (invalid == 0, format!("{} NUNs found, {invalid} invalid", found.len())),
            (
                mismatches == 0,
                format!("find_nun vs linear scan on a 500-frame library: {mismatches}/{} mismatches", queries.len()),
            ),
        ],
    )
}

fn table1_ordering(fx: &Fixture) -> Verdict {
    let started = Instant::now();
    let r = &fx.eval.report;
    let (nun, interp, grad) = (r.summary("NUN").unwrap(), r.summary("InterpPt").unwrap(), r.summary("Gradient").unwrap());
    verdict(
        "proximity ordering",
        started,
        &[
            (
                interp.odiff_mean < nun.odiff_mean,
                format!("odiff InterpPt {:.3} < NUN {:.3}", interp.odiff_mean, nun.odiff_mean),
            ),
            (
                grad.odiff_mean < nun.odiff_mean,
                format!("odiff Gradient {:.3} < NUN {:.3}", grad.odiff_mean, nun.odiff_mean),
            ),
            (
                grad.validity_fraction >= 0.8,
                format!("Gradient validity {:.3} >= 0.8", grad.validity_fraction),
            ),
            within("full evaluation", fx.eval_time, 10 * MIN),
        ],
    )
}

fn plausibility_ordering(fx: &Fixture) -> Verdict {
    let started = Instant::now();
    let r = &fx.eval.report;
    let mut checks = Vec::new();
    for method in ["InterpPt", "Gradient"] {
        let adj = r.summary(method).unwrap();
        let raw = r.summary(&format!("{method} (no adj.)")).unwrap();
        checks.push((
            adj.anomaly_mean <= raw.anomaly_mean,
            format!("{method} anomaly {:.3} <= {:.3}", adj.anomaly_mean, raw.anomaly_mean),
        ));
        checks.push((
            adj.anomalous_count.is_some() && adj.anomalous_count <= raw.anomalous_count,
            format!("{method} anomalous {:?} <= {:?}", adj.anomalous_count, raw.anomalous_count),
        ));
    }
    checks.push(within("paired evaluation", fx.eval_time, 15 * MIN));
    verdict("plausibility ordering", started, &checks)
}

fn joint_vs_recon(fx: &Fixture) -> Verdict {
    let started = Instant::now();
    let r = &fx.eval.report;
    let joint = r.summary("Gradient").unwrap();
    let baseline = r.summary("Gradient (no adj.) [recon-only]").unwrap();
    verdict(
        "joint latent vs reconstruction-only",
        started,
        &[
            (
                joint.validity_fraction >= baseline.validity_fraction,
                format!("validity {:.3} >= {:.3}", joint.validity_fraction, baseline.validity_fraction),
            ),
            (
                joint.anomaly_mean <= baseline.anomaly_mean,
                format!("anomaly {:.3} <= {:.3}", joint.anomaly_mean, baseline.anomaly_mean),
            ),
            within("twin training plus evaluation", fx.recon_train + fx.eval_time, 20 * MIN),
        ],
    )
}

fn anomaly_threshold(fx: &Fixture) -> Verdict {
    let started = Instant::now();
    let t = pipeline::tune_threshold_for(&fx.cfg, &fx.joint, &fx.data).unwrap();
    let elapsed = started.elapsed();
    verdict(
        "anomaly threshold",
        started,
        &[
            (
                t.test_accuracy >= 0.9,
                format!(
                    "held-out accuracy {:.3} on {} scenes (threshold {:.3}, always-plausible baseline {:.3})",
                    t.test_accuracy, t.test_size, t.threshold.threshold, t.baseline_accuracy
                ),
            ),
            within("tuning", elapsed, 5 * MIN),
        ],
    )
}

fn fingerprint(records: &[QueryRecord]) -> Vec<String> {
    records.iter().map(|r| format!("{r:?}")).collect()
}

fn determinism(fx: &Fixture) -> Verdict {
    let started = Instant::now();
    let again = pipeline::evaluate(&fx.cfg, &fx.joint, Some(&fx.recon), &fx.data).unwrap();
    let grid_same = fingerprint(&again.report.records) == fingerprint(&fx.eval.report.records);

    // From scratch on the small environment: agent, data, model, eval.
    let mut cfg = PipelineConfig::for_env(EnvKind::Cartpole);
    cfg.queries_per_cell = 10;
    cfg.corruption_pairs = 50;
    cfg.elbo.n_real = 20;
    cfg.elbo.n_random = 20;
    let run = || {
        let d = pipeline::generate_data(&cfg).unwrap().data;
        let m = pipeline::train_model(&cfg, &d, TrainMode::Joint).unwrap().model;
        pipeline::evaluate(&cfg, &m, None, &d).unwrap().report.records
    };
    let (a, b) = (run(), run());
    verdict(
        "determinism",
        started,
        &[
            (
                grid_same,
                format!("gridworld re-evaluation reproduces {} records", fx.eval.report.records.len()),
            ),
            (
                fingerprint(&a) == fingerprint(&b),
                format!("cartpole end-to-end rerun reproduces {} records", a.len()),
            ),
        ],
    )
}

fn main() {
    // `cargo test -- <filter>` passes arguments; this target always runs whole.
    let started = Instant::now();
    eprintln!("acceptance: building the gridworld fixture (agent, data, joint model, twin, evaluation)");
    let fx = fixture();
    eprintln!("acceptance: fixture ready in {:.1}s", started.elapsed().as_secs_f64());
    let verdicts = vec![
        autodiff_soundness(&fx.data),
        joint_training(&fx),
        elbo_property(&fx),
        measure_oracles(),
        nun_validity(&fx),
        table1_ordering(&fx),
        plausibility_ordering(&fx),
        joint_vs_recon(&fx),
        anomaly_threshold(&fx),
        determinism(&fx),
    ];
    println!();
    for v in &verdicts {
        println!(
            "{} {:<36} {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.name,
            v.detail,
            v.elapsed.as_secs_f64()
        );
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
