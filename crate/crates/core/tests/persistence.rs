use latentcf_core::dataset::TrajectoryDataset;
use latentcf_core::envs::EnvKind;
use latentcf_core::jvae::{JointVae, TrainMode};
use latentcf_core::pipeline::{self, PipelineConfig};
use latentcf_core::Error;

fn cfg(env: EnvKind) -> PipelineConfig {
    let mut cfg = PipelineConfig::for_env(env);
    cfg.episodes = 6;
    let mut agent = cfg.agent_config();
    agent.episodes = 30;
    agent.return_floor = None;
    agent.warmup = 32;
    cfg.agent = Some(agent);
    cfg.schedule.epochs = 1;
    cfg
}

#[test]
fn datasets_and_models_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    for env in [EnvKind::Cartpole, EnvKind::Gridworld] {
        let c = cfg(env);
        let data = pipeline::generate_data(&c).unwrap().data;
        let dp = dir.path().join(format!("{env}.jsonl"));
        data.save(&dp).unwrap();
        let back = TrajectoryDataset::load(&dp).unwrap();
        assert_eq!(back.frames.len(), data.frames.len());
        assert_eq!(back.split, data.split);
        assert_eq!(back.frames[0].features, data.frames[0].features);
        assert_eq!(back.frames[0].outcome, data.frames[0].outcome);

        let model = pipeline::train_model(&c, &data, TrainMode::Joint).unwrap().model;
        let mp = dir.path().join(format!("{env}.ckpt"));
        model.save(&mp).unwrap();
        let loaded = JointVae::load(&mp).unwrap();
        assert_eq!(loaded.weight_digest(), model.weight_digest());
        let z = model.encode_mean(&data.frames[1].features).unwrap();
        assert_eq!(loaded.encode_mean(&data.frames[1].features).unwrap(), z);
    }
}

#[test]
fn stages_are_seed_deterministic() {
    let c = cfg(EnvKind::Gridworld);
    let a = pipeline::generate_data(&c).unwrap().data;
    let b = pipeline::generate_data(&c).unwrap().data;
    assert_eq!(a.frames.len(), b.frames.len());
    assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| x.features == y.features && x.outcome == y.outcome));
    let ma = pipeline::train_model(&c, &a, TrainMode::Joint).unwrap().model;
    let mb = pipeline::train_model(&c, &b, TrainMode::Joint).unwrap().model;
    assert_eq!(ma.weight_digest(), mb.weight_digest());

    let other = PipelineConfig { seed: c.seed + 1, ..c };
    let d = pipeline::generate_data(&other).unwrap().data;
    assert!(d.frames.len() != a.frames.len() || d.frames.iter().zip(&a.frames).any(|(x, y)| x.features != y.features));
}

#[test]
fn garbage_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("junk");
    std::fs::write(&p, b"not json\n").unwrap();
    assert!(TrajectoryDataset::load(&p).is_err());
    assert!(JointVae::load(&p).is_err());
    assert!(matches!(TrajectoryDataset::load(&dir.path().join("absent")), Err(Error::Io { .. })));
}
