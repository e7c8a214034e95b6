use latentcf_api::{CounterfactualRequest, Sign};
use latentcf_client::Client;
use latentcf_core::envs::EnvKind;
use latentcf_core::jvae::TrainMode;
use latentcf_core::pipeline::{self, PipelineConfig};
use latentcf_service::{serve, ServiceConfig, ServiceState};

#[tokio::test(flavor = "multi_thread")]
async fn full_session_over_http() {
    let mut cfg = PipelineConfig::for_env(EnvKind::Cartpole);
    cfg.episodes = 20;
    let mut agent = cfg.agent_config();
    agent.episodes = 60;
    cfg.agent = Some(agent);
    cfg.schedule.epochs = 3;
    let data = pipeline::generate_data(&cfg).unwrap().data;
    let model = pipeline::train_model(&cfg, &data, TrainMode::Joint).unwrap().model;
    let query_frame = (0..data.frames.len()).find(|&i| data.frames[i].outcome.value < 0.0).unwrap();
    let state = ServiceState::new(model, data, ServiceConfig::default()).unwrap();

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, state, async {
        let _ = stopped.await;
    }));

    let client = Client::new(&format!("http://{addr}")).unwrap();
    let info = client.model().await.unwrap();
    assert_eq!(info.env, "cartpole");
    let page = client.frames(0, 10).await.unwrap();
    assert_eq!(page.frames.len(), 10);
    assert_eq!(page.total, info.frame_count);
    let detail = client.frame(query_frame).await.unwrap();
    assert_eq!(detail.id, query_frame);

    let req = CounterfactualRequest {
        frame_id: query_frame,
        variable: "value".into(),
        sign: Sign::Positive,
        epsilon: Some(0.2),
        method: "gradient".into(),
        params: None,
    };
    let r = client.counterfactual(&req).await.unwrap();
    assert_eq!(r.frame_id, query_frame);
    assert_eq!(Some(r.valid), r.recompute_validity());
    let last = client.path_step(&r.result_id, r.path_len() - 1).await.unwrap();
    assert_eq!(last.step, r.path_len() - 1);

    let err = client.frame(info.frame_count).await.unwrap_err();
    assert_eq!(err.status(), Some(404));
    assert_eq!(err.code(), Some("unknown-frame"));
    let err = client.path_step("nope", 0).await.unwrap_err();
    assert_eq!(err.code(), Some("unknown-result"));
    let bad = CounterfactualRequest {
        method: "telepathy".into(),
        ..req
    };
    let err = client.counterfactual(&bad).await.unwrap_err();
    assert_eq!(err.status(), Some(422));

    stop.send(()).unwrap();
    server.await.unwrap().unwrap();
}

#[tokio::test]
async fn unreachable_service_is_a_transport_error() {
    let client = Client::new("http://127.0.0.1:1").unwrap();
    let err = client.model().await.unwrap_err();
    assert!(matches!(err, latentcf_client::ClientError::Http(_)), "{err}");
    assert_eq!(err.code(), None);
}
