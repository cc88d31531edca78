use std::sync::Arc;
use std::time::Duration;

use camannot::gateway::conformance::conformance_suite;
use camannot::gateway::protocol::{self, ServerState};
use camannot::gateway::{stub_caption, stub_embed_text, BackendConfig, Gateway, GatewayError, StubBackend};

const DIM: usize = 48;

fn spawn_server(max_batch: usize) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let state = ServerState {
                backend: Arc::new(StubBackend::new(DIM)),
                model_ids: vec!["enc-a".into(), "cap-b".into()],
                max_batch,
            };
            axum::serve(listener, protocol::router(state)).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

#[test]
fn reference_server_passes_conformance() {
    let endpoint = spawn_server(64);
    let report = conformance_suite(&endpoint, "enc-a", Duration::from_secs(10));
    let failures: Vec<_> = report.failures().collect();
    assert!(report.passed(), "{failures:?}");
    assert!(report.checks.len() >= 6);
}

#[test]
fn remote_gateway_matches_in_process_stub() {
    let endpoint = spawn_server(64);
    let remote = Gateway::from_config(&BackendConfig::remote(&endpoint, "enc-a"), None).unwrap();
    let local = Gateway::stub("enc-a", DIM);
    let texts: Vec<String> = ["sitting at a desk", "walking the dog", "", "cycling uphill"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let r = remote.embed_texts(&texts).unwrap();
    let l = local.embed_texts(&texts).unwrap();
    assert_eq!(r.len(), 4);
    for (a, b) in r.iter().zip(&l) {
        assert_eq!(a.values, b.values);
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }
    let expected = stub_embed_text("walking the dog", DIM);
    for (x, y) in r[1].values.iter().zip(&expected) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn remote_images_and_captions_round_trip() {
    let endpoint = spawn_server(64);
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    image::RgbImage::from_pixel(4, 4, image::Rgb([10, 200, 30])).save(&img).unwrap();
    let bytes = std::fs::read(&img).unwrap();

    let remote = Gateway::from_config(&BackendConfig::remote(&endpoint, "cap-b"), None).unwrap();
    let caption = remote.caption_image(&img, "what is happening", 10).unwrap();
    assert_eq!(caption, stub_caption(&bytes, "what is happening", 10));

    let enc = Gateway::from_config(&BackendConfig::remote(&endpoint, "enc-a"), None).unwrap();
    let v = enc.embed_image(&img).unwrap();
    assert_eq!(v.dim(), DIM);
    assert_eq!(v.values, Gateway::stub("enc-a", DIM).embed_image(&img).unwrap().values);
}

#[test]
fn oversized_batches_are_split_by_the_gateway() {
    let endpoint = spawn_server(3);
    let gw = Gateway::from_config(&BackendConfig::remote(&endpoint, "enc-a"), None)
        .unwrap()
        .with_batch_size(3);
    let texts: Vec<String> = (0..10).map(|i| format!("label {i}")).collect();
    assert_eq!(gw.embed_texts(&texts).unwrap().len(), 10);
    assert_eq!(gw.stats().backend_calls, 4);
}

#[test]
fn unknown_model_is_not_retried() {
    let endpoint = spawn_server(64);
    let gw = Gateway::from_config(&BackendConfig::remote(&endpoint, "nope"), None).unwrap();
    match gw.embed_text("x") {
        Err(GatewayError::Backend { attempts, .. }) => assert_eq!(attempts, 1),
        other => panic!("expected backend error, got {other:?}"),
    }
}

#[test]
fn raw_http_error_shapes() {
    let endpoint = spawn_server(2);
    let agent: ureq::Agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
    let body = serde_json::json!({"model_id": "enc-a", "texts": ["a", "b", "c"]});
    let mut resp = agent.post(format!("{endpoint}/v1/embed_text")).send_json(&body).unwrap();
    assert_eq!(resp.status(), 413);
    let err: serde_json::Value = resp.body_mut().read_json().unwrap();
    assert!(err["error"].is_string());

    let mut resp = agent.get(format!("{endpoint}/v1/health")).call().unwrap();
    assert_eq!(resp.status(), 200);
    let h: serde_json::Value = resp.body_mut().read_json().unwrap();
    assert_eq!(h["model_id"], "enc-a");
    assert_eq!(h["dim"], DIM);
}
