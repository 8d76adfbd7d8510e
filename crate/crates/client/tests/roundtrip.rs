use std::collections::BTreeMap;

use partgen_client::Client;
use partgen_core::config::{ModelConfig, Profile};
use partgen_core::dataset::{synthesize_dataset, BoxFurnitureTemplate};
use partgen_core::model::PartGen;
use partgen_core::pipeline::{self, PartConstraint};
use partgen_core::wire::WireCloud;
use partgen_server::{router, AppState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

async fn spawn(model: Option<PartGen>) -> String {
    let state = match model {
        Some(m) => AppState::with_model(m, 8),
        None => AppState::loading(8),
    };
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    format!("http://{addr}")
}

fn model() -> PartGen {
    let mut cfg = ModelConfig::box_furniture(Profile::Smoke);
    cfg.steps = 6;
    cfg.point_budget = 40;
    let mut m = PartGen::new(cfg, 2).unwrap();
    m.quantize();
    m
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn client_drives_every_endpoint() {
    let model = model();
    let client = Client::new(spawn(Some(model.clone())).await);
    let meta = client.meta().await.unwrap();
    assert_eq!(meta.m, 4);

    let template = BoxFurnitureTemplate { points_per_shape: 40, ..Default::default() };
    let shapes = synthesize_dataset(9, 2, 0, &template).unwrap().train;
    let a = client.create_session(WireCloud::from_cloud(&shapes[0])).await.unwrap().session_id;
    let b = client.create_session(WireCloud::from_cloud(&shapes[1])).await.unwrap().session_id;

    let got = client.resample(&a, vec![], 5).await.unwrap();
    let session = pipeline::encode_shape(&model, &shapes[0]).unwrap();
    let want = pipeline::render(&model, &session, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(got, WireCloud::from_cloud(&want));

    let mixed = client.mix(&a, vec![b.clone()], BTreeMap::from([(3, b.clone())]), 1).await.unwrap();
    assert_eq!(mixed.m, 4);
    let frames = client.interpolate(&a, 0, &b, 3, 0).await.unwrap();
    assert_eq!(frames.len(), 4);
    let c = PartConstraint { shift: [Some(0.0), None, None], scale: [None; 3] };
    let t = client.transform(&b, BTreeMap::from([(1, c)]), 0, Some(10)).await.unwrap();
    assert!(t.residual.is_finite());
    let gen = client.generate(3, 7, Some(20)).await.unwrap();
    assert_eq!(gen.len(), 3);
    assert!(gen.iter().all(|g| g.len() == 20));

    let err = client.resample("missing", vec![], 0).await.unwrap_err();
    assert_eq!(err.status().map(|s| s.as_u16()), Some(404));
    assert!(err.to_string().contains("unknown session"));
}

#[tokio::test]
async fn loading_server_reports_503() {
    let client = Client::new(spawn(None).await);
    let err = client.meta().await.unwrap_err();
    assert_eq!(err.status().map(|s| s.as_u16()), Some(503));
}
