use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use partgen_core::config::{ModelConfig, Profile};
use partgen_core::data::{canonicalize_part, SegmentedCloud};
use partgen_core::dataset::{synthesize_dataset, BoxFurnitureTemplate};
use partgen_core::model::PartGen;
use partgen_core::pipeline;
use partgen_core::wire::{CreateSessionResponse, MetaResponse, TransformResponse, WireCloud};
use partgen_server::{router, AppState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

fn model() -> PartGen {
    let mut cfg = ModelConfig::box_furniture(Profile::Smoke);
    cfg.steps = 8;
    cfg.point_budget = 48;
    let mut m = PartGen::new(cfg, 11).unwrap();
    m.quantize();
    m
}

fn shapes(n: usize) -> Vec<SegmentedCloud> {
    let template = BoxFurnitureTemplate { points_per_shape: 48, ..Default::default() };
    synthesize_dataset(5, n, 0, &template).unwrap().train
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn create(state: &Arc<AppState>, cloud: &SegmentedCloud) -> CreateSessionResponse {
    let (status, body) = call(state, "POST", "/sessions", Some(json!({ "cloud": WireCloud::from_cloud(cloud) }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    serde_json::from_value(body).unwrap()
}

fn cloud_of(v: Value) -> SegmentedCloud {
    serde_json::from_value::<WireCloud>(v).unwrap().to_cloud("box-furniture").unwrap()
}

#[tokio::test]
async fn answers_503_until_the_model_is_loaded() {
    let state = AppState::loading(4);
    let (status, body) = call(&state, "GET", "/meta", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(body["error"].is_string());
    let (status, _) = call(&state, "POST", "/generate", Some(json!({"n": 1, "seed": 0}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    state.set_model(model());
    let (status, body) = call(&state, "GET", "/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    let meta: MetaResponse = serde_json::from_value(body).unwrap();
    assert_eq!(meta.m, 4);
    assert_eq!(meta.part_names[0], "back");
    assert_eq!(meta.max_points, 4096);
}

#[tokio::test]
async fn session_creation_echoes_observed_transforms() {
    let state = AppState::with_model(model(), 4);
    let shape = &shapes(1)[0];
    let created = create(&state, shape).await;
    assert_eq!(created.parts.len(), 4);
    assert_eq!(created.transforms.len(), 4);
    for (j, part) in shape.parts().iter().enumerate() {
        let (_, t) = canonicalize_part(part).unwrap();
        assert_eq!(created.transforms[j], Some(t));
        assert_eq!(created.parts[j].points, part.len());
    }
}

#[tokio::test]
async fn empty_resample_equals_the_library_reconstruction() {
    let model = model();
    let shape = &shapes(1)[0];
    let session = pipeline::encode_shape(&model, shape).unwrap();
    let want = pipeline::render(&model, &session, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let state = AppState::with_model(model, 4);
    let id = create(&state, shape).await.session_id;
    let (status, body) = call(&state, "POST", &format!("/sessions/{id}/resample"), Some(json!({"parts": [], "seed": 21}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(cloud_of(body), want);
}

#[tokio::test]
async fn generate_equals_the_library_call() {
    let model = model();
    let want = pipeline::generate(&model, 2, &pipeline::even_split(48, 4), &Default::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let state = AppState::with_model(model, 4);
    let (status, body) = call(&state, "POST", "/generate", Some(json!({"n": 2, "seed": 3}))).await;
    assert_eq!(status, StatusCode::OK);
    let got: Vec<SegmentedCloud> = body.as_array().unwrap().iter().cloned().map(cloud_of).collect();
    assert_eq!(got, want);
    let (status, _) = call(&state, "POST", "/generate", Some(json!({"n": 1000, "seed": 3}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn error_statuses() {
    let state = AppState::with_model(model(), 1);
    let (status, _) = call(&state, "POST", "/sessions/nope/resample", Some(json!({"parts": [], "seed": 0}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&state, "POST", "/sessions", Some(json!({"cloud": {"points": [1.0], "labels": [0], "m": 4}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&state, "POST", "/sessions", Some(json!({"nonsense": true}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let data = shapes(2);
    let first = create(&state, &data[0]).await.session_id;
    let (status, _) = call(&state, "POST", &format!("/sessions/{first}/resample"), Some(json!({"parts": [7], "seed": 0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&state, "POST", &format!("/sessions/{first}/resample"), Some(json!({"parts": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    // Capacity 1: the second session pushes the first out.
    create(&state, &data[1]).await;
    let (status, body) = call(&state, "POST", &format!("/sessions/{first}/resample"), Some(json!({"parts": [], "seed": 0}))).await;
    assert_eq!(status, StatusCode::GONE, "{body}");
}

#[tokio::test]
async fn edits_run_end_to_end() {
    let model = model();
    let state = AppState::with_model(model.clone(), 8);
    let data = shapes(2);
    let a = create(&state, &data[0]).await.session_id;
    let b = create(&state, &data[1]).await.session_id;

    let (status, body) = call(
        &state,
        "POST",
        &format!("/sessions/{a}/mix"),
        Some(json!({"donor_session_ids": [b], "assignment": {"0": b, "1": a}, "seed": 4})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let mixed = cloud_of(body);
    assert_eq!(mixed.part_sizes()[0], data[1].part_sizes()[0]);
    let (status, _) = call(&state, "POST", &format!("/sessions/{a}/mix"), Some(json!({"donor_session_ids": [], "assignment": {"0": b}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&state, "POST", &format!("/sessions/{a}/mix"), Some(json!({"donor_session_ids": ["zzz"], "assignment": {}}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = call(&state, "POST", &format!("/sessions/{a}/interpolate"), Some(json!({"part": 2, "target_session": b, "steps": 4}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body.as_array().unwrap().len(), 5);
    let (status, _) = call(&state, "POST", &format!("/sessions/{a}/interpolate"), Some(json!({"part": 2, "target_session": b, "steps": 0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = call(
        &state,
        "POST",
        &format!("/sessions/{a}/transform"),
        Some(json!({"constraints": {"1": {"shift": [null, 0.5, null]}}, "max_iters": 20})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let t: TransformResponse = serde_json::from_value(body).unwrap();
    assert!(t.residual.is_finite());
    assert_eq!(t.cloud.m, 4);
    let (status, _) = call(&state, "POST", &format!("/sessions/{a}/transform"), Some(json!({"constraints": {"1": {"scale": [-1.0, null, null]}}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn cors_headers_are_permissive() {
    let state = AppState::with_model(model(), 2);
    let req = Request::builder().method("GET").uri("/meta").header("origin", "http://localhost:5173").body(Body::empty()).unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    assert_eq!(resp.headers().get("access-control-allow-origin").unwrap(), "*");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_edits_on_one_session_serialize() {
    let model = model();
    let shape = &shapes(1)[0];
    let state = AppState::with_model(model.clone(), 4);
    let id = create(&state, shape).await.session_id;
    let uri = format!("/sessions/{id}/resample");
    let (r1, r2) = tokio::join!(
        call(&state, "POST", &uri, Some(json!({"parts": [0], "seed": 1}))),
        call(&state, "POST", &uri, Some(json!({"parts": [1], "seed": 2})))
    );
    assert_eq!((r1.0, r2.0), (StatusCode::OK, StatusCode::OK));
    let (c1, c2) = (cloud_of(r1.1), cloud_of(r2.1));
    // Whichever ran second saw the first one's result.
    let base = pipeline::encode_shape(&model, shape).unwrap();
    let rng = |s| ChaCha8Rng::seed_from_u64(s);
    let (a1, s1) = pipeline::resample_parts(&model, &base, &[0], &mut rng(1)).unwrap();
    let (a2, _) = pipeline::resample_parts(&model, &s1, &[1], &mut rng(2)).unwrap();
    let (b2, t2) = pipeline::resample_parts(&model, &base, &[1], &mut rng(2)).unwrap();
    let (b1, _) = pipeline::resample_parts(&model, &t2, &[0], &mut rng(1)).unwrap();
    assert!((c1 == a1 && c2 == a2) || (c2 == b2 && c1 == b1));
}
