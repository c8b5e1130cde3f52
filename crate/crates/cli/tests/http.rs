use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use hiertcn::data::{EmbeddingTable, ItemMatrix, IDLE_THRESHOLD_SECS};
use hiertcn::model::{Architecture, Checkpoint, Model, ModelConfig};
use hiertcn::serving::{InteractionAck, RecommendationResponse, Recommender, ServingModel};
use hiertcn_cli::args::ServeArgs;
use hiertcn_cli::http::{load_engine, router, CloseIdleResponse, Health};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

fn table() -> EmbeddingTable {
    let rows = Array2::from_shape_fn((10, 4), |(i, j)| ((i * 5 + j * 3) % 7) as f32 / 3.0 - 1.0);
    EmbeddingTable::from_rows((1..=10).collect(), &rows).unwrap()
}

fn checkpoint() -> Checkpoint<f32> {
    let mut cfg = ModelConfig::preset(Architecture::HierTcn, 4);
    cfg.channels = 6;
    cfg.high_layers = 2;
    cfg.high_hidden = 5;
    let model = Model::<f32>::new(&cfg, 1).unwrap();
    Checkpoint::new(model.clone(), model.new_buffers())
}

fn engine() -> Arc<Recommender> {
    let items = Arc::new(ItemMatrix::from_table(&table()));
    Arc::new(Recommender::new(ServingModel::new(checkpoint(), items).unwrap(), IDLE_THRESHOLD_SECS).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), 1 << 20).await.unwrap().to_vec())
}

async fn call_ok<T: DeserializeOwned>(app: &Router, method: &str, uri: &str, body: Option<Value>) -> T {
    let (status, bytes) = call(app, method, uri, body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

#[tokio::test]
async fn interactions_then_recommendations() {
    let rec = engine();
    let app = router(rec.clone());
    let h: Health = call_ok(&app, "GET", "/v1/health", None).await;
    assert_eq!((h.status.as_str(), h.users), ("ok", 0));

    let ack: InteractionAck =
        call_ok(&app, "POST", "/v1/interactions", Some(json!({"user_id": 3, "item_id": 2, "timestamp": 100}))).await;
    assert!(ack.new_user);
    let ack: InteractionAck =
        call_ok(&app, "POST", "/v1/interactions", Some(json!({"user_id": 3, "item_id": 5, "timestamp": 4000}))).await;
    assert!(ack.closed_session);
    assert_eq!(ack.sessions, 1);

    let body = json!({"user_id": 3, "candidate_ids": [1, 2, 3, 4], "k": 3});
    let resp: RecommendationResponse = call_ok(&app, "POST", "/v1/recommendations", Some(body)).await;
    assert_eq!(resp, rec.recommend(3, &[1, 2, 3, 4], 3).unwrap());
    assert_eq!(resp.items.len(), 3);
    assert!(!resp.cold_start);
    assert_eq!(resp.state_version, ack.state_version);
    assert_eq!(resp.model_version, h.model_version);

    let cold: RecommendationResponse =
        call_ok(&app, "POST", "/v1/recommendations", Some(json!({"user_id": 8, "candidate_ids": [7], "k": 1}))).await;
    assert!(cold.cold_start);
    assert_eq!(cold.items[0].item_id, 7);
}

#[tokio::test]
async fn close_idle_endpoint_is_idempotent() {
    let app = router(engine());
    call_ok::<InteractionAck>(&app, "POST", "/v1/interactions", Some(json!({"user_id": 1, "item_id": 1, "timestamp": 0}))).await;
    let r: CloseIdleResponse = call_ok(&app, "POST", "/v1/maintenance/close-idle", Some(json!({"now": 5000}))).await;
    assert_eq!((r.closed, r.now), (1, 5000));
    let r: CloseIdleResponse = call_ok(&app, "POST", "/v1/maintenance/close-idle", Some(json!({"now": 5000}))).await;
    assert_eq!(r.closed, 0);
    let r: CloseIdleResponse = call_ok(&app, "POST", "/v1/maintenance/close-idle", None).await;
    assert_eq!(r.closed, 0);
    assert!(r.now > 1_600_000_000);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let app = router(engine());
    let (s, body) = call(&app, "POST", "/v1/interactions", Some(json!({"user_id": 1, "item_id": 77, "timestamp": 0}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["kind"], "data");

    call_ok::<InteractionAck>(&app, "POST", "/v1/interactions", Some(json!({"user_id": 1, "item_id": 1, "timestamp": 10}))).await;
    let (s, _) = call(&app, "POST", "/v1/interactions", Some(json!({"user_id": 1, "item_id": 1, "timestamp": 9}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = call(&app, "POST", "/v1/recommendations", Some(json!({"user_id": 1, "candidate_ids": [1, 70], "k": 2}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = call(&app, "POST", "/v1/recommendations", Some(json!({"user_id": 1}))).await;
    assert!(s.is_client_error());
    let (s, _) = call(&app, "GET", "/v1/nothing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn engine_restores_the_snapshot_on_start() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    table().write(&data.join("items.emb")).unwrap();
    let ck = dir.path().join("model.ckpt");
    checkpoint().save(&ck).unwrap();
    let args = ServeArgs {
        checkpoint: ck.clone(),
        dataset: data,
        addr: "127.0.0.1:0".into(),
        snapshot: None,
        idle_threshold: IDLE_THRESHOLD_SECS,
    };
    let first = load_engine(&args).unwrap();
    first.on_interaction(4, 2, 50).unwrap();
    first.on_interaction(4, 3, 60).unwrap();
    first.save_snapshot(&dir.path().join("users.snap")).unwrap();

    let second = load_engine(&args).unwrap();
    assert_eq!(second.cache().entry(4), first.cache().entry(4));
    assert_eq!(second.recommend(4, &[1, 2, 3], 3).unwrap(), first.recommend(4, &[1, 2, 3], 3).unwrap());
}
