use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use std::sync::OnceLock;
use steerkit::checkpoint::{checkpoint_id, Checkpoint};
use steerkit::data::{DatasetSpec, ShapesConfig};
use steerkit::eval::{execute_retrieve, RetrieveRequest};
use steerkit::serve::{router, AppState, ServeState};
use steerkit::trainer::{train, TrainConfig};
use tower::ServiceExt;

fn tiny_checkpoint() -> &'static (Checkpoint, String) {
    static CK: OnceLock<(Checkpoint, String)> = OnceLock::new();
    CK.get_or_init(|| {
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 64,
            dataset: DatasetSpec::Shapes(ShapesConfig {
                n_train: 256,
                n_eval: 48,
                ..Default::default()
            }),
            ..Default::default()
        };
        let ds = cfg.dataset.load().unwrap();
        let ck = train(&cfg, &ds, None).unwrap();
        let id = checkpoint_id(&ck.to_bytes().unwrap());
        (ck, id)
    })
}

fn app() -> axum::Router {
    let (ck, id) = tiny_checkpoint();
    router(AppState::ready(ServeState::new(ck.clone(), id.clone(), None).unwrap()))
}

async fn call(app: axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, ctype)
}

async fn get(app: axum::Router, uri: &str) -> (StatusCode, Value) {
    let (s, b, _) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post(app: axum::Router, body: Value) -> (StatusCode, Value) {
    let req = Request::post("/api/retrieve")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, b, _) = call(app, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn ids(v: &Value) -> Vec<u64> {
    v["neighbors"].as_array().unwrap().iter().map(|n| n["id"].as_u64().unwrap()).collect()
}

#[tokio::test]
async fn health_reports_checkpoint_and_index() {
    let (s, v) = get(app(), "/api/health").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["checkpoint_id"], tiny_checkpoint().1.as_str());
    assert_eq!(v["index_size"], 48);
}

#[tokio::test]
async fn loading_state_answers_503() {
    let app = router(AppState::loading());
    for uri in ["/api/health", "/api/gallery", "/api/image/0"] {
        let (s, _) = get(app.clone(), uri).await;
        assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE, "{uri}");
    }
    let (s, _) = post(app, json!({"query_id": 0, "mode": "raw"})).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn gallery_pages() {
    let (s, v) = get(app(), "/api/gallery?limit=5&offset=5").await;
    assert_eq!(s, StatusCode::OK);
    let items = v.as_array().unwrap();
    assert_eq!(items.len(), 5);
    assert_eq!(items[0]["id"], 5);
    assert_eq!(items[0]["thumb_url"], "/api/image/5");
    assert!(items[0]["class_label"].is_u64() && items[0]["aux_color_label"].is_u64());
    let (_, tail) = get(app(), "/api/gallery?limit=10&offset=45").await;
    assert_eq!(tail.as_array().unwrap().len(), 3);
    let (s, v) = get(app(), "/api/gallery?limit=0").await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("limit")));
    let (s, _) = get(app(), "/api/gallery?limit=-3").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn images_are_png_and_unknown_ids_404() {
    let (s, body, ctype) = call(app(), Request::get("/api/image/7").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert_eq!(&body[..8], b"\x89PNG\r\n\x1a\n");
    let (s, _) = get(app(), "/api/image/48").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn augment_preview() {
    let uri = "/api/augment/3?kind=photo&theta=0.5,0,-0.5";
    let (s, body, ctype) = call(app(), Request::get(uri).body(Body::empty()).unwrap()).await;
    assert_eq!((s, ctype.as_deref()), (StatusCode::OK, Some("image/png")));
    let (_, plain, _) = call(app(), Request::get("/api/image/3").body(Body::empty()).unwrap()).await;
    assert_ne!(body, plain);
    let (s, v) = get(app(), "/api/augment/3?kind=photo&theta=0,0,1.5").await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("theta")));
    let (s, v) = get(app(), "/api/augment/3?theta=0,0,0").await;
    assert_eq!((s, v["field"].as_str()), (StatusCode::BAD_REQUEST, Some("kind")));
    let (s, _) = get(app(), "/api/augment/99?kind=rot&theta=0.1").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn retrieve_matches_library_path() {
    let (ck, id) = tiny_checkpoint();
    let state = ServeState::new(ck.clone(), id.clone(), None).unwrap();
    let req = RetrieveRequest {
        query_id: 4,
        mode: steerkit::eval::QueryMode::Delta,
        kind: Some(steerkit::augment::AugmentKind::Photo),
        theta: Some(vec![0.8, -0.3, -0.3]),
        w_m: None,
        k: 6,
    };
    let direct = execute_retrieve(&state.checkpoint, &state.index, &state.images, &req).unwrap();
    let (s, v) = post(app(), serde_json::to_value(&req).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let want: Vec<u64> = direct.neighbors.iter().map(|n| n.id as u64).collect();
    assert_eq!(ids(&v), want);
    assert_eq!(v["w_m"], 5.0);
    assert_eq!(v["neighbors"][0]["thumb_url"], format!("/api/image/{}", want[0]));
    assert!(v["query_embedding_norm"].as_f64().unwrap() > 0.0);
    assert!(v["elapsed_ms"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn delta_with_zero_weight_equals_map() {
    let base = json!({"query_id": 9, "kind": "geo", "theta": [0.1, 0.2, 0.6, 0.7], "k": 12});
    let mut map = base.clone();
    map["mode"] = json!("map");
    let mut delta = base;
    delta["mode"] = json!("delta");
    delta["w_m"] = json!(0.0);
    let (_, a) = post(app(), map).await;
    let (_, b) = post(app(), delta).await;
    assert_eq!(a["neighbors"], b["neighbors"]);
    assert_eq!(a["query_embedding_norm"], b["query_embedding_norm"]);
}

#[tokio::test]
async fn identical_requests_identical_bodies() {
    let body = json!({"query_id": 2, "mode": "input_aug", "kind": "rot", "theta": [0.3], "k": 5});
    let (_, mut a) = post(app(), body.clone()).await;
    let (_, mut b) = post(app(), body).await;
    a["elapsed_ms"] = Value::Null;
    b["elapsed_ms"] = Value::Null;
    assert_eq!(a, b);
}

#[tokio::test]
async fn retrieve_validation() {
    let cases = [
        (json!({"query_id": 0, "mode": "map", "kind": "photo", "theta": [1.5, 0, 0]}), StatusCode::BAD_REQUEST, Some("theta")),
        (json!({"query_id": 0, "mode": "map", "theta": [0, 0, 0]}), StatusCode::BAD_REQUEST, Some("kind")),
        (json!({"query_id": 0, "mode": "delta", "kind": "geo"}), StatusCode::BAD_REQUEST, Some("theta")),
        (json!({"query_id": 0, "mode": "raw", "k": 0}), StatusCode::BAD_REQUEST, Some("k")),
        (json!({"query_id": 0, "mode": "delta", "kind": "photo", "theta": [0, 0, 0], "w_m": -1}), StatusCode::BAD_REQUEST, Some("w_m")),
        (json!({"query_id": 480, "mode": "raw"}), StatusCode::NOT_FOUND, None),
        (json!({"query_id": 0, "mode": "map", "kind": "rot", "theta": [0.1]}), StatusCode::BAD_REQUEST, None),
    ];
    for (body, status, field) in cases {
        let (s, v) = post(app(), body.clone()).await;
        assert_eq!(s, status, "{body}: {v}");
        assert_eq!(v["field"].as_str(), field, "{body}: {v}");
    }
    for raw in ["{", r#"{"query_id": 0, "mode": "sideways"}"#, r#"{"query_id": 0, "mode": "raw", "extra": 1}"#] {
        let req = Request::post("/api/retrieve")
            .header("content-type", "application/json")
            .body(Body::from(raw))
            .unwrap();
        let (s, _, _) = call(app(), req).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{raw}");
    }
}

#[tokio::test]
async fn cors_is_permissive() {
    let req = Request::get("/api/health")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert_eq!(resp.headers().get("access-control-allow-origin").unwrap(), "*");
}
