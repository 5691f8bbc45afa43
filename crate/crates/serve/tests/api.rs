use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use candle_core::{DType, Device};
use serde_json::{json, Value};
use tower::ServiceExt;

use stamp_core::geometry::{rasterize_panel, GeometryParams, RasterSpec, DESIGN_RANGES};
use stamp_core::materials::{build_family, write_material_set, MaterialFamily};
use stamp_model::checkpoint::{Checkpoint, CheckpointMeta};
use stamp_model::eval::predict_sample;
use stamp_model::{ModelConfig, StampFormer};
use stamp_serve::{router, AppState, Catalog, LoadedModel};

fn loaded(seed: u64) -> LoadedModel {
    let cfg = ModelConfig::grad_check();
    let model = StampFormer::new(&cfg, seed, DType::F32, &Device::Cpu).unwrap();
    let meta = CheckpointMeta {
        field: "thinning".into(),
        family: Some("aluminium".into()),
        pitch_mm: Some(2.0),
        ..Default::default()
    };
    let ck = Checkpoint::from_model(&model, meta, None).unwrap();
    LoadedModel::from_checkpoint(&ck, std::path::Path::new("mem.ckpt")).unwrap()
}

fn catalog(dir: &std::path::Path) -> Catalog {
    let curves = build_family(MaterialFamily::Aluminium, None, 2).unwrap();
    write_material_set(dir, MaterialFamily::Aluminium, &curves).unwrap();
    Catalog::load(dir).unwrap()
}

fn geometry() -> Value {
    let g = GeometryParams::midpoint(0);
    let mut m = serde_json::Map::new();
    for (r, v) in DESIGN_RANGES.iter().zip(g.values()) {
        m.insert(r.name.to_string(), json!(v));
    }
    Value::Object(m)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn request(material: Value) -> Value {
    json!({ "geometry": geometry(), "material": material, "field": "thinning" })
}

#[tokio::test]
async fn unloaded_service_reports_unavailable() {
    let app = router(Arc::new(AppState::new(vec![], Catalog::default())));
    assert_eq!(call(&app, "GET", "/health", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(&app, "GET", "/model-info", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let (s, body) = call(&app, "POST", "/predict", Some(request(json!({"curve": [[0.0, 100.0], [0.2, 200.0]]})))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE, "{body}");
    let (s, fields) = call(&app, "GET", "/fields", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(fields["fields"].as_array().unwrap().iter().all(|f| f["loaded"] == false));
}

#[tokio::test]
async fn metadata_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(AppState::new(vec![loaded(1)], catalog(dir.path()))));

    let (s, h) = call(&app, "GET", "/health", None).await;
    assert_eq!((s, h["models_loaded"].as_u64()), (StatusCode::OK, Some(1)));

    let (_, f) = call(&app, "GET", "/fields", None).await;
    let names: Vec<&str> = f["fields"].as_array().unwrap().iter().map(|x| x["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["thinning", "major", "minor", "plastic", "displacement"]);
    let params = f["parameters"].as_array().unwrap();
    assert_eq!(params.len(), 9);
    for (p, r) in params.iter().zip(DESIGN_RANGES.iter()) {
        assert_eq!(p["name"], r.name);
        assert_eq!((p["min"].as_f64().unwrap(), p["max"].as_f64().unwrap()), (r.min, r.max));
    }

    let (_, m) = call(&app, "GET", "/materials", None).await;
    assert_eq!(m["count"].as_u64(), Some(110));
    assert_eq!(m["materials"].as_array().unwrap().len(), 110);
    assert!(m["materials"][0]["preview"].as_array().unwrap().len() >= 10);

    let (s, info) = call(&app, "GET", "/model-info", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(info["models"][0]["field"], "thinning");
    assert_eq!(info["models"][0]["model_version"].as_str().unwrap().len(), 64);
}

#[tokio::test]
async fn predict_matches_offline_forward_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cat = catalog(dir.path());
    let curve = cat.get(7).unwrap().curve.clone();
    let m = loaded(1);
    let spec = RasterSpec::new(16, 16, 2.0).with_alignment(m.model.config.alignment());
    let hm = rasterize_panel(&GeometryParams::midpoint(0), &spec).unwrap();
    let offline = predict_sample(&m.model, &hm, &curve, false).unwrap();
    let app = router(Arc::new(AppState::new(vec![m], cat)));

    let (s, a) = call(&app, "POST", "/predict", Some(request(json!({"material_id": 7})))).await;
    assert_eq!(s, StatusCode::OK, "{a}");
    assert_eq!((a["height"].as_u64(), a["width"].as_u64(), a["channels"].as_u64()), (Some(16), Some(16), Some(1)));
    let bytes = B64.decode(a["data"].as_str().unwrap()).unwrap();
    assert_eq!(bytes.len(), 16 * 16 * 4);
    let served: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let expected: Vec<f32> = offline.as_slice().iter().map(|&v| v as f32).collect();
    assert_eq!(served, expected);
    let mask = B64.decode(a["mask"].as_str().unwrap()).unwrap();
    assert_eq!(mask, hm.valid_mask.cells().iter().map(|&v| v as u8).collect::<Vec<_>>());
    let rep = stamp_core::metrics::representative_max(&offline, &hm.valid_mask).unwrap();
    assert_eq!(a["summary"]["representative_max"].as_f64().unwrap(), rep);
    assert!(a["summary"]["inference_ms"].as_f64().unwrap() >= 0.0);

    let (_, b) = call(&app, "POST", "/predict", Some(request(json!({"material_id": 7})))).await;
    assert_eq!(a["data"], b["data"]);

    let tasks: Vec<_> = (0..4)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move { call(&app, "POST", "/predict", Some(request(json!({"material_id": 7})))).await.1 })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap()["data"], a["data"]);
    }

    let points: Vec<[f64; 2]> = curve.points().map(|(e, s)| [e, s]).collect();
    let (s, c) = call(&app, "POST", "/predict", Some(request(json!({"curve": points})))).await;
    assert_eq!(s, StatusCode::OK, "{c}");
    assert_eq!(c["data"], a["data"]);
}

#[tokio::test]
async fn predict_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(AppState::new(vec![loaded(1)], catalog(dir.path()))));

    let (s, e) = call(&app, "POST", "/predict", Some(request(json!({"material_id": 1, "curve": [[0.0, 1.0]]})))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["details"][0]["field"], "material");

    let mut req = request(json!({"material_id": 1}));
    req["geometry"].as_object_mut().unwrap().remove("r1_mm");
    req["geometry"]["draft_angle_deg"] = json!(95.0);
    req["field"] = json!("stress");
    let (s, e) = call(&app, "POST", "/predict", Some(req)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let fields: Vec<&str> = e["details"].as_array().unwrap().iter().map(|d| d["field"].as_str().unwrap()).collect();
    assert!(fields.contains(&"field") && fields.contains(&"geometry.r1_mm"), "{fields:?}");

    let mut req = request(json!({"material_id": 1}));
    req["geometry"]["r2_mm"] = json!(-1.0);
    let (s, e) = call(&app, "POST", "/predict", Some(req)).await;
    assert_eq!((s, e["details"][0]["field"].as_str()), (StatusCode::BAD_REQUEST, Some("geometry.r2_mm")));

    let mut req = request(json!({"material_id": 1}));
    req["options"] = json!({"denoise": true});
    assert_eq!(call(&app, "POST", "/predict", Some(req)).await.0, StatusCode::BAD_REQUEST);

    let (s, _) = call(&app, "POST", "/predict", Some(request(json!({"material_id": 99999})))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let mut req = request(json!({"material_id": 1}));
    req["field"] = json!("major");
    assert_eq!(call(&app, "POST", "/predict", Some(req)).await.0, StatusCode::SERVICE_UNAVAILABLE);

    let resp = app
        .clone()
        .oneshot(Request::post("/predict").body(Body::from("{not json")).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn png_mode_and_out_of_range_warning() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(AppState::new(vec![loaded(1)], catalog(dir.path()))));
    let mut req = request(json!({"material_id": 3}));
    req["options"] = json!({"return_format": "png_heatmap"});
    req["geometry"]["r4_mm"] = json!(70.0);
    let (s, r) = call(&app, "POST", "/predict", Some(req)).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    let png = B64.decode(r["data"].as_str().unwrap()).unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    let range = r["range"].as_array().unwrap();
    assert!(range[0].as_f64().unwrap() <= range[1].as_f64().unwrap());
    assert_eq!(r["warnings"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn hot_swap_changes_served_model() {
    let dir = tempfile::tempdir().unwrap();
    let state = Arc::new(AppState::new(vec![loaded(1)], catalog(dir.path())));
    let app = router(state.clone());
    let (_, before) = call(&app, "GET", "/model-info", None).await;
    state.swap_models(vec![loaded(2)]);
    let (_, after) = call(&app, "GET", "/model-info", None).await;
    assert_ne!(before["models"][0]["model_version"], after["models"][0]["model_version"]);
    let (s, _) = call(&app, "POST", "/predict", Some(request(json!({"material_id": 3})))).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn loads_checkpoints_from_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("thinning");
    std::fs::create_dir_all(&run).unwrap();
    let model = StampFormer::new(&ModelConfig::grad_check(), 4, DType::F32, &Device::Cpu).unwrap();
    let meta = CheckpointMeta {
        field: "thinning".into(),
        ..Default::default()
    };
    let ck = Checkpoint::from_model(&model, meta, None).unwrap();
    ck.save(&run.join("best.ckpt")).unwrap();
    ck.save(&run.join("last.ckpt")).unwrap();
    catalog(&dir.path().join("materials"));
    let state = Arc::new(AppState::from_dirs(dir.path(), None).unwrap());
    assert_eq!(state.models().len(), 1);
    assert!(state.models()[0].path.ends_with("best.ckpt"));
    assert_eq!(state.catalog().materials.len(), 110);

    let app = router(state);
    let (s, info) = call(&app, "POST", "/admin/reload", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(info["models"][0]["model_version"].as_str().unwrap(), ck.model_version());
}
