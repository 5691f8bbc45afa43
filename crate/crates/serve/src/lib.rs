//! HTTP inference service: `/predict`, `/materials`, `/fields`, `/health`
//! and `/model-info` over checkpoints loaded at start-up.

pub mod api;
pub mod state;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use stamp_core::figures;
use stamp_core::geometry::{rasterize_panel, GeometryParams, RasterSpec, PARAM_COUNT, DESIGN_RANGES};
use stamp_core::materials::{resample_curve, StressStrainCurve};
use stamp_core::metrics;
use stamp_core::oracle::Field;
use stamp_core::postproc::{denoise_displacement, DenoiseConfig};
use stamp_core::{Grid, Mask};
use stamp_model::eval::predict_sample;

use api::*;
pub use state::{AppState, Catalog, LoadedModel};

pub const DEFAULT_PORT: u16 = 8080;
const PREVIEW_POINTS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("failed to load: {0}")]
    Load(String),
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(Vec<FieldError>),
    NotFound(String),
    Unavailable(String),
    Internal(String),
}

impl ApiError {
    fn bad(field: &str, message: impl Into<String>) -> Self {
        ApiError::BadRequest(vec![FieldError {
            field: field.to_string(),
            message: message.into(),
        }])
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ApiError::BadRequest(details) => {
                let parts: Vec<String> = details.iter().map(|d| format!("{}: {}", d.field, d.message)).collect();
                write!(f, "{}", parts.join("; "))
            }
            ApiError::NotFound(m) | ApiError::Unavailable(m) | ApiError::Internal(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for ApiError {}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::BadRequest(details) => (
                StatusCode::BAD_REQUEST,
                ErrorBody {
                    error: "invalid request".into(),
                    details,
                },
            ),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, ErrorBody { error: m, details: vec![] }),
            ApiError::Unavailable(m) => (StatusCode::SERVICE_UNAVAILABLE, ErrorBody { error: m, details: vec![] }),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, ErrorBody { error: m, details: vec![] }),
        };
        (status, Json(body)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/predict", post(predict_handler))
        .route("/materials", get(materials_handler))
        .route("/fields", get(fields_handler))
        .route("/health", get(health_handler))
        .route("/model-info", get(model_info_handler))
        .route("/admin/reload", post(reload_handler))
        .with_state(state)
}

/// Adds a static file tree (e.g. a built front end) behind the API routes.
pub fn with_static(router: Router, dir: PathBuf) -> Router {
    router.fallback_service(tower_http::services::ServeDir::new(dir))
}

pub async fn serve(router: Router, addr: SocketAddr) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn require_models(state: &AppState) -> Result<(), ApiError> {
    if state.models().is_empty() {
        Err(ApiError::Unavailable("no checkpoint loaded".into()))
    } else {
        Ok(())
    }
}

async fn health_handler(State(state): State<Arc<AppState>>) -> Response {
    let n = state.models().len();
    let status = if n == 0 { StatusCode::SERVICE_UNAVAILABLE } else { StatusCode::OK };
    let body = HealthResponse {
        status: if n == 0 { "no models loaded".into() } else { "ok".into() },
        models_loaded: n,
    };
    (status, Json(body)).into_response()
}

pub fn fields_info(state: &AppState) -> FieldsResponse {
    let models = state.models();
    FieldsResponse {
        fields: Field::ALL
            .iter()
            .map(|&f| FieldInfo {
                name: f.as_str().into(),
                unit: f.unit().into(),
                channels: f.channels(),
                loaded: models.iter().any(|m| m.field == f),
            })
            .collect(),
        parameters: DESIGN_RANGES
            .iter()
            .map(|r| ParameterInfo {
                name: r.name.into(),
                unit: r.unit.into(),
                min: r.min,
                max: r.max,
            })
            .collect(),
    }
}

async fn fields_handler(State(state): State<Arc<AppState>>) -> Json<FieldsResponse> {
    Json(fields_info(&state))
}

fn preview(curve: &StressStrainCurve) -> Vec<[f64; 2]> {
    let n = curve.strains.len();
    let step = (n.saturating_sub(1) as f64 / (PREVIEW_POINTS - 1) as f64).max(1.0);
    let mut idx: Vec<usize> = (0..PREVIEW_POINTS).map(|i| ((i as f64 * step).round() as usize).min(n - 1)).collect();
    idx.dedup();
    idx.into_iter().map(|i| [curve.strains[i], curve.stresses[i]]).collect()
}

async fn materials_handler(State(state): State<Arc<AppState>>) -> Json<MaterialsResponse> {
    let catalog = state.catalog();
    let materials: Vec<MaterialEntry> = catalog
        .materials
        .iter()
        .map(|m| MaterialEntry {
            material_id: m.record.material_id,
            cluster: m.record.cluster,
            family: m.record.family.map(|f| f.as_str().to_string()),
            preview: preview(&m.curve),
        })
        .collect();
    Json(MaterialsResponse {
        count: materials.len(),
        materials,
    })
}

pub fn model_info(state: &AppState) -> ModelInfoResponse {
    ModelInfoResponse {
        models: state
            .models()
            .iter()
            .map(|m| ModelEntry {
                field: m.field.as_str().into(),
                family: m.family.clone(),
                model_version: m.version.clone(),
                path: m.path.display().to_string(),
                epoch: m.epoch,
                height: m.model.config.grid_height,
                width: m.model.config.grid_width,
                pitch_mm: m.pitch_mm,
                num_params: m.model.params.num_params(),
            })
            .collect(),
    }
}

async fn model_info_handler(State(state): State<Arc<AppState>>) -> Result<Json<ModelInfoResponse>, ApiError> {
    require_models(&state)?;
    Ok(Json(model_info(&state)))
}

async fn reload_handler(State(state): State<Arc<AppState>>) -> Result<Json<ModelInfoResponse>, ApiError> {
    let dir = state
        .checkpoint_dir
        .clone()
        .ok_or_else(|| ApiError::Unavailable("service was not started from a checkpoint directory".into()))?;
    let models = tokio::task::spawn_blocking(move || state::load_models(&dir))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    state.swap_models(models);
    Ok(Json(model_info(&state)))
}

async fn predict_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<PredictResponse>, ApiError> {
    let req: PredictRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad("body", e.to_string()))?;
    let resp = tokio::task::spawn_blocking(move || predict(&state, &req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(resp))
}

/// Checks the nine geometry values one by one.
pub fn parse_geometry(map: &serde_json::Map<String, serde_json::Value>) -> Result<(GeometryParams, Vec<String>), Vec<FieldError>> {
    let mut errors = Vec::new();
    let mut values = [0.0; PARAM_COUNT];
    for (slot, r) in values.iter_mut().zip(DESIGN_RANGES.iter()) {
        let key = format!("geometry.{}", r.name);
        match map.get(r.name) {
            None => errors.push(FieldError {
                field: key,
                message: "missing".into(),
            }),
            Some(v) => match v.as_f64() {
                None => errors.push(FieldError {
                    field: key,
                    message: format!("must be a number, got {v}"),
                }),
                Some(x) => *slot = x,
            },
        }
    }
    for k in map.keys() {
        if !DESIGN_RANGES.iter().any(|r| r.name == k) {
            errors.push(FieldError {
                field: format!("geometry.{k}"),
                message: "unknown parameter".into(),
            });
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    for (x, r) in values.iter().zip(DESIGN_RANGES.iter()) {
        let bad = if r.name == "draft_angle_deg" {
            !(*x > 0.0 && *x < 90.0)
        } else {
            *x < 0.0
        };
        if bad {
            let rule = if r.name == "draft_angle_deg" { "must lie in (0, 90)" } else { "must be non-negative" };
            errors.push(FieldError {
                field: format!("geometry.{}", r.name),
                message: format!("{rule}, got {x}"),
            });
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    let params = GeometryParams::from_values(0, values);
    let warnings = params.range_warnings();
    Ok((params, warnings))
}

fn resolve_curve(state: &AppState, spec: &MaterialSpec) -> Result<StressStrainCurve, ApiError> {
    match (spec.material_id, &spec.curve) {
        (Some(_), Some(_)) => Err(ApiError::bad("material", "give either material_id or curve, not both")),
        (None, None) => Err(ApiError::bad("material", "material_id or curve is required")),
        (None, Some(points)) => {
            let raw: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
            resample_curve(&raw).map_err(|e| ApiError::bad("material.curve", e.to_string()))
        }
        (Some(id), None) => state
            .catalog()
            .get(id)
            .map(|m| m.curve.clone())
            .ok_or_else(|| ApiError::NotFound(format!("unknown material_id {id}"))),
    }
}

/// Per-cell magnitude for multi-channel fields, the grid itself otherwise.
pub fn scalar_view(grid: &Grid) -> Grid {
    if grid.channels() == 1 {
        return grid.clone();
    }
    let full = Mask::full(grid.height(), grid.width());
    let values = metrics::cell_values(grid, &full).expect("full mask matches grid");
    Grid::from_vec(grid.height(), grid.width(), 1, values).expect("one value per cell")
}

pub struct Inference {
    pub grid: Grid,
    /// The blank mask, eroded when de-noising was applied.
    pub mask: Mask,
    pub summary: PredictSummary,
}

/// Rasterises `params` at the model's grid and pitch, runs the forward pass
/// and optionally de-noises; `inference_ms` covers all three.
pub fn infer(model: &LoadedModel, params: &GeometryParams, curve: &StressStrainCurve, denoise: bool) -> Result<Inference, ApiError> {
    let start = Instant::now();
    let cfg = &model.model.config;
    let spec = RasterSpec::new(cfg.grid_height, cfg.grid_width, model.pitch_mm).with_alignment(cfg.alignment());
    let hm = rasterize_panel(params, &spec).map_err(|e| ApiError::bad("geometry", e.to_string()))?;
    let mut grid = predict_sample(&model.model, &hm, curve, false).map_err(|e| ApiError::Internal(e.to_string()))?;
    let mut mask = hm.valid_mask.clone();
    if denoise {
        let (g, m) = denoise_displacement(&grid, &mask, &DenoiseConfig::default())
            .map_err(|e| ApiError::bad("options.denoise", e.to_string()))?;
        grid = g;
        mask = m;
    }
    let values = metrics::cell_values(&grid, &mask).map_err(|e| ApiError::Internal(e.to_string()))?;
    let representative_max = metrics::representative_max_of(&values).map_err(|e| ApiError::bad("geometry", e.to_string()))?;
    let inference_ms = start.elapsed().as_secs_f64() * 1e3;
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok(Inference {
        grid,
        mask,
        summary: PredictSummary {
            representative_max,
            min,
            max,
            inference_ms,
        },
    })
}

/// Rasterise, resample, forward, optionally de-noise and encode.
pub fn predict(state: &AppState, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
    let mut errors = Vec::new();
    let field = match req.field.parse::<Field>() {
        Ok(f) => Some(f),
        Err(e) => {
            errors.push(FieldError {
                field: "field".into(),
                message: e.to_string(),
            });
            None
        }
    };
    let geometry = match parse_geometry(&req.geometry) {
        Ok(g) => Some(g),
        Err(mut e) => {
            errors.append(&mut e);
            None
        }
    };
    if req.options.denoise && field.is_some_and(|f| f != Field::Displacement) {
        errors.push(FieldError {
            field: "options.denoise".into(),
            message: "de-noising applies to the displacement field only".into(),
        });
    }
    if !errors.is_empty() {
        return Err(ApiError::BadRequest(errors));
    }
    let (field, (params, warnings)) = (field.unwrap(), geometry.unwrap());
    let model = state.model_for(field, req.family.as_deref()).ok_or_else(|| {
        ApiError::Unavailable(match &req.family {
            Some(f) => format!("no checkpoint loaded for field {field}, family {f}"),
            None => format!("no checkpoint loaded for field {field}"),
        })
    })?;
    let curve = resolve_curve(state, &req.material)?;

    let Inference { grid, mask, summary } = infer(&model, &params, &curve, req.options.denoise)?;
    let (data, range) = match req.options.return_format {
        ReturnFormat::FloatGrid => (B64.encode(stamp_core::grid::f32_le_bytes(grid.as_slice())), None),
        ReturnFormat::PngHeatmap => {
            let scalar = scalar_view(&grid);
            let range = figures::value_range(&scalar, &mask);
            let png = figures::encode_png(&figures::heatmap(&scalar, &mask, Some(range)))
                .map_err(|e| ApiError::Internal(e.to_string()))?;
            (B64.encode(png), Some([range.0, range.1]))
        }
    };
    let mask_bytes: Vec<u8> = mask.cells().iter().map(|&v| v as u8).collect();
    Ok(PredictResponse {
        field: field.as_str().into(),
        unit: field.unit().into(),
        height: grid.height(),
        width: grid.width(),
        channels: grid.channels(),
        pitch_mm: model.pitch_mm,
        format: req.options.return_format,
        data,
        range,
        mask: B64.encode(mask_bytes),
        summary,
        denoised: req.options.denoise,
        model_version: model.version.clone(),
        warnings,
    })
}
