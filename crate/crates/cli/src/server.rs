//! HTTP render service over a loaded scene.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sunsplat_core::shading::Sun;

use crate::render::{parse_component, Output, RenderRequest, Renderer, View};

pub const BOUNDARY: &str = "sunsplat-part";

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SunField {
    Mode(String),
    Direction { dir: [f64; 3] },
}

/// JSON body of `POST /render`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderBody {
    camera_id: Option<usize>,
    pose: Option<Vec<f64>>,
    image_id_a: usize,
    image_id_b: Option<usize>,
    t: Option<f64>,
    components: Option<Vec<String>>,
    sun: Option<SunField>,
    outputs: Option<Vec<String>>,
}

impl RenderBody {
    fn into_request(self) -> Result<RenderRequest, String> {
        let view = match (self.pose, self.camera_id) {
            (Some(p), cam) => {
                let pose: [f64; 12] = p
                    .as_slice()
                    .try_into()
                    .map_err(|_| format!("pose needs 12 numbers, got {}", p.len()))?;
                View::Pose {
                    pose,
                    intrinsics: cam.unwrap_or(0),
                }
            }
            (None, Some(c)) => View::Camera(c),
            (None, None) => return Err("either camera_id or pose is required".into()),
        };
        let outputs = match self.outputs {
            Some(o) => o.iter().map(|s| Output::from_name(s)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?,
            None => vec![Output::Composite],
        };
        let mut req = RenderRequest::new(view, self.image_id_a, outputs);
        req.image_b = self.image_id_b;
        req.t = self.t.unwrap_or(0.0);
        if let Some(c) = self.components {
            req.components = c.iter().map(|s| parse_component(s)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
        }
        req.sun = match self.sun {
            None => None,
            Some(SunField::Mode(m)) if m == "cloudy" => Some(Sun::Cloudy),
            Some(SunField::Mode(m)) => return Err(format!("unknown sun mode {m:?}")),
            Some(SunField::Direction { dir }) => Some(Sun::Direction(dir)),
        };
        Ok(req)
    }
}

#[derive(Debug, Serialize)]
struct CameraMeta {
    id: usize,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    pose: [f64; 12],
}

#[derive(Debug, Serialize)]
struct ImageMeta {
    id: usize,
    sunny: bool,
}

fn error(status: StatusCode, reason: impl Into<String>) -> Response {
    (status, Json(json!({ "error": reason.into() }))).into_response()
}

/// `multipart/mixed` body: one JSON part, then one PNG per output.
pub fn multipart(meta: &serde_json::Value, parts: &[(&str, Vec<u8>)]) -> Vec<u8> {
    let mut body = Vec::new();
    let mut part = |headers: String, data: &[u8]| {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n{headers}\r\n").as_bytes());
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    };
    part("Content-Type: application/json\r\nContent-Disposition: inline; name=\"meta\"\r\n".into(), meta.to_string().as_bytes());
    for (name, png) in parts {
        part(
            format!("Content-Type: image/png\r\nContent-Disposition: inline; name=\"{name}\"; filename=\"{name}.png\"\r\n"),
            png,
        );
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

async fn healthz() -> &'static str {
    "ok"
}

async fn meta(State(r): State<Arc<Renderer>>) -> Json<serde_json::Value> {
    let s = r.scene();
    let cameras: Vec<CameraMeta> = s
        .cameras
        .iter()
        .enumerate()
        .map(|(id, c)| CameraMeta {
            id,
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            pose: c.pose(),
        })
        .collect();
    let images: Vec<ImageMeta> = s.embeddings.iter().enumerate().map(|(id, e)| ImageMeta { id, sunny: e.sunny }).collect();
    Json(json!({
        "gaussians": s.len(),
        "stage": format!("{:?}", s.stage).to_lowercase(),
        "baked": r.is_baked(),
        "images": images,
        "cameras": cameras,
        "outputs": Output::ALL.map(|o| o.name()),
    }))
}

async fn render(State(r): State<Arc<Renderer>>, body: Bytes) -> Response {
    let parsed: RenderBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("bad request body: {e}")),
    };
    let req = match parsed.into_request() {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let result = tokio::task::spawn_blocking(move || {
        let start = Instant::now();
        let images = r.render(&req)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let pngs = images
            .iter()
            .map(|(o, img)| Ok((o.name(), img.to_png_bytes()?)))
            .collect::<sunsplat_core::Result<Vec<_>>>()?;
        Ok::<_, sunsplat_core::Error>((pngs, ms))
    })
    .await;
    match result {
        Ok(Ok((pngs, ms))) => {
            let names: Vec<&str> = pngs.iter().map(|(n, _)| *n).collect();
            let body = multipart(&json!({ "render_ms": ms, "outputs": names }), &pngs);
            (
                [
                    (header::CONTENT_TYPE, format!("multipart/mixed; boundary={BOUNDARY}")),
                    (header::HeaderName::from_static("x-render-ms"), format!("{ms:.3}")),
                ],
                body,
            )
                .into_response()
        }
        Ok(Err(e)) if crate::is_input_error(&e) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {e}")),
    }
}

pub fn router(renderer: Arc<Renderer>, ui_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/healthz", get(healthz))
        .route("/scene/meta", get(meta))
        .route("/render", post(render));
    if let Some(dir) = ui_dir {
        app = app.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    app.with_state(renderer)
}

/// Binds, reports the bound address on stdout, then serves until killed.
pub async fn serve(renderer: Arc<Renderer>, addr: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    println!("listening on http://{local}");
    log::info!("serving {} gaussians on {local}", renderer.scene().len());
    axum::serve(listener, router(renderer, ui_dir)).await
}
