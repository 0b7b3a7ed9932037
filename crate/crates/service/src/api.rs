//! HTTP+JSON routes over a [`SessionManager`].
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | create, blank or from a base64 PNG |
//! | GET | `/sessions/{id}` | canvas PNG and history |
//! | POST | `/sessions/{id}/edits` | run one edit |
//! | GET | `/sessions/{id}/telemetry` | per-edit telemetry |
//! | GET | `/sessions/{id}/history` | replayable JSON export |
//! | GET | `/sessions/{id}/events` | server-sent progress ticks |
//! | GET | `/model` | variant and configuration |
//!
//! Images travel as base64 PNG strings. A mask is either `mask_rle`
//! (`{height, width, runs}`, runs alternate starting with unset pixels) or
//! `mask_png`, a grayscale PNG where nonzero pixels are holes.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use lazydiff::diffusion::SamplerOpts;
use lazydiff::pipeline::Telemetry;
use lazydiff::raster::{Mask, MaskRle, RgbImage};
use lazydiff::session::{CanvasInit, EditRecord, HistoryExport, SessionManager};
use lazydiff::Error;

const PROGRESS_BUFFER: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Progress {
    Step { step: usize, total: usize, t: usize },
    Done { edit_index: usize },
    Failed { message: String },
}

#[derive(Clone)]
pub struct AppState {
    pub sessions: Arc<SessionManager>,
    channels: Arc<Mutex<HashMap<String, broadcast::Sender<Progress>>>>,
}

impl AppState {
    pub fn new(sessions: Arc<SessionManager>) -> Self {
        Self {
            sessions,
            channels: Arc::default(),
        }
    }

    fn channel(&self, id: &str) -> broadcast::Sender<Progress> {
        self.channels
            .lock()
            .expect("channel map poisoned")
            .entry(id.to_string())
            .or_insert_with(|| broadcast::channel(PROGRESS_BUFFER).0)
            .clone()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/model", get(model_info))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/edits", post(post_edit))
        .route("/sessions/{id}/telemetry", get(get_telemetry))
        .route("/sessions/{id}/history", get(get_history))
        .route("/sessions/{id}/events", get(events))
        .with_state(state)
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::UnknownSession(_) => StatusCode::NOT_FOUND,
            Error::Busy(_) => StatusCode::CONFLICT,
            Error::Shape(_)
            | Error::Config(_)
            | Error::Mask(_)
            | Error::Index(_)
            | Error::EmptyHole
            | Error::Invalid(_)
            | Error::Image(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn unb64(s: &str, field: &str) -> Result<Vec<u8>, Error> {
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Invalid(format!("{field}: {e}")))
}

async fn model_info(State(st): State<AppState>) -> Json<serde_json::Value> {
    let m = st.sessions.model();
    Json(serde_json::json!({
        "variant": m.variant(),
        "config": m.config,
        "classes": m.config.decoder.classes,
    }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub size: Option<usize>,
    pub image_png: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub size: usize,
}

async fn create_session(State(st): State<AppState>, body: Option<Json<CreateSession>>) -> ApiResult<Created> {
    let req = body.map(|b| b.0).unwrap_or_default();
    let size = req.size.unwrap_or(st.sessions.model().config.canvas);
    let init = match &req.image_png {
        Some(s) => CanvasInit::Image(RgbImage::from_png_bytes(&unb64(s, "image_png")?)?),
        None => CanvasInit::Blank,
    };
    let id = st.sessions.create(size, init)?;
    Ok(Json(Created { id, size }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub canvas_png: String,
    pub history: Vec<EditRecord>,
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionView> {
    let s = st.sessions.get_state(&id)?;
    Ok(Json(SessionView {
        id: s.id,
        canvas_png: b64(&s.canvas.to_png_bytes()?),
        history: s.history,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditBody {
    pub mask_rle: Option<MaskRle>,
    pub mask_png: Option<String>,
    pub label: usize,
    #[serde(default)]
    pub seed: u64,
    pub steps: Option<usize>,
    pub guidance: Option<f64>,
    pub sdedit_strength: Option<f64>,
}

impl EditBody {
    pub fn mask(&self) -> Result<Mask, Error> {
        match (&self.mask_rle, &self.mask_png) {
            (Some(rle), None) => Mask::from_rle(rle),
            (None, Some(png)) => Mask::from_png_bytes(&unb64(png, "mask_png")?),
            _ => Err(Error::Invalid("give exactly one of mask_rle and mask_png".into())),
        }
    }

    pub fn opts(&self) -> SamplerOpts {
        let d = SamplerOpts::default();
        SamplerOpts {
            steps: self.steps.unwrap_or(d.steps),
            guidance_scale: self.guidance.unwrap_or(d.guidance_scale),
            seed: self.seed,
            sdedit_strength: self.sdedit_strength.unwrap_or(d.sdedit_strength),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditResponse {
    pub edit_index: usize,
    pub canvas_png: String,
    pub patch_png: String,
    pub mask_rle: MaskRle,
    pub telemetry: Telemetry,
}

async fn post_edit(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<EditBody>,
) -> ApiResult<EditResponse> {
    if !st.sessions.contains(&id) {
        return Err(Error::UnknownSession(id).into());
    }
    let mask = body.mask()?;
    let opts = body.opts();
    let tx = st.channel(&id);
    let sessions = st.sessions.clone();
    let job = tokio::task::spawn_blocking(move || {
        let res = sessions.apply_edit(&id, &mask, body.label, opts, &mut |tick| {
            let _ = tx.send(Progress::Step {
                step: tick.step,
                total: tick.total,
                t: tick.t,
            });
        });
        let res = res.and_then(|(index, out)| {
            Ok(EditResponse {
                edit_index: index,
                canvas_png: b64(&out.canvas.to_png_bytes()?),
                patch_png: b64(&out.patch.to_png_bytes()?),
                mask_rle: mask.to_rle(),
                telemetry: out.telemetry,
            })
        });
        // A busy rejection says nothing about the edit still running.
        match &res {
            Ok(r) => drop(tx.send(Progress::Done { edit_index: r.edit_index })),
            Err(Error::Busy(_)) => {}
            Err(e) => drop(tx.send(Progress::Failed { message: e.to_string() })),
        }
        res
    });
    let out = job
        .await
        .map_err(|e| Error::Invalid(format!("edit worker failed: {e}")))??;
    Ok(Json(out))
}

async fn get_telemetry(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Vec<Telemetry>> {
    Ok(Json(st.sessions.telemetry(&id)?))
}

async fn get_history(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<HistoryExport> {
    Ok(Json(st.sessions.export_history(&id)?))
}

async fn events(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    if !st.sessions.contains(&id) {
        return Err(Error::UnknownSession(id).into());
    }
    let rx = st.channel(&id).subscribe();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(p) => {
                    let name = match p {
                        Progress::Step { .. } => "step",
                        Progress::Done { .. } => "done",
                        Progress::Failed { .. } => "failed",
                    };
                    let ev = Event::default().event(name).json_data(&p).expect("progress serializes");
                    return Some((Ok(ev), rx));
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}
