//! Session-based HTTP API under `/v1`.
//!
//! Each session owns a clip and, per object, the prompt history, a tracker
//! with its memory and the latest mask of every frame. Requests for one
//! session are serialized: a request that finds the session busy gets 409
//! instead of waiting. Inference runs on the blocking pool.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{FromRequest, Multipart, Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::OwnedMutexGuard;
use vidseg_autograd::Array;
use vidseg_core::data::{read_clip, read_manifest, VideoClip};
use vidseg_core::model::{Model, Tracker};
use vidseg_core::rle::{self, Rle};
use vidseg_core::{BoxXyxy, Mask, Prompt};

pub const IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);
const MAX_UPLOAD_BYTES: usize = 64 << 20;
const MAX_OBJECTS: usize = 64;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn invalid(field: &str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
            field: Some(field.to_string()),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl From<vidseg_core::Error> for ApiError {
    fn from(e: vidseg_core::Error) -> Self {
        if e.is_validation() {
            Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
        } else {
            Self::internal(e.to_string())
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = match &self.field {
            Some(f) => json!({ "error": self.message, "field": f }),
            None => json!({ "error": self.message }),
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug)]
struct ObjectState {
    prompts: BTreeMap<usize, Vec<Prompt>>,
    tracker: Tracker,
    masks: Vec<Mask>,
}

#[derive(Debug)]
pub struct Session {
    id: String,
    clip: VideoClip,
    objects: BTreeMap<usize, ObjectState>,
}

impl Session {
    fn info(&self) -> Value {
        json!({
            "id": self.id,
            "n": self.clip.num_frames(),
            "h": self.clip.height(),
            "w": self.clip.width(),
        })
    }

    fn object(&mut self, o: usize) -> ApiResult<&mut ObjectState> {
        self.objects
            .get_mut(&o)
            .ok_or_else(|| ApiError::not_found(format!("object {o} has no prompts in this session")))
    }

    fn check_frame(&self, field: &str, t: usize) -> ApiResult<()> {
        let n = self.clip.num_frames();
        if t >= n {
            return Err(ApiError::invalid(field, format!("{field}={t} is outside the clip (must be < {n})")));
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Slot {
    session: Arc<tokio::sync::Mutex<Session>>,
    last_used: Mutex<Instant>,
}

#[derive(Clone, Debug)]
pub struct AppState {
    model: Arc<Model>,
    data_root: Option<PathBuf>,
    idle_timeout: Duration,
    sessions: Arc<Mutex<HashMap<String, Arc<Slot>>>>,
}

impl AppState {
    pub fn new(model: Arc<Model>, data_root: Option<PathBuf>, idle_timeout: Duration) -> Self {
        Self {
            model,
            data_root,
            idle_timeout,
            sessions: Arc::default(),
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Claims exclusive use of a session, or fails with 404 / 409.
    pub fn try_begin(&self, id: &str) -> Result<OwnedMutexGuard<Session>, ApiError> {
        let slot = self
            .sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))?;
        *slot.last_used.lock().unwrap() = Instant::now();
        Arc::clone(&slot.session)
            .try_lock_owned()
            .map_err(|_| ApiError::new(StatusCode::CONFLICT, format!("session {id} is busy with another request")))
    }

    fn insert(&self, clip: VideoClip) -> Value {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session {
            id: id.clone(),
            clip,
            objects: BTreeMap::new(),
        };
        let info = session.info();
        let slot = Slot {
            session: Arc::new(tokio::sync::Mutex::new(session)),
            last_used: Mutex::new(Instant::now()),
        };
        self.sessions.lock().unwrap().insert(id, Arc::new(slot));
        info
    }

    /// Drops sessions idle for longer than the timeout as of `now`. Busy
    /// sessions are kept. Returns how many were removed.
    pub fn evict_idle(&self, now: Instant) -> usize {
        let mut sessions = self.sessions.lock().unwrap();
        let before = sessions.len();
        sessions.retain(|_, slot| {
            let idle = now.saturating_duration_since(*slot.last_used.lock().unwrap());
            idle <= self.idle_timeout || slot.session.try_lock().is_err()
        });
        before - sessions.len()
    }
}

pub async fn evict_periodically(state: AppState, every: Duration) {
    let mut interval = tokio::time::interval(every);
    loop {
        interval.tick().await;
        let removed = state.evict_idle(Instant::now());
        if removed > 0 {
            tracing::info!(removed, "evicted idle sessions");
        }
    }
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/frames/{t}", get(frame_png))
        .route("/sessions/{id}/objects/{o}/prompts", post(add_prompt))
        .route("/sessions/{id}/objects/{o}/propagate", post(propagate))
        .route("/sessions/{id}/objects/{o}/masks/{t}", get(get_mask));
    Router::new().nest("/v1", api).with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("inference task failed: {e}")))
}

fn parse_json(body: &[u8]) -> ApiResult<Value> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid("body", format!("body is not valid JSON: {e}")))
}

fn field<'a>(obj: &'a Value, path: &str, name: &str) -> ApiResult<&'a Value> {
    obj.get(name)
        .ok_or_else(|| ApiError::invalid(path, format!("missing field {path}")))
}

fn uint(obj: &Value, path: &str, name: &str) -> ApiResult<usize> {
    let v = field(obj, path, name)?;
    v.as_u64()
        .and_then(|u| usize::try_from(u).ok())
        .ok_or_else(|| ApiError::invalid(path, format!("{path} must be a non-negative integer, got {v}")))
}

async fn create_session(State(state): State<AppState>, headers: HeaderMap, req: Request) -> ApiResult<impl IntoResponse> {
    let multipart = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let clip = if multipart {
        let form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::invalid("frames", e.body_text()))?;
        clip_from_upload(form).await?
    } else {
        let body = to_bytes(req.into_body(), MAX_UPLOAD_BYTES)
            .await
            .map_err(|e| ApiError::invalid("body", e.to_string()))?;
        let v = parse_json(&body)?;
        let id = field(&v, "clip", "clip")?
            .as_str()
            .ok_or_else(|| ApiError::invalid("clip", "clip must be a dataset clip id string"))?
            .to_string();
        let root = state
            .data_root
            .clone()
            .ok_or_else(|| ApiError::invalid("clip", "the server was started without a dataset directory"))?;
        blocking(move || -> ApiResult<VideoClip> {
            let manifest = read_manifest(&root)?;
            let entry = manifest
                .clips
                .iter()
                .find(|e| e.id == id)
                .ok_or_else(|| ApiError::invalid("clip", format!("no clip {id} in the dataset")))?;
            Ok(read_clip(&root, entry)?.clip)
        })
        .await??
    };
    Ok((StatusCode::CREATED, Json(state.insert(clip))))
}

/// Every multipart part is one frame image, in upload order.
async fn clip_from_upload(mut form: Multipart) -> ApiResult<VideoClip> {
    let mut frames: Vec<image::RgbImage> = Vec::new();
    while let Some(part) = form.next_field().await.map_err(|e| ApiError::invalid("frames", e.body_text()))? {
        let k = frames.len();
        let bytes = part.bytes().await.map_err(|e| ApiError::invalid("frames", e.body_text()))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| ApiError::invalid("frames", format!("frame {k} is not a readable image: {e}")))?
            .to_rgb8();
        if let Some(first) = frames.first() {
            if first.dimensions() != img.dimensions() {
                return Err(ApiError::invalid(
                    "frames",
                    format!("frame {k} is {:?} but frame 0 is {:?}", img.dimensions(), first.dimensions()),
                ));
            }
        }
        frames.push(img);
    }
    let Some(first) = frames.first() else {
        return Err(ApiError::invalid("frames", "upload contained no frames"));
    };
    let (w, h) = (first.width() as usize, first.height() as usize);
    let n = frames.len();
    let mut data = vec![0.0; n * 3 * h * w];
    for (t, img) in frames.iter().enumerate() {
        for (x, y, px) in img.enumerate_pixels() {
            for ch in 0..3 {
                data[((t * 3 + ch) * h + y as usize) * w + x as usize] = px[ch] as f64 / 255.0;
            }
        }
    }
    Ok(VideoClip::new(Array::from_vec(&[n, 3, h, w], data))?)
}

#[derive(Serialize)]
struct ObjectHistory {
    object: usize,
    prompts: BTreeMap<usize, Vec<Prompt>>,
}

async fn session_info(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = state.try_begin(&id)?;
    let mut info = session.info();
    let objects: Vec<ObjectHistory> = session
        .objects
        .iter()
        .map(|(&object, s)| ObjectHistory {
            object,
            prompts: s.prompts.clone(),
        })
        .collect();
    info["objects"] = serde_json::to_value(objects).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(info))
}

async fn delete_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let _guard = state.try_begin(&id)?;
    state.sessions.lock().unwrap().remove(&id);
    Ok(StatusCode::NO_CONTENT)
}

async fn frame_png(State(state): State<AppState>, Path((id, t)): Path<(String, usize)>) -> ApiResult<Response> {
    let session = state.try_begin(&id)?;
    session.check_frame("t", t)?;
    let (h, w) = (session.clip.height(), session.clip.width());
    let frame = session.clip.frame(t);
    let channels = session.clip.channels();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let ch = ch.min(channels - 1);
            (frame.data()[(ch * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    let mut png = Vec::new();
    img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Body::from(Bytes::from(png))).into_response())
}

/// Reads `{frame, kind, payload}` with field-level errors.
pub fn parse_prompt(body: &Value, h: usize, w: usize, n: usize) -> Result<(usize, Prompt), ApiError> {
    let frame = uint(body, "frame", "frame")?;
    if frame >= n {
        return Err(ApiError::invalid("frame", format!("frame={frame} is outside the clip (must be < {n})")));
    }
    let kind = field(body, "kind", "kind")?;
    let payload = field(body, "payload", "payload")?;
    let prompt = match kind.as_str() {
        Some("click") => {
            let positive = match payload.get("polarity").map(|p| p.as_str()) {
                None | Some(Some("positive")) => true,
                Some(Some("negative")) => false,
                Some(_) => {
                    return Err(ApiError::invalid(
                        "payload.polarity",
                        "payload.polarity must be \"positive\" or \"negative\"",
                    ))
                }
            };
            Prompt::Click {
                x: uint(payload, "payload.x", "x")?,
                y: uint(payload, "payload.y", "y")?,
                positive,
            }
        }
        Some("box") => {
            let b = BoxXyxy {
                x0: uint(payload, "payload.x0", "x0")?,
                y0: uint(payload, "payload.y0", "y0")?,
                x1: uint(payload, "payload.x1", "x1")?,
                y1: uint(payload, "payload.y1", "y1")?,
            };
            if b.x0 > b.x1 || b.y0 > b.y1 {
                return Err(ApiError::invalid("payload", "box corners must satisfy x0 <= x1 and y0 <= y1"));
            }
            Prompt::Box(b)
        }
        Some("mask") => {
            let r: Rle = serde_json::from_value(payload.clone())
                .map_err(|e| ApiError::invalid("payload", format!("mask payload must be {{h, w, counts}}: {e}")))?;
            if (r.h, r.w) != (h, w) {
                return Err(ApiError::invalid("payload", format!("mask is {}x{} but frames are {h}x{w}", r.h, r.w)));
            }
            let mask = rle::decode(&r).map_err(|e| ApiError::invalid("payload.counts", e.to_string()))?;
            Prompt::Mask { mask }
        }
        _ => return Err(ApiError::invalid("kind", "kind must be one of \"click\", \"box\", \"mask\"")),
    };
    if let Err(e) = prompt.validate(h, w) {
        let msg = e.to_string();
        let name = msg.split('=').next().and_then(|s| s.rsplit(' ').next()).unwrap_or("payload");
        return Err(ApiError::invalid(&format!("payload.{name}"), msg));
    }
    Ok((frame, prompt))
}

fn object_index(o: usize) -> ApiResult<usize> {
    if o >= MAX_OBJECTS {
        return Err(ApiError::invalid("o", format!("object id {o} must be < {MAX_OBJECTS}")));
    }
    Ok(o)
}

async fn add_prompt(State(state): State<AppState>, Path((id, o)): Path<(String, usize)>, body: Bytes) -> ApiResult<Json<Value>> {
    let mut session = state.try_begin(&id)?;
    let o = object_index(o)?;
    let body = parse_json(&body)?;
    let (h, w, n) = (session.clip.height(), session.clip.width(), session.clip.num_frames());
    let (frame, prompt) = parse_prompt(&body, h, w, n)?;
    let model = Arc::clone(&state.model);
    blocking(move || -> ApiResult<Json<Value>> {
        let clip = session.clip.clone();
        let object = session.objects.entry(o).or_insert_with(|| ObjectState {
            prompts: BTreeMap::new(),
            tracker: Tracker::new(model, clip),
            masks: vec![Mask::new(h, w); n],
        });
        object.prompts.entry(frame).or_default().push(prompt);
        let prompts = object.prompts[&frame].clone();
        let mask = object.tracker.segment_mask(frame, &prompts)?;
        object.masks[frame] = mask;
        Ok(Json(json!({ "frame": frame, "mask": rle::encode(&object.masks[frame]) })))
    })
    .await?
}

async fn propagate(State(state): State<AppState>, Path((id, o)): Path<(String, usize)>, body: Bytes) -> ApiResult<Json<Value>> {
    let mut session = state.try_begin(&id)?;
    let body = if body.is_empty() { json!({}) } else { parse_json(&body)? };
    let from = match body.get("from_frame") {
        None => 0,
        Some(_) => uint(&body, "from_frame", "from_frame")?,
    };
    session.check_frame("from_frame", from)?;
    session.object(o)?;
    blocking(move || -> ApiResult<Json<Value>> {
        let object = session.object(o)?;
        let masks = object.tracker.propagate(from, &object.prompts)?;
        for (t, m) in (from..).zip(masks) {
            object.masks[t] = m;
        }
        let encoded: Vec<Rle> = object.masks.iter().map(rle::encode).collect();
        Ok(Json(json!({ "object": o, "from_frame": from, "masks": encoded })))
    })
    .await?
}

async fn get_mask(State(state): State<AppState>, Path((id, o, t)): Path<(String, usize, usize)>) -> ApiResult<Json<Rle>> {
    let mut session = state.try_begin(&id)?;
    session.check_frame("t", t)?;
    Ok(Json(rle::encode(&session.object(o)?.masks[t])))
}
