//! HTTP/JSON service behind the intervention studio.
//!
//! A session holds a world, a latent seed and a stack of interventions; its
//! image is always re-rendered from those three, so replaying the stack on a
//! fresh service gives the same bytes. Mutations of one session are
//! exclusive: a second mutation arriving while one is running gets 409.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};
use unitprobe_core::dissect::{dissect_layer, DissectConfig};
use unitprobe_core::error::Error as CoreError;
use unitprobe_core::export::{encode_mask_png, encode_png};
use unitprobe_core::intervene::{base_coverage, insertion_levels, InsertLevel, InterventionSpec, Mode};
use unitprobe_core::optimize::{optimize_alpha, AlphaConfig};
use unitprobe_core::segment::{segment, SegmentationSet};
use unitprobe_core::tensor::BinaryMask;
use unitprobe_core::world::{Edit, ForwardTrace, World, UNIT_LAYER};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match e {
            CoreError::InvalidArgument(_) | CoreError::Shape(_) | CoreError::UnknownConcept(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug)]
pub struct StudioConfig {
    /// Dissection settings behind the units endpoint.
    pub dissect: DissectConfig,
    /// Optimizer settings for the per-concept rankings.
    pub alpha: AlphaConfig,
}

impl Default for StudioConfig {
    fn default() -> Self {
        Self {
            dissect: DissectConfig::with_seed(0),
            alpha: AlphaConfig::default(),
        }
    }
}

/// What a session is: enough to re-render it anywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionState {
    pub world_ref: String,
    pub seed: u64,
    pub stack: Vec<InterventionSpec>,
}

struct Slot {
    mutation: Arc<tokio::sync::Mutex<()>>,
    state: RwLock<SessionState>,
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct UnitEntry {
    pub unit: usize,
    pub concept: String,
    pub iou: f64,
    pub matched: bool,
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct UnitsBody {
    pub layer: usize,
    pub units: Vec<UnitEntry>,
    /// Units by descending alpha per concept; empty below the unit layer.
    pub rankings: BTreeMap<String, Vec<usize>>,
    pub alpha: BTreeMap<String, Vec<f64>>,
}

pub struct Studio {
    worlds: BTreeMap<String, Arc<World>>,
    default_world: String,
    config: StudioConfig,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    next_id: AtomicU64,
    units: tokio::sync::Mutex<HashMap<(String, usize), Arc<UnitsBody>>>,
    coverage: RwLock<HashMap<String, Arc<Vec<f64>>>>,
    levels: RwLock<HashMap<(String, usize), Arc<Vec<f64>>>>,
}

impl Studio {
    /// `worlds` maps the names clients may pass as `worldRef`; the first
    /// entry is used when a request names none.
    pub fn new(worlds: Vec<(String, World)>, config: StudioConfig) -> Result<Self, CoreError> {
        let default_world = worlds
            .first()
            .map(|(n, _)| n.clone())
            .ok_or_else(|| CoreError::InvalidArgument("studio needs at least one world".into()))?;
        Ok(Self {
            worlds: worlds.into_iter().map(|(n, w)| (n, Arc::new(w))).collect(),
            default_world,
            config,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            units: tokio::sync::Mutex::new(HashMap::new()),
            coverage: RwLock::new(HashMap::new()),
            levels: RwLock::new(HashMap::new()),
        })
    }

    /// Wait for a session's mutation lock and hold it; other mutations of
    /// the session get 409 until the guard is dropped.
    pub async fn hold(&self, id: &str) -> Option<tokio::sync::OwnedMutexGuard<()>> {
        let slot = self.slot(id).ok()?;
        Some(slot.mutation.clone().lock_owned().await)
    }

    fn world(&self, name: &str) -> ApiResult<Arc<World>> {
        self.worlds
            .get(name)
            .cloned()
            .ok_or_else(|| ApiError::bad_request(format!("unknown world `{name}`")))
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.sessions
            .read()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session `{id}`")))
    }

    fn coverage(&self, name: &str, world: &World) -> ApiResult<Arc<Vec<f64>>> {
        if let Some(c) = self.coverage.read().expect("coverage cache").get(name) {
            return Ok(c.clone());
        }
        let c = Arc::new(base_coverage(world)?);
        self.coverage.write().expect("coverage cache").insert(name.to_string(), c.clone());
        Ok(c)
    }

    fn levels(&self, name: &str, world: &World, layer: usize) -> ApiResult<Arc<Vec<f64>>> {
        let key = (name.to_string(), layer);
        if let Some(l) = self.levels.read().expect("level cache").get(&key) {
            return Ok(l.clone());
        }
        let l = Arc::new(insertion_levels(world, layer, &InsertLevel::Quantile99, 0)?.unwrap_or_default());
        self.levels.write().expect("level cache").insert(key, l.clone());
        Ok(l)
    }
}

/// Render a session state from scratch.
pub fn render(world: &World, state: &SessionState) -> Result<ForwardTrace, CoreError> {
    let edits: Vec<Edit> = state.stack.iter().map(|s| s.to_edit(world)).collect::<Result<_, _>>()?;
    world.forward(&world.z_for_seed(state.seed), &edits)
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct MaskOverlay {
    pub concept: String,
    pub pixels: usize,
    /// Base64 PNG, concept pixels white.
    pub png: String,
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ImageBody {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
    pub stack_depth: usize,
    /// Base64 PNG of the rendered image.
    pub image: String,
    pub masks: Vec<MaskOverlay>,
}

fn image_body(id: &str, world: &World, state: &SessionState) -> ApiResult<(ImageBody, SegmentationSet)> {
    let trace = render(world, state)?;
    let segs = segment(&trace.image, world.spec())?;
    let masks = segs
        .names
        .iter()
        .zip(&segs.masks)
        .map(|(n, m)| {
            Ok(MaskOverlay {
                concept: n.clone(),
                pixels: m.count(),
                png: STANDARD.encode(encode_mask_png(m)?),
            })
        })
        .collect::<Result<_, CoreError>>()?;
    let size = world.image_size();
    Ok((
        ImageBody {
            session_id: id.to_string(),
            width: size,
            height: size,
            stack_depth: state.stack.len(),
            image: STANDARD.encode(encode_png(&trace.image)?),
            masks,
        },
        segs,
    ))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct CreateRequest {
    world_ref: Option<String>,
    seed: u64,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct InterveneRequest {
    pub layer: usize,
    pub units: Vec<usize>,
    pub locations: Vec<(usize, usize)>,
    pub mode: Mode,
    pub strength: f64,
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct InterveneBody {
    #[serde(flatten)]
    pub image: ImageBody,
    /// Change in each concept's share of the image.
    pub area_deltas: BTreeMap<String, f64>,
    /// Insert-minus-ablate presence inside the painted footprint over the
    /// concept's coverage; `None` for concepts with zero coverage.
    pub ace: BTreeMap<String, Option<f64>>,
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn create(State(s): State<Arc<Studio>>, body: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let req: CreateRequest = parse(&body)?;
    let world_ref = req.world_ref.unwrap_or_else(|| s.default_world.clone());
    s.world(&world_ref)?;
    let id = format!("s{}", s.next_id.fetch_add(1, Ordering::SeqCst));
    let slot = Arc::new(Slot {
        mutation: Arc::new(tokio::sync::Mutex::new(())),
        state: RwLock::new(SessionState {
            world_ref,
            seed: req.seed,
            stack: Vec::new(),
        }),
    });
    s.sessions.write().expect("session table").insert(id.clone(), slot);
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "sessionId": id }))))
}

async fn get_state(State(s): State<Arc<Studio>>, Path(id): Path<String>) -> ApiResult<Json<SessionState>> {
    let slot = s.slot(&id)?;
    let state = slot.state.read().expect("session state").clone();
    Ok(Json(state))
}

async fn delete(State(s): State<Arc<Studio>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let slot = s.slot(&id)?;
    let _guard = slot
        .mutation
        .try_lock()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "session is being modified"))?;
    s.sessions.write().expect("session table").remove(&id);
    Ok(StatusCode::NO_CONTENT)
}

async fn image(State(s): State<Arc<Studio>>, Path(id): Path<String>) -> ApiResult<Json<ImageBody>> {
    let slot = s.slot(&id)?;
    let state = slot.state.read().expect("session state").clone();
    let world = s.world(&state.world_ref)?;
    blocking(move || Ok(Json(image_body(&id, &world, &state)?.0))).await
}

#[derive(Deserialize)]
struct UnitsQuery {
    layer: Option<usize>,
}

async fn units(
    State(s): State<Arc<Studio>>,
    Path(id): Path<String>,
    Query(q): Query<UnitsQuery>,
) -> ApiResult<Json<UnitsBody>> {
    let slot = s.slot(&id)?;
    let world_ref = slot.state.read().expect("session state").world_ref.clone();
    let world = s.world(&world_ref)?;
    let layer = q.layer.unwrap_or(UNIT_LAYER);
    world.check_layer(layer)?;
    let mut cache = s.units.lock().await;
    if let Some(body) = cache.get(&(world_ref.clone(), layer)) {
        return Ok(Json((**body).clone()));
    }
    let cfg = s.config.clone();
    let w = world.clone();
    let body = blocking(move || {
        let report = dissect_layer(&w, layer, &cfg.dissect)?;
        let mut rankings = BTreeMap::new();
        let mut alpha = BTreeMap::new();
        if layer >= UNIT_LAYER {
            for c in w.spec().concept_names() {
                match optimize_alpha(&w, layer, &c, &cfg.alpha) {
                    Ok(sol) => {
                        rankings.insert(c.clone(), sol.ranking);
                        alpha.insert(c, sol.alpha);
                    }
                    Err(CoreError::ZeroCoverage(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(UnitsBody {
            layer,
            units: report
                .units
                .iter()
                .map(|u| UnitEntry {
                    unit: u.unit,
                    concept: u.concept.clone(),
                    iou: u.iou,
                    matched: u.matched,
                })
                .collect(),
            rankings,
            alpha,
        })
    })
    .await?;
    let body = Arc::new(body);
    cache.insert((world_ref, layer), body.clone());
    Ok(Json((*body).clone()))
}

fn presence(segs: &SegmentationSet, c: usize, footprint: &BinaryMask) -> f64 {
    let n = footprint.count();
    if n == 0 {
        return 0.0;
    }
    segs.masks[c].and(footprint).map(|m| m.count()).unwrap_or(0) as f64 / n as f64
}

async fn intervene(State(s): State<Arc<Studio>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<InterveneBody>> {
    let slot = s.slot(&id)?;
    let req: InterveneRequest = parse(&body)?;
    let guard = slot.mutation.try_mutate()?;
    let before = slot.state.read().expect("session state").clone();
    let world = s.world(&before.world_ref)?;
    world.check_layer(req.layer)?;
    let studio = s.clone();
    let (state, response) = blocking(move || {
        let coverage = studio.coverage(&before.world_ref, &world)?;
        let levels = studio.levels(&before.world_ref, &world, req.layer)?;
        let spec_for = |mode: Mode| {
            let mut spec = match mode {
                Mode::Insert => InterventionSpec::insert(req.layer, req.units.clone(), req.locations.clone(), &levels),
                Mode::Ablate => InterventionSpec::ablate(req.layer, req.units.clone(), req.locations.clone()),
            };
            spec.strength = req.strength;
            spec
        };
        let spec = spec_for(req.mode);
        spec.validate(&world)?;

        let (_, segs_before) = image_body(&id, &world, &before)?;
        let mut after = before.clone();
        after.stack.push(spec);
        let (image, segs_after) = image_body(&id, &world, &after)?;

        let pixels = (world.image_size() * world.image_size()) as f64;
        let area_deltas = segs_after
            .names
            .iter()
            .enumerate()
            .map(|(c, n)| {
                let d = segs_after.masks[c].count() as f64 - segs_before.masks[c].count() as f64;
                (n.clone(), d / pixels)
            })
            .collect();

        let shape = world.layer_shape(req.layer)?;
        let cells = BinaryMask::from_fn(shape[1], shape[2], |i, j| req.locations.contains(&(i, j)));
        let footprint = world.footprint(req.layer, &cells)?;
        let arm = |mode: Mode| -> Result<SegmentationSet, CoreError> {
            let mut st = before.clone();
            st.stack.push(spec_for(mode));
            segment(&render(&world, &st)?.image, world.spec())
        };
        let (si, sa) = (arm(Mode::Insert)?, arm(Mode::Ablate)?);
        let ace = segs_after
            .names
            .iter()
            .enumerate()
            .map(|(c, n)| {
                let raw = presence(&si, c, &footprint) - presence(&sa, c, &footprint);
                (n.clone(), (coverage[c] > 0.0).then(|| raw / coverage[c]))
            })
            .collect();
        Ok((
            after,
            InterveneBody {
                image,
                area_deltas,
                ace,
            },
        ))
    })
    .await?;
    *slot.state.write().expect("session state") = state;
    drop(guard);
    Ok(Json(response))
}

async fn undo(State(s): State<Arc<Studio>>, Path(id): Path<String>) -> ApiResult<Json<ImageBody>> {
    let slot = s.slot(&id)?;
    let guard = slot.mutation.try_mutate()?;
    let mut state = slot.state.read().expect("session state").clone();
    if state.stack.pop().is_none() {
        return Err(ApiError::bad_request("nothing to undo"));
    }
    let world = s.world(&state.world_ref)?;
    let (body, state) = blocking(move || Ok((image_body(&id, &world, &state)?.0, state))).await?;
    *slot.state.write().expect("session state") = state;
    drop(guard);
    Ok(Json(body))
}

trait TryGuard {
    fn try_mutate(&self) -> ApiResult<tokio::sync::MutexGuard<'_, ()>>;
}

impl TryGuard for tokio::sync::Mutex<()> {
    fn try_mutate(&self) -> ApiResult<tokio::sync::MutexGuard<'_, ()>> {
        self.try_lock()
            .map_err(|_| ApiError::new(StatusCode::CONFLICT, "session is being modified"))
    }
}

pub fn router(studio: Arc<Studio>) -> Router {
    let cors = CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any);
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(get_state).delete(delete))
        .route("/sessions/{id}/image", get(image))
        .route("/sessions/{id}/units", get(units))
        .route("/sessions/{id}/intervene", post(intervene))
        .route("/sessions/{id}/undo", post(undo))
        .layer(cors)
        .with_state(studio)
}

pub async fn serve(studio: Arc<Studio>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(studio)).await
}
