//! HTTP scenario service.
//!
//! `GET /network`, `GET /manifest`, `GET /health` and `POST /predict`. All
//! bodies are JSON. Node ids are 1-based as in TNTP files; link ids are
//! 0-based positions in the network file.
//!
//! Status codes: 400 for a malformed or invalid request (with per-field
//! messages), 409 when disabled links leave a demanded OD pair without a
//! path (the pairs are listed), 422 when the scenario does not match the
//! checkpoint's signature.

use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pathflow_core::equilibrium::{average_delay, kkt_residual, link_aggregation_residual, od_conservation_residual, solve_ue, SolverConfig};
use pathflow_core::metrics::{self, DEFAULT_MAPE_FLOOR};
use pathflow_core::network::{aggregate_link_flows, Network, OdMatrix, PathFlows};
use pathflow_core::paths::{build_path_sets, PathSets};
use serde::{Deserialize, Serialize};

use crate::engine::Surrogate;
use crate::netio::LoadedNetwork;
use crate::Error;

pub const API_VERSION: u32 = 1;
pub const ADDR_ENV: &str = "PATHFLOW_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
/// Iteration budget for interactive solves.
pub const SERVICE_SOLVER_ITERS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EngineChoice {
    #[default]
    Surrogate,
    Solver,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandOverride {
    pub origin: usize,
    pub dest: usize,
    #[serde(default)]
    pub class: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRequest {
    /// Must name the served network.
    pub network: String,
    #[serde(default)]
    pub demand_overrides: Vec<DemandOverride>,
    #[serde(default = "one")]
    pub demand_scale: f64,
    #[serde(default)]
    pub disabled_links: Vec<usize>,
    #[serde(default = "yes")]
    pub renormalize: bool,
    #[serde(default)]
    pub engine: EngineChoice,
    /// Vehicle classes the client expects; checked against the checkpoint.
    #[serde(default)]
    pub classes: Option<usize>,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
    /// Demanded (origin, dest) pairs without a path, 1-based.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unreachable_pairs: Vec<(usize, usize)>,
}

#[derive(Debug)]
pub enum ApiError {
    Invalid(Vec<FieldError>),
    Unreachable(Vec<(usize, usize)>),
    Signature(String),
    Internal(String),
}

impl ApiError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        ApiError::Invalid(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Invalid(_) => StatusCode::BAD_REQUEST,
            ApiError::Unreachable(_) => StatusCode::CONFLICT,
            ApiError::Signature(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn body(&self) -> ErrorBody {
        let (error, fields, pairs) = match self {
            ApiError::Invalid(f) => ("invalid request".to_string(), f.clone(), vec![]),
            ApiError::Unreachable(p) => (
                format!("{} demanded OD pair(s) have no path", p.len()),
                vec![],
                p.iter().map(|&(o, d)| (o + 1, d + 1)).collect(),
            ),
            ApiError::Signature(m) => (format!("signature mismatch: {m}"), vec![], vec![]),
            ApiError::Internal(m) => (m.clone(), vec![], vec![]),
        };
        ErrorBody {
            error,
            fields,
            unreachable_pairs: pairs,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Core(pathflow_core::Error::Infeasible(p)) => ApiError::Unreachable(p),
            Error::Signature(m) => ApiError::Signature(m),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl From<pathflow_core::Error> for ApiError {
    fn from(e: pathflow_core::Error) -> Self {
        Error::from(e).into()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}

/// Flows of one demanded (pair, class), one entry per path slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdFlows {
    pub origin: usize,
    pub dest: usize,
    pub class: usize,
    pub demand: f64,
    pub flows: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineResult {
    pub path_flows: Vec<OdFlows>,
    /// Total flow per link.
    pub link_flows: Vec<f64>,
    /// Per class; null for a class without demand.
    pub average_delay: Vec<Option<f64>>,
    pub eps_od: f64,
    pub eps_link: f64,
    pub phi_kkt: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStatus {
    pub rel_gap: f64,
    pub iterations: usize,
    pub max_iters: usize,
    pub converged: bool,
}

/// Surrogate against solver on the same scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub link_flow_mape: f64,
    pub path_flow_mape: Vec<Option<f64>>,
    pub path_flow_mae: Vec<f64>,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResponse {
    pub api_version: u32,
    pub network: String,
    pub engine: EngineChoice,
    pub disabled_links: Vec<usize>,
    pub total_demand: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<EngineResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<EngineResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<Divergence>,
}

/// Immutable state shared by all requests.
pub struct AppState {
    pub network: LoadedNetwork,
    pub base_demand: OdMatrix,
    pub base_paths: PathSets,
    pub k: usize,
    pub surrogate: Option<Surrogate>,
    pub solver: SolverConfig,
    pub manifest_hash: Option<String>,
}

impl AppState {
    /// Checks that checkpoint, network and demand agree.
    pub fn new(network: LoadedNetwork, base_demand: OdMatrix, surrogate: Option<Surrogate>, k: usize, solver: SolverConfig) -> crate::Result<Self> {
        let k = surrogate.as_ref().map_or(k, |s| s.manifest().k);
        let base_paths = build_path_sets(&network.network, k);
        if let Some(s) = &surrogate {
            s.check(&network.network, &base_demand, &base_paths)?;
        } else if base_demand.nodes() != network.network.node_count() || base_demand.classes() != network.network.class_count() {
            return Err(Error::Signature("base demand does not fit the network".into()));
        }
        solver.validate()?;
        let manifest_hash = surrogate.as_ref().map(|s| s.checkpoint.manifest_hash.clone());
        Ok(AppState {
            network,
            base_demand,
            base_paths,
            k,
            surrogate,
            solver,
            manifest_hash,
        })
    }
}

pub type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/network", get(network))
        .route("/manifest", get(manifest))
        .route("/predict", post(predict))
        .with_state(state)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub api_version: u32,
    pub version: String,
    pub engines: Vec<EngineChoice>,
    pub manifest_hash: Option<String>,
}

async fn health(State(s): State<Shared>) -> Json<Health> {
    let mut engines = vec![EngineChoice::Solver];
    if s.surrogate.is_some() {
        engines = vec![EngineChoice::Surrogate, EngineChoice::Solver, EngineChoice::Both];
    }
    Json(Health {
        status: "ok".into(),
        api_version: API_VERSION,
        version: env!("CARGO_PKG_VERSION").into(),
        engines,
        manifest_hash: s.manifest_hash.clone(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkView {
    pub id: usize,
    pub tail: usize,
    pub head: usize,
    pub length: f64,
    pub capacity: f64,
    pub freeflow_time: f64,
    pub enabled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassView {
    pub name: String,
    pub freeflow_multiplier: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkView {
    pub api_version: u32,
    pub name: String,
    pub nodes: usize,
    pub length_unit: String,
    pub time_unit: String,
    pub classes: Vec<ClassView>,
    pub links: Vec<LinkView>,
    pub disabled_links: Vec<usize>,
    /// Present for generated grids: node `i` sits at row `(i-1) / cols`.
    pub grid: Option<GridLayout>,
}

pub fn network_view(n: &LoadedNetwork) -> NetworkView {
    let net = &n.network;
    let grid = n
        .name
        .strip_prefix("grid:")
        .and_then(|d| crate::netio::parse_grid(d).ok())
        .map(|(rows, cols)| GridLayout { rows, cols });
    NetworkView {
        api_version: API_VERSION,
        name: n.name.clone(),
        nodes: net.node_count(),
        length_unit: n.units.length.clone(),
        time_unit: n.units.time.clone(),
        classes: net
            .classes()
            .iter()
            .map(|c| ClassView {
                name: c.name.clone(),
                freeflow_multiplier: c.freeflow_multiplier,
            })
            .collect(),
        links: net
            .links()
            .iter()
            .map(|l| LinkView {
                id: l.id,
                tail: l.tail + 1,
                head: l.head + 1,
                length: l.length,
                capacity: l.capacity,
                freeflow_time: l.freeflow_time,
                enabled: net.is_enabled(l.id),
            })
            .collect(),
        disabled_links: net.disabled_links(),
        grid,
    }
}

async fn network(State(s): State<Shared>) -> Json<NetworkView> {
    Json(network_view(&s.network))
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestView<'a> {
    pub api_version: u32,
    pub manifest_hash: &'a str,
    pub manifest: &'a pathflow_core::datagen::DatasetManifest,
}

async fn manifest(State(s): State<Shared>) -> Response {
    match (&s.surrogate, &s.manifest_hash) {
        (Some(sur), Some(hash)) => Json(ManifestView {
            api_version: API_VERSION,
            manifest_hash: hash,
            manifest: sur.manifest(),
        })
        .into_response(),
        _ => (
            StatusCode::NOT_FOUND,
            Json(ErrorBody {
                error: "no checkpoint loaded".into(),
                fields: vec![],
                unreachable_pairs: vec![],
            }),
        )
            .into_response(),
    }
}

async fn predict(State(s): State<Shared>, body: Bytes) -> Result<Json<ScenarioResponse>, ApiError> {
    let req: ScenarioRequest = serde_json::from_slice(&body).map_err(|e| ApiError::field("body", e.to_string()))?;
    tokio::task::spawn_blocking(move || run_scenario(&s, &req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map(Json)
}

/// A request applied to the served network: the network with the extra
/// links disabled, its path sets and the scenario demand.
pub struct Instance {
    pub network: Network,
    pub path_sets: PathSets,
    pub demand: OdMatrix,
}

pub fn validate(s: &AppState, req: &ScenarioRequest) -> Result<(), ApiError> {
    let net = &s.network.network;
    let mut errs = Vec::new();
    let mut bad = |field: String, message: String| errs.push(FieldError { field, message });
    if req.network != s.network.name {
        return Err(ApiError::Signature(format!(
            "service runs network `{}`, request names `{}`",
            s.network.name, req.network
        )));
    }
    if let Some(c) = req.classes {
        if c != net.class_count() {
            return Err(ApiError::Signature(format!(
                "request expects {c} vehicle classes, checkpoint and network have {}",
                net.class_count()
            )));
        }
    }
    if !(req.demand_scale.is_finite() && req.demand_scale > 0.0) {
        bad("demand_scale".into(), "must be a finite number > 0".into());
    }
    let n = net.node_count();
    for (i, o) in req.demand_overrides.iter().enumerate() {
        if !(1..=n).contains(&o.origin) {
            bad(format!("demand_overrides[{i}].origin"), format!("node ids run from 1 to {n}"));
        }
        if !(1..=n).contains(&o.dest) {
            bad(format!("demand_overrides[{i}].dest"), format!("node ids run from 1 to {n}"));
        }
        if o.origin == o.dest {
            bad(format!("demand_overrides[{i}].dest"), "must differ from origin".into());
        }
        if o.class >= net.class_count() {
            bad(format!("demand_overrides[{i}].class"), format!("classes run from 0 to {}", net.class_count() - 1));
        }
        if !(o.value.is_finite() && o.value >= 0.0) {
            bad(format!("demand_overrides[{i}].value"), "must be a finite number >= 0".into());
        }
    }
    for (i, &l) in req.disabled_links.iter().enumerate() {
        if l >= net.link_count() {
            bad(format!("disabled_links[{i}]"), format!("link ids run from 0 to {}", net.link_count() - 1));
        }
    }
    if req.engine != EngineChoice::Solver && s.surrogate.is_none() {
        bad("engine".into(), "no checkpoint loaded; only `solver` is available".into());
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(ApiError::Invalid(errs))
    }
}

pub fn instance(s: &AppState, req: &ScenarioRequest) -> Result<Instance, ApiError> {
    validate(s, req)?;
    let base = &s.network.network;
    let (network, path_sets) = if req.disabled_links.is_empty() {
        (base.clone(), s.base_paths.clone())
    } else {
        let mut off = base.disabled_links();
        off.extend(&req.disabled_links);
        off.sort_unstable();
        off.dedup();
        let net = base.with_disabled(&off)?;
        let sets = build_path_sets(&net, s.k);
        (net, sets)
    };
    let mut demand = s.base_demand.scaled(req.demand_scale);
    for o in &req.demand_overrides {
        demand.set(o.origin - 1, o.dest - 1, o.class, o.value)?;
    }
    let unserved = path_sets.unserved_pairs(&demand);
    if !unserved.is_empty() {
        return Err(ApiError::Unreachable(unserved));
    }
    Ok(Instance {
        network,
        path_sets,
        demand,
    })
}

fn engine_result(inst: &Instance, flows: &PathFlows, seconds: f64, solver: Option<SolverStatus>) -> Result<EngineResult, ApiError> {
    let (net, sets, demand) = (&inst.network, &inst.path_sets, &inst.demand);
    let mut path_flows = Vec::new();
    for (r, set) in sets.iter().enumerate() {
        for z in 0..flows.classes {
            let x = demand.get(r, z);
            if x > 0.0 {
                path_flows.push(OdFlows {
                    origin: set.origin + 1,
                    dest: set.dest + 1,
                    class: z,
                    demand: x,
                    flows: flows.od_class(r, z).to_vec(),
                });
            }
        }
    }
    let links = aggregate_link_flows(net, sets, flows)?;
    let average_delay = (0..flows.classes)
        .map(|z| {
            if demand.class_total(z) > 0.0 {
                average_delay(net, demand, sets, flows, z).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<pathflow_core::Result<_>>()?;
    Ok(EngineResult {
        path_flows,
        link_flows: links.totals(),
        average_delay,
        eps_od: od_conservation_residual(demand, flows)?,
        eps_link: link_aggregation_residual(net, sets, flows, &links)?,
        phi_kkt: kkt_residual(net, demand, sets, flows)?,
        seconds,
        solver,
    })
}

fn link_mape(pred: &[f64], label: &[f64], floor: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (a, b) in pred.iter().zip(label) {
        if *b >= floor {
            sum += (a - b).abs() / b;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * sum / n as f64
    }
}

pub fn run_scenario(s: &AppState, req: &ScenarioRequest) -> Result<ScenarioResponse, ApiError> {
    let inst = instance(s, req)?;
    let mut sur_flows = None;
    let surrogate = match (req.engine, &s.surrogate) {
        (EngineChoice::Surrogate | EngineChoice::Both, Some(sur)) => {
            let p = sur.predict(&inst.network, &inst.demand, &inst.path_sets, req.renormalize)?;
            let r = engine_result(&inst, &p.flows, p.seconds.max(f64::MIN_POSITIVE), None)?;
            sur_flows = Some(p.flows);
            Some(r)
        }
        _ => None,
    };
    let mut sol_flows = None;
    let solver = if req.engine != EngineChoice::Surrogate {
        let t = Instant::now();
        let sol = solve_ue(&inst.network, &inst.demand, &inst.path_sets, &s.solver)?;
        let secs = t.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        let status = SolverStatus {
            rel_gap: sol.rel_gap,
            iterations: sol.iterations,
            max_iters: s.solver.max_iters,
            converged: sol.converged,
        };
        let r = engine_result(&inst, &sol.path_flows, secs, Some(status))?;
        sol_flows = Some(sol.path_flows);
        Some(r)
    } else {
        None
    };
    let divergence = match (&surrogate, &solver, &sur_flows, &sol_flows) {
        (Some(a), Some(b), Some(fa), Some(fb)) => {
            let mape = metrics::mape(fa, fb, &inst.path_sets, DEFAULT_MAPE_FLOOR);
            let per_class: Vec<Option<f64>> = match &mape {
                Ok(m) => m.value.iter().zip(&m.included).map(|(v, &n)| (n > 0).then_some(*v)).collect(),
                Err(_) => vec![None; fa.classes],
            };
            Some(Divergence {
                link_flow_mape: link_mape(&a.link_flows, &b.link_flows, DEFAULT_MAPE_FLOOR),
                path_flow_mape: per_class,
                path_flow_mae: metrics::mae(fa, fb, &inst.path_sets)?,
                speedup: b.seconds / a.seconds,
            })
        }
        _ => None,
    };
    Ok(ScenarioResponse {
        api_version: API_VERSION,
        network: s.network.name.clone(),
        engine: req.engine,
        disabled_links: inst.network.disabled_links(),
        total_demand: inst.demand.as_slice().iter().sum(),
        surrogate,
        solver,
        divergence,
    })
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Shared, addr: &str) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr, e))?;
    eprintln!("listening on {}", listener.local_addr().map_err(|e| Error::io(addr, e))?);
    axum::serve(listener, router(state)).await.map_err(|e| Error::io(addr, e))
}
