//! Scene-level domain types, scenario file IO, ego-frame normalization,
//! map cropping, and tensorization into fixed-shape feature arrays.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, RigidTransform};
use crate::nn::TensorData;

/// Simulation/recording rate: 10 Hz.
pub const DT: f64 = 0.1;

/// Per-step agent feature width: x, y, cos/sin heading, vx, vy,
/// one-hot kind (7), valid flag.
pub const AGENT_FEAT: usize = 14;
/// Per-point map feature width: x, y, unit direction to next point,
/// one-hot polyline kind (4).
pub const MAP_FEAT: usize = 8;
/// Route points carry the map features plus a primary-route flag.
pub const ROUTE_FEAT: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AgentKind {
    Car,
    Bus,
    Truck,
    Cyclist,
    Tricycle,
    Pedestrian,
    Roadblock,
}

impl AgentKind {
    pub fn one_hot_index(self) -> usize {
        match self {
            AgentKind::Car => 0,
            AgentKind::Bus => 1,
            AgentKind::Truck => 2,
            AgentKind::Cyclist => 3,
            AgentKind::Tricycle => 4,
            AgentKind::Pedestrian => 5,
            AgentKind::Roadblock => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PolylineKind {
    LaneCenter,
    LaneDivider,
    Crosswalk,
    Route,
}

impl PolylineKind {
    pub fn one_hot_index(self) -> usize {
        match self {
            PolylineKind::LaneCenter => 0,
            PolylineKind::LaneDivider => 1,
            PolylineKind::Crosswalk => 2,
            PolylineKind::Route => 3,
        }
    }
}

/// One observed agent state at a 0.1 s step. Invalid states (perception
/// dropouts, front padding) carry all-zero kinematics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub t: i64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub vx: f64,
    pub vy: f64,
    pub valid: bool,
}

impl AgentState {
    pub fn invalid(t: i64) -> Self {
        AgentState { t, x: 0.0, y: 0.0, heading: 0.0, vx: 0.0, vy: 0.0, valid: false }
    }

    pub fn speed(&self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentHistory {
    pub id: u64,
    pub kind: AgentKind,
    /// Exactly `t_h + 1` states ending at the current step t0; short
    /// histories are front-padded with invalid states.
    pub states: Vec<AgentState>,
    pub length: f64,
    pub width: f64,
}

impl AgentHistory {
    pub fn current(&self) -> &AgentState {
        self.states.last().expect("history never empty")
    }

    pub fn last_valid(&self) -> Option<&AgentState> {
        self.states.iter().rev().find(|s| s.valid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub id: u64,
    pub kind: PolylineKind,
    pub points: Vec<[f64; 2]>,
}

impl Polyline {
    pub fn total_length(&self) -> f64 {
        *geom::cumulative_lengths(&self.points).last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteSet {
    pub primary: Vec<Polyline>,
    pub secondary: Vec<Polyline>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuturePoint {
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Global,
    Ego,
}

/// One traffic scene: ego + surrounding agent histories, map and route
/// polylines, ground-truth futures, timing metadata. Immutable after
/// construction; all operations on it are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub dt: f64,
    pub t0_index: i64,
    pub frame: Frame,
    pub ego: AgentHistory,
    pub agents: Vec<AgentHistory>,
    pub map: Vec<Polyline>,
    pub routes: RouteSet,
    /// Keyed by agent id (ego included); every entry has length `t_f`.
    pub gt_futures: BTreeMap<u64, Vec<FuturePoint>>,
}

impl Scenario {
    pub fn t_h(&self) -> usize {
        self.ego.states.len() - 1
    }

    pub fn t_f(&self) -> usize {
        self.gt_futures.values().next().map(|v| v.len()).unwrap_or(0)
    }

    pub fn future_of(&self, id: u64) -> Option<&[FuturePoint]> {
        self.gt_futures.get(&id).map(|v| v.as_slice())
    }

    /// Last valid ground-truth future point of an agent, if any.
    pub fn gt_endpoint(&self, id: u64) -> Option<[f64; 2]> {
        self.gt_futures
            .get(&id)?
            .iter()
            .rev()
            .find(|p| p.valid)
            .map(|p| [p.x, p.y])
    }

    pub fn validate(&self) -> Result<()> {
        validate_scenario(self)
    }
}

// ---------------------------------------------------------------------------
// File format (UTF-8 JSON, one scenario per file)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MetaFile {
    id: String,
    dt: f64,
    t0_index: i64,
}

#[derive(Serialize, Deserialize)]
struct AgentFile {
    id: u64,
    kind: AgentKind,
    states: Vec<(i64, f64, f64, f64, f64, f64, bool)>,
    length: f64,
    width: f64,
}

#[derive(Serialize, Deserialize)]
struct PolylineFile {
    id: u64,
    kind: PolylineKind,
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct RoutesFile {
    primary: Vec<PolylineFile>,
    secondary: Vec<PolylineFile>,
}

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    meta: MetaFile,
    ego: AgentFile,
    agents: Vec<AgentFile>,
    map: Vec<PolylineFile>,
    routes: RoutesFile,
    gt_futures: BTreeMap<String, Vec<(f64, f64, bool)>>,
}

fn agent_from_file(a: AgentFile) -> AgentHistory {
    AgentHistory {
        id: a.id,
        kind: a.kind,
        states: a
            .states
            .into_iter()
            .map(|(t, x, y, heading, vx, vy, valid)| AgentState { t, x, y, heading, vx, vy, valid })
            .collect(),
        length: a.length,
        width: a.width,
    }
}

fn agent_to_file(a: &AgentHistory) -> AgentFile {
    AgentFile {
        id: a.id,
        kind: a.kind,
        states: a.states.iter().map(|s| (s.t, s.x, s.y, s.heading, s.vx, s.vy, s.valid)).collect(),
        length: a.length,
        width: a.width,
    }
}

fn polyline_from_file(p: PolylineFile) -> Polyline {
    Polyline { id: p.id, kind: p.kind, points: p.points }
}

fn polyline_to_file(p: &Polyline) -> PolylineFile {
    PolylineFile { id: p.id, kind: p.kind, points: p.points.clone() }
}

/// Parses and validates a scenario file. The loaded scenario is in the
/// global frame.
pub fn load_scenario(bytes: &[u8]) -> Result<Scenario> {
    let file: ScenarioFile = serde_json::from_slice(bytes)
        .map_err(|e| Error::scene(format!("scenario parse error: {e}")))?;
    let mut gt_futures = BTreeMap::new();
    for (key, pts) in file.gt_futures {
        let id: u64 = key
            .parse()
            .map_err(|_| Error::scene(format!("gt_futures key {key:?} is not an agent id")))?;
        gt_futures.insert(id, pts.into_iter().map(|(x, y, valid)| FuturePoint { x, y, valid }).collect());
    }
    let ego = agent_from_file(file.ego);
    let agents: Vec<AgentHistory> = file.agents.into_iter().map(agent_from_file).collect();
    let ids: Vec<u64> = std::iter::once(ego.id).chain(agents.iter().map(|a| a.id)).collect();
    let scenario = Scenario {
        id: file.meta.id,
        dt: file.meta.dt,
        t0_index: file.meta.t0_index,
        frame: Frame::Global,
        ego,
        agents,
        map: file.map.into_iter().map(polyline_from_file).collect(),
        routes: RouteSet {
            primary: file.routes.primary.into_iter().map(polyline_from_file).collect(),
            secondary: file.routes.secondary.into_iter().map(polyline_from_file).collect(),
        },
        gt_futures: fill_missing_futures(gt_futures, &ids),
    };
    validate_scenario(&scenario)?;
    Ok(scenario)
}

/// Agents without a gt_futures entry get an all-invalid future of length t_f.
fn fill_missing_futures(
    mut futures: BTreeMap<u64, Vec<FuturePoint>>,
    ids: &[u64],
) -> BTreeMap<u64, Vec<FuturePoint>> {
    let t_f = futures.values().map(|v| v.len()).max().unwrap_or(0);
    for id in ids {
        futures
            .entry(*id)
            .or_insert_with(|| vec![FuturePoint { x: 0.0, y: 0.0, valid: false }; t_f]);
    }
    futures
}

/// Serializes a scenario to the canonical JSON file layout.
pub fn save_scenario(scenario: &Scenario) -> Vec<u8> {
    let file = ScenarioFile {
        meta: MetaFile { id: scenario.id.clone(), dt: scenario.dt, t0_index: scenario.t0_index },
        ego: agent_to_file(&scenario.ego),
        agents: scenario.agents.iter().map(agent_to_file).collect(),
        map: scenario.map.iter().map(polyline_to_file).collect(),
        routes: RoutesFile {
            primary: scenario.routes.primary.iter().map(polyline_to_file).collect(),
            secondary: scenario.routes.secondary.iter().map(polyline_to_file).collect(),
        },
        gt_futures: scenario
            .gt_futures
            .iter()
            .map(|(id, pts)| {
                (id.to_string(), pts.iter().map(|p| (p.x, p.y, p.valid)).collect())
            })
            .collect(),
    };
    serde_json::to_vec_pretty(&file).expect("scenario serialization cannot fail")
}

pub fn load_scenario_file(path: &std::path::Path) -> Result<Scenario> {
    let bytes = std::fs::read(path).map_err(|e| Error::io("scene_model", path, e))?;
    load_scenario(&bytes).map_err(|e| Error::scene(format!("{}: {}", path.display(), e)))
}

/// Loads every `*.json` scenario in a directory, sorted by file name.
pub fn load_scenario_dir(dir: &std::path::Path) -> Result<Vec<Scenario>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io("scene_model", dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_scenario_file(p)).collect()
}

fn validate_state(ctx: &str, s: &AgentState) -> Result<()> {
    for (name, v) in [("x", s.x), ("y", s.y), ("heading", s.heading), ("vx", s.vx), ("vy", s.vy)] {
        if !v.is_finite() {
            return Err(Error::scene(format!("{ctx}: field {name} is not finite")));
        }
    }
    if s.heading > std::f64::consts::PI || s.heading <= -std::f64::consts::PI {
        return Err(Error::scene(format!("{ctx}: heading {} outside (-pi, pi]", s.heading)));
    }
    if !s.valid && (s.x != 0.0 || s.y != 0.0 || s.heading != 0.0 || s.vx != 0.0 || s.vy != 0.0) {
        return Err(Error::scene(format!("{ctx}: invalid state has nonzero kinematic fields")));
    }
    Ok(())
}

fn validate_polyline(ctx: &str, p: &Polyline) -> Result<()> {
    if p.points.len() < 2 {
        return Err(Error::scene(format!("{ctx} (id {}): fewer than 2 points", p.id)));
    }
    for (i, w) in p.points.windows(2).enumerate() {
        if geom::dist(w[0], w[1]) <= 1e-9 {
            return Err(Error::scene(format!(
                "{ctx} (id {}): points {i} and {} coincide",
                p.id,
                i + 1
            )));
        }
    }
    for pt in &p.points {
        if !pt[0].is_finite() || !pt[1].is_finite() {
            return Err(Error::scene(format!("{ctx} (id {}): non-finite point", p.id)));
        }
    }
    Ok(())
}

fn validate_scenario(s: &Scenario) -> Result<()> {
    if (s.dt - DT).abs() > 1e-12 {
        return Err(Error::scene(format!("field meta.dt: {} (only 0.1 s scenarios supported)", s.dt)));
    }
    let t_h1 = s.ego.states.len();
    if t_h1 == 0 {
        return Err(Error::scene("field ego.states: empty".to_string()));
    }
    if s.ego.current().t != s.t0_index {
        return Err(Error::scene(format!(
            "field ego.states: last time index {} != meta.t0_index {}",
            s.ego.current().t,
            s.t0_index
        )));
    }
    for (ctx, hist) in std::iter::once(("ego", &s.ego)).chain(s.agents.iter().map(|a| ("agents", a)))
    {
        if hist.states.len() != t_h1 {
            return Err(Error::scene(format!(
                "field {ctx}.states (id {}): length {} != t_h+1 = {}",
                hist.id,
                hist.states.len(),
                t_h1
            )));
        }
        if !(hist.length > 0.0 && hist.width > 0.0) {
            return Err(Error::scene(format!(
                "field {ctx}.length/width (id {}): must be positive",
                hist.id
            )));
        }
        for (i, st) in hist.states.iter().enumerate() {
            validate_state(&format!("{ctx}.states[{i}] (id {})", hist.id), st)?;
        }
    }
    if s.agents.iter().any(|a| a.id == s.ego.id) {
        return Err(Error::scene(format!("field agents: ego id {} reappears", s.ego.id)));
    }
    let mut seen = std::collections::BTreeSet::new();
    for a in &s.agents {
        if !seen.insert(a.id) {
            return Err(Error::scene(format!("field agents: duplicate id {}", a.id)));
        }
    }
    for p in &s.map {
        validate_polyline("map polyline", p)?;
    }
    if s.routes.primary.is_empty() {
        return Err(Error::scene("empty primary route".to_string()));
    }
    for p in s.routes.primary.iter().chain(&s.routes.secondary) {
        validate_polyline("route polyline", p)?;
        if p.kind != PolylineKind::Route {
            return Err(Error::scene(format!(
                "field routes (id {}): kind must be ROUTE",
                p.id
            )));
        }
    }
    let t_f = s.t_f();
    for (id, fut) in &s.gt_futures {
        if fut.len() != t_f {
            return Err(Error::scene(format!(
                "field gt_futures[{id}]: length {} != t_f = {t_f}",
                fut.len()
            )));
        }
        for (i, p) in fut.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::scene(format!("field gt_futures[{id}][{i}]: non-finite")));
            }
        }
    }
    if s.frame == Frame::Ego {
        let cur = s.ego.current();
        if cur.x.abs() > 1e-6 || cur.y.abs() > 1e-6 || cur.heading.abs() > 1e-6 {
            return Err(Error::scene("ego frame: ego t0 state not at origin".to_string()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ego-frame normalization and map cropping
// ---------------------------------------------------------------------------

/// The rigid transform that carries this scenario's global frame into the
/// ego frame at t0.
pub fn ego_frame_transform(scenario: &Scenario) -> Result<RigidTransform> {
    let cur = scenario.ego.current();
    if !cur.valid {
        return Err(Error::scene("ego t0 state invalid".to_string()));
    }
    Ok(RigidTransform::into_frame_of(cur.x, cur.y, cur.heading))
}

fn transform_history(tf: &RigidTransform, hist: &AgentHistory) -> AgentHistory {
    let states = hist
        .states
        .iter()
        .map(|s| {
            if !s.valid {
                return *s;
            }
            let p = tf.apply([s.x, s.y]);
            let v = tf.rotate([s.vx, s.vy]);
            AgentState {
                t: s.t,
                x: p[0],
                y: p[1],
                heading: geom::wrap_angle(s.heading + tf.angle()),
                vx: v[0],
                vy: v[1],
                valid: true,
            }
        })
        .collect();
    AgentHistory { id: hist.id, kind: hist.kind, states, length: hist.length, width: hist.width }
}

fn transform_polyline(tf: &RigidTransform, p: &Polyline) -> Polyline {
    Polyline { id: p.id, kind: p.kind, points: p.points.iter().map(|pt| tf.apply(*pt)).collect() }
}

/// Applies an arbitrary rigid transform to every pose in a scenario,
/// keeping its frame tag. Used by normalization and by the simulator when
/// mapping plans back to the global frame.
pub fn transform_scenario(scenario: &Scenario, tf: &RigidTransform, frame: Frame) -> Scenario {
    Scenario {
        id: scenario.id.clone(),
        dt: scenario.dt,
        t0_index: scenario.t0_index,
        frame,
        ego: transform_history(tf, &scenario.ego),
        agents: scenario.agents.iter().map(|a| transform_history(tf, a)).collect(),
        map: scenario.map.iter().map(|p| transform_polyline(tf, p)).collect(),
        routes: RouteSet {
            primary: scenario.routes.primary.iter().map(|p| transform_polyline(tf, p)).collect(),
            secondary: scenario.routes.secondary.iter().map(|p| transform_polyline(tf, p)).collect(),
        },
        gt_futures: scenario
            .gt_futures
            .iter()
            .map(|(id, fut)| {
                let fut = fut
                    .iter()
                    .map(|p| {
                        if !p.valid {
                            return *p;
                        }
                        let q = tf.apply([p.x, p.y]);
                        FuturePoint { x: q[0], y: q[1], valid: true }
                    })
                    .collect();
                (*id, fut)
            })
            .collect(),
    }
}

/// Rigidly moves the whole scene so the ego's t0 state sits at the origin
/// with heading zero.
pub fn normalize_to_ego_frame(scenario: &Scenario) -> Result<Scenario> {
    if scenario.frame != Frame::Global {
        return Err(Error::scene("normalize_to_ego_frame expects a global-frame scenario"));
    }
    let tf = ego_frame_transform(scenario)?;
    let mut out = transform_scenario(scenario, &tf, Frame::Ego);
    // pin the ego t0 pose exactly to the origin
    let cur = out.ego.states.last_mut().unwrap();
    cur.x = 0.0;
    cur.y = 0.0;
    cur.heading = 0.0;
    Ok(out)
}

/// Retains exactly the map polylines having at least one point with
/// max(|x|, |y|) <= range_m. Routes and agents are untouched.
pub fn crop_map(scenario: &Scenario, range_m: f64) -> Scenario {
    let mut out = scenario.clone();
    out.map.retain(|p| p.points.iter().any(|pt| pt[0].abs().max(pt[1].abs()) <= range_m));
    out
}

// ---------------------------------------------------------------------------
// Tensorization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TensorizeConfig {
    pub t_h: usize,
    pub max_agents: usize,
    pub max_map: usize,
    pub max_route: usize,
    pub max_points: usize,
}

/// Fixed-shape feature arrays plus padding masks for one scenario.
/// Slot 0 of the agent arrays is always the ego.
#[derive(Debug, Clone)]
pub struct SceneTensors {
    /// [max_agents+1, t_h+1, AGENT_FEAT]
    pub agents: TensorData<f32>,
    /// [max_agents+1] — slot holds a real agent with at least one valid step
    pub agent_mask: Vec<bool>,
    /// [max_agents+1, t_h+1]
    pub agent_step_mask: Vec<bool>,
    /// [max_map, max_points, MAP_FEAT]
    pub map: TensorData<f32>,
    pub map_mask: Vec<bool>,
    /// [max_map, max_points]
    pub map_point_mask: Vec<bool>,
    /// [max_route, max_points, ROUTE_FEAT]
    pub routes: TensorData<f32>,
    pub route_mask: Vec<bool>,
    pub route_point_mask: Vec<bool>,
    /// Slot -> source agent id (ego first), for slots with agent_mask true.
    pub agent_ids: Vec<u64>,
}

fn write_agent_features(
    feat: &mut [f32],
    step_mask: &mut [bool],
    hist: &AgentHistory,
    t_h: usize,
) {
    let t1 = t_h + 1;
    // align histories shorter/longer than requested on their last state
    let src = &hist.states;
    let offset = src.len() as i64 - t1 as i64;
    for step in 0..t1 {
        let src_idx = step as i64 + offset;
        let state = if src_idx >= 0 { &src[src_idx as usize] } else { continue };
        if !state.valid {
            continue;
        }
        let row = &mut feat[step * AGENT_FEAT..(step + 1) * AGENT_FEAT];
        row[0] = state.x as f32;
        row[1] = state.y as f32;
        row[2] = state.heading.cos() as f32;
        row[3] = state.heading.sin() as f32;
        row[4] = state.vx as f32;
        row[5] = state.vy as f32;
        row[6 + hist.kind.one_hot_index()] = 1.0;
        row[13] = 1.0;
        step_mask[step] = true;
    }
}

/// Evenly spaced index subsample keeping first and last.
fn subsample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    (0..max).map(|i| (i as f64 * (n - 1) as f64 / (max - 1) as f64).round() as usize).collect()
}

fn write_polyline_features(
    feat: &mut [f32],
    point_mask: &mut [bool],
    poly: &Polyline,
    width: usize,
    max_points: usize,
    primary_flag: Option<bool>,
) {
    let idx = subsample_indices(poly.points.len(), max_points);
    for (slot, &i) in idx.iter().enumerate() {
        let p = poly.points[i];
        let next = if i + 1 < poly.points.len() { poly.points[i + 1] } else { poly.points[i - 1] };
        let mut d = [next[0] - p[0], next[1] - p[1]];
        if i + 1 >= poly.points.len() {
            d = [-d[0], -d[1]];
        }
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let row = &mut feat[slot * width..(slot + 1) * width];
        row[0] = p[0] as f32;
        row[1] = p[1] as f32;
        row[2] = (d[0] / len) as f32;
        row[3] = (d[1] / len) as f32;
        row[4 + poly.kind.one_hot_index()] = 1.0;
        if let Some(primary) = primary_flag {
            row[8] = if primary { 1.0 } else { 0.0 };
        }
        point_mask[slot] = true;
    }
}

/// Distance of an element to the ego at t0, used by the overflow policy.
fn agent_distance(hist: &AgentHistory) -> f64 {
    hist.last_valid().map(|s| (s.x * s.x + s.y * s.y).sqrt()).unwrap_or(f64::INFINITY)
}

fn polyline_distance(poly: &Polyline) -> f64 {
    poly.points.iter().map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).fold(f64::INFINITY, f64::min)
}

/// Keeps at most `max` elements, nearest to the ego first, breaking ties by
/// ascending id; the kept subset retains its original order.
fn select_by_distance<T, FD: Fn(&T) -> f64, FI: Fn(&T) -> u64>(
    items: &[T],
    max: usize,
    dist: FD,
    id: FI,
) -> Vec<usize> {
    if items.len() <= max {
        return (0..items.len()).collect();
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        dist(&items[a])
            .partial_cmp(&dist(&items[b]))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(id(&items[a]).cmp(&id(&items[b])))
    });
    let mut keep: Vec<usize> = order.into_iter().take(max).collect();
    keep.sort_unstable();
    keep
}

/// Produces fixed-shape feature arrays and masks for the encoders. Scenes
/// exceeding the agent/polyline budgets keep the elements nearest to the
/// ego (ties by ascending id).
pub fn tensorize(scenario: &Scenario, cfg: &TensorizeConfig) -> Result<SceneTensors> {
    if scenario.frame != Frame::Ego {
        return Err(Error::scene("tensorize expects an ego-frame scenario"));
    }
    let t1 = cfg.t_h + 1;
    let a_slots = cfg.max_agents + 1;

    let mut agents = TensorData::zeros(vec![a_slots, t1, AGENT_FEAT]);
    let mut agent_mask = vec![false; a_slots];
    let mut agent_step_mask = vec![false; a_slots * t1];
    let mut agent_ids = vec![0u64; a_slots];

    let kept = select_by_distance(&scenario.agents, cfg.max_agents, agent_distance, |a| a.id);
    for (slot, hist) in std::iter::once(&scenario.ego)
        .chain(kept.iter().map(|&i| &scenario.agents[i]))
        .enumerate()
    {
        let base = slot * t1 * AGENT_FEAT;
        write_agent_features(
            &mut agents.data[base..base + t1 * AGENT_FEAT],
            &mut agent_step_mask[slot * t1..(slot + 1) * t1],
            hist,
            cfg.t_h,
        );
        agent_mask[slot] = agent_step_mask[slot * t1..(slot + 1) * t1].iter().any(|&m| m);
        agent_ids[slot] = hist.id;
    }

    let mut map = TensorData::zeros(vec![cfg.max_map, cfg.max_points, MAP_FEAT]);
    let mut map_mask = vec![false; cfg.max_map];
    let mut map_point_mask = vec![false; cfg.max_map * cfg.max_points];
    let kept = select_by_distance(&scenario.map, cfg.max_map, polyline_distance, |p| p.id);
    for (slot, &i) in kept.iter().enumerate() {
        let base = slot * cfg.max_points * MAP_FEAT;
        write_polyline_features(
            &mut map.data[base..base + cfg.max_points * MAP_FEAT],
            &mut map_point_mask[slot * cfg.max_points..(slot + 1) * cfg.max_points],
            &scenario.map[i],
            MAP_FEAT,
            cfg.max_points,
            None,
        );
        map_mask[slot] = true;
    }

    let mut routes = TensorData::zeros(vec![cfg.max_route, cfg.max_points, ROUTE_FEAT]);
    let mut route_mask = vec![false; cfg.max_route];
    let mut route_point_mask = vec![false; cfg.max_route * cfg.max_points];
    let all_routes: Vec<(&Polyline, bool)> = scenario
        .routes
        .primary
        .iter()
        .map(|p| (p, true))
        .chain(scenario.routes.secondary.iter().map(|p| (p, false)))
        .collect();
    let kept = select_by_distance(
        &all_routes,
        cfg.max_route,
        |(p, primary)| {
            // primary routes always outrank secondary under overflow
            polyline_distance(p) + if *primary { 0.0 } else { 1e6 }
        },
        |(p, _)| p.id,
    );
    for (slot, &i) in kept.iter().enumerate() {
        let (poly, primary) = all_routes[i];
        let base = slot * cfg.max_points * ROUTE_FEAT;
        write_polyline_features(
            &mut routes.data[base..base + cfg.max_points * ROUTE_FEAT],
            &mut route_point_mask[slot * cfg.max_points..(slot + 1) * cfg.max_points],
            poly,
            ROUTE_FEAT,
            cfg.max_points,
            Some(primary),
        );
        route_mask[slot] = true;
    }

    Ok(SceneTensors {
        agents,
        agent_mask,
        agent_step_mask,
        map,
        map_mask,
        map_point_mask,
        routes,
        route_mask,
        route_point_mask,
        agent_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn poly(id: u64, kind: PolylineKind, pts: &[[f64; 2]]) -> Polyline {
        Polyline { id, kind, points: pts.to_vec() }
    }

    fn state(t: i64, x: f64, y: f64, heading: f64, vx: f64, vy: f64) -> AgentState {
        AgentState { t, x, y, heading, vx, vy, valid: true }
    }

    fn minimal_scenario() -> Scenario {
        let ego = AgentHistory {
            id: 0,
            kind: AgentKind::Car,
            states: vec![state(0, 5.0, 3.0, PI / 2.0, 0.0, 2.0)],
            length: 4.5,
            width: 1.9,
        };
        let mut gt = BTreeMap::new();
        gt.insert(0, vec![FuturePoint { x: 5.0, y: 4.0, valid: true }]);
        Scenario {
            id: "test".into(),
            dt: DT,
            t0_index: 0,
            frame: Frame::Global,
            ego,
            agents: vec![],
            map: vec![poly(10, PolylineKind::LaneCenter, &[[0.0, 0.0], [50.0, 0.0]])],
            routes: RouteSet {
                primary: vec![poly(20, PolylineKind::Route, &[[5.0, 3.0], [5.0, 60.0]])],
                secondary: vec![],
            },
            gt_futures: gt,
        }
    }

    #[test]
    fn minimal_file_round_trip() {
        let s = minimal_scenario();
        let bytes = save_scenario(&s);
        let loaded = load_scenario(&bytes).unwrap();
        assert_eq!(loaded.agents.len(), 0);
        assert_eq!(loaded.routes.primary.len(), 1);
        assert_eq!(loaded, s);
        // save(load(bytes)) == bytes modulo field ordering
        let again = save_scenario(&loaded);
        let va: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        let vb: serde_json::Value = serde_json::from_slice(&again).unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn missing_primary_route_rejected() {
        let mut s = minimal_scenario();
        s.routes.primary.clear();
        let bytes = save_scenario(&s);
        let err = load_scenario(&bytes).unwrap_err();
        assert!(err.to_string().contains("empty primary route"), "{err}");
    }

    #[test]
    fn bad_dt_rejected() {
        let mut s = minimal_scenario();
        s.dt = 0.05;
        let err = load_scenario(&save_scenario(&s)).unwrap_err();
        assert!(err.to_string().contains("meta.dt"), "{err}");
    }

    #[test]
    fn invalid_state_with_kinematics_rejected() {
        let mut s = minimal_scenario();
        s.ego.states.insert(0, AgentState { t: -1, x: 1.0, y: 0.0, heading: 0.0, vx: 0.0, vy: 0.0, valid: false });
        s.ego.states[1].t = 0;
        let err = load_scenario(&save_scenario(&s)).unwrap_err();
        assert!(err.to_string().contains("nonzero kinematic"), "{err}");
    }

    #[test]
    fn normalize_matches_hand_transform() {
        let s = minimal_scenario();
        let n = normalize_to_ego_frame(&s).unwrap();
        let cur = n.ego.current();
        assert!(cur.x.abs() < 1e-12 && cur.y.abs() < 1e-12 && cur.heading.abs() < 1e-12);
        // the gt point (5, 4) sits one meter ahead of the ego -> (1, 0)
        let fut = &n.gt_futures[&0][0];
        assert!((fut.x - 1.0).abs() < 1e-9 && fut.y.abs() < 1e-9);
        // velocity (0, 2) rotates into (2, 0)
        assert!((cur.vx - 2.0).abs() < 1e-9 && cur.vy.abs() < 1e-9);
    }

    #[test]
    fn normalize_identity_when_already_at_origin() {
        let mut s = minimal_scenario();
        s.ego.states = vec![state(0, 0.0, 0.0, 0.0, 3.0, 0.0)];
        let n = normalize_to_ego_frame(&s).unwrap();
        assert_eq!(n.ego.states, s.ego.states);
        assert_eq!(n.map, s.map);
    }

    #[test]
    fn normalize_preserves_distances() {
        let s = minimal_scenario();
        let n = normalize_to_ego_frame(&s).unwrap();
        let a0 = [s.map[0].points[0], s.map[0].points[1]];
        let b0 = [n.map[0].points[0], n.map[0].points[1]];
        assert!((geom::dist(a0[0], a0[1]) - geom::dist(b0[0], b0[1])).abs() < 1e-9);
    }

    #[test]
    fn crop_map_boundary_and_idempotence() {
        let mut s = minimal_scenario();
        s.ego.states = vec![state(0, 0.0, 0.0, 0.0, 0.0, 0.0)];
        s.map = vec![
            poly(1, PolylineKind::LaneCenter, &[[310.0, 0.0], [320.0, 0.0]]),
            poly(2, PolylineKind::LaneCenter, &[[199.0, 0.0], [260.0, 0.0]]),
        ];
        let n = normalize_to_ego_frame(&s).unwrap();
        let c = crop_map(&n, 200.0);
        assert_eq!(c.map.len(), 1);
        assert_eq!(c.map[0].id, 2);
        let c2 = crop_map(&c, 200.0);
        assert_eq!(c2.map, c.map);
    }

    #[test]
    fn tensorize_masks_and_heading_encoding() {
        let mut s = minimal_scenario();
        s.ego.states = vec![state(0, 0.0, 0.0, 0.0, 5.0, 0.0)];
        for k in 0..2u64 {
            s.agents.push(AgentHistory {
                id: k + 1,
                kind: AgentKind::Pedestrian,
                states: vec![state(0, 3.0 + k as f64, 1.0, PI / 2.0, 0.0, 1.0)],
                length: 0.6,
                width: 0.6,
            });
            s.gt_futures.insert(k + 1, vec![FuturePoint { x: 3.0, y: 2.0, valid: true }]);
        }
        let n = normalize_to_ego_frame(&s).unwrap();
        let cfg = TensorizeConfig { t_h: 0, max_agents: 8, max_map: 4, max_route: 2, max_points: 8 };
        let t = tensorize(&n, &cfg).unwrap();
        assert_eq!(t.agent_mask.iter().filter(|&&m| m).count(), 3);
        // padded slot is all zeros with a false mask
        assert!(!t.agent_mask[5]);
        let row = &t.agents.data[5 * AGENT_FEAT..6 * AGENT_FEAT];
        assert!(row.iter().all(|&v| v == 0.0));
        // heading pi/2 encodes as (cos, sin) = (0, 1)
        let a1 = &t.agents.data[1 * AGENT_FEAT..2 * AGENT_FEAT];
        assert!(a1[2].abs() < 1e-6 && (a1[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tensorize_overflow_keeps_nearest() {
        let mut s = minimal_scenario();
        s.ego.states = vec![state(0, 0.0, 0.0, 0.0, 5.0, 0.0)];
        for k in 0..4u64 {
            s.agents.push(AgentHistory {
                id: 100 - k, // descending ids so ties would be visible
                kind: AgentKind::Car,
                states: vec![state(0, 10.0 + k as f64 * 10.0, 0.0, 0.0, 1.0, 0.0)],
                length: 4.0,
                width: 2.0,
            });
        }
        let n = normalize_to_ego_frame(&s).unwrap();
        let cfg = TensorizeConfig { t_h: 0, max_agents: 2, max_map: 4, max_route: 2, max_points: 8 };
        let t = tensorize(&n, &cfg).unwrap();
        // nearest two agents are at x = 10 (id 100) and x = 20 (id 99)
        assert_eq!(&t.agent_ids[1..3], &[100, 99]);
    }
}
