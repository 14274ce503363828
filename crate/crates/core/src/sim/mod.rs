//! Closed-loop simulation harness: kinematic-bicycle ego, log-replay
//! (non-reactive) or IDM-along-logged-path (reactive) surrounding agents,
//! periodic replanning, and a single-shot open-loop mode.

mod control;
mod idm;
mod planners;

pub use control::{step_bicycle, track_trajectory, EgoDynamicState, TrackerParams};
pub use idm::{idm_accel, IdmParams};
pub use planners::{IdmPlanner, LogReplayPlanner, ModelPlanner};

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom;
use crate::scene::{AgentHistory, AgentKind, AgentState, Frame, Scenario, DT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimMode {
    #[serde(rename = "OPEN_LOOP")]
    OpenLoop,
    #[serde(rename = "NONREACTIVE_CL")]
    NonreactiveCl,
    #[serde(rename = "REACTIVE_CL")]
    ReactiveCl,
}

impl SimMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "open" => Some(SimMode::OpenLoop),
            "nonreactive" => Some(SimMode::NonreactiveCl),
            "reactive" => Some(SimMode::ReactiveCl),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon_s: f64,
    pub replan_period_s: f64,
    pub wheelbase: f64,
    pub idm: IdmParams,
    pub tracker: TrackerParams,
    /// lateral band for leader selection along a follower's path (m)
    pub leader_lateral_band: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon_s: 15.0,
            replan_period_s: 1.0,
            wheelbase: 2.8,
            idm: IdmParams::default(),
            tracker: TrackerParams::default(),
            leader_lateral_band: 2.0,
        }
    }
}

/// One plan handed back by a planner: global-frame points at dt spacing,
/// starting one step after the replan instant.
#[derive(Debug, Clone)]
pub struct PlannedTrajectory {
    pub points: Vec<[f64; 2]>,
    pub confidence: f64,
    /// the unrefined plan when post-processing rewrote it
    pub raw_points: Option<Vec<[f64; 2]>>,
}

pub trait Planner {
    fn plan(&mut self, obs: &Scenario) -> Result<PlannedTrajectory>;
    fn name(&self) -> &'static str;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentTrace {
    pub id: u64,
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    /// per step [t, x, y, heading, v]
    pub states: Vec<[f64; 5]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplanRecord {
    pub step: usize,
    pub t: f64,
    pub confidence: f64,
    pub plan: Vec<[f64; 2]>,
    pub raw_plan: Option<Vec<[f64; 2]>>,
}

/// Time-stamped closed-loop trace of one simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rollout {
    pub scenario_id: String,
    pub mode: SimMode,
    pub planner: String,
    pub postprocess: bool,
    pub dt: f64,
    pub ego_length: f64,
    pub ego_width: f64,
    /// per step [t, x, y, heading, v]; entry 0 is the t0 state
    pub ego: Vec<[f64; 5]>,
    pub agents: Vec<AgentTrace>,
    pub replans: Vec<ReplanRecord>,
    /// set when a planner failure aborted the rollout early
    pub partial: bool,
}

impl Rollout {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).expect("rollout serializes");
        std::fs::write(path, json).map_err(|e| Error::io("simulator", path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Rollout> {
        let bytes = std::fs::read(path).map_err(|e| Error::io("simulator", path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::simulator(format!("{}: {e}", path.display())))
    }
}

fn ego_row(t: f64, s: &EgoDynamicState) -> [f64; 5] {
    [t, s.x, s.y, s.heading, s.v]
}

/// Rolling observation history for one traffic participant.
struct HistoryBuffer {
    states: VecDeque<AgentState>,
}

impl HistoryBuffer {
    fn new(hist: &[AgentState]) -> Self {
        HistoryBuffer { states: hist.iter().copied().collect() }
    }

    fn push(&mut self, s: AgentState) {
        self.states.pop_front();
        self.states.push_back(s);
    }

    fn to_states(&self, t_offset: i64) -> Vec<AgentState> {
        self.states
            .iter()
            .map(|s| AgentState { t: s.t + t_offset, ..*s })
            .collect()
    }
}

/// A surrounding agent replaying or re-timing its logged path.
struct SimAgent {
    hist: AgentHistory,
    future: Vec<crate::scene::FuturePoint>,
    buffer: HistoryBuffer,
    last: AgentState,
    /// logged path geometry (valid history + future positions)
    path: Option<(Vec<[f64; 2]>, Vec<f64>)>,
    /// arc position and speed along the path (reactive mode)
    s: f64,
    v: f64,
    v_desired: f64,
}

impl SimAgent {
    fn new(hist: &AgentHistory, future: &[crate::scene::FuturePoint]) -> Self {
        let mut pts: Vec<[f64; 2]> = Vec::new();
        for st in hist.states.iter().filter(|s| s.valid) {
            pts.push([st.x, st.y]);
        }
        for p in future.iter().filter(|p| p.valid) {
            pts.push([p.x, p.y]);
        }
        pts.dedup_by(|a, b| geom::dist(*a, *b) < 1e-6);
        let path = (pts.len() >= 2).then(|| {
            let cum = geom::cumulative_lengths(&pts);
            (pts, cum)
        });
        let last = *hist.current();
        let (s, v) = match &path {
            Some((pts, cum)) => {
                let (s, _, _) = geom::project_to_polyline(pts, cum, [last.x, last.y]);
                (s, last.speed())
            }
            None => (0.0, 0.0),
        };
        // desired speed: the fastest the log ever drove this path
        let mut v_desired: f64 = last.speed();
        for w in future.windows(2) {
            if w[0].valid && w[1].valid {
                v_desired = v_desired.max(geom::dist([w[0].x, w[0].y], [w[1].x, w[1].y]) / DT);
            }
        }
        SimAgent {
            hist: hist.clone(),
            future: future.to_vec(),
            buffer: HistoryBuffer::new(&hist.states),
            last,
            path,
            s,
            v,
            v_desired: v_desired.max(0.5),
        }
    }

    /// Non-reactive: replay the log verbatim, freezing on invalid steps.
    fn replay_step(&mut self, step: usize, t: i64) {
        if let Some(p) = self.future.get(step).filter(|p| p.valid) {
            let moved = geom::dist([self.last.x, self.last.y], [p.x, p.y]);
            let heading = if moved > 1e-6 {
                (p.y - self.last.y).atan2(p.x - self.last.x)
            } else {
                self.last.heading
            };
            let v = moved / DT;
            self.last = AgentState {
                t,
                x: p.x,
                y: p.y,
                heading,
                vx: v * heading.cos(),
                vy: v * heading.sin(),
                valid: true,
            };
        } else {
            self.last = AgentState { t, ..self.last };
        }
        self.buffer.push(self.last);
    }

    /// Reactive: advance along the logged path with IDM-controlled speed.
    fn idm_step(&mut self, accel: f64, t: i64) {
        let Some((pts, cum)) = &self.path else {
            self.last = AgentState { t, ..self.last };
            self.buffer.push(self.last);
            return;
        };
        self.v = (self.v + accel * DT).max(0.0);
        self.s += self.v * DT;
        let p = geom::point_at_arc_length(pts, cum, self.s);
        let tan = geom::tangent_at_arc_length(pts, cum, self.s);
        let heading = tan[1].atan2(tan[0]);
        self.last = AgentState {
            t,
            x: p[0],
            y: p[1],
            heading,
            vx: self.v * heading.cos(),
            vy: self.v * heading.sin(),
            valid: true,
        };
        self.buffer.push(self.last);
    }
}

/// Bumper gap from a follower at arc `s_self` to a candidate leader pose
/// projected on the follower's path; `None` when the candidate is outside
/// the lateral band or behind.
fn leader_gap(
    path: &(Vec<[f64; 2]>, Vec<f64>),
    s_self: f64,
    self_len: f64,
    candidate: [f64; 2],
    candidate_len: f64,
    band: f64,
) -> Option<f64> {
    let (s, l, _) = geom::project_to_polyline(&path.0, &path.1, candidate);
    if l.abs() > band || s <= s_self {
        return None;
    }
    Some(s - s_self - (self_len + candidate_len) / 2.0)
}

/// Runs one simulation. OPEN_LOOP calls the planner once and records the
/// plan as the ego trace without integration; the closed-loop modes
/// integrate the ego with the tracking controller and replan every
/// `replan_period_s`, feeding simulated histories back as observations.
pub fn rollout_closed_loop(
    scenario: &Scenario,
    planner: &mut dyn Planner,
    mode: SimMode,
    cfg: &SimConfig,
) -> Result<Rollout> {
    if scenario.frame != Frame::Global {
        return Err(Error::simulator("rollout expects a global-frame scenario".to_string()));
    }
    let t_f = scenario.t_f();
    if t_f == 0 {
        return Err(Error::simulator("scenario has no ground-truth horizon".to_string()));
    }
    let n_steps = ((cfg.horizon_s / DT).round() as usize).min(t_f);
    let replan_steps = (cfg.replan_period_s / DT).round().max(1.0) as usize;

    let cur = scenario.ego.current();
    let mut ego_state = EgoDynamicState {
        x: cur.x,
        y: cur.y,
        heading: cur.heading,
        v: cur.speed(),
        wheelbase: cfg.wheelbase,
    };

    let mut rollout = Rollout {
        scenario_id: scenario.id.clone(),
        mode,
        planner: planner.name().to_string(),
        postprocess: false,
        dt: DT,
        ego_length: scenario.ego.length,
        ego_width: scenario.ego.width,
        ego: vec![ego_row(0.0, &ego_state)],
        agents: Vec::new(),
        replans: Vec::new(),
        partial: false,
    };

    let mut agents: Vec<SimAgent> = scenario
        .agents
        .iter()
        .map(|a| SimAgent::new(a, scenario.future_of(a.id).unwrap_or(&[])))
        .collect();
    for a in &agents {
        rollout.agents.push(AgentTrace {
            id: a.hist.id,
            kind: a.hist.kind,
            length: a.hist.length,
            width: a.hist.width,
            states: vec![[0.0, a.last.x, a.last.y, a.last.heading, a.last.speed()]],
        });
    }

    if mode == SimMode::OpenLoop {
        let plan = planner.plan(scenario)?;
        rollout.postprocess = plan.raw_points.is_some();
        let points: Vec<[f64; 2]> = plan.points.iter().copied().take(n_steps).collect();
        let mut prev = [ego_state.x, ego_state.y];
        let mut heading = ego_state.heading;
        for (k, p) in points.iter().enumerate() {
            let d = geom::dist(prev, *p);
            if d > 1e-6 {
                heading = (p[1] - prev[1]).atan2(p[0] - prev[0]);
            }
            let t = (k + 1) as f64 * DT;
            rollout.ego.push([t, p[0], p[1], heading, d / DT]);
            prev = *p;
        }
        for (k, agent) in agents.iter_mut().enumerate() {
            for step in 0..points.len() {
                agent.replay_step(step, scenario.t0_index + step as i64 + 1);
                let s = agent.last;
                rollout.agents[k].states.push([
                    (step + 1) as f64 * DT,
                    s.x,
                    s.y,
                    s.heading,
                    s.speed(),
                ]);
            }
        }
        rollout.replans.push(ReplanRecord {
            step: 0,
            t: 0.0,
            confidence: plan.confidence,
            plan: plan.points,
            raw_plan: plan.raw_points,
        });
        return Ok(rollout);
    }

    let mut ego_buffer = HistoryBuffer::new(&scenario.ego.states);
    let mut current_plan: Vec<[f64; 2]> = Vec::new();
    let mut plan_progress = 0usize;

    for step in 0..n_steps {
        if step % replan_steps == 0 {
            let obs = assemble_observation(scenario, &ego_buffer, &agents, step);
            match planner.plan(&obs) {
                Ok(plan) => {
                    if plan.points.len() < replan_steps {
                        return Err(Error::simulator(format!(
                            "planner returned {} points, need at least {replan_steps}",
                            plan.points.len()
                        )));
                    }
                    rollout.postprocess |= plan.raw_points.is_some();
                    rollout.replans.push(ReplanRecord {
                        step,
                        t: step as f64 * DT,
                        confidence: plan.confidence,
                        plan: plan.points.clone(),
                        raw_plan: plan.raw_points.clone(),
                    });
                    current_plan = plan.points;
                    plan_progress = 0;
                }
                Err(e) => {
                    log::warn!("planner failed at step {step}: {e}; rollout flagged partial");
                    rollout.partial = true;
                    return Ok(rollout);
                }
            }
        }

        // ego control toward the remaining plan
        let remaining = &current_plan[plan_progress.min(current_plan.len() - 1)..];
        let (accel, steer) = track_trajectory(&ego_state, remaining, DT, &cfg.tracker);
        ego_state = step_bicycle(&ego_state, accel, steer, DT);
        plan_progress += 1;

        // agents
        let t_next = scenario.t0_index + step as i64 + 1;
        match mode {
            SimMode::NonreactiveCl => {
                for agent in agents.iter_mut() {
                    agent.replay_step(step, t_next);
                }
            }
            SimMode::ReactiveCl => {
                // leader search against current poses (before anyone moves)
                let poses: Vec<([f64; 2], f64)> = agents
                    .iter()
                    .map(|a| ([a.last.x, a.last.y], a.hist.length))
                    .collect();
                let mut accels = Vec::with_capacity(agents.len());
                for (i, agent) in agents.iter().enumerate() {
                    let Some(path) = &agent.path else {
                        accels.push(0.0);
                        continue;
                    };
                    let mut best_gap = f64::INFINITY;
                    let mut leader_v = 0.0;
                    let mut consider = |pos: [f64; 2], len: f64, v: f64| {
                        if let Some(gap) = leader_gap(
                            path,
                            agent.s,
                            agent.hist.length,
                            pos,
                            len,
                            cfg.leader_lateral_band,
                        ) {
                            if gap < best_gap {
                                best_gap = gap;
                                leader_v = v;
                            }
                        }
                    };
                    consider([ego_state.x, ego_state.y], scenario.ego.length, ego_state.v);
                    for (j, (pos, len)) in poses.iter().enumerate() {
                        if j != i {
                            consider(*pos, *len, agents[j].v);
                        }
                    }
                    let idm_cfg = IdmParams { v0: agent.v_desired, ..cfg.idm };
                    accels.push(idm_accel(agent.v, best_gap, agent.v - leader_v, &idm_cfg));
                }
                for (agent, accel) in agents.iter_mut().zip(accels) {
                    agent.idm_step(accel, t_next);
                }
            }
            SimMode::OpenLoop => unreachable!(),
        }

        // record
        let t = (step + 1) as f64 * DT;
        rollout.ego.push(ego_row(t, &ego_state));
        ego_buffer.push(AgentState {
            t: t_next,
            x: ego_state.x,
            y: ego_state.y,
            heading: ego_state.heading,
            vx: ego_state.v * ego_state.heading.cos(),
            vy: ego_state.v * ego_state.heading.sin(),
            valid: true,
        });
        for (k, agent) in agents.iter().enumerate() {
            let s = agent.last;
            rollout.agents[k].states.push([t, s.x, s.y, s.heading, s.speed()]);
        }
    }

    Ok(rollout)
}

/// Builds the planner observation at a replan instant: simulated histories,
/// original map/routes, and the remaining logged futures.
fn assemble_observation(
    scenario: &Scenario,
    ego_buffer: &HistoryBuffer,
    agents: &[SimAgent],
    step: usize,
) -> Scenario {
    let remaining = scenario.t_f() - step;
    let mut gt = std::collections::BTreeMap::new();
    for (id, fut) in &scenario.gt_futures {
        let tail: Vec<_> = fut.iter().skip(step).take(remaining).copied().collect();
        gt.insert(*id, tail);
    }
    Scenario {
        id: scenario.id.clone(),
        dt: DT,
        t0_index: scenario.t0_index + step as i64,
        frame: Frame::Global,
        ego: AgentHistory { states: ego_buffer.to_states(0), ..scenario.ego.clone() },
        agents: agents
            .iter()
            .map(|a| AgentHistory { states: a.buffer.to_states(0), ..a.hist.clone() })
            .collect(),
        map: scenario.map.clone(),
        routes: scenario.routes.clone(),
        gt_futures: gt,
    }
}
