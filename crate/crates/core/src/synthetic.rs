//! Procedural scenario generation for tests and demos: straight driving,
//! stop-behind-lead (IDM-generated log), lane change, and an unprotected
//! left turn. Fully deterministic from the seed; scenes are laid out in a
//! local frame and then shoved through a random rigid transform so the
//! global frame is non-trivial.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{self, RigidTransform};
use crate::scene::{
    AgentHistory, AgentKind, AgentState, Frame, FuturePoint, Polyline, PolylineKind, RouteSet,
    Scenario, DT,
};
use crate::sim::{idm_accel, IdmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Straight,
    StopBehindLead,
    LaneChange,
    UnprotectedLeft,
}

impl ScenarioKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "straight" => Some(ScenarioKind::Straight),
            "stop-behind-lead" => Some(ScenarioKind::StopBehindLead),
            "lane-change" => Some(ScenarioKind::LaneChange),
            "unprotected-left" => Some(ScenarioKind::UnprotectedLeft),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Straight => "straight",
            ScenarioKind::StopBehindLead => "stop-behind-lead",
            ScenarioKind::LaneChange => "lane-change",
            ScenarioKind::UnprotectedLeft => "unprotected-left",
        }
    }
}

fn line_points(from: [f64; 2], to: [f64; 2], spacing: f64) -> Vec<[f64; 2]> {
    let len = geom::dist(from, to);
    let n = (len / spacing).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            [from[0] + (to[0] - from[0]) * t, from[1] + (to[1] - from[1]) * t]
        })
        .collect()
}

/// Positions sampled along a path polyline by a per-step speed sequence;
/// returns (position, heading, speed) per step.
fn drive_along(
    path: &[[f64; 2]],
    cum: &[f64],
    s0: f64,
    speeds: &[f64],
) -> Vec<([f64; 2], f64, f64)> {
    let mut s = s0;
    let mut out = Vec::with_capacity(speeds.len());
    for &v in speeds {
        let p = geom::point_at_arc_length(path, cum, s);
        let tan = geom::tangent_at_arc_length(path, cum, s);
        out.push((p, tan[1].atan2(tan[0]), v));
        s += v * DT;
    }
    out
}

fn state_at(t: i64, p: [f64; 2], heading: f64, speed: f64) -> AgentState {
    AgentState {
        t,
        x: p[0],
        y: p[1],
        heading: geom::wrap_angle(heading),
        vx: speed * heading.cos(),
        vy: speed * heading.sin(),
        valid: true,
    }
}

struct TraceParts {
    history: Vec<AgentState>,
    future: Vec<FuturePoint>,
}

/// Splits a full (t_h + 1 + t_f)-step trace into history + future.
fn split_trace(trace: &[([f64; 2], f64, f64)], t_h: usize) -> TraceParts {
    let history = trace[..=t_h]
        .iter()
        .enumerate()
        .map(|(i, &(p, h, v))| state_at(i as i64, p, h, v))
        .collect();
    let future =
        trace[t_h + 1..].iter().map(|&(p, _, _)| FuturePoint { x: p[0], y: p[1], valid: true }).collect();
    TraceParts { history, future }
}

fn car(id: u64, states: Vec<AgentState>) -> AgentHistory {
    AgentHistory { id, kind: AgentKind::Car, states, length: 4.5, width: 1.9 }
}

fn lane_map(x_min: f64, x_max: f64) -> Vec<Polyline> {
    vec![
        Polyline {
            id: 100,
            kind: PolylineKind::LaneCenter,
            points: line_points([x_min, 0.0], [x_max, 0.0], 25.0),
        },
        Polyline {
            id: 101,
            kind: PolylineKind::LaneCenter,
            points: line_points([x_min, 3.5], [x_max, 3.5], 25.0),
        },
        Polyline {
            id: 102,
            kind: PolylineKind::LaneDivider,
            points: line_points([x_min, 1.75], [x_max, 1.75], 25.0),
        },
    ]
}

fn straight_route(id: u64, y: f64) -> Polyline {
    Polyline { id, kind: PolylineKind::Route, points: line_points([-20.0, y], [300.0, y], 20.0) }
}

/// Generates one scenario of the given kind. The ego's t0 always sits at
/// step index `t_h`.
pub fn gen_synthetic(kind: ScenarioKind, seed: u64, t_h: usize, t_f: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::config::derive_seed(seed, kind.name()));
    let total = t_h + 1 + t_f;
    let local = match kind {
        ScenarioKind::Straight => {
            let v = rng.gen_range(8.0..12.0);
            let path = line_points([-50.0, 0.0], [320.0, 0.0], 20.0);
            let cum = geom::cumulative_lengths(&path);
            let speeds = vec![v; total];
            // ego at arc length 50 - v*t_h*dt at trace start so t0 lands on x=0
            let s0 = 50.0 - v * t_h as f64 * DT;
            let trace = drive_along(&path, &cum, s0, &speeds);
            let parts = split_trace(&trace, t_h);
            let mut gt = BTreeMap::new();
            gt.insert(0u64, parts.future);
            Scenario {
                id: format!("straight-{seed}"),
                dt: DT,
                t0_index: t_h as i64,
                frame: Frame::Global,
                ego: car(0, parts.history),
                agents: vec![],
                map: lane_map(-50.0, 320.0),
                routes: RouteSet { primary: vec![straight_route(200, 0.0)], secondary: vec![] },
                gt_futures: gt,
            }
        }
        ScenarioKind::StopBehindLead => stop_behind_lead(&mut rng, t_h, t_f),
        ScenarioKind::LaneChange => lane_change(&mut rng, t_h, t_f),
        ScenarioKind::UnprotectedLeft => unprotected_left(&mut rng, t_h, t_f),
    };
    // random rigid motion into the global frame
    let tf = RigidTransform::new(
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        rng.gen_range(-100.0..100.0),
        rng.gen_range(-100.0..100.0),
    );
    let mut out = crate::scene::transform_scenario(&local, &tf, Frame::Global);
    out.id = format!("{}-{seed}", kind.name());
    out
}

fn stop_behind_lead(rng: &mut ChaCha8Rng, t_h: usize, t_f: usize) -> Scenario {
    let total = t_h + 1 + t_f;
    let v0 = rng.gen_range(6.0..10.0);
    let gap0 = rng.gen_range(25.0..40.0);
    let decel = rng.gen_range(1.5..2.5);
    let idm = IdmParams { v0, ..IdmParams::default() };

    // integrate lead + IDM ego from trace start
    let mut lead_x = gap0; // relative to ego start
    let mut lead_v = v0;
    let mut ego_x = 0.0;
    let mut ego_v = v0;
    let mut lead_trace = Vec::with_capacity(total);
    let mut ego_trace = Vec::with_capacity(total);
    let car_len = 4.5;
    for step in 0..total {
        lead_trace.push(([lead_x, 0.0], 0.0, lead_v));
        ego_trace.push(([ego_x, 0.0], 0.0, ego_v));
        // lead brakes once the "current" time is reached
        let lead_a = if step >= t_h { -decel } else { 0.0 };
        lead_v = (lead_v + lead_a * DT).max(0.0);
        lead_x += lead_v * DT;
        let gap = lead_x - ego_x - car_len;
        let a = idm_accel(ego_v, gap, ego_v - lead_v, &idm);
        ego_v = (ego_v + a * DT).max(0.0);
        ego_x += ego_v * DT;
    }
    // shift so the ego's t0 position is the local origin
    let shift = ego_trace[t_h].0[0];
    for tr in [&mut lead_trace, &mut ego_trace] {
        for p in tr.iter_mut() {
            p.0[0] -= shift;
        }
    }
    let ego_parts = split_trace(&ego_trace, t_h);
    let lead_parts = split_trace(&lead_trace, t_h);
    let mut lead_hist = car(1, lead_parts.history);
    lead_hist.length = car_len;
    let mut gt = BTreeMap::new();
    gt.insert(0u64, ego_parts.future);
    gt.insert(1u64, lead_parts.future);
    Scenario {
        id: "stop-behind-lead".to_string(),
        dt: DT,
        t0_index: t_h as i64,
        frame: Frame::Global,
        ego: car(0, ego_parts.history),
        agents: vec![lead_hist],
        map: lane_map(-50.0, 320.0),
        routes: RouteSet { primary: vec![straight_route(200, 0.0)], secondary: vec![] },
        gt_futures: gt,
    }
}

fn lane_change(rng: &mut ChaCha8Rng, t_h: usize, t_f: usize) -> Scenario {
    let total = t_h + 1 + t_f;
    let v = rng.gen_range(8.0..12.0);
    // lateral blend from lane y=0 to y=3.5 between x = 5 and x = 35
    let blend = |x: f64| -> f64 {
        let t = ((x - 5.0) / 30.0).clamp(0.0, 1.0);
        3.5 * (3.0 * t * t - 2.0 * t * t * t)
    };
    let mut trace = Vec::with_capacity(total);
    for step in 0..total {
        let x = (step as f64 - t_h as f64) * v * DT;
        let y = blend(x);
        let dydx = (blend(x + 0.01) - blend(x - 0.01)) / 0.02;
        let heading = dydx.atan2(1.0);
        trace.push(([x, y], heading, v));
    }
    let parts = split_trace(&trace, t_h);
    let mut gt = BTreeMap::new();
    gt.insert(0u64, parts.future);
    Scenario {
        id: "lane-change".to_string(),
        dt: DT,
        t0_index: t_h as i64,
        frame: Frame::Global,
        ego: car(0, parts.history),
        agents: vec![],
        map: lane_map(-50.0, 320.0),
        routes: RouteSet {
            primary: vec![straight_route(200, 3.5)],
            secondary: vec![straight_route(201, 0.0)],
        },
        gt_futures: gt,
    }
}

fn unprotected_left(rng: &mut ChaCha8Rng, t_h: usize, t_f: usize) -> Scenario {
    let total = t_h + 1 + t_f;
    // route: straight east to (-10, 0), quarter arc to (0, 10), north to (0, 80)
    let mut route_pts = line_points([-40.0, 0.0], [-10.0, 0.0], 10.0);
    for i in 1..=9 {
        let phi = i as f64 / 9.0 * std::f64::consts::FRAC_PI_2;
        route_pts.push([-10.0 + 10.0 * phi.sin(), 10.0 - 10.0 * phi.cos()]);
    }
    route_pts.extend(line_points([0.0, 10.0], [0.0, 80.0], 10.0).into_iter().skip(1));
    let cum = geom::cumulative_lengths(&route_pts);

    let v0 = rng.gen_range(6.0..9.0);
    let v_turn = 4.0;
    let turn_start = 30.0; // arc length where the curve begins
    let turn_end = turn_start + 10.0 * std::f64::consts::FRAC_PI_2;
    // speed profile by arc length: slow down into the turn, back up after
    let speed_at = |s: f64| -> f64 {
        if s < turn_start - 8.0 {
            v0
        } else if s < turn_start {
            v0 + (v_turn - v0) * (s - (turn_start - 8.0)) / 8.0
        } else if s < turn_end {
            v_turn
        } else {
            (v_turn + (s - turn_end) * 0.5).min(v0)
        }
    };
    let s_t0 = 20.0;
    let mut s = s_t0 - v0 * t_h as f64 * DT;
    let mut speeds = Vec::with_capacity(total);
    for _ in 0..total {
        let v = speed_at(s.max(0.0));
        speeds.push(v);
        s += v * DT;
    }
    let trace = drive_along(&route_pts, &cum, s_t0 - v0 * t_h as f64 * DT, &speeds);
    let parts = split_trace(&trace, t_h);

    // oncoming vehicle westbound on y = 3.5
    let ov = rng.gen_range(6.0..10.0);
    let on_path = line_points([60.0, 3.5], [-60.0, 3.5], 10.0);
    let on_cum = geom::cumulative_lengths(&on_path);
    let on_speeds = vec![ov; total];
    let on_s0 = 35.0 - ov * t_h as f64 * DT; // at x = 25 when t0 comes around
    let on_trace = drive_along(&on_path, &on_cum, on_s0, &on_speeds);
    let on_parts = split_trace(&on_trace, t_h);

    let mut map = lane_map(-50.0, 60.0);
    map.push(Polyline {
        id: 103,
        kind: PolylineKind::LaneCenter,
        points: line_points([0.0, 5.0], [0.0, 80.0], 15.0),
    });
    map.push(Polyline {
        id: 104,
        kind: PolylineKind::Crosswalk,
        points: line_points([-8.0, -4.0], [-8.0, 15.0], 5.0),
    });

    let mut gt = BTreeMap::new();
    gt.insert(0u64, parts.future);
    gt.insert(1u64, on_parts.future);
    Scenario {
        id: "unprotected-left".to_string(),
        dt: DT,
        t0_index: t_h as i64,
        frame: Frame::Global,
        ego: car(0, parts.history),
        agents: vec![car(1, on_parts.history)],
        map,
        routes: RouteSet {
            primary: vec![Polyline { id: 200, kind: PolylineKind::Route, points: route_pts }],
            secondary: vec![Polyline {
                id: 201,
                kind: PolylineKind::Route,
                points: line_points([-40.0, 0.0], [60.0, 0.0], 10.0),
            }],
        },
        gt_futures: gt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{load_scenario, save_scenario};

    #[test]
    fn all_kinds_validate_and_round_trip() {
        for kind in [
            ScenarioKind::Straight,
            ScenarioKind::StopBehindLead,
            ScenarioKind::LaneChange,
            ScenarioKind::UnprotectedLeft,
        ] {
            let s = gen_synthetic(kind, 3, 15, 50);
            s.validate().unwrap_or_else(|e| panic!("{}: {e}", kind.name()));
            let loaded = load_scenario(&save_scenario(&s)).unwrap();
            assert_eq!(loaded, s, "{}", kind.name());
        }
    }

    #[test]
    fn same_seed_is_identical_different_seed_is_not() {
        let a = gen_synthetic(ScenarioKind::Straight, 9, 15, 50);
        let b = gen_synthetic(ScenarioKind::Straight, 9, 15, 50);
        assert_eq!(save_scenario(&a), save_scenario(&b));
        let c = gen_synthetic(ScenarioKind::Straight, 10, 15, 50);
        assert_ne!(save_scenario(&a), save_scenario(&c));
    }

    #[test]
    fn straight_ego_is_constant_velocity_on_route() {
        let s = gen_synthetic(ScenarioKind::Straight, 4, 10, 30);
        let n = crate::scene::normalize_to_ego_frame(&s).unwrap();
        let fut = &n.gt_futures[&0];
        let v = n.ego.current().speed();
        for (k, p) in fut.iter().enumerate() {
            assert!((p.x - v * DT * (k as f64 + 1.0)).abs() < 1e-6);
            assert!(p.y.abs() < 1e-6);
        }
        // the route contains the ego GT line
        let route = &n.routes.primary[0];
        let cum = geom::cumulative_lengths(&route.points);
        for p in fut.iter() {
            let (_, l, _) = geom::project_to_polyline(&route.points, &cum, [p.x, p.y]);
            assert!(l.abs() < 1e-6);
        }
    }

    #[test]
    fn stop_behind_lead_ego_stops_with_gap() {
        let s = gen_synthetic(ScenarioKind::StopBehindLead, 8, 15, 80);
        let ego_fut = &s.gt_futures[&0];
        let lead_fut = &s.gt_futures[&1];
        let ego_end = ego_fut.last().unwrap();
        let lead_end = lead_fut.last().unwrap();
        let gap = geom::dist([ego_end.x, ego_end.y], [lead_end.x, lead_end.y]) - 4.5;
        assert!(gap >= IdmParams::default().s0 - 0.1, "gap {gap}");
        // ego slows down over the horizon
        let early = geom::dist(
            [ego_fut[0].x, ego_fut[0].y],
            [ego_fut[1].x, ego_fut[1].y],
        );
        let late = geom::dist(
            [ego_fut[ego_fut.len() - 2].x, ego_fut[ego_fut.len() - 2].y],
            [ego_end.x, ego_end.y],
        );
        assert!(late < early);
    }

    #[test]
    fn lane_change_has_secondary_route() {
        let s = gen_synthetic(ScenarioKind::LaneChange, 2, 15, 50);
        assert_eq!(s.routes.secondary.len(), 1);
        let n = crate::scene::normalize_to_ego_frame(&s).unwrap();
        let end = n.gt_futures[&0].last().unwrap();
        assert!(end.y.abs() > 1.0, "ego should have moved laterally, y = {}", end.y);
    }
}
