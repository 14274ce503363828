//! Rule-based trajectory refinement: a densified reference line from the
//! primary route bounds lateral displacement, predicted agent trajectories
//! drive collision checks, and a guarded speed-backoff iteration resolves
//! conflicts (the incumbent plan is only replaced by a candidate with no
//! more conflicts, so the conflict count never increases).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, OrientedRect};
use crate::scene::{RouteSet, DT};

pub const REFERENCE_SPACING: f64 = 0.5;

/// Densely resampled primary-route centerline with cumulative arc length.
#[derive(Debug, Clone)]
pub struct ReferenceLine {
    pub points: Vec<[f64; 2]>,
    pub cum_s: Vec<f64>,
}

impl ReferenceLine {
    pub fn total_length(&self) -> f64 {
        *self.cum_s.last().unwrap()
    }

    /// (arc length, signed lateral offset) of a point.
    pub fn to_frenet(&self, p: [f64; 2]) -> (f64, f64) {
        let (s, l, _) = geom::project_to_polyline(&self.points, &self.cum_s, p);
        (s, l)
    }

    pub fn from_frenet(&self, s: f64, l: f64) -> [f64; 2] {
        let base = geom::point_at_arc_length(&self.points, &self.cum_s, s);
        let tan = geom::tangent_at_arc_length(&self.points, &self.cum_s, s);
        // left normal
        [base[0] - tan[1] * l, base[1] + tan[0] * l]
    }
}

/// Concatenates the primary route polylines and resamples them at 0.5 m,
/// keeping both endpoints.
pub fn build_reference_line(routes: &RouteSet) -> Result<ReferenceLine> {
    if routes.primary.is_empty() {
        return Err(Error::postprocess("empty primary route".to_string()));
    }
    let mut chain: Vec<[f64; 2]> = Vec::new();
    for poly in &routes.primary {
        for p in &poly.points {
            if chain.last().map(|q| geom::dist(*q, *p) > 1e-9).unwrap_or(true) {
                chain.push(*p);
            }
        }
    }
    if chain.len() < 2 {
        return Err(Error::postprocess("degenerate primary route".to_string()));
    }
    let cum = geom::cumulative_lengths(&chain);
    let total = *cum.last().unwrap();
    let n = (total / REFERENCE_SPACING).floor() as usize;
    let mut points: Vec<[f64; 2]> =
        (0..=n).map(|k| geom::point_at_arc_length(&chain, &cum, k as f64 * REFERENCE_SPACING)).collect();
    if total - n as f64 * REFERENCE_SPACING > 1e-9 {
        points.push(chain[chain.len() - 1]);
    }
    let cum_s = geom::cumulative_lengths(&points);
    Ok(ReferenceLine { points, cum_s })
}

/// One predicted agent trajectory used for collision checking.
#[derive(Debug, Clone)]
pub struct AgentPrediction {
    pub id: u64,
    pub length: f64,
    pub width: f64,
    /// positions per future step, aligned with the plan's timebase
    pub traj: Vec<[f64; 2]>,
}

/// Overlap between the planned ego footprint and a predicted agent
/// footprint at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub step: usize,
    pub agent_id: u64,
    pub depth: f64,
}

fn headings_of(plan: &[[f64; 2]], initial: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(plan.len());
    let mut heading = initial;
    for i in 0..plan.len() {
        let (a, b) = if i + 1 < plan.len() {
            (plan[i], plan[i + 1])
        } else if i > 0 {
            (plan[i - 1], plan[i])
        } else {
            (plan[i], plan[i])
        };
        if geom::dist(a, b) > 1e-6 {
            heading = (b[1] - a[1]).atan2(b[0] - a[0]);
        }
        out.push(heading);
    }
    out
}

/// Per-step oriented-rectangle overlap tests between the ego plan and each
/// agent's predicted trajectory, sorted by step.
pub fn check_collisions(
    plan: &[[f64; 2]],
    ego_footprint: [f64; 2],
    predictions: &[AgentPrediction],
) -> Result<Vec<Conflict>> {
    for p in predictions {
        if p.traj.len() < plan.len() {
            return Err(Error::postprocess(format!(
                "prediction for agent {} covers {} steps, plan has {}",
                p.id,
                p.traj.len(),
                plan.len()
            )));
        }
    }
    let ego_headings = headings_of(plan, 0.0);
    let mut out = Vec::new();
    for (step, ego_p) in plan.iter().enumerate() {
        let ego_rect = OrientedRect {
            cx: ego_p[0],
            cy: ego_p[1],
            heading: ego_headings[step],
            length: ego_footprint[0],
            width: ego_footprint[1],
        };
        for pred in predictions {
            let pos = pred.traj[step];
            let next = pred.traj.get(step + 1).copied().unwrap_or(pos);
            let heading = if geom::dist(pos, next) > 1e-6 {
                (next[1] - pos[1]).atan2(next[0] - pos[0])
            } else if step > 0 {
                let prev = pred.traj[step - 1];
                if geom::dist(prev, pos) > 1e-6 {
                    (pos[1] - prev[1]).atan2(pos[0] - prev[0])
                } else {
                    0.0
                }
            } else {
                0.0
            };
            let rect = OrientedRect {
                cx: pos[0],
                cy: pos[1],
                heading,
                length: pred.length,
                width: pred.width,
            };
            if let Some(depth) = geom::rect_overlap_depth(&ego_rect, &rect) {
                out.push(Conflict { step, agent_id: pred.id, depth });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineParams {
    /// lateral clamp around the reference line (m)
    pub lat_max: f64,
    pub max_iter: usize,
    /// stop this far short of the first conflict (m)
    pub stop_margin: f64,
    /// extra backoff per iteration (m)
    pub backoff_step: f64,
    /// braking envelope deceleration (m/s^2)
    pub brake_decel: f64,
    /// second-difference smoothing passes on the capped speed profile
    pub smooth_passes: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            lat_max: 3.0,
            max_iter: 10,
            stop_margin: 2.0,
            backoff_step: 2.0,
            brake_decel: 3.0,
            smooth_passes: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub plan: Vec<[f64; 2]>,
    pub feasible: bool,
    /// incumbent conflict count after the clamp and after each iteration
    pub conflict_trace: Vec<usize>,
    /// reference line ended before the plan; only the clamp was applied
    pub clamp_only: bool,
}

/// Clamps each plan point to +-lat_max around the reference. Points already
/// inside the corridor are untouched (bit-exact fixpoint).
fn clamp_lateral(plan: &[[f64; 2]], reference: &ReferenceLine, lat_max: f64) -> Vec<[f64; 2]> {
    plan.iter()
        .map(|p| {
            let (s, l) = reference.to_frenet(*p);
            if l.abs() <= lat_max {
                *p
            } else {
                reference.from_frenet(s, l.clamp(-lat_max, lat_max))
            }
        })
        .collect()
}

/// Rebuilds the plan along its own geometry with speeds capped by a braking
/// envelope that stops at `s_allow`; the capped profile is smoothed with a
/// second-difference pass (endpoints preserved) before re-integration.
fn backoff_speed_profile(plan: &[[f64; 2]], s_allow: f64, params: &RefineParams) -> Vec<[f64; 2]> {
    let cum = geom::cumulative_lengths(plan);
    let mut speeds: Vec<f64> = plan
        .windows(2)
        .map(|w| geom::dist(w[0], w[1]) / DT)
        .collect();
    // forward-integrate positions under the braking envelope
    let mut s = 0.0;
    let mut out_s = Vec::with_capacity(plan.len());
    let cap = |s_now: f64| -> f64 {
        let room = (s_allow - s_now).max(0.0);
        (2.0 * params.brake_decel * room).sqrt()
    };
    for v in speeds.iter_mut() {
        *v = v.min(cap(s));
        s += *v * DT;
        out_s.push(s);
    }
    // smooth the capped profile; first/last values stay put
    let mut sm = speeds.clone();
    for _ in 0..params.smooth_passes {
        let prev = sm.clone();
        for i in 1..sm.len().saturating_sub(1) {
            sm[i] = 0.5 * prev[i] + 0.25 * (prev[i - 1] + prev[i + 1]);
            sm[i] = sm[i].min(cap(if i == 0 { 0.0 } else { out_s[i - 1] }));
        }
    }
    let mut s = 0.0;
    let mut out = Vec::with_capacity(plan.len());
    for v in &sm {
        s += v * DT;
        out.push(geom::point_at_arc_length(plan, &cum, s.min(*cum.last().unwrap())));
    }
    out
}

/// Iterative conflict resolution: lateral clamp, then speed backoff ahead
/// of the earliest conflict while conflicts remain. A candidate replaces
/// the incumbent only when it does not add conflicts.
pub fn refine_trajectory(
    plan: &[[f64; 2]],
    reference: &ReferenceLine,
    ego_footprint: [f64; 2],
    predictions: &[AgentPrediction],
    params: &RefineParams,
) -> Result<RefineResult> {
    if plan.is_empty() {
        return Err(Error::postprocess("empty plan".to_string()));
    }
    let plan_cum = geom::cumulative_lengths(plan);
    let clamp_only = {
        let (s_end, _) = reference.to_frenet(*plan.last().unwrap());
        // plan progress beyond the reference end (with slack) degrades to clamp-only
        *plan_cum.last().unwrap() > reference.total_length() + 5.0 && s_end >= reference.total_length() - 1e-6
    };

    let mut incumbent = clamp_lateral(plan, reference, params.lat_max);
    let mut conflicts = check_collisions(&incumbent, ego_footprint, predictions)?;
    let mut trace = vec![conflicts.len()];

    if !clamp_only {
        let mut extra = 0.0;
        for _ in 0..params.max_iter {
            if conflicts.is_empty() {
                break;
            }
            let first = conflicts[0];
            let cum = geom::cumulative_lengths(&incumbent);
            let s_conflict = cum[first.step.min(cum.len() - 1)];
            let s_allow = (s_conflict - params.stop_margin - extra).max(0.0);
            extra += params.backoff_step;
            let candidate = backoff_speed_profile(&incumbent, s_allow, params);
            let cand_conflicts = check_collisions(&candidate, ego_footprint, predictions)?;
            if cand_conflicts.len() <= conflicts.len() {
                incumbent = candidate;
                conflicts = cand_conflicts;
            }
            trace.push(conflicts.len());
        }
    }

    Ok(RefineResult { plan: incumbent, feasible: conflicts.is_empty(), conflict_trace: trace, clamp_only })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Polyline, PolylineKind};

    fn straight_routes(len: f64) -> RouteSet {
        RouteSet {
            primary: vec![Polyline {
                id: 1,
                kind: PolylineKind::Route,
                points: vec![[0.0, 0.0], [len, 0.0]],
            }],
            secondary: vec![],
        }
    }

    #[test]
    fn reference_line_spacing_and_on_curve() {
        let reference = build_reference_line(&straight_routes(10.0)).unwrap();
        assert_eq!(reference.points.len(), 21);
        for (i, p) in reference.points.iter().enumerate() {
            assert!((p[0] - i as f64 * 0.5).abs() < 1e-9);
            assert!(p[1].abs() < 1e-9);
        }
    }

    #[test]
    fn l_shaped_route_arc_length() {
        let routes = RouteSet {
            primary: vec![Polyline {
                id: 1,
                kind: PolylineKind::Route,
                points: vec![[0.0, 0.0], [7.0, 0.0], [7.0, 4.0]],
            }],
            secondary: vec![],
        };
        let reference = build_reference_line(&routes).unwrap();
        assert!((reference.total_length() - 11.0).abs() < 1e-6);
        // every reference point sits on the route
        let chain = [[0.0, 0.0], [7.0, 0.0], [7.0, 4.0]];
        let cum = geom::cumulative_lengths(&chain);
        for p in &reference.points {
            let (_, l, _) = geom::project_to_polyline(&chain, &cum, *p);
            assert!(l.abs() < 1e-9);
        }
    }

    fn straight_plan(v: f64, steps: usize) -> Vec<[f64; 2]> {
        (1..=steps).map(|k| [k as f64 * v * DT, 0.0]).collect()
    }

    #[test]
    fn parallel_lanes_do_not_conflict() {
        let plan = straight_plan(8.0, 30);
        let pred = AgentPrediction {
            id: 1,
            length: 4.5,
            width: 2.0,
            traj: (0..30).map(|k| [k as f64 * 0.8, 4.0]).collect(),
        };
        let conflicts = check_collisions(&plan, [4.5, 2.0], &[pred]).unwrap();
        assert!(conflicts.is_empty());
    }

    #[test]
    fn identical_trajectories_conflict_everywhere() {
        let plan = straight_plan(8.0, 20);
        let pred = AgentPrediction { id: 1, length: 4.5, width: 2.0, traj: plan.clone() };
        let conflicts = check_collisions(&plan, [4.5, 2.0], &[pred]).unwrap();
        assert_eq!(conflicts.len(), 20);
        assert!(conflicts.windows(2).all(|w| w[0].step <= w[1].step));
    }

    #[test]
    fn crossing_paths_conflict_in_a_cluster() {
        // ego drives +x at 10 m/s, agent drives -y crossing x=20 around step 20
        let plan = straight_plan(10.0, 40);
        let traj: Vec<[f64; 2]> = (0..40).map(|k| [20.0, 20.0 - k as f64 * 1.0]).collect();
        let pred = AgentPrediction { id: 7, length: 4.5, width: 2.0, traj };
        let conflicts = check_collisions(&plan, [4.5, 2.0], &[pred]).unwrap();
        assert!(!conflicts.is_empty());
        let steps: Vec<usize> = conflicts.iter().map(|c| c.step).collect();
        assert!(steps.iter().all(|&s| (15..=25).contains(&s)), "steps {steps:?}");
    }

    #[test]
    fn timebase_mismatch_is_an_error() {
        let plan = straight_plan(8.0, 30);
        let pred = AgentPrediction { id: 1, length: 4.0, width: 2.0, traj: vec![[0.0, 0.0]; 10] };
        assert!(check_collisions(&plan, [4.5, 2.0], &[pred]).is_err());
    }

    #[test]
    fn conflict_free_plan_is_a_fixpoint() {
        let reference = build_reference_line(&straight_routes(200.0)).unwrap();
        let plan = straight_plan(8.0, 40);
        let result =
            refine_trajectory(&plan, &reference, [4.5, 2.0], &[], &RefineParams::default()).unwrap();
        assert!(result.feasible);
        for (a, b) in plan.iter().zip(&result.plan) {
            assert!(geom::dist(*a, *b) < 1e-9);
        }
    }

    #[test]
    fn lateral_clamp_bounds_offset_and_is_idempotent() {
        let reference = build_reference_line(&straight_routes(100.0)).unwrap();
        let plan: Vec<[f64; 2]> = (1..=30).map(|k| [k as f64, 5.0]).collect();
        let once = clamp_lateral(&plan, &reference, 3.0);
        for p in &once {
            assert!((p[1] - 3.0).abs() < 1e-9);
        }
        let twice = clamp_lateral(&once, &reference, 3.0);
        assert_eq!(once, twice);
    }

    #[test]
    fn static_obstacle_produces_feasible_stop_with_gap() {
        let reference = build_reference_line(&straight_routes(200.0)).unwrap();
        let plan = straight_plan(10.0, 50); // drives straight through the obstacle
        let obstacle = [30.0, 0.0];
        let pred = AgentPrediction {
            id: 1,
            length: 4.5,
            width: 2.0,
            traj: vec![obstacle; 50],
        };
        let params = RefineParams::default();
        let result = refine_trajectory(&plan, &reference, [4.5, 2.0], &[pred], &params).unwrap();
        assert!(result.feasible, "trace {:?}", result.conflict_trace);
        // bumper gap at the closest approach
        let min_gap = result
            .plan
            .iter()
            .map(|p| geom::dist(*p, obstacle) - 4.5)
            .fold(f64::INFINITY, f64::min);
        assert!(min_gap >= 1.0, "min gap {min_gap}");
        // the ego actually stops
        let last_two = &result.plan[result.plan.len() - 2..];
        assert!(geom::dist(last_two[0], last_two[1]) < 0.05);
    }

    #[test]
    fn conflict_count_monotone_on_random_crossings() {
        use rand::{Rng, SeedableRng};
        let reference = build_reference_line(&straight_routes(300.0)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let v = rng.gen_range(5.0..12.0);
            let plan = straight_plan(v, 50);
            let cross_x = rng.gen_range(10.0..40.0);
            let speed = rng.gen_range(3.0..9.0);
            let start_y = rng.gen_range(5.0..25.0);
            let traj: Vec<[f64; 2]> =
                (0..50).map(|k| [cross_x, start_y - k as f64 * speed * DT]).collect();
            let pred = AgentPrediction { id: 1, length: 4.5, width: 2.0, traj };
            let result =
                refine_trajectory(&plan, &reference, [4.5, 2.0], &[pred], &RefineParams::default())
                    .unwrap();
            for w in result.conflict_trace.windows(2) {
                assert!(w[1] <= w[0], "trace {:?}", result.conflict_trace);
            }
        }
    }
}
