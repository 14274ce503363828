//! Kinematic bicycle integration and the pure-pursuit + speed-profile
//! tracking controller that drives the ego along a planned trajectory.

use serde::{Deserialize, Serialize};

use crate::geom::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoDynamicState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    pub wheelbase: f64,
}

/// One kinematic-bicycle step; speed clamps at zero, heading stays wrapped.
pub fn step_bicycle(state: &EgoDynamicState, accel: f64, steer: f64, dt: f64) -> EgoDynamicState {
    debug_assert!(dt > 0.0);
    EgoDynamicState {
        x: state.x + state.v * state.heading.cos() * dt,
        y: state.y + state.v * state.heading.sin() * dt,
        heading: wrap_angle(state.heading + state.v / state.wheelbase * steer.tan() * dt),
        v: (state.v + accel * dt).max(0.0),
        wheelbase: state.wheelbase,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerParams {
    pub min_lookahead: f64,
    /// lookahead distance = max(min_lookahead, lookahead_gain * v)
    pub lookahead_gain: f64,
    pub max_steer: f64,
    pub accel_limit: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams { min_lookahead: 3.0, lookahead_gain: 1.0, max_steer: 0.6, accel_limit: 4.0 }
    }
}

/// Controls toward the remaining plan (`plan[0]` is the point the ego
/// should reach one step from now). Pure-pursuit steering toward a
/// lookahead point; longitudinal accel closes the gap to the plan's
/// implied speed profile.
pub fn track_trajectory(
    state: &EgoDynamicState,
    plan: &[[f64; 2]],
    dt: f64,
    params: &TrackerParams,
) -> (f64, f64) {
    assert!(!plan.is_empty(), "track_trajectory needs a non-empty plan");
    let (sin, cos) = state.heading.sin_cos();

    // longitudinal: distance along heading to the next plan point, over dt
    let next = plan[0];
    let along = (next[0] - state.x) * cos + (next[1] - state.y) * sin;
    let v_des = along / dt;
    let accel = ((v_des - state.v) / dt).clamp(-params.accel_limit, params.accel_limit);

    // lateral: pure pursuit toward the first point at lookahead distance
    let lookahead = params.min_lookahead.max(params.lookahead_gain * state.v);
    let target = plan
        .iter()
        .find(|p| ((p[0] - state.x).powi(2) + (p[1] - state.y).powi(2)).sqrt() >= lookahead)
        .or_else(|| plan.last())
        .unwrap();
    let dx = target[0] - state.x;
    let dy = target[1] - state.y;
    let ld = (dx * dx + dy * dy).sqrt();
    let steer = if ld < 1e-9 {
        0.0
    } else {
        let local_x = dx * cos + dy * sin;
        let local_y = -dx * sin + dy * cos;
        let alpha = local_y.atan2(local_x);
        if alpha.abs() > std::f64::consts::FRAC_PI_2 {
            // target behind the vehicle: saturate toward it
            params.max_steer * if alpha >= 0.0 { 1.0 } else { -1.0 }
        } else {
            let curvature = 2.0 * alpha.sin() / ld;
            (state.wheelbase * curvature).atan().clamp(-params.max_steer, params.max_steer)
        }
    };
    (accel, steer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ego(x: f64, y: f64, heading: f64, v: f64) -> EgoDynamicState {
        EgoDynamicState { x, y, heading, v, wheelbase: 2.8 }
    }

    #[test]
    fn straight_motion_advances_exactly() {
        let s = step_bicycle(&ego(0.0, 0.0, 0.0, 1.0), 0.0, 0.0, 1.0);
        assert!((s.x - 1.0).abs() < 1e-12 && s.y.abs() < 1e-12);
        assert_eq!(s.v, 1.0);
    }

    #[test]
    fn zero_speed_never_moves() {
        let s = step_bicycle(&ego(2.0, -1.0, 0.7, 0.0), 0.0, 0.5, 0.1);
        assert_eq!((s.x, s.y, s.heading), (2.0, -1.0, 0.7));
    }

    #[test]
    fn speed_clamps_at_zero() {
        let s = step_bicycle(&ego(0.0, 0.0, 0.0, 0.5), -10.0, 0.0, 0.2);
        assert_eq!(s.v, 0.0);
    }

    #[test]
    fn constant_steer_closes_a_circle() {
        // radius R = L / tan(steer); drive one full circle at fine dt
        let steer: f64 = 0.2;
        let wheelbase = 2.8;
        let radius = wheelbase / steer.tan();
        let v = 5.0;
        let period = 2.0 * std::f64::consts::PI * radius / v;
        let dt = 1e-3;
        let mut s = ego(0.0, 0.0, 0.0, v);
        let steps = (period / dt).round() as usize;
        for _ in 0..steps {
            s = step_bicycle(&s, 0.0, steer, dt);
        }
        let err = (s.x * s.x + s.y * s.y).sqrt();
        assert!(err < 0.01 * radius, "closure error {err} vs radius {radius}");
    }

    #[test]
    fn on_track_equilibrium_is_null_command() {
        let v = 6.0;
        let dt = 0.1;
        let plan: Vec<[f64; 2]> = (1..=30).map(|k| [k as f64 * v * dt, 0.0]).collect();
        let (accel, steer) = track_trajectory(&ego(0.0, 0.0, 0.0, v), &plan, dt, &TrackerParams::default());
        assert!(accel.abs() < 1e-6, "accel {accel}");
        assert!(steer.abs() < 1e-6, "steer {steer}");
    }

    #[test]
    fn plan_behind_saturates_steering() {
        let plan = vec![[-10.0, 0.5], [-12.0, 0.5]];
        let p = TrackerParams::default();
        let (_, steer) = track_trajectory(&ego(0.0, 0.0, 0.0, 3.0), &plan, 0.1, &p);
        assert!((steer.abs() - p.max_steer).abs() < 1e-12);
    }

    #[test]
    fn lateral_offset_converges() {
        // straight plan along y = 0, ego starts 1 m off at matching speed
        let v = 5.0;
        let dt = 0.1;
        let p = TrackerParams::default();
        let mut s = ego(0.0, 1.0, 0.0, v);
        for step in 0..50 {
            let plan: Vec<[f64; 2]> =
                (1..=60).map(|k| [(step + k) as f64 * v * dt, 0.0]).collect();
            let (a, st) = track_trajectory(&s, &plan, dt, &p);
            s = step_bicycle(&s, a, st, dt);
        }
        assert!(s.y.abs() < 0.1, "lateral error {}", s.y);
    }
}
