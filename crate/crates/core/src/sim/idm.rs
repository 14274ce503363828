//! Intelligent Driver Model car-following acceleration.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// desired free-flow speed (m/s)
    pub v0: f64,
    /// minimum standstill gap (m)
    pub s0: f64,
    /// desired time headway (s)
    pub t_headway: f64,
    /// maximum acceleration (m/s^2)
    pub a_max: f64,
    /// comfortable deceleration (m/s^2)
    pub b_comfort: f64,
    /// free-flow exponent
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams { v0: 10.0, s0: 2.0, t_headway: 1.5, a_max: 2.0, b_comfort: 2.0, delta: 4.0 }
    }
}

impl IdmParams {
    /// Emergency braking bound: twice the comfortable deceleration.
    pub fn b_hard(&self) -> f64 {
        2.0 * self.b_comfort
    }
}

/// IDM acceleration for speed `v`, bumper gap `gap` to the leader and
/// closing speed `closing` (= v - v_leader). Pass `gap = f64::INFINITY`
/// when there is no leader; a non-positive gap with a leader present
/// returns the emergency deceleration.
pub fn idm_accel(v: f64, gap: f64, closing: f64, p: &IdmParams) -> f64 {
    if gap <= 0.0 {
        return -p.b_hard();
    }
    let free = 1.0 - (v / p.v0).powf(p.delta);
    let interaction = if gap.is_finite() {
        let s_star =
            p.s0 + (v * p.t_headway + v * closing / (2.0 * (p.a_max * p.b_comfort).sqrt())).max(0.0);
        (s_star / gap).powi(2)
    } else {
        0.0
    };
    (p.a_max * (free - interaction)).clamp(-p.b_hard(), p.a_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_flow_equilibrium_at_desired_speed() {
        let p = IdmParams::default();
        assert!(idm_accel(p.v0, f64::INFINITY, 0.0, &p).abs() < 1e-12);
    }

    #[test]
    fn standstill_equilibrium_at_minimum_gap() {
        let p = IdmParams::default();
        // v = 0, gap = s0, closing = 0 -> s* = s0 -> a = a_max (1 - 1) = 0
        assert!(idm_accel(0.0, p.s0, 0.0, &p).abs() < 1e-12);
    }

    #[test]
    fn free_road_formula_value() {
        let p = IdmParams { v0: 10.0, a_max: 2.0, delta: 4.0, ..IdmParams::default() };
        let a = idm_accel(5.0, f64::INFINITY, 0.0, &p);
        assert!((a - 2.0 * (1.0 - 0.0625)).abs() < 1e-12, "a = {a}");
    }

    #[test]
    fn emergency_on_nonpositive_gap() {
        let p = IdmParams::default();
        assert_eq!(idm_accel(5.0, 0.0, 0.0, &p), -p.b_hard());
        assert_eq!(idm_accel(5.0, -1.0, 0.0, &p), -p.b_hard());
    }

    #[test]
    fn accel_clamped_to_hard_braking() {
        let p = IdmParams::default();
        // tiny gap at speed -> clamped to -b_hard
        assert_eq!(idm_accel(10.0, 0.5, 10.0, &p), -p.b_hard());
    }
}
