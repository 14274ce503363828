//! Displacement metrics (ADE/FDE, min-over-top-k) and the simplified
//! closed-loop score card (collision and corridor gates, progress, comfort
//! and speed-compliance terms).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, OrientedRect};
use crate::postprocess::build_reference_line;
use crate::scene::{FuturePoint, Scenario};
use crate::sim::Rollout;

/// Mean Euclidean displacement over valid steps.
pub fn ade(pred: &[[f64; 2]], gt: &[FuturePoint]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::metrics(format!("ade: {} pred vs {} gt steps", pred.len(), gt.len())));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if g.valid {
            acc += geom::dist(*p, [g.x, g.y]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::metrics("ade: no valid steps".to_string()));
    }
    Ok(acc / n as f64)
}

/// Euclidean displacement at the last valid step.
pub fn fde(pred: &[[f64; 2]], gt: &[FuturePoint]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::metrics(format!("fde: {} pred vs {} gt steps", pred.len(), gt.len())));
    }
    for (p, g) in pred.iter().zip(gt).rev() {
        if g.valid {
            return Ok(geom::dist(*p, [g.x, g.y]));
        }
    }
    Err(Error::metrics("fde: no valid steps".to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispMetric {
    Ade,
    Fde,
}

/// Minimum metric value among the k highest-score valid modes (all valid
/// modes when fewer). Score ties resolve toward the lower mode index.
pub fn min_over_top_k(
    trajs: &[Vec<[f64; 2]>],
    scores: &[f64],
    valid: &[bool],
    gt: &[FuturePoint],
    k: usize,
    metric: DispMetric,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..trajs.len()).filter(|&m| valid[m]).collect();
    if order.is_empty() {
        return Err(Error::metrics("min_over_top_k: no valid modes".to_string()));
    }
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut best = f64::INFINITY;
    for &m in order.iter().take(k) {
        let v = match metric {
            DispMetric::Ade => ade(&trajs[m], gt)?,
            DispMetric::Fde => fde(&trajs[m], gt)?,
        };
        best = best.min(v);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    /// lateral corridor half-width around the route centerline (m)
    pub corridor_half_width: f64,
    pub accel_limit: f64,
    pub jerk_limit: f64,
    pub speed_limit: f64,
    pub weight_progress: f64,
    pub weight_comfort: f64,
    pub weight_speed: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams {
            corridor_half_width: 3.5,
            accel_limit: 4.0,
            jerk_limit: 10.0,
            speed_limit: 15.0,
            weight_progress: 0.5,
            weight_comfort: 0.25,
            weight_speed: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub collision: bool,
    pub drivable_violation: bool,
    pub progress_ratio: f64,
    pub comfort: f64,
    pub speed_compliance: f64,
    pub composite: f64,
}

fn rect_of(row: &[f64; 5], length: f64, width: f64) -> OrientedRect {
    OrientedRect { cx: row[1], cy: row[2], heading: row[3], length, width }
}

/// Scores a completed rollout against its source scenario. Hard gates
/// (collision, corridor violation) zero the composite; otherwise the
/// composite is the weighted mean of progress, comfort and speed terms.
pub fn score_rollout(rollout: &Rollout, scenario: &Scenario, params: &ScoreParams) -> Result<ScoreCard> {
    if rollout.scenario_id != scenario.id {
        return Err(Error::metrics(format!(
            "rollout for {:?} scored against scenario {:?}",
            rollout.scenario_id, scenario.id
        )));
    }
    if rollout.ego.is_empty() {
        return Err(Error::metrics("empty rollout".to_string()));
    }

    // collision gate: ego footprint vs any agent footprint at the same step
    let mut collision = false;
    'outer: for (i, ego_row) in rollout.ego.iter().enumerate() {
        let ego_rect = rect_of(ego_row, rollout.ego_length, rollout.ego_width);
        for agent in &rollout.agents {
            let Some(row) = agent.states.get(i) else { continue };
            if geom::rect_overlap_depth(&ego_rect, &rect_of(row, agent.length, agent.width)).is_some()
            {
                collision = true;
                break 'outer;
            }
        }
    }

    // corridor gate and progress along the route centerline
    let reference = build_reference_line(&scenario.routes)
        .map_err(|e| Error::metrics(format!("reference line: {e}")))?;
    let mut drivable_violation = false;
    for row in &rollout.ego {
        let (_, l) = reference.to_frenet([row[1], row[2]]);
        if l.abs() > params.corridor_half_width {
            drivable_violation = true;
            break;
        }
    }
    let first = &rollout.ego[0];
    let last = &rollout.ego[rollout.ego.len() - 1];
    let (s_start, _) = reference.to_frenet([first[1], first[2]]);
    let (s_end, _) = reference.to_frenet([last[1], last[2]]);
    let log_end = scenario
        .gt_endpoint(scenario.ego.id)
        .ok_or_else(|| Error::metrics("scenario has no ego ground truth".to_string()))?;
    let (s_log, _) = reference.to_frenet(log_end);
    let log_progress = s_log - s_start;
    let progress_ratio = if log_progress > 0.1 {
        ((s_end - s_start) / log_progress).clamp(0.0, 1.0)
    } else {
        1.0
    };

    // comfort: fraction of steps within accel and jerk bounds
    let speeds: Vec<f64> = rollout.ego.iter().map(|r| r[4]).collect();
    let accels: Vec<f64> = speeds.windows(2).map(|w| (w[1] - w[0]) / rollout.dt).collect();
    let jerks: Vec<f64> = accels.windows(2).map(|w| (w[1] - w[0]) / rollout.dt).collect();
    let comfort = if jerks.is_empty() {
        1.0
    } else {
        let ok = jerks
            .iter()
            .enumerate()
            .filter(|(i, j)| accels[*i].abs() <= params.accel_limit && j.abs() <= params.jerk_limit)
            .count();
        ok as f64 / jerks.len() as f64
    };

    let compliant = speeds.iter().filter(|&&v| v <= params.speed_limit).count();
    let speed_compliance = compliant as f64 / speeds.len() as f64;

    let composite = if collision || drivable_violation {
        0.0
    } else {
        params.weight_progress * progress_ratio
            + params.weight_comfort * comfort
            + params.weight_speed * speed_compliance
    };
    Ok(ScoreCard { collision, drivable_violation, progress_ratio, comfort, speed_compliance, composite })
}

pub const SCORE_CSV_HEADER: &str = "scenario_id,mode,collision,drivable,progress,comfort,speed,composite";

pub fn score_csv_row(id: &str, mode: &str, card: &ScoreCard) -> String {
    format!(
        "{id},{mode},{},{},{},{},{},{}",
        card.collision as u8,
        card.drivable_violation as u8,
        card.progress_ratio,
        card.comfort,
        card.speed_compliance,
        card.composite
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt_of(points: &[[f64; 2]]) -> Vec<FuturePoint> {
        points.iter().map(|p| FuturePoint { x: p[0], y: p[1], valid: true }).collect()
    }

    #[test]
    fn ade_fde_basics() {
        let gt = gt_of(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        let pred = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        assert_eq!(ade(&pred, &gt).unwrap(), 0.0);
        assert_eq!(fde(&pred, &gt).unwrap(), 0.0);
        // constant (3, 4) offset -> ade 5
        let off: Vec<[f64; 2]> = pred.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        assert!((ade(&off, &gt).unwrap() - 5.0).abs() < 1e-12);
        // endpoint offset (0, 2) -> fde 2
        let mut end_off = pred.clone();
        end_off[2][1] += 2.0;
        assert!((fde(&end_off, &gt).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn fde_respects_validity_mask() {
        // last two steps invalid -> fde measured at step 2 of 5
        let mut gt = gt_of(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [4.0, 0.0]]);
        gt[3].valid = false;
        gt[4].valid = false;
        let pred = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 1.5], [99.0, 99.0], [99.0, 99.0]];
        assert!((fde(&pred, &gt).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn ade_random_instance_matches_double_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let gt: Vec<FuturePoint> = (0..20)
            .map(|_| FuturePoint {
                x: rng.gen_range(-10.0..10.0),
                y: rng.gen_range(-10.0..10.0),
                valid: rng.gen_bool(0.8),
            })
            .collect();
        if !gt.iter().any(|p| p.valid) {
            return;
        }
        let pred: Vec<[f64; 2]> =
            (0..20).map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]).collect();
        let mut acc = 0.0;
        let mut n = 0;
        for i in 0..20 {
            if gt[i].valid {
                acc += ((pred[i][0] - gt[i].x).powi(2) + (pred[i][1] - gt[i].y).powi(2)).sqrt();
                n += 1;
            }
        }
        assert!((ade(&pred, &gt).unwrap() - acc / n as f64).abs() < 1e-12);
    }

    #[test]
    fn top_k_restriction_and_degenerate_k() {
        let gt = gt_of(&[[0.0, 0.0], [1.0, 0.0]]);
        // 7 modes; the GT-matching mode has the 7th-highest score
        let mut trajs = vec![vec![[5.0, 5.0], [6.0, 5.0]]; 7];
        trajs[6] = vec![[0.0, 0.0], [1.0, 0.0]];
        let scores = vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.1];
        let valid = vec![true; 7];
        let v6 = min_over_top_k(&trajs, &scores, &valid, &gt, 6, DispMetric::Ade).unwrap();
        assert!(v6 > 0.0);
        let v7 = min_over_top_k(&trajs, &scores, &valid, &gt, 7, DispMetric::Ade).unwrap();
        assert_eq!(v7, 0.0);
        // single mode equals the plain metric
        let one = min_over_top_k(&trajs[..1].to_vec(), &scores[..1], &valid[..1], &gt, 6, DispMetric::Ade)
            .unwrap();
        assert_eq!(one, ade(&trajs[0], &gt).unwrap());
    }

    proptest! {
        /// min_over_top_k is monotone non-increasing in k.
        #[test]
        fn min_over_top_k_monotone_in_k(
            seed in 0u64..500,
            m in 1usize..10,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let gt = gt_of(&[[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]]);
            let trajs: Vec<Vec<[f64; 2]>> = (0..m)
                .map(|_| (0..3).map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)]).collect())
                .collect();
            let scores: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0)).collect();
            let valid = vec![true; m];
            let mut prev = f64::INFINITY;
            for k in 1..=m {
                let v = min_over_top_k(&trajs, &scores, &valid, &gt, k, DispMetric::Fde).unwrap();
                prop_assert!(v <= prev + 1e-12);
                prev = v;
            }
        }

        /// ADE/FDE are invariant under a rigid transform of pred and gt.
        #[test]
        fn displacement_invariant_under_rigid_motion(
            theta in -3.1f64..3.1,
            tx in -50.0f64..50.0,
            ty in -50.0f64..50.0,
        ) {
            let tf = geom::RigidTransform::new(theta, tx, ty);
            let gt_pts = [[0.0, 0.0], [1.0, 2.0], [3.0, 1.0]];
            let pred = vec![[0.5, 0.1], [1.5, 2.2], [2.0, 0.0]];
            let gt = gt_of(&gt_pts);
            let gt2: Vec<FuturePoint> = gt_pts
                .iter()
                .map(|p| {
                    let q = tf.apply(*p);
                    FuturePoint { x: q[0], y: q[1], valid: true }
                })
                .collect();
            let pred2: Vec<[f64; 2]> = pred.iter().map(|p| tf.apply(*p)).collect();
            prop_assert!((ade(&pred, &gt).unwrap() - ade(&pred2, &gt2).unwrap()).abs() < 1e-9);
            prop_assert!((fde(&pred, &gt).unwrap() - fde(&pred2, &gt2).unwrap()).abs() < 1e-9);
        }
    }
}
