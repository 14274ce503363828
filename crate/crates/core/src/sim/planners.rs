//! Planner implementations driven by the rollout harness: log replay, a
//! rule-based IDM baseline along the route, and the learned model with
//! optional rule-based post-processing.

use crate::error::{Error, Result};
use crate::geom;
use crate::model::TrainedModel;
use crate::postprocess::{build_reference_line, refine_trajectory, AgentPrediction, RefineParams};
use crate::scene::{Scenario, DT};

use super::idm::{idm_accel, IdmParams};
use super::{PlannedTrajectory, Planner};

/// Returns the ego's remaining logged future as the plan.
pub struct LogReplayPlanner;

impl Planner for LogReplayPlanner {
    fn plan(&mut self, obs: &Scenario) -> Result<PlannedTrajectory> {
        let fut = obs
            .future_of(obs.ego.id)
            .ok_or_else(|| Error::simulator("log-replay: ego future missing".to_string()))?;
        let points: Vec<[f64; 2]> =
            fut.iter().take_while(|p| p.valid).map(|p| [p.x, p.y]).collect();
        if points.is_empty() {
            return Err(Error::simulator("log-replay: ego future exhausted".to_string()));
        }
        Ok(PlannedTrajectory { points, confidence: 1.0, raw_points: None })
    }

    fn name(&self) -> &'static str {
        "logreplay"
    }
}

/// Car-following baseline: drives the primary route centerline with IDM
/// speed control against the nearest leader (propagated at its observed
/// speed), for `horizon_steps` of 0.1 s.
pub struct IdmPlanner {
    pub params: IdmParams,
    pub horizon_steps: usize,
    /// lateral band around the route within which an agent counts as a leader
    pub lateral_band: f64,
}

impl IdmPlanner {
    pub fn new(horizon_steps: usize) -> Self {
        IdmPlanner { params: IdmParams::default(), horizon_steps, lateral_band: 2.0 }
    }
}

impl Planner for IdmPlanner {
    fn plan(&mut self, obs: &Scenario) -> Result<PlannedTrajectory> {
        let reference = build_reference_line(&obs.routes)
            .map_err(|e| Error::simulator(format!("idm planner: {e}")))?;
        let cur = obs.ego.current();
        let (s_ego, _) = reference.to_frenet([cur.x, cur.y]);
        let mut v = cur.speed();

        // nearest leader ahead on the route
        let mut leader: Option<(f64, f64, f64)> = None; // (s, v, length)
        for agent in &obs.agents {
            let Some(state) = agent.last_valid() else { continue };
            let (s, l) = reference.to_frenet([state.x, state.y]);
            if l.abs() <= self.lateral_band && s > s_ego {
                if leader.map(|(ls, _, _)| s < ls).unwrap_or(true) {
                    leader = Some((s, state.speed(), agent.length));
                }
            }
        }

        let mut s = s_ego;
        let mut leader_s = leader.map(|(ls, _, _)| ls);
        let mut points = Vec::with_capacity(self.horizon_steps);
        for _ in 0..self.horizon_steps {
            let (gap, closing) = match (leader_s, leader) {
                (Some(ls), Some((_, lv, llen))) => {
                    (ls - s - (obs.ego.length + llen) / 2.0, v - lv)
                }
                _ => (f64::INFINITY, 0.0),
            };
            let a = idm_accel(v, gap, closing, &self.params);
            v = (v + a * DT).max(0.0);
            s += v * DT;
            if let (Some(ls), Some((_, lv, _))) = (leader_s.as_mut(), leader) {
                *ls += lv * DT;
            }
            points.push(geom::point_at_arc_length(&reference.points, &reference.cum_s, s));
        }
        Ok(PlannedTrajectory { points, confidence: 1.0, raw_points: None })
    }

    fn name(&self) -> &'static str {
        "idm"
    }
}

/// The learned planner: runs inference in the ego frame, picks the
/// highest-confidence plan mode, optionally refines it against the
/// top-1 predictions, and maps the result back to the global frame.
pub struct ModelPlanner<'a> {
    model: &'a TrainedModel,
    postprocess: bool,
    refine: RefineParams,
}

impl<'a> ModelPlanner<'a> {
    pub fn new(model: &'a TrainedModel, postprocess: bool) -> Self {
        ModelPlanner { model, postprocess, refine: RefineParams::default() }
    }
}

impl Planner for ModelPlanner<'_> {
    fn plan(&mut self, obs: &Scenario) -> Result<PlannedTrajectory> {
        let prep = self.model.prepare(obs)?;
        let out = self.model.infer_prepared(&prep, None)?;
        let (_, mut plan, confidence) = out.best_plan();
        let mut raw = None;
        if self.postprocess {
            let reference = build_reference_line(&prep.scenario.routes)?;
            let mut predictions = Vec::new();
            for (slot, &id) in out.agent_ids.iter().enumerate().skip(1) {
                if !out.agent_mask[slot] {
                    continue;
                }
                let Some(traj) = out.best_pred(slot) else { continue };
                let Some(agent) = prep.scenario.agents.iter().find(|a| a.id == id) else { continue };
                predictions.push(AgentPrediction {
                    id,
                    length: agent.length,
                    width: agent.width,
                    traj,
                });
            }
            let result = refine_trajectory(
                &plan,
                &reference,
                [prep.scenario.ego.length, prep.scenario.ego.width],
                &predictions,
                &self.refine,
            )?;
            raw = Some(plan);
            plan = result.plan;
        }
        // back to the global frame
        let inv = prep.to_ego.inverse();
        let to_global = |pts: Vec<[f64; 2]>| pts.into_iter().map(|p| inv.apply(p)).collect();
        Ok(PlannedTrajectory {
            points: to_global(plan),
            confidence,
            raw_points: raw.map(to_global),
        })
    }

    fn name(&self) -> &'static str {
        if self.postprocess {
            "model+postprocess"
        } else {
            "model"
        }
    }
}
