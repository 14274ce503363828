//! Loss assembly (closest-intention supervision, per-iteration losses
//! averaged over K), the mini-batch training loop with per-sample data
//! parallelism, and metric evaluation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, TrainConfig};
use crate::decoder::GeneratorOutput;
use crate::error::{Error, Result};
use crate::intention::{select_positive_intention, ClusterAnchors, IntentionSet};
use crate::metrics::{ade, fde, min_over_top_k, DispMetric};
use crate::model::{Prepared, TrainedModel};
use crate::nn::{AdamwConfig, GradMap, Graph, NodeId, Real};
use crate::parallel;
use crate::scene::{FuturePoint, Scenario};

/// Ground truth for one supervised agent slot.
#[derive(Debug, Clone)]
pub struct AgentTarget {
    /// [t_f * 2] row-major (x, y) per step
    pub gt: Vec<f64>,
    /// [t_f] step validity
    pub mask: Vec<bool>,
    /// index of the intention point closest to the GT endpoint
    pub positive: usize,
}

#[derive(Debug, Clone)]
pub struct SupervisionTargets {
    /// per agent slot; `None` when the slot is padding or has no valid GT
    pub agents: Vec<Option<AgentTarget>>,
}

impl SupervisionTargets {
    pub fn ego(&self) -> Option<&AgentTarget> {
        self.agents.first().and_then(|t| t.as_ref())
    }
}

fn target_for(
    future: &[FuturePoint],
    intentions: &IntentionSet,
    slot: usize,
) -> Result<Option<AgentTarget>> {
    let endpoint = match future.iter().rev().find(|p| p.valid) {
        Some(p) => [p.x, p.y],
        None => return Ok(None),
    };
    if !intentions.rows[slot].iter().any(|p| p.valid) {
        return Ok(None);
    }
    let positive = select_positive_intention(&intentions.rows[slot], endpoint)?;
    let gt: Vec<f64> = future.iter().flat_map(|p| [p.x, p.y]).collect();
    let mask: Vec<bool> = future.iter().map(|p| p.valid).collect();
    Ok(Some(AgentTarget { gt, mask, positive }))
}

/// Builds supervision targets for one prepared sample. The ego slot must
/// carry valid ground truth (the planning branch is always supervised).
pub fn build_targets(prep: &Prepared) -> Result<SupervisionTargets> {
    let mut agents = Vec::with_capacity(prep.tensors.agent_ids.len());
    for (slot, (&id, &used)) in
        prep.tensors.agent_ids.iter().zip(&prep.tensors.agent_mask).enumerate()
    {
        if !used {
            agents.push(None);
            continue;
        }
        let future = prep.scenario.future_of(id).unwrap_or(&[]);
        agents.push(target_for(future, &prep.intentions, slot)?);
    }
    if agents.first().map(|t| t.is_none()).unwrap_or(true) {
        return Err(Error::training(format!(
            "scenario {}: ego has no valid ground-truth future",
            prep.id
        )));
    }
    Ok(SupervisionTargets { agents })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IterLoss {
    pub pred_reg: f64,
    pub pred_cls: f64,
    pub plan_reg: f64,
    pub plan_cls: f64,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub iters: Vec<IterLoss>,
    pub supervised_agents: usize,
}

/// Assembles the training loss: per iteration, L1 on the positive mode's
/// trajectory plus cross-entropy on the confidence logits, for the
/// prediction branch (mean over supervised agents) and the ego planning
/// branch; the total is the mean over iterations.
pub fn compute_loss<F: Real>(
    g: &mut Graph<F>,
    gen: &GeneratorOutput,
    intentions: &IntentionSet,
    targets: &SupervisionTargets,
    predict_branch: bool,
    supervise_ego_prediction: bool,
) -> Result<(NodeId, LossReport)> {
    let ego = targets
        .ego()
        .ok_or_else(|| Error::training("planning branch requires ego ground truth".to_string()))?;
    let t_f = ego.mask.len();
    let mut iter_totals = Vec::with_capacity(gen.iters.len());
    let mut iters = Vec::with_capacity(gen.iters.len());
    let mut supervised_agents = 0;

    for it in &gen.iters {
        let mut report = IterLoss::default();
        let mut parts: Vec<NodeId> = Vec::new();

        if predict_branch {
            let mut agent_losses = Vec::new();
            let mut reg_acc = 0.0;
            let mut cls_acc = 0.0;
            for (slot, target) in targets.agents.iter().enumerate() {
                let (Some(target), Some(traj), Some(logits)) =
                    (target.as_ref(), it.pred_traj[slot], it.pred_logits[slot])
                else {
                    continue;
                };
                if slot == 0 && !supervise_ego_prediction {
                    continue;
                }
                let mask = intentions.mask_of(slot);
                let gt: Vec<F> = target.gt.iter().map(|&v| F::from_f64c(v)).collect();
                let row = g.slice_rows(traj, target.positive, 1);
                let pred = g.reshape(row, vec![t_f, 2]);
                let reg = g.l1_loss(pred, &gt, &target.mask)?;
                let cls = g.cross_entropy(logits, target.positive, &mask)?;
                reg_acc += g.value(reg)[0].to_f64c();
                cls_acc += g.value(cls)[0].to_f64c();
                agent_losses.push(g.add(reg, cls));
            }
            if !agent_losses.is_empty() {
                supervised_agents = agent_losses.len();
                report.pred_reg = reg_acc / agent_losses.len() as f64;
                report.pred_cls = cls_acc / agent_losses.len() as f64;
                parts.push(g.mean_scalars(&agent_losses));
            }
        }

        let ego_mask = intentions.mask_of(0);
        let gt: Vec<F> = ego.gt.iter().map(|&v| F::from_f64c(v)).collect();
        let row = g.slice_rows(it.plan_traj, ego.positive, 1);
        let pred = g.reshape(row, vec![t_f, 2]);
        let reg = g.l1_loss(pred, &gt, &ego.mask)?;
        let cls = g.cross_entropy(it.plan_logits, ego.positive, &ego_mask)?;
        report.plan_reg = g.value(reg)[0].to_f64c();
        report.plan_cls = g.value(cls)[0].to_f64c();
        parts.push(g.add(reg, cls));

        let mut iter_total = parts[0];
        for &p in &parts[1..] {
            iter_total = g.add(iter_total, p);
        }
        iter_totals.push(iter_total);
        iters.push(report);
    }

    let total = g.mean_scalars(&iter_totals);
    let report = LossReport { total: g.value(total)[0].to_f64c(), iters, supervised_agents };
    Ok((total, report))
}

/// One prepared training sample.
pub struct Sample {
    pub prep: Prepared,
    pub targets: SupervisionTargets,
}

/// Preprocesses scenarios into training samples, skipping (with a warning)
/// scenarios whose ego lacks ground truth.
pub fn prepare_dataset(model: &TrainedModel, scenarios: &[Scenario]) -> Result<Vec<Sample>> {
    let results = parallel::map(scenarios, |s| -> Result<Sample> {
        let prep = model.prepare(s)?;
        let targets = build_targets(&prep)?;
        Ok(Sample { prep, targets })
    });
    let mut samples = Vec::with_capacity(results.len());
    for (s, r) in scenarios.iter().zip(results) {
        match r {
            Ok(sample) => samples.push(sample),
            Err(e) => log::warn!("skipping scenario {}: {e}", s.id),
        }
    }
    if samples.is_empty() {
        return Err(Error::training("no usable training scenarios".to_string()));
    }
    Ok(samples)
}

fn sample_grads(model: &TrainedModel, sample: &Sample) -> Result<(f64, GradMap<f32>)> {
    let mut g: Graph<f32> = Graph::new();
    let gen = model.model.forward(&mut g, &model.store, &sample.prep.tensors, &sample.prep.intentions, None)?;
    let (loss, report) = compute_loss(
        &mut g,
        &gen,
        &sample.prep.intentions,
        &sample.targets,
        model.cfg.predict_branch,
        model.cfg.supervise_ego_prediction,
    )?;
    g.check()?;
    g.backward(loss)?;
    Ok((report.total, g.param_grads(model.store.len())))
}

fn fold_batch(
    model: &TrainedModel,
    outputs: Vec<Result<(f64, GradMap<f32>)>>,
) -> Result<(f64, GradMap<f32>)> {
    let n = outputs.len();
    let mut merged = GradMap::zeros(model.store.len());
    let mut loss = 0.0;
    for r in outputs {
        let (l, g) = r?;
        loss += l;
        merged.merge(&g);
    }
    merged.scale(1.0 / n as f64);
    Ok((loss / n as f64, merged))
}

/// Mean loss and averaged gradients over one batch. Per-sample work fans
/// out in parallel; the reduction folds in batch order so results do not
/// depend on scheduling.
pub fn batch_gradients(model: &TrainedModel, batch: &[&Sample]) -> Result<(f64, GradMap<f32>)> {
    fold_batch(model, parallel::map(batch, |s| sample_grads(model, s)))
}

/// Sequential twin of [`batch_gradients`]; the benchmark suite compares the
/// two.
pub fn batch_gradients_seq(model: &TrainedModel, batch: &[&Sample]) -> Result<(f64, GradMap<f32>)> {
    fold_batch(model, parallel::map_seq(batch, |s| sample_grads(model, s)))
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub checkpoint: PathBuf,
    pub per_step_loss: Vec<f64>,
    pub per_epoch_loss: Vec<f64>,
    pub best_val_loss: f64,
}

/// Forward-only mean loss over a sample set (validation).
pub fn dataset_loss(model: &TrainedModel, samples: &[Sample]) -> Result<f64> {
    let losses = parallel::map(samples, |s| -> Result<f64> {
        let mut g: Graph<f32> = Graph::new();
        let gen =
            model.model.forward(&mut g, &model.store, &s.prep.tensors, &s.prep.intentions, None)?;
        let (_, report) = compute_loss(
            &mut g,
            &gen,
            &s.prep.intentions,
            &s.targets,
            model.cfg.predict_branch,
            model.cfg.supervise_ego_prediction,
        )?;
        g.check()?;
        Ok(report.total)
    });
    let mut acc = 0.0;
    for l in losses {
        acc += l?;
    }
    Ok(acc / samples.len() as f64)
}

/// Shuffled mini-batch training with AdamW and gradient clipping. Writes a
/// checkpoint to `out` every epoch and to `<out>.best` at the best
/// validation loss, plus a per-step loss log at `<out>.losses.csv`.
pub fn train(
    scenarios: &[Scenario],
    val: Option<&[Scenario]>,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<(TrainedModel, TrainResult)> {
    cfg.validate()?;
    if scenarios.is_empty() {
        return Err(Error::training("empty dataset".to_string()));
    }
    let anchors = ClusterAnchors::fit(scenarios, cfg.model.n_q, derive_seed(cfg.seed, "kmeans"));
    let mut model = TrainedModel::init(cfg, anchors);
    let samples = prepare_dataset(&model, scenarios)?;
    let val_samples = match val {
        Some(v) => Some(prepare_dataset(&model, v)?),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut result = TrainResult {
        checkpoint: out.to_path_buf(),
        per_step_loss: Vec::new(),
        per_epoch_loss: Vec::new(),
        best_val_loss: f64::INFINITY,
    };
    let best_path = out.with_extension("best.ckpt");

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);
        let adamw = AdamwConfig {
            lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_acc = 0.0;
        let mut epoch_batches = 0usize;
        for batch_ids in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = batch_ids.iter().map(|&i| &samples[i]).collect();
            let outputs = parallel::map(&batch, |s| sample_grads(&model, s));
            let mut merged = GradMap::zeros(model.store.len());
            let mut batch_loss = 0.0;
            for (k, r) in outputs.into_iter().enumerate() {
                let (loss, grads) = r.map_err(|e| {
                    Error::training(format!(
                        "batch {} (scenario {}): {e}",
                        epoch_batches, batch[k].prep.id
                    ))
                })?;
                if !loss.is_finite() {
                    return Err(Error::training(format!(
                        "non-finite loss in batch {} (scenario {})",
                        epoch_batches, batch[k].prep.id
                    )));
                }
                batch_loss += loss;
                merged.merge(&grads);
            }
            batch_loss /= batch.len() as f64;
            merged.scale(1.0 / batch.len() as f64);
            model.store.zero_grads();
            model.store.accumulate(&merged);
            model.store.clip_grad_norm(cfg.grad_clip);
            model.store.adamw_step(&adamw)?;
            result.per_step_loss.push(batch_loss);
            epoch_acc += batch_loss;
            epoch_batches += 1;
        }
        let epoch_loss = epoch_acc / epoch_batches as f64;
        result.per_epoch_loss.push(epoch_loss);
        model.save(out)?;
        let val_loss = match &val_samples {
            Some(v) => dataset_loss(&model, v)?,
            None => epoch_loss,
        };
        if val_loss < result.best_val_loss {
            result.best_val_loss = val_loss;
            model.save(&best_path)?;
        }
        log::info!("epoch {epoch}: train {epoch_loss:.6} val {val_loss:.6} lr {lr:.2e}");
    }

    let mut csv = String::from("step,epoch,loss\n");
    let steps_per_epoch = result.per_step_loss.len() / cfg.epochs.max(1);
    for (i, loss) in result.per_step_loss.iter().enumerate() {
        let epoch = if steps_per_epoch > 0 { i / steps_per_epoch } else { 0 };
        csv.push_str(&format!("{i},{epoch},{loss}\n"));
    }
    let loss_path = out.with_extension("losses.csv");
    std::fs::write(&loss_path, csv).map_err(|e| Error::io("training", &loss_path, e))?;
    Ok((model, result))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

pub const EVAL_CSV_HEADER: &str = "scenario_id,plan_ade,plan_fde,pred_minade6,pred_minfde6";

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub scenario_id: String,
    pub plan_ade: f64,
    pub plan_fde: f64,
    pub pred_minade6: Option<f64>,
    pub pred_minfde6: Option<f64>,
}

impl EvalRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.scenario_id,
            self.plan_ade,
            self.plan_fde,
            opt(self.pred_minade6),
            opt(self.pred_minfde6)
        )
    }
}

/// Per-iteration plan displacement against the ego ground truth; used by
/// the iteration-refinement analysis and evaluation.
pub fn plan_metrics_at_iteration(
    model: &TrainedModel,
    sample: &Sample,
    iteration: usize,
) -> Result<(f64, f64)> {
    let out = model.infer_prepared(&sample.prep, Some(iteration))?;
    let it = out.final_iter();
    let ego_mask = &out.mode_mask[0];
    let mut best = (0usize, f32::NEG_INFINITY);
    for m in 0..out.n_q {
        if ego_mask[m] && it.plan_scores.data[m] > best.1 {
            best = (m, it.plan_scores.data[m]);
        }
    }
    let plan = out.plan_mode(best.0);
    let gt = sample
        .prep
        .scenario
        .future_of(sample.prep.scenario.ego.id)
        .ok_or_else(|| Error::training("missing ego future".to_string()))?;
    Ok((ade(&plan, gt)?, fde(&plan, gt)?))
}

fn eval_one(model: &TrainedModel, scenario: &Scenario, k_limit: Option<usize>) -> Result<EvalRow> {
    let prep = model.prepare(scenario)?;
    let out = model.infer_prepared(&prep, k_limit)?;
    let (_, plan, _) = out.best_plan();
    let ego_gt = prep
        .scenario
        .future_of(prep.scenario.ego.id)
        .ok_or_else(|| Error::training(format!("scenario {}: missing ego future", prep.id)))?;
    let plan_ade = ade(&plan, ego_gt)?;
    let plan_fde = fde(&plan, ego_gt)?;

    let it = out.final_iter();
    let mut ade_acc = Vec::new();
    let mut fde_acc = Vec::new();
    for (slot, &id) in out.agent_ids.iter().enumerate() {
        if !out.agent_mask[slot] || !out.mode_mask[slot].iter().any(|&m| m) {
            continue;
        }
        let Some(gt) = prep.scenario.future_of(id) else { continue };
        if !gt.iter().any(|p| p.valid) {
            continue;
        }
        let trajs: Vec<Vec<[f64; 2]>> = (0..out.n_q).map(|m| out.pred_mode(slot, m)).collect();
        let scores: Vec<f64> =
            (0..out.n_q).map(|m| it.pred_scores.data[slot * out.n_q + m] as f64).collect();
        ade_acc.push(min_over_top_k(&trajs, &scores, &out.mode_mask[slot], gt, 6, DispMetric::Ade)?);
        fde_acc.push(min_over_top_k(&trajs, &scores, &out.mode_mask[slot], gt, 6, DispMetric::Fde)?);
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(EvalRow {
        scenario_id: prep.id,
        plan_ade,
        plan_fde,
        pred_minade6: mean(&ade_acc),
        pred_minfde6: mean(&fde_acc),
    })
}

/// Evaluates every scenario (in parallel, deterministic order) and returns
/// the per-scenario rows plus the aggregate mean row.
pub fn evaluate(
    model: &TrainedModel,
    scenarios: &[Scenario],
    k_limit: Option<usize>,
) -> Result<(Vec<EvalRow>, EvalRow)> {
    if scenarios.is_empty() {
        return Err(Error::training("empty evaluation dataset".to_string()));
    }
    let rows: Vec<EvalRow> = parallel::map(scenarios, |s| eval_one(model, s, k_limit))
        .into_iter()
        .collect::<Result<_>>()?;
    let mean_of = |f: fn(&EvalRow) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let aggregate = EvalRow {
        scenario_id: "mean".to_string(),
        plan_ade: mean_of(|r| Some(r.plan_ade)).unwrap_or(f64::NAN),
        plan_fde: mean_of(|r| Some(r.plan_fde)).unwrap_or(f64::NAN),
        pred_minade6: mean_of(|r| r.pred_minade6),
        pred_minfde6: mean_of(|r| r.pred_minfde6),
    };
    Ok((rows, aggregate))
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow], aggregate: &EvalRow) -> Result<()> {
    let mut csv = String::from(EVAL_CSV_HEADER);
    csv.push('\n');
    for row in rows {
        csv.push_str(&row.csv());
        csv.push('\n');
    }
    csv.push_str(&aggregate.csv());
    csv.push('\n');
    std::fs::write(path, csv).map_err(|e| Error::io("training", path, e))
}
