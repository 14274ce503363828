//! Iterative intention-query trajectory decoder. Each iteration runs
//! self-attention across an agent's intention queries (intention embeddings
//! as positional encoding), cross-attention into the context embedding, and
//! MLP heads emitting per-mode trajectories and confidence logits. The ego
//! planning branch repeats the flow against the route embedding and decodes
//! from the concatenated [query content || route content].

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoders::{ContextEmbedding, RouteEmbedding};
use crate::error::{Error, Result};
use crate::intention::IntentionSet;
use crate::nn::{AttnBlock, AttnConfig, Graph, Mlp, NodeId, ParamId, ParamStore, Real, TensorData};

struct DecoderIter {
    self_attn: AttnBlock,
    cross_attn: AttnBlock,
    plan_self_attn: AttnBlock,
    plan_cross_attn: AttnBlock,
    pred_traj_head: Mlp,
    pred_score_head: Mlp,
    plan_traj_head: Mlp,
    plan_score_head: Mlp,
}

pub struct TrajectoryDecoder {
    pub n_q: usize,
    pub t_f: usize,
    pub iterations: usize,
    intent_mlp: Mlp,
    init_query: ParamId,
    iters: Vec<DecoderIter>,
}

/// Graph handles for one iteration's outputs. Agent slots without valid
/// intentions carry `None`.
pub struct IterOutput {
    /// per agent [n_q, t_f*2]
    pub pred_traj: Vec<Option<NodeId>>,
    /// per agent [n_q]
    pub pred_logits: Vec<Option<NodeId>>,
    /// [n_q, t_f*2]
    pub plan_traj: NodeId,
    /// [n_q]
    pub plan_logits: NodeId,
}

pub struct GeneratorOutput {
    pub iters: Vec<IterOutput>,
}

impl TrajectoryDecoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let attn = AttnConfig { model_dim: cfg.dim, heads: cfg.heads };
        let head_out = cfg.t_f * 2;
        let iters = (0..cfg.iterations)
            .map(|k| {
                let p = format!("decoder.iter{k}");
                DecoderIter {
                    self_attn: AttnBlock::new(store, &format!("{p}.self_attn"), attn, false, rng),
                    cross_attn: AttnBlock::new(store, &format!("{p}.cross_attn"), attn, true, rng),
                    plan_self_attn: AttnBlock::new(store, &format!("{p}.plan_self_attn"), attn, false, rng),
                    plan_cross_attn: AttnBlock::new(store, &format!("{p}.plan_cross_attn"), attn, true, rng),
                    pred_traj_head: Mlp::new(
                        store,
                        &format!("{p}.pred_traj_head"),
                        &[cfg.dim, cfg.mlp_hidden, head_out],
                        rng,
                    ),
                    pred_score_head: Mlp::new(
                        store,
                        &format!("{p}.pred_score_head"),
                        &[cfg.dim, cfg.mlp_hidden, 1],
                        rng,
                    ),
                    plan_traj_head: Mlp::new(
                        store,
                        &format!("{p}.plan_traj_head"),
                        &[cfg.dim * 2, cfg.mlp_hidden, head_out],
                        rng,
                    ),
                    plan_score_head: Mlp::new(
                        store,
                        &format!("{p}.plan_score_head"),
                        &[cfg.dim * 2, cfg.mlp_hidden, 1],
                        rng,
                    ),
                }
            })
            .collect();
        TrajectoryDecoder {
            n_q: cfg.n_q,
            t_f: cfg.t_f,
            iterations: cfg.iterations,
            intent_mlp: Mlp::new(store, "decoder.intent_mlp", &[2, cfg.mlp_hidden, cfg.dim], rng),
            init_query: store.add_normal("decoder.init_query", vec![1, cfg.dim], 0.02, rng),
            iters,
        }
    }

    /// Embeds one agent's intention points to [n_q, dim]; invalid slots
    /// produce all-zero embeddings.
    pub fn embed_intentions<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        points: &[crate::intention::IntentionPoint],
    ) -> Result<NodeId> {
        let dim = self.intent_mlp.d_out();
        let coords: Vec<F> = points
            .iter()
            .flat_map(|p| [F::from_f64c(p.x), F::from_f64c(p.y)])
            .collect();
        let input = g.input(&TensorData::new(vec![points.len(), 2], coords));
        let emb = self.intent_mlp.forward(g, store, input)?;
        let keep: Vec<F> = points
            .iter()
            .flat_map(|p| {
                let v = if p.valid { F::one() } else { F::zero() };
                std::iter::repeat(v).take(dim)
            })
            .collect();
        Ok(g.mul_const(emb, keep))
    }

    /// Runs `k_limit.unwrap_or(self.iterations)` decoder iterations and
    /// records every iteration's outputs. When `route` is `None` (route
    /// embedding ablated) the planning branch cross-attends the context.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        context: &ContextEmbedding,
        route: Option<&RouteEmbedding>,
        intentions: &IntentionSet,
        k_limit: Option<usize>,
    ) -> Result<GeneratorOutput> {
        let k_total = k_limit.unwrap_or(self.iterations);
        if k_total == 0 || k_total > self.iterations {
            return Err(Error::decoder(format!(
                "iteration limit {k_total} outside 1..={}",
                self.iterations
            )));
        }
        if intentions.n_q != self.n_q {
            return Err(Error::decoder(format!(
                "intention slots {} != decoder n_q {}",
                intentions.n_q, self.n_q
            )));
        }
        if intentions.n_agents() != context.n_agent_slots {
            return Err(Error::decoder(format!(
                "intention rows {} != agent slots {}",
                intentions.n_agents(),
                context.n_agent_slots
            )));
        }
        if !context.mask.iter().any(|&m| m) {
            return Err(Error::decoder("empty context".to_string()));
        }
        let ego_mask = intentions.mask_of(0);
        if !ego_mask.iter().any(|&m| m) {
            return Err(Error::decoder("ego has no valid intention points".to_string()));
        }

        // active agents: at least one valid intention slot
        let masks: Vec<Vec<bool>> = (0..intentions.n_agents()).map(|a| intentions.mask_of(a)).collect();
        let active: Vec<bool> = masks.iter().map(|m| m.iter().any(|&v| v)).collect();

        // intention queries (fixed across iterations)
        let mut q_g: Vec<Option<NodeId>> = Vec::with_capacity(intentions.n_agents());
        for (a, row) in intentions.rows.iter().enumerate() {
            q_g.push(if active[a] { Some(self.embed_intentions(g, store, row)?) } else { None });
        }

        // initial query content: one trainable row broadcast over modes
        let init = g.param(store, self.init_query);
        let init_tiled = g.repeat_rows(init, self.n_q);
        let mut q_content: Vec<Option<NodeId>> =
            active.iter().map(|&a| a.then_some(init_tiled)).collect();

        let (plan_kv, plan_kv_mask): (NodeId, &[bool]) = match route {
            Some(r) => (r.tokens, &r.mask),
            None => (context.tokens, &context.mask),
        };

        let mut out = GeneratorOutput { iters: Vec::with_capacity(k_total) };
        for layer in self.iters.iter().take(k_total) {
            let mut pred_traj = Vec::with_capacity(active.len());
            let mut pred_logits = Vec::with_capacity(active.len());
            for a in 0..active.len() {
                if !active[a] {
                    pred_traj.push(None);
                    pred_logits.push(None);
                    continue;
                }
                let q_prev = q_content[a].unwrap();
                let pos = q_g[a].unwrap();
                let (s, _) = layer
                    .self_attn
                    .forward(g, store, q_prev, q_prev, &masks[a], Some(pos), Some(pos))?;
                let q_k = layer.cross_attn.cross_forward(g, store, s, context.tokens, &context.mask)?;
                q_content[a] = Some(q_k);
                let traj = layer.pred_traj_head.forward(g, store, q_k)?;
                let logits = layer.pred_score_head.forward(g, store, q_k)?;
                pred_traj.push(Some(traj));
                pred_logits.push(Some(g.reshape(logits, vec![self.n_q])));
            }

            // planning branch on the updated ego query content
            let q_ego = q_content[0].unwrap();
            let pos = q_g[0].unwrap();
            let (s, _) =
                layer.plan_self_attn.forward(g, store, q_ego, q_ego, &masks[0], Some(pos), Some(pos))?;
            let r_k = layer.plan_cross_attn.cross_forward(g, store, s, plan_kv, plan_kv_mask)?;
            let cat = g.concat_last(q_ego, r_k);
            let plan_traj = layer.plan_traj_head.forward(g, store, cat)?;
            let plan_logits = layer.plan_score_head.forward(g, store, cat)?;
            out.iters.push(IterOutput {
                pred_traj,
                pred_logits,
                plan_traj,
                plan_logits: g.reshape(plan_logits, vec![self.n_q]),
            });
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Host-side multimodal output
// ---------------------------------------------------------------------------

/// One iteration's trajectories and normalized confidence scores.
#[derive(Debug, Clone)]
pub struct IterData {
    /// [n_agent_slots, n_q, t_f, 2]
    pub pred_traj: TensorData<f32>,
    /// [n_agent_slots, n_q]; masked modes carry exactly 0
    pub pred_scores: TensorData<f32>,
    /// [n_q, t_f, 2]
    pub plan_traj: TensorData<f32>,
    /// [n_q]
    pub plan_scores: TensorData<f32>,
}

/// Multimodal prediction/planning trajectories for every decoder iteration.
#[derive(Debug, Clone)]
pub struct MultiModalOutput {
    pub n_q: usize,
    pub t_f: usize,
    pub agent_ids: Vec<u64>,
    pub agent_mask: Vec<bool>,
    /// [agent][mode] validity, mirroring the intention masks
    pub mode_mask: Vec<Vec<bool>>,
    pub iters: Vec<IterData>,
}

impl MultiModalOutput {
    pub fn final_iter(&self) -> &IterData {
        self.iters.last().expect("at least one iteration")
    }

    /// Plan trajectory of the highest-confidence valid mode (ties toward
    /// the lower index) in the final iteration.
    pub fn best_plan(&self) -> (usize, Vec<[f64; 2]>, f64) {
        let it = self.final_iter();
        let ego_mask = &self.mode_mask[0];
        let mut best = (0usize, f32::NEG_INFINITY);
        for m in 0..self.n_q {
            if ego_mask[m] && it.plan_scores.data[m] > best.1 {
                best = (m, it.plan_scores.data[m]);
            }
        }
        (best.0, self.plan_mode(best.0), best.1 as f64)
    }

    pub fn plan_mode(&self, mode: usize) -> Vec<[f64; 2]> {
        let it = self.final_iter();
        (0..self.t_f)
            .map(|t| {
                let base = (mode * self.t_f + t) * 2;
                [it.plan_traj.data[base] as f64, it.plan_traj.data[base + 1] as f64]
            })
            .collect()
    }

    /// Prediction trajectory for (agent slot, mode) in the final iteration.
    pub fn pred_mode(&self, agent: usize, mode: usize) -> Vec<[f64; 2]> {
        let it = self.final_iter();
        (0..self.t_f)
            .map(|t| {
                let base = ((agent * self.n_q + mode) * self.t_f + t) * 2;
                [it.pred_traj.data[base] as f64, it.pred_traj.data[base + 1] as f64]
            })
            .collect()
    }

    /// Highest-confidence prediction trajectory per agent slot.
    pub fn best_pred(&self, agent: usize) -> Option<Vec<[f64; 2]>> {
        if !self.agent_mask[agent] || !self.mode_mask[agent].iter().any(|&m| m) {
            return None;
        }
        let it = self.final_iter();
        let mut best = (0usize, f32::NEG_INFINITY);
        for m in 0..self.n_q {
            let s = it.pred_scores.data[agent * self.n_q + m];
            if self.mode_mask[agent][m] && s > best.1 {
                best = (m, s);
            }
        }
        Some(self.pred_mode(agent, best.0))
    }
}

fn masked_softmax_f32(logits: &[f32], mask: &[bool]) -> Vec<f32> {
    let mut out = vec![0f32; logits.len()];
    let mut mx = f32::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if mask[i] && v > mx {
            mx = v;
        }
    }
    if !mx.is_finite() {
        return out;
    }
    let mut denom = 0f32;
    for (i, &v) in logits.iter().enumerate() {
        if mask[i] {
            out[i] = (v - mx).exp();
            denom += out[i];
        }
    }
    for v in out.iter_mut() {
        *v /= denom;
    }
    out
}

/// Reads the generator's graph outputs into a plain [`MultiModalOutput`].
pub fn extract_output<F: Real>(
    g: &Graph<F>,
    gen: &GeneratorOutput,
    intentions: &IntentionSet,
    agent_ids: &[u64],
    agent_mask: &[bool],
    t_f: usize,
) -> MultiModalOutput {
    let n_q = intentions.n_q;
    let slots = intentions.n_agents();
    let mode_mask: Vec<Vec<bool>> = (0..slots).map(|a| intentions.mask_of(a)).collect();
    let to_f32 = |vals: &[F]| -> Vec<f32> { vals.iter().map(|v| v.to_f64c() as f32).collect() };

    let iters = gen
        .iters
        .iter()
        .map(|it| {
            let mut pred_traj = TensorData::zeros(vec![slots, n_q, t_f, 2]);
            let mut pred_scores = TensorData::zeros(vec![slots, n_q]);
            for a in 0..slots {
                if let (Some(traj), Some(logits)) = (it.pred_traj[a], it.pred_logits[a]) {
                    let tv = to_f32(g.value(traj));
                    let base = a * n_q * t_f * 2;
                    pred_traj.data[base..base + tv.len()].copy_from_slice(&tv);
                    let scores = masked_softmax_f32(&to_f32(g.value(logits)), &mode_mask[a]);
                    pred_scores.data[a * n_q..(a + 1) * n_q].copy_from_slice(&scores);
                }
            }
            let plan_flat = to_f32(g.value(it.plan_traj));
            let plan_scores = masked_softmax_f32(&to_f32(g.value(it.plan_logits)), &mode_mask[0]);
            IterData {
                pred_traj,
                pred_scores,
                plan_traj: TensorData::new(vec![n_q, t_f, 2], plan_flat),
                plan_scores: TensorData::new(vec![n_q], plan_scores),
            }
        })
        .collect();

    MultiModalOutput {
        n_q,
        t_f,
        agent_ids: agent_ids.to_vec(),
        agent_mask: agent_mask.to_vec(),
        mode_mask,
        iters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intention::{IntentionPoint, IntentionSource};

    fn point(x: f64, y: f64, valid: bool) -> IntentionPoint {
        IntentionPoint { x, y, source: IntentionSource::RoutePrimary, valid }
    }

    #[test]
    fn masked_intention_slots_embed_to_zero() {
        use rand::SeedableRng;
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut cfg = crate::config::profile_micro().model;
        cfg.dim = 16;
        cfg.heads = 4;
        cfg.mlp_hidden = 16;
        cfg.n_q = 4;
        cfg.t_f = 5;
        let dec = TrajectoryDecoder::new(&mut store, &cfg, &mut rng);
        let mut g: Graph<f64> = Graph::new();
        let row = vec![point(1.0, 2.0, true), point(1.0, 2.0, true), point(3.0, 4.0, false), point(0.0, 0.0, true)];
        let emb = dec.embed_intentions(&mut g, &store, &row).unwrap();
        let v = g.value(emb);
        // identical points embed identically
        assert_eq!(v[..16], v[16..32]);
        // masked slot is all zero
        assert!(v[32..48].iter().all(|&x| x == 0.0));
    }
}
