//! Context and route encoders: PointNet-style aggregation of agent
//! histories and polylines into per-element tokens, then self-attention
//! over the token sequence. Only the ego token interacts with the route.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{AttnBlock, AttnConfig, Graph, Mlp, NodeId, ParamStore, Real};
use crate::scene::{SceneTensors, AGENT_FEAT, MAP_FEAT, ROUTE_FEAT};

/// Token sequence over agents and map polylines; token 0 is the ego.
#[derive(Debug, Clone)]
pub struct ContextEmbedding {
    /// [n_agent_slots + n_map_slots, dim]
    pub tokens: NodeId,
    pub mask: Vec<bool>,
    pub n_agent_slots: usize,
}

impl ContextEmbedding {
    pub const EGO_TOKEN: usize = 0;
}

/// Ego context token followed by the aggregated route polyline tokens.
#[derive(Debug, Clone)]
pub struct RouteEmbedding {
    /// [1 + n_route_slots, dim]
    pub tokens: NodeId,
    pub mask: Vec<bool>,
}

/// MLP over per-step/point features followed by a masked max-pool:
/// [N, T, F] -> [N, dim].
fn aggregate<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    mlp: &Mlp,
    feats: NodeId,
    point_mask: &[bool],
) -> Result<NodeId> {
    let sh = g.shape(feats).to_vec();
    let (n, t, f) = (sh[0], sh[1], sh[2]);
    let flat = g.reshape(feats, vec![n * t, f]);
    let h = mlp.forward(g, store, flat)?;
    let d = mlp.d_out();
    let back = g.reshape(h, vec![n, t, d]);
    Ok(g.max_pool(back, point_mask))
}

/// Zeroes the rows of masked tokens so padding never carries values.
fn zero_masked_rows<F: Real>(g: &mut Graph<F>, tokens: NodeId, mask: &[bool]) -> NodeId {
    let d = g.shape(tokens)[1];
    let mut keep = Vec::with_capacity(mask.len() * d);
    for &m in mask {
        let v = if m { F::one() } else { F::zero() };
        keep.extend(std::iter::repeat(v).take(d));
    }
    g.mul_const(tokens, keep)
}

pub struct ContextEncoder {
    agent_mlp: Mlp,
    map_mlp: Mlp,
    agent_type: crate::nn::ParamId,
    map_type: crate::nn::ParamId,
    blocks: Vec<AttnBlock>,
}

impl ContextEncoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let dims_a = [AGENT_FEAT, cfg.mlp_hidden, cfg.dim];
        let dims_m = [MAP_FEAT, cfg.mlp_hidden, cfg.dim];
        let attn = AttnConfig { model_dim: cfg.dim, heads: cfg.heads };
        ContextEncoder {
            agent_mlp: Mlp::new(store, "context_encoder.agent_mlp", &dims_a, rng),
            map_mlp: Mlp::new(store, "context_encoder.map_mlp", &dims_m, rng),
            agent_type: store.add_normal("context_encoder.agent_type", vec![cfg.dim], 0.02, rng),
            map_type: store.add_normal("context_encoder.map_type", vec![cfg.dim], 0.02, rng),
            blocks: (0..cfg.context_blocks)
                .map(|i| {
                    AttnBlock::new(store, &format!("context_encoder.block{i}"), attn, false, rng)
                })
                .collect(),
        }
    }

    /// Aggregates agents and map polylines into one token each and runs the
    /// self-attention stack over the concatenated sequence.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        scene: &SceneTensors,
    ) -> Result<ContextEmbedding> {
        let agent_feats = g.input_f32(&scene.agents);
        let map_feats = g.input_f32(&scene.map);

        let a_tok = aggregate(g, store, &self.agent_mlp, agent_feats, &scene.agent_step_mask)?;
        let m_tok = aggregate(g, store, &self.map_mlp, map_feats, &scene.map_point_mask)?;
        let a_ty = g.param(store, self.agent_type);
        let m_ty = g.param(store, self.map_type);
        let a_tok = g.add_bias(a_tok, a_ty);
        let m_tok = g.add_bias(m_tok, m_ty);

        let mut tokens = g.concat_rows(a_tok, m_tok);
        let mask: Vec<bool> =
            scene.agent_mask.iter().chain(&scene.map_mask).copied().collect();
        if !mask.iter().any(|&m| m) {
            return Err(Error::encoder("context: all tokens masked".to_string()));
        }
        tokens = zero_masked_rows(g, tokens, &mask);
        for block in &self.blocks {
            tokens = block.self_forward(g, store, tokens, &mask, None)?;
        }
        tokens = zero_masked_rows(g, tokens, &mask);
        Ok(ContextEmbedding { tokens, mask, n_agent_slots: scene.agent_mask.len() })
    }
}

pub struct RouteEncoder {
    route_mlp: Mlp,
    blocks: Vec<AttnBlock>,
}

impl RouteEncoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let dims = [ROUTE_FEAT, cfg.mlp_hidden, cfg.dim];
        let attn = AttnConfig { model_dim: cfg.dim, heads: cfg.heads };
        RouteEncoder {
            route_mlp: Mlp::new(store, "route_encoder.route_mlp", &dims, rng),
            blocks: (0..cfg.route_blocks)
                .map(|i| AttnBlock::new(store, &format!("route_encoder.block{i}"), attn, false, rng))
                .collect(),
        }
    }

    /// Self-attention over [ego context token || route tokens]; no other
    /// agent participates.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        context: &ContextEmbedding,
        scene: &SceneTensors,
    ) -> Result<RouteEmbedding> {
        if !scene.route_mask.iter().any(|&m| m) {
            return Err(Error::encoder("route: no valid route tokens".to_string()));
        }
        let ego = g.slice_rows(context.tokens, ContextEmbedding::EGO_TOKEN, 1);
        let route_feats = g.input_f32(&scene.routes);
        let r_tok = aggregate(g, store, &self.route_mlp, route_feats, &scene.route_point_mask)?;
        let mut tokens = g.concat_rows(ego, r_tok);
        let mask: Vec<bool> = std::iter::once(true).chain(scene.route_mask.iter().copied()).collect();
        tokens = zero_masked_rows(g, tokens, &mask);
        for block in &self.blocks {
            tokens = block.self_forward(g, store, tokens, &mask, None)?;
        }
        tokens = zero_masked_rows(g, tokens, &mask);
        Ok(RouteEmbedding { tokens, mask })
    }
}
