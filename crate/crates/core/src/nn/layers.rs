//! Layer wrappers: affine, MLP, layer norm, and pre-norm residual
//! multi-head attention blocks. A layer owns parameter ids into a store;
//! forward passes record ops on a graph.

use rand::Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::Real;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_xavier(format!("{name}.weight"), d_in, d_out, rng);
        let b = store.add_zeros(format!("{name}.bias"), vec![d_out]);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

/// Affine stack with ReLU between layers (linear output).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists the layer widths, e.g. [in, hidden, out].
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dims: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one affine layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().unwrap().d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
    ) -> Result<NodeId> {
        if g.shape(x).last() != Some(&self.d_in()) {
            return Err(Error::nn(format!(
                "mlp: input trailing dim {:?} does not match d_in {}",
                g.shape(x).last(),
                self.d_in()
            )));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), vec![dim], vec![F::one(); dim]);
        let beta = store.add_zeros(format!("{name}.beta"), vec![dim]);
        LayerNorm { gamma, beta }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: NodeId) -> NodeId {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnConfig {
    pub model_dim: usize,
    pub heads: usize,
}

impl AttnConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::nn(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Pre-norm residual multi-head attention: out = q + MHA(LN(q), LN(kv)).
/// An optional positional embedding is added to the (normalized) query and
/// key inputs, never to the values.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub cfg: AttnConfig,
    ln_q: LayerNorm,
    /// separate key/value norm for cross-attention; self-attention reuses ln_q
    ln_kv: Option<LayerNorm>,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl AttnBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: AttnConfig,
        cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        cfg.validate().expect("attention config");
        let d = cfg.model_dim;
        AttnBlock {
            cfg,
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), d),
            ln_kv: cross.then(|| LayerNorm::new(store, &format!("{name}.ln_kv"), d)),
            wq: Linear::new(store, &format!("{name}.q"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.out"), d, d, rng),
        }
    }

    /// Self-attention over one token sequence.
    pub fn self_forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: NodeId,
        key_mask: &[bool],
        pos: Option<NodeId>,
    ) -> Result<NodeId> {
        self.forward(g, store, x, x, key_mask, pos, pos).map(|(out, _)| out)
    }

    /// Cross-attention: queries from `q`, keys/values from `kv`.
    pub fn cross_forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        q: NodeId,
        kv: NodeId,
        key_mask: &[bool],
    ) -> Result<NodeId> {
        self.forward(g, store, q, kv, key_mask, None, None).map(|(out, _)| out)
    }

    /// Full attention with access to the per-head weights (tests and
    /// diagnostics). Returns (residual output [Lq, D], weights [H, Lq, Lk]).
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        q: NodeId,
        kv: NodeId,
        key_mask: &[bool],
        pos_q: Option<NodeId>,
        pos_k: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let d = self.cfg.model_dim;
        let h = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let (lq, lk) = match (g.shape(q), g.shape(kv)) {
            ([lq, dq], [lk, dk]) if *dq == d && *dk == d => (*lq, *lk),
            (qa, ka) => {
                return Err(Error::nn(format!(
                    "attention: bad shapes q {qa:?}, kv {ka:?} for model_dim {d}"
                )))
            }
        };
        if key_mask.len() != lk {
            return Err(Error::nn(format!("attention: key mask {} != Lk {lk}", key_mask.len())));
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(Error::nn("attention: all keys masked"));
        }

        let mut qn = self.ln_q.forward(g, store, q);
        let mut kn = self.ln_kv.as_ref().unwrap_or(&self.ln_q).forward(g, store, kv);
        let vn = kn;
        if let Some(p) = pos_q {
            qn = g.add(qn, p);
        }
        if let Some(p) = pos_k {
            kn = g.add(kn, p);
        }

        let qp = self.wq.forward(g, store, qn);
        let kp = self.wk.forward(g, store, kn);
        let vp = self.wv.forward(g, store, vn);

        let split = |g: &mut Graph<F>, x: NodeId, l: usize| {
            let r = g.reshape(x, vec![l, h, dh]);
            g.transpose01(r) // [H, L, dh]
        };
        let qh = split(g, qp, lq);
        let kh = split(g, kp, lk);
        let vh = split(g, vp, lk);

        let scores = g.bmm(qh, kh, true); // [H, Lq, Lk]
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax_last(scaled, Some(key_mask));
        let ctx = g.bmm(weights, vh, false); // [H, Lq, dh]
        let merged = g.transpose01(ctx); // [Lq, H, dh]
        let flat = g.reshape(merged, vec![lq, d]);
        let out = self.wo.forward(g, store, flat);
        Ok((g.add(q, out), weights))
    }
}
