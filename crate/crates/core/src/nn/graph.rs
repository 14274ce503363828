//! Tape-based computation graph with reverse-mode differentiation.

use crate::error::{Error, Result};

use super::params::{GradMap, ParamStore};
use super::tensor::{Real, TensorData};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    /// bias broadcast over the last dimension
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Vec<F>),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// [.., K] x [K, N]
    Matmul(NodeId, NodeId),
    /// [B, M, K] x [B, K, N], or [B, N, K] when transposed
    Bmm { a: NodeId, b: NodeId, transpose_b: bool },
    /// 3-D axis swap [A, B, C] -> [B, A, C]
    Transpose01(NodeId),
    Reshape(NodeId),
    /// concatenation along the last dim of two 2-D tensors
    ConcatLast(NodeId, NodeId),
    /// stacking rows of two 2-D tensors
    ConcatRows(NodeId, NodeId),
    SliceRows { x: NodeId, start: usize },
    RepeatRows(NodeId),
    /// [N, T, D] + mask [N, T] -> [N, D]; gradient routes to argmax only
    MaxPool { x: NodeId, mask: Vec<bool> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    SoftmaxLast { x: NodeId, mask: Option<Vec<bool>> },
    /// mean absolute error over valid rows and all columns -> scalar
    L1Loss { pred: NodeId, target: Vec<F>, mask: Vec<bool> },
    /// -log softmax(logits)[target] with masked slots at -inf -> scalar
    CrossEntropy { logits: NodeId, target: usize, mask: Vec<bool> },
    Sum(NodeId),
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Vec<F>,
    requires_grad: bool,
    op: Op<F>,
    param: Option<usize>,
}

const LN_EPS: f64 = 1e-5;

/// Records one forward pass. Values stay alive for the backward walk;
/// a graph is built, differentiated once, and dropped.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    param_nodes: std::collections::HashMap<usize, NodeId>,
    poisoned: Option<String>,
    backward_done: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: std::collections::HashMap::new(),
            poisoned: None,
            backward_done: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if self.poisoned.is_none() && !data.iter().all(|v| v.is_finite()) {
            self.poisoned = Some(format!("non-finite values produced by {}", op_name(&op)));
        }
        let grad = vec![F::zero(); data.len()];
        self.nodes.push(Node { shape, data, grad, requires_grad, op, param: None });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn value_tensor(&self, id: NodeId) -> TensorData<F> {
        TensorData::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
    }

    pub fn grad(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].grad
    }

    /// First non-finite op recorded, if any.
    pub fn check(&self) -> Result<()> {
        match &self.poisoned {
            Some(msg) => Err(Error::nn(msg.clone())),
            None => Ok(()),
        }
    }

    // -- leaves --------------------------------------------------------

    /// Constant input; no gradient tracking.
    pub fn input(&mut self, t: &TensorData<F>) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn input_f32(&mut self, t: &TensorData<f32>) -> NodeId {
        let cast: TensorData<F> = t.cast();
        self.push(cast.shape, cast.data, Op::Leaf, false)
    }

    /// Differentiable leaf that is not a parameter (gradient checks).
    pub fn var(&mut self, t: &TensorData<F>) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true)
    }

    /// Leases a parameter into the graph; repeated calls return the same
    /// node so gradients accumulate once.
    pub fn param(&mut self, store: &ParamStore<F>, pid: usize) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&pid) {
            return id;
        }
        let p = store.get(pid);
        let id = self.push(p.shape.clone(), p.data.clone(), Op::Leaf, true);
        self.nodes[id.0].param = Some(pid);
        self.param_nodes.insert(pid, id);
        id
    }

    // -- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(&x, &y)| x + y).collect();
        let req = self.req(a) || self.req(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Add(a, b), req)
    }

    /// x [.., D] + bias [D]
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(bias), &[d], "bias shape mismatch");
        let bdata = &self.nodes[bias.0].data;
        let data = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bdata[i % d])
            .collect();
        let req = self.req(x) || self.req(bias);
        self.push(self.nodes[x.0].shape.clone(), data, Op::AddBias(x, bias), req)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(&x, &y)| x * y).collect();
        let req = self.req(a) || self.req(b);
        self.push(self.nodes[a.0].shape.clone(), data, Op::Mul(a, b), req)
    }

    /// Elementwise product with a constant (mask) array.
    pub fn mul_const(&mut self, x: NodeId, c: Vec<F>) -> NodeId {
        assert_eq!(self.nodes[x.0].data.len(), c.len(), "mul_const length mismatch");
        let data = self.nodes[x.0].data.iter().zip(&c).map(|(&v, &m)| v * m).collect();
        let req = self.req(x);
        self.push(self.nodes[x.0].shape.clone(), data, Op::MulConst(x, c), req)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let fc = F::from_f64c(c);
        let data = self.nodes[x.0].data.iter().map(|&v| v * fc).collect();
        let req = self.req(x);
        self.push(self.nodes[x.0].shape.clone(), data, Op::Scale(x, c), req)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|&v| v.max(F::zero())).collect();
        let req = self.req(x);
        self.push(self.nodes[x.0].shape.clone(), data, Op::Relu(x), req)
    }

    // -- linear algebra --------------------------------------------------

    /// x [.., K] times w [K, N].
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2, "matmul weight must be 2-D");
        let k = *xs.last().expect("matmul input rank >= 1");
        assert_eq!(k, ws[0], "matmul inner dims {k} vs {}", ws[0]);
        let n = ws[1];
        let m: usize = xs[..xs.len() - 1].iter().product();
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for kk in 0..k {
                let xv = xd[i * k + kk];
                if xv == F::zero() {
                    continue;
                }
                let wrow = &wd[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += xv * wrow[j];
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let req = self.req(x) || self.req(w);
        self.push(shape, out, Op::Matmul(x, w), req)
    }

    /// Batched matmul [B, M, K] x [B, K, N] (transpose_b: b is [B, N, K]).
    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> NodeId {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        assert!(ash.len() == 3 && bsh.len() == 3, "bmm expects 3-D tensors");
        assert_eq!(ash[0], bsh[0], "bmm batch mismatch");
        let (bs, m, k) = (ash[0], ash[1], ash[2]);
        let n = if transpose_b { bsh[1] } else { bsh[2] };
        let bk = if transpose_b { bsh[2] } else { bsh[1] };
        assert_eq!(k, bk, "bmm inner dims");
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![F::zero(); bs * m * n];
        for bi in 0..bs {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = F::zero();
                    for kk in 0..k {
                        let av = ad[bi * m * k + i * k + kk];
                        let bv = if transpose_b {
                            bd[bi * n * k + j * k + kk]
                        } else {
                            bd[bi * k * n + kk * n + j]
                        };
                        acc += av * bv;
                    }
                    out[bi * m * n + i * n + j] = acc;
                }
            }
        }
        let req = self.req(a) || self.req(b);
        self.push(vec![bs, m, n], out, Op::Bmm { a, b, transpose_b }, req)
    }

    pub fn transpose01(&mut self, x: NodeId) -> NodeId {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 3, "transpose01 expects 3-D");
        let (a, b, c) = (sh[0], sh[1], sh[2]);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![F::zero(); a * b * c];
        for i in 0..a {
            for j in 0..b {
                let src = &xd[(i * b + j) * c..(i * b + j + 1) * c];
                out[(j * a + i) * c..(j * a + i + 1) * c].copy_from_slice(src);
            }
        }
        let req = self.req(x);
        self.push(vec![b, a, c], out, Op::Transpose01(x), req)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[x.0].data.len(),
            "reshape element count mismatch"
        );
        let data = self.nodes[x.0].data.clone();
        let req = self.req(x);
        self.push(shape, data, Op::Reshape(x), req)
    }

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        assert!(ash.len() == 2 && bsh.len() == 2 && ash[0] == bsh[0], "concat_last expects matching 2-D");
        let (rows, da, db) = (ash[0], ash[1], bsh[1]);
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&self.nodes[a.0].data[r * da..(r + 1) * da]);
            out.extend_from_slice(&self.nodes[b.0].data[r * db..(r + 1) * db]);
        }
        let req = self.req(a) || self.req(b);
        self.push(vec![rows, da + db], out, Op::ConcatLast(a, b), req)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        assert!(ash.len() == 2 && bsh.len() == 2 && ash[1] == bsh[1], "concat_rows expects matching 2-D");
        let mut out = self.nodes[a.0].data.clone();
        out.extend_from_slice(&self.nodes[b.0].data);
        let req = self.req(a) || self.req(b);
        self.push(vec![ash[0] + bsh[0], ash[1]], out, Op::ConcatRows(a, b), req)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let sh = self.shape(x).to_vec();
        assert!(sh.len() == 2 && start + len <= sh[0], "slice_rows out of range");
        let d = sh[1];
        let data = self.nodes[x.0].data[start * d..(start + len) * d].to_vec();
        let req = self.req(x);
        self.push(vec![len, d], data, Op::SliceRows { x, start }, req)
    }

    /// Tiles a [1, D] tensor into [times, D].
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        let sh = self.shape(x).to_vec();
        assert!(sh.len() == 2 && sh[0] == 1, "repeat_rows expects [1, D]");
        let d = sh[1];
        let mut out = Vec::with_capacity(times * d);
        for _ in 0..times {
            out.extend_from_slice(&self.nodes[x.0].data);
        }
        let req = self.req(x);
        self.push(vec![times, d], out, Op::RepeatRows(x), req)
    }

    // -- reductions and normalization ------------------------------------

    /// Per-feature max over valid positions; fully masked rows yield zeros.
    pub fn max_pool(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 3, "max_pool expects [N, T, D]");
        let (n, t, d) = (sh[0], sh[1], sh[2]);
        assert_eq!(mask.len(), n * t, "max_pool mask length");
        let xd = &self.nodes[x.0].data;
        let mut out = vec![F::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                let mut best: Option<F> = None;
                for s in 0..t {
                    if !mask[i * t + s] {
                        continue;
                    }
                    let v = xd[(i * t + s) * d + j];
                    best = Some(match best {
                        Some(b) if b >= v => b,
                        _ => v,
                    });
                }
                out[i * d + j] = best.unwrap_or(F::zero());
            }
        }
        let req = self.req(x);
        self.push(vec![n, d], out, Op::MaxPool { x, mask: mask.to_vec() }, req)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let sh = self.shape(x).to_vec();
        let d = *sh.last().unwrap();
        assert_eq!(self.shape(gamma), &[d], "layer_norm gamma shape");
        assert_eq!(self.shape(beta), &[d], "layer_norm beta shape");
        let rows = self.nodes[x.0].data.len() / d;
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let eps = F::from_f64c(LN_EPS);
        let fd = F::from_f64c(d as f64);
        let mut out = vec![F::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mut mu = F::zero();
            for &v in row {
                mu += v;
            }
            mu = mu / fd;
            let mut var = F::zero();
            for &v in row {
                var += (v - mu) * (v - mu);
            }
            var = var / fd;
            let inv = F::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * inv * gd[j] + bd[j];
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(sh, out, Op::LayerNorm { x, gamma, beta }, req)
    }

    /// Softmax over the last dim; masked entries get zero probability.
    /// The mask, when given, must span the last dimension.
    pub fn softmax_last(&mut self, x: NodeId, mask: Option<&[bool]>) -> NodeId {
        let sh = self.shape(x).to_vec();
        let d = *sh.last().unwrap();
        if let Some(m) = mask {
            assert_eq!(m.len(), d, "softmax mask length");
            assert!(m.iter().any(|&v| v), "softmax over fully masked row");
        }
        let rows = self.nodes[x.0].data.len() / d;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![F::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            softmax_row(row, mask, &mut out[r * d..(r + 1) * d]);
        }
        let req = self.req(x);
        self.push(sh, out, Op::SoftmaxLast { x, mask: mask.map(|m| m.to_vec()) }, req)
    }

    /// Mean absolute error between `pred` [T, C] and a constant target over
    /// rows where `mask` is true, averaged over valid rows and columns.
    pub fn l1_loss(&mut self, pred: NodeId, target: &[F], mask: &[bool]) -> Result<NodeId> {
        let sh = self.shape(pred).to_vec();
        assert_eq!(sh.len(), 2, "l1_loss expects [T, C]");
        let (t, c) = (sh[0], sh[1]);
        assert_eq!(target.len(), t * c, "l1_loss target length");
        assert_eq!(mask.len(), t, "l1_loss mask length");
        let count = mask.iter().filter(|&&m| m).count() * c;
        if count == 0 {
            return Err(Error::nn("l1_loss: no valid timesteps"));
        }
        let xd = &self.nodes[pred.0].data;
        let mut acc = F::zero();
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            for j in 0..c {
                acc += (xd[r * c + j] - target[r * c + j]).abs();
            }
        }
        let loss = acc / F::from_f64c(count as f64);
        let req = self.req(pred);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::L1Loss { pred, target: target.to_vec(), mask: mask.to_vec() },
            req,
        ))
    }

    /// Cross-entropy of softmax(logits) against a target index; masked slots
    /// receive -inf logits before the softmax.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize, mask: &[bool]) -> Result<NodeId> {
        let sh = self.shape(logits).to_vec();
        assert_eq!(sh.len(), 1, "cross_entropy expects 1-D logits");
        assert_eq!(mask.len(), sh[0], "cross_entropy mask length");
        if target >= sh[0] || !mask[target] {
            return Err(Error::nn(format!("cross_entropy: target {target} masked or out of range")));
        }
        let row = &self.nodes[logits.0].data;
        let mut probs = vec![F::zero(); row.len()];
        softmax_row(row, Some(mask), &mut probs);
        let p = probs[target].max(F::from_f64c(f64::MIN_POSITIVE));
        let loss = -p.ln();
        let req = self.req(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, target, mask: mask.to_vec() },
            req,
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = F::zero();
        for &v in &self.nodes[x.0].data {
            acc += v;
        }
        let req = self.req(x);
        self.push(vec![1], vec![acc], Op::Sum(x), req)
    }

    /// Mean of a list of scalar nodes.
    pub fn mean_scalars(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "mean of nothing");
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        self.scale(acc, 1.0 / xs.len() as f64)
    }

    // -- backward ---------------------------------------------------------

    /// Reverse accumulation from a scalar loss into every reachable leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check()?;
        if self.backward_done {
            return Err(Error::nn("backward called twice on one graph"));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::nn("backward requires a scalar loss"));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad[0] = F::one();
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (left, right) = self.nodes.split_at_mut(i);
            backward_op(left, &right[0]);
        }
        Ok(())
    }

    /// Collects parameter gradients into a map aligned with the store.
    pub fn param_grads(&self, n_params: usize) -> GradMap<F> {
        let mut map = GradMap::zeros(n_params);
        for node in &self.nodes {
            if let Some(pid) = node.param {
                map.add_to(pid, &node.grad);
            }
        }
        map
    }
}

fn softmax_row<F: Real>(row: &[F], mask: Option<&[bool]>, out: &mut [F]) {
    let valid = |i: usize| mask.map(|m| m[i]).unwrap_or(true);
    let mut mx = F::neg_infinity();
    for (i, &v) in row.iter().enumerate() {
        if valid(i) && v > mx {
            mx = v;
        }
    }
    let mut denom = F::zero();
    for (i, &v) in row.iter().enumerate() {
        if valid(i) {
            let e = (v - mx).exp();
            out[i] = e;
            denom += e;
        } else {
            out[i] = F::zero();
        }
    }
    for v in out.iter_mut() {
        *v = *v / denom;
    }
}

fn op_name<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Mul(..) => "mul",
        Op::MulConst(..) => "mul_const",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Matmul(..) => "matmul",
        Op::Bmm { .. } => "bmm",
        Op::Transpose01(..) => "transpose01",
        Op::Reshape(..) => "reshape",
        Op::ConcatLast(..) => "concat_last",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::RepeatRows(..) => "repeat_rows",
        Op::MaxPool { .. } => "max_pool",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SoftmaxLast { .. } => "softmax",
        Op::L1Loss { .. } => "l1_loss",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(..) => "sum",
    }
}

/// Propagates `node`'s gradient into its parents (all strictly earlier in
/// the tape, hence inside `left`).
fn backward_op<F: Real>(left: &mut [Node<F>], node: &Node<F>) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (i, &gv) in g.iter().enumerate() {
                if left[a.0].requires_grad {
                    left[a.0].grad[i] += gv;
                }
                if left[b.0].requires_grad {
                    left[b.0].grad[i] += gv;
                }
            }
        }
        Op::AddBias(x, bias) => {
            let d = left[bias.0].data.len();
            for (i, &gv) in g.iter().enumerate() {
                if left[x.0].requires_grad {
                    left[x.0].grad[i] += gv;
                }
                if left[bias.0].requires_grad {
                    left[bias.0].grad[i % d] += gv;
                }
            }
        }
        Op::Mul(a, b) => {
            for (i, &gv) in g.iter().enumerate() {
                if left[a.0].requires_grad {
                    let bv = left[b.0].data[i];
                    left[a.0].grad[i] += gv * bv;
                }
                if left[b.0].requires_grad {
                    let av = left[a.0].data[i];
                    left[b.0].grad[i] += gv * av;
                }
            }
        }
        Op::MulConst(x, c) => {
            if left[x.0].requires_grad {
                for (i, &gv) in g.iter().enumerate() {
                    left[x.0].grad[i] += gv * c[i];
                }
            }
        }
        Op::Scale(x, c) => {
            if left[x.0].requires_grad {
                let fc = F::from_f64c(*c);
                for (i, &gv) in g.iter().enumerate() {
                    left[x.0].grad[i] += gv * fc;
                }
            }
        }
        Op::Relu(x) => {
            if left[x.0].requires_grad {
                for (i, &gv) in g.iter().enumerate() {
                    if left[x.0].data[i] > F::zero() {
                        left[x.0].grad[i] += gv;
                    }
                }
            }
        }
        Op::Matmul(x, w) => {
            let k = left[w.0].shape[0];
            let n = left[w.0].shape[1];
            let m = left[x.0].data.len() / k;
            if left[x.0].requires_grad {
                for i in 0..m {
                    for kk in 0..k {
                        let mut acc = F::zero();
                        for j in 0..n {
                            acc += g[i * n + j] * left[w.0].data[kk * n + j];
                        }
                        left[x.0].grad[i * k + kk] += acc;
                    }
                }
            }
            if left[w.0].requires_grad {
                for i in 0..m {
                    for kk in 0..k {
                        let xv = left[x.0].data[i * k + kk];
                        if xv == F::zero() {
                            continue;
                        }
                        for j in 0..n {
                            left[w.0].grad[kk * n + j] += xv * g[i * n + j];
                        }
                    }
                }
            }
        }
        Op::Bmm { a, b, transpose_b } => {
            let (bs, m, k) = {
                let s = &left[a.0].shape;
                (s[0], s[1], s[2])
            };
            let n = node.shape[2];
            for bi in 0..bs {
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[bi * m * n + i * n + j];
                        if gv == F::zero() {
                            continue;
                        }
                        for kk in 0..k {
                            let b_idx = if *transpose_b {
                                bi * n * k + j * k + kk
                            } else {
                                bi * k * n + kk * n + j
                            };
                            if left[a.0].requires_grad {
                                let bv = left[b.0].data[b_idx];
                                left[a.0].grad[bi * m * k + i * k + kk] += gv * bv;
                            }
                            if left[b.0].requires_grad {
                                let av = left[a.0].data[bi * m * k + i * k + kk];
                                left[b.0].grad[b_idx] += gv * av;
                            }
                        }
                    }
                }
            }
        }
        Op::Transpose01(x) => {
            if left[x.0].requires_grad {
                let (b, a, c) = (node.shape[0], node.shape[1], node.shape[2]);
                // node is [b, a, c]; parent is [a, b, c]
                for j in 0..b {
                    for i in 0..a {
                        for t in 0..c {
                            left[x.0].grad[(i * b + j) * c + t] += g[(j * a + i) * c + t];
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if left[x.0].requires_grad {
                for (i, &gv) in g.iter().enumerate() {
                    left[x.0].grad[i] += gv;
                }
            }
        }
        Op::ConcatLast(a, b) => {
            let da = left[a.0].shape[1];
            let db = left[b.0].shape[1];
            let rows = left[a.0].shape[0];
            for r in 0..rows {
                for j in 0..da {
                    if left[a.0].requires_grad {
                        left[a.0].grad[r * da + j] += g[r * (da + db) + j];
                    }
                }
                for j in 0..db {
                    if left[b.0].requires_grad {
                        left[b.0].grad[r * db + j] += g[r * (da + db) + da + j];
                    }
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let na = left[a.0].data.len();
            if left[a.0].requires_grad {
                for i in 0..na {
                    left[a.0].grad[i] += g[i];
                }
            }
            if left[b.0].requires_grad {
                for i in 0..left[b.0].data.len() {
                    left[b.0].grad[i] += g[na + i];
                }
            }
        }
        Op::SliceRows { x, start } => {
            if left[x.0].requires_grad {
                let d = left[x.0].shape[1];
                for (i, &gv) in g.iter().enumerate() {
                    left[x.0].grad[start * d + i] += gv;
                }
            }
        }
        Op::RepeatRows(x) => {
            if left[x.0].requires_grad {
                let d = left[x.0].data.len();
                for (i, &gv) in g.iter().enumerate() {
                    left[x.0].grad[i % d] += gv;
                }
            }
        }
        Op::MaxPool { x, mask } => {
            if left[x.0].requires_grad {
                let (n, t, d) = {
                    let s = &left[x.0].shape;
                    (s[0], s[1], s[2])
                };
                for i in 0..n {
                    for j in 0..d {
                        let mut best: Option<(usize, F)> = None;
                        for s in 0..t {
                            if !mask[i * t + s] {
                                continue;
                            }
                            let v = left[x.0].data[(i * t + s) * d + j];
                            best = Some(match best {
                                Some((bi, bv)) if bv >= v => (bi, bv),
                                _ => (s, v),
                            });
                        }
                        if let Some((s, _)) = best {
                            left[x.0].grad[(i * t + s) * d + j] += g[i * d + j];
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta } => {
            let d = left[gamma.0].data.len();
            let rows = left[x.0].data.len() / d;
            let eps = F::from_f64c(LN_EPS);
            let fd = F::from_f64c(d as f64);
            for r in 0..rows {
                let row: Vec<F> = left[x.0].data[r * d..(r + 1) * d].to_vec();
                let mut mu = F::zero();
                for &v in &row {
                    mu += v;
                }
                mu = mu / fd;
                let mut var = F::zero();
                for &v in &row {
                    var += (v - mu) * (v - mu);
                }
                var = var / fd;
                let inv = F::one() / (var + eps).sqrt();
                let xhat: Vec<F> = row.iter().map(|&v| (v - mu) * inv).collect();
                let grow = &g[r * d..(r + 1) * d];
                if left[beta.0].requires_grad {
                    for j in 0..d {
                        left[beta.0].grad[j] += grow[j];
                    }
                }
                if left[gamma.0].requires_grad {
                    for j in 0..d {
                        left[gamma.0].grad[j] += grow[j] * xhat[j];
                    }
                }
                if left[x.0].requires_grad {
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    let dxhat: Vec<F> =
                        (0..d).map(|j| grow[j] * left[gamma.0].data[j]).collect();
                    for j in 0..d {
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    let mean_dxhat = sum_dxhat / fd;
                    let mean_dxhat_xhat = sum_dxhat_xhat / fd;
                    for j in 0..d {
                        left[x.0].grad[r * d + j] +=
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
        }
        Op::SoftmaxLast { x, mask } => {
            if left[x.0].requires_grad {
                let d = *node.shape.last().unwrap();
                let rows = node.data.len() / d;
                for r in 0..rows {
                    let y = &node.data[r * d..(r + 1) * d];
                    let gy = &g[r * d..(r + 1) * d];
                    let mut dot = F::zero();
                    for j in 0..d {
                        dot += gy[j] * y[j];
                    }
                    for j in 0..d {
                        if mask.as_ref().map(|m| m[j]).unwrap_or(true) {
                            left[x.0].grad[r * d + j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
        }
        Op::L1Loss { pred, target, mask } => {
            if left[pred.0].requires_grad {
                let c = left[pred.0].shape[1];
                let count = mask.iter().filter(|&&m| m).count() * c;
                let scale = g[0] / F::from_f64c(count as f64);
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..c {
                        let diff = left[pred.0].data[r * c + j] - target[r * c + j];
                        let s = if diff > F::zero() {
                            F::one()
                        } else if diff < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        left[pred.0].grad[r * c + j] += scale * s;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, target, mask } => {
            if left[logits.0].requires_grad {
                let row = &left[logits.0].data;
                let mut probs = vec![F::zero(); row.len()];
                softmax_row(row, Some(mask), &mut probs);
                for (j, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    let indicator = if j == *target { F::one() } else { F::zero() };
                    left[logits.0].grad[j] += g[0] * (probs[j] - indicator);
                }
            }
        }
        Op::Sum(x) => {
            if left[x.0].requires_grad {
                for v in left[x.0].grad.iter_mut() {
                    *v += g[0];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn td(shape: Vec<usize>, vals: &[f64]) -> TensorData<f64> {
        TensorData::from_f64(shape, vals)
    }

    #[test]
    fn linear_map_gradient_is_input() {
        // loss = sum(w * x) with x fixed => dL/dw = x
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&td(vec![3], &[1.0, 2.0, 3.0]));
        let w = g.var(&td(vec![3], &[0.5, -1.0, 2.0]));
        let prod = g.mul(w, x);
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn unused_leaf_keeps_zero_grad() {
        let mut g: Graph<f64> = Graph::new();
        let w = g.var(&td(vec![2], &[1.0, 1.0]));
        let unused = g.var(&td(vec![2], &[5.0, 5.0]));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut g: Graph<f64> = Graph::new();
        let w = g.var(&td(vec![1], &[2.0]));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn non_scalar_loss_errors() {
        let mut g: Graph<f64> = Graph::new();
        let w = g.var(&td(vec![2], &[2.0, 1.0]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn max_pool_values_and_masking() {
        let mut g: Graph<f64> = Graph::new();
        // one row, two positions, features [[1, 5], [3, 2]] -> [3, 5]
        let x = g.input(&td(vec![1, 2, 2], &[1.0, 5.0, 3.0, 2.0]));
        let y = g.max_pool(x, &[true, true]);
        assert_eq!(g.value(y), &[3.0, 5.0]);
        // masking the second position leaves only the first
        let y2 = g.max_pool(x, &[true, false]);
        assert_eq!(g.value(y2), &[1.0, 5.0]);
        // fully masked row -> zeros
        let y3 = g.max_pool(x, &[false, false]);
        assert_eq!(g.value(y3), &[0.0, 0.0]);
    }

    #[test]
    fn masked_value_never_influences_max_pool() {
        let a = td(vec![1, 2, 2], &[1.0, 5.0, 3.0, 2.0]);
        let mut b = a.clone();
        b.data[2] = 999.0; // masked position perturbed
        let run = |t: &TensorData<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let x = g.input(t);
            let y = g.max_pool(x, &[true, false]);
            g.value(y).to_vec()
        };
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&td(vec![1, 4], &[0.0; 4]));
        let y = g.softmax_last(x, None);
        for &v in g.value(y) {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let y2 = g.softmax_last(x, Some(&[true, false, true, false]));
        let v = g.value(y2);
        assert!((v[0] - 0.5).abs() < 1e-12 && v[1] == 0.0 && (v[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_analytic_values() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&td(vec![64], &[0.0; 64]));
        let loss = g.cross_entropy(x, 10, &[true; 64]).unwrap();
        assert!((g.value(loss)[0] - (64.0f64).ln()).abs() < 1e-9);

        let mut vals = [0.0; 8];
        vals[3] = 30.0;
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&TensorData::from_f64(vec![8], &vals));
        let loss = g.cross_entropy(x, 3, &[true; 8]).unwrap();
        assert!(g.value(loss)[0] < 1e-9);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.var(&td(vec![4], &[0.3, -0.7, 1.1, 0.0]));
        let loss = g.cross_entropy(x, 2, &[true; 4]).unwrap();
        g.backward(loss).unwrap();
        let mut probs = vec![0.0; 4];
        softmax_row(g.value(x), Some(&[true; 4]), &mut probs);
        for j in 0..4 {
            let expect = probs[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((g.grad(x)[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_masked_target_errors() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&td(vec![4], &[0.0; 4]));
        assert!(g.cross_entropy(x, 1, &[true, false, true, true]).is_err());
    }

    #[test]
    fn l1_loss_values() {
        let mut g: Graph<f64> = Graph::new();
        let pred = g.input(&td(vec![3, 2], &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]));
        let target: Vec<f64> = vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0];
        let loss = g.l1_loss(pred, &target, &[true; 3]).unwrap();
        assert_eq!(g.value(loss)[0], 0.0);
        // pred = gt + (1, 0) -> 0.5
        let shifted: Vec<f64> = vec![2.0, 0.0, 3.0, 0.0, 4.0, 0.0];
        let pred2 = g.input(&TensorData::from_f64(vec![3, 2], &shifted));
        let loss2 = g.l1_loss(pred2, &target, &[true; 3]).unwrap();
        assert!((g.value(loss2)[0] - 0.5).abs() < 1e-12);
        // no valid steps is an error
        assert!(g.l1_loss(pred, &target, &[false; 3]).is_err());
    }

    #[test]
    fn l1_loss_matches_double_loop_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let t = 9;
        let pred: Vec<f64> = (0..t * 2).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let gt: Vec<f64> = (0..t * 2).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mask: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.7)).collect();
        if !mask.iter().any(|&m| m) {
            return;
        }
        let mut acc = 0.0;
        let mut cnt = 0;
        for r in 0..t {
            if mask[r] {
                for c in 0..2 {
                    acc += (pred[r * 2 + c] - gt[r * 2 + c]).abs();
                    cnt += 1;
                }
            }
        }
        let expect = acc / cnt as f64;
        let mut g: Graph<f64> = Graph::new();
        let p = g.input(&TensorData::new(vec![t, 2], pred));
        let loss = g.l1_loss(p, &gt, &mask).unwrap();
        assert!((g.value(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn poison_on_nonfinite() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(&td(vec![1], &[1e308]));
        let y = g.mul(x, x); // overflows to inf
        assert!(g.check().is_err());
        let _ = y;
    }

    #[test]
    fn matmul_and_bmm_agree_with_naive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (3, 4, 5);
        let x: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g: Graph<f64> = Graph::new();
        let xn = g.input(&TensorData::new(vec![m, k], x.clone()));
        let wn = g.input(&TensorData::new(vec![k, n], w.clone()));
        let y = g.matmul(xn, wn);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += x[i * k + kk] * w[kk * n + j];
                }
                assert!((g.value(y)[i * n + j] - acc).abs() < 1e-12);
            }
        }
        // bmm with batch 1, transposed b gives x * w^T
        let mut g: Graph<f64> = Graph::new();
        let xn = g.input(&TensorData::new(vec![1, m, k], x.clone()));
        let wn = g.input(&TensorData::new(vec![1, n, k], transpose(&w, k, n)));
        let y = g.bmm(xn, wn, true);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += x[i * k + kk] * w[kk * n + j];
                }
                assert!((g.value(y)[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    fn transpose(w: &[f64], k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        for i in 0..k {
            for j in 0..n {
                out[j * k + i] = w[i * n + j];
            }
        }
        out
    }
}
