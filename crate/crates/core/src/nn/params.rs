//! Parameter store with optimizer state and the decoupled-weight-decay
//! adaptive update.

use rand::Rng;

use crate::error::{Error, Result};

use super::tensor::{Real, TensorData};

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub grad: Vec<F>,
    pub m1: Vec<F>,
    pub m2: Vec<F>,
    pub step: u64,
}

/// Named parameters in deterministic insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: std::collections::HashMap<String, ParamId>,
    grads_populated: bool,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: std::collections::HashMap::new(), grads_populated: false }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}: shape mismatch");
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let n = data.len();
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape,
            grad: vec![F::zero(); n],
            m1: vec![F::zero(); n],
            m2: vec![F::zero(); n],
            step: 0,
            data,
        });
        id
    }

    /// Xavier-uniform initialized affine weight [fan_in, fan_out].
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data =
            (0..fan_in * fan_out).map(|_| F::from_f64c(rng.gen_range(-bound..bound))).collect();
        self.add(name, vec![fan_in, fan_out], data)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![F::zero(); n])
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        // Box-Muller keeps us independent of rand_distr
        let data = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                F::from_f64c(z * std)
            })
            .collect();
        self.add(name, shape, data)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate()
    }

    pub fn data_tensor(&self, id: ParamId) -> TensorData<F> {
        let p = &self.params[id];
        TensorData::new(p.shape.clone(), p.data.clone())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|v| *v = F::zero());
        }
        self.grads_populated = false;
    }

    /// Adds a per-sample gradient map into the store's accumulators.
    pub fn accumulate(&mut self, grads: &GradMap<F>) {
        assert_eq!(grads.grads.len(), self.params.len(), "grad map size mismatch");
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (pv, gv) in p.grad.iter_mut().zip(g) {
                    *pv += *gv;
                }
            }
        }
        self.grads_populated = true;
    }

    pub fn grad_global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for p in &self.params {
            for &g in &p.grad {
                let g = g.to_f64c();
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    /// Scales every gradient so the global norm does not exceed `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = F::from_f64c(max_norm / norm);
            for p in &mut self.params {
                for g in &mut p.grad {
                    *g = *g * s;
                }
            }
        }
    }

    /// Decoupled weight-decay adaptive step. Gradients are left untouched;
    /// the caller resets them.
    pub fn adamw_step(&mut self, cfg: &AdamwConfig) -> Result<()> {
        if !self.grads_populated {
            return Err(Error::nn("adamw_step: gradients not populated"));
        }
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for p in &mut self.params {
            p.step += 1;
            let bc1 = 1.0 - b1.powi(p.step as i32);
            let bc2 = 1.0 - b2.powi(p.step as i32);
            for i in 0..p.data.len() {
                let g = p.grad[i].to_f64c();
                if !g.is_finite() {
                    return Err(Error::nn(format!("adamw_step: non-finite gradient in {}", p.name)));
                }
                let m = b1 * p.m1[i].to_f64c() + (1.0 - b1) * g;
                let v = b2 * p.m2[i].to_f64c() + (1.0 - b2) * g * g;
                p.m1[i] = F::from_f64c(m);
                p.m2[i] = F::from_f64c(v);
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let w = p.data[i].to_f64c();
                let updated =
                    w - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * w;
                p.data[i] = F::from_f64c(updated);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamwConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamwConfig {
    fn default() -> Self {
        AdamwConfig { lr: 1e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-sample parameter gradients, aligned with a store's param ids.
#[derive(Debug, Clone)]
pub struct GradMap<F> {
    pub grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> GradMap<F> {
    pub fn zeros(n: usize) -> Self {
        GradMap { grads: vec![None; n] }
    }

    pub fn add_to(&mut self, pid: ParamId, grad: &[F]) {
        match &mut self.grads[pid] {
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grad) {
                    *a += *g;
                }
            }
            None => self.grads[pid] = Some(grad.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &GradMap<F>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (pid, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add_to(pid, g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        let fs = F::from_f64c(s);
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * fs;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", vec![1], vec![v]);
        (store, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let (mut store, id) = single_param_store(3.0);
        let mut gm = GradMap::zeros(1);
        gm.add_to(id, &[0.0]);
        store.accumulate(&gm);
        let cfg = AdamwConfig { weight_decay: 0.0, ..Default::default() };
        store.adamw_step(&cfg).unwrap();
        assert_eq!(store.get(id).data[0], 3.0);
    }

    #[test]
    fn zero_grad_with_decay_scales_by_one_minus_lr_wd() {
        let (mut store, id) = single_param_store(2.0);
        let mut gm = GradMap::zeros(1);
        gm.add_to(id, &[0.0]);
        store.accumulate(&gm);
        let cfg = AdamwConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        store.adamw_step(&cfg).unwrap();
        assert!((store.get(id).data[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn single_step_matches_hand_reference() {
        // constant grad g from zero moments
        let g = 0.3;
        let (mut store, id) = single_param_store(1.0);
        let mut gm = GradMap::zeros(1);
        gm.add_to(id, &[g]);
        store.accumulate(&gm);
        let cfg = AdamwConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() };
        store.adamw_step(&cfg).unwrap();
        // hand-stepped: m = (1-b1) g, v = (1-b2) g^2, bias corrections undo
        // the (1-b) factors exactly for step 1
        let m_hat = g;
        let v_hat = g * g;
        let expect = 1.0 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((store.get(id).data[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn missing_grads_error() {
        let (mut store, _) = single_param_store(1.0);
        assert!(store.adamw_step(&AdamwConfig::default()).is_err());
        store.zero_grads();
        assert!(store.adamw_step(&AdamwConfig::default()).is_err());
    }

    #[test]
    fn clip_caps_global_norm() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let a = store.add("a", vec![2], vec![0.0, 0.0]);
        let mut gm = GradMap::zeros(1);
        gm.add_to(a, &[3.0, 4.0]);
        store.accumulate(&gm);
        store.clip_grad_norm(1.0);
        assert!((store.grad_global_norm() - 1.0).abs() < 1e-12);
    }
}
