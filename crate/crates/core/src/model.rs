//! Assembles encoders and decoder into one model, owns the preprocessing
//! pipeline (normalize, crop, tensorize, intention building), and handles
//! checkpoint persistence of weights + anchors + configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, ModelConfig, TrainConfig};
use crate::decoder::{extract_output, GeneratorOutput, MultiModalOutput, TrajectoryDecoder};
use crate::encoders::{ContextEncoder, RouteEncoder};
use crate::error::{Error, Result};
use crate::geom::RigidTransform;
use crate::intention::{build_intention_set, ClusterAnchors, IntentionSet};
use crate::nn::{load_checkpoint, save_checkpoint, Graph, ParamStore, Real};
use crate::scene::{self, SceneTensors, Scenario};

pub struct Int2Model {
    pub cfg: ModelConfig,
    context: ContextEncoder,
    route: Option<RouteEncoder>,
    decoder: TrajectoryDecoder,
}

impl Int2Model {
    /// Builds all parameters in a deterministic order from the seed.
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "model_init"));
        let context = ContextEncoder::new(store, cfg, &mut rng);
        let route = cfg.use_route_embedding.then(|| RouteEncoder::new(store, cfg, &mut rng));
        let decoder = TrajectoryDecoder::new(store, cfg, &mut rng);
        Int2Model { cfg: cfg.clone(), context, route, decoder }
    }

    /// Full forward pass over one prepared scene. `k_limit` truncates the
    /// decoder iteration count (None = all K).
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        tensors: &SceneTensors,
        intentions: &IntentionSet,
        k_limit: Option<usize>,
    ) -> Result<GeneratorOutput> {
        let ctx = self.context.forward(g, store, tensors)?;
        let route = match &self.route {
            Some(enc) => Some(enc.forward(g, store, &ctx, tensors)?),
            None => None,
        };
        self.decoder.forward(g, store, &ctx, route.as_ref(), intentions, k_limit)
    }
}

/// One scenario preprocessed for the model: ego frame, cropped, tensorized,
/// with intention rows built.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    /// ego-frame scenario after cropping (ground truth + routes retained)
    pub scenario: Scenario,
    /// global -> ego transform of this scenario
    pub to_ego: RigidTransform,
    pub tensors: SceneTensors,
    pub intentions: IntentionSet,
}

pub fn prepare(
    scenario: &Scenario,
    cfg: &ModelConfig,
    anchors: Option<&ClusterAnchors>,
) -> Result<Prepared> {
    let to_ego = scene::ego_frame_transform(scenario)?;
    let ego = scene::normalize_to_ego_frame(scenario)?;
    let cropped = scene::crop_map(&ego, cfg.map_range);
    let tensors = scene::tensorize(&cropped, &cfg.tensorize_config())?;
    let intentions = build_intention_set(
        &cropped,
        &tensors.agent_ids,
        &tensors.agent_mask,
        cfg.intention_mode,
        cfg.d_r,
        cfg.n_q,
        anchors,
    )?;
    Ok(Prepared { id: cropped.id.clone(), scenario: cropped, to_ego, tensors, intentions })
}

/// Weights, anchors and configuration of a trained model.
pub struct TrainedModel {
    pub cfg: TrainConfig,
    pub store: ParamStore<f32>,
    pub model: Int2Model,
    pub anchors: Option<ClusterAnchors>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    anchors: Option<ClusterAnchors>,
}

impl TrainedModel {
    pub fn init(cfg: &TrainConfig, anchors: Option<ClusterAnchors>) -> Self {
        let mut store = ParamStore::new();
        let model = Int2Model::new(&mut store, &cfg.model, cfg.seed);
        TrainedModel { cfg: cfg.clone(), store, model, anchors }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = CheckpointMeta { config: self.cfg.clone(), anchors: self.anchors.clone() };
        let json = serde_json::to_string(&meta).expect("meta serializes");
        save_checkpoint(&self.store, &json, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&ck.meta_json)
            .map_err(|e| Error::nn(format!("checkpoint meta: {e}")))?;
        let mut loaded = TrainedModel::init(&meta.config, meta.anchors);
        ck.apply_to(&mut loaded.store)?;
        Ok(loaded)
    }

    pub fn prepare(&self, scenario: &Scenario) -> Result<Prepared> {
        prepare(scenario, &self.cfg.model, self.anchors.as_ref())
    }

    /// Inference on one global-frame scenario: outputs are in the ego frame
    /// together with the transform that took the scene there.
    pub fn infer(
        &self,
        scenario: &Scenario,
        k_limit: Option<usize>,
    ) -> Result<(MultiModalOutput, RigidTransform)> {
        let prep = self.prepare(scenario)?;
        let out = self.infer_prepared(&prep, k_limit)?;
        Ok((out, prep.to_ego))
    }

    pub fn infer_prepared(&self, prep: &Prepared, k_limit: Option<usize>) -> Result<MultiModalOutput> {
        let mut g: Graph<f32> = Graph::new();
        let gen = self.model.forward(&mut g, &self.store, &prep.tensors, &prep.intentions, k_limit)?;
        g.check()?;
        Ok(extract_output(
            &g,
            &gen,
            &prep.intentions,
            &prep.tensors.agent_ids,
            &prep.tensors.agent_mask,
            self.cfg.model.t_f,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::profile_micro;
    use crate::synthetic::{gen_synthetic, ScenarioKind};

    fn micro_model() -> (TrainedModel, Scenario) {
        let mut cfg = profile_micro();
        cfg.model.t_f = 20;
        let scenario = gen_synthetic(ScenarioKind::Straight, 5, cfg.model.t_h, cfg.model.t_f);
        (TrainedModel::init(&cfg, None), scenario)
    }

    #[test]
    fn forward_shapes_and_score_normalization() {
        let (tm, scenario) = micro_model();
        let (out, _) = tm.infer(&scenario, None).unwrap();
        assert_eq!(out.iters.len(), tm.cfg.model.iterations);
        let it = out.final_iter();
        assert_eq!(it.plan_traj.shape, vec![tm.cfg.model.n_q, tm.cfg.model.t_f, 2]);
        // plan confidences sum to 1 over valid modes
        let sum: f32 = it.plan_scores.data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5, "plan scores sum to {sum}");
        // masked modes carry exactly zero probability
        for (m, &valid) in out.mode_mask[0].iter().enumerate() {
            if !valid {
                assert_eq!(it.plan_scores.data[m], 0.0);
            }
        }
    }

    #[test]
    fn iteration_prefix_is_bit_exact() {
        let (tm, scenario) = micro_model();
        let (full, _) = tm.infer(&scenario, None).unwrap();
        let (partial, _) = tm.infer(&scenario, Some(1)).unwrap();
        assert_eq!(partial.iters.len(), 1);
        assert_eq!(partial.iters[0].plan_traj.data, full.iters[0].plan_traj.data);
        assert_eq!(partial.iters[0].plan_scores.data, full.iters[0].plan_scores.data);
        assert_eq!(partial.iters[0].pred_traj.data, full.iters[0].pred_traj.data);
    }

    #[test]
    fn k_equals_one_matches_manual_single_iteration() {
        let (tm, scenario) = micro_model();
        let mut cfg1 = tm.cfg.clone();
        cfg1.model.iterations = 1;
        // same seed -> iteration-0 parameters are built in identical order
        let tm1 = TrainedModel::init(&cfg1, None);
        let (a, _) = tm1.infer(&scenario, None).unwrap();
        assert_eq!(a.iters.len(), 1);
        let it = a.final_iter();
        assert!(it.plan_traj.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn checkpoint_save_load_round_trip() {
        let (tm, scenario) = micro_model();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m.ckpt");
        let p2 = dir.path().join("m2.ckpt");
        tm.save(&p1).unwrap();
        let loaded = TrainedModel::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // loaded model reproduces the original outputs bit-exactly
        let (a, _) = tm.infer(&scenario, None).unwrap();
        let (b, _) = loaded.infer(&scenario, None).unwrap();
        assert_eq!(a.final_iter().plan_traj.data, b.final_iter().plan_traj.data);
    }

    #[test]
    fn mode_permutation_equivariance() {
        let (tm, scenario) = micro_model();
        let prep = tm.prepare(&scenario).unwrap();
        let base = tm.infer_prepared(&prep, None).unwrap();
        // swap two ego intention slots (valid ones)
        let mut permuted = prep.clone();
        permuted.intentions.rows[0].swap(1, 3);
        let out = tm.infer_prepared(&permuted, None).unwrap();
        let it_a = base.final_iter();
        let it_b = out.final_iter();
        let t2 = tm.cfg.model.t_f * 2;
        let plan_of = |it: &crate::decoder::IterData, m: usize| {
            it.plan_traj.data[m * t2..(m + 1) * t2].to_vec()
        };
        assert_eq!(plan_of(it_a, 1), plan_of(it_b, 3));
        assert_eq!(plan_of(it_a, 3), plan_of(it_b, 1));
        assert_eq!(plan_of(it_a, 0), plan_of(it_b, 0));
        assert_eq!(it_a.plan_scores.data[1], it_b.plan_scores.data[3]);
        assert_eq!(it_a.plan_scores.data[3], it_b.plan_scores.data[1]);
    }
}
