//! The full detector: multi-view encoding, coarse-to-fine ghost-point
//! refinement under relative rotary cross-attention, and the keypose decode
//! head, wired into one differentiable graph per sample.
//!
//! One forward pass runs three stages. Stage 1 scatters ghost points across
//! the whole workspace and lets them (plus one learned query token) attend
//! to the global coarse feature cloud, the instruction tokens, and a
//! proprioception token. Each ghost is scored against the query by inner
//! product; the winning ghost's position becomes the center of the next,
//! smaller sampling ball, whose ghosts attend to fine features gathered
//! locally around that center. The query token's feature is carried across
//! stages, so by stage 3 it has aggregated evidence at all scales; a small
//! MLP decodes it into the rotation quaternion and gripper bits, while the
//! final stage's winning ghost position is the predicted keypose position —
//! detection, not regression.
//!
//! Training teacher-forces the refinement: stage balls are centered on the
//! ground-truth position plus a small jitter, and every stage's scores are
//! supervised toward the ghost nearest the ground truth.

use crate::attention::{
    cross_attend, param_names, register_params, AttentionConfig, AttentionError, PositionalMode,
};
use crate::geom::{Aabb, Vec3};
use crate::ghost::{
    allocate, jittered_center, nearest_index, sample_stage, GhostError, SamplerConfig, NUM_STAGES,
};
use crate::keypose::EeState;
use crate::policy::{
    argmax, decode_action, head_forward, register_head_params, score, KeyposeAction, LossInputs,
    PolicyError, StageSupervision,
};
use crate::scalar::Scalar;
use crate::scene::{
    build_feature_clouds, linear_init, register_encoder_params, CameraView, EncoderConfig,
    SceneError,
};
use crate::optim::{OptimError, ParamBinding, ParamStore};
use crate::tensor::{Graph, TensorError, TensorId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("vocabulary must be non-empty")]
    EmptyVocab,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("no ghost scores to choose from")]
    NoScores,
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Ghost(#[from] GhostError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Proprioception input width: position (3) + quaternion (4) + gripper
/// open/collision bits (2).
pub const PROPRIO_DIM: usize = 9;

/// Complete architecture description. Flat so a config file has exactly one
/// place per knob; the component configs are derived views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding dimension shared by every token stream.
    pub d: usize,
    /// Encoder widths for the three intermediate conv stages.
    pub widths: [usize; 3],
    pub heads: usize,
    pub layers: usize,
    pub positional: PositionalMode,
    /// Sampling ball diameters for stages 2 and 3, meters.
    pub diameters: [f64; 2],
    /// Lattice instead of uniform ghost sampling (ablation).
    pub lattice: bool,
    /// Total ghost points, split across stages with remainder to the
    /// earliest. Inference may use a different budget than training by
    /// cloning the config — scores are inner products against a shared
    /// query, so the detector is budget-agnostic.
    pub ghost_budget: usize,
    /// Instruction vocabulary size.
    pub vocab: usize,
    /// Share one attention stack across stages (default) or give each stage
    /// its own weights (ablation).
    pub tied_stages: bool,
    /// Keep attending the global coarse cloud in stages 2–3 instead of the
    /// locally gathered fine cloud (ablation).
    pub coarse_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 60,
            widths: [16, 32, 64],
            heads: 2,
            layers: 2,
            positional: PositionalMode::Rotary,
            diameters: [0.16, 0.04],
            lattice: false,
            ghost_budget: 1000,
            vocab: crate::synth::vocab_size(),
            tied_stages: true,
            coarse_only: false,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig { d: self.d, widths: self.widths }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            positional: self.positional,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { diameters: self.diameters, lattice: self.lattice }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.attention().validate()?;
        self.sampler().validate()?;
        allocate(self.ghost_budget, NUM_STAGES)?;
        if self.vocab == 0 {
            return Err(ModelError::EmptyVocab);
        }
        Ok(())
    }

    /// Attention parameter prefix for a 1-based stage.
    fn stage_prefix(&self, stage: usize) -> String {
        if self.tied_stages {
            "attn.".to_string()
        } else {
            format!("attn.s{stage}.")
        }
    }
}

/// Register every parameter of the model in a fixed order, so a given RNG
/// seed yields the same initialization on every run.
pub fn register_model_params<F: Scalar>(
    store: &mut ParamStore<F>,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<(), ModelError> {
    cfg.validate()?;
    register_encoder_params(store, &cfg.encoder(), rng)?;
    let att = cfg.attention();
    if cfg.tied_stages {
        register_params(store, &att, "attn.", rng)?;
    } else {
        for s in 1..=NUM_STAGES {
            register_params(store, &att, &format!("attn.s{s}."), rng)?;
        }
    }
    let d = cfg.d;
    store.add("embed.vocab", &[cfg.vocab, d], linear_init(rng, d, cfg.vocab * d))?;
    store.add("embed.ghost", &[1, d], linear_init(rng, d, d))?;
    store.add("embed.query", &[1, d], linear_init(rng, d, d))?;
    store.add("proprio.w", &[PROPRIO_DIM, d], linear_init(rng, PROPRIO_DIM, PROPRIO_DIM * d))?;
    store.add("proprio.b", &[d], vec![F::zero(); d])?;
    register_head_params(store, d, rng)?;
    Ok(())
}

/// All parameter names, in registration order.
pub fn model_param_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = Vec::new();
    let chain = ["stage1", "stage2", "stage3", "stage4", "lat_top", "lat_coarse", "lat_fine"];
    for s in chain {
        names.push(format!("enc.{s}.w"));
        names.push(format!("enc.{s}.b"));
    }
    let att = cfg.attention();
    if cfg.tied_stages {
        names.extend(param_names(&att, "attn."));
    } else {
        for s in 1..=NUM_STAGES {
            names.extend(param_names(&att, &format!("attn.s{s}.")));
        }
    }
    names.extend(
        ["embed.vocab", "embed.ghost", "embed.query", "proprio.w", "proprio.b"]
            .map(String::from),
    );
    names.extend(["head.w1", "head.b1", "head.w2", "head.b2"].map(String::from));
    names
}

/// One sample's non-parameter inputs.
pub struct SceneInputs<'a, F: Scalar> {
    pub views: &'a [CameraView<F>],
    pub tokens: &'a [u32],
    pub proprio: &'a EeState<F>,
    pub workspace: &'a Aabb<F>,
}

/// Teacher-forced forward pass: everything `total_loss` needs, plus
/// per-stage diagnostics.
#[derive(Debug)]
pub struct TrainForward<F: Scalar> {
    pub loss_inputs: LossInputs<F>,
    /// Ball/box center of each stage (stage 1 reports the workspace center).
    pub centers: Vec<Vec3<F>>,
    /// Distance from the ground-truth position to the nearest ghost of each
    /// stage — the quantization floor of the detector at that scale.
    pub nearest_dist: Vec<F>,
}

/// Inference output.
#[derive(Debug, Clone)]
pub struct Prediction<F: Scalar> {
    pub action: KeyposeAction<F>,
    /// Winning ghost position per stage.
    pub stage_positions: Vec<Vec3<F>>,
    pub open_prob: F,
    pub col_prob: F,
}

/// Per-stage inference record: where the stage region sat, every candidate
/// ghost with its score, and which one won.
#[derive(Debug, Clone)]
pub struct StageTrace<F: Scalar> {
    pub stage: usize,
    pub center: Vec3<F>,
    pub positions: Vec<Vec3<F>>,
    pub logits: Vec<F>,
    pub chosen: usize,
}

/// Shared context: language + proprioception tokens appended to a feature
/// cloud.
struct SideTokens<F: Scalar> {
    lang: Option<TensorId>,
    n_lang: usize,
    proprio: TensorId,
    proprio_pos: Vec3<F>,
}

fn embed_side_tokens<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    tokens: &[u32],
    proprio: &EeState<F>,
) -> Result<SideTokens<F>, ModelError> {
    let lang = if tokens.is_empty() {
        None
    } else {
        let mut ids = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t as usize >= cfg.vocab {
                return Err(ModelError::TokenOutOfRange { id: t, vocab: cfg.vocab });
            }
            ids.push(t as usize);
        }
        Some(g.gather_rows(binding.id("embed.vocab")?, &ids)?)
    };
    let rot = proprio.rot.canonicalized();
    let vec9 = vec![
        proprio.pos.x,
        proprio.pos.y,
        proprio.pos.z,
        rot.w,
        rot.x,
        rot.y,
        rot.z,
        if proprio.open { F::one() } else { F::zero() },
        if proprio.col { F::one() } else { F::zero() },
    ];
    let pv = g.constant(&[1, PROPRIO_DIM], vec9)?;
    let pw = g.matmul(pv, binding.id("proprio.w")?)?;
    let proprio_feat = g.add_bias(pw, binding.id("proprio.b")?)?;
    Ok(SideTokens { lang, n_lang: tokens.len(), proprio: proprio_feat, proprio_pos: proprio.pos })
}

/// Concatenate `[cloud, lang?, proprio]` features and positions. Language
/// tokens carry no position (identity rotation); everything else does.
fn assemble_context<F: Scalar>(
    g: &mut Graph<F>,
    cloud_feats: TensorId,
    cloud_pos: &[Vec3<F>],
    side: &SideTokens<F>,
) -> Result<(TensorId, Vec<Option<Vec3<F>>>), ModelError> {
    let mut parts = vec![cloud_feats];
    if let Some(lang) = side.lang {
        parts.push(lang);
    }
    parts.push(side.proprio);
    let feats = g.concat_rows(&parts)?;
    let mut pos: Vec<Option<Vec3<F>>> = cloud_pos.iter().copied().map(Some).collect();
    pos.extend(std::iter::repeat(None).take(side.n_lang));
    pos.push(Some(side.proprio_pos));
    Ok((feats, pos))
}

/// Run one refinement stage: fresh ghosts plus the carried query attend the
/// stage context; returns per-ghost logits and the updated query feature.
#[allow(clippy::too_many_arguments)]
fn stage_forward<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    stage: usize,
    ghost_positions: &[Vec3<F>],
    query_feat: TensorId,
    query_pos: Vec3<F>,
    ctx_feats: TensorId,
    ctx_pos: &[Option<Vec3<F>>],
) -> Result<(TensorId, TensorId), ModelError> {
    let n = ghost_positions.len();
    let ghost_feats = g.repeat_row(binding.id("embed.ghost")?, n)?;
    let all_feats = g.concat_rows(&[ghost_feats, query_feat])?;
    let mut all_pos = ghost_positions.to_vec();
    all_pos.push(query_pos);
    let attended = cross_attend(
        g,
        binding,
        &cfg.attention(),
        &cfg.stage_prefix(stage),
        all_feats,
        &all_pos,
        ctx_feats,
        ctx_pos,
    )?;
    let ghost_ix: Vec<usize> = (0..n).collect();
    let ghost_rows = g.gather_rows(attended, &ghost_ix)?;
    let query_row = g.gather_rows(attended, &[n])?;
    let logits = score(g, ghost_rows, query_row)?;
    Ok((logits, query_row))
}

/// Stage context: global coarse cloud for stage 1 (and, under the
/// coarse-only ablation, every stage); otherwise the fine features nearest
/// the stage center, capped at the coarse cloud's size so context cost stays
/// flat across stages.
fn stage_cloud<F: Scalar>(
    g: &mut Graph<F>,
    clouds: &crate::scene::BuiltClouds<F>,
    cfg: &ModelConfig,
    stage: usize,
    center: Vec3<F>,
) -> Result<(TensorId, Vec<Vec3<F>>), ModelError> {
    if stage == 1 || cfg.coarse_only {
        return Ok((clouds.coarse.features, clouds.coarse.positions.clone()));
    }
    let k = clouds.coarse.len();
    let sel = crate::scene::select_local_fine(&clouds.fine.positions, center, k);
    let feats = g.gather_rows(clouds.fine.features, &sel.indices)?;
    let pos = sel.indices.iter().map(|&i| clouds.fine.positions[i]).collect();
    Ok((feats, pos))
}

/// Teacher-forced training forward: stage balls center on the ground truth
/// plus a jitter of at most a quarter diameter, and each stage is supervised
/// toward its ghost nearest the ground truth. The rotation/bit head reads
/// the final query feature.
pub fn forward_train<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    inputs: &SceneInputs<'_, F>,
    gt: &KeyposeAction<F>,
    rng: &mut impl Rng,
) -> Result<TrainForward<F>, ModelError> {
    let clouds = build_feature_clouds(g, binding, inputs.views, inputs.workspace)?;
    let side = embed_side_tokens(g, binding, cfg, inputs.tokens, inputs.proprio)?;
    let budgets = allocate(cfg.ghost_budget, NUM_STAGES)?;
    let sampler = cfg.sampler();

    let mut query_feat = binding.id("embed.query")?;
    let mut query_pos = inputs.proprio.pos;
    let mut stages = Vec::with_capacity(NUM_STAGES);
    let mut centers = Vec::with_capacity(NUM_STAGES);
    let mut nearest_dist = Vec::with_capacity(NUM_STAGES);
    for stage in 1..=NUM_STAGES {
        let center = if stage == 1 {
            inputs.workspace.center()
        } else {
            jittered_center(gt.pos, F::from_f64(cfg.diameters[stage - 2]), rng)
        };
        let region = sampler.region(stage, inputs.workspace);
        let batch = sample_stage(stage, region, center, budgets[stage - 1], cfg.lattice, rng)?;
        let (cloud_feats, cloud_pos) = stage_cloud(g, &clouds, cfg, stage, batch.center)?;
        let (ctx_feats, ctx_pos) = assemble_context(g, cloud_feats, &cloud_pos, &side)?;
        let (logits, new_query) = stage_forward(
            g,
            binding,
            cfg,
            stage,
            &batch.positions,
            query_feat,
            query_pos,
            ctx_feats,
            &ctx_pos,
        )?;
        let target = nearest_index(&batch.positions, gt.pos)?;
        stages.push(StageSupervision { logits, target });
        centers.push(batch.center);
        nearest_dist.push(batch.positions[target].dist(gt.pos));
        query_feat = new_query;
        query_pos = batch.center;
    }

    let head = head_forward(g, binding, query_feat)?;
    Ok(TrainForward {
        loss_inputs: LossInputs {
            stages,
            head,
            gt_rot: gt.rot,
            gt_open: gt.open,
            gt_col: gt.col,
        },
        centers,
        nearest_dist,
    })
}

/// Inference: each stage's winning ghost becomes the next stage's ball
/// center and query position; the final winner is the predicted position.
pub fn predict<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    inputs: &SceneInputs<'_, F>,
    rng: &mut impl Rng,
) -> Result<Prediction<F>, ModelError> {
    predict_traced(g, binding, cfg, inputs, rng).map(|(p, _)| p)
}

/// [`predict`], additionally returning every stage's candidate ghosts and
/// scores for inspection.
pub fn predict_traced<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    cfg: &ModelConfig,
    inputs: &SceneInputs<'_, F>,
    rng: &mut impl Rng,
) -> Result<(Prediction<F>, Vec<StageTrace<F>>), ModelError> {
    let clouds = build_feature_clouds(g, binding, inputs.views, inputs.workspace)?;
    let side = embed_side_tokens(g, binding, cfg, inputs.tokens, inputs.proprio)?;
    let budgets = allocate(cfg.ghost_budget, NUM_STAGES)?;
    let sampler = cfg.sampler();

    let mut query_feat = binding.id("embed.query")?;
    let mut query_pos = inputs.proprio.pos;
    let mut center = inputs.workspace.center();
    let mut stage_positions = Vec::with_capacity(NUM_STAGES);
    let mut traces = Vec::with_capacity(NUM_STAGES);
    for stage in 1..=NUM_STAGES {
        let region = sampler.region(stage, inputs.workspace);
        let batch = sample_stage(stage, region, center, budgets[stage - 1], cfg.lattice, rng)?;
        let (cloud_feats, cloud_pos) = stage_cloud(g, &clouds, cfg, stage, batch.center)?;
        let (ctx_feats, ctx_pos) = assemble_context(g, cloud_feats, &cloud_pos, &side)?;
        let (logits, new_query) = stage_forward(
            g,
            binding,
            cfg,
            stage,
            &batch.positions,
            query_feat,
            query_pos,
            ctx_feats,
            &ctx_pos,
        )?;
        let best = argmax(g.value(logits)).ok_or(ModelError::NoScores)?;
        let winner = batch.positions[best];
        traces.push(StageTrace {
            stage,
            center: batch.center,
            positions: batch.positions.clone(),
            logits: g.value(logits).to_vec(),
            chosen: best,
        });
        stage_positions.push(winner);
        query_feat = new_query;
        query_pos = winner;
        center = winner;
    }

    let head = head_forward(g, binding, query_feat)?;
    let (rot, open_prob, col_prob) = decode_action(g, &head)?;
    let half = F::from_f64(0.5);
    let prediction = Prediction {
        action: KeyposeAction {
            pos: *stage_positions.last().expect("three stages ran"),
            rot,
            open: open_prob > half,
            col: col_prob > half,
        },
        stage_positions,
        open_prob,
        col_prob,
    };
    Ok((prediction, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;
    use crate::policy::{total_loss, LossWeights};
    use crate::synth::{
        default_workspace, gen_scene, render, task_keyposes, EnvConfig, TaskId,
    };
    use crate::util::rng_stream;

    type G = Graph<f64>;

    /// Tiny architecture for fast tests: d = 12 keeps rotary blocks (2)
    /// and heads (2 × 6) legal.
    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 12,
            widths: [4, 6, 8],
            heads: 2,
            layers: 1,
            ghost_budget: 30,
            ..ModelConfig::default()
        }
    }

    fn tiny_env() -> EnvConfig {
        EnvConfig { views: 1, ..EnvConfig::default() }
    }

    fn setup(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = rng_stream(seed, "init", 0);
        register_model_params(&mut store, cfg, &mut rng).unwrap();
        store
    }

    #[test]
    fn registered_names_match_declared_list() {
        for tied in [true, false] {
            let cfg = ModelConfig { tied_stages: tied, ..tiny_cfg() };
            let store = setup(&cfg, 0);
            let got: Vec<String> = store.iter().map(|e| e.name.clone()).collect();
            assert_eq!(got, model_param_names(&cfg));
        }
    }

    #[test]
    fn untied_stages_triple_the_attention_parameters() {
        let tied = model_param_names(&tiny_cfg());
        let untied = model_param_names(&ModelConfig { tied_stages: false, ..tiny_cfg() });
        let count = |names: &[String]| names.iter().filter(|n| n.starts_with("attn.")).count();
        assert_eq!(count(&untied), 3 * count(&tied));
    }

    #[test]
    fn default_config_is_valid_and_bad_ones_are_not() {
        ModelConfig::default().validate().unwrap();
        let bad_head = ModelConfig { d: 60, heads: 4, ..ModelConfig::default() };
        assert!(matches!(bad_head.validate(), Err(ModelError::Attention(_))));
        let bad_vocab = ModelConfig { vocab: 0, ..ModelConfig::default() };
        assert!(matches!(bad_vocab.validate(), Err(ModelError::EmptyVocab)));
        let bad_budget = ModelConfig { ghost_budget: 2, ..ModelConfig::default() };
        assert!(matches!(bad_budget.validate(), Err(ModelError::Ghost(_))));
    }

    fn scene_sample(
        env: &EnvConfig,
        seed: u64,
    ) -> (Vec<crate::scene::CameraView<f64>>, Vec<u32>, EeState<f64>, KeyposeAction<f64>) {
        let spec = gen_scene::<f64>(seed, TaskId::ReachTouch, env).unwrap();
        let views = render(&spec, env).unwrap();
        let gt = task_keyposes(&spec)[0];
        (views, spec.tokens, crate::synth::home_state(), gt)
    }

    #[test]
    fn every_parameter_receives_finite_gradient() {
        let cfg = tiny_cfg();
        let env = tiny_env();
        let store = setup(&cfg, 1);
        let (views, tokens, proprio, gt) = scene_sample(&env, 42);
        let ws = default_workspace();
        let mut g = G::new();
        let binding = store.bind(&mut g).unwrap();
        let inputs = SceneInputs { views: &views, tokens: &tokens, proprio: &proprio, workspace: &ws };
        let mut rng = rng_stream(1, "fwd", 0);
        let fwd = forward_train(&mut g, &binding, &cfg, &inputs, &gt, &mut rng).unwrap();
        let loss =
            total_loss(&mut g, &fwd.loss_inputs, &LossWeights::default(), NUM_STAGES).unwrap();
        assert!(g.value(loss)[0].is_finite());
        g.backward(loss).unwrap();
        for e in store.iter() {
            let grad = g
                .grad(binding.id(&e.name).unwrap())
                .unwrap()
                .unwrap_or_else(|| panic!("no grad for {}", e.name));
            assert!(grad.iter().all(|v| v.is_finite()), "{} has non-finite grad", e.name);
            assert!(
                grad.iter().any(|v| *v != 0.0),
                "{} received an all-zero gradient",
                e.name
            );
        }
    }

    #[test]
    fn teacher_forcing_keeps_targets_within_stage_radius() {
        let cfg = tiny_cfg();
        let env = tiny_env();
        let store = setup(&cfg, 2);
        let ws = default_workspace();
        for seed in 0..5 {
            let (views, tokens, proprio, gt) = scene_sample(&env, 50 + seed);
            let mut g = G::new();
            let binding = store.bind(&mut g).unwrap();
            let inputs =
                SceneInputs { views: &views, tokens: &tokens, proprio: &proprio, workspace: &ws };
            let mut rng = rng_stream(seed, "fwd", 0);
            let fwd = forward_train(&mut g, &binding, &cfg, &inputs, &gt, &mut rng).unwrap();
            // Ball of diameter D centered within D/4 of gt: nearest ghost is
            // at most 3D/4 away... but any sampled ghost lies within
            // D/2 + D/4 of gt, so the *nearest* is at most that bound too.
            let bound = |d: f64| 0.75 * d + 1e-12;
            assert!(fwd.nearest_dist[1] <= bound(cfg.diameters[0]), "{}", fwd.nearest_dist[1]);
            assert!(fwd.nearest_dist[2] <= bound(cfg.diameters[1]), "{}", fwd.nearest_dist[2]);
            // Refinement tightens the quantization floor.
            assert!(fwd.nearest_dist[2] < fwd.nearest_dist[0]);
        }
    }

    #[test]
    fn forward_and_predict_are_deterministic_given_seeds() {
        let cfg = tiny_cfg();
        let env = tiny_env();
        let store = setup(&cfg, 3);
        let ws = default_workspace();
        let (views, tokens, proprio, gt) = scene_sample(&env, 7);
        let run = || {
            let mut g = G::new();
            let binding = store.bind(&mut g).unwrap();
            let inputs =
                SceneInputs { views: &views, tokens: &tokens, proprio: &proprio, workspace: &ws };
            let mut rng = rng_stream(9, "fwd", 0);
            let fwd = forward_train(&mut g, &binding, &cfg, &inputs, &gt, &mut rng).unwrap();
            let loss =
                total_loss(&mut g, &fwd.loss_inputs, &LossWeights::default(), NUM_STAGES).unwrap();
            g.value(loss)[0]
        };
        assert_eq!(run(), run());
        let pred = || {
            let mut g = G::new();
            let binding = store.bind(&mut g).unwrap();
            let inputs =
                SceneInputs { views: &views, tokens: &tokens, proprio: &proprio, workspace: &ws };
            let mut rng = rng_stream(11, "predict", 0);
            predict(&mut g, &binding, &cfg, &inputs, &mut rng).unwrap()
        };
        let (a, b) = (pred(), pred());
        assert_eq!(a.action, b.action);
        assert_eq!(a.stage_positions, b.stage_positions);
    }

    #[test]
    fn prediction_is_well_formed() {
        let cfg = tiny_cfg();
        let env = tiny_env();
        let store = setup(&cfg, 4);
        let ws = default_workspace();
        let (views, tokens, proprio, _) = scene_sample(&env, 13);
        let mut g = G::new();
        let binding = store.bind(&mut g).unwrap();
        let inputs = SceneInputs { views: &views, tokens: &tokens, proprio: &proprio, workspace: &ws };
        let mut rng = rng_stream(5, "predict", 0);
        let p = predict(&mut g, &binding, &cfg, &inputs, &mut rng).unwrap();
        assert_eq!(p.stage_positions.len(), NUM_STAGES);
        assert_eq!(p.action.pos, p.stage_positions[2]);
        assert!((p.action.rot.norm() - 1.0).abs() < 1e-12);
        assert!(p.action.rot.w >= 0.0);
        assert!(p.open_prob > 0.0 && p.open_prob < 1.0);
        // Stage-1 winner must be inside the workspace; later winners inside
        // their ball around the previous winner.
        assert!(ws.contains(p.stage_positions[0]));
        assert!(p.stage_positions[1].dist(p.stage_positions[0]) <= cfg.diameters[0] / 2.0 + 1e-12);
        assert!(p.stage_positions[2].dist(p.stage_positions[1]) <= cfg.diameters[1] / 2.0 + 1e-12);
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let cfg = tiny_cfg();
        let env = tiny_env();
        let store = setup(&cfg, 5);
        let ws = default_workspace();
        let (views, _, proprio, gt) = scene_sample(&env, 3);
        let mut g = G::new();
        let binding = store.bind(&mut g).unwrap();
        let bad = vec![cfg.vocab as u32];
        let inputs = SceneInputs { views: &views, tokens: &bad, proprio: &proprio, workspace: &ws };
        let mut rng = rng_stream(0, "fwd", 0);
        let err = forward_train(&mut g, &binding, &cfg, &inputs, &gt, &mut rng).unwrap_err();
        assert!(matches!(err, ModelError::TokenOutOfRange { id: 13, vocab: 13 }));
    }

    #[test]
    fn ablation_variants_run_end_to_end() {
        let env = tiny_env();
        let ws = default_workspace();
        let (views, tokens, proprio, gt) = scene_sample(&env, 21);
        for cfg in [
            ModelConfig { positional: PositionalMode::Absolute, ..tiny_cfg() },
            ModelConfig { tied_stages: false, ..tiny_cfg() },
            ModelConfig { coarse_only: true, ..tiny_cfg() },
            ModelConfig { lattice: true, ..tiny_cfg() },
        ] {
            let store = setup(&cfg, 6);
            let mut g = G::new();
            let binding = store.bind(&mut g).unwrap();
            let inputs =
                SceneInputs { views: &views, tokens: &tokens, proprio: &proprio, workspace: &ws };
            let mut rng = rng_stream(2, "fwd", 0);
            let fwd = forward_train(&mut g, &binding, &cfg, &inputs, &gt, &mut rng).unwrap();
            let loss =
                total_loss(&mut g, &fwd.loss_inputs, &LossWeights::default(), NUM_STAGES).unwrap();
            assert!(g.value(loss)[0].is_finite());
            g.backward(loss).unwrap();
        }
    }

    #[test]
    fn a_few_optimizer_steps_reduce_the_loss_on_one_sample() {
        let cfg = tiny_cfg();
        let env = tiny_env();
        let mut store = setup(&cfg, 7);
        let ws = default_workspace();
        let (views, tokens, proprio, gt) = scene_sample(&env, 33);
        let adam = AdamConfig { lr: 3e-3, ..AdamConfig::default() };
        let mut losses = Vec::new();
        for _ in 0..30 {
            let mut g = G::new();
            let binding = store.bind(&mut g).unwrap();
            let inputs =
                SceneInputs { views: &views, tokens: &tokens, proprio: &proprio, workspace: &ws };
            // Fixed sampling stream: the same ghosts every step isolates the
            // learning signal from sampling noise.
            let mut rng = rng_stream(3, "fwd", 0);
            let fwd = forward_train(&mut g, &binding, &cfg, &inputs, &gt, &mut rng).unwrap();
            let loss =
                total_loss(&mut g, &fwd.loss_inputs, &LossWeights::default(), NUM_STAGES).unwrap();
            losses.push(g.value(loss)[0]);
            g.backward(loss).unwrap();
            let mut buf = store.zero_grad_buffer();
            store.accumulate(&g, &binding, &mut buf).unwrap();
            store.adam_step(&buf, 1.0, &adam).unwrap();
        }
        let first = losses[0];
        let last = *losses.last().unwrap();
        assert!(
            last < 0.5 * first,
            "loss failed to drop: first {first}, last {last}, trace {losses:?}"
        );
    }
}
