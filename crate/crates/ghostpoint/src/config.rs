//! Run configuration: one strict-schema TOML file describing everything a
//! run needs — architecture, environment, data generation, training,
//! evaluation. Unknown keys are errors, never warnings, and command-line
//! `key.path=value` overrides are applied before validation so a typo'd
//! override is rejected by name.

use crate::geom::{Aabb, GeomError, Vec3};
use crate::ghost::{allocate, NUM_STAGES};
use crate::keypose::ExtractConfig;
use crate::model::{ModelConfig, ModelError};
use crate::optim::AdamConfig;
use crate::policy::LossWeights;
use crate::scalar::Scalar;
use crate::synth::{EnvConfig, EvalConfig, TaskId};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("could not read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config rejected: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialization failed: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("override {0:?} is not of the form key.path=value")]
    BadOverride(String),
    #[error("override {path:?} walks through non-table key {key:?}")]
    OverridePath { path: String, key: String },
    #[error(
        "training seeds [{train_lo}, {train_hi}) overlap evaluation seeds [{eval_lo}, {eval_hi})"
    )]
    SeedOverlap { train_lo: u64, train_hi: u64, eval_lo: u64, eval_hi: u64 },
    #[error("image size {0} is not a multiple of the encoder's total stride 16")]
    BadImageSize(usize),
    #[error("crop size {crop} must be a multiple of 16 and no larger than image size {image}")]
    BadCropSize { crop: usize, image: usize },
    #[error("{what} must be positive")]
    NonPositive { what: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Ghost(#[from] crate::ghost::GhostError),
}

/// The workspace box as two corner points in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkspaceSection {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for WorkspaceSection {
    fn default() -> Self {
        Self { min: [-0.3, -0.3, 0.0], max: [0.3, 0.3, 0.6] }
    }
}

impl WorkspaceSection {
    pub fn aabb<F: Scalar>(&self) -> Result<Aabb<F>, GeomError> {
        Aabb::new(
            Vec3::new(
                F::from_f64(self.min[0]),
                F::from_f64(self.min[1]),
                F::from_f64(self.min[2]),
            ),
            Vec3::new(
                F::from_f64(self.max[0]),
                F::from_f64(self.max[1]),
                F::from_f64(self.max[2]),
            ),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub id: TaskId,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self { id: TaskId::ReachAbove }
    }
}

/// Keypose-extraction thresholds (plain floats; converted per scalar type).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractSection {
    pub vel_eps: f64,
    pub hold_frames: usize,
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self { vel_eps: 0.01, hold_frames: 3 }
    }
}

impl ExtractSection {
    pub fn to_extract<F: Scalar>(&self) -> ExtractConfig<F> {
        ExtractConfig { vel_eps: F::from_f64(self.vel_eps), hold_frames: self.hold_frames }
    }
}

/// Dataset generation: demonstrations are scripted from scene seeds
/// `seed0, seed0 + 1, …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub demos: usize,
    pub seed0: u64,
    pub path: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { demos: 50, seed0: 0, path: "data/train.ghostdat".to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    /// Seeds every stream the training loop draws from (batch sampling,
    /// ghost sampling, augmentation, initialization).
    pub master_seed: u64,
    /// Synchronized random-crop augmentation.
    pub crop: bool,
    pub crop_size: usize,
    pub log_every: usize,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub w_pos: f64,
    pub w_rot: f64,
    pub w_open: f64,
    pub w_col: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 4,
            master_seed: 1,
            crop: false,
            crop_size: 48,
            log_every: 25,
            checkpoint_every: 0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            w_pos: 1.0,
            w_rot: 10.0,
            w_open: 1.0,
            w_col: 1.0,
        }
    }
}

impl TrainSection {
    pub fn adam<F: Scalar>(&self) -> AdamConfig<F> {
        AdamConfig {
            lr: F::from_f64(self.lr),
            beta1: F::from_f64(self.beta1),
            beta2: F::from_f64(self.beta2),
            eps: F::from_f64(self.eps),
            weight_decay: F::from_f64(self.weight_decay),
        }
    }

    pub fn loss_weights<F: Scalar>(&self) -> LossWeights<F> {
        LossWeights {
            pos: F::from_f64(self.w_pos),
            rot: F::from_f64(self.w_rot),
            open: F::from_f64(self.w_open),
            col: F::from_f64(self.w_col),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub episodes: usize,
    pub pos_tol: f64,
    pub rot_tol: f64,
    pub seed_base: u64,
    /// Ghost budget at evaluation; `0` means "same as training". The
    /// detector scores each ghost independently, so inference may use more
    /// points than training ever saw.
    pub ghost_budget: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { episodes: 500, pos_tol: 0.02, rot_tol: 0.2, seed_base: 1_000_000, ghost_budget: 0 }
    }
}

impl EvalSection {
    pub fn to_eval(&self) -> EvalConfig {
        EvalConfig {
            episodes: self.episodes,
            pos_tol: self.pos_tol,
            rot_tol: self.rot_tol,
            seed_base: self.seed_base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out_dir: String,
    pub checkpoint: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { out_dir: "runs/default".to_string(), checkpoint: "runs/default/model.ckpt".to_string() }
    }
}

/// The complete run description. Defaults reproduce the reference
/// free-space-reaching experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub env: EnvConfig,
    pub workspace: WorkspaceSection,
    pub task: TaskSection,
    pub extract: ExtractSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Evaluation-time model config: same weights-compatible architecture,
    /// possibly a different ghost budget.
    pub fn eval_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.eval.ghost_budget > 0 {
            m.ghost_budget = self.eval.ghost_budget;
        }
        m
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        if self.eval.ghost_budget > 0 {
            allocate(self.eval.ghost_budget, NUM_STAGES)?;
        }
        self.workspace.aabb::<f64>()?;
        if self.env.image_size == 0 || self.env.image_size % 16 != 0 {
            return Err(ConfigError::BadImageSize(self.env.image_size));
        }
        if self.train.crop
            && (self.train.crop_size % 16 != 0
                || self.train.crop_size == 0
                || self.train.crop_size > self.env.image_size)
        {
            return Err(ConfigError::BadCropSize {
                crop: self.train.crop_size,
                image: self.env.image_size,
            });
        }
        for (what, ok) in [
            ("train.steps", self.train.steps > 0),
            ("train.batch_size", self.train.batch_size > 0),
            ("train.lr", self.train.lr > 0.0),
            ("data.demos", self.data.demos > 0),
            ("eval.episodes", self.eval.episodes > 0),
            ("eval.pos_tol", self.eval.pos_tol > 0.0),
            ("eval.rot_tol", self.eval.rot_tol > 0.0),
            ("extract.vel_eps", self.extract.vel_eps > 0.0),
            ("extract.hold_frames", self.extract.hold_frames > 0),
        ] {
            if !ok {
                return Err(ConfigError::NonPositive { what });
            }
        }
        // Held-out evaluation seeds must never overlap training scene seeds.
        let (tl, th) = (self.data.seed0, self.data.seed0 + self.data.demos as u64);
        let (el, eh) = (self.eval.seed_base, self.eval.seed_base + self.eval.episodes as u64);
        if tl < eh && el < th {
            return Err(ConfigError::SeedOverlap {
                train_lo: tl,
                train_hi: th,
                eval_lo: el,
                eval_hi: eh,
            });
        }
        Ok(())
    }

    /// Canonical TOML of the resolved config (for manifests/checkpoints).
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Parse a TOML override value leniently: anything that parses as a TOML
/// value (number, bool, array, quoted string) is taken as such; otherwise
/// the raw text becomes a string, so `task.id=reach-touch` needs no quotes.
fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(table) = toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let keys: Vec<&str> = path.split('.').collect();
    let mut table = root;
    for key in &keys[..keys.len() - 1] {
        table = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::OverridePath {
                path: path.to_string(),
                key: key.to_string(),
            })?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

/// Parse config text, apply `key.path=value` overrides, and validate.
/// Unknown keys — in the file or introduced by an override — are rejected by
/// name via the strict schema.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut table: toml::Table = toml::from_str(text)?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = toml::Table::try_into(table)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Load a config file (or defaults when `path` is `None`) with overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: p.display().to_string(),
            source,
        })?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PositionalMode;

    #[test]
    fn default_config_validates_and_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = parse_config(&text, &[]).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn empty_text_yields_defaults() {
        assert_eq!(parse_config("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = parse_config("[model]\nghost_budgett = 5\n", &[]).unwrap_err();
        assert!(err.to_string().contains("ghost_budgett"), "{err}");
        let err = parse_config("[modell]\nd = 60\n", &[]).unwrap_err();
        assert!(err.to_string().contains("modell"), "{err}");
    }

    #[test]
    fn overrides_reach_nested_keys_with_type_inference() {
        let cfg = parse_config(
            "",
            &[
                "model.layers=3".to_string(),
                "model.positional=absolute".to_string(),
                "train.lr=0.003".to_string(),
                "model.diameters=[0.2, 0.05]".to_string(),
                "task.id=pregrasp-grasp".to_string(),
                "data.path=other.bin".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.layers, 3);
        assert_eq!(cfg.model.positional, PositionalMode::Absolute);
        assert_eq!(cfg.train.lr, 0.003);
        assert_eq!(cfg.model.diameters, [0.2, 0.05]);
        assert_eq!(cfg.task.id, TaskId::PregraspGrasp);
        assert_eq!(cfg.data.path, "other.bin");
    }

    #[test]
    fn typo_in_override_is_rejected_by_name() {
        let err = parse_config("", &["model.headz=4".to_string()]).unwrap_err();
        assert!(err.to_string().contains("headz"), "{err}");
        let err = parse_config("", &["model.layers".to_string()]).unwrap_err();
        assert!(matches!(err, ConfigError::BadOverride(_)));
    }

    #[test]
    fn head_dim_constraint_is_enforced() {
        let err = parse_config("", &["model.heads=4".to_string()]).unwrap_err();
        assert!(matches!(err, ConfigError::Model(_)), "{err}");
        parse_config("", &["model.heads=5".to_string()]).unwrap();
    }

    #[test]
    fn seed_overlap_is_rejected() {
        let err = parse_config(
            "",
            &["eval.seed_base=30".to_string(), "data.demos=50".to_string()],
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::SeedOverlap { .. }), "{err}");
        // Adjacent ranges are fine.
        parse_config("", &["eval.seed_base=50".to_string()]).unwrap();
    }

    #[test]
    fn crop_and_image_size_constraints() {
        let err =
            parse_config("", &["env.image_size=60".to_string()]).unwrap_err();
        assert!(matches!(err, ConfigError::BadImageSize(60)));
        let err = parse_config(
            "",
            &["train.crop=true".to_string(), "train.crop_size=50".to_string()],
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::BadCropSize { crop: 50, image: 64 }));
        parse_config("", &["train.crop=true".to_string()]).unwrap();
    }

    #[test]
    fn eval_budget_zero_means_training_budget() {
        let cfg = parse_config("", &[]).unwrap();
        assert_eq!(cfg.eval_model().ghost_budget, cfg.model.ghost_budget);
        let cfg = parse_config("", &["eval.ghost_budget=10000".to_string()]).unwrap();
        assert_eq!(cfg.eval_model().ghost_budget, 10_000);
        assert_eq!(cfg.model.ghost_budget, 1000);
    }

    #[test]
    fn nonpositive_knobs_are_rejected() {
        for bad in ["train.steps=0", "eval.pos_tol=0.0", "extract.hold_frames=0"] {
            let err = parse_config("", &[bad.to_string()]).unwrap_err();
            assert!(matches!(err, ConfigError::NonPositive { .. }), "{bad}: {err}");
        }
    }
}
