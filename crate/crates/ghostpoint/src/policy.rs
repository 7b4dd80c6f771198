//! Action decoding and the training objective.
//!
//! The position component of a keypose is *detected*, not regressed: every
//! ghost point is scored against the parametric query by a plain inner
//! product, and the top-scoring ghost's 3D position is the prediction. The
//! remaining components — orientation quaternion, gripper open bit, and
//! collision-allowed bit — are regressed from the refined query feature by a
//! small MLP. Training sums a per-stage classification loss over ghost
//! scores with regression losses on the query head.

use crate::geom::Quat;
use crate::optim::{OptimError, ParamBinding, ParamStore};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use crate::scene::linear_init;
use crate::tensor::{Graph, TensorError, TensorId};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("cannot score an empty ghost set")]
    EmptyGhosts,
    #[error("query/ghost feature dims differ: {query} vs {ghosts}")]
    DimMismatch { query: usize, ghosts: usize },
    #[error("regression head produced a degenerate quaternion (norm {norm:.3e}); the checkpoint is unusable at this input")]
    DegenerateQuaternion { norm: f64 },
    #[error("training loss needs supervision for all {want} stages, got {got}")]
    MissingStage { want: usize, got: usize },
    #[error("classification target {target} out of range for {n} ghosts")]
    BadTarget { target: usize, n: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Hidden width of the regression MLP. The head maps the final query feature
/// to 4 quaternion logits, 1 open logit, and 1 collision logit.
pub const HEAD_HIDDEN: usize = 64;
/// Raw head output width: quaternion (4) + open (1) + collision (1).
pub const HEAD_OUT: usize = 6;
/// Norm floor below which a raw quaternion is considered collapsed.
pub const QUAT_MIN_NORM: f64 = 1e-8;

/// A complete 6-DoF keypose action: detected position, regressed unit
/// quaternion on the w ≥ 0 hemisphere, and the two binary gripper bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyposeAction<F: Scalar> {
    pub pos: crate::geom::Vec3<F>,
    pub rot: Quat<F>,
    pub open: bool,
    pub col: bool,
}

/// Loss weights `(position CE, rotation MSE, open BCE, collision BCE)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<F> {
    pub pos: F,
    pub rot: F,
    pub open: F,
    pub col: F,
}

impl<F: Scalar> Default for LossWeights<F> {
    fn default() -> Self {
        Self {
            pos: F::one(),
            rot: F::from_f64(10.0),
            open: F::one(),
            col: F::one(),
        }
    }
}

pub fn register_head_params<F: Scalar>(
    store: &mut ParamStore<F>,
    d: usize,
    rng: &mut impl Rng,
) -> Result<(), PolicyError> {
    store.add("head.w1", &[d, HEAD_HIDDEN], linear_init(rng, d, d * HEAD_HIDDEN))?;
    store.add("head.b1", &[HEAD_HIDDEN], vec![F::zero(); HEAD_HIDDEN])?;
    store.add("head.w2", &[HEAD_HIDDEN, HEAD_OUT], linear_init(rng, HEAD_HIDDEN, HEAD_HIDDEN * HEAD_OUT))?;
    store.add("head.b2", &[HEAD_OUT], vec![F::zero(); HEAD_OUT])?;
    Ok(())
}

/// Inner-product scores of every ghost feature row against the query:
/// `logits[i] = ghosts[i] · query`. Parameter-free by design — the shared
/// attention stack is the only thing shaping this space.
pub fn score<F: Scalar>(
    g: &mut Graph<F>,
    ghosts: TensorId,
    query: TensorId,
) -> Result<TensorId, PolicyError> {
    let gs = g.shape(ghosts).to_vec();
    let qs = g.shape(query).to_vec();
    if gs[0] == 0 {
        return Err(PolicyError::EmptyGhosts);
    }
    if gs.len() != 2 || qs != [1, gs[1]] {
        return Err(PolicyError::DimMismatch {
            query: qs.last().copied().unwrap_or(0),
            ghosts: gs.last().copied().unwrap_or(0),
        });
    }
    let qt = g.transpose(query)?;
    let col = g.matmul(ghosts, qt)?;
    Ok(g.reshape(col, &[gs[0]])?)
}

/// Index of the maximum value; ties resolve to the lowest index.
pub fn argmax<F: Scalar>(values: &[F]) -> Option<usize> {
    let mut best: Option<(usize, F)> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if *v <= b => {}
            _ => best = Some((i, *v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Raw head outputs, still in the graph: a `[1,4]` quaternion block and two
/// `[1,1]` bit logits.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub quat_raw: TensorId,
    pub open_logit: TensorId,
    pub col_logit: TensorId,
}

/// Run the regression MLP on the final query feature `[1, d]`.
pub fn head_forward<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    query: TensorId,
) -> Result<HeadOutputs, PolicyError> {
    let h = g.matmul(query, binding.id("head.w1")?)?;
    let h = g.add_bias(h, binding.id("head.b1")?)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, binding.id("head.w2")?)?;
    let out = g.add_bias(out, binding.id("head.b2")?)?;
    Ok(HeadOutputs {
        quat_raw: g.slice_cols(out, 0, 4)?,
        open_logit: g.slice_cols(out, 4, 1)?,
        col_logit: g.slice_cols(out, 5, 1)?,
    })
}

/// Decode head outputs into action components: quaternion normalized and
/// canonicalized to the w ≥ 0 hemisphere, bit logits squashed to
/// probabilities. A collapsed (near-zero-norm) quaternion is an error, not a
/// silent identity.
pub fn decode_action<F: Scalar>(
    g: &mut Graph<F>,
    head: &HeadOutputs,
) -> Result<(Quat<F>, F, F), PolicyError> {
    let unit = match g.l2_normalize(head.quat_raw, F::from_f64(QUAT_MIN_NORM)) {
        Ok(id) => id,
        Err(TensorError::DegenerateNorm { norm, .. }) => {
            return Err(PolicyError::DegenerateQuaternion { norm });
        }
        Err(e) => return Err(e.into()),
    };
    let q = g.value(unit);
    let rot = Quat::new(q[0], q[1], q[2], q[3]).canonicalized();
    let open_p = g.sigmoid(head.open_logit)?;
    let col_p = g.sigmoid(head.col_logit)?;
    let open = g.value(open_p)[0];
    let col = g.value(col_p)[0];
    Ok((rot, open, col))
}

/// Per-stage classification supervision: the scored logits and the index of
/// the ghost nearest the ground-truth position.
#[derive(Debug, Clone, Copy)]
pub struct StageSupervision {
    pub logits: TensorId,
    pub target: usize,
}

/// Everything the training objective consumes for one sample.
#[derive(Debug, Clone)]
pub struct LossInputs<F: Scalar> {
    pub stages: Vec<StageSupervision>,
    pub head: HeadOutputs,
    pub gt_rot: Quat<F>,
    pub gt_open: bool,
    pub gt_col: bool,
}

/// Total objective: Σ_stages CE(logits, nearest-ghost index) weighted by
/// `w.pos`, plus `w.rot`·MSE between the normalized predicted quaternion and
/// the canonicalized target, plus `w.open`/`w.col` BCE on the bit logits.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    inputs: &LossInputs<F>,
    w: &LossWeights<F>,
    num_stages: usize,
) -> Result<TensorId, PolicyError> {
    if inputs.stages.len() != num_stages {
        return Err(PolicyError::MissingStage { want: num_stages, got: inputs.stages.len() });
    }
    let mut terms = Vec::with_capacity(num_stages + 3);
    for s in &inputs.stages {
        let n = g.shape(s.logits)[0];
        if s.target >= n {
            return Err(PolicyError::BadTarget { target: s.target, n });
        }
        let ce = g.cross_entropy(s.logits, s.target)?;
        terms.push(g.scale(ce, w.pos)?);
    }

    let unit = match g.l2_normalize(inputs.head.quat_raw, F::from_f64(QUAT_MIN_NORM)) {
        Ok(id) => id,
        Err(TensorError::DegenerateNorm { norm, .. }) => {
            return Err(PolicyError::DegenerateQuaternion { norm });
        }
        Err(e) => return Err(e.into()),
    };
    let target = inputs.gt_rot.canonicalized();
    let target = g.constant(&[1, 4], target.to_array().to_vec())?;
    let rot_mse = g.mse(unit, target)?;
    terms.push(g.scale(rot_mse, w.rot)?);

    let bit = |b: bool| if b { F::one() } else { F::zero() };
    let open_bce = g.bce_logits(inputs.head.open_logit, bit(inputs.gt_open))?;
    terms.push(g.scale(open_bce, w.open)?);
    let col_bce = g.bce_logits(inputs.head.col_logit, bit(inputs.gt_col))?;
    terms.push(g.scale(col_bce, w.col)?);

    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t)?;
    }
    Ok(acc)
}
