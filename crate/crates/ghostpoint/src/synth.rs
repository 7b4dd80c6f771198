//! Procedural synthetic task suite: seeded scene generation, analytic
//! ray-cast RGB-D rendering, scripted expert demonstrations, and closed-loop
//! keypose evaluation. Everything is a pure function of `(seed, config)`, so
//! datasets and benchmark numbers are reproducible to the bit without any
//! external simulator.
//!
//! The world is a tabletop: a gray ground plane at z = 0 carrying colored
//! spheres and cubes inside a fixed workspace box, watched by 1–4 fixed
//! pinhole cameras. Tasks ask a disembodied gripper to touch a named object,
//! hover above it, or grasp it; expert demonstrations are piecewise-linear
//! trajectories through the ground-truth keyposes with dwells long enough
//! for the keypose extractor to recover exactly the scripted frames.

use crate::geom::{intrinsics_for, Aabb, Camera, GeomError, Quat, Vec3};
use crate::keypose::{Dataset, Demonstration, EeState, ExtractConfig, KeyposeError};
use crate::policy::KeyposeAction;
use crate::scalar::Scalar;
use crate::scene::{CameraView, Observation, SceneError};
use crate::util::rng_stream;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("camera rig supports 1–4 views, got {0}")]
    BadViews(usize),
    #[error("could not place {objects} non-overlapping objects in {attempts} attempts")]
    Placement { objects: usize, attempts: usize },
    #[error("{objects} objects need distinct colors but the palette has {colors}")]
    PaletteExhausted { objects: usize, colors: usize },
    #[error("scripted keypose {index} at ({x:.3}, {y:.3}, {z:.3}) leaves the workspace")]
    KeyposeOutsideWorkspace { index: usize, x: f64, y: f64, z: f64 },
    #[error("instruction word {0:?} is not in the template vocabulary")]
    UnknownWord(String),
    #[error("policy failed: {0}")]
    Policy(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Keypose(#[from] KeyposeError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

// ── Scene specification ─────────────────────────────────────────────

/// The three task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskId {
    /// Touch the named object: one contact keypose on its top surface.
    ReachTouch,
    /// Hover at a fixed offset above the named object: one free-space
    /// keypose, deliberately far from every scene surface.
    ReachAbove,
    /// Move to a pre-grasp above the object, then descend and close the
    /// gripper: two keyposes, the second with a gripper-bit change.
    PregraspGrasp,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::ReachTouch, TaskId::ReachAbove, TaskId::PregraspGrasp];

    fn verb(self) -> &'static str {
        match self {
            TaskId::ReachTouch => "touch",
            TaskId::ReachAbove => "hover",
            TaskId::PregraspGrasp => "grasp",
        }
    }
}

/// Closed color palette; names appear verbatim in instructions.
pub const PALETTE: [(&str, [f64; 3]); 6] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.72, 0.18]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.88, 0.82, 0.12]),
    ("purple", [0.58, 0.15, 0.70]),
    ("cyan", [0.10, 0.78, 0.78]),
];

/// Closed instruction vocabulary. Token ids index this list.
pub const VOCAB: [&str; 13] = [
    "touch", "hover", "grasp", "above", "the", "red", "green", "blue", "yellow", "purple", "cyan",
    "sphere", "cube",
];

pub fn vocab_size() -> usize {
    VOCAB.len()
}

/// Tokenize a templated instruction over the closed vocabulary.
pub fn token_ids(instruction: &str) -> Result<Vec<u32>, SynthError> {
    instruction
        .split_whitespace()
        .map(|w| {
            VOCAB
                .iter()
                .position(|v| *v == w)
                .map(|i| i as u32)
                .ok_or_else(|| SynthError::UnknownWord(w.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape<F: Scalar> {
    Sphere { center: Vec3<F>, radius: F },
    Cube { aabb: Aabb<F> },
}

impl<F: Scalar> Shape<F> {
    /// Center of the top surface — where touch/grasp keyposes anchor.
    pub fn top(&self) -> Vec3<F> {
        match self {
            Shape::Sphere { center, radius } => {
                Vec3::new(center.x, center.y, center.z + *radius)
            }
            Shape::Cube { aabb } => {
                let c = aabb.center();
                Vec3::new(c.x, c.y, aabb.max.z)
            }
        }
    }

    /// Horizontal footprint radius for overlap rejection.
    fn footprint(&self) -> F {
        match self {
            Shape::Sphere { radius, .. } => *radius,
            Shape::Cube { aabb } => {
                let e = aabb.extent();
                (e.x * e.x + e.y * e.y).sqrt() / F::from_f64(2.0)
            }
        }
    }

    fn center(&self) -> Vec3<F> {
        match self {
            Shape::Sphere { center, .. } => *center,
            Shape::Cube { aabb } => aabb.center(),
        }
    }

    fn shape_word(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::Cube { .. } => "cube",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject<F: Scalar> {
    pub shape: Shape<F>,
    /// Index into [`PALETTE`].
    pub color: usize,
}

/// A fully instantiated scene: everything needed to render, script, and
/// evaluate deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec<F: Scalar> {
    pub seed: u64,
    pub task: TaskId,
    pub workspace: Aabb<F>,
    /// Object 0 is the instruction's target.
    pub objects: Vec<SceneObject<F>>,
    pub cameras: Vec<Camera<F>>,
    pub instruction: String,
    pub tokens: Vec<u32>,
}

/// Environment knobs. Geometry constants that never vary (workspace size,
/// camera ring, scripting cadence) are module constants instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Square image side in pixels; must be divisible by the encoder's
    /// coarsest stride (16) after any crop.
    pub image_size: usize,
    /// Number of cameras, 1–4, taken in ring order (front, side, back,
    /// other side).
    pub views: usize,
    /// Focal length in pixels for both axes.
    pub focal: f64,
    /// Number of distractor objects besides the target.
    pub distractors: usize,
    /// Standard deviation of additive depth noise in meters (0 = exact).
    pub depth_noise: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { image_size: 64, views: 2, focal: 185.0, distractors: 2, depth_noise: 0.0 }
    }
}

/// Fixed workspace: a 0.6 m cube footprint on the ground plane.
pub fn default_workspace<F: Scalar>() -> Aabb<F> {
    Aabb::new(
        Vec3::new(F::from_f64(-0.3), F::from_f64(-0.3), F::zero()),
        Vec3::new(F::from_f64(0.3), F::from_f64(0.3), F::from_f64(0.6)),
    )
    .expect("static workspace bounds")
}

/// Camera ring positions, in view order (front, side, back, other side).
/// High and close to the vertical: steep views keep the whole table in
/// frame at a long focal length, so each object covers enough pixels for
/// the encoder to localize it well below the feature-grid spacing.
const CAMERA_RING: [[f64; 3]; 4] = [
    [0.5, 0.0, 1.6],
    [0.0, 0.5, 1.6],
    [-0.5, 0.0, 1.6],
    [0.0, -0.5, 1.6],
];

/// Where every camera looks: a point on the table under the workspace
/// center, which centers the object band in frame (objects sit low; the
/// space above them only matters for sampling, not imaging).
const LOOK_AT: [f64; 3] = [0.0, 0.0, 0.1];

/// The gripper's home state: centered above the workspace, pointing down,
/// open, no contact expected.
pub fn home_state<F: Scalar>() -> EeState<F> {
    EeState {
        pos: Vec3::new(F::zero(), F::zero(), F::from_f64(0.5)),
        rot: down_quat(),
        open: true,
        col: false,
    }
}

/// Tool-down orientation: a half-turn about world x maps the gripper's
/// forward axis to −z.
fn down_quat<F: Scalar>() -> Quat<F> {
    Quat::new(F::zero(), F::one(), F::zero(), F::zero())
}

/// Ground-truth grasp orientation for a target at planar position `(x, y)`:
/// tool-down, yawed to face the object's azimuth from the workspace center.
/// Used by the grasping task so rotation supervision there is tied to scene
/// geometry and a constant-output head cannot satisfy it; the reach tasks
/// use the plain tool-down orientation instead.
pub fn target_orientation<F: Scalar>(target: Vec3<F>) -> Quat<F> {
    let azimuth = target.y.atan2(target.x);
    let qz = Quat::from_axis_angle(Vec3::new(F::zero(), F::zero(), F::one()), azimuth);
    qz.mul(down_quat()).canonicalized()
}

// Object size and placement bounds (meters).
const RADIUS_RANGE: (f64, f64) = (0.030, 0.050);
const PLACE_RANGE: f64 = 0.20;
const CLEARANCE: f64 = 0.02;
const PLACEMENT_ATTEMPTS: usize = 100;

/// Generate the scene for `(seed, task)`: a target object plus distractors,
/// all resting on the ground plane, mutually non-overlapping, every color
/// distinct so the instruction stays unambiguous even where shape falls
/// below render resolution.
pub fn gen_scene<F: Scalar>(
    seed: u64,
    task: TaskId,
    cfg: &EnvConfig,
) -> Result<SceneSpec<F>, SynthError> {
    if cfg.views == 0 || cfg.views > CAMERA_RING.len() {
        return Err(SynthError::BadViews(cfg.views));
    }
    let mut rng = rng_stream(seed, "scene-gen", 0);
    let workspace = default_workspace::<F>();

    // Distinct colors, target first; shapes are free.
    let n_objects = 1 + cfg.distractors;
    if n_objects > PALETTE.len() {
        return Err(SynthError::PaletteExhausted { objects: n_objects, colors: PALETTE.len() });
    }
    let mut identities: Vec<(usize, bool)> = Vec::with_capacity(n_objects);
    while identities.len() < n_objects {
        let color = rng.gen_range(0..PALETTE.len());
        let is_sphere = rng.gen_bool(0.5);
        if !identities.iter().any(|&(c, _)| c == color) {
            identities.push((color, is_sphere));
        }
    }

    let mut objects: Vec<SceneObject<F>> = Vec::with_capacity(n_objects);
    for (color, is_sphere) in identities {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = rng.gen_range(RADIUS_RANGE.0..RADIUS_RANGE.1);
            let x = rng.gen_range(-PLACE_RANGE..PLACE_RANGE);
            let y = rng.gen_range(-PLACE_RANGE..PLACE_RANGE);
            let shape = if is_sphere {
                Shape::Sphere {
                    center: Vec3::new(F::from_f64(x), F::from_f64(y), F::from_f64(r)),
                    radius: F::from_f64(r),
                }
            } else {
                Shape::Cube {
                    aabb: Aabb::new(
                        Vec3::new(F::from_f64(x - r), F::from_f64(y - r), F::zero()),
                        Vec3::new(F::from_f64(x + r), F::from_f64(y + r), F::from_f64(2.0 * r)),
                    )?,
                }
            };
            let candidate = SceneObject { shape, color };
            let clear = objects.iter().all(|o| {
                let a = o.shape.center();
                let b = candidate.shape.center();
                let dx = (a.x - b.x).to_f64().unwrap();
                let dy = (a.y - b.y).to_f64().unwrap();
                let min_gap = (o.shape.footprint() + candidate.shape.footprint()).to_f64().unwrap()
                    + CLEARANCE;
                dx.hypot(dy) >= min_gap
            });
            if clear {
                objects.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Placement { objects: n_objects, attempts: PLACEMENT_ATTEMPTS });
        }
    }

    let half = (cfg.image_size as f64 - 1.0) / 2.0;
    let intr = intrinsics_for(
        F::from_f64(cfg.focal),
        F::from_f64(cfg.focal),
        F::from_f64(half),
        F::from_f64(half),
    );
    let cameras = CAMERA_RING[..cfg.views]
        .iter()
        .map(|p| {
            Camera::look_at(
                intr,
                Vec3::new(F::from_f64(p[0]), F::from_f64(p[1]), F::from_f64(p[2])),
                Vec3::new(
                    F::from_f64(LOOK_AT[0]),
                    F::from_f64(LOOK_AT[1]),
                    F::from_f64(LOOK_AT[2]),
                ),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let target = &objects[0];
    let instruction = match task {
        TaskId::ReachAbove => format!(
            "hover above the {} {}",
            PALETTE[target.color].0,
            target.shape.shape_word()
        ),
        _ => format!(
            "{} the {} {}",
            task.verb(),
            PALETTE[target.color].0,
            target.shape.shape_word()
        ),
    };
    let tokens = token_ids(&instruction)?;

    Ok(SceneSpec { seed, task, workspace, objects, cameras, instruction, tokens })
}

// ── Rendering ───────────────────────────────────────────────────────

const GROUND_COLOR: [f64; 3] = [0.78, 0.78, 0.78];
const SKY_COLOR: [f64; 3] = [0.12, 0.14, 0.18];
/// Light direction (toward the light), normalized at use.
const LIGHT_DIR: [f64; 3] = [0.35, 0.25, 1.0];
const AMBIENT: f64 = 0.4;
const DIFFUSE: f64 = 0.6;

struct Hit<F> {
    t: F,
    normal: Vec3<F>,
    color: [f64; 3],
}

/// Smallest positive ray parameter hitting the sphere, if any.
fn ray_sphere<F: Scalar>(o: Vec3<F>, d: Vec3<F>, center: Vec3<F>, radius: F) -> Option<F> {
    let oc = o - center;
    let a = d.dot(d);
    let b = F::from_f64(2.0) * oc.dot(d);
    let c = oc.dot(oc) - radius * radius;
    let disc = b * b - F::from_f64(4.0) * a * c;
    if disc < F::zero() {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (F::from_f64(2.0) * a);
    let t1 = (-b + sq) / (F::from_f64(2.0) * a);
    let eps = F::from_f64(1e-9);
    if t0 > eps {
        Some(t0)
    } else if t1 > eps {
        Some(t1)
    } else {
        None
    }
}

/// Slab-method ray/box intersection returning `(t, outward normal)`.
fn ray_box<F: Scalar>(o: Vec3<F>, d: Vec3<F>, aabb: &Aabb<F>) -> Option<(F, Vec3<F>)> {
    let (min, max) = (aabb.min, aabb.max);
    let mut t_enter = F::from_f64(-f64::INFINITY);
    let mut t_exit = F::from_f64(f64::INFINITY);
    let mut enter_axis = 0usize;
    let mut enter_sign = F::one();
    let o_arr = o.to_array();
    let d_arr = d.to_array();
    let min_arr = min.to_array();
    let max_arr = max.to_array();
    for axis in 0..3 {
        if d_arr[axis] == F::zero() {
            if o_arr[axis] < min_arr[axis] || o_arr[axis] > max_arr[axis] {
                return None;
            }
            continue;
        }
        let inv = F::one() / d_arr[axis];
        let (mut t0, mut t1) = ((min_arr[axis] - o_arr[axis]) * inv, (max_arr[axis] - o_arr[axis]) * inv);
        let mut sign = -F::one();
        if t0 > t1 {
            core::mem::swap(&mut t0, &mut t1);
            sign = F::one();
        }
        if t0 > t_enter {
            t_enter = t0;
            enter_axis = axis;
            enter_sign = sign;
        }
        if t1 < t_exit {
            t_exit = t1;
        }
        if t_enter > t_exit {
            return None;
        }
    }
    let eps = F::from_f64(1e-9);
    if t_enter <= eps {
        return None;
    }
    let mut n = [F::zero(); 3];
    n[enter_axis] = enter_sign;
    Some((t_enter, Vec3::from_array(n)))
}

fn trace<F: Scalar>(spec: &SceneSpec<F>, o: Vec3<F>, d: Vec3<F>) -> Option<Hit<F>> {
    let mut best: Option<Hit<F>> = None;
    let mut consider = |hit: Hit<F>| {
        if best.as_ref().map_or(true, |b| hit.t < b.t) {
            best = Some(hit);
        }
    };
    // Ground plane z = 0.
    if d.z < F::zero() {
        let t = -o.z / d.z;
        if t > F::zero() {
            consider(Hit {
                t,
                normal: Vec3::new(F::zero(), F::zero(), F::one()),
                color: GROUND_COLOR,
            });
        }
    }
    for obj in &spec.objects {
        match &obj.shape {
            Shape::Sphere { center, radius } => {
                if let Some(t) = ray_sphere(o, d, *center, *radius) {
                    let p = o + d * t;
                    consider(Hit {
                        t,
                        normal: (p - *center).normalized(),
                        color: PALETTE[obj.color].1,
                    });
                }
            }
            Shape::Cube { aabb } => {
                if let Some((t, normal)) = ray_box(o, d, aabb) {
                    consider(Hit { t, normal, color: PALETTE[obj.color].1 });
                }
            }
        }
    }
    best
}

fn shade<F: Scalar>(hit: &Hit<F>) -> [F; 3] {
    let l = Vec3::new(
        F::from_f64(LIGHT_DIR[0]),
        F::from_f64(LIGHT_DIR[1]),
        F::from_f64(LIGHT_DIR[2]),
    )
    .normalized();
    let lambert = hit.normal.dot(l).max(F::zero());
    let gain = F::from_f64(AMBIENT) + F::from_f64(DIFFUSE) * lambert;
    core::array::from_fn(|i| {
        (F::from_f64(hit.color[i]) * gain).min(F::one()).max(F::zero())
    })
}

/// Ray-cast the scene into one RGB-D view per camera. Depth is the exact
/// camera-frame z of the first hit; pixels that escape to the sky carry
/// depth 0, the invalid marker the lifting stage skips. With
/// `depth_noise > 0`, independent gaussian offsets (streams derived from the
/// scene seed) are added to valid depths.
pub fn render<F: Scalar>(spec: &SceneSpec<F>, cfg: &EnvConfig) -> Result<Observation<F>, SynthError> {
    let n = cfg.image_size;
    let mut views = Vec::with_capacity(spec.cameras.len());
    for (vi, cam) in spec.cameras.iter().enumerate() {
        let o = cam.cam_to_world.translation;
        let mut rgb = Vec::with_capacity(n * n * 3);
        let mut depth = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let d = cam
                    .cam_to_world
                    .rotation
                    .apply(cam.pixel_ray(F::from_f64(x as f64), F::from_f64(y as f64)));
                match trace(spec, o, d) {
                    Some(hit) => {
                        rgb.extend(shade(&hit));
                        depth.push(hit.t);
                    }
                    None => {
                        rgb.extend(SKY_COLOR.map(F::from_f64));
                        depth.push(F::zero());
                    }
                }
            }
        }
        if cfg.depth_noise > 0.0 {
            let mut rng = rng_stream(spec.seed, "depth-noise", vi as u64);
            let normal = Normal::new(0.0, cfg.depth_noise).expect("positive sigma");
            for d in depth.iter_mut() {
                if *d > F::zero() {
                    *d = *d + F::from_f64(normal.sample(&mut rng));
                }
            }
        }
        views.push(CameraView::new(n, n, rgb, depth, *cam)?);
    }
    Ok(views)
}

// ── Demonstration scripting ─────────────────────────────────────────

/// Frame period of scripted demonstrations, seconds.
pub const SCRIPT_DT: f64 = 0.1;
/// Target per-frame translation during transit segments, meters.
const STEP_LEN: f64 = 0.04;
/// Frames spent at each keypose (including the arrival frame); must exceed
/// the extractor's `hold_frames`.
const DWELL_FRAMES: usize = 5;
/// Hover height above the target's top surface for reach-above.
pub const HOVER_OFFSET: f64 = 0.12;
/// Pre-grasp height above the target's top surface.
pub const PREGRASP_OFFSET: f64 = 0.10;

/// Ground-truth keypose sequence for a scene, in execution order.
pub fn task_keyposes<F: Scalar>(spec: &SceneSpec<F>) -> Vec<KeyposeAction<F>> {
    let top = spec.objects[0].shape.top();
    let down = down_quat().canonicalized();
    match spec.task {
        TaskId::ReachTouch => {
            vec![KeyposeAction { pos: top, rot: down, open: true, col: true }]
        }
        TaskId::ReachAbove => vec![KeyposeAction {
            pos: Vec3::new(top.x, top.y, top.z + F::from_f64(HOVER_OFFSET)),
            rot: down,
            open: true,
            col: false,
        }],
        TaskId::PregraspGrasp => {
            let rot = target_orientation(top);
            vec![
                KeyposeAction {
                    pos: Vec3::new(top.x, top.y, top.z + F::from_f64(PREGRASP_OFFSET)),
                    rot,
                    open: true,
                    col: false,
                },
                KeyposeAction { pos: top, rot, open: false, col: true },
            ]
        }
    }
}

/// A scripted demonstration plus its generation-side ground truth, for
/// cross-checking the extractor against the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedDemo<F: Scalar> {
    pub demo: Demonstration<F>,
    /// Frame index of each scripted keypose, in order.
    pub keypose_frames: Vec<usize>,
    pub keyposes: Vec<KeyposeAction<F>>,
}

/// Normalized linear quaternion interpolation on the shorter arc.
fn nlerp<F: Scalar>(a: Quat<F>, b: Quat<F>, s: F) -> Quat<F> {
    let dot = a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
    let b = if dot < F::zero() { Quat::new(-b.w, -b.x, -b.y, -b.z) } else { b };
    let one = F::one();
    let q = Quat::new(
        a.w * (one - s) + b.w * s,
        a.x * (one - s) + b.x * s,
        a.y * (one - s) + b.y * s,
        a.z * (one - s) + b.z * s,
    );
    q.normalized().expect("nlerp endpoints are unit and non-antipodal")
}

/// Script an expert demonstration: start at home, transit linearly to each
/// ground-truth keypose, dwell there; gripper bits flip exactly on
/// dwell-end frames so extraction recovers the scripted keyposes.
pub fn script_demo<F: Scalar>(
    spec: &SceneSpec<F>,
    cfg: &EnvConfig,
) -> Result<ScriptedDemo<F>, SynthError> {
    let keyposes = task_keyposes(spec);
    for (index, k) in keyposes.iter().enumerate() {
        if !spec.workspace.contains(k.pos) {
            return Err(SynthError::KeyposeOutsideWorkspace {
                index,
                x: k.pos.x.to_f64().unwrap(),
                y: k.pos.y.to_f64().unwrap(),
                z: k.pos.z.to_f64().unwrap(),
            });
        }
    }

    let home = home_state::<F>();
    let mut states: Vec<EeState<F>> = vec![home];
    let mut keypose_frames = Vec::with_capacity(keyposes.len());
    let mut prev_pos = home.pos;
    let mut prev_rot = home.rot;
    let mut prev_open = home.open;
    for k in &keyposes {
        let dist = prev_pos.dist(k.pos).to_f64().unwrap();
        let steps = ((dist / STEP_LEN).round() as usize).max(2);
        for j in 1..=steps {
            let s = F::from_f64(j as f64 / steps as f64);
            states.push(EeState {
                pos: prev_pos + (k.pos - prev_pos) * s,
                rot: nlerp(prev_rot, k.rot, s),
                open: prev_open,
                col: k.col,
            });
        }
        // Arrival frame plus DWELL_FRAMES − 1 repeats; the bit flips on the
        // run's last frame, which is exactly the frame extraction selects.
        for j in 1..DWELL_FRAMES {
            let last = j == DWELL_FRAMES - 1;
            states.push(EeState {
                pos: k.pos,
                rot: k.rot,
                open: if last { k.open } else { prev_open },
                col: k.col,
            });
        }
        keypose_frames.push(states.len() - 1);
        prev_pos = k.pos;
        prev_rot = k.rot;
        prev_open = k.open;
    }

    let observation = render(spec, cfg)?;
    let observations = vec![observation; states.len()];
    let demo = Demonstration::new(
        observations,
        states,
        F::from_f64(SCRIPT_DT),
        spec.instruction.clone(),
        spec.tokens.clone(),
    )?;
    Ok(ScriptedDemo { demo, keypose_frames, keyposes })
}

/// Generate a dataset by scripting one demonstration per seed.
pub fn generate_dataset<F: Scalar>(
    task: TaskId,
    cfg: &EnvConfig,
    extract: ExtractConfig<F>,
    seeds: impl Iterator<Item = u64>,
) -> Result<Dataset<F>, SynthError> {
    let mut demos = Vec::new();
    for seed in seeds {
        let spec = gen_scene::<F>(seed, task, cfg)?;
        demos.push(script_demo(&spec, cfg)?.demo);
    }
    Ok(Dataset::build(demos, extract))
}

// ── Evaluation ──────────────────────────────────────────────────────

/// Everything a policy sees when asked for the next keypose. `scene_seed`
/// exists for diagnostic policies (oracles, randomized baselines); a learned
/// policy must only condition on observation, tokens, and proprioception.
pub struct PolicyInput<'a, F: Scalar> {
    pub observation: &'a Observation<F>,
    pub tokens: &'a [u32],
    pub proprio: &'a EeState<F>,
    pub scene_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Position tolerance in meters.
    pub pos_tol: f64,
    /// Rotation tolerance in radians (geodesic quaternion angle).
    pub rot_tol: f64,
    /// First episode seed; episode i uses `seed_base + i`.
    pub seed_base: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 500, pos_tol: 0.02, rot_tol: 0.2, seed_base: 1_000_000 }
    }
}

/// Does a predicted keypose match the ground truth within tolerances?
pub fn keypose_matches<F: Scalar>(
    pred: &KeyposeAction<F>,
    gt: &KeyposeAction<F>,
    pos_tol: F,
    rot_tol: F,
) -> bool {
    pred.pos.dist(gt.pos) <= pos_tol
        && pred.rot.angle_to(gt.rot) <= rot_tol
        && pred.open == gt.open
        && pred.col == gt.col
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyposeLog<F: Scalar> {
    pub pred: KeyposeAction<F>,
    pub gt: KeyposeAction<F>,
    pub pos_err: F,
    pub rot_err: F,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog<F: Scalar> {
    pub seed: u64,
    pub success: bool,
    pub keyposes: Vec<KeyposeLog<F>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<F: Scalar> {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub median_pos_err: F,
    pub median_rot_err: F,
    pub per_episode: Vec<EpisodeLog<F>>,
}

fn median<F: Scalar>(mut v: Vec<F>) -> F {
    if v.is_empty() {
        return F::zero();
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / F::from_f64(2.0)
    }
}

/// Closed-loop keypose evaluation with teleport execution: per episode,
/// generate the scene, then ask the policy for one keypose per ground-truth
/// keypose, teleporting the end-effector to each *prediction*. An episode
/// succeeds only if every ground-truth keypose is matched, in order, within
/// tolerances. Fully deterministic given seeds and policy.
pub fn evaluate<F, P>(
    task: TaskId,
    env: &EnvConfig,
    eval: &EvalConfig,
    mut policy: P,
) -> Result<EvalReport<F>, SynthError>
where
    F: Scalar,
    P: FnMut(&PolicyInput<'_, F>) -> Result<KeyposeAction<F>, SynthError>,
{
    let mut per_episode = Vec::with_capacity(eval.episodes);
    let mut successes = 0usize;
    let mut pos_errs = Vec::new();
    let mut rot_errs = Vec::new();
    let pos_tol = F::from_f64(eval.pos_tol);
    let rot_tol = F::from_f64(eval.rot_tol);
    for ep in 0..eval.episodes {
        let seed = eval.seed_base + ep as u64;
        let spec = gen_scene::<F>(seed, task, env)?;
        let observation = render(&spec, env)?;
        let gts = task_keyposes(&spec);
        let mut proprio = home_state::<F>();
        let mut success = true;
        let mut keyposes = Vec::with_capacity(gts.len());
        for gt in &gts {
            let pred = policy(&PolicyInput {
                observation: &observation,
                tokens: &spec.tokens,
                proprio: &proprio,
                scene_seed: seed,
            })?;
            let pos_err = pred.pos.dist(gt.pos);
            let rot_err = pred.rot.angle_to(gt.rot);
            let matched = keypose_matches(&pred, gt, pos_tol, rot_tol);
            success &= matched;
            pos_errs.push(pos_err);
            rot_errs.push(rot_err);
            keyposes.push(KeyposeLog { pred, gt: *gt, pos_err, rot_err, matched });
            proprio = EeState { pos: pred.pos, rot: pred.rot, open: pred.open, col: pred.col };
        }
        successes += success as usize;
        per_episode.push(EpisodeLog { seed, success, keyposes });
    }
    Ok(EvalReport {
        episodes: eval.episodes,
        successes,
        success_rate: successes as f64 / eval.episodes.max(1) as f64,
        median_pos_err: median(pos_errs),
        median_rot_err: median(rot_errs),
        per_episode,
    })
}
