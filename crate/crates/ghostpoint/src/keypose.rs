//! Keypose extraction from demonstration trajectories, supervised-tuple
//! assembly, the on-disk dataset container, and the two image-space
//! augmentations (synchronized random crop, global yaw rotation).
//!
//! A demonstration is a dense trajectory of end-effector states paired with
//! one multi-view observation per frame. Keyposes are the sparse frames a
//! policy actually needs to predict: frames where the gripper bit flips,
//! ends of low-speed dwells, and the final frame. Each non-terminal frame
//! then becomes one training tuple targeting the chronologically next
//! keypose.

use crate::geom::{Quat, RigidTransform, Vec3};
use crate::policy::KeyposeAction;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use crate::scene::{read_scene, write_scene, CameraView, Observation, SceneError};
use crate::util;
use rand::Rng;
use std::collections::HashMap;
use std::io::{self, Cursor, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KeyposeError {
    #[error("demonstration has {obs} observations but {states} states")]
    LengthMismatch { obs: usize, states: usize },
    #[error("demonstration needs at least 2 frames, got {0}")]
    TooShort(usize),
    #[error("frame duration must be positive, got {0}")]
    BadDt(f64),
    #[error("frame {frame}: end-effector quaternion norm {norm} is not 1")]
    BadQuaternion { frame: usize, norm: f64 },
    #[error("crop {out_h}×{out_w} does not fit inside {in_h}×{in_w}")]
    CropTooLarge { out_h: usize, out_w: usize, in_h: usize, in_w: usize },
    #[error("crop size must be nonzero")]
    EmptyCrop,
    #[error("dataset file: bad magic {0:02x?}")]
    BadMagic([u8; 8]),
    #[error("dataset file: unsupported version {0}")]
    BadVersion(u32),
    #[error("dataset file: demonstration record {record} is truncated")]
    Truncated { record: usize },
    #[error("dataset file: demonstration record {record} failed its checksum")]
    ChecksumMismatch { record: usize },
    #[error("dataset file: tuple section is truncated or corrupt")]
    TuplesCorrupt,
    #[error("dataset file: record {record} references scene block {index} of {count}")]
    BadSceneIndex { record: usize, index: usize, count: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Continuous end-effector state at one frame of a demonstration. `col` is
/// the collision-allowed flag the demonstrator used for the upcoming motion
/// (contact moves set it; free-space transit clears it).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EeState<F: Scalar> {
    pub pos: Vec3<F>,
    pub rot: Quat<F>,
    pub open: bool,
    pub col: bool,
}

/// A dense demonstration: one observation and one end-effector state per
/// frame, sampled every `dt` seconds, plus the templated instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration<F: Scalar> {
    pub observations: Vec<Observation<F>>,
    pub states: Vec<EeState<F>>,
    pub dt: F,
    pub instruction: String,
    pub tokens: Vec<u32>,
}

impl<F: Scalar> Demonstration<F> {
    pub fn new(
        observations: Vec<Observation<F>>,
        states: Vec<EeState<F>>,
        dt: F,
        instruction: String,
        tokens: Vec<u32>,
    ) -> Result<Self, KeyposeError> {
        if observations.len() != states.len() {
            return Err(KeyposeError::LengthMismatch { obs: observations.len(), states: states.len() });
        }
        if states.len() < 2 {
            return Err(KeyposeError::TooShort(states.len()));
        }
        let dt_f = dt.to_f64().unwrap_or(f64::NAN);
        if !(dt_f > 0.0) {
            return Err(KeyposeError::BadDt(dt_f));
        }
        for (frame, s) in states.iter().enumerate() {
            let norm = s.rot.norm().to_f64().unwrap_or(f64::NAN);
            if (norm - 1.0).abs() > 1e-6 {
                return Err(KeyposeError::BadQuaternion { frame, norm });
            }
        }
        Ok(Self { observations, states, dt, instruction, tokens })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// The keypose action recorded at frame `t`: pose with the quaternion
    /// canonicalized to the w ≥ 0 hemisphere, plus both gripper bits.
    pub fn action_at(&self, t: usize) -> KeyposeAction<F> {
        let s = &self.states[t];
        KeyposeAction { pos: s.pos, rot: s.rot.canonicalized(), open: s.open, col: s.col }
    }
}

/// Thresholds for the dwell rule of keypose extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractConfig<F> {
    /// Speed below which a frame counts as dwelling, meters/second.
    pub vel_eps: F,
    /// Minimum consecutive dwell frames before the run's last frame becomes
    /// a keypose.
    pub hold_frames: usize,
}

impl<F: Scalar> Default for ExtractConfig<F> {
    fn default() -> Self {
        Self { vel_eps: F::from_f64(0.01), hold_frames: 3 }
    }
}

/// Extract the sorted keypose frames of a demonstration: frames whose open
/// bit differs from the previous frame, last frames of low-speed runs of at
/// least `hold_frames` frames, and always the final frame.
pub fn extract_keyposes<F: Scalar>(demo: &Demonstration<F>, cfg: &ExtractConfig<F>) -> Vec<usize> {
    let last = demo.len() - 1;
    let mut keys = std::collections::BTreeSet::new();
    keys.insert(last);
    let mut run = 0usize;
    for t in 1..=last {
        if demo.states[t].open != demo.states[t - 1].open {
            keys.insert(t);
        }
        let speed = demo.states[t].pos.dist(demo.states[t - 1].pos) / demo.dt;
        if speed < cfg.vel_eps {
            run += 1;
            if t == last && run >= cfg.hold_frames {
                keys.insert(last);
            }
        } else {
            if run >= cfg.hold_frames {
                keys.insert(t - 1);
            }
            run = 0;
        }
    }
    keys.into_iter().collect()
}

/// One supervised sample inside a demonstration: observe frame `frame`,
/// predict the keypose at `target_frame` (always strictly later).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingTuple<F: Scalar> {
    pub frame: usize,
    pub target_frame: usize,
    pub action: KeyposeAction<F>,
}

/// Pair every frame with the first keypose strictly after it. Frames at or
/// after the last keypose produce no tuple.
pub fn make_tuples<F: Scalar>(demo: &Demonstration<F>, keyposes: &[usize]) -> Vec<TrainingTuple<F>> {
    let mut tuples = Vec::new();
    for t in 0..demo.len() {
        if let Some(&k) = keyposes.iter().find(|&&k| k > t) {
            tuples.push(TrainingTuple { frame: t, target_frame: k, action: demo.action_at(k) });
        }
    }
    tuples
}

/// An in-memory dataset: demonstrations plus the flattened training tuples
/// derived from them under a fixed extraction config.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F: Scalar> {
    pub demos: Vec<Demonstration<F>>,
    pub extract: ExtractConfig<F>,
    /// `(demo index, tuple)` pairs over all demonstrations, in demo order.
    pub samples: Vec<(usize, TrainingTuple<F>)>,
}

impl<F: Scalar> Dataset<F> {
    /// Derive tuples for every demonstration and flatten them.
    pub fn build(demos: Vec<Demonstration<F>>, extract: ExtractConfig<F>) -> Self {
        let mut samples = Vec::new();
        for (i, demo) in demos.iter().enumerate() {
            let keys = extract_keyposes(demo, &extract);
            for tuple in make_tuples(demo, &keys) {
                samples.push((i, tuple));
            }
        }
        Self { demos, extract, samples }
    }
}

// ── Dataset file format ─────────────────────────────────────────────

pub const DATASET_MAGIC: [u8; 8] = *b"GHOSTDAT";
pub const DATASET_VERSION: u32 = 1;

fn state_to_doubles<F: Scalar>(s: &EeState<F>) -> [f64; 9] {
    let f = |v: F| v.to_f64().unwrap();
    [
        f(s.pos.x),
        f(s.pos.y),
        f(s.pos.z),
        f(s.rot.w),
        f(s.rot.x),
        f(s.rot.y),
        f(s.rot.z),
        if s.open { 1.0 } else { 0.0 },
        if s.col { 1.0 } else { 0.0 },
    ]
}

fn state_from_doubles<F: Scalar>(d: &[f64]) -> EeState<F> {
    EeState {
        pos: Vec3::new(F::from_f64(d[0]), F::from_f64(d[1]), F::from_f64(d[2])),
        rot: Quat::new(F::from_f64(d[3]), F::from_f64(d[4]), F::from_f64(d[5]), F::from_f64(d[6])),
        open: d[7] != 0.0,
        col: d[8] != 0.0,
    }
}

fn action_to_doubles<F: Scalar>(a: &KeyposeAction<F>) -> [f64; 9] {
    let f = |v: F| v.to_f64().unwrap();
    [
        f(a.pos.x),
        f(a.pos.y),
        f(a.pos.z),
        f(a.rot.w),
        f(a.rot.x),
        f(a.rot.y),
        f(a.rot.z),
        if a.open { 1.0 } else { 0.0 },
        if a.col { 1.0 } else { 0.0 },
    ]
}

fn action_from_doubles<F: Scalar>(d: &[f64]) -> KeyposeAction<F> {
    KeyposeAction {
        pos: Vec3::new(F::from_f64(d[0]), F::from_f64(d[1]), F::from_f64(d[2])),
        rot: Quat::new(F::from_f64(d[3]), F::from_f64(d[4]), F::from_f64(d[5]), F::from_f64(d[6])),
        open: d[7] != 0.0,
        col: d[8] != 0.0,
    }
}

/// Serialize one demonstration into a payload block. Identical observations
/// (static scenes observed every frame) are stored once and referenced by
/// index, so file size scales with unique renders, not trajectory length.
fn encode_demo<F: Scalar>(demo: &Demonstration<F>) -> Result<Vec<u8>, KeyposeError> {
    let mut buf = Vec::new();
    util::write_str(&mut buf, &demo.instruction)?;
    util::write_u32(&mut buf, demo.tokens.len() as u32)?;
    for t in &demo.tokens {
        util::write_u32(&mut buf, *t)?;
    }
    util::write_f64(&mut buf, demo.dt.to_f64().unwrap())?;
    util::write_u32(&mut buf, demo.len() as u32)?;
    for s in &demo.states {
        util::write_f64_slice(&mut buf, &state_to_doubles(s))?;
    }
    let mut blocks: Vec<Vec<u8>> = Vec::new();
    let mut index_of: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut frame_to_block = Vec::with_capacity(demo.len());
    for obs in &demo.observations {
        let mut bytes = Vec::new();
        write_scene(&mut bytes, obs)?;
        let idx = *index_of.entry(bytes.clone()).or_insert_with(|| {
            blocks.push(bytes);
            blocks.len() - 1
        });
        frame_to_block.push(idx as u32);
    }
    util::write_u32(&mut buf, blocks.len() as u32)?;
    for b in &blocks {
        util::write_u64(&mut buf, b.len() as u64)?;
        buf.write_all(b)?;
    }
    for idx in frame_to_block {
        util::write_u32(&mut buf, idx)?;
    }
    Ok(buf)
}

fn decode_demo<F: Scalar>(payload: &[u8], record: usize) -> Result<Demonstration<F>, KeyposeError> {
    let r = &mut Cursor::new(payload);
    let instruction = util::read_str(r)?;
    let n_tokens = util::read_u32(r)? as usize;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(util::read_u32(r)?);
    }
    let dt = F::from_f64(util::read_f64(r)?);
    let frames = util::read_u32(r)? as usize;
    let mut states = Vec::with_capacity(frames);
    for _ in 0..frames {
        let d = util::read_f64_vec(r, 9)?;
        states.push(state_from_doubles(&d));
    }
    let n_blocks = util::read_u32(r)? as usize;
    let mut blocks: Vec<Observation<F>> = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let len = util::read_u64(r)? as usize;
        let mut bytes = vec![0u8; len];
        r.read_exact(&mut bytes)?;
        blocks.push(read_scene(&mut Cursor::new(bytes))?);
    }
    let mut observations = Vec::with_capacity(frames);
    for _ in 0..frames {
        let idx = util::read_u32(r)? as usize;
        let obs = blocks
            .get(idx)
            .ok_or(KeyposeError::BadSceneIndex { record, index: idx, count: n_blocks })?;
        observations.push(obs.clone());
    }
    Demonstration::new(observations, states, dt, instruction, tokens)
}

/// Write a dataset: versioned header, one checksummed record per
/// demonstration, then the checksummed tuple section.
pub fn write_dataset<F: Scalar, W: Write>(w: &mut W, ds: &Dataset<F>) -> Result<(), KeyposeError> {
    w.write_all(&DATASET_MAGIC)?;
    util::write_u32(w, DATASET_VERSION)?;
    util::write_f64(w, ds.extract.vel_eps.to_f64().unwrap())?;
    util::write_u32(w, ds.extract.hold_frames as u32)?;
    util::write_u32(w, ds.demos.len() as u32)?;
    for demo in &ds.demos {
        let payload = encode_demo(demo)?;
        util::write_u64(w, payload.len() as u64)?;
        w.write_all(&payload)?;
        util::write_u64(w, util::fnv1a64(&payload))?;
    }
    let mut tuple_buf = Vec::new();
    util::write_u32(&mut tuple_buf, ds.samples.len() as u32)?;
    for (demo, t) in &ds.samples {
        util::write_u32(&mut tuple_buf, *demo as u32)?;
        util::write_u32(&mut tuple_buf, t.frame as u32)?;
        util::write_u32(&mut tuple_buf, t.target_frame as u32)?;
        util::write_f64_slice(&mut tuple_buf, &action_to_doubles(&t.action))?;
    }
    util::write_u64(w, tuple_buf.len() as u64)?;
    w.write_all(&tuple_buf)?;
    util::write_u64(w, util::fnv1a64(&tuple_buf))?;
    Ok(())
}

pub fn read_dataset<F: Scalar, R: Read>(r: &mut R) -> Result<Dataset<F>, KeyposeError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != DATASET_MAGIC {
        return Err(KeyposeError::BadMagic(magic));
    }
    let version = util::read_u32(r)?;
    if version != DATASET_VERSION {
        return Err(KeyposeError::BadVersion(version));
    }
    let vel_eps = F::from_f64(util::read_f64(r)?);
    let hold_frames = util::read_u32(r)? as usize;
    let n_demos = util::read_u32(r)? as usize;
    let mut demos = Vec::with_capacity(n_demos);
    for record in 0..n_demos {
        let fail = |_| KeyposeError::Truncated { record };
        let len = util::read_u64(r).map_err(fail)? as usize;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload).map_err(fail)?;
        let checksum = util::read_u64(r).map_err(fail)?;
        if checksum != util::fnv1a64(&payload) {
            return Err(KeyposeError::ChecksumMismatch { record });
        }
        demos.push(decode_demo(&payload, record)?);
    }
    let fail = |_| KeyposeError::TuplesCorrupt;
    let len = util::read_u64(r).map_err(fail)? as usize;
    let mut tuple_buf = vec![0u8; len];
    r.read_exact(&mut tuple_buf).map_err(fail)?;
    let checksum = util::read_u64(r).map_err(fail)?;
    if checksum != util::fnv1a64(&tuple_buf) {
        return Err(KeyposeError::TuplesCorrupt);
    }
    let tr = &mut Cursor::new(&tuple_buf);
    let n_samples = util::read_u32(tr).map_err(fail)? as usize;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let demo = util::read_u32(tr).map_err(fail)? as usize;
        let frame = util::read_u32(tr).map_err(fail)? as usize;
        let target_frame = util::read_u32(tr).map_err(fail)? as usize;
        let d = util::read_f64_vec(tr, 9).map_err(fail)?;
        samples.push((demo, TrainingTuple { frame, target_frame, action: action_from_doubles(&d) }));
    }
    Ok(Dataset {
        demos,
        extract: ExtractConfig { vel_eps, hold_frames },
        samples,
    })
}

// ── Augmentations ───────────────────────────────────────────────────

/// Synchronized random crop: one offset is drawn per observation and applied
/// to every view, shifting each camera's principal point so that cropped
/// pixels unproject to exactly the same world points as before.
pub fn random_crop<F: Scalar>(
    obs: &Observation<F>,
    out_h: usize,
    out_w: usize,
    rng: &mut impl Rng,
) -> Result<Observation<F>, KeyposeError> {
    if out_h == 0 || out_w == 0 {
        return Err(KeyposeError::EmptyCrop);
    }
    for v in obs {
        if out_h > v.height || out_w > v.width {
            return Err(KeyposeError::CropTooLarge {
                out_h,
                out_w,
                in_h: v.height,
                in_w: v.width,
            });
        }
    }
    let (h, w) = (obs[0].height, obs[0].width);
    let oy = rng.gen_range(0..=h - out_h);
    let ox = rng.gen_range(0..=w - out_w);
    crop_at(obs, oy, ox, out_h, out_w)
}

/// Deterministic crop at a fixed offset (the testable core of
/// [`random_crop`]).
pub fn crop_at<F: Scalar>(
    obs: &Observation<F>,
    oy: usize,
    ox: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Observation<F>, KeyposeError> {
    let mut out = Vec::with_capacity(obs.len());
    for v in obs {
        let mut rgb = Vec::with_capacity(out_h * out_w * 3);
        let mut depth = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            for x in 0..out_w {
                let src = (oy + y) * v.width + (ox + x);
                rgb.extend_from_slice(&v.rgb[src * 3..src * 3 + 3]);
                depth.push(v.depth[src]);
            }
        }
        let intr = crate::geom::intrinsics_for(
            v.camera.fx(),
            v.camera.fy(),
            v.camera.cx() - F::from_f64(ox as f64),
            v.camera.cy() - F::from_f64(oy as f64),
        );
        let camera = crate::geom::Camera::new(intr, v.camera.cam_to_world)
            .map_err(SceneError::Geom)?;
        out.push(CameraView::new(out_h, out_w, rgb, depth, camera)?);
    }
    Ok(out)
}

/// Rotate a whole demonstration about the vertical axis through `center`:
/// camera extrinsics and end-effector poses transform rigidly, image pixels
/// stay fixed, so the lifted feature cloud and the action labels rotate
/// together. Default-off augmentation.
pub fn yaw_rotate<F: Scalar>(
    demo: &Demonstration<F>,
    angle: F,
    center: Vec3<F>,
) -> Result<Demonstration<F>, KeyposeError> {
    let rot = crate::geom::Mat3::rot_z(angle);
    let translation = center - rot.apply(center);
    let world = RigidTransform::new(rot, translation);
    let qz = Quat::from_axis_angle(Vec3::new(F::zero(), F::zero(), F::one()), angle);
    let mut observations = Vec::with_capacity(demo.observations.len());
    for obs in &demo.observations {
        let mut views = Vec::with_capacity(obs.len());
        for v in obs {
            let camera = crate::geom::Camera::new(
                v.camera.intrinsics,
                world.compose(v.camera.cam_to_world),
            )
            .map_err(SceneError::Geom)?;
            views.push(CameraView::new(v.height, v.width, v.rgb.clone(), v.depth.clone(), camera)?);
        }
        observations.push(views);
    }
    let states = demo
        .states
        .iter()
        .map(|s| EeState {
            pos: world.apply(s.pos),
            rot: qz.mul(s.rot),
            open: s.open,
            col: s.col,
        })
        .collect();
    Demonstration::new(
        observations,
        states,
        demo.dt,
        demo.instruction.clone(),
        demo.tokens.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{intrinsics_for, Camera, Mat3};
    use crate::util::rng_stream;

    fn test_camera(shift: f64) -> Camera<f64> {
        Camera::look_at(
            intrinsics_for(8.0, 8.0, 2.0, 2.0),
            Vec3::new(1.0 + shift, 0.0, 0.5),
            Vec3::new(shift, 0.0, 0.1),
        )
        .unwrap()
    }

    fn tiny_obs(fill: f64) -> Observation<f64> {
        vec![CameraView::new(
            4,
            4,
            vec![fill; 4 * 4 * 3],
            vec![1.0; 4 * 4],
            test_camera(0.0),
        )
        .unwrap()]
    }

    fn still(pos: Vec3<f64>, open: bool) -> EeState<f64> {
        EeState { pos, rot: Quat::identity(), open, col: false }
    }

    /// A demo from a list of (position, open) pairs, one shared observation.
    fn demo_from(states: Vec<EeState<f64>>) -> Demonstration<f64> {
        let obs = tiny_obs(0.5);
        Demonstration::new(
            vec![obs; states.len()],
            states,
            0.1,
            "touch the red sphere".into(),
            vec![1, 4, 2],
        )
        .unwrap()
    }

    fn line(n: usize, step: f64, from: Vec3<f64>) -> Vec<Vec3<f64>> {
        (0..n).map(|i| from + Vec3::new(step * i as f64, 0.0, 0.0)).collect()
    }

    #[test]
    fn invalid_demos_are_rejected() {
        let obs = tiny_obs(0.1);
        let s = still(Vec3::zero(), true);
        assert!(matches!(
            Demonstration::new(vec![obs.clone()], vec![s, s], 0.1, String::new(), vec![]),
            Err(KeyposeError::LengthMismatch { obs: 1, states: 2 })
        ));
        assert!(matches!(
            Demonstration::new(vec![obs.clone()], vec![s], 0.1, String::new(), vec![]),
            Err(KeyposeError::TooShort(1))
        ));
        assert!(matches!(
            Demonstration::new(vec![obs.clone(); 2], vec![s, s], 0.0, String::new(), vec![]),
            Err(KeyposeError::BadDt(_))
        ));
        let bad = EeState { rot: Quat::new(2.0, 0.0, 0.0, 0.0), ..s };
        assert!(matches!(
            Demonstration::new(vec![obs; 2], vec![s, bad], 0.1, String::new(), vec![]),
            Err(KeyposeError::BadQuaternion { frame: 1, .. })
        ));
    }

    #[test]
    fn open_bit_flip_is_a_keypose() {
        let mut states: Vec<_> = line(8, 0.05, Vec3::zero()).into_iter().map(|p| still(p, true)).collect();
        for s in states.iter_mut().skip(5) {
            s.open = false;
        }
        let demo = demo_from(states);
        let keys = extract_keyposes(&demo, &ExtractConfig::default());
        assert_eq!(keys, vec![5, 7]);
    }

    #[test]
    fn constant_velocity_demo_keeps_only_last_frame()  {
        let states: Vec<_> = line(10, 0.05, Vec3::zero()).into_iter().map(|p| still(p, true)).collect();
        let demo = demo_from(states);
        assert_eq!(extract_keyposes(&demo, &ExtractConfig::default()), vec![9]);
    }

    #[test]
    fn scripted_two_phase_demo_matches_hand_trace() {
        // Frames 0–3 transit, 4–8 dwell (5 equal positions), 9–12 transit,
        // 13 gripper closes mid-motion, 14 final. Hand-traced keyposes:
        // dwell end 8, bit flip 13, final 14.
        let mut pos = line(4, 0.05, Vec3::zero());
        pos.extend(vec![pos[3] + Vec3::new(0.05, 0.0, 0.0); 5]);
        let after_dwell = *pos.last().unwrap();
        pos.extend(line(4, 0.05, after_dwell + Vec3::new(0.05, 0.0, 0.0)));
        pos.push(*pos.last().unwrap() + Vec3::new(0.05, 0.0, 0.0));
        pos.push(*pos.last().unwrap() + Vec3::new(0.05, 0.0, 0.0));
        assert_eq!(pos.len(), 15);
        let states: Vec<_> = pos
            .into_iter()
            .enumerate()
            .map(|(t, p)| still(p, t < 13))
            .collect();
        let demo = demo_from(states);
        let keys = extract_keyposes(&demo, &ExtractConfig::default());
        assert_eq!(keys, vec![8, 13, 14]);
    }

    #[test]
    fn dwell_running_into_final_frame_merges() {
        let mut pos = line(4, 0.05, Vec3::zero());
        pos.extend(vec![pos[3]; 6]);
        let states: Vec<_> = pos.into_iter().map(|p| still(p, true)).collect();
        let demo = demo_from(states);
        assert_eq!(extract_keyposes(&demo, &ExtractConfig::default()), vec![9]);
    }

    #[test]
    fn extraction_is_invariant_to_temporal_rescaling() {
        let mut pos = line(5, 0.04, Vec3::zero());
        pos.extend(vec![pos[4]; 4]);
        pos.extend(line(3, 0.04, pos[8] + Vec3::new(0.04, 0.0, 0.0)));
        let states: Vec<_> = pos.into_iter().map(|p| still(p, true)).collect();
        let base = demo_from(states.clone());
        let keys = extract_keyposes(&base, &ExtractConfig::default());
        for c in [0.5, 2.0, 10.0] {
            let mut fast = base.clone();
            fast.dt = base.dt / c;
            let cfg = ExtractConfig { vel_eps: 0.01 * c, hold_frames: 3 };
            assert_eq!(extract_keyposes(&fast, &cfg), keys, "c = {c}");
        }
    }

    #[test]
    fn keyposes_are_strictly_increasing_and_end_with_last() {
        let mut pos = line(6, 0.05, Vec3::zero());
        pos.extend(vec![pos[5]; 4]);
        pos.extend(line(5, 0.05, pos[9] + Vec3::new(0.05, 0.0, 0.0)));
        let mut states: Vec<_> = pos.into_iter().map(|p| still(p, true)).collect();
        states[12].open = false;
        states[13].open = false;
        states[14].open = false;
        let demo = demo_from(states);
        let keys = extract_keyposes(&demo, &ExtractConfig::default());
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*keys.last().unwrap(), demo.len() - 1);
    }

    #[test]
    fn tuples_pair_each_frame_with_next_keypose() {
        // keyposes {5, 9} over 10 frames → frames 0–4 target 5, 5–8 target 9.
        let mut states: Vec<_> = line(10, 0.05, Vec3::zero()).into_iter().map(|p| still(p, true)).collect();
        for s in states.iter_mut().skip(5) {
            s.open = false;
        }
        let demo = demo_from(states);
        let keys = extract_keyposes(&demo, &ExtractConfig::default());
        assert_eq!(keys, vec![5, 9]);
        let tuples = make_tuples(&demo, &keys);
        assert_eq!(tuples.len(), 9);
        for t in &tuples {
            assert!(t.target_frame > t.frame);
            let want = if t.frame < 5 { 5 } else { 9 };
            assert_eq!(t.target_frame, want);
            assert_eq!(t.action, demo.action_at(want));
        }
    }

    #[test]
    fn single_terminal_keypose_yields_a_tuple_per_earlier_frame() {
        let states: Vec<_> = line(7, 0.05, Vec3::zero()).into_iter().map(|p| still(p, true)).collect();
        let demo = demo_from(states);
        let keys = extract_keyposes(&demo, &ExtractConfig::default());
        let tuples = make_tuples(&demo, &keys);
        assert_eq!(tuples.len(), 6);
        assert!(tuples.iter().all(|t| t.target_frame == 6));
    }

    #[test]
    fn tuples_match_exhaustive_pairing_oracle() {
        let mut pos = line(5, 0.05, Vec3::zero());
        pos.extend(vec![pos[4]; 4]);
        pos.extend(line(4, 0.05, pos[8] + Vec3::new(0.05, 0.0, 0.0)));
        let mut states: Vec<_> = pos.into_iter().map(|p| still(p, true)).collect();
        states[10].open = false;
        states[11].open = false;
        states[12].open = false;
        let demo = demo_from(states);
        let keys = extract_keyposes(&demo, &ExtractConfig::default());
        let tuples = make_tuples(&demo, &keys);
        // Oracle: brute-force scan for each frame.
        let mut oracle = Vec::new();
        for t in 0..demo.len() {
            for &k in &keys {
                if k > t {
                    oracle.push((t, k));
                    break;
                }
            }
        }
        assert_eq!(tuples.len(), oracle.len());
        for (tuple, (f, k)) in tuples.iter().zip(oracle) {
            assert_eq!((tuple.frame, tuple.target_frame), (f, k));
        }
    }

    fn two_demo_dataset() -> Dataset<f64> {
        let mut states: Vec<_> = line(7, 0.05, Vec3::zero()).into_iter().map(|p| still(p, true)).collect();
        states[4].open = false;
        states[5].open = false;
        states[6].open = false;
        let demo_a = demo_from(states);
        let states_b: Vec<_> = line(5, 0.05, Vec3::new(0.0, 0.1, 0.2))
            .into_iter()
            .map(|p| still(p, false))
            .collect();
        let demo_b = Demonstration::new(
            vec![tiny_obs(0.25); 5],
            states_b,
            0.1,
            "reach above the blue cube".into(),
            vec![2, 7, 3],
        )
        .unwrap();
        Dataset::build(vec![demo_a, demo_b], ExtractConfig::default())
    }

    #[test]
    fn dataset_roundtrips_bit_exactly() {
        let ds = two_demo_dataset();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &ds).unwrap();
        let back: Dataset<f64> = read_dataset(&mut Cursor::new(&bytes)).unwrap();
        assert_eq!(ds, back);
        // Writing again produces identical bytes (determinism of encoding).
        let mut again = Vec::new();
        write_dataset(&mut again, &back).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn shared_observations_are_stored_once() {
        let ds = two_demo_dataset();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &ds).unwrap();
        // 12 frames total but only 2 unique scenes: the file must embed
        // exactly 2 scene blocks, not one per frame.
        let embedded = bytes
            .windows(crate::scene::SCENE_MAGIC.len())
            .filter(|w| *w == crate::scene::SCENE_MAGIC)
            .count();
        assert_eq!(embedded, 2);
    }

    #[test]
    fn truncated_dataset_names_failing_record() {
        let ds = two_demo_dataset();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &ds).unwrap();
        // Cut inside the second record's payload.
        let mut first_record_end = 8 + 4 + 8 + 4 + 4;
        let payload0 = encode_demo(&ds.demos[0]).unwrap();
        first_record_end += 8 + payload0.len() + 8;
        let cut = first_record_end + 20;
        let err = read_dataset::<f64, _>(&mut Cursor::new(&bytes[..cut])).unwrap_err();
        assert!(matches!(err, KeyposeError::Truncated { record: 1 }), "{err}");
    }

    #[test]
    fn corrupted_payload_fails_checksum_with_record_index() {
        let ds = two_demo_dataset();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &ds).unwrap();
        let header = 8 + 4 + 8 + 4 + 4;
        bytes[header + 8 + 40] ^= 0x01;
        let err = read_dataset::<f64, _>(&mut Cursor::new(&bytes)).unwrap_err();
        assert!(matches!(err, KeyposeError::ChecksumMismatch { record: 0 }), "{err}");
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let ds = two_demo_dataset();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &ds).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            read_dataset::<f64, _>(&mut Cursor::new(&wrong)),
            Err(KeyposeError::BadMagic(_))
        ));
        let mut newer = bytes;
        newer[8] = 99;
        assert!(matches!(
            read_dataset::<f64, _>(&mut Cursor::new(&newer)),
            Err(KeyposeError::BadVersion(99))
        ));
    }

    #[test]
    fn crop_preserves_unprojection_geometry() {
        // Pixel (u,v) of the crop must unproject to the same world point as
        // pixel (u+ox, v+oy) of the original image.
        let mut rgb = Vec::new();
        for i in 0..16 {
            let v = i as f64 / 16.0;
            rgb.extend([v, v, v]);
        }
        let depth: Vec<f64> = (0..16).map(|i| 0.5 + 0.01 * i as f64).collect();
        let view = CameraView::new(4, 4, rgb, depth, test_camera(0.0)).unwrap();
        let obs = vec![view];
        let cropped = crop_at(&obs, 1, 2, 3, 2).unwrap();
        assert_eq!(cropped[0].height, 3);
        assert_eq!(cropped[0].width, 2);
        for y in 0..3 {
            for x in 0..2 {
                let src = (y + 1) * 4 + (x + 2);
                assert_eq!(cropped[0].depth[y * 2 + x], obs[0].depth[src]);
                assert_eq!(cropped[0].rgb[(y * 2 + x) * 3], obs[0].rgb[src * 3]);
                let d = obs[0].depth[src];
                let orig = obs[0].camera.unproject((x + 2) as f64, (y + 1) as f64, d);
                let crop = cropped[0].camera.unproject(x as f64, y as f64, d);
                assert!(orig.dist(crop) < 1e-12);
            }
        }
    }

    #[test]
    fn random_crop_rejects_oversized_output() {
        let obs = tiny_obs(0.2);
        let mut rng = rng_stream(9, "crop", 0);
        assert!(matches!(
            random_crop(&obs, 5, 4, &mut rng),
            Err(KeyposeError::CropTooLarge { .. })
        ));
        assert!(matches!(random_crop(&obs, 0, 2, &mut rng), Err(KeyposeError::EmptyCrop)));
        let ok = random_crop(&obs, 2, 3, &mut rng).unwrap();
        assert_eq!((ok[0].height, ok[0].width), (2, 3));
    }

    #[test]
    fn yaw_rotation_moves_cloud_and_actions_together() {
        let states: Vec<_> = line(4, 0.05, Vec3::new(0.1, 0.0, 0.3))
            .into_iter()
            .map(|p| still(p, true))
            .collect();
        let demo = demo_from(states);
        let center = Vec3::new(0.0, 0.0, 0.25);
        let angle = 0.7;
        let turned = yaw_rotate(&demo, angle, center).unwrap();
        let rot = Mat3::rot_z(angle);
        // End-effector positions rotate about the center…
        for (a, b) in demo.states.iter().zip(&turned.states) {
            let expect = rot.apply(a.pos - center) + center;
            assert!(expect.dist(b.pos) < 1e-12);
            assert!((b.rot.norm() - 1.0).abs() < 1e-12);
        }
        // …and so does any point lifted through the cameras: same pixel and
        // depth, world position rotated by exactly the same map.
        let v0 = &demo.observations[0][0];
        let v1 = &turned.observations[0][0];
        let p0 = v0.camera.unproject(1.0, 2.0, 0.8);
        let p1 = v1.camera.unproject(1.0, 2.0, 0.8);
        let expect = rot.apply(p0 - center) + center;
        assert!(expect.dist(p1) < 1e-12);
    }
}
